#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sp/tensor.hpp"

namespace sp {

using KeyValues = std::map<std::string, std::string>;

inline constexpr char kMagic[] = "SPFSL1";

/// Container shared by checkpoints and dataset image files:
///   "SPFSL1\n", UTF-8 key=value lines, a blank line, then named blocks
///   (u32 name length, name bytes, u32 rank, u32 dims..., f64 payload),
///   all little-endian, until end of file.
struct BlockFile {
  KeyValues meta;
  std::vector<std::pair<std::string, Tensor>> blocks;

  const Tensor& block(const std::string& name) const;
};

void write_block_file(const std::filesystem::path& path, const BlockFile& file);
BlockFile read_block_file(const std::filesystem::path& path);

std::string format_double(double v);  // shortest exact round-trip form

// Typed lookups with defaults; malformed values raise ParseError.
std::size_t kv_size(const KeyValues& kv, const std::string& key, std::size_t fallback);
double kv_double(const KeyValues& kv, const std::string& key, double fallback);
std::string kv_string(const KeyValues& kv, const std::string& key,
                      const std::string& fallback);

}  // namespace sp
