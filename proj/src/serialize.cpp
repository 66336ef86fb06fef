#include "sp/serialize.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sp {

static_assert(std::endian::native == std::endian::little,
              "block files are written in host order; big-endian hosts need swapping");

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw ParseError(path.string() + ": truncated block header");
  }
  return v;
}

}  // namespace

const Tensor& BlockFile::block(const std::string& name) const {
  for (const auto& [n, t] : blocks) {
    if (n == name) return t;
  }
  throw ParseError("missing block '" + name + "'");
}

void write_block_file(const std::filesystem::path& path, const BlockFile& file) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << kMagic << '\n';
  for (const auto& [k, v] : file.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ConfigError("unserialisable metadata key '" + k + "'");
    }
    os << k << '=' << v << '\n';
  }
  os << '\n';
  for (const auto& [name, t] : file.blocks) {
    put_u32(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    put_u32(os, std::uint32_t(t.rank()));
    for (auto d : t.shape()) put_u32(os, std::uint32_t(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             std::streamsize(t.size() * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

BlockFile read_block_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMagic) {
    throw ParseError(path.string() + ": bad magic, expected " + kMagic);
  }
  BlockFile file;
  while (true) {
    if (!std::getline(is, line)) throw ParseError(path.string() + ": unterminated header");
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(path.string() + ": header line without '=': " + line);
    }
    file.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto name_len = get_u32(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw ParseError(path.string() + ": truncated name");
    const auto rank = get_u32(is, path);
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = get_u32(is, path);
      count *= d;
    }
    std::vector<double> data(count);
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 std::streamsize(count * sizeof(double)))) {
      throw ParseError(path.string() + ": truncated payload of '" + name + "'");
    }
    file.blocks.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return file;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::size_t kv_size(const KeyValues& kv, const std::string& key, std::size_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  std::size_t v = 0;
  const auto& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ParseError("'" + key + "' expects a non-negative integer, got '" + s + "'");
  }
  return v;
}

double kv_double(const KeyValues& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  double v = 0;
  const auto& s = it->second;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ParseError("'" + key + "' expects a number, got '" + s + "'");
  }
  return v;
}

std::string kv_string(const KeyValues& kv, const std::string& key,
                      const std::string& fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

}  // namespace sp
