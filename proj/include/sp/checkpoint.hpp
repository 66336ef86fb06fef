#pragma once

#include <filesystem>
#include <optional>

#include "sp/encoder.hpp"
#include "sp/prompt.hpp"

namespace sp {

struct Checkpoint {
  Encoder encoder;
  std::optional<PromptModule> prompt;
  KeyValues extra;  // free-form metadata carried in the header
};

// Header holds the model (and prompt) configuration plus `extra`; every
// parameter is stored as a named block. Round-trips bitwise.
void save_checkpoint(const std::filesystem::path& path, const Encoder& encoder,
                     const PromptModule* prompt = nullptr, const KeyValues& extra = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sp
