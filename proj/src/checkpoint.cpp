#include "sp/checkpoint.hpp"

namespace sp {

void save_checkpoint(const std::filesystem::path& path, const Encoder& encoder,
                     const PromptModule* prompt, const KeyValues& extra) {
  BlockFile file;
  file.meta = encoder.config().to_key_values();
  if (prompt != nullptr) file.meta.merge(prompt->config().to_key_values());
  for (const auto& [k, v] : extra) file.meta["extra." + k] = v;
  for (const Parameter* p : encoder.parameters()) file.blocks.emplace_back(p->name, p->value);
  if (prompt != nullptr) {
    for (const Parameter* p : prompt->parameters()) file.blocks.emplace_back(p->name, p->value);
  }
  write_block_file(path, file);
}

namespace {

void assign(const BlockFile& file, std::vector<Parameter*> params,
            const std::filesystem::path& path) {
  for (Parameter* p : params) {
    const Tensor* found = nullptr;
    for (const auto& [name, t] : file.blocks) {
      if (name == p->name) found = &t;
    }
    if (found == nullptr) {
      throw ParseError(path.string() + ": checkpoint lacks parameter '" + p->name + "'");
    }
    if (found->shape() != p->value.shape()) {
      throw ShapeError(path.string() + ": parameter '" + p->name + "' has shape " +
                       shape_str(found->shape()) + ", model expects " +
                       shape_str(p->value.shape()));
    }
    p->value = *found;
    p->zero_grad();
  }
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const BlockFile file = read_block_file(path);
  const ModelConfig mc = ModelConfig::from_key_values(file.meta);
  Checkpoint ck{Encoder(mc, 0), std::nullopt, {}};
  assign(file, ck.encoder.parameters(), path);
  if (file.meta.count("prompt.mechanism")) {
    ck.prompt.emplace(PromptConfig::from_key_values(file.meta, mc), mc, 0);
    assign(file, ck.prompt->parameters(), path);
  }
  for (const auto& [k, v] : file.meta) {
    if (k.rfind("extra.", 0) == 0) ck.extra[k.substr(6)] = v;
  }
  return ck;
}

}  // namespace sp
