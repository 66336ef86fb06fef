#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sp/tensor.hpp"

namespace sp {

/// Frozen class-name embeddings g(y_text): name -> vector of length dim().
/// Lookups never mutate the table and a missing name is always an error.
class ClassEmbeddingTable {
 public:
  explicit ClassEmbeddingTable(std::size_t dim);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  void add(const std::string& name, Tensor vector);
  const Tensor& at(const std::string& name) const;
  std::vector<std::string> names() const;  // sorted

  // Stacks the embeddings of `names` into (names.size(), dim).
  Tensor lookup(std::span<const std::string> names) const;

  friend bool operator==(const ClassEmbeddingTable&, const ClassEmbeddingTable&) = default;

 private:
  std::size_t dim_;
  std::map<std::string, Tensor> entries_;
};

// Text format: "dim <D>" then "<name>\t<v1> <v2> ... <vD>" per line;
// lines starting with '#' and blank lines are ignored.
ClassEmbeddingTable parse_embeddings(std::istream& in, const std::string& source);
ClassEmbeddingTable load_embeddings(const std::filesystem::path& path);
void save_embeddings(const std::filesystem::path& path, const ClassEmbeddingTable& table);

// Unit vectors seeded by hash(name) ^ seed.
ClassEmbeddingTable synth_embeddings(std::span<const std::string> names, std::size_t dim,
                                     std::uint64_t seed);

// Unit vectors A * latent + noise * u(name), with A a fixed random map drawn
// from `seed`. Classes with nearby latents get nearby embeddings, so the
// vectors carry class information the way real text embeddings do.
ClassEmbeddingTable synth_aligned_embeddings(std::span<const std::string> names,
                                             std::span<const Tensor> latents,
                                             std::size_t dim, std::uint64_t seed,
                                             double noise = 0.1);

}  // namespace sp
