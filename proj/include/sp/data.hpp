#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sp/tensor.hpp"

namespace sp {

struct DatasetRecord {
  Tensor image;  // (H, W, C), values in [0, 1]
  std::size_t class_id = 0;
  std::string class_name;
  // Ground-truth grid cells (row-major patch index) holding the class motif;
  // empty for data loaded from outside the generator.
  std::vector<std::size_t> motif_cells;

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

/// Records of one split with a per-class index.
class Split {
 public:
  void add(DatasetRecord record);

  const std::vector<DatasetRecord>& records() const { return records_; }
  const DatasetRecord& operator[](std::size_t i) const { return records_[i]; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  const std::vector<std::size_t>& class_ids() const { return class_ids_; }  // ascending
  const std::vector<std::size_t>& indices_of(std::size_t class_id) const;
  const std::string& class_name(std::size_t class_id) const;
  std::vector<std::string> class_names() const;  // in class_ids() order

  friend bool operator==(const Split& a, const Split& b);

 private:
  std::vector<DatasetRecord> records_;
  std::vector<std::size_t> class_ids_;
  std::map<std::size_t, std::vector<std::size_t>> by_class_;
  std::map<std::size_t, std::string> names_;
};

struct ClassInfo {
  std::size_t class_id = 0;
  std::string name;
  Tensor latent;  // generator parameters of the class motif

  friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

struct SplitDataset {
  Split base;
  Split validation;
  Split novel;
  std::vector<ClassInfo> classes;  // by class_id

  const Split& split(const std::string& name) const;  // base|val|novel
  friend bool operator==(const SplitDataset&, const SplitDataset&) = default;
};

struct SyntheticConfig {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t cell_size = 4;      // motif/clutter granularity; match the patch size
  std::size_t latent_dim = 8;
  std::size_t min_motifs = 2;
  std::size_t max_motifs = 3;
  std::size_t distractor_pool = 12;
  double clutter_prob = 0.8;      // per free cell
  double pixel_noise = 0.15;
  double motif_gain = 2.5;
  double motif_jitter = 0.6;      // per-image latent perturbation
  double base_fraction = 0.6;
  double validation_fraction = 0.2;
};

// Each class owns a motif pattern generated from a latent vector; images
// carry the motif in 2-3 random cells plus clutter from a distractor pool
// shared by all classes. Splits are disjoint by class. Deterministic in seed.
SplitDataset generate_synthetic_dataset(std::size_t num_classes, std::size_t per_class,
                                        const SyntheticConfig& cfg, std::uint64_t seed);

struct EpisodeItem {
  std::size_t record = 0;  // index into the split
  std::size_t label = 0;   // episode-local class index in [0, way)
};

struct Episode {
  std::size_t way = 0, shot = 0, queries_per_class = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> class_ids;  // label -> class_id
  std::vector<EpisodeItem> support;    // grouped by label, `shot` each
  std::vector<EpisodeItem> query;      // grouped by label

  std::vector<std::vector<std::size_t>> support_groups() const;
  std::vector<std::size_t> query_labels() const;
};

// Uniform choice of `way` classes without replacement, then K support and
// Q query records per class without overlap. Pure in (split, N, K, Q, seed).
Episode sample_episode(const Split& split, std::size_t way, std::size_t shot,
                       std::size_t queries_per_class, std::uint64_t seed);

struct Prototype {
  std::string class_name;
  Tensor vector;
};

// Arithmetic mean of each class's support features.
std::vector<Prototype> compute_prototypes(
    const std::vector<std::pair<std::string, std::vector<Tensor>>>& support_features);

// Directory layout: classes.tsv (id TAB name), records.tsv (split, index,
// class id, motif cells), latents.bin and one block file per split.
void save_dataset(const std::filesystem::path& dir, const SplitDataset& data);
SplitDataset load_dataset(const std::filesystem::path& dir);

}  // namespace sp
