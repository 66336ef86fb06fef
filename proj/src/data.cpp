#include "sp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>

#include "sp/rng.hpp"
#include "sp/serialize.hpp"

namespace sp {

void Split::add(DatasetRecord record) {
  if (record.class_name.empty()) throw InputError("record without class name");
  auto [it, inserted] = names_.emplace(record.class_id, record.class_name);
  if (!inserted && it->second != record.class_name) {
    throw InputError("class id " + std::to_string(record.class_id) + " named both '" +
                     it->second + "' and '" + record.class_name + "'");
  }
  if (inserted) {
    for (const auto& [id, name] : names_) {
      if (id != record.class_id && name == record.class_name) {
        throw InputError("class name '" + name + "' used by two class ids");
      }
    }
    class_ids_.insert(std::upper_bound(class_ids_.begin(), class_ids_.end(), record.class_id),
                      record.class_id);
  }
  by_class_[record.class_id].push_back(records_.size());
  records_.push_back(std::move(record));
}

const std::vector<std::size_t>& Split::indices_of(std::size_t class_id) const {
  auto it = by_class_.find(class_id);
  if (it == by_class_.end()) {
    throw InputError("class id " + std::to_string(class_id) + " not in split");
  }
  return it->second;
}

const std::string& Split::class_name(std::size_t class_id) const {
  auto it = names_.find(class_id);
  if (it == names_.end()) {
    throw InputError("class id " + std::to_string(class_id) + " not in split");
  }
  return it->second;
}

std::vector<std::string> Split::class_names() const {
  std::vector<std::string> out;
  for (auto id : class_ids_) out.push_back(names_.at(id));
  return out;
}

bool operator==(const Split& a, const Split& b) { return a.records_ == b.records_; }

const Split& SplitDataset::split(const std::string& name) const {
  if (name == "base") return base;
  if (name == "val" || name == "validation") return validation;
  if (name == "novel") return novel;
  throw ConfigError("unknown split '" + name + "' (base|val|novel)");
}

namespace {

std::string class_word(std::size_t id) {
  static constexpr const char* kSyllables[] = {"ba", "ke", "lo", "mi", "nu", "po", "ra", "si",
                                               "tu", "ve", "zo", "da", "fi", "go", "hu", "ja"};
  std::string word;
  std::size_t v = id;
  for (int i = 0; i < 3 || v > 0; ++i) {
    word += kSyllables[v % 16];
    v /= 16;
  }
  return word;
}

double squash(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor render_pattern(const RowMatrix& basis, const Tensor& latent, double gain) {
  Tensor pattern({std::size_t(basis.rows())});
  pattern.mat() = (basis * latent.mat().transpose()).transpose();
  for (double& v : pattern.storage()) v = squash(gain * v);
  return pattern;
}

void paste(Tensor& image, const Tensor& pattern, std::size_t cell, std::size_t cell_size,
           double intensity) {
  const std::size_t w = image.dim(1), c = image.dim(2);
  const std::size_t grid = w / cell_size;
  const std::size_t y0 = (cell / grid) * cell_size, x0 = (cell % grid) * cell_size;
  for (std::size_t dy = 0; dy < cell_size; ++dy) {
    for (std::size_t dx = 0; dx < cell_size; ++dx) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        image[((y0 + dy) * w + x0 + dx) * c + ch] =
            intensity * pattern[(dy * cell_size + dx) * c + ch];
      }
    }
  }
}

}  // namespace

SplitDataset generate_synthetic_dataset(std::size_t num_classes, std::size_t per_class,
                                        const SyntheticConfig& cfg, std::uint64_t seed) {
  if (num_classes < 4) throw ConfigError("synthetic dataset needs at least 4 classes");
  if (per_class == 0) throw ConfigError("per_class must be positive");
  if (cfg.cell_size == 0 || cfg.image_size % cfg.cell_size != 0) {
    throw ConfigError("image_size must be a multiple of cell_size");
  }
  const std::size_t grid = cfg.image_size / cfg.cell_size;
  const std::size_t cells = grid * grid;
  if (cfg.min_motifs == 0 || cfg.min_motifs > cfg.max_motifs || cfg.max_motifs > cells) {
    throw ConfigError("motif count range must lie in [1, cells]");
  }
  if (cfg.distractor_pool == 0) throw ConfigError("distractor_pool must be positive");

  Rng rng(derive_seed(seed, 0xda7a));
  const std::size_t pattern_dim = cfg.cell_size * cfg.cell_size * cfg.channels;
  RowMatrix basis(pattern_dim, cfg.latent_dim);
  for (Eigen::Index i = 0; i < basis.size(); ++i) {
    basis.data()[i] = rng.normal() / std::sqrt(double(cfg.latent_dim));
  }
  auto random_latent = [&](Rng& r) {
    Tensor t({cfg.latent_dim});
    for (double& v : t.storage()) v = r.normal();
    return t;
  };

  std::vector<Tensor> distractors;
  for (std::size_t i = 0; i < cfg.distractor_pool; ++i) {
    distractors.push_back(render_pattern(basis, random_latent(rng), cfg.motif_gain));
  }

  SplitDataset data;
  std::size_t n_base = std::size_t(std::lround(double(num_classes) * cfg.base_fraction));
  std::size_t n_val = std::size_t(std::lround(double(num_classes) * cfg.validation_fraction));
  n_base = std::clamp<std::size_t>(n_base, 1, num_classes - 2);
  n_val = std::clamp<std::size_t>(n_val, 1, num_classes - n_base - 1);

  for (std::size_t id = 0; id < num_classes; ++id) {
    data.classes.push_back({id, class_word(id), random_latent(rng)});
  }
  for (std::size_t id = 0; id < num_classes; ++id) {
    const ClassInfo& info = data.classes[id];
    Split& split = id < n_base ? data.base : (id < n_base + n_val ? data.validation : data.novel);
    Rng crng(derive_seed(seed, 0xc1a55, id));
    for (std::size_t n = 0; n < per_class; ++n) {
      Tensor latent = info.latent;
      for (double& v : latent.storage()) v += cfg.motif_jitter * crng.normal();
      const Tensor motif = render_pattern(basis, latent, cfg.motif_gain);

      Tensor image({cfg.image_size, cfg.image_size, cfg.channels});
      const std::size_t count =
          cfg.min_motifs + crng.below(cfg.max_motifs - cfg.min_motifs + 1);
      std::vector<std::size_t> order = crng.choose(cells, cells);
      std::vector<std::size_t> motif_cells(order.begin(), order.begin() + long(count));
      for (std::size_t cell : motif_cells) {
        paste(image, motif, cell, cfg.cell_size, crng.uniform(0.8, 1.0));
      }
      for (std::size_t i = count; i < cells; ++i) {
        if (!crng.bernoulli(cfg.clutter_prob)) continue;
        const Tensor& d = distractors[crng.below(distractors.size())];
        paste(image, d, order[i], cfg.cell_size, crng.uniform(0.8, 1.0));
      }
      for (double& v : image.storage()) {
        v = std::clamp(v + cfg.pixel_noise * crng.normal(), 0.0, 1.0);
      }
      std::sort(motif_cells.begin(), motif_cells.end());
      split.add({std::move(image), id, info.name, std::move(motif_cells)});
    }
  }
  return data;
}

std::vector<std::vector<std::size_t>> Episode::support_groups() const {
  std::vector<std::vector<std::size_t>> groups(way);
  for (std::size_t i = 0; i < support.size(); ++i) groups[support[i].label].push_back(i);
  return groups;
}

std::vector<std::size_t> Episode::query_labels() const {
  std::vector<std::size_t> labels;
  for (const auto& q : query) labels.push_back(q.label);
  return labels;
}

Episode sample_episode(const Split& split, std::size_t way, std::size_t shot,
                       std::size_t queries_per_class, std::uint64_t seed) {
  if (way == 0 || shot == 0) throw InputError("episode needs way >= 1 and shot >= 1");
  const auto& ids = split.class_ids();
  if (ids.size() < way) {
    throw InputError("split has " + std::to_string(ids.size()) + " classes, episode needs " +
                     std::to_string(way));
  }
  Rng rng(derive_seed(seed, 0xe915));
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries_per_class = queries_per_class;
  ep.seed = seed;
  for (std::size_t pick : rng.choose(ids.size(), way)) ep.class_ids.push_back(ids[pick]);
  for (std::size_t label = 0; label < way; ++label) {
    const auto& members = split.indices_of(ep.class_ids[label]);
    const std::size_t need = shot + queries_per_class;
    if (members.size() < need) {
      throw InputError("class '" + split.class_name(ep.class_ids[label]) + "' has " +
                       std::to_string(members.size()) + " records, episode needs " +
                       std::to_string(need));
    }
    const auto picks = rng.choose(members.size(), need);
    for (std::size_t i = 0; i < need; ++i) {
      EpisodeItem item{members[picks[i]], label};
      (i < shot ? ep.support : ep.query).push_back(item);
    }
  }
  return ep;
}

std::vector<Prototype> compute_prototypes(
    const std::vector<std::pair<std::string, std::vector<Tensor>>>& support_features) {
  std::vector<Prototype> out;
  for (const auto& [name, feats] : support_features) {
    if (feats.empty()) throw InputError("class '" + name + "' has no support features");
    Tensor mean({feats[0].size()});
    for (const auto& f : feats) {
      if (f.size() != mean.size()) throw ShapeError("support features differ in length");
      mean.mat() += f.mat();
    }
    mean.mat() /= double(feats.size());
    out.push_back({name, std::move(mean)});
  }
  return out;
}

namespace {

constexpr const char* kSplitNames[] = {"base", "val", "novel"};

const Split& split_by_index(const SplitDataset& d, int i) {
  return i == 0 ? d.base : (i == 1 ? d.validation : d.novel);
}

Split& split_by_index(SplitDataset& d, int i) {
  return i == 0 ? d.base : (i == 1 ? d.validation : d.novel);
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const SplitDataset& data) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "classes.tsv", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "classes.tsv").string());
    for (const auto& c : data.classes) out << c.class_id << '\t' << c.name << '\n';
  }
  std::ofstream rec(dir / "records.tsv", std::ios::trunc);
  if (!rec) throw IoError("cannot write " + (dir / "records.tsv").string());
  rec << "split\tindex\tclass_id\tmotif_cells\n";
  for (int s = 0; s < 3; ++s) {
    const Split& split = split_by_index(data, s);
    BlockFile images;
    images.meta["split"] = kSplitNames[s];
    images.meta["count"] = std::to_string(split.size());
    for (std::size_t i = 0; i < split.size(); ++i) {
      const auto& r = split[i];
      rec << kSplitNames[s] << '\t' << i << '\t' << r.class_id << '\t';
      for (std::size_t k = 0; k < r.motif_cells.size(); ++k) {
        rec << (k ? "," : "") << r.motif_cells[k];
      }
      rec << '\n';
      images.blocks.emplace_back(std::to_string(i), r.image);
    }
    write_block_file(dir / (std::string("images_") + kSplitNames[s] + ".bin"), images);
  }
  BlockFile latents;
  latents.meta["kind"] = "class_latents";
  for (const auto& c : data.classes) {
    latents.blocks.emplace_back(std::to_string(c.class_id), c.latent);
  }
  write_block_file(dir / "latents.bin", latents);
}

SplitDataset load_dataset(const std::filesystem::path& dir) {
  SplitDataset data;
  std::map<std::size_t, std::string> names;
  {
    std::ifstream in(dir / "classes.tsv");
    if (!in) throw IoError("cannot open " + (dir / "classes.tsv").string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      std::size_t id = 0;
      std::istringstream ids(line.substr(0, tab));
      if (tab == std::string::npos || !(ids >> id) || tab + 1 >= line.size()) {
        throw ParseError("classes.tsv:" + std::to_string(lineno) + ": expected 'id<TAB>name'");
      }
      if (!names.emplace(id, line.substr(tab + 1)).second) {
        throw ParseError("classes.tsv:" + std::to_string(lineno) + ": duplicate class id");
      }
    }
  }
  std::map<std::size_t, Tensor> latents;
  if (std::filesystem::exists(dir / "latents.bin")) {
    for (auto& [name, t] : read_block_file(dir / "latents.bin").blocks) {
      latents[std::stoul(name)] = t;
    }
  }
  for (const auto& [id, name] : names) {
    auto it = latents.find(id);
    data.classes.push_back({id, name, it == latents.end() ? Tensor() : it->second});
  }

  std::ifstream rec(dir / "records.tsv");
  if (!rec) throw IoError("cannot open " + (dir / "records.tsv").string());
  std::string line;
  std::getline(rec, line);  // header
  std::vector<std::vector<std::tuple<std::size_t, std::size_t, std::vector<std::size_t>>>> rows(3);
  std::size_t lineno = 1;
  while (std::getline(rec, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string split_name, cells_field;
    std::size_t index = 0, class_id = 0;
    if (!std::getline(ls, split_name, '\t') || !(ls >> index >> class_id)) {
      throw ParseError("records.tsv:" + std::to_string(lineno) + ": malformed record");
    }
    ls.ignore(1);
    std::getline(ls, cells_field);
    std::vector<std::size_t> cells;
    std::istringstream cs(cells_field);
    std::string tok;
    while (std::getline(cs, tok, ',')) {
      if (!tok.empty()) cells.push_back(std::stoul(tok));
    }
    const auto pos = std::find(std::begin(kSplitNames), std::end(kSplitNames), split_name);
    if (pos == std::end(kSplitNames)) {
      throw ParseError("records.tsv:" + std::to_string(lineno) + ": unknown split '" +
                       split_name + "'");
    }
    if (!names.count(class_id)) {
      throw ParseError("records.tsv:" + std::to_string(lineno) + ": unknown class id");
    }
    rows[std::size_t(pos - std::begin(kSplitNames))].emplace_back(index, class_id,
                                                                  std::move(cells));
  }
  for (int s = 0; s < 3; ++s) {
    const BlockFile images =
        read_block_file(dir / (std::string("images_") + kSplitNames[s] + ".bin"));
    for (auto& [index, class_id, cells] : rows[std::size_t(s)]) {
      split_by_index(data, s).add(
          {images.block(std::to_string(index)), class_id, names.at(class_id), std::move(cells)});
    }
  }
  return data;
}

}  // namespace sp
