#include "sp/embeddings.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

#include "sp/rng.hpp"
#include "sp/serialize.hpp"

namespace sp {

ClassEmbeddingTable::ClassEmbeddingTable(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw ConfigError("embedding dimension must be positive");
}

void ClassEmbeddingTable::add(const std::string& name, Tensor vector) {
  if (name.empty()) throw InputError("empty class name");
  if (vector.size() != dim_) {
    throw ShapeError("embedding for '" + name + "' has " + std::to_string(vector.size()) +
                     " values, table dim is " + std::to_string(dim_));
  }
  require_finite(vector, "class embedding");
  if (!entries_.emplace(name, vector.reshaped({dim_})).second) {
    throw InputError("duplicate class name '" + name + "'");
  }
}

const Tensor& ClassEmbeddingTable::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw InputError("no embedding for class '" + name + "'");
  return it->second;
}

std::vector<std::string> ClassEmbeddingTable::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

Tensor ClassEmbeddingTable::lookup(std::span<const std::string> names) const {
  Tensor out({names.size(), dim_});
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& v = at(names[i]);
    std::copy(v.data(), v.data() + dim_, out.data() + i * dim_);
  }
  return out;
}

ClassEmbeddingTable parse_embeddings(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 0;
  std::optional<ClassEmbeddingTable> table;
  auto fail = [&](const std::string& what) {
    throw ParseError(source + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!table) {
      std::istringstream hs(line);
      std::string key;
      std::size_t dim = 0;
      std::string rest;
      if (!(hs >> key >> dim) || key != "dim" || dim == 0 || (hs >> rest)) {
        fail("expected header 'dim <D>', got '" + line + "'");
      }
      table.emplace(dim);
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) fail("expected '<name>\\t<values>'");
    const std::string name = line.substr(0, tab);
    std::vector<double> values;
    const char* p = line.data() + tab + 1;
    const char* end = line.data() + line.size();
    while (p < end) {
      while (p < end && (*p == ' ' || *p == '\t')) ++p;
      if (p == end) break;
      double v = 0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) fail("malformed number in entry '" + name + "'");
      values.push_back(v);
      p = next;
    }
    if (values.size() != table->dim()) {
      fail("entry '" + name + "' has " + std::to_string(values.size()) +
           " values, expected " + std::to_string(table->dim()));
    }
    if (table->contains(name)) fail("duplicate class name '" + name + "'");
    try {
      const std::size_t n = values.size();
      table->add(name, Tensor({n}, std::move(values)));
    } catch (const Error& e) {
      fail(e.what());
    }
  }
  if (!table) throw ParseError(source + ": missing 'dim <D>' header");
  return std::move(*table);
}

ClassEmbeddingTable load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings file " + path.string());
  return parse_embeddings(in, path.string());
}

void save_embeddings(const std::filesystem::path& path, const ClassEmbeddingTable& table) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "dim " << table.dim() << '\n';
  for (const auto& name : table.names()) {
    if (name.find_first_of("\t\n") != std::string::npos) {
      throw InputError("class name '" + name + "' contains a tab or newline");
    }
    out << name << '\t';
    const Tensor& v = table.at(name);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out << ' ';
      out << format_double(v[i]);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

Tensor unit_vector(std::size_t dim, Rng& rng) {
  Tensor v({dim});
  double norm = 0.0;
  while (norm == 0.0) {
    for (double& x : v.storage()) x = rng.normal();
    norm = v.mat().norm();
  }
  v.mat() /= norm;
  return v;
}

}  // namespace

ClassEmbeddingTable synth_embeddings(std::span<const std::string> names, std::size_t dim,
                                     std::uint64_t seed) {
  if (dim < 2) throw ConfigError("synthetic embeddings need dim >= 2");
  ClassEmbeddingTable table(dim);
  for (const auto& name : names) {
    Rng rng(hash_name(name) ^ splitmix64(seed));
    table.add(name, unit_vector(dim, rng));
  }
  return table;
}

ClassEmbeddingTable synth_aligned_embeddings(std::span<const std::string> names,
                                             std::span<const Tensor> latents,
                                             std::size_t dim, std::uint64_t seed,
                                             double noise) {
  if (dim < 2) throw ConfigError("synthetic embeddings need dim >= 2");
  if (names.size() != latents.size()) {
    throw InputError("aligned embeddings need one latent per class name");
  }
  ClassEmbeddingTable table(dim);
  if (names.empty()) return table;
  const std::size_t k = latents[0].size();
  Rng map_rng(derive_seed(seed, 0xa11e));
  RowMatrix a(dim, k);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = map_rng.normal() / std::sqrt(double(k));
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (latents[i].size() != k) throw ShapeError("latent vectors differ in length");
    Rng rng(hash_name(names[i]) ^ splitmix64(seed));
    Tensor u = unit_vector(dim, rng);
    Tensor v({dim});
    v.mat() = (a * latents[i].mat().transpose()).transpose();
    const double n = v.mat().norm();
    if (n > 0) v.mat() /= n;
    v.mat() += noise * u.mat();
    v.mat() /= v.mat().norm();
    table.add(names[i], std::move(v));
  }
  return table;
}

}  // namespace sp
