#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "sp/core_math.hpp"
#include "sp/data.hpp"

using namespace sp;

namespace {

const SplitDataset& small_dataset() {
  static const SplitDataset data = generate_synthetic_dataset(20, 12, SyntheticConfig{}, 7);
  return data;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sp_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("synthetic generation is deterministic in its seed") {
  const SplitDataset a = generate_synthetic_dataset(20, 12, SyntheticConfig{}, 7);
  CHECK(a == small_dataset());
  const SplitDataset b = generate_synthetic_dataset(20, 12, SyntheticConfig{}, 8);
  CHECK_FALSE(a == b);
}

TEST_CASE("splits are disjoint by class and names map one-to-one") {
  const SplitDataset& d = small_dataset();
  std::set<std::string> seen;
  std::size_t total = 0;
  for (const Split* s : {&d.base, &d.validation, &d.novel}) {
    const auto names = s->class_names();
    total += names.size();
    for (const auto& n : names) CHECK(seen.insert(n).second);
    for (std::size_t id : s->class_ids()) {
      for (std::size_t idx : s->indices_of(id)) CHECK((*s)[idx].class_name == s->class_name(id));
    }
  }
  CHECK(total == 20);
  CHECK(d.base.class_ids().size() == 12);
  CHECK(d.validation.class_ids().size() == 4);
  CHECK(d.novel.class_ids().size() == 4);
  CHECK(d.classes.size() == 20);
}

TEST_CASE("images are in range and carry 2-3 motif cells") {
  const SplitDataset& d = small_dataset();
  for (const auto& r : d.base.records()) {
    CHECK(r.image.shape() == Shape{16, 16, 1});
    for (double v : r.image.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(r.motif_cells.size() >= 2);
    CHECK(r.motif_cells.size() <= 3);
    CHECK(std::set<std::size_t>(r.motif_cells.begin(), r.motif_cells.end()).size() ==
          r.motif_cells.size());
  }
}

TEST_CASE("generator rejects too few classes") {
  CHECK_THROWS_AS(generate_synthetic_dataset(3, 10, SyntheticConfig{}, 1), ConfigError);
}

TEST_CASE("split mapping rejects a name reused by another id") {
  Split s;
  s.add({Tensor({2, 2, 1}), 0, "alpha", {}});
  CHECK_THROWS_AS(s.add({Tensor({2, 2, 1}), 1, "alpha", {}}), InputError);
  CHECK_THROWS_AS(s.add({Tensor({2, 2, 1}), 0, "beta", {}}), InputError);
}

TEST_CASE("episodes have the requested composition and never overlap") {
  const Split& base = small_dataset().base;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Episode ep = sample_episode(base, 5, 2, 3, seed);
    REQUIRE(ep.support.size() == 10);
    REQUIRE(ep.query.size() == 15);
    CHECK(std::set<std::size_t>(ep.class_ids.begin(), ep.class_ids.end()).size() == 5);
    std::set<std::size_t> support;
    for (const auto& it : ep.support) {
      support.insert(it.record);
      CHECK(base[it.record].class_id == ep.class_ids[it.label]);
    }
    CHECK(support.size() == 10);
    for (const auto& it : ep.query) {
      CHECK(support.count(it.record) == 0);
      CHECK(base[it.record].class_id == ep.class_ids[it.label]);
    }
  }
}

TEST_CASE("episode sampling is a pure function of its inputs") {
  const Split& base = small_dataset().base;
  const Episode a = sample_episode(base, 5, 1, 4, 99);
  const Episode b = sample_episode(base, 5, 1, 4, 99);
  CHECK(a.class_ids == b.class_ids);
  for (std::size_t i = 0; i < a.query.size(); ++i) CHECK(a.query[i].record == b.query[i].record);
  CHECK(sample_episode(base, 5, 1, 4, 100).class_ids != a.class_ids);
}

TEST_CASE("episode with every class uses each exactly once") {
  const Split& val = small_dataset().validation;
  const Episode ep = sample_episode(val, 4, 1, 1, 3);
  std::vector<std::size_t> ids = ep.class_ids;
  std::sort(ids.begin(), ids.end());
  CHECK(ids == val.class_ids());
}

TEST_CASE("episode sampling reports impossible requests") {
  const Split& val = small_dataset().validation;
  CHECK_THROWS_AS(sample_episode(val, 5, 1, 1, 0), InputError);
  CHECK_THROWS_AS(sample_episode(val, 2, 6, 7, 0), InputError);
}

TEST_CASE("class frequencies are uniform within three binomial sigmas") {
  const Split& base = small_dataset().base;  // 12 classes
  const int trials = 10000;
  std::map<std::size_t, int> counts;
  for (int t = 0; t < trials; ++t) {
    for (std::size_t id : sample_episode(base, 5, 1, 1, std::uint64_t(t)).class_ids) ++counts[id];
  }
  const double p = 5.0 / 12.0;
  const double mean = trials * p, sigma = std::sqrt(trials * p * (1 - p));
  REQUIRE(counts.size() == 12);
  for (const auto& [id, c] : counts) CHECK(std::abs(c - mean) <= 3 * sigma);
}

TEST_CASE("prototypes are exact class means") {
  Rng r(1);
  std::vector<Tensor> feats;
  for (int i = 0; i < 5; ++i) feats.push_back(normal_tensor({4}, 1.0, r));
  const auto protos = compute_prototypes({{"a", feats}, {"b", {feats[0]}}});
  REQUIRE(protos.size() == 2);
  for (std::size_t j = 0; j < 4; ++j) {
    double s = 0;
    for (const auto& f : feats) s += f[j];
    CHECK(protos[0].vector[j] == doctest::Approx(s / 5).epsilon(1e-15));
  }
  CHECK(protos[1].vector == feats[0]);
  const auto twin = compute_prototypes({{"c", {feats[1], feats[1]}}});
  CHECK(twin[0].vector == feats[1]);
  CHECK_THROWS_AS(compute_prototypes({{"d", {}}}), InputError);
}

TEST_CASE("prototypes do not depend on support order") {
  Rng r(2);
  std::vector<Tensor> feats;
  for (int i = 0; i < 4; ++i) feats.push_back(normal_tensor({4}, 1.0, r));
  std::vector<Tensor> rev(feats.rbegin(), feats.rend());
  const auto a = compute_prototypes({{"x", feats}});
  const auto b = compute_prototypes({{"x", rev}});
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(a[0].vector[j] == doctest::Approx(b[0].vector[j]).epsilon(1e-15));
  }
}

TEST_CASE("dataset directory round trip is exact") {
  const auto dir = temp_dir("dataset");
  save_dataset(dir, small_dataset());
  CHECK(load_dataset(dir) == small_dataset());
  std::filesystem::remove_all(dir);
}

TEST_CASE("loading a dataset reports the bad file and line") {
  const auto dir = temp_dir("dataset_bad");
  save_dataset(dir, small_dataset());
  {
    std::ofstream out(dir / "classes.tsv", std::ios::app);
    out << "not a line\n";
  }
  CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("classes.tsv:21"), ParseError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a linear probe on raw pixels separates the base classes") {
  const SplitDataset d = generate_synthetic_dataset(64, 40, SyntheticConfig{}, 0);
  const Split& base = d.base;
  const auto ids = base.class_ids();
  const Eigen::Index n = Eigen::Index(base.size());
  const Eigen::Index p = Eigen::Index(base[0].image.size()) + 1;
  Eigen::MatrixXd x(n, p);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, Eigen::Index(ids.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& rec = base[std::size_t(i)];
    for (Eigen::Index j = 0; j + 1 < p; ++j) x(i, j) = rec.image[std::size_t(j)];
    x(i, p - 1) = 1.0;
    const auto label = std::lower_bound(ids.begin(), ids.end(), rec.class_id) - ids.begin();
    y(i, label) = 1.0;
  }
  // Multinomial logistic regression with a tiny ridge term, fitted by
  // Nesterov-accelerated gradient descent.
  const double step = double(n) / (0.5 * x.squaredNorm());
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(p, y.cols()), prev = w;
  for (int it = 0; it < 1000; ++it) {
    const Eigen::MatrixXd look = w + (double(it) / double(it + 3)) * (w - prev);
    Eigen::MatrixXd prob = x * look;
    for (Eigen::Index i = 0; i < n; ++i) {
      prob.row(i).array() -= prob.row(i).maxCoeff();
      prob.row(i) = prob.row(i).array().exp().matrix();
      prob.row(i) /= prob.row(i).sum();
    }
    const Eigen::MatrixXd grad = x.transpose() * (prob - y) / double(n) + 1e-4 * look;
    prev = w;
    w = look - step * grad;
  }
  const Eigen::MatrixXd scores = x * w;
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index arg;
    scores.row(i).maxCoeff(&arg);
    correct += y(i, arg) == 1.0;
  }
  const double acc = double(correct) / double(n);
  MESSAGE("linear probe base accuracy " << acc);
  CHECK(acc > 0.9);
}
