#include "sp/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "sp/rng.hpp"
#include "sp/serialize.hpp"

namespace sp {

std::string_view classifier_name(ClassifierKind k) {
  return k == ClassifierKind::nearest_prototype ? "nn" : "lr";
}

ClassifierKind parse_classifier(std::string_view s) {
  if (s == "nn") return ClassifierKind::nearest_prototype;
  if (s == "lr") return ClassifierKind::logistic_regression;
  throw ConfigError("unknown classifier '" + std::string(s) + "' (nn|lr)");
}

Tensor l2_normalize_rows(const Tensor& x) {
  Tensor out = x;
  auto m = out.mat();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (n == 0.0) throw NumericError("cannot normalise a zero feature vector");
    m.row(r) /= n;
  }
  return out;
}

std::vector<std::size_t> classify_cosine(const Tensor& queries, const Tensor& prototypes) {
  if (queries.cols() != prototypes.cols()) {
    throw ShapeError("query dim " + std::to_string(queries.cols()) + " != prototype dim " +
                     std::to_string(prototypes.cols()));
  }
  const Tensor q = l2_normalize_rows(queries);
  const Tensor p = l2_normalize_rows(prototypes);
  const RowMatrix sims = q.mat() * p.mat().transpose();
  std::vector<std::size_t> out(std::size_t(sims.rows()));
  for (Eigen::Index r = 0; r < sims.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < sims.cols(); ++c) {
      if (sims(r, c) > sims(r, best)) best = c;
    }
    out[std::size_t(r)] = std::size_t(best);
  }
  return out;
}

namespace {

RowMatrix with_bias_column(const Tensor& x) {
  RowMatrix a(Eigen::Index(x.rows()), Eigen::Index(x.cols() + 1));
  a.leftCols(Eigen::Index(x.cols())) = x.mat();
  a.col(a.cols() - 1).setOnes();
  return a;
}

void softmax_in_place(RowMatrix& logits) {
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

}  // namespace

Tensor LogRegModel::logits(const Tensor& features) const {
  if (features.cols() + 1 != weights.cols()) {
    throw ShapeError("feature dim " + std::to_string(features.cols()) +
                     " does not match logistic model");
  }
  const RowMatrix z = with_bias_column(features) * weights.mat().transpose();
  return from_matrix(z);
}

LogRegModel fit_logreg(const Tensor& features, const std::vector<std::size_t>& labels,
                       std::size_t num_classes, const LogRegOptions& opts) {
  if (features.rows() != labels.size()) {
    throw ShapeError("fit_logreg: " + std::to_string(features.rows()) + " rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  if (num_classes == 0 || labels.empty()) throw InputError("fit_logreg: empty problem");
  if (!(opts.l2 > 0)) throw ConfigError("fit_logreg: l2 strength must be positive");
  for (std::size_t y : labels) {
    if (y >= num_classes) throw InputError("fit_logreg: label out of range");
  }
  const RowMatrix x = with_bias_column(features);
  const double n = double(x.rows());
  RowMatrix onehot = RowMatrix::Zero(x.rows(), Eigen::Index(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) onehot(Eigen::Index(i), Eigen::Index(labels[i])) = 1.0;

  // Softmax curvature is at most 1/2, so the objective is L-smooth with
  // L = l2 + max_i |x_i|^2 / 2 and l2-strongly convex.
  const double lipschitz = opts.l2 + 0.5 * x.rowwise().squaredNorm().maxCoeff();
  const double step = 1.0 / lipschitz;

  RowMatrix w = RowMatrix::Zero(Eigen::Index(num_classes), x.cols());
  LogRegModel model;
  for (std::size_t it = 0;; ++it) {
    RowMatrix p = x * w.transpose();
    softmax_in_place(p);
    const RowMatrix grad = (p - onehot).transpose() * x / n + opts.l2 * w;
    model.gradient_norm = grad.norm();
    model.iterations = it;
    if (!std::isfinite(model.gradient_norm)) {
      throw NumericError("fit_logreg: non-finite gradient");
    }
    if (model.gradient_norm <= opts.tolerance) break;
    if (it >= opts.max_iterations) {
      throw ConvergenceError("logistic regression did not converge in " +
                             std::to_string(opts.max_iterations) +
                             " iterations (gradient norm " +
                             format_double(model.gradient_norm) + ")");
    }
    w -= step * grad;
  }
  model.weights = from_matrix(w);
  return model;
}

std::vector<std::size_t> classify_logreg(const Tensor& support,
                                         const std::vector<std::size_t>& support_labels,
                                         std::size_t num_classes, const Tensor& queries,
                                         const LogRegOptions& opts) {
  const LogRegModel model =
      fit_logreg(l2_normalize_rows(support), support_labels, num_classes, opts);
  const Tensor z = model.logits(l2_normalize_rows(queries));
  std::vector<std::size_t> out(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    Eigen::Index arg = 0;
    z.mat().row(Eigen::Index(r)).maxCoeff(&arg);
    out[r] = std::size_t(arg);
  }
  return out;
}

void EvalConfig::validate() const {
  if (way < 2) throw ConfigError("ways must be >= 2");
  if (shot < 1 || queries < 1) throw ConfigError("shots and queries must be >= 1");
  if (episodes < 1) throw ConfigError("episodes must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

EvalReport EvalReport::from_accuracies(std::vector<double> accuracies, std::size_t way,
                                       std::size_t shot, ClassifierKind classifier,
                                       Mechanism mechanism) {
  if (accuracies.empty()) throw InputError("EvalReport needs at least one episode");
  EvalReport r;
  r.way = way;
  r.shot = shot;
  r.classifier = classifier;
  r.mechanism = mechanism;
  const double n = double(accuracies.size());
  // Deviations are taken relative to the first entry so that identical
  // accuracies give an exactly zero spread.
  const double origin = accuracies.front();
  double shift = 0.0;
  for (double a : accuracies) shift += a - origin;
  shift /= n;
  r.mean = origin + shift;
  if (accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : accuracies) {
      const double d = (a - origin) - shift;
      ss += d * d;
    }
    r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  r.episode_accuracy = std::move(accuracies);
  return r;
}

std::string EvalReport::summary() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f \xC2\xB1 %.4f", mean, ci95);
  return buf;
}

namespace {

// Runs fn(begin, end) over [0, n) in fixed-size chunks spread across threads.
// Chunk boundaries do not depend on the thread count, so results are identical
// for any number of workers.
template <typename Fn>
void parallel_chunks(std::size_t n, std::size_t chunk, std::size_t threads, Fn&& fn) {
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= chunks) return;
      try {
        fn(c * chunk, std::min(n, (c + 1) * chunk));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = chunks;
        return;
      }
    }
  };
  const std::size_t nthreads = std::min(threads, chunks);
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
}

// Every record's query feature (unprompted) and support feature (prompted
// with its own class name). Episodes only ever use these two encodings, so
// each image is encoded at most twice per evaluation.
struct SplitFeatures {
  RowMatrix query;
  RowMatrix support;  // aliases `query` when unprompted
  bool prompted = false;

  const RowMatrix& supports() const { return prompted ? support : query; }
};

constexpr std::size_t kEncodeChunk = 32;

SplitFeatures encode_split(const Encoder& encoder, const PromptModule* prompt,
                           const ClassEmbeddingTable* table, const Split& split,
                           std::size_t threads) {
  const std::size_t n = split.size();
  const auto width = Eigen::Index(encoder.config().width);
  SplitFeatures f;
  f.prompted = prompt != nullptr && prompt->config().mechanism != Mechanism::none;
  f.query.resize(Eigen::Index(n), width);
  if (f.prompted) f.support.resize(Eigen::Index(n), width);
  parallel_chunks(n, kEncodeChunk, threads, [&](std::size_t begin, std::size_t end) {
    std::vector<const Tensor*> images;
    std::vector<std::string> names;
    for (std::size_t r = begin; r < end; ++r) {
      images.push_back(&split[r].image);
      names.push_back(split[r].class_name);
    }
    const auto rows = Eigen::Index(end - begin);
    {
      Tape tape(false);
      EncoderVars ev = bind_encoder(tape, encoder);
      f.query.middleRows(Eigen::Index(begin), rows) = encode_batch(tape, ev, images).value().mat();
    }
    if (f.prompted) {
      Tape tape(false);
      EncoderVars ev = bind_encoder(tape, encoder);
      PromptVars pv = bind_prompt(tape, *prompt);
      Var g = tape.constant(table->lookup(names));
      f.support.middleRows(Eigen::Index(begin), rows) =
          prompted_forward(tape, ev, pv, images, g).feature.value().mat();
    }
  });
  return f;
}

Tensor gather_rows(const RowMatrix& features, const std::vector<EpisodeItem>& items) {
  RowMatrix out(Eigen::Index(items.size()), features.cols());
  for (std::size_t i = 0; i < items.size(); ++i) {
    out.row(Eigen::Index(i)) = features.row(Eigen::Index(items[i].record));
  }
  return from_matrix(out);
}

double episode_accuracy(const SplitFeatures& features, const Split& split, const EvalConfig& cfg,
                        std::size_t index) {
  const Episode ep = sample_episode(split, cfg.way, cfg.shot, cfg.queries,
                                    derive_seed(cfg.seed, index));
  const Tensor support = gather_rows(features.supports(), ep.support);
  const Tensor queries = gather_rows(features.query, ep.query);
  std::vector<std::size_t> support_labels;
  for (const auto& item : ep.support) support_labels.push_back(item.label);

  std::vector<std::size_t> predicted;
  if (cfg.classifier == ClassifierKind::nearest_prototype) {
    RowMatrix protos = RowMatrix::Zero(Eigen::Index(cfg.way), Eigen::Index(support.cols()));
    std::vector<double> counts(cfg.way, 0.0);
    for (std::size_t i = 0; i < support_labels.size(); ++i) {
      protos.row(Eigen::Index(support_labels[i])) += support.mat().row(Eigen::Index(i));
      counts[support_labels[i]] += 1.0;
    }
    for (std::size_t c = 0; c < cfg.way; ++c) protos.row(Eigen::Index(c)) /= counts[c];
    predicted = classify_cosine(queries, from_matrix(protos));
  } else {
    predicted = classify_logreg(support, support_labels, cfg.way, queries, cfg.logreg);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ep.query.size(); ++i) correct += predicted[i] == ep.query[i].label;
  return double(correct) / double(ep.query.size());
}

}  // namespace

EvalReport evaluate(const Encoder& encoder, const PromptModule* prompt, const Split& split,
                    const ClassEmbeddingTable* table, const EvalConfig& cfg) {
  cfg.validate();
  const bool prompted = prompt != nullptr && prompt->config().mechanism != Mechanism::none;
  if (prompted) {
    if (table == nullptr) throw InputError("prompted evaluation needs class embeddings");
    if (table->dim() != prompt->config().semantic_dim) {
      throw ShapeError("embedding table dim " + std::to_string(table->dim()) +
                       " != prompt semantic_dim " +
                       std::to_string(prompt->config().semantic_dim));
    }
    for (const auto& name : split.class_names()) {
      if (!table->contains(name)) {
        throw InputError("missing embedding for class '" + name + "'");
      }
    }
  }
  // Fail fast on an unsatisfiable episode shape before spawning workers.
  (void)sample_episode(split, cfg.way, cfg.shot, cfg.queries, derive_seed(cfg.seed, 0));

  const SplitFeatures features =
      encode_split(encoder, prompted ? prompt : nullptr, table, split, cfg.threads);
  std::vector<double> acc(cfg.episodes, 0.0);
  parallel_chunks(cfg.episodes, 1, cfg.threads, [&](std::size_t i, std::size_t) {
    acc[i] = episode_accuracy(features, split, cfg, i);
  });
  return EvalReport::from_accuracies(std::move(acc), cfg.way, cfg.shot, cfg.classifier,
                                     prompt != nullptr ? prompt->config().mechanism
                                                       : Mechanism::none);
}

void write_report(const std::filesystem::path& stem, const EvalReport& report) {
  auto with_ext = [&](const char* ext) {
    std::filesystem::path p = stem;
    p += ext;
    return p;
  };
  {
    std::ofstream out(with_ext(".txt"));
    if (!out) throw IoError("cannot write " + with_ext(".txt").string());
    out << report.summary() << "\n";
    out << "ways=" << report.way << " shots=" << report.shot
        << " episodes=" << report.episodes()
        << " classifier=" << classifier_name(report.classifier)
        << " mechanism=" << mechanism_name(report.mechanism) << "\n";
  }
  std::ofstream csv(with_ext(".csv"));
  if (!csv) throw IoError("cannot write " + with_ext(".csv").string());
  csv << "episode,accuracy\n";
  for (std::size_t i = 0; i < report.episode_accuracy.size(); ++i) {
    csv << i << "," << format_double(report.episode_accuracy[i]) << "\n";
  }
}

Heatmap attention_heatmap(const Encoder& encoder, const PromptModule* prompt,
                          const Tensor& image, const Tensor* semantic) {
  const ModelConfig& mc = encoder.config();
  const std::size_t m = mc.num_patches();
  Tape tape(false);
  EncoderVars ev = bind_encoder(tape, encoder);
  const Tensor* batch[] = {&image};
  Tensor tokens, feature;
  std::size_t offset = 0;
  if (prompt != nullptr && prompt->config().mechanism != Mechanism::none) {
    if (semantic == nullptr) throw InputError("prompted heatmap needs a class embedding");
    PromptVars pv = bind_prompt(tape, *prompt);
    Var g = tape.constant(semantic->reshaped({1, semantic->size()}));
    PromptedOutput out = prompted_forward(tape, ev, pv, batch, g);
    tokens = out.tokens.value();
    feature = out.feature.value();
    offset = out.has_prompt_token ? 1 : 0;
  } else {
    Var z = run_layers(ev, embed_images(tape, ev, batch), 0, ev.layers.size(), m);
    tokens = z.value();
    feature = ops::segment_mean(z, m, 0, m).value();
  }
  Heatmap map;
  map.grid = mc.grid();
  map.values = Tensor({map.grid, map.grid});
  const auto f = feature.mat().row(0);
  for (std::size_t i = 0; i < m; ++i) {
    map.values.data()[i] = f.dot(tokens.mat().row(Eigen::Index(offset + i)));
  }
  return map;
}

std::vector<std::uint8_t> heatmap_pixels(const Heatmap& map) {
  const auto& v = map.values.values();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<std::uint8_t> px(v.size(), 0);
  const double range = *hi - *lo;
  if (range > 0.0) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      px[i] = std::uint8_t(std::lround(255.0 * (v[i] - *lo) / range));
    }
  }
  return px;
}

void write_heatmap(const std::filesystem::path& stem, const Heatmap& map) {
  std::filesystem::path csv_path = stem, pgm_path = stem;
  csv_path += ".csv";
  pgm_path += ".pgm";
  {
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write " + csv_path.string());
    for (std::size_t r = 0; r < map.grid; ++r) {
      for (std::size_t c = 0; c < map.grid; ++c) {
        csv << (c ? "," : "") << format_double(map.values.at(r, c));
      }
      csv << "\n";
    }
  }
  std::ofstream pgm(pgm_path, std::ios::binary);
  if (!pgm) throw IoError("cannot write " + pgm_path.string());
  pgm << "P5\n" << map.grid << " " << map.grid << "\n255\n";
  const auto px = heatmap_pixels(map);
  pgm.write(reinterpret_cast<const char*>(px.data()), std::streamsize(px.size()));
}

}  // namespace sp
