#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "sp/checkpoint.hpp"
#include "sp/data.hpp"
#include "sp/embeddings.hpp"
#include "sp/evaluation.hpp"
#include "sp/gradcheck.hpp"
#include "sp/rng.hpp"
#include "sp/training.hpp"

namespace sp::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr int kManifestVersion = 1;
constexpr const char* kToolVersion = "0.1.0";

// Registers options on a subcommand and remembers how to dump their final
// values, so every run can record its fully resolved configuration.
class OptionSet {
 public:
  explicit OptionSet(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help) {
    dumpers_.emplace_back([name, &var](json& j) { j[name] = var; });
    return app_->add_option("--" + name, var, help)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    dumpers_.emplace_back([name, &var](json& j) { j[name] = var; });
    return app_->add_flag("--" + name, var, help);
  }

  json resolved() const {
    json j = json::object();
    for (const auto& d : dumpers_) d(j);
    return j;
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> dumpers_;
};

std::string json_scalar_to_arg(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// A config file is either a flat object of option values or a run
// manifest, whose "config" member holds them.
json config_values(const json& doc, const fs::path& path) {
  const json& cfg = doc.contains("config") ? doc.at("config") : doc;
  if (!cfg.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  return cfg;
}

std::vector<std::string> config_args(const json& cfg) {
  std::vector<std::string> out;
  for (const auto& [key, value] : cfg.items()) {
    if (value.is_null() || value.is_object() || value.is_array()) {
      throw ConfigError("config key '" + key + "' must be a scalar");
    }
    const std::string v = json_scalar_to_arg(value);
    if (v.empty()) continue;
    out.push_back("--" + key + "=" + v);
  }
  return out;
}

// Expands `--config FILE` into option assignments placed ahead of the
// explicit flags; with last-wins option policy this gives
// flags > config file > defaults.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  if (args.empty()) return args;
  std::vector<std::string> explicit_args;
  std::optional<fs::path> config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config") {
      if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config needs a file argument");
      config = args[++i];
    } else if (a.rfind("--config=", 0) == 0) {
      config = a.substr(9);
    } else {
      explicit_args.push_back(a);
    }
  }
  std::vector<std::string> out{args[0]};
  if (config) {
    for (auto& a : config_args(config_values(read_json(*config), *config))) out.push_back(a);
  }
  out.insert(out.end(), explicit_args.begin(), explicit_args.end());
  return out;
}

void write_manifest(const fs::path& path, const std::string& command, const json& config,
                    const std::vector<fs::path>& artifacts) {
  json m;
  m["format_version"] = kManifestVersion;
  m["tool"] = "semprompt";
  m["tool_version"] = kToolVersion;
  m["command"] = command;
  if (config.contains("seed")) m["seed"] = config.at("seed");
  m["config"] = config;
  json arts = json::array();
  for (const auto& a : artifacts) arts.push_back(a.generic_string());
  m["artifacts"] = arts;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << m.dump(2) << "\n";
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

class CurveWriter {
 public:
  explicit CurveWriter(const fs::path& path) : out_(open_out(path)) {
    out_ << "epoch,split,metric,value\n";
  }
  void add(std::size_t epoch, const char* split, const char* metric, double value) {
    out_ << epoch << "," << split << "," << metric << "," << format_double(value) << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string closest_names(const std::string& name, std::vector<std::string> names,
                          std::size_t limit) {
  std::stable_sort(names.begin(), names.end(), [&](const auto& x, const auto& y) {
    return edit_distance(name, x) < edit_distance(name, y);
  });
  if (names.size() > limit) names.resize(limit);
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
  return out;
}

// Reads an 8-bit binary PGM into an (H, W, 1) image scaled to [0, 1].
Tensor load_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    while (in >> std::ws && in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
    }
    in >> t;
    return t;
  };
  if (token() != "P5") throw ParseError(path.string() + ": expected a binary PGM (P5)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ParseError(path.string() + ": malformed PGM header");
  }
  if (maxval == 0 || maxval > 255) throw ParseError(path.string() + ": only 8-bit PGM supported");
  in.get();
  std::vector<unsigned char> px(w * h);
  if (!in.read(reinterpret_cast<char*>(px.data()), std::streamsize(px.size()))) {
    throw ParseError(path.string() + ": truncated pixel data");
  }
  Tensor img({h, w, 1});
  for (std::size_t i = 0; i < px.size(); ++i) img[i] = double(px[i]) / double(maxval);
  return img;
}

// --- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  std::size_t classes = 64;
  std::size_t per_class = 40;
  std::size_t size = 16;
  std::size_t channels = 1;
  std::size_t cell_size = 4;
  double clutter = SyntheticConfig{}.clutter_prob;
  double jitter = SyntheticConfig{}.motif_jitter;
  double noise = SyntheticConfig{}.pixel_noise;
  std::size_t embed_dim = 32;
  double embed_noise = 0.1;
  std::uint64_t seed = 0;
  std::string out;
};

void register_gen_data(OptionSet& o, GenDataArgs& a) {
  o.add("classes", a.classes, "number of classes across all splits");
  o.add("per-class", a.per_class, "images per class");
  o.add("size", a.size, "image height and width");
  o.add("channels", a.channels, "image channels");
  o.add("cell-size", a.cell_size, "motif cell size in pixels");
  o.add("clutter", a.clutter, "probability of clutter in a free cell");
  o.add("jitter", a.jitter, "per-image motif perturbation");
  o.add("noise", a.noise, "pixel noise standard deviation");
  o.add("embed-dim", a.embed_dim, "dimension of synthetic class-name embeddings");
  o.add("embed-noise", a.embed_noise, "name-specific noise in the embeddings");
  o.add("seed", a.seed, "random seed");
  o.add("out", a.out, "output dataset directory")->required();
}

void cmd_gen_data(const GenDataArgs& a, const json& config, std::ostream& out) {
  SyntheticConfig sc;
  sc.image_size = a.size;
  sc.channels = a.channels;
  sc.cell_size = a.cell_size;
  sc.clutter_prob = a.clutter;
  sc.motif_jitter = a.jitter;
  sc.pixel_noise = a.noise;
  const SplitDataset data = generate_synthetic_dataset(a.classes, a.per_class, sc, a.seed);
  std::vector<std::string> names;
  std::vector<Tensor> latents;
  for (const auto& c : data.classes) {
    names.push_back(c.name);
    latents.push_back(c.latent);
  }
  const ClassEmbeddingTable table =
      synth_aligned_embeddings(names, latents, a.embed_dim, a.seed, a.embed_noise);
  const fs::path dir(a.out);
  ensure_dir(dir);
  save_dataset(dir, data);
  save_embeddings(dir / "embeddings.txt", table);
  write_manifest(dir / "manifest.json", "gen-data", config,
                 {"classes.tsv", "records.tsv", "images_base.bin", "images_val.bin",
                  "images_novel.bin", "latents.bin", "embeddings.txt"});
  out << "wrote " << data.classes.size() << " classes (" << data.base.size() << " base, "
      << data.validation.size() << " val, " << data.novel.size() << " novel images) to "
      << dir.string() << "\n";
}

// --- pretrain ---------------------------------------------------------------

struct PretrainArgs {
  std::string data;
  std::string out;
  std::size_t patch_size = 4;
  std::size_t depth = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::string optimizer = "adamw";
  std::uint64_t seed = 0;
};

void register_pretrain(OptionSet& o, PretrainArgs& a) {
  o.add("data", a.data, "dataset directory")->required();
  o.add("out", a.out, "output directory")->required();
  o.add("patch-size", a.patch_size, "patch size");
  o.add("depth", a.depth, "transformer layers");
  o.add("width", a.width, "token width");
  o.add("heads", a.heads, "attention heads");
  o.add("mlp-ratio", a.mlp_ratio, "MLP hidden size as a multiple of width");
  o.add("epochs", a.epochs, "training epochs");
  o.add("batch-size", a.batch_size, "images per step");
  o.add("lr", a.lr, "learning rate");
  o.add("weight-decay", a.weight_decay, "decoupled weight decay on matrices");
  o.add("optimizer", a.optimizer, "adamw|sgd");
  o.add("seed", a.seed, "random seed");
}

ModelConfig model_for(const SplitDataset& data, std::size_t patch, std::size_t depth,
                      std::size_t width, std::size_t heads, std::size_t mlp_ratio) {
  if (data.base.empty()) throw InputError("dataset has no base images");
  const Tensor& img = data.base[0].image;
  ModelConfig mc;
  mc.image_size = img.dim(0);
  mc.channels = img.dim(2);
  mc.patch_size = patch;
  mc.depth = depth;
  mc.width = width;
  mc.heads = heads;
  mc.mlp_ratio = mlp_ratio;
  mc.validate();
  return mc;
}

void cmd_pretrain(const PretrainArgs& a, const json& config, std::ostream& out) {
  TrainConfig tc;
  tc.optimizer = parse_optimizer(a.optimizer);
  tc.lr_pretrain = a.lr;
  tc.weight_decay = a.weight_decay;
  tc.pretrain_epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.seed = a.seed;
  tc.validate();
  const SplitDataset data = load_dataset(a.data);
  const ModelConfig mc = model_for(data, a.patch_size, a.depth, a.width, a.heads, a.mlp_ratio);

  const fs::path dir(a.out);
  ensure_dir(dir);
  Encoder encoder(mc, derive_seed(a.seed, 1));
  ClassifierHead head(data.base.class_ids().size(), mc.width, derive_seed(a.seed, 2));
  CurveWriter curves(dir / "curves.csv");
  PretrainResult result;
  result = pretrain(encoder, head, data.base, tc, [&](std::size_t epoch, double loss) {
    curves.add(epoch + 1, "base", "loss", loss);
    out << "epoch " << epoch + 1 << "/" << a.epochs << " loss " << format_double(loss) << "\n";
  });
  for (std::size_t e = 0; e < result.epoch_accuracy.size(); ++e) {
    curves.add(e + 1, "base", "train_accuracy", result.epoch_accuracy[e]);
  }
  const double acc = classification_accuracy(encoder, head, data.base);
  curves.add(a.epochs, "base", "accuracy", acc);
  save_checkpoint(dir / "pretrain.ckpt", encoder, nullptr,
                  {{"stage", "pretrain"}, {"base_accuracy", format_double(acc)}});
  write_manifest(dir / "manifest.json", "pretrain", config, {"pretrain.ckpt", "curves.csv"});
  out << "base accuracy " << format_double(acc) << "\n";
}

// --- metatrain --------------------------------------------------------------

struct MetatrainArgs {
  std::string data;
  std::string embeddings;
  std::string init;
  std::string out;
  std::string mechanism = "both";
  std::size_t inject_layer = 0;
  std::string projector = "linear";
  std::string pooling = "all";
  double tau = 0.2;
  std::size_t epochs = 10;
  std::size_t episodes_per_epoch = 100;
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries = 15;
  double lr_encoder = 1e-4;
  double lr_projectors = 1e-3;
  double weight_decay = 0.05;
  std::string optimizer = "adamw";
  std::size_t val_episodes = 0;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

void register_metatrain(OptionSet& o, MetatrainArgs& a) {
  o.add("data", a.data, "dataset directory")->required();
  o.add("embeddings", a.embeddings, "class-name embedding file")->required();
  o.add("init", a.init, "pre-trained checkpoint")->required();
  o.add("out", a.out, "output directory")->required();
  o.add("mechanism", a.mechanism, "si|ci|both|none");
  o.add("inject-layer", a.inject_layer, "1-based layer receiving the prompt (0: default)");
  o.add("projector", a.projector, "linear|mlp");
  o.add("pooling", a.pooling, "head|patches|all");
  o.add("tau", a.tau, "temperature of the episodic loss");
  o.add("epochs", a.epochs, "meta-training epochs");
  o.add("episodes-per-epoch", a.episodes_per_epoch, "episodes per epoch");
  o.add("ways", a.ways, "classes per training episode");
  o.add("shots", a.shots, "support images per class");
  o.add("queries", a.queries, "query images per class");
  o.add("lr-encoder", a.lr_encoder, "encoder learning rate");
  o.add("lr-projectors", a.lr_projectors, "prompt parameter learning rate");
  o.add("weight-decay", a.weight_decay, "decoupled weight decay on matrices");
  o.add("optimizer", a.optimizer, "adamw|sgd");
  o.add("val-episodes", a.val_episodes, "validation episodes after each epoch (0: skip)");
  o.add("threads", a.threads, "worker threads for validation");
  o.add("seed", a.seed, "random seed");
}

void cmd_metatrain(const MetatrainArgs& a, const json& config, std::ostream& out) {
  TrainConfig tc;
  tc.tau = a.tau;
  tc.optimizer = parse_optimizer(a.optimizer);
  tc.lr_encoder = a.lr_encoder;
  tc.lr_projectors = a.lr_projectors;
  tc.weight_decay = a.weight_decay;
  tc.meta_epochs = a.epochs;
  tc.episodes_per_epoch = a.episodes_per_epoch;
  tc.way = a.ways;
  tc.shot = a.shots;
  tc.queries = a.queries;
  tc.seed = a.seed;
  tc.validate();
  const Mechanism mechanism = parse_mechanism(a.mechanism);
  const ProjectorKind projector = parse_projector(a.projector);
  const Pooling pooling = parse_pooling(a.pooling);

  Checkpoint ck = load_checkpoint(a.init);
  const ModelConfig& mc = ck.encoder.config();
  const ClassEmbeddingTable table = load_embeddings(a.embeddings);
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.mechanism = mechanism;
  pc.projector = projector;
  pc.pooling = pooling;
  if (a.inject_layer != 0) pc.inject_layer = a.inject_layer;
  pc.semantic_dim = table.dim();
  pc.validate(mc);
  tc.prompt = pc;
  const SplitDataset data = load_dataset(a.data);

  const fs::path dir(a.out);
  ensure_dir(dir);
  PromptModule prompt(pc, mc, derive_seed(a.seed, 3));
  CurveWriter curves(dir / "curves.csv");
  EvalConfig vc;
  vc.way = a.ways;
  vc.shot = a.shots;
  vc.queries = a.queries;
  vc.episodes = a.val_episodes;
  vc.seed = derive_seed(a.seed, 4);
  vc.threads = a.threads;
  meta_train(ck.encoder, prompt, data.base, table, tc, [&](std::size_t epoch, double loss) {
    curves.add(epoch + 1, "base", "loss", loss);
    out << "epoch " << epoch + 1 << "/" << a.epochs << " loss " << format_double(loss);
    if (a.val_episodes > 0) {
      const EvalReport r = evaluate(ck.encoder, &prompt, data.validation, &table, vc);
      curves.add(epoch + 1, "val", "accuracy", r.mean);
      out << " val " << r.summary();
    }
    out << "\n";
  });
  save_checkpoint(dir / "metatrain.ckpt", ck.encoder, &prompt, {{"stage", "metatrain"}});
  write_manifest(dir / "manifest.json", "metatrain", config, {"metatrain.ckpt", "curves.csv"});
  out << "wrote " << (dir / "metatrain.ckpt").string() << "\n";
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string embeddings;
  std::string out;
  std::string split = "novel";
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries = 15;
  std::size_t episodes = 2000;
  std::string classifier = "nn";
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

void register_eval(OptionSet& o, EvalArgs& a) {
  o.add("checkpoint", a.checkpoint, "model checkpoint")->required();
  o.add("data", a.data, "dataset directory")->required();
  o.add("embeddings", a.embeddings, "class-name embeddings (needed for prompted models)");
  o.add("out", a.out, "output directory for the report")->required();
  o.add("split", a.split, "base|val|novel");
  o.add("ways", a.ways, "classes per episode");
  o.add("shots", a.shots, "support images per class");
  o.add("queries", a.queries, "query images per class");
  o.add("episodes", a.episodes, "number of episodes");
  o.add("classifier", a.classifier, "nn|lr");
  o.add("threads", a.threads, "worker threads");
  o.add("seed", a.seed, "episode seed");
}

void cmd_eval(const EvalArgs& a, const json& config, std::ostream& out) {
  EvalConfig ec;
  ec.way = a.ways;
  ec.shot = a.shots;
  ec.queries = a.queries;
  ec.episodes = a.episodes;
  ec.classifier = parse_classifier(a.classifier);
  ec.threads = a.threads;
  ec.seed = a.seed;
  ec.validate();
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const SplitDataset data = load_dataset(a.data);
  const Split& split = data.split(a.split);
  if (a.ways > split.class_ids().size()) {
    throw InputError("--ways " + std::to_string(a.ways) + " exceeds the " +
                     std::to_string(split.class_ids().size()) + " classes of split '" +
                     a.split + "'");
  }
  std::optional<ClassEmbeddingTable> table;
  const PromptModule* prompt = ck.prompt ? &*ck.prompt : nullptr;
  if (prompt != nullptr && prompt->config().mechanism != Mechanism::none) {
    if (a.embeddings.empty()) throw InputError("prompted checkpoint needs --embeddings");
    table = load_embeddings(a.embeddings);
  }
  const EvalReport report =
      evaluate(ck.encoder, prompt, split, table ? &*table : nullptr, ec);
  const fs::path dir(a.out);
  ensure_dir(dir);
  write_report(dir / "report", report);
  write_manifest(dir / "manifest.json", "eval", config, {"report.txt", "report.csv"});
  out << report.summary() << "\n";
}

// --- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
  double eps = 1e-4;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  bool corrupt_gradient = false;
  std::string out;
};

void register_gradcheck(OptionSet& o, GradcheckArgs& a) {
  o.add("eps", a.eps, "finite-difference step");
  o.add("tolerance", a.tolerance, "largest accepted relative error");
  o.add("seed", a.seed, "toy model seed");
  o.add("out", a.out, "optional output directory for the report");
  o.flag("corrupt-gradient", a.corrupt_gradient, "")->group("");
}

bool cmd_gradcheck(const GradcheckArgs& a, const json& config, std::ostream& out) {
  GradCheckOptions opts;
  opts.epsilon = a.eps;
  opts.tolerance = a.tolerance;
  opts.seed = a.seed;
  opts.corrupt_gradient = a.corrupt_gradient;
  const GradCheckSuiteReport r = run_gradient_checks(opts);
  std::ostringstream text;
  for (const auto& e : r.per_parameter) {
    text << e.name << "\t" << format_double(e.max_error) << "\n";
  }
  text << (r.passed ? "PASS" : "FAIL") << " worst relative error "
       << format_double(r.max_error) << " (tolerance " << format_double(a.tolerance) << ")\n";
  out << text.str();
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    ensure_dir(dir);
    open_out(dir / "gradcheck.txt") << text.str();
    write_manifest(dir / "manifest.json", "gradcheck", config, {"gradcheck.txt"});
  }
  return r.passed;
}

// --- attention --------------------------------------------------------------

struct AttentionArgs {
  std::string checkpoint;
  std::string embeddings;
  std::string data;
  std::string image;
  std::string class_name;
  std::string out;
};

void register_attention(OptionSet& o, AttentionArgs& a) {
  o.add("checkpoint", a.checkpoint, "model checkpoint")->required();
  o.add("embeddings", a.embeddings, "class-name embeddings");
  o.add("data", a.data, "dataset directory, for --image SPLIT:INDEX");
  o.add("image", a.image, "8-bit PGM file, or SPLIT:INDEX with --data")->required();
  o.add("class-name", a.class_name, "class name used as the prompt")->required();
  o.add("out", a.out, "output path stem (writes .csv and .pgm)")->required();
}

Tensor resolve_image(const AttentionArgs& a) {
  const auto colon = a.image.rfind(':');
  if (!a.data.empty() && colon != std::string::npos) {
    const SplitDataset data = load_dataset(a.data);
    const Split& split = data.split(a.image.substr(0, colon));
    std::size_t index = 0;
    try {
      index = std::stoul(a.image.substr(colon + 1));
    } catch (const std::exception&) {
      throw InputError("bad image index in '" + a.image + "'");
    }
    if (index >= split.size()) {
      throw InputError("image index " + std::to_string(index) + " out of range (split has " +
                       std::to_string(split.size()) + " images)");
    }
    return split[index].image;
  }
  return load_pgm(a.image);
}

void cmd_attention(const AttentionArgs& a, const json& config, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const PromptModule* prompt = ck.prompt ? &*ck.prompt : nullptr;
  std::optional<Tensor> semantic;
  if (prompt != nullptr && prompt->config().mechanism != Mechanism::none) {
    if (a.embeddings.empty()) throw InputError("prompted checkpoint needs --embeddings");
    const ClassEmbeddingTable table = load_embeddings(a.embeddings);
    if (!table.contains(a.class_name)) {
      throw InputError("unknown class name '" + a.class_name +
                       "'; closest available: " + closest_names(a.class_name, table.names(), 8));
    }
    semantic = table.at(a.class_name);
  }
  const Tensor image = resolve_image(a);
  const Heatmap map =
      attention_heatmap(ck.encoder, prompt, image, semantic ? &*semantic : nullptr);
  const fs::path stem(a.out);
  if (stem.has_parent_path()) ensure_dir(stem.parent_path());
  write_heatmap(stem, map);
  fs::path manifest = stem;
  manifest += ".manifest.json";
  const std::string base = stem.filename().string();
  write_manifest(manifest, "attention", config, {base + ".csv", base + ".pgm"});
  out << "wrote " << base << ".csv and " << base << ".pgm (" << map.grid << "x" << map.grid
      << ")\n";
}

// --- dispatch ---------------------------------------------------------------

int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot recognition with semantic prompts", "semprompt"};
  app.set_version_flag("--version", kToolVersion);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.get_formatter()->column_width(34);

  GenDataArgs gen;
  PretrainArgs pre;
  MetatrainArgs meta;
  EvalArgs ev;
  GradcheckArgs gc;
  AttentionArgs att;
  std::string replay_manifest, replay_out;

  auto add_sub = [&](const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    // Placeholder so --config shows up in help; the file itself is
    // expanded before parsing.
    sub->add_option("--config", "JSON file of option values or a run manifest");
    return OptionSet(sub);
  };
  OptionSet gen_o = add_sub("gen-data", "generate a synthetic dataset and class embeddings");
  register_gen_data(gen_o, gen);
  OptionSet pre_o = add_sub("pretrain", "train encoder and classifier head on base classes");
  register_pretrain(pre_o, pre);
  OptionSet meta_o = add_sub("metatrain", "episodic training with semantic prompts");
  register_metatrain(meta_o, meta);
  OptionSet ev_o = add_sub("eval", "few-shot evaluation over random episodes");
  register_eval(ev_o, ev);
  OptionSet gc_o = add_sub("gradcheck", "finite-difference check of all gradients");
  register_gradcheck(gc_o, gc);
  OptionSet att_o = add_sub("attention", "dump a feature/patch similarity heatmap");
  register_attention(att_o, att);
  CLI::App* replay = app.add_subcommand("replay", "re-run a command from its manifest");
  replay->add_option("manifest", replay_manifest, "manifest.json written by a previous run")
      ->required();
  replay->add_option("--out", replay_out, "redirect outputs to this path");

  try {
    args = expand_config(args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (replay->parsed()) {
    const json doc = read_json(replay_manifest);
    if (!doc.contains("command") || !doc.at("command").is_string()) {
      throw ConfigError(replay_manifest + ": not a run manifest");
    }
    std::vector<std::string> again{doc.at("command").get<std::string>()};
    for (auto& a : config_args(config_values(doc, replay_manifest))) again.push_back(a);
    if (!replay_out.empty()) again.push_back("--out=" + replay_out);
    return dispatch(std::move(again), out, err);
  }
  if (gen_o.app()->parsed()) {
    cmd_gen_data(gen, gen_o.resolved(), out);
  } else if (pre_o.app()->parsed()) {
    cmd_pretrain(pre, pre_o.resolved(), out);
  } else if (meta_o.app()->parsed()) {
    cmd_metatrain(meta, meta_o.resolved(), out);
  } else if (ev_o.app()->parsed()) {
    cmd_eval(ev, ev_o.resolved(), out);
  } else if (gc_o.app()->parsed()) {
    return cmd_gradcheck(gc, gc_o.resolved(), out) ? kExitOk : kExitFailure;
  } else if (att_o.app()->parsed()) {
    cmd_attention(att, att_o.resolved(), out);
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace sp::cli
