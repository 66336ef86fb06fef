#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = sp::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("sp_cli_" + name);
  fs::remove_all(p);
  return p;
}

// Shared tiny pipeline: 8x8 images, a two-layer width-8 encoder.
struct Pipeline {
  fs::path root = scratch("pipeline");
  fs::path data = root / "data";
  fs::path pre = root / "pre";
  fs::path meta = root / "meta";
  fs::path none = root / "none";

  Pipeline() {
    REQUIRE(run({"gen-data", "--classes", "20", "--per-class", "6", "--size", "8",
                 "--embed-dim", "6", "--seed", "4", "--out", data.string()})
                .code == 0);
    REQUIRE(run({"pretrain", "--data", data.string(), "--out", pre.string(), "--depth", "2",
                 "--width", "8", "--heads", "2", "--mlp-ratio", "2", "--epochs", "1",
                 "--batch-size", "8", "--seed", "1"})
                .code == 0);
    for (const auto& [dir, mech] : {std::pair{meta, "both"}, std::pair{none, "none"}}) {
      const Outcome o = run({"metatrain", "--data", data.string(), "--embeddings",
                             (data / "embeddings.txt").string(), "--init",
                             (pre / "pretrain.ckpt").string(), "--out", dir.string(),
                             "--mechanism", mech, "--epochs", "1", "--episodes-per-epoch", "2",
                             "--ways", "3", "--queries", "2", "--val-episodes", "2", "--seed",
                             "2"});
      REQUIRE_MESSAGE(o.code == 0, o.err);
    }
  }
};

const Pipeline& pipeline() {
  static const Pipeline p;
  return p;
}

std::vector<std::string> eval_args(const fs::path& ckpt, const fs::path& out) {
  const Pipeline& p = pipeline();
  return {"eval", "--checkpoint", ckpt.string(), "--data", p.data.string(), "--embeddings",
          (p.data / "embeddings.txt").string(), "--out", out.string(), "--ways", "3",
          "--queries", "2", "--episodes", "6", "--seed", "9"};
}

}  // namespace

TEST_CASE("cli: gen-data is reproducible and writes one line per class") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const std::vector<std::string> common{"gen-data", "--classes", "10", "--per-class", "4",
                                        "--size", "8", "--seed", "3", "--out"};
  auto args_a = common, args_b = common;
  args_a.push_back(a.string());
  args_b.push_back(b.string());
  REQUIRE(run(args_a).code == 0);
  REQUIRE(run(args_b).code == 0);
  for (const char* f : {"classes.tsv", "records.tsv", "images_base.bin", "images_novel.bin",
                        "embeddings.txt"}) {
    CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
  }
  CHECK(count_lines(a / "classes.tsv") == 10);
  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  CHECK(manifest.at("command") == "gen-data");
  CHECK(manifest.at("seed") == 3);
  CHECK(manifest.at("config").at("classes") == 10);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("cli: usage errors exit with code 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"gen-data"}).code == 2);
  CHECK(run({"eval"}).code == 2);
  CHECK(run({"no-such-command"}).code == 2);
  CHECK(run({"gen-data", "--classes", "many", "--out", "x"}).code == 2);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"metatrain", "--help"}).code == 0);
}

TEST_CASE("cli: a non-positive temperature is rejected as a configuration error") {
  const Pipeline& p = pipeline();
  const Outcome o = run({"metatrain", "--data", p.data.string(), "--embeddings",
                         (p.data / "embeddings.txt").string(), "--init",
                         (p.pre / "pretrain.ckpt").string(), "--out",
                         (p.root / "bad").string(), "--tau", "0"});
  CHECK(o.code == 2);
  CHECK(o.err.find("tau") != std::string::npos);
}

TEST_CASE("cli: training writes checkpoints, curves and manifests") {
  const Pipeline& p = pipeline();
  for (const fs::path& d : {p.pre, p.meta, p.none}) {
    CHECK(fs::exists(d / "manifest.json"));
    CHECK(fs::exists(d / "curves.csv"));
  }
  CHECK(fs::exists(p.pre / "pretrain.ckpt"));
  CHECK(fs::exists(p.meta / "metatrain.ckpt"));
  std::ifstream curves(p.meta / "curves.csv");
  std::string header;
  std::getline(curves, header);
  CHECK(header == "epoch,split,metric,value");
  CHECK(slurp(p.meta / "curves.csv").find("val,accuracy") != std::string::npos);
}

TEST_CASE("cli: evaluation is deterministic for a fixed seed") {
  const Pipeline& p = pipeline();
  const fs::path a = p.root / "eval_a", b = p.root / "eval_b";
  const Outcome oa = run(eval_args(p.meta / "metatrain.ckpt", a));
  const Outcome ob = run(eval_args(p.meta / "metatrain.ckpt", b));
  REQUIRE_MESSAGE(oa.code == 0, oa.err);
  REQUIRE(ob.code == 0);
  CHECK(oa.out == ob.out);
  CHECK(slurp(a / "report.csv") == slurp(b / "report.csv"));
  CHECK(count_lines(a / "report.csv") == 7);
  CHECK(oa.out.find("\xC2\xB1") != std::string::npos);
}

TEST_CASE("cli: evaluation of the pre-trained and prompt-free models") {
  const Pipeline& p = pipeline();
  CHECK(run(eval_args(p.pre / "pretrain.ckpt", p.root / "eval_pre")).code == 0);
  CHECK(run(eval_args(p.none / "metatrain.ckpt", p.root / "eval_none")).code == 0);
  auto lr = eval_args(p.meta / "metatrain.ckpt", p.root / "eval_lr");
  lr.insert(lr.end(), {"--classifier", "lr", "--shots", "1"});
  const Outcome o = run(lr);
  CHECK_MESSAGE(o.code == 0, o.err);
  CHECK(slurp(p.root / "eval_lr" / "report.txt").find("classifier=lr") != std::string::npos);
}

TEST_CASE("cli: evaluation rejects more ways than the split has classes") {
  const Pipeline& p = pipeline();
  auto args = eval_args(p.meta / "metatrain.ckpt", p.root / "eval_bad");
  args.insert(args.end(), {"--ways", "50"});
  const Outcome o = run(args);
  CHECK(o.code == 1);
  CHECK(o.err.find("--ways") != std::string::npos);
}

TEST_CASE("cli: config files and explicit flags") {
  const Pipeline& p = pipeline();
  const fs::path cfg = p.root / "eval.json";
  std::ofstream(cfg) << R"({"episodes": 3, "ways": 3, "queries": 2, "seed": 9})";
  const fs::path out = p.root / "eval_cfg";
  const Outcome o =
      run({"eval", "--config", cfg.string(), "--checkpoint",
           (p.meta / "metatrain.ckpt").string(), "--data", p.data.string(), "--embeddings",
           (p.data / "embeddings.txt").string(), "--out", out.string(), "--episodes", "4"});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(count_lines(out / "report.csv") == 5);
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  CHECK(manifest.at("config").at("episodes") == 4);
  CHECK(manifest.at("config").at("ways") == 3);
}

TEST_CASE("cli: replay reproduces an evaluation bitwise") {
  const Pipeline& p = pipeline();
  const fs::path first = p.root / "eval_replay_src", second = p.root / "eval_replay_dst";
  REQUIRE(run(eval_args(p.meta / "metatrain.ckpt", first)).code == 0);
  const Outcome o =
      run({"replay", (first / "manifest.json").string(), "--out", second.string()});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  CHECK(slurp(first / "report.csv") == slurp(second / "report.csv"));
  CHECK(slurp(first / "report.txt") == slurp(second / "report.txt"));
}

TEST_CASE("cli: attention maps depend on the class name and unknown names are reported") {
  const Pipeline& p = pipeline();
  std::ifstream classes(p.data / "classes.tsv");
  std::vector<std::string> names;
  std::string line;
  while (std::getline(classes, line)) names.push_back(line.substr(line.find('\t') + 1));
  REQUIRE(names.size() >= 2);
  auto att = [&](const std::string& name, const fs::path& stem) {
    return run({"attention", "--checkpoint", (p.meta / "metatrain.ckpt").string(),
                "--embeddings", (p.data / "embeddings.txt").string(), "--data",
                p.data.string(), "--image", "novel:0", "--class-name", name, "--out",
                stem.string()});
  };
  const Outcome a = att(names[0], p.root / "att" / "a");
  const Outcome b = att(names[1], p.root / "att" / "b");
  REQUIRE_MESSAGE(a.code == 0, a.err);
  REQUIRE(b.code == 0);
  CHECK(slurp(p.root / "att" / "a.csv") != slurp(p.root / "att" / "b.csv"));
  CHECK(fs::exists(p.root / "att" / "a.pgm"));
  CHECK(fs::exists(p.root / "att" / "a.manifest.json"));

  const std::string typo = names[0].substr(0, names[0].size() - 1) + "q";
  const Outcome bad = att(typo, p.root / "att" / "c");
  CHECK(bad.code != 0);
  CHECK(bad.err.find("closest") != std::string::npos);
  CHECK(bad.err.find(names[0]) != std::string::npos);
}

TEST_CASE("cli: gradcheck passes, and fails on a corrupted gradient") {
  const Outcome ok = run({"gradcheck"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("PASS") != std::string::npos);
  const Outcome bad = run({"gradcheck", "--corrupt-gradient"});
  CHECK(bad.code == 1);
  CHECK(bad.out.find("FAIL") != std::string::npos);
  // Per-parameter lines come worst first.
  std::istringstream lines(bad.out);
  std::string line;
  double prev = 1e300;
  while (std::getline(lines, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    const double e = std::stod(line.substr(tab + 1));
    CHECK(e <= prev);
    prev = e;
  }
}
