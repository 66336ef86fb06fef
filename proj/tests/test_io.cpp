#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "sp/checkpoint.hpp"
#include "sp/embeddings.hpp"
#include "sp/gradcheck.hpp"
#include "sp/optim.hpp"
#include "sp/serialize.hpp"

using namespace sp;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sp_io_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("embedding files parse comments, blanks and vectors") {
  std::istringstream in("# header\ndim 3\n\nlion\t1 0 0\ntiger\t0 0.5 -2\n");
  const ClassEmbeddingTable t = parse_embeddings(in, "mem");
  CHECK(t.dim() == 3);
  CHECK(t.size() == 2);
  CHECK(t.at("tiger").to_vector() == std::vector<double>{0, 0.5, -2});
  CHECK(t.names() == std::vector<std::string>{"lion", "tiger"});
  const std::string names[] = {"tiger", "lion"};
  const Tensor stacked = t.lookup(names);
  CHECK(stacked.shape() == Shape{2, 3});
  CHECK(stacked.at(1, 0) == 1.0);
}

TEST_CASE("embedding parse errors carry source and line") {
  std::istringstream wrong_dim("dim 3\nlion\t1 0\n");
  CHECK_THROWS_WITH_AS(parse_embeddings(wrong_dim, "emb.txt"), doctest::Contains("emb.txt:2"),
                       ParseError);
  std::istringstream dup("dim 1\na\t1\na\t2\n");
  CHECK_THROWS_WITH_AS(parse_embeddings(dup, "e"), doctest::Contains("e:3"), ParseError);
  std::istringstream no_header("lion\t1 0\n");
  CHECK_THROWS_AS(parse_embeddings(no_header, "e"), ParseError);
  std::istringstream bad_number("dim 2\nlion\t1 x\n");
  CHECK_THROWS_AS(parse_embeddings(bad_number, "e"), ParseError);
}

TEST_CASE("missing embeddings are hard errors naming the class") {
  ClassEmbeddingTable t(2);
  t.add("a", Tensor::vector({1, 2}));
  CHECK_THROWS_WITH_AS(t.at("zebra"), doctest::Contains("zebra"), InputError);
  CHECK_THROWS_AS(t.add("a", Tensor::vector({1, 2})), InputError);
  CHECK_THROWS_AS(t.add("b", Tensor::vector({1, 2, 3})), ShapeError);
}

TEST_CASE("embedding file round trip is exact") {
  const std::vector<std::string> names{"ant", "bee", "cat"};
  const ClassEmbeddingTable t = synth_embeddings(names, 5, 3);
  const auto path = temp_path("emb.txt");
  save_embeddings(path, t);
  CHECK(load_embeddings(path) == t);
  std::filesystem::remove(path);
}

TEST_CASE("synthetic embeddings are deterministic unit vectors") {
  const std::vector<std::string> names{"ant", "bee"};
  const ClassEmbeddingTable a = synth_embeddings(names, 8, 1);
  CHECK(a == synth_embeddings(names, 8, 1));
  CHECK_FALSE(a == synth_embeddings(names, 8, 2));
  double n = 0;
  for (double v : a.at("ant").values()) n += v * v;
  CHECK(n == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("aligned embeddings follow latent similarity") {
  const std::vector<std::string> names{"a", "b", "c"};
  Rng r(4);
  const Tensor base = normal_tensor({8}, 1.0, r);
  Tensor near = base;
  near[0] += 0.05;
  const Tensor far = normal_tensor({8}, 1.0, r);
  const std::vector<Tensor> latents{base, near, far};
  const ClassEmbeddingTable t = synth_aligned_embeddings(names, latents, 16, 9);
  const double close = cosine_similarity(t.at("a"), t.at("b"));
  const double apart = cosine_similarity(t.at("a"), t.at("c"));
  CHECK(close > apart);
  CHECK(close > 0.9);
}

TEST_CASE("block files round trip bitwise, including awkward values") {
  BlockFile f;
  f.meta = {{"alpha", "1"}, {"name", "x y"}};
  f.blocks.emplace_back("w", Tensor::matrix(2, 2, {0.1, -0.0, 1e-300,
                                                    std::numeric_limits<double>::max()}));
  f.blocks.emplace_back("v", Tensor::vector({std::nextafter(1.0, 2.0)}));
  const auto path = temp_path("block.bin");
  write_block_file(path, f);
  const BlockFile g = read_block_file(path);
  CHECK(g.meta == f.meta);
  REQUIRE(g.blocks.size() == 2);
  CHECK(g.block("w") == f.block("w"));
  CHECK(std::signbit(g.block("w")[1]));
  CHECK(g.block("v")[0] == std::nextafter(1.0, 2.0));
  CHECK_THROWS_AS(g.block("missing"), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("block file reader rejects foreign and truncated files") {
  const auto path = temp_path("junk.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTMAGIC\n";
  }
  CHECK_THROWS_AS(read_block_file(path), ParseError);
  BlockFile f;
  f.blocks.emplace_back("w", Tensor::vector({1, 2, 3}));
  write_block_file(path, f);
  const std::string bytes = read_bytes(path);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 4);
  }
  CHECK_THROWS_AS(read_block_file(path), ParseError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_block_file(path), IoError);
}

TEST_CASE("format_double gives the shortest exact form") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1.0) == "1");
  const double x = 0.1 + 0.2;
  CHECK(std::stod(format_double(x)) == x);
}

TEST_CASE("checkpoint save/load round-trips bitwise") {
  const ModelConfig mc = toy_model_config();
  Encoder enc(mc, 3);
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.semantic_dim = 5;
  pc.projector = ProjectorKind::mlp;
  PromptModule prompt(pc, mc, 4);
  const auto a = temp_path("a.ckpt"), b = temp_path("b.ckpt");
  save_checkpoint(a, enc, &prompt, {{"stage", "meta"}});
  const Checkpoint ck = load_checkpoint(a);
  REQUIRE(ck.prompt.has_value());
  CHECK(ck.extra.at("stage") == "meta");
  CHECK(ck.prompt->config().projector == ProjectorKind::mlp);
  const auto p0 = enc.parameters();
  const auto p1 = ck.encoder.parameters();
  REQUIRE(p0.size() == p1.size());
  for (std::size_t i = 0; i < p0.size(); ++i) CHECK(p0[i]->value == p1[i]->value);
  save_checkpoint(b, ck.encoder, &*ck.prompt, ck.extra);
  CHECK(read_bytes(a) == read_bytes(b));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST_CASE("checkpoint without a prompt loads as a plain encoder") {
  Encoder enc(toy_model_config(), 1);
  const auto path = temp_path("plain.ckpt");
  save_checkpoint(path, enc);
  const Checkpoint ck = load_checkpoint(path);
  CHECK_FALSE(ck.prompt.has_value());
  std::filesystem::remove(path);
}

TEST_CASE("plain gradient descent moves by -lr * grad") {
  Parameter p("p", Tensor::vector({1.5}));
  p.grad[0] = 2.0;
  auto opt = make_optimizer(OptimizerKind::sgd, {{{&p}, 0.1, 0.0}});
  opt->step();
  CHECK(p.value[0] == doctest::Approx(1.5 - 0.1 * 2.0).epsilon(1e-15));
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
  Parameter w("w", Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const Tensor before = w.value;
  for (OptimizerKind k : {OptimizerKind::sgd, OptimizerKind::adamw}) {
    auto opt = make_optimizer(k, {{{&w}, 0.0, 0.5}});
    for (int i = 0; i < 5; ++i) {
      w.grad.fill(3.0);
      opt->step();
    }
    CHECK(w.value == before);
  }
}

TEST_CASE("first AdamW step is lr * sign(grad) plus decoupled decay on matrices") {
  Parameter w("w", Tensor::matrix(1, 2, {1.0, -2.0}));
  Parameter b("b", Tensor::vector({0.5}));
  w.grad[0] = 0.3;
  w.grad[1] = -4.0;
  b.grad[0] = 1e-3;
  const double lr = 0.01, wd = 0.1;
  auto opt = make_optimizer(OptimizerKind::adamw, {{{&w, &b}, lr, wd}});
  opt->step();
  // m_hat = g and v_hat = g^2 after one step.
  CHECK(w.value[0] == doctest::Approx(1.0 - lr * (0.3 / (0.3 + 1e-8) + wd * 1.0)).epsilon(1e-14));
  CHECK(w.value[1] == doctest::Approx(-2.0 - lr * (-4.0 / (4.0 + 1e-8) + wd * -2.0)).epsilon(1e-14));
  CHECK(b.value[0] == doctest::Approx(0.5 - lr * (1e-3 / (1e-3 + 1e-8))).epsilon(1e-14));
  CHECK(parse_optimizer("sgd") == OptimizerKind::sgd);
  CHECK_THROWS_AS(parse_optimizer("lbfgs"), ConfigError);
}
