// Hidden-state distillation of the layer-dropped emulator.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ot/data.hpp"
#include "ot/distill.hpp"
#include "ot/model.hpp"
#include "ot/surgery.hpp"

using namespace ot;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 8;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ff = 64;
  c.vocab_size = 256;
  c.max_seq_len = 64;
  c.tie_embeddings = true;
  c.arch = Arch::kGpt2Like;
  return c;
}

Corpus small_corpus() {
  // A deterministic slice keeps the suite fast; content comes from the same
  // generator as the bundled corpus files.
  return make_corpus("slice", generate_pretrain_text(404, 80 * 1024), 0.9);
}

DistillOptions fast_options(int64_t steps) {
  DistillOptions opt;
  opt.steps = steps;
  opt.batch_size = 2;
  opt.seq_len = 64;
  opt.seed = 1;
  opt.schedule = LrSchedule{1e-3, 1e-4, steps, std::min<int64_t>(10, steps)};
  return opt;
}

}  // namespace

TEST_CASE("distillation loss reproduces the worked examples") {
  // Identical outputs: exactly zero.
  auto a = Tensor<float>::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<float>::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(distill_loss(a, b).data()[0] == 0.0f);

  // One sample: squared L2 norm of the difference.
  auto s = Tensor<float>::from_vector({1, 2}, {1, 2});
  auto t = Tensor<float>::from_vector({1, 2}, {0, 0});
  CHECK(distill_loss(s, t).data()[0] == 5.0f);

  // Two samples of width four at constant offset one: norm is 4 each.
  auto s2 = Tensor<float>::filled({2, 4}, 2.0f);
  auto t2 = Tensor<float>::filled({2, 4}, 1.0f);
  CHECK(distill_loss(s2, t2).data()[0] == 4.0f);

  // Shape mismatch is a contract violation.
  auto wide = Tensor<float>::zeros({1, 3});
  CHECK_THROWS_AS(distill_loss(s, wide), ContractError);
}

TEST_CASE("distillation loss gradient lands on the student only") {
  auto s = Tensor<float>::from_vector({2, 2}, {1, 2, 3, 4});
  auto t = Tensor<float>::from_vector({2, 2}, {0, 1, 1, 2});
  s.set_requires_grad(true);
  t.set_requires_grad(false);
  auto loss = distill_loss(s, t);
  backward(loss);
  // d/ds of (1/N) sum (s-t)^2 = 2 (s-t) / N with N = 2.
  REQUIRE(s.grad().size() == 4);
  CHECK(s.grad()[0] == doctest::Approx(1.0f));
  CHECK(s.grad()[1] == doctest::Approx(1.0f));
  CHECK(s.grad()[2] == doctest::Approx(2.0f));
  CHECK(s.grad()[3] == doctest::Approx(2.0f));
  CHECK(t.grad().empty());
}

TEST_CASE("zero-step distillation is a bitwise no-op") {
  auto model = init_model<float>(small_config(), 31);
  SplitPlan plan;
  auto sm = split(model, plan);
  EmulatorSpec spec;
  spec.method = EmulatorMethod::kLayerDrop;
  spec.plan = uniform_layer_drop(4, 2);
  auto emu = build_emulator(sm, spec);
  const auto before = blocks_weight_hash<float>(
      {emu.data(), emu.size()}, "emulator");

  auto corpus = small_corpus();
  auto log = distill_emulator(sm, emu, corpus, fast_options(0));
  CHECK(log.empty());
  CHECK(blocks_weight_hash<float>({emu.data(), emu.size()}, "emulator") ==
        before);
}

TEST_CASE("full-depth emulator starts at exactly zero loss") {
  auto model = init_model<float>(small_config(), 77);
  SplitPlan plan;
  auto sm = split(model, plan);
  EmulatorSpec spec;
  spec.method = EmulatorMethod::kLayerDrop;
  spec.plan = uniform_layer_drop(4, 4);  // exact copy of the middle
  auto emu = build_emulator(sm, spec);

  auto corpus = small_corpus();
  auto log = distill_emulator(sm, emu, corpus, fast_options(1));
  REQUIRE(log.size() == 1);
  CHECK(log[0] == 0.0);

  // A dropped-layer emulator starts strictly above zero.
  EmulatorSpec dropped;
  dropped.method = EmulatorMethod::kLayerDrop;
  dropped.plan = uniform_layer_drop(4, 2);
  auto emu2 = build_emulator(sm, dropped);
  auto log2 = distill_emulator(sm, emu2, corpus, fast_options(1));
  REQUIRE(log2.size() == 1);
  CHECK(log2[0] > 0.0);
}

TEST_CASE("distillation trains the student and freezes everything else") {
  auto model = init_model<float>(small_config(), 5);
  SplitPlan plan;
  auto sm = split(model, plan);
  EmulatorSpec spec;
  spec.method = EmulatorMethod::kLayerDrop;
  spec.plan = uniform_layer_drop(4, 2);
  auto emu = build_emulator(sm, spec);

  const auto teacher_before = blocks_weight_hash<float>(sm.middle_span(),
                                                        "blocks");
  const auto a1_before = blocks_weight_hash<float>(sm.a1_span(), "a1");
  const auto a2_before = blocks_weight_hash<float>(sm.a2_span(), "a2");
  const auto embed_before = tensor_hash(sm.tok_embed);
  const auto student_before = blocks_weight_hash<float>(
      {emu.data(), emu.size()}, "emulator");

  auto corpus = small_corpus();
  auto opt = fast_options(150);
  auto log = distill_emulator(sm, emu, corpus, opt);
  REQUIRE(log.size() == 150);

  // Teacher-freeze: bottom, middle, top, and embeddings hash identically.
  CHECK(blocks_weight_hash<float>(sm.middle_span(), "blocks") ==
        teacher_before);
  CHECK(blocks_weight_hash<float>(sm.a1_span(), "a1") == a1_before);
  CHECK(blocks_weight_hash<float>(sm.a2_span(), "a2") == a2_before);
  CHECK(tensor_hash(sm.tok_embed) == embed_before);
  // The student moved.
  CHECK(blocks_weight_hash<float>({emu.data(), emu.size()}, "emulator") !=
        student_before);
  // And learned something: the tail of the curve sits well under the start.
  CHECK(log.back() < 0.5 * log.front());
  // The sandwich goes back to trainable after the run.
  CHECK(sm.a1[0].qkv.weight.requires_grad());
  // The student ships frozen.
  CHECK_FALSE(emu[0].qkv.weight.requires_grad());
}

TEST_CASE("distillation is deterministic and logs a loss curve") {
  auto corpus = small_corpus();
  auto run = [&](const std::string& log_path) {
    auto model = init_model<float>(small_config(), 5);
    SplitPlan plan;
    auto sm = split(model, plan);
    EmulatorSpec spec;
    spec.method = EmulatorMethod::kLayerDrop;
    spec.plan = uniform_layer_drop(4, 2);
    auto emu = build_emulator(sm, spec);
    auto opt = fast_options(25);
    opt.log_path = log_path;
    auto log = distill_emulator(sm, emu, corpus, opt);
    return std::pair{
        blocks_weight_hash<float>({emu.data(), emu.size()}, "emulator"), log};
  };

  const auto csv =
      (std::filesystem::temp_directory_path() / "distill_curve.csv").string();
  auto [h1, log1] = run(csv);
  auto [h2, log2] = run("");
  CHECK(h1 == h2);
  REQUIRE(log1.size() == log2.size());
  for (size_t i = 0; i < log1.size(); ++i) CHECK(log1[i] == log2[i]);

  std::ifstream in(csv);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,loss");
  size_t rows = 0;
  for (std::string line; std::getline(in, line) && !line.empty();) ++rows;
  CHECK(rows == 25);
  std::filesystem::remove(csv);
}

TEST_CASE("distillation schedule and budget are validated") {
  auto model = init_model<float>(small_config(), 9);
  SplitPlan plan;
  auto sm = split(model, plan);
  EmulatorSpec spec;
  spec.method = EmulatorMethod::kLayerDrop;
  spec.plan = uniform_layer_drop(4, 2);
  auto emu = build_emulator(sm, spec);
  auto corpus = small_corpus();

  auto opt = fast_options(10);
  opt.schedule.total_steps = 99;  // disagrees with the step budget
  CHECK_THROWS_AS(distill_emulator(sm, emu, corpus, opt), ContractError);

  auto neg = fast_options(10);
  neg.steps = -1;
  CHECK_THROWS_AS(distill_emulator(sm, emu, corpus, neg), ContractError);
}
