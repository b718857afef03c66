// Model surgery: split, uniform layer-drop, lossy emulators, plug-in.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "ot/model.hpp"
#include "ot/surgery.hpp"

using namespace ot;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 8;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.max_seq_len = 16;
  c.tie_embeddings = true;
  c.arch = Arch::kGpt2Like;
  return c;
}

// Integer-exact round-half-away-from-zero of j*(m-1)/(k-1), used as an
// independent oracle for the retained-index rule.
int64_t oracle_index(int64_t j, int64_t m, int64_t k) {
  const int64_t num = j * (m - 1);
  const int64_t den = k - 1;
  const int64_t q = num / den;
  const int64_t r = num % den;
  return q + (2 * r >= den ? 1 : 0);
}

bool tensors_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  auto av = a.data(), bv = b.data();
  for (size_t i = 0; i < av.size(); ++i)
    if (av[i] != bv[i]) return false;
  return true;
}

std::vector<float> forward_sum_probe(const TransformerModel<float>& m,
                                     const std::vector<int32_t>& ids,
                                     int64_t batch, int64_t seq) {
  auto logits = forward_full(m, ids, batch, seq);
  return std::vector<float>(logits.data().begin(), logits.data().end());
}

}  // namespace

TEST_CASE("uniform layer drop reproduces the worked examples") {
  CHECK(uniform_layer_drop(5, 2).retained_indices ==
        std::vector<int64_t>{0, 4});
  CHECK(uniform_layer_drop(5, 5).retained_indices ==
        std::vector<int64_t>{0, 1, 2, 3, 4});
  CHECK(uniform_layer_drop(6, 3).retained_indices ==
        std::vector<int64_t>{0, 3, 5});
  CHECK(uniform_layer_drop(4, 2).retained_indices ==
        std::vector<int64_t>{0, 3});

  auto big = uniform_layer_drop(28, 18);
  CHECK(big.retained_indices.size() == 18);
  CHECK(big.retained_indices.front() == 0);
  CHECK(big.retained_indices.back() == 27);
}

TEST_CASE("uniform layer drop matches an integer-exact oracle everywhere") {
  for (int64_t m = 2; m <= 24; ++m) {
    for (int64_t k = 2; k <= m; ++k) {
      auto plan = uniform_layer_drop(m, k);
      REQUIRE(plan.retained_indices.size() == static_cast<size_t>(k));
      const double stride = double(m - 1) / double(k - 1);
      for (int64_t j = 0; j < k; ++j) {
        const int64_t got = plan.retained_indices[static_cast<size_t>(j)];
        CHECK(got == oracle_index(j, m, k));
        // Every retained index sits within half a stride of its ideal spot.
        CHECK(std::abs(double(got) - double(j) * stride) <= 0.5);
        if (j > 0)
          CHECK(got > plan.retained_indices[static_cast<size_t>(j - 1)]);
      }
      CHECK(plan.retained_indices.front() == 0);
      CHECK(plan.retained_indices.back() == m - 1);
      // Uniform spacing: consecutive gaps differ by at most one.
      if (k >= 3) {
        int64_t gap_min = m, gap_max = 0;
        for (int64_t j = 1; j < k; ++j) {
          const int64_t gap = plan.retained_indices[static_cast<size_t>(j)] -
                              plan.retained_indices[static_cast<size_t>(j - 1)];
          gap_min = std::min(gap_min, gap);
          gap_max = std::max(gap_max, gap);
        }
        CHECK(gap_max - gap_min <= 1);
      }
      if (k == m)  // keeping everything must be the identity
        for (int64_t j = 0; j < k; ++j)
          CHECK(plan.retained_indices[static_cast<size_t>(j)] == j);
    }
  }
}

TEST_CASE("layer drop rejects degenerate depths") {
  CHECK_THROWS_AS(uniform_layer_drop(5, 1), PlanError);
  CHECK_THROWS_AS(uniform_layer_drop(5, 6), PlanError);
  CHECK_THROWS_AS(uniform_layer_drop(0, 0), PlanError);

  LayerDropPlan bad;
  bad.m = 6;
  bad.k = 3;
  bad.retained_indices = {0, 1, 5};  // interior index strays from the stride
  CHECK_THROWS_AS(bad.validate(), PlanError);
  bad.retained_indices = {0, 3, 4};  // endpoint missing
  CHECK_THROWS_AS(bad.validate(), PlanError);
}

TEST_CASE("split plan validation") {
  SplitPlan ok;
  ok.n_bottom = 2;
  ok.n_top = 2;
  ok.validate(8);

  SplitPlan no_middle;
  no_middle.n_bottom = 4;
  no_middle.n_top = 4;
  CHECK_THROWS_AS(no_middle.validate(8), PlanError);

  SplitPlan negative;
  negative.n_bottom = -1;
  negative.n_top = 2;
  CHECK_THROWS_AS(negative.validate(8), PlanError);

  SplitPlan empty;  // 0+0 is a legal (if pointless) sandwich
  empty.n_bottom = 0;
  empty.n_top = 0;
  empty.validate(8);
}

TEST_CASE("split partitions layers and assigns trainability") {
  auto model = init_model<float>(tiny_config(), 42);
  SplitPlan plan;
  plan.n_bottom = 2;
  plan.n_top = 2;
  auto sm = split(model, plan);

  REQUIRE(sm.a1.size() == 2);
  REQUIRE(sm.middle.size() == 4);
  REQUIRE(sm.a2.size() == 2);

  // Views alias the source model: same underlying storage, in layer order.
  CHECK(sm.a1[0].ln1_gain.data().data() ==
        model.blocks[0].ln1_gain.data().data());
  CHECK(sm.middle[0].ln1_gain.data().data() ==
        model.blocks[2].ln1_gain.data().data());
  CHECK(sm.middle[3].ln1_gain.data().data() ==
        model.blocks[5].ln1_gain.data().data());
  CHECK(sm.a2[1].ln1_gain.data().data() ==
        model.blocks[7].ln1_gain.data().data());

  // Sandwich trainable, middle and embeddings frozen, final norm follows the
  // top segment.
  CHECK(sm.a1[0].qkv.weight.requires_grad());
  CHECK(sm.a2[1].mlp_down.bias.requires_grad());
  CHECK_FALSE(sm.middle[1].qkv.weight.requires_grad());
  CHECK_FALSE(sm.tok_embed.requires_grad());
  CHECK_FALSE(sm.pos_embed.requires_grad());
  CHECK(sm.final_norm_gain.requires_grad());

  SplitPlan bottom_only;
  bottom_only.n_bottom = 4;
  bottom_only.n_top = 0;
  auto model2 = init_model<float>(tiny_config(), 42);
  auto sm2 = split(model2, bottom_only);
  CHECK(sm2.a2.empty());
  CHECK_FALSE(sm2.final_norm_gain.requires_grad());
}

TEST_CASE("split provenance pins the source weights") {
  auto model = init_model<float>(tiny_config(), 7);
  SplitPlan plan;
  auto sm = split(model, plan);
  CHECK(sm.provenance == model_weight_hash(model));
  CHECK(sm.provenance.size() == 64);

  // Any weight nudge changes the hash.
  model.blocks[3].mlp_up.weight.data()[5] += 1e-3f;
  CHECK(sm.provenance != model_weight_hash(model));
}

TEST_CASE("layer-drop emulator deep-copies the retained blocks") {
  auto model = init_model<float>(tiny_config(), 11);
  SplitPlan plan;  // 2+2 around a 4-block middle
  auto sm = split(model, plan);

  EmulatorSpec spec;
  spec.method = EmulatorMethod::kLayerDrop;
  spec.plan = uniform_layer_drop(4, 2);
  auto emu = build_emulator(sm, spec);

  REQUIRE(emu.size() == 2);
  // Retained blocks are middle[0] and middle[3] = model layers 2 and 5.
  CHECK(tensors_equal(emu[0].qkv.weight, model.blocks[2].qkv.weight));
  CHECK(tensors_equal(emu[1].qkv.weight, model.blocks[5].qkv.weight));
  // Deep copies: distinct storage, frozen flags.
  CHECK(emu[0].qkv.weight.data().data() !=
        model.blocks[2].qkv.weight.data().data());
  CHECK_FALSE(emu[0].qkv.weight.requires_grad());

  // Mutating the emulator leaves the source model untouched.
  emu[0].qkv.weight.data()[0] += 1.0f;
  CHECK_FALSE(tensors_equal(emu[0].qkv.weight, model.blocks[2].qkv.weight));

  // Full-depth plan reproduces the middle bitwise.
  EmulatorSpec full;
  full.method = EmulatorMethod::kLayerDrop;
  full.plan = uniform_layer_drop(4, 4);
  auto emu_full = build_emulator(sm, full);
  REQUIRE(emu_full.size() == 4);
  for (size_t j = 0; j < 4; ++j)
    CHECK(tensors_equal(emu_full[j].mlp_down.weight,
                        sm.middle[j].mlp_down.weight));

  EmulatorSpec mismatched;
  mismatched.method = EmulatorMethod::kLayerDrop;
  mismatched.plan = uniform_layer_drop(6, 3);  // built for the wrong depth
  CHECK_THROWS_AS(build_emulator(sm, mismatched), PlanError);
}

TEST_CASE("magnitude pruning zeroes the smallest weights with index ties") {
  Tensor<float> t = Tensor<float>::from_vector({4}, {3.0f, -1.0f, 2.0f, 0.5f});
  detail::prune_tensor(t, 0.5);
  CHECK(t.data()[0] == 3.0f);
  CHECK(t.data()[1] == 0.0f);
  CHECK(t.data()[2] == 2.0f);
  CHECK(t.data()[3] == 0.0f);

  // floor(0.5 * 3) = 1: only the single smallest entry goes.
  Tensor<float> odd = Tensor<float>::from_vector({3}, {3.0f, -1.0f, 2.0f});
  detail::prune_tensor(odd, 0.5);
  CHECK(odd.data()[0] == 3.0f);
  CHECK(odd.data()[1] == 0.0f);
  CHECK(odd.data()[2] == 2.0f);

  // Equal magnitudes: the lower flat index is zeroed first.
  Tensor<float> ties =
      Tensor<float>::from_vector({4}, {1.0f, -1.0f, 1.0f, 2.0f});
  detail::prune_tensor(ties, 0.5);
  CHECK(ties.data()[0] == 0.0f);
  CHECK(ties.data()[1] == 0.0f);
  CHECK(ties.data()[2] == 1.0f);
  CHECK(ties.data()[3] == 2.0f);

  // Sparsity 0 is a no-op.
  Tensor<float> keep = Tensor<float>::from_vector({2}, {5.0f, -5.0f});
  detail::prune_tensor(keep, 0.0);
  CHECK(keep.data()[0] == 5.0f);
  CHECK(keep.data()[1] == -5.0f);
}

TEST_CASE("quantization round-trips through the symmetric grid") {
  Tensor<float> t = Tensor<float>::from_vector({3}, {0.0f, 0.5f, -1.0f});
  detail::quantize_tensor(t, 8);
  const double scale = 1.0 / 127.0;  // max |w| over 2^7 - 1 levels
  CHECK(t.data()[0] == 0.0f);
  // 0.5 / scale = 63.5 rounds away from zero to 64.
  CHECK(t.data()[1] == static_cast<float>(64.0 * scale));
  CHECK(t.data()[2] == -1.0f);

  // Max-magnitude entries always land back on themselves.
  Tensor<float> m = Tensor<float>::from_vector({2}, {2.5f, -2.5f});
  detail::quantize_tensor(m, 4);
  CHECK(m.data()[0] == 2.5f);
  CHECK(m.data()[1] == -2.5f);

  // An all-zero tensor has no scale and stays put.
  Tensor<float> z = Tensor<float>::zeros({4});
  detail::quantize_tensor(z, 8);
  for (float v : z.data()) CHECK(v == 0.0f);

  // Coarser grids discard more: 2-bit keeps only {-max, 0, +max}.
  Tensor<float> coarse =
      Tensor<float>::from_vector({3}, {1.0f, 0.3f, -0.6f});
  detail::quantize_tensor(coarse, 2);
  CHECK(coarse.data()[0] == 1.0f);
  CHECK(coarse.data()[1] == 0.0f);
  CHECK(coarse.data()[2] == -1.0f);
}

TEST_CASE("emulator spec validation rejects mismatched fields") {
  EmulatorSpec s;
  s.method = EmulatorMethod::kLayerDrop;
  CHECK_THROWS_AS(s.validate(), SpecError);  // plan missing
  s.plan = uniform_layer_drop(4, 2);
  s.validate();
  s.sparsity = 0.5;  // stray field for this method
  CHECK_THROWS_AS(s.validate(), SpecError);

  EmulatorSpec p;
  p.method = EmulatorMethod::kMagnitudePrune;
  p.sparsity = 1.0;  // outside [0,1)
  CHECK_THROWS_AS(p.validate(), SpecError);
  p.sparsity = 0.9;
  p.validate();

  EmulatorSpec q;
  q.method = EmulatorMethod::kQuantize;
  q.bits = 1;
  CHECK_THROWS_AS(q.validate(), SpecError);
  q.bits = 2;
  q.validate();
}

TEST_CASE("prune and quantize emulators keep depth and spare the norms") {
  auto model = init_model<float>(tiny_config(), 5);
  SplitPlan plan;
  auto sm = split(model, plan);

  EmulatorSpec spec;
  spec.method = EmulatorMethod::kMagnitudePrune;
  spec.sparsity = 0.5;
  auto emu = build_emulator(sm, spec);
  REQUIRE(emu.size() == sm.middle.size());

  // Half of each weight matrix is zero; biases and norm gains are untouched.
  for (size_t j = 0; j < emu.size(); ++j) {
    int64_t zeros = 0;
    for (float v : emu[j].qkv.weight.data()) zeros += (v == 0.0f);
    CHECK(zeros >= emu[j].qkv.weight.numel() / 2);
    CHECK(tensors_equal(emu[j].qkv.bias, sm.middle[j].qkv.bias));
    CHECK(tensors_equal(emu[j].ln1_gain, sm.middle[j].ln1_gain));
    CHECK(tensors_equal(emu[j].ln2_bias, sm.middle[j].ln2_bias));
  }
  // Source middle blocks keep their original (dense) weights.
  int64_t src_zeros = 0;
  for (float v : sm.middle[0].qkv.weight.data()) src_zeros += (v == 0.0f);
  CHECK(src_zeros == 0);

  EmulatorSpec qspec;
  qspec.method = EmulatorMethod::kQuantize;
  qspec.bits = 8;
  auto qemu = build_emulator(sm, qspec);
  REQUIRE(qemu.size() == sm.middle.size());
  for (size_t j = 0; j < qemu.size(); ++j) {
    // Quantized weights differ but stay close at 8 bits.
    auto src = sm.middle[j].mlp_up.weight.data();
    auto dst = qemu[j].mlp_up.weight.data();
    double max_abs = 0;
    for (float v : src) max_abs = std::max(max_abs, std::abs(double(v)));
    const double step = max_abs / 127.0;
    for (size_t i = 0; i < src.size(); ++i)
      CHECK(std::abs(double(dst[i]) - double(src[i])) <= 0.5 * step + 1e-12);
    CHECK(tensors_equal(qemu[j].mlp_up.bias, sm.middle[j].mlp_up.bias));
  }
}

TEST_CASE("extract and plug in an untouched adapter is a bitwise identity") {
  auto cfg = tiny_config();
  auto model = init_model<float>(cfg, 99);
  const std::string before = model_weight_hash(model);

  SplitPlan plan;
  auto sm = split(model, plan);
  auto adapter = extract_adapter(sm);
  CHECK(adapter.n_bottom == 2);
  CHECK(adapter.n_top == 2);
  // Extraction deep-copies: tuning the copy must not reach the owner model.
  adapter.a1[0].qkv.weight.data()[0] += 0.0f;
  CHECK(adapter.a1[0].qkv.weight.data().data() !=
        model.blocks[0].qkv.weight.data().data());

  auto plugged = plug_in(model, adapter);
  CHECK(model_weight_hash(plugged) == before);
  CHECK(model_weight_hash(model) == before);  // source untouched

  // And the forward pass agrees bit for bit.
  std::vector<int32_t> ids = {1, 2, 3, 4, 5, 6, 7, 8};
  auto a = forward_sum_probe(model, ids, 1, 8);
  auto b = forward_sum_probe(plugged, ids, 1, 8);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("plug in carries tuned weights and leaves the middle alone") {
  auto model = init_model<float>(tiny_config(), 123);
  SplitPlan plan;
  auto sm = split(model, plan);
  auto adapter = extract_adapter(sm);

  // Simulate tuning: perturb a bottom weight, a top bias, the final norm.
  adapter.a1[0].qkv.weight.data()[3] = 9.0f;
  adapter.a2[1].mlp_down.bias.data()[1] = -4.0f;
  adapter.final_norm_gain.data()[0] = 2.0f;

  auto plugged = plug_in(model, adapter);
  CHECK(plugged.blocks[0].qkv.weight.data()[3] == 9.0f);
  CHECK(plugged.blocks[7].mlp_down.bias.data()[1] == -4.0f);
  CHECK(plugged.final_norm_gain.data()[0] == 2.0f);
  // The original still has its init values.
  CHECK(model.blocks[0].qkv.weight.data()[3] != 9.0f);

  // Middle blocks bitwise inherited from the base.
  for (int64_t i = 2; i <= 5; ++i)
    CHECK(tensors_equal(plugged.blocks[static_cast<size_t>(i)].qkv.weight,
                        model.blocks[static_cast<size_t>(i)].qkv.weight));
}

TEST_CASE("plug in rejects adapters from a different base") {
  auto model = init_model<float>(tiny_config(), 1);
  SplitPlan plan;
  auto sm = split(model, plan);
  auto adapter = extract_adapter(sm);

  auto other = init_model<float>(tiny_config(), 2);
  CHECK_THROWS_AS(plug_in(other, adapter), IntegrationError);

  // The same model with one drifted weight also fails the check.
  auto drifted = clone_model(model);
  drifted.blocks[4].attn_out.weight.data()[0] += 1e-4f;
  CHECK_THROWS_AS(plug_in(drifted, adapter), IntegrationError);

  // A lied-about plan is caught before any installation.
  auto bad_plan = extract_adapter(sm);
  bad_plan.n_bottom = 3;
  CHECK_THROWS_AS(plug_in(model, bad_plan), IntegrationError);
}

TEST_CASE("plug in merges nonzero low-rank factors into the base weight") {
  auto model = init_model<float>(tiny_config(), 55);
  SplitPlan plan;
  auto sm = split(model, plan);
  auto adapter = extract_adapter(sm);
  adapter.mode = PeftMode::kLora;

  // Hand-attach a rank-1 pair on one linear: A = ones, B = 0.01 * ones.
  auto& lin = adapter.a1[0].attn_out;
  const int64_t d = lin.weight.dim(0);
  lin.lora = true;
  lin.lora_a = Tensor<float>::filled({d, 1}, 1.0f);
  lin.lora_b = Tensor<float>::filled({1, d}, 0.01f);
  lin.lora_scale = 2.0f;

  auto plugged = plug_in(model, adapter);
  // Every entry of the merged weight moved by scale * 1 * 0.01 = 0.02.
  auto w0 = model.blocks[0].attn_out.weight.data();
  auto w1 = plugged.blocks[0].attn_out.weight.data();
  for (size_t i = 0; i < w0.size(); ++i)
    CHECK(w1[i] == doctest::Approx(w0[i] + 0.02f).epsilon(1e-6));
  // And the plugged model carries no residual factors of its own.
  CHECK_FALSE(plugged.blocks[0].attn_out.lora);

  // Zero B (never trained) merges to the base weight bitwise.
  auto neutral = extract_adapter(sm);
  neutral.mode = PeftMode::kLora;
  auto& nlin = neutral.a1[0].attn_out;
  nlin.lora = true;
  nlin.lora_a = Tensor<float>::filled({d, 1}, 1.0f);
  nlin.lora_b = Tensor<float>::zeros({1, d});
  nlin.lora_scale = 2.0f;
  auto plugged2 = plug_in(model, neutral);
  CHECK(tensors_equal(plugged2.blocks[0].attn_out.weight,
                      model.blocks[0].attn_out.weight));
}

TEST_CASE("blocks weight hash distinguishes segments and orders") {
  auto model = init_model<float>(tiny_config(), 77);
  SplitPlan plan;
  auto sm = split(model, plan);
  auto h_mid = blocks_weight_hash<float>(sm.middle_span(), "blocks");
  auto h_a1 = blocks_weight_hash<float>(sm.a1_span(), "blocks");
  CHECK(h_mid != h_a1);
  CHECK(h_mid.size() == 64);
  // Same blocks, same prefix: stable.
  CHECK(h_mid == blocks_weight_hash<float>(sm.middle_span(), "blocks"));
  // Prefix participates in the digest.
  CHECK(h_mid != blocks_weight_hash<float>(sm.middle_span(), "emulator"));
}
