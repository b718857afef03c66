#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ot/common.hpp"
#include "ot/gemm.hpp"
#include "ot/model.hpp"
#include "ot/sha256.hpp"

namespace ot {

// Model surgery: carve a model into the trainable sandwich (bottom segment
// A1, top segment A2) plus the frozen middle E; derive lossy emulators of E
// by uniform layer-drop, magnitude pruning, or quantization; and reinstall a
// tuned adapter into the original model.

struct SplitPlan {
  int64_t n_bottom = 2;
  int64_t n_top = 2;
  // Embeddings and head stay frozen; these flags exist so the convention is
  // explicit at call sites (flipping them is not supported by accounting).
  bool include_embeddings_in_adapter = false;
  bool include_head_in_adapter = false;

  void validate(int64_t n_layers) const {
    OT_CHECK(n_bottom >= 0 && n_top >= 0, PlanError,
             "split plan segments must be non-negative");
    OT_CHECK(n_bottom + n_top < n_layers, PlanError,
             "adapter of " << n_bottom << "+" << n_top
                           << " layers leaves no middle in a " << n_layers
                           << "-layer model");
    OT_CHECK(!include_embeddings_in_adapter && !include_head_in_adapter,
             PlanError, "embeddings and head are always frozen here");
  }
};

struct LayerDropPlan {
  int64_t m = 0;  // middle depth
  int64_t k = 0;  // retained depth
  std::vector<int64_t> retained_indices;

  void validate() const {
    OT_CHECK(2 <= k && k <= m, PlanError,
             "layer-drop needs 2 <= k <= m, got k=" << k << " m=" << m);
    OT_CHECK(static_cast<int64_t>(retained_indices.size()) == k, PlanError,
             "plan holds " << retained_indices.size() << " indices, expected "
                           << k);
    OT_CHECK(retained_indices.front() == 0 && retained_indices.back() == m - 1,
             PlanError, "endpoints must be retained");
    const double stride =
        static_cast<double>(m - 1) / static_cast<double>(k - 1);
    for (int64_t j = 0; j < k; ++j) {
      if (j > 0)
        OT_CHECK(retained_indices[j] > retained_indices[j - 1], PlanError,
                 "retained indices must be strictly increasing");
      OT_CHECK(std::abs(static_cast<double>(retained_indices[j]) -
                        static_cast<double>(j) * stride) <= 0.5 + 1e-9,
               PlanError, "index " << retained_indices[j]
                                   << " strays from the uniform stride");
    }
  }
};

// Retain k of m layers at uniform stride, endpoints always kept. The
// half-way rounding rule is round-half-away-from-zero.
inline LayerDropPlan uniform_layer_drop(int64_t m, int64_t k) {
  OT_CHECK(2 <= k && k <= m, PlanError,
           "layer-drop needs 2 <= k <= m, got k=" << k << " m=" << m);
  LayerDropPlan plan;
  plan.m = m;
  plan.k = k;
  const double stride = static_cast<double>(m - 1) / static_cast<double>(k - 1);
  plan.retained_indices.reserve(static_cast<size_t>(k));
  for (int64_t j = 0; j < k; ++j)
    plan.retained_indices.push_back(
        std::llround(static_cast<double>(j) * stride));
  plan.validate();
  return plan;
}

enum class EmulatorMethod { kLayerDrop, kMagnitudePrune, kQuantize, kDistilled };

inline const char* emulator_method_name(EmulatorMethod m) {
  switch (m) {
    case EmulatorMethod::kLayerDrop: return "layer_drop";
    case EmulatorMethod::kMagnitudePrune: return "magnitude_prune";
    case EmulatorMethod::kQuantize: return "quantize";
    case EmulatorMethod::kDistilled: return "distilled";
  }
  return "?";
}

struct EmulatorSpec {
  EmulatorMethod method = EmulatorMethod::kLayerDrop;
  std::optional<LayerDropPlan> plan;  // layer_drop / distilled
  std::optional<double> sparsity;     // magnitude_prune, in [0,1)
  std::optional<int> bits;            // quantize, >= 2

  void validate() const {
    const bool wants_plan = method == EmulatorMethod::kLayerDrop ||
                            method == EmulatorMethod::kDistilled;
    OT_CHECK(plan.has_value() == wants_plan, SpecError,
             "emulator spec: layer plan must be set exactly for "
             "layer_drop/distilled");
    OT_CHECK(sparsity.has_value() ==
                 (method == EmulatorMethod::kMagnitudePrune),
             SpecError,
             "emulator spec: sparsity must be set exactly for magnitude_prune");
    OT_CHECK(bits.has_value() == (method == EmulatorMethod::kQuantize),
             SpecError, "emulator spec: bits must be set exactly for quantize");
    if (plan) plan->validate();
    if (sparsity)
      OT_CHECK(*sparsity >= 0.0 && *sparsity < 1.0, SpecError,
               "sparsity " << *sparsity << " outside [0,1)");
    if (bits)
      OT_CHECK(*bits >= 2, SpecError, "quantize needs bits >= 2, got " << *bits);
  }
};

// ---------------------------------------------------------------------------
// Provenance hashing
// ---------------------------------------------------------------------------

template <class S>
void hash_values(Sha256& h, std::span<const S> values) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  for (S v : values) {
    uint8_t le[sizeof(S)];
    uint64_t word = 0;
    std::memcpy(&word, &v, sizeof(S));
    for (size_t i = 0; i < sizeof(S); ++i) le[i] = uint8_t(word >> (8 * i));
    h.update(le, sizeof(S));
  }
}

template <class S>
std::string tensor_hash(const Tensor<S>& t) {
  Sha256 h;
  hash_values<S>(h, t.data());
  return to_hex(h.digest());
}

// Hash over every named tensor (name then little-endian values) in traversal
// order; pins the full weight state of a model.
template <class S>
std::string model_weight_hash(const TransformerModel<S>& m) {
  Sha256 h;
  for (const auto& [name, t] : named_params(m)) {
    h.update(name.data(), name.size());
    hash_values<S>(h, t.data());
  }
  return to_hex(h.digest());
}

template <class S>
std::string blocks_weight_hash(std::span<const TransformerBlock<S>> blocks,
                               const std::string& prefix) {
  Sha256 h;
  NamedParams<S> params;
  for (size_t i = 0; i < blocks.size(); ++i)
    block_params(blocks[i], prefix + "." + std::to_string(i), params);
  for (const auto& [name, t] : params) {
    h.update(name.data(), name.size());
    hash_values<S>(h, t.data());
  }
  return to_hex(h.digest());
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

template <class S>
void set_linear_trainable(Linear<S>& lin, bool trainable) {
  lin.weight.set_requires_grad(trainable);
  lin.bias.set_requires_grad(trainable);
  if (lin.lora) {
    lin.lora_a.set_requires_grad(trainable);
    lin.lora_b.set_requires_grad(trainable);
  }
}

template <class S>
void set_block_trainable(TransformerBlock<S>& b, bool trainable) {
  b.ln1_gain.set_requires_grad(trainable);
  b.ln1_bias.set_requires_grad(trainable);
  if (b.arch == Arch::kGpt2Like) {
    set_linear_trainable(b.qkv, trainable);
  } else {
    set_linear_trainable(b.q, trainable);
    set_linear_trainable(b.k, trainable);
    set_linear_trainable(b.v, trainable);
  }
  set_linear_trainable(b.attn_out, trainable);
  b.ln2_gain.set_requires_grad(trainable);
  b.ln2_bias.set_requires_grad(trainable);
  set_linear_trainable(b.mlp_up, trainable);
  set_linear_trainable(b.mlp_down, trainable);
  if (b.adapter_attn) {
    set_linear_trainable(b.adapter_attn->down, trainable);
    set_linear_trainable(b.adapter_attn->up, trainable);
  }
  if (b.adapter_mlp) {
    set_linear_trainable(b.adapter_mlp->down, trainable);
    set_linear_trainable(b.adapter_mlp->up, trainable);
  }
}

// The carved model. Blocks hold shared handles into the source model, so the
// split is a view plus trainability flags, not a copy.
template <class S>
struct SplitModel {
  ModelConfig config;
  SplitPlan plan;
  std::vector<TransformerBlock<S>> a1, a2;  // trainable sandwich
  std::vector<TransformerBlock<S>> middle;  // frozen E
  Tensor<S> tok_embed, pos_embed;           // frozen
  // The final norm travels with the top segment: trainable iff n_top > 0.
  Tensor<S> final_norm_gain, final_norm_bias;
  Tensor<S> lm_head;  // untied configs only; frozen
  std::string provenance;  // weight hash of the source model at split time

  std::span<const TransformerBlock<S>> a1_span() const {
    return {a1.data(), a1.size()};
  }
  std::span<const TransformerBlock<S>> a2_span() const {
    return {a2.data(), a2.size()};
  }
  std::span<const TransformerBlock<S>> middle_span() const {
    return {middle.data(), middle.size()};
  }
};

// A bare model carrying only embeddings, final norm, and head — enough for
// embed_inputs/head_logits when the blocks are supplied separately.
template <class S>
TransformerModel<S> shell_model(const ModelConfig& config,
                                const Tensor<S>& tok_embed,
                                const Tensor<S>& pos_embed,
                                const Tensor<S>& final_norm_gain,
                                const Tensor<S>& final_norm_bias,
                                const Tensor<S>& lm_head) {
  TransformerModel<S> m;
  m.config = config;
  m.tok_embed = tok_embed;
  m.pos_embed = pos_embed;
  m.final_norm_gain = final_norm_gain;
  m.final_norm_bias = final_norm_bias;
  m.lm_head = lm_head;
  return m;
}

template <class S>
SplitModel<S> split(TransformerModel<S>& model, const SplitPlan& plan) {
  plan.validate(model.config.n_layers);
  SplitModel<S> out;
  out.config = model.config;
  out.plan = plan;
  out.provenance = model_weight_hash(model);
  const int64_t n = model.config.n_layers;
  for (int64_t i = 0; i < plan.n_bottom; ++i)
    out.a1.push_back(model.blocks[static_cast<size_t>(i)]);
  for (int64_t i = plan.n_bottom; i < n - plan.n_top; ++i)
    out.middle.push_back(model.blocks[static_cast<size_t>(i)]);
  for (int64_t i = n - plan.n_top; i < n; ++i)
    out.a2.push_back(model.blocks[static_cast<size_t>(i)]);
  out.tok_embed = model.tok_embed;
  out.pos_embed = model.pos_embed;
  out.final_norm_gain = model.final_norm_gain;
  out.final_norm_bias = model.final_norm_bias;
  if (!model.config.tie_embeddings) out.lm_head = model.lm_head;

  for (auto& b : out.a1) set_block_trainable(b, true);
  for (auto& b : out.a2) set_block_trainable(b, true);
  for (auto& b : out.middle) set_block_trainable(b, false);
  out.tok_embed.set_requires_grad(false);
  out.pos_embed.set_requires_grad(false);
  const bool norm_trainable = plan.n_top > 0;
  out.final_norm_gain.set_requires_grad(norm_trainable);
  out.final_norm_bias.set_requires_grad(norm_trainable);
  if (out.lm_head.defined()) out.lm_head.set_requires_grad(false);
  return out;
}

// ---------------------------------------------------------------------------
// Emulator construction
// ---------------------------------------------------------------------------

namespace detail {

// Zero the smallest-|w| floor(sparsity * numel) entries; ties broken by
// lower flat index.
template <class S>
void prune_tensor(Tensor<S>& t, double sparsity) {
  const int64_t n = t.numel();
  const int64_t n_zero =
      static_cast<int64_t>(std::floor(sparsity * static_cast<double>(n)));
  if (n_zero <= 0) return;
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  auto v = t.data();
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return std::abs(v[a]) < std::abs(v[b]);
  });
  for (int64_t i = 0; i < n_zero; ++i) v[idx[static_cast<size_t>(i)]] = S(0);
}

// Symmetric per-tensor quantize-dequantize round trip at `bits`, rounding
// half away from zero. Zeros survive exactly.
template <class S>
void quantize_tensor(Tensor<S>& t, int bits) {
  const double levels = std::pow(2.0, bits - 1) - 1.0;
  double max_abs = 0;
  for (S v : t.data()) max_abs = std::max(max_abs, std::abs(double(v)));
  if (max_abs == 0) return;
  const double scale = max_abs / levels;
  for (S& v : t.data())
    v = static_cast<S>(std::llround(double(v) / scale) * scale);
}

template <class S>
void for_each_weight_matrix(TransformerBlock<S>& b, auto&& fn) {
  if (b.arch == Arch::kGpt2Like) {
    fn(b.qkv.weight);
  } else {
    fn(b.q.weight);
    fn(b.k.weight);
    fn(b.v.weight);
  }
  fn(b.attn_out.weight);
  fn(b.mlp_up.weight);
  fn(b.mlp_down.weight);
}

}  // namespace detail

// Builds the frozen emulator E* from the split middle. Layer-drop deep-copies
// the retained blocks; prune/quantize deep-copy all middle blocks and damage
// the weight matrices (biases and norms exempt). The original middle is
// never touched.
template <class S>
std::vector<TransformerBlock<S>> build_emulator(const SplitModel<S>& split,
                                                const EmulatorSpec& spec) {
  spec.validate();
  const int64_t m = static_cast<int64_t>(split.middle.size());
  std::vector<TransformerBlock<S>> out;
  if (spec.method == EmulatorMethod::kLayerDrop ||
      spec.method == EmulatorMethod::kDistilled) {
    OT_CHECK(spec.plan->m == m, PlanError,
             "layer plan built for m=" << spec.plan->m << " but middle has "
                                       << m << " blocks");
    for (int64_t j : spec.plan->retained_indices)
      out.push_back(clone_block(split.middle[static_cast<size_t>(j)]));
  } else {
    for (const auto& b : split.middle) out.push_back(clone_block(b));
    for (auto& b : out) {
      if (spec.method == EmulatorMethod::kMagnitudePrune)
        detail::for_each_weight_matrix(b, [&](Tensor<S>& w) {
          detail::prune_tensor(w, *spec.sparsity);
        });
      else
        detail::for_each_weight_matrix(
            b, [&](Tensor<S>& w) { detail::quantize_tensor(w, *spec.bits); });
    }
  }
  for (auto& b : out) set_block_trainable(b, false);
  return out;
}

// ---------------------------------------------------------------------------
// Adapter extraction and plug-in
// ---------------------------------------------------------------------------

enum class PeftMode { kFull, kLora, kBottleneck, kBitfit };

inline const char* peft_mode_name(PeftMode m) {
  switch (m) {
    case PeftMode::kFull: return "full";
    case PeftMode::kLora: return "lora";
    case PeftMode::kBottleneck: return "bottleneck";
    case PeftMode::kBitfit: return "bitfit";
  }
  return "?";
}

template <class S>
struct AdapterWeights {
  PeftMode mode = PeftMode::kFull;
  int64_t n_bottom = 0;
  int64_t n_top = 0;
  std::vector<TransformerBlock<S>> a1, a2;
  Tensor<S> final_norm_gain, final_norm_bias;
  std::string provenance;
};

// Deep copy of the split's trainable sandwich; the user tunes this copy, so
// the owner's model is never mutated by tuning.
template <class S>
AdapterWeights<S> extract_adapter(const SplitModel<S>& split) {
  AdapterWeights<S> out;
  out.mode = PeftMode::kFull;
  out.n_bottom = split.plan.n_bottom;
  out.n_top = split.plan.n_top;
  for (const auto& b : split.a1) out.a1.push_back(clone_block(b));
  for (const auto& b : split.a2) out.a2.push_back(clone_block(b));
  out.final_norm_gain = split.final_norm_gain.clone();
  out.final_norm_bias = split.final_norm_bias.clone();
  out.provenance = split.provenance;
  return out;
}

namespace detail {

// Copy values of src into dst (shapes must match); dst keeps its own flags.
template <class S>
void assign_tensor(Tensor<S>& dst, const Tensor<S>& src) {
  OT_CHECK(dst.shape() == src.shape(), IntegrationError,
           "tensor shape mismatch " << shape_str(dst.shape()) << " vs "
                                    << shape_str(src.shape()));
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

// Install adapter block weights into a model block. LoRA factors merge into
// the base weight (W + scale*A*B); bottleneck modules ride along as block
// attachments; bias-only and full modes copy values directly.
template <class S>
void install_block(TransformerBlock<S>& dst, const TransformerBlock<S>& src) {
  auto install_linear = [](Linear<S>& d, const Linear<S>& s) {
    assign_tensor(d.weight, s.weight);
    assign_tensor(d.bias, s.bias);
    if (s.lora) {
      // Skip the merge when B never left zero; keeps untouched adapters
      // bit-identical through the round trip.
      bool all_zero = true;
      for (S v : s.lora_b.data())
        if (v != S(0)) all_zero = false;
      if (!all_zero) {
        const int64_t in = s.lora_a.dim(0), r = s.lora_a.dim(1),
                      out_d = s.lora_b.dim(1);
        std::vector<S> delta(static_cast<size_t>(in * out_d), S(0));
        gemm_acc(delta.data(), s.lora_a.data().data(), s.lora_b.data().data(),
                 in, r, out_d);
        auto w = d.weight.data();
        for (int64_t i = 0; i < in * out_d; ++i)
          w[i] += s.lora_scale * delta[static_cast<size_t>(i)];
      }
    }
  };
  assign_tensor(dst.ln1_gain, src.ln1_gain);
  assign_tensor(dst.ln1_bias, src.ln1_bias);
  if (dst.arch == Arch::kGpt2Like) {
    install_linear(dst.qkv, src.qkv);
  } else {
    install_linear(dst.q, src.q);
    install_linear(dst.k, src.k);
    install_linear(dst.v, src.v);
  }
  install_linear(dst.attn_out, src.attn_out);
  assign_tensor(dst.ln2_gain, src.ln2_gain);
  assign_tensor(dst.ln2_bias, src.ln2_bias);
  install_linear(dst.mlp_up, src.mlp_up);
  install_linear(dst.mlp_down, src.mlp_down);
  if (src.adapter_attn)
    dst.adapter_attn = Bottleneck<S>{clone_linear(src.adapter_attn->down),
                                     clone_linear(src.adapter_attn->up)};
  if (src.adapter_mlp)
    dst.adapter_mlp = Bottleneck<S>{clone_linear(src.adapter_mlp->down),
                                    clone_linear(src.adapter_mlp->up)};
}

}  // namespace detail

// Returns M' = the original model with the tuned adapter installed at the
// sandwich positions. The middle is deep-copied from the model, bitwise
// untouched. Provenance must match the model's current weights.
template <class S>
TransformerModel<S> plug_in(const TransformerModel<S>& model,
                            const AdapterWeights<S>& adapter) {
  const std::string model_hash = model_weight_hash(model);
  OT_CHECK(adapter.provenance == model_hash, IntegrationError,
           "adapter was tuned against base " << adapter.provenance.substr(0, 12)
               << "... but this model hashes to " << model_hash.substr(0, 12)
               << "...");
  OT_CHECK(adapter.n_bottom == static_cast<int64_t>(adapter.a1.size()) &&
               adapter.n_top == static_cast<int64_t>(adapter.a2.size()),
           IntegrationError, "adapter segment sizes disagree with its plan");
  const int64_t n = model.config.n_layers;
  OT_CHECK(adapter.n_bottom + adapter.n_top < n, IntegrationError,
           "adapter spans " << adapter.n_bottom << "+" << adapter.n_top
                            << " layers but the model has " << n);
  TransformerModel<S> out = clone_model(model);
  for (int64_t i = 0; i < adapter.n_bottom; ++i)
    detail::install_block(out.blocks[static_cast<size_t>(i)],
                          adapter.a1[static_cast<size_t>(i)]);
  for (int64_t i = 0; i < adapter.n_top; ++i)
    detail::install_block(
        out.blocks[static_cast<size_t>(n - adapter.n_top + i)],
        adapter.a2[static_cast<size_t>(i)]);
  detail::assign_tensor(out.final_norm_gain, adapter.final_norm_gain);
  detail::assign_tensor(out.final_norm_bias, adapter.final_norm_bias);
  return out;
}

}  // namespace ot
