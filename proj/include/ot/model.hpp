#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ot/common.hpp"
#include "ot/optim.hpp"
#include "ot/rng.hpp"
#include "ot/tensor.hpp"

namespace ot {

// Decoder-only pre-norm transformer with learned absolute positions and taps
// on inter-segment hidden states, so a block stack can be driven in pieces
// (bottom segment / middle / top segment) and supervised at the seams.

enum class Arch {
  kGpt2Like,  // fused qkv projection
  kOptLike,   // separate q/k/v/o projections
};

struct ModelConfig {
  int64_t n_layers = 8;
  int64_t d_model = 128;
  int64_t n_heads = 4;
  int64_t d_ff = 512;
  int64_t vocab_size = 256;
  int64_t max_seq_len = 256;
  bool tie_embeddings = true;
  Arch arch = Arch::kGpt2Like;

  void validate() const {
    OT_CHECK(n_layers > 0 && d_model > 0 && n_heads > 0 && d_ff > 0 &&
                 vocab_size > 0 && max_seq_len > 0,
             SpecError, "all config dimensions must be positive");
    OT_CHECK(d_model % n_heads == 0, SpecError,
             "d_model " << d_model << " not divisible by n_heads " << n_heads);
  }
};

// Named presets. The two large ones exist for accounting; only the toy config
// is ever instantiated with real weights in tests and experiments.
inline ModelConfig preset_config(const std::string& name) {
  if (name == "nano")  // smoke-test scale: seconds per training run
    return {6, 32, 2, 64, 256, 64, true, Arch::kGpt2Like};
  if (name == "toy")
    return {8, 128, 4, 512, 256, 256, true, Arch::kGpt2Like};
  if (name == "gpt2-xl")
    return {48, 1600, 25, 6400, 50257, 1024, true, Arch::kGpt2Like};
  if (name == "opt-1.3b")
    return {24, 2048, 32, 8192, 50272, 2048, true, Arch::kOptLike};
  OT_THROW(SpecError, "unknown model preset '" << name
                      << "' (expected nano, toy, gpt2-xl, or opt-1.3b)");
}

constexpr double kLayerNormEps = 1e-5;

template <class S>
struct Linear {
  Tensor<S> weight;  // [in, out]
  Tensor<S> bias;    // [out]
  // Low-rank residual, present only after attachment: W + scale * (A B).
  bool lora = false;
  Tensor<S> lora_a;  // [in, r]
  Tensor<S> lora_b;  // [r, out], zero-initialized
  S lora_scale = S(0);
};

// Residual bottleneck module: h + up(gelu(down(h))).
template <class S>
struct Bottleneck {
  Linear<S> down;  // [d, bottleneck]
  Linear<S> up;    // [bottleneck, d], zero-initialized
};

template <class S>
struct TransformerBlock {
  Arch arch = Arch::kGpt2Like;
  int64_t n_heads = 0;
  Tensor<S> ln1_gain, ln1_bias;
  Linear<S> qkv;            // gpt2-like: [d, 3d]
  Linear<S> q, k, v;        // opt-like: [d, d] each
  Linear<S> attn_out;       // [d, d]
  Tensor<S> ln2_gain, ln2_bias;
  Linear<S> mlp_up;         // [d, d_ff]
  Linear<S> mlp_down;       // [d_ff, d]
  // Bottleneck pair, present only after attachment.
  std::optional<Bottleneck<S>> adapter_attn, adapter_mlp;
};

template <class S>
struct TransformerModel {
  ModelConfig config;
  Tensor<S> tok_embed;  // [V, d]; also the tied LM head
  Tensor<S> pos_embed;  // [max_seq_len, d]
  std::vector<TransformerBlock<S>> blocks;
  Tensor<S> final_norm_gain, final_norm_bias;
  Tensor<S> lm_head;  // [V, d], only when untied
};

// ---------------------------------------------------------------------------
// Parameter schema: the single enumeration of names and shapes, shared by
// model construction, traversal, serialization, and accounting.
// ---------------------------------------------------------------------------

using NamedShapes = std::vector<std::pair<std::string, Shape>>;

inline void block_schema(const ModelConfig& c, const std::string& prefix,
                         NamedShapes& out) {
  const int64_t d = c.d_model, f = c.d_ff;
  out.emplace_back(prefix + ".ln1.gain", Shape{d});
  out.emplace_back(prefix + ".ln1.bias", Shape{d});
  if (c.arch == Arch::kGpt2Like) {
    out.emplace_back(prefix + ".attn.qkv.weight", Shape{d, 3 * d});
    out.emplace_back(prefix + ".attn.qkv.bias", Shape{3 * d});
  } else {
    for (const char* p : {"q", "k", "v"}) {
      out.emplace_back(prefix + ".attn." + p + ".weight", Shape{d, d});
      out.emplace_back(prefix + ".attn." + p + ".bias", Shape{d});
    }
  }
  out.emplace_back(prefix + ".attn.out.weight", Shape{d, d});
  out.emplace_back(prefix + ".attn.out.bias", Shape{d});
  out.emplace_back(prefix + ".ln2.gain", Shape{d});
  out.emplace_back(prefix + ".ln2.bias", Shape{d});
  out.emplace_back(prefix + ".mlp.up.weight", Shape{d, f});
  out.emplace_back(prefix + ".mlp.up.bias", Shape{f});
  out.emplace_back(prefix + ".mlp.down.weight", Shape{f, d});
  out.emplace_back(prefix + ".mlp.down.bias", Shape{d});
}

inline NamedShapes parameter_schema(const ModelConfig& c) {
  c.validate();
  NamedShapes out;
  out.emplace_back("tok_embed", Shape{c.vocab_size, c.d_model});
  out.emplace_back("pos_embed", Shape{c.max_seq_len, c.d_model});
  for (int64_t i = 0; i < c.n_layers; ++i)
    block_schema(c, "blocks." + std::to_string(i), out);
  out.emplace_back("final_norm.gain", Shape{c.d_model});
  out.emplace_back("final_norm.bias", Shape{c.d_model});
  if (!c.tie_embeddings)
    out.emplace_back("lm_head.weight", Shape{c.vocab_size, c.d_model});
  return out;
}

// ---------------------------------------------------------------------------
// Named traversal over a live model (handles share storage with the model).
// Visits base parameters in schema order; PEFT tensors, when attached, follow
// their host projection / block.
// ---------------------------------------------------------------------------

template <class S>
using NamedParams = std::vector<std::pair<std::string, Tensor<S>>>;

template <class S>
void linear_params(const Linear<S>& lin, const std::string& prefix,
                   NamedParams<S>& out) {
  out.emplace_back(prefix + ".weight", lin.weight);
  out.emplace_back(prefix + ".bias", lin.bias);
  if (lin.lora) {
    out.emplace_back(prefix + ".lora_a", lin.lora_a);
    out.emplace_back(prefix + ".lora_b", lin.lora_b);
  }
}

template <class S>
void block_params(const TransformerBlock<S>& b, const std::string& prefix,
                  NamedParams<S>& out) {
  out.emplace_back(prefix + ".ln1.gain", b.ln1_gain);
  out.emplace_back(prefix + ".ln1.bias", b.ln1_bias);
  if (b.arch == Arch::kGpt2Like) {
    linear_params(b.qkv, prefix + ".attn.qkv", out);
  } else {
    linear_params(b.q, prefix + ".attn.q", out);
    linear_params(b.k, prefix + ".attn.k", out);
    linear_params(b.v, prefix + ".attn.v", out);
  }
  linear_params(b.attn_out, prefix + ".attn.out", out);
  out.emplace_back(prefix + ".ln2.gain", b.ln2_gain);
  out.emplace_back(prefix + ".ln2.bias", b.ln2_bias);
  linear_params(b.mlp_up, prefix + ".mlp.up", out);
  linear_params(b.mlp_down, prefix + ".mlp.down", out);
  if (b.adapter_attn) {
    linear_params(b.adapter_attn->down, prefix + ".adapter_attn.down", out);
    linear_params(b.adapter_attn->up, prefix + ".adapter_attn.up", out);
  }
  if (b.adapter_mlp) {
    linear_params(b.adapter_mlp->down, prefix + ".adapter_mlp.down", out);
    linear_params(b.adapter_mlp->up, prefix + ".adapter_mlp.up", out);
  }
}

template <class S>
NamedParams<S> named_params(const TransformerModel<S>& m) {
  NamedParams<S> out;
  out.emplace_back("tok_embed", m.tok_embed);
  out.emplace_back("pos_embed", m.pos_embed);
  for (size_t i = 0; i < m.blocks.size(); ++i)
    block_params(m.blocks[i], "blocks." + std::to_string(i), out);
  out.emplace_back("final_norm.gain", m.final_norm_gain);
  out.emplace_back("final_norm.bias", m.final_norm_bias);
  if (!m.config.tie_embeddings) out.emplace_back("lm_head.weight", m.lm_head);
  return out;
}

template <class S>
NamedParams<S> trainable_params(const NamedParams<S>& all) {
  NamedParams<S> out;
  for (const auto& [name, t] : all)
    if (t.requires_grad()) out.emplace_back(name, t);
  return out;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// Scheme: projections N(0, 0.02); residual-exit projections (attn.out,
// mlp.down) N(0, 0.02/sqrt(2*n_layers)); token embedding N(0, 0.02);
// position embedding N(0, 0.01); biases zero; norm gains one. Weights are
// drawn in schema order from one generator, so a seed pins every value.
// Embedding tables are frozen from the start: they are never trainable
// anywhere in this artifact (see accounting conventions).
template <class S>
TransformerModel<S> init_model(const ModelConfig& c, uint64_t seed) {
  c.validate();
  Rng rng(seed);
  const double base_std = 0.02;
  const double resid_std = base_std / std::sqrt(2.0 * static_cast<double>(c.n_layers));

  auto make = [&](const Shape& shape, double std_dev,
                  bool requires_grad) -> Tensor<S> {
    auto t = Tensor<S>::zeros(shape, requires_grad);
    if (std_dev > 0) rng.fill_normal(t.data(), 0.0, std_dev);
    return t;
  };
  auto ones = [&](int64_t d) {
    return Tensor<S>::filled({d}, S(1), true);
  };
  auto zeros = [&](int64_t d) {
    return Tensor<S>::zeros({d}, true);
  };
  auto linear = [&](int64_t in, int64_t out, double std_dev) {
    Linear<S> lin;
    lin.weight = make({in, out}, std_dev, true);
    lin.bias = zeros(out);
    return lin;
  };

  TransformerModel<S> m;
  m.config = c;
  m.tok_embed = make({c.vocab_size, c.d_model}, base_std, false);
  m.pos_embed = make({c.max_seq_len, c.d_model}, 0.01, false);
  for (int64_t i = 0; i < c.n_layers; ++i) {
    TransformerBlock<S> b;
    b.arch = c.arch;
    b.n_heads = c.n_heads;
    b.ln1_gain = ones(c.d_model);
    b.ln1_bias = zeros(c.d_model);
    if (c.arch == Arch::kGpt2Like) {
      b.qkv = linear(c.d_model, 3 * c.d_model, base_std);
    } else {
      b.q = linear(c.d_model, c.d_model, base_std);
      b.k = linear(c.d_model, c.d_model, base_std);
      b.v = linear(c.d_model, c.d_model, base_std);
    }
    b.attn_out = linear(c.d_model, c.d_model, resid_std);
    b.ln2_gain = ones(c.d_model);
    b.ln2_bias = zeros(c.d_model);
    b.mlp_up = linear(c.d_model, c.d_ff, base_std);
    b.mlp_down = linear(c.d_ff, c.d_model, resid_std);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm_gain = ones(c.d_model);
  m.final_norm_bias = zeros(c.d_model);
  if (!c.tie_embeddings)
    m.lm_head = make({c.vocab_size, c.d_model}, base_std, true);
  return m;
}

// Deep copy: fresh storage for every tensor, trainable flags preserved.
template <class S>
Linear<S> clone_linear(const Linear<S>& lin) {
  Linear<S> out;
  out.weight = lin.weight.clone();
  out.bias = lin.bias.clone();
  out.lora = lin.lora;
  if (lin.lora) {
    out.lora_a = lin.lora_a.clone();
    out.lora_b = lin.lora_b.clone();
    out.lora_scale = lin.lora_scale;
  }
  return out;
}

template <class S>
TransformerBlock<S> clone_block(const TransformerBlock<S>& b) {
  TransformerBlock<S> out;
  out.arch = b.arch;
  out.n_heads = b.n_heads;
  out.ln1_gain = b.ln1_gain.clone();
  out.ln1_bias = b.ln1_bias.clone();
  if (b.arch == Arch::kGpt2Like) {
    out.qkv = clone_linear(b.qkv);
  } else {
    out.q = clone_linear(b.q);
    out.k = clone_linear(b.k);
    out.v = clone_linear(b.v);
  }
  out.attn_out = clone_linear(b.attn_out);
  out.ln2_gain = b.ln2_gain.clone();
  out.ln2_bias = b.ln2_bias.clone();
  out.mlp_up = clone_linear(b.mlp_up);
  out.mlp_down = clone_linear(b.mlp_down);
  if (b.adapter_attn)
    out.adapter_attn = Bottleneck<S>{clone_linear(b.adapter_attn->down),
                                     clone_linear(b.adapter_attn->up)};
  if (b.adapter_mlp)
    out.adapter_mlp = Bottleneck<S>{clone_linear(b.adapter_mlp->down),
                                    clone_linear(b.adapter_mlp->up)};
  return out;
}

template <class S>
TransformerModel<S> clone_model(const TransformerModel<S>& m) {
  TransformerModel<S> out;
  out.config = m.config;
  out.tok_embed = m.tok_embed.clone();
  out.pos_embed = m.pos_embed.clone();
  out.blocks.reserve(m.blocks.size());
  for (const auto& b : m.blocks) out.blocks.push_back(clone_block(b));
  out.final_norm_gain = m.final_norm_gain.clone();
  out.final_norm_bias = m.final_norm_bias.clone();
  if (!m.config.tie_embeddings) out.lm_head = m.lm_head.clone();
  return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> apply_linear(const Linear<S>& lin, const Tensor<S>& x) {
  const int64_t in = lin.weight.dim(0);
  OT_CHECK(x.shape().back() == in, DimensionError,
           "linear: input " << shape_str(x.shape()) << " vs weight "
                            << shape_str(lin.weight.shape()));
  const int64_t rows = x.numel() / in;
  auto x2 = reshape(x, {rows, in});
  auto y = matmul(x2, lin.weight);
  if (lin.lora)
    y = add(y, scale(matmul(matmul(x2, lin.lora_a), lin.lora_b),
                     lin.lora_scale));
  y = add_bias(y, lin.bias);
  Shape out_shape = x.shape();
  out_shape.back() = lin.weight.dim(1);
  return reshape(y, out_shape);
}

template <class S>
Tensor<S> apply_bottleneck(const Bottleneck<S>& a, const Tensor<S>& h) {
  return add(h, apply_linear(a.up, gelu(apply_linear(a.down, h))));
}

// One pre-norm block over h: [B, S, d] -> [B, S, d].
template <class S>
Tensor<S> block_forward(const TransformerBlock<S>& b, const Tensor<S>& h) {
  OT_CHECK(h.rank() == 3, DimensionError,
           "block: expected [B,S,d], got " << shape_str(h.shape()));
  const int64_t bs = h.dim(0), sq = h.dim(1), d = h.dim(2);
  const int64_t hd = d / b.n_heads;
  OT_CHECK(b.n_heads > 0 && d % b.n_heads == 0, DimensionError,
           "block: d " << d << " not divisible by heads " << b.n_heads);

  auto xn = layer_norm(h, b.ln1_gain, b.ln1_bias, static_cast<S>(kLayerNormEps));
  Tensor<S> q, k, v;
  if (b.arch == Arch::kGpt2Like) {
    auto qkv = apply_linear(b.qkv, xn);
    q = slice_cols(qkv, 0, d);
    k = slice_cols(qkv, d, d);
    v = slice_cols(qkv, 2 * d, d);
  } else {
    q = apply_linear(b.q, xn);
    k = apply_linear(b.k, xn);
    v = apply_linear(b.v, xn);
  }
  auto heads = [&](const Tensor<S>& t) {
    return permute(reshape(t, {bs, sq, b.n_heads, hd}), {0, 2, 1, 3});
  };
  auto att = causal_softmax(
      scale(bmm_nt(heads(q), heads(k)),
            static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)))));
  auto ctx = reshape(permute(bmm(att, heads(v)), {0, 2, 1, 3}), {bs, sq, d});
  auto h1 = add(h, apply_linear(b.attn_out, ctx));
  if (b.adapter_attn) h1 = apply_bottleneck(*b.adapter_attn, h1);

  auto h2n = layer_norm(h1, b.ln2_gain, b.ln2_bias,
                        static_cast<S>(kLayerNormEps));
  auto h2 = add(h1, apply_linear(b.mlp_down, gelu(apply_linear(b.mlp_up, h2n))));
  if (b.adapter_mlp) h2 = apply_bottleneck(*b.adapter_mlp, h2);
  return h2;
}

template <class S>
Tensor<S> run_blocks(std::span<const TransformerBlock<S>> blocks,
                     Tensor<S> h) {
  for (const auto& b : blocks) {
    OT_CHECK(h.dim(2) == b.ln1_gain.dim(0), ContractError,
             "segment width " << b.ln1_gain.dim(0)
                              << " disagrees with hidden width " << h.dim(2));
    h = block_forward(b, h);
  }
  return h;
}

// Token + position embeddings: ids (row-major [batch, seq]) -> [B, S, d].
template <class S>
Tensor<S> embed_inputs(const TransformerModel<S>& m,
                       const std::vector<int32_t>& ids, int64_t batch,
                       int64_t seq) {
  OT_CHECK(batch > 0 && seq > 0 &&
               static_cast<int64_t>(ids.size()) == batch * seq,
           DimensionError,
           "embed: ids size " << ids.size() << " != " << batch << "x" << seq);
  OT_CHECK(seq <= m.config.max_seq_len, ContractError,
           "sequence length " << seq << " exceeds max " << m.config.max_seq_len);
  std::vector<int32_t> pos(static_cast<size_t>(batch * seq));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < seq; ++t)
      pos[static_cast<size_t>(b * seq + t)] = static_cast<int32_t>(t);
  auto tok = embedding(m.tok_embed, ids);
  auto pe = embedding(m.pos_embed, pos);
  return reshape(add(tok, pe), {batch, seq, m.config.d_model});
}

// Final norm + LM head: [B, S, d] -> [B, S, V].
template <class S>
Tensor<S> head_logits(const TransformerModel<S>& m, const Tensor<S>& h) {
  auto hn = layer_norm(h, m.final_norm_gain, m.final_norm_bias,
                       static_cast<S>(kLayerNormEps));
  const int64_t bs = hn.dim(0), sq = hn.dim(1), d = hn.dim(2);
  auto flat = reshape(hn, {bs * sq, d});
  const Tensor<S>& head = m.config.tie_embeddings ? m.tok_embed : m.lm_head;
  return reshape(matmul_nt(flat, head), {bs, sq, m.config.vocab_size});
}

template <class S>
struct SegmentedForward {
  Tensor<S> hidden_after_a1;      // the tap consumed by distillation
  Tensor<S> hidden_after_middle;
  Tensor<S> logits;
};

// Drives embeddings -> a1 -> middle -> a2 -> head. The middle span may come
// from a different stack than the model (an emulator); widths are validated.
template <class S>
SegmentedForward<S> forward_segmented(const TransformerModel<S>& m,
                                      std::span<const TransformerBlock<S>> a1,
                                      std::span<const TransformerBlock<S>> middle,
                                      std::span<const TransformerBlock<S>> a2,
                                      const std::vector<int32_t>& ids,
                                      int64_t batch, int64_t seq) {
  SegmentedForward<S> out;
  auto h = run_blocks(a1, embed_inputs(m, ids, batch, seq));
  out.hidden_after_a1 = h;
  h = run_blocks(middle, h);
  out.hidden_after_middle = h;
  h = run_blocks(a2, h);
  out.logits = head_logits(m, h);
  return out;
}

template <class S>
Tensor<S> forward_full(const TransformerModel<S>& m,
                       const std::vector<int32_t>& ids, int64_t batch,
                       int64_t seq) {
  std::span<const TransformerBlock<S>> all(m.blocks.data(), m.blocks.size());
  return head_logits(m, run_blocks(all, embed_inputs(m, ids, batch, seq)));
}

// Mean next-token cross entropy of logits [B, S, V] against targets [B*S].
template <class S>
Tensor<S> lm_loss(const Tensor<S>& logits, const std::vector<int32_t>& targets) {
  OT_CHECK(logits.rank() == 3, DimensionError,
           "lm_loss: expected [B,S,V] logits, got " << shape_str(logits.shape()));
  const int64_t rows = logits.dim(0) * logits.dim(1);
  return softmax_cross_entropy(reshape(logits, {rows, logits.dim(2)}), targets);
}

}  // namespace ot
