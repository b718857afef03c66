#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "ot/common.hpp"
#include "ot/data.hpp"
#include "ot/eval.hpp"
#include "ot/model.hpp"
#include "ot/optim.hpp"
#include "ot/rng.hpp"
#include "ot/surgery.hpp"

namespace ot {

// Offsite fine-tuning: the user updates the adapter sandwich against a frozen
// middle stand-in (the emulator), optionally restricting the trainable set to
// a parameter-efficient subset (low-rank factors, bottleneck modules, or bias
// vectors).

struct LoraSpec {
  int64_t rank = 4;
  double alpha = 4.0;  // scale = alpha / rank

  void validate() const {
    OT_CHECK(rank >= 1, ContractError, "low-rank factors need rank >= 1");
    OT_CHECK(alpha > 0.0, ContractError, "scale numerator must be positive");
  }
};

struct BottleneckSpec {
  int64_t dim = 64;

  void validate() const {
    OT_CHECK(dim >= 1, ContractError, "bottleneck width must be positive");
  }
};

inline constexpr std::array<double, 5> kDefaultLrGrid = {2e-5, 5e-5, 1e-4,
                                                         2e-4, 3e-4};

// ---------------------------------------------------------------------------
// PEFT attachment
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void attach_lora_linear(Linear<S>& lin, const LoraSpec& spec, Rng& rng) {
  const int64_t in = lin.weight.dim(0), out = lin.weight.dim(1);
  lin.lora = true;
  lin.lora_a = Tensor<S>::zeros({in, spec.rank});
  rng.fill_normal(lin.lora_a.data(), 0.0, 0.02);
  lin.lora_b = Tensor<S>::zeros({spec.rank, out});
  lin.lora_scale = static_cast<S>(spec.alpha / static_cast<double>(spec.rank));
  lin.lora_a.set_requires_grad(true);
  lin.lora_b.set_requires_grad(true);
}

template <class S>
void for_each_linear(TransformerBlock<S>& b, auto&& fn) {
  if (b.arch == Arch::kGpt2Like) {
    fn(b.qkv);
  } else {
    fn(b.q);
    fn(b.k);
    fn(b.v);
  }
  fn(b.attn_out);
  fn(b.mlp_up);
  fn(b.mlp_down);
}

template <class S>
Bottleneck<S> make_bottleneck(int64_t d, int64_t dim, Rng& rng) {
  Bottleneck<S> m;
  m.down.weight = Tensor<S>::zeros({d, dim});
  rng.fill_normal(m.down.weight.data(), 0.0, 0.02);
  m.down.bias = Tensor<S>::zeros({dim});
  // Zero up-projection: the module is the identity until trained.
  m.up.weight = Tensor<S>::zeros({dim, d});
  m.up.bias = Tensor<S>::zeros({d});
  m.down.weight.set_requires_grad(true);
  m.down.bias.set_requires_grad(true);
  m.up.weight.set_requires_grad(true);
  m.up.bias.set_requires_grad(true);
  return m;
}

}  // namespace detail

// Low-rank factors on every linear projection in the sandwich; base weights
// freeze, only the factors train. B starts at zero, so the forward pass is
// bitwise unchanged at attach time.
template <class S>
void attach_lora(AdapterWeights<S>& adapter, const LoraSpec& spec,
                 uint64_t seed) {
  spec.validate();
  OT_CHECK(adapter.mode == PeftMode::kFull, ContractError,
           "adapter already carries mode " << peft_mode_name(adapter.mode));
  Rng rng(seed);
  for (auto* seg : {&adapter.a1, &adapter.a2})
    for (auto& b : *seg) {
      set_block_trainable(b, false);
      detail::for_each_linear(b, [&](Linear<S>& lin) {
        detail::attach_lora_linear(lin, spec, rng);
      });
    }
  adapter.final_norm_gain.set_requires_grad(false);
  adapter.final_norm_bias.set_requires_grad(false);
  adapter.mode = PeftMode::kLora;
}

// Two residual bottleneck modules per sandwich block (after attention, after
// MLP); zero-initialized up-projection keeps the forward pass bitwise
// unchanged at attach time.
template <class S>
void attach_bottleneck(AdapterWeights<S>& adapter, const BottleneckSpec& spec,
                       uint64_t seed) {
  spec.validate();
  OT_CHECK(adapter.mode == PeftMode::kFull, ContractError,
           "adapter already carries mode " << peft_mode_name(adapter.mode));
  Rng rng(seed);
  for (auto* seg : {&adapter.a1, &adapter.a2})
    for (auto& b : *seg) {
      OT_CHECK(!b.adapter_attn && !b.adapter_mlp, ContractError,
               "bottleneck modules already attached");
      set_block_trainable(b, false);
      const int64_t d = b.attn_out.weight.dim(0);
      b.adapter_attn = detail::make_bottleneck<S>(d, spec.dim, rng);
      b.adapter_mlp = detail::make_bottleneck<S>(d, spec.dim, rng);
    }
  adapter.final_norm_gain.set_requires_grad(false);
  adapter.final_norm_bias.set_requires_grad(false);
  adapter.mode = PeftMode::kBottleneck;
}

// Bias-only tuning: exactly the bias vectors of the sandwich train (linear
// biases and norm biases; norm gains stay frozen).
template <class S>
void attach_bitfit(AdapterWeights<S>& adapter) {
  OT_CHECK(adapter.mode == PeftMode::kFull, ContractError,
           "adapter already carries mode " << peft_mode_name(adapter.mode));
  for (auto* seg : {&adapter.a1, &adapter.a2})
    for (auto& b : *seg) {
      set_block_trainable(b, false);
      detail::for_each_linear(
          b, [&](Linear<S>& lin) { lin.bias.set_requires_grad(true); });
      b.ln1_bias.set_requires_grad(true);
      b.ln2_bias.set_requires_grad(true);
    }
  adapter.final_norm_gain.set_requires_grad(false);
  adapter.final_norm_bias.set_requires_grad(adapter.n_top > 0);
  adapter.mode = PeftMode::kBitfit;
}

// ---------------------------------------------------------------------------
// The user-side stack: adapter + frozen middle stand-in + frozen embeddings
// ---------------------------------------------------------------------------

template <class S>
struct TuningStack {
  ModelConfig config;
  Tensor<S> tok_embed, pos_embed;  // frozen
  Tensor<S> lm_head;               // untied configs only; frozen
  AdapterWeights<S> adapter;
  std::vector<TransformerBlock<S>> middle;  // E or E*, frozen

  std::span<const TransformerBlock<S>> middle_span() const {
    return {middle.data(), middle.size()};
  }
};

template <class S>
TuningStack<S> make_stack(const SplitModel<S>& sm,
                          std::vector<TransformerBlock<S>> middle,
                          AdapterWeights<S> adapter) {
  TuningStack<S> st;
  st.config = sm.config;
  st.tok_embed = sm.tok_embed;
  st.pos_embed = sm.pos_embed;
  st.lm_head = sm.lm_head;
  st.adapter = std::move(adapter);
  st.middle = std::move(middle);
  return st;
}

template <class S>
AdapterWeights<S> clone_adapter(const AdapterWeights<S>& a) {
  AdapterWeights<S> out;
  out.mode = a.mode;
  out.n_bottom = a.n_bottom;
  out.n_top = a.n_top;
  for (const auto& b : a.a1) out.a1.push_back(clone_block(b));
  for (const auto& b : a.a2) out.a2.push_back(clone_block(b));
  out.final_norm_gain = a.final_norm_gain.clone();
  out.final_norm_bias = a.final_norm_bias.clone();
  out.provenance = a.provenance;
  return out;
}

// Frozen pieces are shared; the adapter is deep-copied so parallel tuning
// runs never interfere.
template <class S>
TuningStack<S> clone_stack(const TuningStack<S>& st) {
  TuningStack<S> out;
  out.config = st.config;
  out.tok_embed = st.tok_embed;
  out.pos_embed = st.pos_embed;
  out.lm_head = st.lm_head;
  out.adapter = clone_adapter(st.adapter);
  out.middle = st.middle;  // shared handles; frozen by contract
  return out;
}

template <class S>
SegmentedForward<S> forward_stack(const TuningStack<S>& st,
                                  const std::vector<int32_t>& ids,
                                  int64_t batch, int64_t seq) {
  auto shell =
      shell_model(st.config, st.tok_embed, st.pos_embed,
                  st.adapter.final_norm_gain, st.adapter.final_norm_bias,
                  st.lm_head);
  return forward_segmented(
      shell,
      std::span<const TransformerBlock<S>>(st.adapter.a1.data(),
                                           st.adapter.a1.size()),
      st.middle_span(),
      std::span<const TransformerBlock<S>>(st.adapter.a2.data(),
                                           st.adapter.a2.size()),
      ids, batch, seq);
}

template <class S>
LogitsFn<S> stack_logits_fn(const TuningStack<S>& st) {
  return [&st](const std::vector<int32_t>& ids, int64_t b, int64_t s) {
    return forward_stack(st, ids, b, s).logits;
  };
}

// Adapter parameters in traversal order, peft tensors included.
template <class S>
NamedParams<S> adapter_named_params(const AdapterWeights<S>& a) {
  NamedParams<S> out;
  for (size_t i = 0; i < a.a1.size(); ++i)
    block_params(a.a1[i], "a1." + std::to_string(i), out);
  for (size_t i = 0; i < a.a2.size(); ++i)
    block_params(a.a2[i], "a2." + std::to_string(i), out);
  out.emplace_back("final_norm.gain", a.final_norm_gain);
  out.emplace_back("final_norm.bias", a.final_norm_bias);
  return out;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct FinetuneOptions {
  int64_t epochs = 3;
  int64_t steps_per_epoch = -1;  // -1: every full batch in the epoch
  int64_t batch_size = 4;
  int64_t seq_len = 256;
  uint64_t seed = 0;
  double lr = 1e-4;
  double lr_min_frac = 0.1;  // cosine floor as a fraction of lr
  int64_t warmup_steps = 20;
  std::string log_path;  // optional CSV: epoch,split,loss,perplexity,lr
};

struct FinetuneResult {
  std::vector<double> train_loss;  // per epoch, mean over steps
  std::vector<double> val_nll;     // per epoch
  double final_val_nll = 0.0;
  int64_t steps = 0;
};

namespace detail {

inline void write_epoch_csv(const std::string& path,
                            const FinetuneResult& res, double lr) {
  if (path.empty()) return;
  std::FILE* f = std::fopen(path.c_str(), "w");
  OT_CHECK(f != nullptr, ContractError, "cannot open training log " << path);
  std::fprintf(f, "epoch,split,loss,perplexity,lr\n");
  for (size_t e = 0; e < res.train_loss.size(); ++e) {
    std::fprintf(f, "%zu,train,%.17g,%.17g,%.17g\n", e, res.train_loss[e],
                 std::exp(res.train_loss[e]), lr);
    std::fprintf(f, "%zu,val,%.17g,%.17g,%.17g\n", e, res.val_nll[e],
                 std::exp(res.val_nll[e]), lr);
  }
  std::fclose(f);
}

// Shared causal-LM training loop: steps the given trainable parameters
// against whatever forward the logits function drives.
template <class S>
FinetuneResult lm_train_loop(const LogitsFn<S>& logits_fn,
                             NamedParams<S> trainable, const Corpus& corpus,
                             const FinetuneOptions& opt) {
  OT_CHECK(opt.epochs >= 0, ContractError, "negative epoch budget");
  FinetuneResult res;
  auto train = train_tokens(corpus);
  auto val = val_tokens(corpus);
  OT_CHECK(!val.empty(), ContractError,
           "corpus has no validation split for epoch evaluation");

  if (opt.epochs == 0) {
    res.final_val_nll =
        corpus_mean_nll(logits_fn, val, opt.seq_len, opt.batch_size);
    write_epoch_csv(opt.log_path, res, opt.lr);
    return res;
  }

  BatchPlan plan;
  plan.seq_len = opt.seq_len;
  plan.batch_size = opt.batch_size;
  plan.seed = opt.seed;
  plan.epoch = 0;
  const int64_t batches_per_epoch =
      static_cast<int64_t>(make_batches(train, plan).size());
  const int64_t steps_per_epoch =
      opt.steps_per_epoch < 0
          ? batches_per_epoch
          : std::min(opt.steps_per_epoch, batches_per_epoch);
  OT_CHECK(steps_per_epoch > 0, ContractError, "epoch with zero steps");

  LrSchedule sched{opt.lr, opt.lr * opt.lr_min_frac,
                   opt.epochs * steps_per_epoch,
                   std::min(opt.warmup_steps, opt.epochs * steps_per_epoch)};
  sched.validate();

  AdamW<S> optim(std::move(trainable), AdamWOptions{});
  int64_t global_step = 0;
  for (int64_t e = 0; e < opt.epochs; ++e) {
    plan.epoch = e;
    auto batches = make_batches(train, plan);
    double epoch_sum = 0.0;
    for (int64_t i = 0; i < steps_per_epoch; ++i) {
      const Batch& b = batches[static_cast<size_t>(i)];
      auto logits = logits_fn(b.inputs, b.batch, b.seq);
      auto loss = lm_loss(logits, b.targets);
      const double loss_val = static_cast<double>(loss.data()[0]);
      OT_CHECK(std::isfinite(loss_val), NumericError,
               "non-finite training loss at step " << global_step);
      epoch_sum += loss_val;
      optim.zero_grad();
      backward(loss);
      optim.step(static_cast<S>(cosine_lr(sched, global_step)));
      ++global_step;
    }
    res.train_loss.push_back(epoch_sum / static_cast<double>(steps_per_epoch));
    res.val_nll.push_back(
        corpus_mean_nll(logits_fn, val, opt.seq_len, opt.batch_size));
  }
  res.steps = global_step;
  res.final_val_nll = res.val_nll.back();
  write_epoch_csv(opt.log_path, res, opt.lr);
  return res;
}

}  // namespace detail

// Tunes the stack's adapter in place against its frozen middle; the middle,
// embeddings, and any frozen adapter tensors are bitwise untouched.
template <class S>
FinetuneResult finetune(TuningStack<S>& st, const Corpus& corpus,
                        const FinetuneOptions& opt) {
  auto trainable = trainable_params(adapter_named_params(st.adapter));
  OT_CHECK(!trainable.empty(), ContractError,
           "stack has no trainable adapter parameters");
  return detail::lm_train_loop(stack_logits_fn(st), std::move(trainable),
                               corpus, opt);
}

// Full fine-tuning baseline: every block and the final norm train
// (embeddings stay frozen, matching the adapter convention).
template <class S>
FinetuneResult train_full(TransformerModel<S>& m, const Corpus& corpus,
                          const FinetuneOptions& opt) {
  LogitsFn<S> fn = [&m](const std::vector<int32_t>& ids, int64_t b,
                        int64_t s) { return forward_full(m, ids, b, s); };
  return detail::lm_train_loop(fn, trainable_params(named_params(m)), corpus,
                               opt);
}

// ---------------------------------------------------------------------------
// Learning-rate grid selection
// ---------------------------------------------------------------------------

struct GridPoint {
  double lr = 0.0;
  double final_val_nll = 0.0;
};

struct GridResult {
  std::vector<GridPoint> points;
  size_t best_index = 0;
};

// Runs the sweep on independent adapter copies and keeps the run with the
// best emulator-side validation loss (users never see plug-in scores). Ties
// resolve to the earliest grid entry. The winning adapter replaces the
// stack's adapter.
template <class S>
GridResult finetune_grid(TuningStack<S>& st, const Corpus& corpus,
                         FinetuneOptions opt, std::span<const double> grid) {
  OT_CHECK(!grid.empty(), ContractError, "empty learning-rate grid");
  GridResult out;
  std::vector<AdapterWeights<S>> tuned;
  for (double lr : grid) {
    TuningStack<S> trial = clone_stack(st);
    opt.lr = lr;
    auto res = finetune(trial, corpus, opt);
    out.points.push_back({lr, res.final_val_nll});
    tuned.push_back(std::move(trial.adapter));
  }
  for (size_t i = 1; i < out.points.size(); ++i)
    if (out.points[i].final_val_nll <
        out.points[out.best_index].final_val_nll)
      out.best_index = i;
  st.adapter = std::move(tuned[out.best_index]);
  return out;
}

}  // namespace ot
