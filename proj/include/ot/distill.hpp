#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "ot/common.hpp"
#include "ot/data.hpp"
#include "ot/model.hpp"
#include "ot/optim.hpp"
#include "ot/surgery.hpp"
#include "ot/tensor.hpp"

namespace ot {

// Hidden-state distillation: the layer-dropped emulator learns to mimic the
// frozen middle segment on hidden representations produced by the frozen
// bottom segment. Loss is the mean over samples of the squared L2 distance
// between student and teacher outputs.

// L = (1/N) * sum_i ||e_star_i - e_i||^2, N = leading dimension; the norm
// runs over all remaining dimensions. Differentiable through e_star_out.
template <class S>
Tensor<S> distill_loss(const Tensor<S>& e_star_out, const Tensor<S>& e_out) {
  OT_CHECK(e_star_out.shape() == e_out.shape(), ContractError,
           "distill loss shapes differ: " << shape_str(e_star_out.shape())
                                          << " vs "
                                          << shape_str(e_out.shape()));
  OT_CHECK(!e_star_out.shape().empty() && e_star_out.dim(0) > 0, ContractError,
           "distill loss needs a non-empty leading sample dimension");
  auto diff = sub(e_star_out, e_out);
  auto total = sum(mul(diff, diff));
  return scale(total, S(1) / static_cast<S>(e_star_out.dim(0)));
}

struct DistillOptions {
  int64_t steps = 200;
  int64_t batch_size = 4;
  int64_t seq_len = 256;
  uint64_t seed = 0;
  LrSchedule schedule{1e-3, 1e-4, 200, 20};
  std::string log_path;  // optional CSV of (step, loss)
};

// One loss value per optimizer step.
using DistillLog = std::vector<double>;

namespace detail {

inline void write_loss_csv(const std::string& path, const DistillLog& log) {
  if (path.empty()) return;
  std::FILE* f = std::fopen(path.c_str(), "w");
  OT_CHECK(f != nullptr, ContractError, "cannot open loss log " << path);
  std::fprintf(f, "step,loss\n");
  for (size_t i = 0; i < log.size(); ++i)
    std::fprintf(f, "%zu,%.17g\n", i, log[i]);
  std::fclose(f);
}

}  // namespace detail

// Trains the emulator blocks in place against the frozen middle. The bottom
// segment supplies inputs and stays frozen; nothing outside the emulator is
// updated. Returns the per-step loss curve.
template <class S>
DistillLog distill_emulator(SplitModel<S>& sm,
                            std::vector<TransformerBlock<S>>& emulator,
                            const Corpus& corpus, const DistillOptions& opt) {
  OT_CHECK(opt.steps >= 0, ContractError, "negative distillation budget");
  DistillLog log;
  if (opt.steps == 0) {
    detail::write_loss_csv(opt.log_path, log);
    return log;
  }
  opt.schedule.validate();
  OT_CHECK(opt.schedule.total_steps == opt.steps, ContractError,
           "schedule covers " << opt.schedule.total_steps << " steps, run has "
                              << opt.steps);

  // The sandwich supplies inputs but never trains here; the student does.
  for (auto& b : sm.a1) set_block_trainable(b, false);
  for (auto& b : emulator) set_block_trainable(b, true);

  NamedParams<S> student;
  for (size_t j = 0; j < emulator.size(); ++j)
    block_params(emulator[j], "emulator." + std::to_string(j), student);
  AdamW<S> optim(trainable_params(student), AdamWOptions{});

  auto shell = shell_model(sm.config, sm.tok_embed, sm.pos_embed,
                           sm.final_norm_gain, sm.final_norm_bias, sm.lm_head);
  std::span<const TransformerBlock<S>> emu_span(emulator.data(),
                                                emulator.size());

  BatchPlan plan;
  plan.seq_len = opt.seq_len;
  plan.batch_size = opt.batch_size;
  plan.seed = opt.seed;
  plan.epoch = 0;
  auto train = train_tokens(corpus);
  std::vector<Batch> batches = make_batches(train, plan);
  size_t cursor = 0;

  for (int64_t step = 0; step < opt.steps; ++step) {
    if (cursor == batches.size()) {
      ++plan.epoch;
      batches = make_batches(train, plan);
      cursor = 0;
    }
    const Batch& b = batches[cursor++];

    // x_i from the frozen bottom segment; no gradient lineage enters here.
    auto x = run_blocks(sm.a1_span(),
                        embed_inputs(shell, b.inputs, b.batch, b.seq));
    auto teacher = run_blocks(sm.middle_span(), x);
    auto student_out = run_blocks(emu_span, x);
    auto loss = distill_loss(student_out, teacher);

    const double loss_val = static_cast<double>(loss.data()[0]);
    OT_CHECK(std::isfinite(loss_val), NumericError,
             "non-finite distillation loss at step " << step);
    log.push_back(loss_val);

    optim.zero_grad();
    backward(loss);
    optim.step(static_cast<S>(cosine_lr(opt.schedule, step)));
  }

  // The emulator ships frozen; the sandwich goes back to trainable.
  for (auto& b : emulator) set_block_trainable(b, false);
  for (auto& b : sm.a1) set_block_trainable(b, true);

  detail::write_loss_csv(opt.log_path, log);
  return log;
}

}  // namespace ot
