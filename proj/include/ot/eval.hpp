#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ot/common.hpp"
#include "ot/model.hpp"
#include "ot/tensor.hpp"

namespace ot {

// Causal-LM evaluation over sequential non-overlapping windows: perplexity is
// exp of the token-mean negative log-likelihood. Windows are carved exactly
// like training batches (floor((n-1)/seq_len) full windows, tail dropped) but
// scanned in corpus order.

template <class S>
using LogitsFn =
    std::function<Tensor<S>(const std::vector<int32_t>&, int64_t, int64_t)>;

template <class S>
double corpus_mean_nll(const LogitsFn<S>& logits_fn,
                       std::span<const int32_t> tokens, int64_t seq_len,
                       int64_t batch_size) {
  OT_CHECK(seq_len > 0 && batch_size > 0, ContractError,
           "evaluation needs positive window and batch sizes");
  const int64_t n = static_cast<int64_t>(tokens.size());
  const int64_t n_windows = (n - 1) / seq_len;
  OT_CHECK(n_windows > 0, ContractError,
           "token stream of " << n << " is too small for windows of "
                              << seq_len);
  double total_nll = 0.0;
  int64_t total_count = 0;
  for (int64_t w0 = 0; w0 < n_windows; w0 += batch_size) {
    const int64_t b = std::min(batch_size, n_windows - w0);
    std::vector<int32_t> inputs(static_cast<size_t>(b * seq_len));
    std::vector<int32_t> targets(static_cast<size_t>(b * seq_len));
    for (int64_t r = 0; r < b; ++r) {
      const int64_t start = (w0 + r) * seq_len;
      for (int64_t t = 0; t < seq_len; ++t) {
        inputs[static_cast<size_t>(r * seq_len + t)] = tokens[start + t];
        targets[static_cast<size_t>(r * seq_len + t)] = tokens[start + t + 1];
      }
    }
    auto logits = logits_fn(inputs, b, seq_len);
    // NLL accumulates in 64-bit straight off the logits, so the measurement
    // carries no single-precision reduction noise of its own.
    const int64_t v = logits.shape().back();
    OT_CHECK(logits.numel() == b * seq_len * v, ContractError,
             "logits shape " << shape_str(logits.shape())
                             << " does not cover the batch");
    auto lv = logits.data();
    for (int64_t row = 0; row < b * seq_len; ++row) {
      const S* x = lv.data() + row * v;
      double max_x = static_cast<double>(x[0]);
      for (int64_t j = 1; j < v; ++j)
        max_x = std::max(max_x, static_cast<double>(x[j]));
      double sum_exp = 0.0;
      for (int64_t j = 0; j < v; ++j)
        sum_exp += std::exp(static_cast<double>(x[j]) - max_x);
      const int32_t tgt = targets[static_cast<size_t>(row)];
      OT_CHECK(tgt >= 0 && tgt < v, ContractError,
               "target id " << tgt << " outside vocabulary " << v);
      const double nll = std::log(sum_exp) + max_x - static_cast<double>(x[tgt]);
      OT_CHECK(std::isfinite(nll), NumericError,
               "non-finite evaluation loss at window " << w0);
      total_nll += nll;
    }
    total_count += b * seq_len;
  }
  return total_nll / static_cast<double>(total_count);
}

template <class S>
double perplexity(const LogitsFn<S>& logits_fn, std::span<const int32_t> tokens,
                  int64_t seq_len, int64_t batch_size) {
  return std::exp(corpus_mean_nll(logits_fn, tokens, seq_len, batch_size));
}

// Convenience wrapper for a whole model.
template <class S>
double perplexity_full(const TransformerModel<S>& m,
                       std::span<const int32_t> tokens, int64_t seq_len,
                       int64_t batch_size) {
  LogitsFn<S> fn = [&m](const std::vector<int32_t>& ids, int64_t b,
                        int64_t s) { return forward_full(m, ids, b, s); };
  return perplexity(fn, tokens, seq_len, batch_size);
}

// The four headline measurements for one pipeline run. A failed sub-run
// leaves a partial record: completed metrics stay, `failure` names the stage
// and cause, and validate() must not be consulted.
struct MetricsRecord {
  double zero_shot_ppl = 0.0;
  double emulator_ppl = 0.0;
  double plug_in_ppl = 0.0;
  double full_ft_ppl = 0.0;
  std::string config_fingerprint;
  uint64_t seed = 0;
  std::string failure;  // empty on success

  void validate() const {
    for (double p :
         {zero_shot_ppl, emulator_ppl, plug_in_ppl, full_ft_ppl}) {
      OT_CHECK(std::isfinite(p) && p >= 1.0, NumericError,
               "perplexity " << p << " outside [1, inf)");
    }
  }
};

}  // namespace ot
