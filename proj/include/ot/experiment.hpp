#pragma once

#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ot/common.hpp"
#include "ot/data.hpp"
#include "ot/distill.hpp"
#include "ot/eval.hpp"
#include "ot/model.hpp"
#include "ot/sha256.hpp"
#include "ot/surgery.hpp"
#include "ot/tuning.hpp"

namespace ot {

// The headline experiment: one pipeline run measures all four quantities —
// the pretrained model's zero-shot perplexity, the tuned adapter's perplexity
// against the emulator, the plug-in perplexity of the returned adapter inside
// the full model, and the full fine-tuning baseline — from identical initial
// weights and identical data order.

struct PipelineOptions {
  SplitPlan plan;         // sandwich geometry
  EmulatorSpec spec;      // compression of the middle
  DistillOptions distill;  // distill.steps == 0 ships the raw emulator
  FinetuneOptions tune;    // downstream budget, shared by adapter and full-FT
  std::vector<double> lr_grid;  // non-empty: sweep, best by emulator val loss
  int64_t eval_seq_len = 256;
  int64_t eval_batch = 4;
  uint64_t seed = 0;  // drives tuning/distillation data order
  std::string model_id = "toy";
};

// Everything that determines the outcome except the seed, digested; two runs
// with equal fingerprints and equal seeds must produce identical records.
inline std::string config_fingerprint(const ModelConfig& c,
                                      const PipelineOptions& opt) {
  std::ostringstream os;
  os << opt.model_id << '|' << c.n_layers << ',' << c.d_model << ','
     << c.n_heads << ',' << c.d_ff << ',' << c.vocab_size << ','
     << c.max_seq_len << ',' << c.tie_embeddings << ','
     << (c.arch == Arch::kGpt2Like ? "gpt2" : "opt") << '|' << opt.plan.n_bottom
     << '+' << opt.plan.n_top << '|' << emulator_method_name(opt.spec.method);
  if (opt.spec.plan) os << ",k=" << opt.spec.plan->k << ",m=" << opt.spec.plan->m;
  if (opt.spec.sparsity) os << ",sparsity=" << *opt.spec.sparsity;
  if (opt.spec.bits) os << ",bits=" << *opt.spec.bits;
  os << "|distill=" << opt.distill.steps << ',' << opt.distill.batch_size << ','
     << opt.distill.seq_len << ',' << opt.distill.schedule.lr_max << ','
     << opt.distill.schedule.lr_min << ','
     << opt.distill.schedule.warmup_steps;
  os << "|tune=" << opt.tune.epochs << ',' << opt.tune.steps_per_epoch << ','
     << opt.tune.batch_size << ',' << opt.tune.seq_len << ',' << opt.tune.lr
     << ',' << opt.tune.lr_min_frac << ',' << opt.tune.warmup_steps;
  os << "|grid=";
  for (double lr : opt.lr_grid) os << lr << ';';
  os << "|eval=" << opt.eval_seq_len << ',' << opt.eval_batch;
  return sha256_hex(os.str());
}

// Builds the pretrained foundation model for one seed: fresh initialization,
// then causal-LM training on the generic corpus. Experiments sharing a seed
// share this base so every arm starts from identical weights.
template <class S>
TransformerModel<S> make_pretrained_base(const ModelConfig& config,
                                         uint64_t seed, const Corpus& corpus,
                                         const FinetuneOptions& opt) {
  auto m = init_model<S>(config, seed);
  FinetuneOptions o = opt;
  o.seed = seed;
  train_full(m, corpus, o);
  return m;
}

template <class S>
MetricsRecord four_metrics(const TransformerModel<S>& base,
                           const Corpus& pretrain, const Corpus& downstream,
                           const PipelineOptions& opt) {
  MetricsRecord rec;
  rec.seed = opt.seed;
  rec.config_fingerprint = config_fingerprint(base.config, opt);
  auto val = val_tokens(downstream);
  std::string stage = "zero_shot";
  try {
    rec.zero_shot_ppl =
        perplexity_full(base, val, opt.eval_seq_len, opt.eval_batch);

    stage = "split";
    auto work = clone_model(base);
    auto sm = split(work, opt.plan);

    stage = "emulator";
    auto emulator = build_emulator(sm, opt.spec);
    if (opt.distill.steps > 0) {
      stage = "distill";
      DistillOptions dopt = opt.distill;
      dopt.seed = opt.seed;
      dopt.schedule.total_steps = dopt.steps;
      dopt.schedule.warmup_steps =
          std::min(dopt.schedule.warmup_steps, dopt.steps);
      distill_emulator(sm, emulator, pretrain, dopt);
    }

    stage = "finetune";
    auto stack = make_stack(sm, std::move(emulator), extract_adapter(sm));
    FinetuneOptions tune = opt.tune;
    tune.seed = opt.seed;
    if (opt.lr_grid.empty()) {
      finetune(stack, downstream, tune);
    } else {
      finetune_grid(stack, downstream, tune,
                    {opt.lr_grid.data(), opt.lr_grid.size()});
    }

    stage = "emulator_eval";
    rec.emulator_ppl = perplexity(stack_logits_fn(stack), val,
                                  opt.eval_seq_len, opt.eval_batch);

    stage = "plug_in";
    auto plugged = plug_in(base, stack.adapter);
    rec.plug_in_ppl =
        perplexity_full(plugged, val, opt.eval_seq_len, opt.eval_batch);

    stage = "full_ft";
    auto ft = clone_model(base);
    train_full(ft, downstream, tune);
    rec.full_ft_ppl =
        perplexity_full(ft, val, opt.eval_seq_len, opt.eval_batch);

    rec.validate();
  } catch (const Error& e) {
    rec.failure = stage + ": " + e.what();
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

enum class AblationAxis { kAdapterPosition, kCompressionMethod, kDistillation };

inline const char* ablation_axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::kAdapterPosition: return "adapter_position";
    case AblationAxis::kCompressionMethod: return "compression_method";
    case AblationAxis::kDistillation: return "distillation";
  }
  return "?";
}

struct AblationPoint {
  std::string label;
  PipelineOptions opt;
};

// The standard grids, derived from a template configuration:
//   adapter_position — the same trainable-layer budget spent as a sandwich,
//     all at the top, or all at the bottom (middle depth is equal, so the
//     same drop plan applies);
//   compression_method — layer-drop vs magnitude pruning vs quantization at
//     a matched nominal compression ratio k/m (pruning keeps that fraction
//     of weights; quantization keeps that fraction of bits), undistilled,
//     since distillation is defined for layer-dropped emulators;
//   distillation — the raw layer-dropped emulator vs the same emulator after
//     the configured distillation budget.
inline std::vector<AblationPoint> ablation_points(AblationAxis axis,
                                                  const ModelConfig& config,
                                                  const PipelineOptions& base) {
  std::vector<AblationPoint> points;
  switch (axis) {
    case AblationAxis::kAdapterPosition: {
      OT_CHECK(base.spec.plan.has_value(), ContractError,
               "adapter-position grid needs a layer-drop emulator spec");
      const int64_t budget = base.plan.n_bottom + base.plan.n_top;
      OT_CHECK(budget > 0 && budget < config.n_layers, ContractError,
               "adapter budget " << budget << " leaves no middle");
      for (auto [label, nb, nt] :
           {std::tuple<const char*, int64_t, int64_t>{"sandwich",
                                                      base.plan.n_bottom,
                                                      base.plan.n_top},
            {"top", 0, budget},
            {"bottom", budget, 0}}) {
        PipelineOptions p = base;
        p.plan.n_bottom = nb;
        p.plan.n_top = nt;
        points.push_back({label, std::move(p)});
      }
      break;
    }
    case AblationAxis::kCompressionMethod: {
      OT_CHECK(base.spec.plan.has_value(), ContractError,
               "compression grid derives its ratio from a layer-drop spec");
      const double ratio = static_cast<double>(base.spec.plan->k) /
                           static_cast<double>(base.spec.plan->m);
      PipelineOptions drop = base;
      drop.distill.steps = 0;
      points.push_back({"layer_drop", drop});
      PipelineOptions prune = drop;
      prune.spec = EmulatorSpec{};
      prune.spec.method = EmulatorMethod::kMagnitudePrune;
      prune.spec.sparsity = 1.0 - ratio;
      points.push_back({"magnitude_prune", std::move(prune)});
      PipelineOptions quant = drop;
      quant.spec = EmulatorSpec{};
      quant.spec.method = EmulatorMethod::kQuantize;
      quant.spec.bits = std::max<int64_t>(
          2, static_cast<int64_t>(std::llround(32.0 * ratio)));
      points.push_back({"quantize", std::move(quant)});
      break;
    }
    case AblationAxis::kDistillation: {
      OT_CHECK(base.distill.steps > 0, ContractError,
               "distillation grid needs a positive distillation budget");
      PipelineOptions off = base;
      off.distill.steps = 0;
      points.push_back({"raw", std::move(off)});
      points.push_back({"distilled", base});
      break;
    }
  }
  return points;
}

struct AblationReport {
  AblationAxis axis = AblationAxis::kAdapterPosition;
  std::vector<std::string> labels;                  // one per grid point
  std::vector<std::vector<MetricsRecord>> records;  // [point][seed]
};

// Runs every grid point for every seed. `bases[i]` must be the pretrained
// model for `seeds[i]`; sharing them across points keeps every arm starting
// from identical weights.
template <class S>
AblationReport run_ablation(AblationAxis axis,
                            std::span<const TransformerModel<S>> bases,
                            std::span<const uint64_t> seeds,
                            const Corpus& pretrain, const Corpus& downstream,
                            const PipelineOptions& base_opt) {
  OT_CHECK(!seeds.empty(), ContractError, "ablation needs at least one seed");
  OT_CHECK(bases.size() == seeds.size(), ContractError,
           "need one pretrained base per seed");
  AblationReport report;
  report.axis = axis;
  ModelConfig config = bases[0].config;
  for (auto& point : ablation_points(axis, config, base_opt)) {
    report.labels.push_back(point.label);
    std::vector<MetricsRecord> row;
    for (size_t i = 0; i < seeds.size(); ++i) {
      PipelineOptions opt = point.opt;
      opt.seed = seeds[i];
      row.push_back(four_metrics(bases[i], pretrain, downstream, opt));
    }
    report.records.push_back(std::move(row));
  }
  return report;
}

inline double point_mean(const AblationReport& report, size_t point,
                         double MetricsRecord::* field) {
  const auto& row = report.records.at(point);
  OT_CHECK(!row.empty(), ContractError, "ablation point has no records");
  double sum = 0.0;
  for (const auto& rec : row) sum += rec.*field;
  return sum / static_cast<double>(row.size());
}

// ---------------------------------------------------------------------------
// Plot-ready CSV reports
// ---------------------------------------------------------------------------

inline std::string metrics_csv(std::span<const MetricsRecord> records) {
  std::string out =
      "seed,zero_shot_ppl,emulator_ppl,plug_in_ppl,full_ft_ppl,"
      "fingerprint,failure\n";
  char line[512];
  for (const auto& r : records) {
    std::snprintf(line, sizeof(line),
                  "%llu,%.17g,%.17g,%.17g,%.17g,%s,%s\n",
                  static_cast<unsigned long long>(r.seed), r.zero_shot_ppl,
                  r.emulator_ppl, r.plug_in_ppl, r.full_ft_ppl,
                  r.config_fingerprint.c_str(), r.failure.c_str());
    out += line;
  }
  return out;
}

inline std::string ablation_csv(const AblationReport& report) {
  std::string out =
      "axis,point,seed,zero_shot_ppl,emulator_ppl,plug_in_ppl,full_ft_ppl,"
      "failure\n";
  char line[512];
  for (size_t p = 0; p < report.labels.size(); ++p)
    for (const auto& r : report.records[p]) {
      std::snprintf(line, sizeof(line), "%s,%s,%llu,%.17g,%.17g,%.17g,%.17g,%s\n",
                    ablation_axis_name(report.axis), report.labels[p].c_str(),
                    static_cast<unsigned long long>(r.seed), r.zero_shot_ppl,
                    r.emulator_ppl, r.plug_in_ppl, r.full_ft_ppl,
                    r.failure.c_str());
      out += line;
    }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  OT_CHECK(f != nullptr, ContractError, "cannot open report file " << path);
  std::fwrite(text.data(), 1, text.size(), f);
  std::fclose(f);
}

}  // namespace ot
