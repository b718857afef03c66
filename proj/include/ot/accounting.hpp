#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ot/common.hpp"
#include "ot/model.hpp"
#include "ot/surgery.hpp"
#include "ot/tuning.hpp"

namespace ot {

// Exact parameter and byte accounting, computed from the parameter schema
// alone — no weights are ever allocated. Counting convention: embedding
// tables never count as trainable (they are frozen everywhere in this
// codebase); the final norm belongs to the top adapter segment.

enum class TuneMode {
  kFullModel,         // full fine-tuning baseline
  kAdapterFull,       // sandwich, all adapter weights
  kAdapterLora,       // sandwich, low-rank factors only
  kAdapterBottleneck, // sandwich, bottleneck modules only
  kAdapterBitfit,     // sandwich, bias vectors only
};

inline const char* tune_mode_name(TuneMode m) {
  switch (m) {
    case TuneMode::kFullModel: return "ft";
    case TuneMode::kAdapterFull: return "adapter";
    case TuneMode::kAdapterLora: return "lora";
    case TuneMode::kAdapterBottleneck: return "bottleneck";
    case TuneMode::kAdapterBitfit: return "bitfit";
  }
  return "?";
}

struct ParamRow {
  std::string name;
  int64_t params = 0;
  bool trainable = false;
  bool transmitted = false;
};

struct ParamReport {
  int64_t total_params = 0;
  int64_t trainable_params = 0;
  int64_t transmitted_params = 0;
  int64_t transmitted_bytes = 0;  // 32-bit float payload
  // Transformer-block subtotals, for compression-ratio statements.
  int64_t full_block_params = 0;
  int64_t transmitted_block_params = 0;
  std::vector<ParamRow> breakdown;

  void tally() {
    total_params = trainable_params = transmitted_params = 0;
    for (const auto& r : breakdown) {
      total_params += r.params;
      if (r.trainable) trainable_params += r.params;
      if (r.transmitted) transmitted_params += r.params;
    }
    transmitted_bytes = transmitted_params * 4;
  }
};

namespace detail {

inline int64_t block_index_of(const std::string& name) {
  if (name.rfind("blocks.", 0) != 0) return -1;
  return std::stoll(name.substr(7));
}

inline bool in_sandwich(int64_t block, const SplitPlan& plan,
                        int64_t n_layers) {
  return block >= 0 &&
         (block < plan.n_bottom || block >= n_layers - plan.n_top);
}

inline bool is_linear_weight(const std::string& name) {
  const bool weight = name.size() >= 7 &&
                      name.compare(name.size() - 7, 7, ".weight") == 0;
  return weight && (name.find(".attn.") != std::string::npos ||
                    name.find(".mlp.") != std::string::npos);
}

inline bool is_bias(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

}  // namespace detail

// Trainable-parameter accounting for one tuning mode. `transmitted` fields
// stay zero here; transmitted_footprint owns shipping totals.
inline ParamReport count_params(const ModelConfig& config,
                                const SplitPlan& plan, TuneMode mode,
                                const LoraSpec& lora = {},
                                const BottleneckSpec& bottleneck = {}) {
  config.validate();
  if (mode != TuneMode::kFullModel) plan.validate(config.n_layers);
  ParamReport rep;

  for (const auto& [name, shape] : parameter_schema(config)) {
    const int64_t block = detail::block_index_of(name);
    const bool sandwich = detail::in_sandwich(block, plan, config.n_layers);
    bool trainable = false;
    switch (mode) {
      case TuneMode::kFullModel:
        trainable = block >= 0 || name.rfind("final_norm.", 0) == 0;
        break;
      case TuneMode::kAdapterFull:
        trainable = sandwich ||
                    (name.rfind("final_norm.", 0) == 0 && plan.n_top > 0);
        break;
      case TuneMode::kAdapterBitfit:
        trainable = (sandwich && detail::is_bias(name)) ||
                    (name == "final_norm.bias" && plan.n_top > 0);
        break;
      case TuneMode::kAdapterLora:
      case TuneMode::kAdapterBottleneck:
        trainable = false;  // base weights freeze; added rows train below
        break;
    }
    rep.breakdown.push_back({name, numel(shape), trainable, false});

    // Attachment rows ride directly after their host tensor.
    if (mode == TuneMode::kAdapterLora && sandwich &&
        detail::is_linear_weight(name)) {
      lora.validate();
      const int64_t in = shape[0], out = shape[1];
      rep.breakdown.push_back(
          {name.substr(0, name.size() - 7) + ".lora_a", in * lora.rank, true,
           false});
      rep.breakdown.push_back(
          {name.substr(0, name.size() - 7) + ".lora_b", lora.rank * out, true,
           false});
    }
    if (mode == TuneMode::kAdapterBottleneck && sandwich &&
        name.find(".mlp.down.bias") != std::string::npos) {
      bottleneck.validate();
      const std::string prefix = "blocks." + std::to_string(block);
      const int64_t d = config.d_model, bd = bottleneck.dim;
      for (const char* which : {".adapter_attn", ".adapter_mlp"}) {
        rep.breakdown.push_back(
            {prefix + which + ".down.weight", d * bd, true, false});
        rep.breakdown.push_back({prefix + which + ".down.bias", bd, true,
                                 false});
        rep.breakdown.push_back(
            {prefix + which + ".up.weight", bd * d, true, false});
        rep.breakdown.push_back({prefix + which + ".up.bias", d, true, false});
      }
    }
  }
  rep.tally();
  for (const auto& r : rep.breakdown)
    if (detail::block_index_of(r.name) >= 0) rep.full_block_params += r.params;
  return rep;
}

// What the owner ships: sandwich adapter blocks, the emulator stand-in for
// the middle, frozen embeddings, final norm, and head. Also reports the
// transformer-block subtotals for size-ratio statements.
inline ParamReport transmitted_footprint(const SplitPlan& plan,
                                         const EmulatorSpec& spec,
                                         const ModelConfig& config) {
  config.validate();
  plan.validate(config.n_layers);
  spec.validate();
  const int64_t m = config.n_layers - plan.n_bottom - plan.n_top;
  int64_t emitted_blocks = m;  // prune and quantize keep every middle block
  if (spec.method == EmulatorMethod::kLayerDrop ||
      spec.method == EmulatorMethod::kDistilled) {
    OT_CHECK(spec.plan->m == m, PlanError,
             "layer plan built for m=" << spec.plan->m << " but the middle has "
                                       << m << " blocks");
    emitted_blocks = spec.plan->k;
  }

  ParamReport rep;
  int64_t one_block = 0;
  for (const auto& [name, shape] : parameter_schema(config)) {
    const int64_t block = detail::block_index_of(name);
    if (block == 0) one_block += numel(shape);
    const bool sandwich = detail::in_sandwich(block, plan, config.n_layers);
    const bool shipped = block < 0 || sandwich;  // embeddings/norm/head ship
    rep.breakdown.push_back({name, numel(shape), false, shipped});
    if (block >= 0) rep.full_block_params += numel(shape);
  }
  // Emulator blocks mirror the block schema under their own names.
  for (int64_t j = 0; j < emitted_blocks; ++j) {
    NamedShapes blk;
    block_schema(config, "emulator." + std::to_string(j), blk);
    for (const auto& [name, shape] : blk)
      rep.breakdown.push_back({name, numel(shape), false, true});
  }
  rep.tally();
  rep.transmitted_block_params =
      (plan.n_bottom + plan.n_top + emitted_blocks) * one_block;
  return rep;
}

}  // namespace ot
