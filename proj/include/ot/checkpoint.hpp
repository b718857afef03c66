#pragma once
// Owner-side checkpoint files: a full transformer model, or an emulator's
// block stack together with the spec that produced it. Checkpoints use the
// same hashed-index container as bundles (magic OTC1 instead of OTB1) but
// they are private artifacts — the owner's working state between pipeline
// stages — and are never shipped to a user.

#include <string>
#include <vector>

#include "ot/model.hpp"
#include "ot/surgery.hpp"

namespace ot {

void save_model_checkpoint(const std::string& path,
                           const TransformerModel<float>& model);

// Restores weights and trainable flags exactly as saved; every tensor is
// digest-checked against the manifest.
TransformerModel<float> load_model_checkpoint(const std::string& path);

struct EmulatorCheckpoint {
  ModelConfig config;
  EmulatorSpec spec;
  std::vector<TransformerBlock<float>> blocks;  // frozen, as built
};

void save_emulator_checkpoint(const std::string& path,
                              const ModelConfig& config,
                              const EmulatorSpec& spec,
                              const std::vector<TransformerBlock<float>>& blocks);

EmulatorCheckpoint load_emulator_checkpoint(const std::string& path);

}  // namespace ot
