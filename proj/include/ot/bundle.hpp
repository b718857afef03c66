#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ot/common.hpp"
#include "ot/model.hpp"
#include "ot/surgery.hpp"
#include "ot/tuning.hpp"

namespace ot {

// The two-party exchange container. A bundle file is:
//
//   magic "OTB1" | u64 little-endian manifest length | manifest JSON
//   | payload (named tensors, 32-bit little-endian floats, row-major,
//     concatenated in index order)
//
// The manifest is canonical-form JSON (sorted keys, no insignificant
// whitespace), so identical content always produces identical bytes.

struct TensorIndexEntry {
  std::string name;
  std::string dtype;  // always "f32"
  Shape shape;
  uint64_t offset = 0;  // byte offset into the payload
  uint64_t nbytes = 0;
  std::string sha256;  // digest of the payload slice
};

struct Provenance {
  std::string base_model_hash;
  std::string split_plan_hash;
  std::string emulator_spec_hash;
};

enum class BundleRole { kOwnerPackage, kAdapterReturn };

struct BundleManifest {
  int format_version = 1;
  BundleRole role = BundleRole::kOwnerPackage;
  std::string model_id;
  ModelConfig config;
  SplitPlan plan;
  EmulatorSpec emulator;            // owner packages only
  PeftMode peft_mode = PeftMode::kFull;  // adapter returns only
  std::optional<LoraSpec> lora;          // set when peft_mode == lora
  std::optional<BottleneckSpec> bottleneck;
  Provenance provenance;
  std::vector<TensorIndexEntry> index;
  std::string payload_hash;  // digest of the whole payload
};

struct ArtifactBundle {
  BundleManifest manifest;
  std::vector<float> payload;
};

// Canonical JSON encodings (sorted keys, compact form).
std::string manifest_to_json(const BundleManifest& m);
BundleManifest manifest_from_json(const std::string& text);
std::string split_plan_hash(const SplitPlan& plan);
std::string emulator_spec_hash(const EmulatorSpec& spec);

// Owner package: sandwich adapter, emulator, frozen embeddings/norm/head.
// The frozen middle never enters; a privacy guard verifies that no dropped
// middle-layer tensor's bytes appear under any name.
ArtifactBundle package_owner(const SplitModel<float>& sm,
                             const std::vector<TransformerBlock<float>>& emulator,
                             const EmulatorSpec& spec,
                             const std::string& model_id);

// Adapter return: exactly the tensors the user trained (full sandwich, or
// the peft subset), plus the owner package's provenance triple, carried over
// verbatim so the owner can match the return against its own records.
ArtifactBundle package_return(const AdapterWeights<float>& adapter,
                              const ModelConfig& config,
                              const std::string& model_id,
                              const Provenance& provenance,
                              const std::optional<LoraSpec>& lora = {},
                              const std::optional<BottleneckSpec>& bottleneck = {});

// Reconstructs the user-side stack from an owner package.
TuningStack<float> unpack_owner(const ArtifactBundle& bundle);

// Rebuilds full adapter weights from a return bundle by overlaying the
// returned tensors onto the owner's own adapter values, then plugs in.
AdapterWeights<float> unpack_return(const TransformerModel<float>& model,
                                    const ArtifactBundle& bundle);

// User-side overlay: checks the return bundle against the owner package it
// answers (architecture, plan, and the full provenance triple), attaches the
// declared peft structure to the stack's adapter, and installs the returned
// tensors. The stack must be freshly unpacked (no attachment yet). Never
// touches a full model, so users can preview a tuned adapter on the emulator.
void apply_return(TuningStack<float>& stack, const BundleManifest& owner,
                  const ArtifactBundle& ret);
TransformerModel<float> verify_and_plug(const TransformerModel<float>& model,
                                        const ArtifactBundle& bundle);

// File round trip; every read re-validates magic, index layout, per-tensor
// digests, and the payload digest.
void write_bundle(const std::string& path, const ArtifactBundle& bundle);
ArtifactBundle read_bundle(const std::string& path);

}  // namespace ot
