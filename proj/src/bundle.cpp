#include "ot/bundle.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <map>
#include <set>
#include <utility>

#include <json.hpp>

#include "ot/checkpoint.hpp"
#include "ot/sha256.hpp"

namespace ot {

namespace {

using json = nlohmann::json;  // std::map-backed: keys serialize sorted

constexpr char kMagic[4] = {'O', 'T', 'B', '1'};
constexpr char kCkptMagic[4] = {'O', 'T', 'C', '1'};
constexpr size_t kHeaderBytes = 4 + 8;  // magic + u64 manifest length

// --- enum <-> string -------------------------------------------------------

const char* role_name(BundleRole r) {
  return r == BundleRole::kOwnerPackage ? "owner_package" : "adapter_return";
}

BundleRole role_from(const std::string& s) {
  if (s == "owner_package") return BundleRole::kOwnerPackage;
  if (s == "adapter_return") return BundleRole::kAdapterReturn;
  OT_THROW(BundleError, "unknown bundle role '" << s << "'");
}

const char* arch_name(Arch a) {
  return a == Arch::kGpt2Like ? "gpt2" : "opt";
}

Arch arch_from(const std::string& s) {
  if (s == "gpt2") return Arch::kGpt2Like;
  if (s == "opt") return Arch::kOptLike;
  OT_THROW(BundleError, "unknown architecture '" << s << "'");
}

EmulatorMethod method_from(const std::string& s) {
  if (s == "layer_drop") return EmulatorMethod::kLayerDrop;
  if (s == "magnitude_prune") return EmulatorMethod::kMagnitudePrune;
  if (s == "quantize") return EmulatorMethod::kQuantize;
  if (s == "distilled") return EmulatorMethod::kDistilled;
  OT_THROW(BundleError, "unknown emulator method '" << s << "'");
}

PeftMode peft_from(const std::string& s) {
  if (s == "full") return PeftMode::kFull;
  if (s == "lora") return PeftMode::kLora;
  if (s == "bottleneck") return PeftMode::kBottleneck;
  if (s == "bitfit") return PeftMode::kBitfit;
  OT_THROW(BundleError, "unknown peft mode '" << s << "'");
}

// --- struct <-> json -------------------------------------------------------

json config_to_json(const ModelConfig& c) {
  json j;
  j["arch"] = arch_name(c.arch);
  j["d_ff"] = c.d_ff;
  j["d_model"] = c.d_model;
  j["max_seq_len"] = c.max_seq_len;
  j["n_heads"] = c.n_heads;
  j["n_layers"] = c.n_layers;
  j["tie_embeddings"] = c.tie_embeddings;
  j["vocab_size"] = c.vocab_size;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.arch = arch_from(j.at("arch").get<std::string>());
  c.d_ff = j.at("d_ff").get<int64_t>();
  c.d_model = j.at("d_model").get<int64_t>();
  c.max_seq_len = j.at("max_seq_len").get<int64_t>();
  c.n_heads = j.at("n_heads").get<int64_t>();
  c.n_layers = j.at("n_layers").get<int64_t>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.vocab_size = j.at("vocab_size").get<int64_t>();
  return c;
}

json plan_to_json(const SplitPlan& p) {
  json j;
  j["include_embeddings"] = p.include_embeddings_in_adapter;
  j["include_head"] = p.include_head_in_adapter;
  j["n_bottom"] = p.n_bottom;
  j["n_top"] = p.n_top;
  return j;
}

SplitPlan plan_from_json(const json& j) {
  SplitPlan p;
  p.include_embeddings_in_adapter = j.at("include_embeddings").get<bool>();
  p.include_head_in_adapter = j.at("include_head").get<bool>();
  p.n_bottom = j.at("n_bottom").get<int64_t>();
  p.n_top = j.at("n_top").get<int64_t>();
  return p;
}

json spec_to_json(const EmulatorSpec& s) {
  json j;
  j["method"] = emulator_method_name(s.method);
  if (s.plan) {
    json p;
    p["k"] = s.plan->k;
    p["m"] = s.plan->m;
    p["retained"] = s.plan->retained_indices;
    j["plan"] = std::move(p);
  }
  if (s.sparsity) j["sparsity"] = *s.sparsity;
  if (s.bits) j["bits"] = *s.bits;
  return j;
}

EmulatorSpec spec_from_json(const json& j) {
  EmulatorSpec s;
  s.method = method_from(j.at("method").get<std::string>());
  if (j.contains("plan")) {
    const json& p = j.at("plan");
    LayerDropPlan plan;
    plan.k = p.at("k").get<int64_t>();
    plan.m = p.at("m").get<int64_t>();
    plan.retained_indices = p.at("retained").get<std::vector<int64_t>>();
    s.plan = std::move(plan);
  }
  if (j.contains("sparsity")) s.sparsity = j.at("sparsity").get<double>();
  if (j.contains("bits")) s.bits = j.at("bits").get<int>();
  return s;
}

json provenance_to_json(const Provenance& p) {
  json j;
  j["base_model"] = p.base_model_hash;
  j["emulator_spec"] = p.emulator_spec_hash;
  j["split_plan"] = p.split_plan_hash;
  return j;
}

Provenance provenance_from_json(const json& j) {
  Provenance p;
  p.base_model_hash = j.at("base_model").get<std::string>();
  p.emulator_spec_hash = j.at("emulator_spec").get<std::string>();
  p.split_plan_hash = j.at("split_plan").get<std::string>();
  return p;
}

json index_to_json(const std::vector<TensorIndexEntry>& index) {
  json arr = json::array();
  for (const auto& e : index) {
    json j;
    j["dtype"] = e.dtype;
    j["name"] = e.name;
    j["nbytes"] = e.nbytes;
    j["offset"] = e.offset;
    j["sha256"] = e.sha256;
    j["shape"] = e.shape;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::vector<TensorIndexEntry> index_from_json(const json& arr) {
  std::vector<TensorIndexEntry> index;
  for (const json& j : arr) {
    TensorIndexEntry e;
    e.dtype = j.at("dtype").get<std::string>();
    e.name = j.at("name").get<std::string>();
    e.nbytes = j.at("nbytes").get<uint64_t>();
    e.offset = j.at("offset").get<uint64_t>();
    e.sha256 = j.at("sha256").get<std::string>();
    e.shape = j.at("shape").get<Shape>();
    index.push_back(std::move(e));
  }
  return index;
}

// --- bundle assembly -------------------------------------------------------

void append_tensor(std::vector<TensorIndexEntry>& index,
                   std::vector<float>& payload, const std::string& name,
                   const Tensor<float>& t) {
  TensorIndexEntry e;
  e.name = name;
  e.dtype = "f32";
  e.shape = t.shape();
  e.offset = payload.size() * sizeof(float);
  e.nbytes = static_cast<uint64_t>(t.numel()) * sizeof(float);
  e.sha256 = sha256_hex_f32(t.data());
  index.push_back(std::move(e));
  payload.insert(payload.end(), t.data().begin(), t.data().end());
}

struct Builder {
  BundleManifest manifest;
  std::vector<float> payload;

  void add(const std::string& name, const Tensor<float>& t) {
    append_tensor(manifest.index, payload, name, t);
  }

  ArtifactBundle finish() {
    manifest.payload_hash = sha256_hex_f32(payload);
    return ArtifactBundle{std::move(manifest), std::move(payload)};
  }
};

// Index/payload integrity shared by bundles and checkpoints: layout,
// per-tensor digests, and the whole-payload digest.
void validate_index(const std::vector<TensorIndexEntry>& index,
                    const std::vector<float>& payload,
                    const std::string& payload_hash) {
  uint64_t cursor = 0;
  std::set<std::string> seen;
  for (const auto& e : index) {
    OT_CHECK(e.dtype == "f32", BundleError,
             "tensor '" << e.name << "' has unsupported dtype '" << e.dtype
                        << "'");
    OT_CHECK(seen.insert(e.name).second, BundleError,
             "duplicate tensor name '" << e.name << "' in index");
    OT_CHECK(e.offset == cursor, BundleError,
             "tensor '" << e.name << "' offset " << e.offset
                        << " leaves a gap or overlap (expected " << cursor
                        << ")");
    OT_CHECK(e.nbytes == static_cast<uint64_t>(numel(e.shape)) * sizeof(float),
             BundleError, "tensor '" << e.name << "' nbytes " << e.nbytes
                                     << " disagrees with shape "
                                     << shape_str(e.shape));
    cursor += e.nbytes;
  }
  OT_CHECK(cursor == payload.size() * sizeof(float), BundleError,
           "index covers " << cursor << " bytes but payload holds "
                           << payload.size() * sizeof(float));
  for (const auto& e : index) {
    std::span<const float> slice(payload.data() + e.offset / sizeof(float),
                                 e.nbytes / sizeof(float));
    OT_CHECK(sha256_hex_f32(slice) == e.sha256, BundleError,
             "checksum mismatch for tensor '" << e.name << "'");
  }
  OT_CHECK(sha256_hex_f32(payload) == payload_hash, BundleError,
           "payload digest disagrees with the manifest");
}

// Structural integrity shared by write (pre-flight) and every unpack.
void validate_bundle(const ArtifactBundle& b) {
  OT_CHECK(b.manifest.format_version == 1, BundleError,
           "unsupported bundle format version " << b.manifest.format_version);
  validate_index(b.manifest.index, b.payload, b.manifest.payload_hash);
}

// A zeroed block with the config's shapes; flags are set by the caller.
TransformerBlock<float> blank_block(const ModelConfig& c) {
  const int64_t d = c.d_model, f = c.d_ff;
  auto vec = [](int64_t n) { return Tensor<float>::zeros({n}, false); };
  auto lin = [](int64_t in, int64_t out) {
    Linear<float> l;
    l.weight = Tensor<float>::zeros({in, out}, false);
    l.bias = Tensor<float>::zeros({out}, false);
    return l;
  };
  TransformerBlock<float> b;
  b.arch = c.arch;
  b.n_heads = c.n_heads;
  b.ln1_gain = vec(d);
  b.ln1_bias = vec(d);
  if (c.arch == Arch::kGpt2Like) {
    b.qkv = lin(d, 3 * d);
  } else {
    b.q = lin(d, d);
    b.k = lin(d, d);
    b.v = lin(d, d);
  }
  b.attn_out = lin(d, d);
  b.ln2_gain = vec(d);
  b.ln2_bias = vec(d);
  b.mlp_up = lin(d, f);
  b.mlp_down = lin(f, d);
  return b;
}

// Copies each indexed payload slice into the tensor registered under the same
// name. Both directions must match exactly: a name the file lacks or a name
// the receiver does not expect is a hard error.
void overlay_exact(const std::vector<TensorIndexEntry>& index,
                   const std::vector<float>& payload,
                   NamedParams<float>& expected, const char* file_kind) {
  std::map<std::string, Tensor<float>*> by_name;
  for (auto& [name, t] : expected) by_name.emplace(name, &t);
  for (const auto& e : index) {
    auto it = by_name.find(e.name);
    OT_CHECK(it != by_name.end(), BundleError,
             file_kind << " carries unexpected tensor '" << e.name << "'");
    Tensor<float>& dst = *it->second;
    OT_CHECK(e.shape == dst.shape(), BundleError,
             "tensor '" << e.name << "' has shape " << shape_str(e.shape)
                        << " but " << shape_str(dst.shape())
                        << " was expected");
    std::span<const float> slice(payload.data() + e.offset / sizeof(float),
                                 e.nbytes / sizeof(float));
    std::copy(slice.begin(), slice.end(), dst.data().begin());
    by_name.erase(it);
  }
  OT_CHECK(by_name.empty(), BundleError,
           file_kind << " is missing tensor '" << by_name.begin()->first
                     << "'");
}

bool config_equal(const ModelConfig& a, const ModelConfig& b) {
  return a.n_layers == b.n_layers && a.d_model == b.d_model &&
         a.n_heads == b.n_heads && a.d_ff == b.d_ff &&
         a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len &&
         a.tie_embeddings == b.tie_embeddings && a.arch == b.arch;
}

// How many blocks the emulator must hold for a middle of depth m.
int64_t expected_emulator_depth(const EmulatorSpec& spec, int64_t m) {
  if (spec.method == EmulatorMethod::kLayerDrop ||
      spec.method == EmulatorMethod::kDistilled) {
    OT_CHECK(spec.plan->m == m, PackagingError,
             "emulator layer plan was built for a middle of " << spec.plan->m
                 << " blocks, but this split has " << m);
    return spec.plan->k;
  }
  return m;  // prune/quantize keep the full depth
}

}  // namespace

std::string manifest_to_json(const BundleManifest& m) {
  json j;
  if (m.bottleneck) {
    json b;
    b["dim"] = m.bottleneck->dim;
    j["bottleneck"] = std::move(b);
  }
  j["config"] = config_to_json(m.config);
  if (m.role == BundleRole::kOwnerPackage)
    j["emulator"] = spec_to_json(m.emulator);
  j["format_version"] = m.format_version;
  j["index"] = index_to_json(m.index);
  if (m.lora) {
    json l;
    l["alpha"] = m.lora->alpha;
    l["rank"] = m.lora->rank;
    j["lora"] = std::move(l);
  }
  j["model_id"] = m.model_id;
  j["payload_hash"] = m.payload_hash;
  j["peft_mode"] = peft_mode_name(m.peft_mode);
  j["plan"] = plan_to_json(m.plan);
  j["provenance"] = provenance_to_json(m.provenance);
  j["role"] = role_name(m.role);
  return j.dump();
}

BundleManifest manifest_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    BundleManifest m;
    m.format_version = j.at("format_version").get<int>();
    m.role = role_from(j.at("role").get<std::string>());
    m.model_id = j.at("model_id").get<std::string>();
    m.config = config_from_json(j.at("config"));
    m.plan = plan_from_json(j.at("plan"));
    if (j.contains("emulator")) m.emulator = spec_from_json(j.at("emulator"));
    m.peft_mode = peft_from(j.at("peft_mode").get<std::string>());
    if (j.contains("lora")) {
      LoraSpec l;
      l.alpha = j.at("lora").at("alpha").get<double>();
      l.rank = j.at("lora").at("rank").get<int64_t>();
      m.lora = l;
    }
    if (j.contains("bottleneck")) {
      BottleneckSpec b;
      b.dim = j.at("bottleneck").at("dim").get<int64_t>();
      m.bottleneck = b;
    }
    m.provenance = provenance_from_json(j.at("provenance"));
    m.index = index_from_json(j.at("index"));
    m.payload_hash = j.at("payload_hash").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    OT_THROW(BundleError, "malformed bundle manifest: " << e.what());
  }
}

std::string split_plan_hash(const SplitPlan& plan) {
  return sha256_hex(plan_to_json(plan).dump());
}

std::string emulator_spec_hash(const EmulatorSpec& spec) {
  return sha256_hex(spec_to_json(spec).dump());
}

ArtifactBundle package_owner(
    const SplitModel<float>& sm,
    const std::vector<TransformerBlock<float>>& emulator,
    const EmulatorSpec& spec, const std::string& model_id) {
  spec.validate();
  OT_CHECK(!sm.provenance.empty(), PackagingError,
           "split carries no provenance hash");
  const int64_t m = static_cast<int64_t>(sm.middle.size());
  const int64_t depth = expected_emulator_depth(spec, m);
  OT_CHECK(static_cast<int64_t>(emulator.size()) == depth, PackagingError,
           "emulator holds " << emulator.size() << " blocks but the spec calls "
                             << "for " << depth);

  Builder b;
  b.manifest.format_version = 1;
  b.manifest.role = BundleRole::kOwnerPackage;
  b.manifest.model_id = model_id;
  b.manifest.config = sm.config;
  b.manifest.plan = sm.plan;
  b.manifest.emulator = spec;
  b.manifest.peft_mode = PeftMode::kFull;
  b.manifest.provenance = Provenance{sm.provenance, split_plan_hash(sm.plan),
                                     emulator_spec_hash(spec)};

  auto add_blocks = [&](std::span<const TransformerBlock<float>> blocks,
                        const std::string& prefix) {
    for (size_t i = 0; i < blocks.size(); ++i) {
      NamedParams<float> params;
      block_params(blocks[i], prefix + std::to_string(i), params);
      for (const auto& [name, t] : params) b.add(name, t);
    }
  };
  add_blocks(sm.a1_span(), "a1.");
  add_blocks(sm.a2_span(), "a2.");
  b.add("final_norm.gain", sm.final_norm_gain);
  b.add("final_norm.bias", sm.final_norm_bias);
  b.add("tok_embed", sm.tok_embed);
  b.add("pos_embed", sm.pos_embed);
  if (!sm.config.tie_embeddings) b.add("lm_head.weight", sm.lm_head);
  add_blocks({emulator.data(), emulator.size()}, "emulator.");

  // Privacy guard. The frozen middle must not leak: no tensor may carry a
  // middle-layer name, and no payload slice may carry the bytes of a dropped
  // middle layer. (Retained layers legitimately ship as emulator copies.)
  // On degenerate weights — e.g. untrained constant norm vectors that are
  // byte-identical across layers — the guard refuses conservatively.
  std::map<std::string, std::string> dropped;  // value hash -> tensor name
  if (spec.plan) {
    std::set<int64_t> retained(spec.plan->retained_indices.begin(),
                               spec.plan->retained_indices.end());
    for (int64_t i = 0; i < m; ++i) {
      if (retained.count(i)) continue;
      NamedParams<float> params;
      block_params(sm.middle[static_cast<size_t>(i)],
                   "blocks." + std::to_string(sm.plan.n_bottom + i), params);
      for (const auto& [name, t] : params)
        dropped.emplace(sha256_hex_f32(t.data()), name);
    }
  }
  for (const auto& e : b.manifest.index) {
    OT_CHECK(e.name.rfind("blocks.", 0) != 0, PackagingError,
             "privacy guard: middle-layer name '" << e.name
                                                  << "' in owner package");
    auto hit = dropped.find(e.sha256);
    OT_CHECK(hit == dropped.end(), PackagingError,
             "privacy guard: tensor '" << e.name
                 << "' carries the bytes of dropped middle tensor '"
                 << hit->second << "'");
  }
  return b.finish();
}

ArtifactBundle package_return(const AdapterWeights<float>& adapter,
                              const ModelConfig& config,
                              const std::string& model_id,
                              const Provenance& provenance,
                              const std::optional<LoraSpec>& lora,
                              const std::optional<BottleneckSpec>& bottleneck) {
  OT_CHECK(!provenance.base_model_hash.empty() &&
               !provenance.split_plan_hash.empty() &&
               !provenance.emulator_spec_hash.empty(),
           PackagingError, "return bundle requires the owner's provenance");
  OT_CHECK(adapter.provenance == provenance.base_model_hash, PackagingError,
           "adapter provenance disagrees with the owner package");

  // The peft hyperparameters ride along so the owner can rebuild the host
  // structure; they must describe the adapter that was actually tuned.
  const bool wants_lora = adapter.mode == PeftMode::kLora;
  const bool wants_bneck = adapter.mode == PeftMode::kBottleneck;
  OT_CHECK(lora.has_value() == wants_lora, PackagingError,
           "lora hyperparameters must accompany exactly lora-mode returns");
  OT_CHECK(bottleneck.has_value() == wants_bneck, PackagingError,
           "bottleneck hyperparameters must accompany exactly bottleneck-mode "
           "returns");
  if (lora) lora->validate();
  if (bottleneck) bottleneck->validate();
  for (const auto* seg : {&adapter.a1, &adapter.a2})
    for (const auto& blk : *seg) {
      if (lora) {
        const Linear<float>& probe =
            blk.arch == Arch::kGpt2Like ? blk.qkv : blk.q;
        OT_CHECK(probe.lora && probe.lora_a.dim(1) == lora->rank &&
                     probe.lora_scale ==
                         static_cast<float>(lora->alpha /
                                            static_cast<double>(lora->rank)),
                 PackagingError,
                 "lora hyperparameters disagree with the adapter's factors");
      }
      if (bottleneck)
        OT_CHECK(blk.adapter_attn &&
                     blk.adapter_attn->down.weight.dim(1) == bottleneck->dim,
                 PackagingError,
                 "bottleneck hyperparameters disagree with the adapter's "
                 "modules");
    }

  Builder b;
  b.manifest.format_version = 1;
  b.manifest.role = BundleRole::kAdapterReturn;
  b.manifest.model_id = model_id;
  b.manifest.config = config;
  b.manifest.plan = SplitPlan{adapter.n_bottom, adapter.n_top, false, false};
  b.manifest.peft_mode = adapter.mode;
  b.manifest.lora = lora;
  b.manifest.bottleneck = bottleneck;
  b.manifest.provenance = provenance;
  for (const auto& [name, t] : adapter_named_params(adapter))
    if (t.requires_grad()) b.add(name, t);
  return b.finish();
}

TuningStack<float> unpack_owner(const ArtifactBundle& bundle) {
  validate_bundle(bundle);
  const BundleManifest& man = bundle.manifest;
  OT_CHECK(man.role == BundleRole::kOwnerPackage, BundleError,
           "expected an owner package, got an adapter return");
  ModelConfig config = man.config;
  int64_t depth = 0;
  try {
    config.validate();
    man.plan.validate(config.n_layers);
    man.emulator.validate();
    depth = expected_emulator_depth(
        man.emulator, config.n_layers - man.plan.n_bottom - man.plan.n_top);
  } catch (const Error& e) {
    OT_THROW(BundleError, "inconsistent owner manifest: " << e.what());
  }

  TuningStack<float> st;
  st.config = config;
  st.tok_embed = Tensor<float>::zeros({config.vocab_size, config.d_model});
  st.pos_embed = Tensor<float>::zeros({config.max_seq_len, config.d_model});
  if (!config.tie_embeddings)
    st.lm_head = Tensor<float>::zeros({config.vocab_size, config.d_model});
  st.adapter.mode = PeftMode::kFull;
  st.adapter.n_bottom = man.plan.n_bottom;
  st.adapter.n_top = man.plan.n_top;
  for (int64_t i = 0; i < man.plan.n_bottom; ++i)
    st.adapter.a1.push_back(blank_block(config));
  for (int64_t i = 0; i < man.plan.n_top; ++i)
    st.adapter.a2.push_back(blank_block(config));
  st.adapter.final_norm_gain = Tensor<float>::zeros({config.d_model});
  st.adapter.final_norm_bias = Tensor<float>::zeros({config.d_model});
  st.adapter.provenance = man.provenance.base_model_hash;
  for (int64_t j = 0; j < depth; ++j) st.middle.push_back(blank_block(config));

  NamedParams<float> expected = adapter_named_params(st.adapter);
  for (size_t j = 0; j < st.middle.size(); ++j)
    block_params(st.middle[j], "emulator." + std::to_string(j), expected);
  expected.emplace_back("tok_embed", st.tok_embed);
  expected.emplace_back("pos_embed", st.pos_embed);
  if (!config.tie_embeddings) expected.emplace_back("lm_head.weight", st.lm_head);
  overlay_exact(bundle.manifest.index, bundle.payload, expected,
                "owner bundle");

  // Freshly unpacked, the stack is ready for tuning: sandwich trainable, the
  // final norm only when a top segment exists, everything else frozen.
  for (auto& blk : st.adapter.a1) set_block_trainable(blk, true);
  for (auto& blk : st.adapter.a2) set_block_trainable(blk, true);
  const bool norm_trainable = man.plan.n_top > 0;
  st.adapter.final_norm_gain.set_requires_grad(norm_trainable);
  st.adapter.final_norm_bias.set_requires_grad(norm_trainable);
  for (auto& blk : st.middle) set_block_trainable(blk, false);
  return st;
}

AdapterWeights<float> unpack_return(const TransformerModel<float>& model,
                                    const ArtifactBundle& bundle) {
  validate_bundle(bundle);
  const BundleManifest& man = bundle.manifest;
  OT_CHECK(man.role == BundleRole::kAdapterReturn, BundleError,
           "expected an adapter return, got an owner package");
  OT_CHECK(config_equal(man.config, model.config), BundleError,
           "return bundle was built for a different architecture");
  const std::string model_hash = model_weight_hash(model);
  OT_CHECK(man.provenance.base_model_hash == model_hash, IntegrationError,
           "return was tuned against base "
               << man.provenance.base_model_hash.substr(0, 12)
               << "... but this model hashes to " << model_hash.substr(0, 12)
               << "...");
  try {
    man.plan.validate(model.config.n_layers);
  } catch (const Error& e) {
    OT_THROW(BundleError, "inconsistent return manifest: " << e.what());
  }

  // Rebuild the adapter the user started from — the owner's own sandwich
  // weights plus the declared peft structure — then overlay exactly the
  // trained tensors. Untouched base values are the owner's to begin with.
  AdapterWeights<float> adapter;
  adapter.mode = PeftMode::kFull;
  adapter.n_bottom = man.plan.n_bottom;
  adapter.n_top = man.plan.n_top;
  const int64_t n = model.config.n_layers;
  for (int64_t i = 0; i < man.plan.n_bottom; ++i) {
    adapter.a1.push_back(clone_block(model.blocks[static_cast<size_t>(i)]));
    set_block_trainable(adapter.a1.back(), true);
  }
  for (int64_t i = n - man.plan.n_top; i < n; ++i) {
    adapter.a2.push_back(clone_block(model.blocks[static_cast<size_t>(i)]));
    set_block_trainable(adapter.a2.back(), true);
  }
  adapter.final_norm_gain = model.final_norm_gain.clone();
  adapter.final_norm_bias = model.final_norm_bias.clone();
  const bool norm_trainable = man.plan.n_top > 0;
  adapter.final_norm_gain.set_requires_grad(norm_trainable);
  adapter.final_norm_bias.set_requires_grad(norm_trainable);
  adapter.provenance = man.provenance.base_model_hash;

  try {
    switch (man.peft_mode) {
      case PeftMode::kFull:
        break;
      case PeftMode::kLora:
        OT_CHECK(man.lora.has_value(), BundleError,
                 "lora return lacks its hyperparameters");
        attach_lora(adapter, *man.lora, /*seed=*/0);
        break;
      case PeftMode::kBottleneck:
        OT_CHECK(man.bottleneck.has_value(), BundleError,
                 "bottleneck return lacks its hyperparameters");
        attach_bottleneck(adapter, *man.bottleneck, /*seed=*/0);
        break;
      case PeftMode::kBitfit:
        attach_bitfit(adapter);
        break;
    }
  } catch (const ContractError& e) {
    OT_THROW(BundleError, "inconsistent return manifest: " << e.what());
  }

  NamedParams<float> expected;
  for (const auto& [name, t] : adapter_named_params(adapter))
    if (t.requires_grad()) expected.emplace_back(name, t);
  overlay_exact(bundle.manifest.index, bundle.payload, expected,
                "return bundle");
  return adapter;
}

TransformerModel<float> verify_and_plug(const TransformerModel<float>& model,
                                        const ArtifactBundle& bundle) {
  return plug_in(model, unpack_return(model, bundle));
}

namespace {

// Shared container layout: magic, u64 little-endian manifest length,
// manifest text, f32 little-endian payload.
void write_container(const std::string& path, const char magic[4],
                     const std::string& manifest,
                     const std::vector<float>& payload) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  OT_CHECK(f.good(), BundleError, "cannot open '" << path << "' for writing");
  f.write(magic, 4);
  const uint64_t len = manifest.size();
  uint8_t header[8];
  for (int i = 0; i < 8; ++i)
    header[i] = static_cast<uint8_t>(len >> (8 * i));
  f.write(reinterpret_cast<const char*>(header), sizeof(header));
  f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  std::vector<uint8_t> bytes;
  bytes.reserve(payload.size() * sizeof(float));
  for (float v : payload) {
    const uint32_t w = std::bit_cast<uint32_t>(v);
    bytes.push_back(static_cast<uint8_t>(w));
    bytes.push_back(static_cast<uint8_t>(w >> 8));
    bytes.push_back(static_cast<uint8_t>(w >> 16));
    bytes.push_back(static_cast<uint8_t>(w >> 24));
  }
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  f.flush();
  OT_CHECK(f.good(), BundleError, "failed writing '" << path << "'");
}

struct RawContainer {
  std::string manifest;
  std::vector<float> payload;
};

RawContainer read_container(const std::string& path, const char magic[4],
                            const char* what) {
  std::ifstream f(path, std::ios::binary);
  OT_CHECK(f.good(), BundleError, "cannot open '" << path << "'");
  std::vector<uint8_t> raw((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  OT_CHECK(raw.size() >= kHeaderBytes, BundleError,
           "'" << path << "' is too short to be a " << what);
  OT_CHECK(std::equal(magic, magic + 4, raw.begin()), BundleError,
           "'" << path << "' is not a " << what << " (bad magic)");
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<uint64_t>(raw[4 + static_cast<size_t>(i)]) << (8 * i);
  OT_CHECK(kHeaderBytes + len <= raw.size(), BundleError,
           "manifest length overruns '" << path << "'");
  RawContainer out;
  out.manifest.assign(reinterpret_cast<const char*>(raw.data()) + kHeaderBytes,
                      static_cast<size_t>(len));
  const size_t payload_off = kHeaderBytes + static_cast<size_t>(len);
  const size_t payload_bytes = raw.size() - payload_off;
  OT_CHECK(payload_bytes % sizeof(float) == 0, BundleError,
           "payload of '" << path << "' is not whole 32-bit words");
  out.payload.reserve(payload_bytes / sizeof(float));
  for (size_t i = payload_off; i < raw.size(); i += 4) {
    const uint32_t w = static_cast<uint32_t>(raw[i]) |
                       static_cast<uint32_t>(raw[i + 1]) << 8 |
                       static_cast<uint32_t>(raw[i + 2]) << 16 |
                       static_cast<uint32_t>(raw[i + 3]) << 24;
    out.payload.push_back(std::bit_cast<float>(w));
  }
  return out;
}

}  // namespace

void write_bundle(const std::string& path, const ArtifactBundle& bundle) {
  validate_bundle(bundle);
  write_container(path, kMagic, manifest_to_json(bundle.manifest),
                  bundle.payload);
}

ArtifactBundle read_bundle(const std::string& path) {
  RawContainer raw = read_container(path, kMagic, "bundle");
  ArtifactBundle bundle;
  bundle.manifest = manifest_from_json(raw.manifest);
  bundle.payload = std::move(raw.payload);
  validate_bundle(bundle);
  return bundle;
}

void apply_return(TuningStack<float>& stack, const BundleManifest& owner,
                  const ArtifactBundle& ret) {
  validate_bundle(ret);
  const BundleManifest& man = ret.manifest;
  OT_CHECK(man.role == BundleRole::kAdapterReturn, BundleError,
           "expected an adapter return, got an owner package");
  OT_CHECK(owner.role == BundleRole::kOwnerPackage, BundleError,
           "the reference manifest must be an owner package");
  OT_CHECK(config_equal(man.config, owner.config), BundleError,
           "return bundle was built for a different architecture");
  OT_CHECK(man.provenance.base_model_hash == owner.provenance.base_model_hash &&
               man.provenance.split_plan_hash ==
                   owner.provenance.split_plan_hash &&
               man.provenance.emulator_spec_hash ==
                   owner.provenance.emulator_spec_hash,
           BundleError,
           "return bundle provenance does not match the owner package");
  OT_CHECK(man.plan.n_bottom == owner.plan.n_bottom &&
               man.plan.n_top == owner.plan.n_top,
           BundleError, "return bundle declares a different split plan");
  OT_CHECK(stack.adapter.mode == PeftMode::kFull, ContractError,
           "stack adapter already carries a peft attachment");

  try {
    switch (man.peft_mode) {
      case PeftMode::kFull:
        break;
      case PeftMode::kLora:
        OT_CHECK(man.lora.has_value(), BundleError,
                 "lora return lacks its hyperparameters");
        attach_lora(stack.adapter, *man.lora, /*seed=*/0);
        break;
      case PeftMode::kBottleneck:
        OT_CHECK(man.bottleneck.has_value(), BundleError,
                 "bottleneck return lacks its hyperparameters");
        attach_bottleneck(stack.adapter, *man.bottleneck, /*seed=*/0);
        break;
      case PeftMode::kBitfit:
        attach_bitfit(stack.adapter);
        break;
    }
  } catch (const ContractError& e) {
    OT_THROW(BundleError, "inconsistent return manifest: " << e.what());
  }

  NamedParams<float> expected;
  for (const auto& [name, t] : adapter_named_params(stack.adapter))
    if (t.requires_grad()) expected.emplace_back(name, t);
  overlay_exact(ret.manifest.index, ret.payload, expected, "return bundle");
}

// --- checkpoints -------------------------------------------------------------

void save_model_checkpoint(const std::string& path,
                           const TransformerModel<float>& model) {
  model.config.validate();
  std::vector<TensorIndexEntry> index;
  std::vector<float> payload;
  json trainable = json::array();
  for (const auto& [name, t] : named_params(model)) {
    append_tensor(index, payload, name, t);
    if (t.requires_grad()) trainable.push_back(name);
  }
  json j;
  j["config"] = config_to_json(model.config);
  j["format_version"] = 1;
  j["index"] = index_to_json(index);
  j["kind"] = "model";
  j["payload_hash"] = sha256_hex_f32(payload);
  j["trainable"] = std::move(trainable);
  write_container(path, kCkptMagic, j.dump(), payload);
}

namespace {

struct CkptManifest {
  std::string kind;
  ModelConfig config;
  std::optional<EmulatorSpec> spec;
  int64_t n_blocks = 0;
  std::vector<TensorIndexEntry> index;
  std::vector<std::string> trainable;
  std::string payload_hash;
};

CkptManifest parse_checkpoint_manifest(const std::string& text) {
  CkptManifest m;
  try {
    const json j = json::parse(text);
    OT_CHECK(j.at("format_version").get<int>() == 1, BundleError,
             "unsupported checkpoint format version");
    m.kind = j.at("kind").get<std::string>();
    m.config = config_from_json(j.at("config"));
    m.index = index_from_json(j.at("index"));
    m.payload_hash = j.at("payload_hash").get<std::string>();
    if (j.contains("spec")) m.spec = spec_from_json(j.at("spec"));
    if (j.contains("n_blocks")) m.n_blocks = j.at("n_blocks").get<int64_t>();
    if (j.contains("trainable"))
      m.trainable = j.at("trainable").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    OT_THROW(BundleError, "malformed checkpoint manifest: " << e.what());
  }
  try {
    m.config.validate();
  } catch (const Error& e) {
    OT_THROW(BundleError, "inconsistent checkpoint manifest: " << e.what());
  }
  return m;
}

}  // namespace

TransformerModel<float> load_model_checkpoint(const std::string& path) {
  RawContainer raw = read_container(path, kCkptMagic, "checkpoint");
  CkptManifest man = parse_checkpoint_manifest(raw.manifest);
  OT_CHECK(man.kind == "model", BundleError,
           "'" << path << "' holds a " << man.kind
               << " checkpoint, not a model");
  validate_index(man.index, raw.payload, man.payload_hash);

  const ModelConfig& c = man.config;
  TransformerModel<float> m;
  m.config = c;
  m.tok_embed = Tensor<float>::zeros({c.vocab_size, c.d_model}, false);
  m.pos_embed = Tensor<float>::zeros({c.max_seq_len, c.d_model}, false);
  for (int64_t i = 0; i < c.n_layers; ++i) m.blocks.push_back(blank_block(c));
  m.final_norm_gain = Tensor<float>::zeros({c.d_model}, false);
  m.final_norm_bias = Tensor<float>::zeros({c.d_model}, false);
  if (!c.tie_embeddings)
    m.lm_head = Tensor<float>::zeros({c.vocab_size, c.d_model}, false);

  NamedParams<float> expected = named_params(m);
  overlay_exact(man.index, raw.payload, expected, "checkpoint");
  std::map<std::string, Tensor<float>*> by_name;
  for (auto& [name, t] : expected) by_name.emplace(name, &t);
  for (const std::string& name : man.trainable) {
    auto it = by_name.find(name);
    OT_CHECK(it != by_name.end(), BundleError,
             "trainable list names unknown tensor '" << name << "'");
    it->second->set_requires_grad(true);
  }
  return m;
}

void save_emulator_checkpoint(
    const std::string& path, const ModelConfig& config,
    const EmulatorSpec& spec,
    const std::vector<TransformerBlock<float>>& blocks) {
  config.validate();
  spec.validate();
  std::vector<TensorIndexEntry> index;
  std::vector<float> payload;
  NamedParams<float> params;
  for (size_t j = 0; j < blocks.size(); ++j)
    block_params(blocks[j], "emulator." + std::to_string(j), params);
  for (const auto& [name, t] : params) append_tensor(index, payload, name, t);
  json j;
  j["config"] = config_to_json(config);
  j["format_version"] = 1;
  j["index"] = index_to_json(index);
  j["kind"] = "emulator";
  j["n_blocks"] = static_cast<int64_t>(blocks.size());
  j["payload_hash"] = sha256_hex_f32(payload);
  j["spec"] = spec_to_json(spec);
  write_container(path, kCkptMagic, j.dump(), payload);
}

EmulatorCheckpoint load_emulator_checkpoint(const std::string& path) {
  RawContainer raw = read_container(path, kCkptMagic, "checkpoint");
  CkptManifest man = parse_checkpoint_manifest(raw.manifest);
  OT_CHECK(man.kind == "emulator", BundleError,
           "'" << path << "' holds a " << man.kind
               << " checkpoint, not an emulator");
  OT_CHECK(man.spec.has_value(), BundleError,
           "emulator checkpoint lacks its spec");
  OT_CHECK(man.n_blocks > 0, BundleError,
           "emulator checkpoint declares no blocks");
  validate_index(man.index, raw.payload, man.payload_hash);

  EmulatorCheckpoint out;
  out.config = man.config;
  out.spec = *man.spec;
  NamedParams<float> expected;
  for (int64_t j = 0; j < man.n_blocks; ++j) {
    out.blocks.push_back(blank_block(man.config));
    block_params(out.blocks.back(), "emulator." + std::to_string(j), expected);
  }
  overlay_exact(man.index, raw.payload, expected, "checkpoint");
  for (auto& b : out.blocks) set_block_trainable(b, false);
  return out;
}

}  // namespace ot
