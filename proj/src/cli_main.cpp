// Command-line frontend. Subcommands are split by role: `owner` stages work
// on private checkpoints in a work directory and produce the shippable
// package, `user` stages accept only bundle files (never a full model), and
// `experiment` drives the measurement and accounting pipelines. Every stage
// rewrites its artifact deterministically and prints one machine-readable
// status line on success.
#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ot/accounting.hpp"
#include "ot/bundle.hpp"
#include "ot/checkpoint.hpp"
#include "ot/experiment.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;  // std::map-backed: keys serialize sorted
using namespace ot;

namespace {

// ---------------------------------------------------------------------------
// Run configuration: one declarative file, every field defaulted, flags win.
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string preset = "toy";
  std::string model_id = "toy";
  uint64_t seed = 0;
  int64_t n_bottom = 2, n_top = 2;
  std::string emu_method = "layer-drop";
  int64_t emu_k = 2;
  double emu_sparsity = 0.5;
  int emu_bits = 8;
  FinetuneOptions pretrain;  // owner init budget
  DistillOptions distill;
  FinetuneOptions tune;  // downstream budget
  std::vector<double> lr_grid;
  std::string peft = "full";
  int64_t lora_rank = 4;
  double lora_alpha = 4.0;
  int64_t bottleneck_dim = 64;
  int64_t eval_seq_len = 256, eval_batch = 4;
  std::string pretrain_corpus = "data/pretrain.txt";
  std::string downstream_corpus = "data/downstream.txt";
  std::vector<uint64_t> seeds = {0, 1, 2};
  double train_frac = 0.9;
  // Whether a sequence length was written down (config or flag) rather than
  // defaulted; defaulted lengths shrink to the artifact's real window.
  bool pretrain_seq_explicit = false, distill_seq_explicit = false,
       tune_seq_explicit = false, eval_seq_explicit = false;

  RunConfig() {
    pretrain.epochs = 1;
    pretrain.steps_per_epoch = 50;
    pretrain.lr = 1e-3;
    pretrain.warmup_steps = 10;
  }
};

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const char* where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return key == a;
        }) == allowed.end())
      OT_THROW(ContractError,
               "unknown key '" << key << "' in config section '" << where
                               << "'");
  }
}

template <class T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_budget(const json& j, const char* where, FinetuneOptions& o) {
  check_keys(j,
             {"epochs", "steps_per_epoch", "batch_size", "seq_len", "lr",
              "lr_min_frac", "warmup_steps"},
             where);
  get_to(j, "epochs", o.epochs);
  get_to(j, "steps_per_epoch", o.steps_per_epoch);
  get_to(j, "batch_size", o.batch_size);
  get_to(j, "seq_len", o.seq_len);
  get_to(j, "lr", o.lr);
  get_to(j, "lr_min_frac", o.lr_min_frac);
  get_to(j, "warmup_steps", o.warmup_steps);
}

// Loads the declarative config (or pure defaults when path is empty). The
// preset decides the default sequence length, so a flag-level preset
// override must be known before the file's own sections apply.
RunConfig load_run_config(const std::string& path,
                          const std::string& preset_override = "") {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream f(path);
    OT_CHECK(f.good(), ContractError,
             "cannot open config file '" << path << "'");
    try {
      f >> j;
    } catch (const json::exception& e) {
      OT_THROW(ContractError,
               "config file '" << path << "' is not valid JSON: " << e.what());
    }
    OT_CHECK(j.is_object(), ContractError,
             "config file '" << path << "' must hold a JSON object");
  }
  check_keys(j,
             {"preset", "model_id", "seed", "plan", "emulator", "pretrain",
              "distill", "tune", "lr_grid", "peft", "eval", "paths", "seeds",
              "train_frac"},
             "top level");

  RunConfig rc;
  get_to(j, "preset", rc.preset);
  if (!preset_override.empty()) rc.preset = preset_override;
  rc.model_id = rc.preset;
  get_to(j, "model_id", rc.model_id);
  get_to(j, "seed", rc.seed);
  get_to(j, "train_frac", rc.train_frac);
  get_to(j, "seeds", rc.seeds);
  get_to(j, "lr_grid", rc.lr_grid);

  // Sequence lengths default to the preset's window (capped at 256) so small
  // presets run without further configuration.
  const ModelConfig probe = preset_config(rc.preset);
  const int64_t cap = std::min<int64_t>(256, probe.max_seq_len);
  rc.pretrain.seq_len = rc.distill.seq_len = rc.tune.seq_len = cap;
  rc.eval_seq_len = cap;

  if (j.contains("plan")) {
    const json& p = j.at("plan");
    check_keys(p, {"n_bottom", "n_top"}, "plan");
    get_to(p, "n_bottom", rc.n_bottom);
    get_to(p, "n_top", rc.n_top);
  }
  if (j.contains("emulator")) {
    const json& p = j.at("emulator");
    check_keys(p, {"method", "k", "sparsity", "bits"}, "emulator");
    get_to(p, "method", rc.emu_method);
    get_to(p, "k", rc.emu_k);
    get_to(p, "sparsity", rc.emu_sparsity);
    get_to(p, "bits", rc.emu_bits);
  }
  if (j.contains("pretrain")) {
    read_budget(j.at("pretrain"), "pretrain", rc.pretrain);
    rc.pretrain_seq_explicit = j.at("pretrain").contains("seq_len");
  }
  if (j.contains("tune")) {
    read_budget(j.at("tune"), "tune", rc.tune);
    rc.tune_seq_explicit = j.at("tune").contains("seq_len");
  }
  if (j.contains("distill")) {
    const json& p = j.at("distill");
    check_keys(p, {"steps", "batch_size", "seq_len", "lr", "lr_min",
                   "warmup_steps"},
               "distill");
    rc.distill_seq_explicit = p.contains("seq_len");
    get_to(p, "steps", rc.distill.steps);
    get_to(p, "batch_size", rc.distill.batch_size);
    get_to(p, "seq_len", rc.distill.seq_len);
    get_to(p, "lr", rc.distill.schedule.lr_max);
    get_to(p, "lr_min", rc.distill.schedule.lr_min);
    get_to(p, "warmup_steps", rc.distill.schedule.warmup_steps);
  }
  if (j.contains("peft")) {
    const json& p = j.at("peft");
    check_keys(p, {"mode", "rank", "alpha", "dim"}, "peft");
    get_to(p, "mode", rc.peft);
    get_to(p, "rank", rc.lora_rank);
    get_to(p, "alpha", rc.lora_alpha);
    get_to(p, "dim", rc.bottleneck_dim);
  }
  if (j.contains("eval")) {
    const json& p = j.at("eval");
    check_keys(p, {"seq_len", "batch_size"}, "eval");
    rc.eval_seq_explicit = p.contains("seq_len");
    get_to(p, "seq_len", rc.eval_seq_len);
    get_to(p, "batch_size", rc.eval_batch);
  }
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    check_keys(p, {"pretrain_corpus", "downstream_corpus"}, "paths");
    get_to(p, "pretrain_corpus", rc.pretrain_corpus);
    get_to(p, "downstream_corpus", rc.downstream_corpus);
  }
  return rc;
}

// ---------------------------------------------------------------------------
// Workspace layout and shared plumbing
// ---------------------------------------------------------------------------

struct Globals {
  std::string workdir = ".";
  std::string config;
};

struct Workspace {
  fs::path dir;
  fs::path model() const { return dir / "model.otc"; }
  fs::path split_record() const { return dir / "split.json"; }
  fs::path emulator() const { return dir / "emulator.otc"; }
  fs::path package() const { return dir / "package.otb"; }
  fs::path adapter() const { return dir / "adapter.otb"; }
  fs::path ret() const { return dir / "return.otb"; }
  fs::path plugged() const { return dir / "plugged.otc"; }
};

Workspace workspace(const Globals& g) {
  Workspace ws{fs::path(g.workdir)};
  fs::create_directories(ws.dir);
  return ws;
}

void require_artifact(const fs::path& p, const char* what,
                      const char* stage) {
  OT_CHECK(fs::exists(p), ContractError,
           "missing " << what << " '" << p.string() << "': run `offtune "
                      << stage << "` first");
}

// User commands accept only bundle files; anything else (in particular a
// full-model checkpoint) is refused before a byte of it is interpreted.
void ensure_bundle_path(const fs::path& p, const char* what) {
  OT_CHECK(fs::exists(p), ContractError,
           "missing " << what << " '" << p.string() << "'");
  std::ifstream f(p, std::ios::binary);
  char magic[4] = {};
  f.read(magic, 4);
  OT_CHECK(f.gcount() == 4 && std::string(magic, 4) == "OTB1", ContractError,
           "user commands accept only bundle artifacts: '"
               << p.string()
               << "' is not a bundle (full-model files never leave the "
                  "owner)");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void status_line(
    const std::string& command,
    const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ostringstream os;
  os << "status=ok command=" << command;
  for (const auto& [k, v] : kv) {
    os << ' ' << k << '=';
    if (v.find(' ') == std::string::npos)
      os << v;
    else
      os << '"' << v << '"';
  }
  std::cout << os.str() << '\n';
}

bool same_config(const ModelConfig& a, const ModelConfig& b) {
  return a.n_layers == b.n_layers && a.d_model == b.d_model &&
         a.n_heads == b.n_heads && a.d_ff == b.d_ff &&
         a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len &&
         a.tie_embeddings == b.tie_embeddings && a.arch == b.arch;
}

void check_window(int64_t seq_len, const ModelConfig& c) {
  OT_CHECK(seq_len <= c.max_seq_len, ContractError,
           "sequence length " << seq_len << " exceeds the preset's window of "
                              << c.max_seq_len);
}

// Defaulted lengths follow the artifact's actual window; lengths the user
// wrote down are honored or rejected, never silently shrunk.
void resolve_window(int64_t& seq_len, bool explicit_value,
                    const ModelConfig& c) {
  if (!explicit_value) seq_len = std::min(seq_len, c.max_seq_len);
  check_window(seq_len, c);
}

// --- split record (plan + the checkpoint hash it was made against) ---------

struct SplitRecord {
  SplitPlan plan;
  std::string model_hash;
  int64_t m = 0;
};

void write_split_record(const fs::path& path, const SplitRecord& r) {
  json j;
  j["m"] = r.m;
  j["model_hash"] = r.model_hash;
  j["n_bottom"] = r.plan.n_bottom;
  j["n_top"] = r.plan.n_top;
  write_text_file(path.string(), j.dump() + "\n");
}

SplitRecord read_split_record(const fs::path& path) {
  std::ifstream f(path);
  OT_CHECK(f.good(), ContractError,
           "cannot open split record '" << path.string() << "'");
  SplitRecord r;
  try {
    json j;
    f >> j;
    r.m = j.at("m").get<int64_t>();
    r.model_hash = j.at("model_hash").get<std::string>();
    r.plan.n_bottom = j.at("n_bottom").get<int64_t>();
    r.plan.n_top = j.at("n_top").get<int64_t>();
  } catch (const json::exception& e) {
    OT_THROW(ContractError, "split record '" << path.string()
                                             << "' is malformed: " << e.what());
  }
  return r;
}

// Stages downstream of `owner split` must see the same checkpoint bytes the
// plan was derived from.
void check_fresh(const SplitRecord& rec, const TransformerModel<float>& m) {
  const std::string h = model_weight_hash(m);
  OT_CHECK(rec.model_hash == h, ContractError,
           "the model checkpoint changed since the split plan was recorded "
           "(expected "
               << rec.model_hash.substr(0, 12) << "..., found "
               << h.substr(0, 12) << "...): run `offtune owner split` again");
}

std::string join_indices(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

EmulatorMethod method_from_cli(const std::string& s) {
  std::string norm = s;
  std::replace(norm.begin(), norm.end(), '-', '_');
  if (norm == "layer_drop") return EmulatorMethod::kLayerDrop;
  if (norm == "magnitude_prune") return EmulatorMethod::kMagnitudePrune;
  if (norm == "quantize") return EmulatorMethod::kQuantize;
  OT_THROW(SpecError, "unknown emulator method '" << s << "'");
}

std::vector<double> parse_lr_grid(const std::string& s) {
  if (s == "default")
    return {kDefaultLrGrid.begin(), kDefaultLrGrid.end()};
  std::vector<double> grid;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      grid.push_back(std::stod(item, &used));
      OT_CHECK(used == item.size(), ContractError, "");
    } catch (const std::exception&) {
      OT_THROW(ContractError, "learning-rate grid entry '"
                                  << item
                                  << "' is not a number (use 'default' or a "
                                     "comma-separated list)");
    }
  }
  OT_CHECK(!grid.empty(), ContractError, "empty learning-rate grid");
  return grid;
}

// ---------------------------------------------------------------------------
// owner commands
// ---------------------------------------------------------------------------

struct InitArgs {
  std::string preset, corpus;
  uint64_t seed = 0;
  int64_t pretrain_steps = 0, pretrain_epochs = 0;
};

void run_owner_init(const CLI::App& c, const InitArgs& a, const Globals& g) {
  RunConfig rc = load_run_config(
      g.config, c.count("--preset") ? a.preset : std::string{});
  if (c.count("--seed")) rc.seed = a.seed;
  if (c.count("--corpus")) rc.pretrain_corpus = a.corpus;
  if (c.count("--pretrain-steps")) rc.pretrain.steps_per_epoch = a.pretrain_steps;
  if (c.count("--pretrain-epochs")) rc.pretrain.epochs = a.pretrain_epochs;

  const ModelConfig config = preset_config(rc.preset);
  auto model = init_model<float>(config, rc.seed);
  int64_t steps = 0;
  if (rc.pretrain.epochs > 0 && rc.pretrain.steps_per_epoch != 0) {
    resolve_window(rc.pretrain.seq_len, rc.pretrain_seq_explicit, config);
    const Corpus corpus = load_corpus(rc.pretrain_corpus, rc.train_frac);
    FinetuneOptions o = rc.pretrain;
    o.seed = rc.seed;
    steps = train_full(model, corpus, o).steps;
  }
  const Workspace ws = workspace(g);
  save_model_checkpoint(ws.model().string(), model);
  status_line("owner.init",
              {{"artifact", ws.model().string()},
               {"preset", rc.preset},
               {"seed", std::to_string(rc.seed)},
               {"pretrain_steps", std::to_string(steps)},
               {"hash", model_weight_hash(model).substr(0, 12)}});
}

void run_owner_split(const CLI::App& c, const std::string& plan_arg,
                     const Globals& g) {
  RunConfig rc = load_run_config(g.config);
  SplitPlan plan{rc.n_bottom, rc.n_top, false, false};
  if (c.count("--plan")) {
    const auto plus = plan_arg.find('+');
    plan.n_bottom = std::stoll(plan_arg.substr(0, plus));
    plan.n_top = std::stoll(plan_arg.substr(plus + 1));
  }
  const Workspace ws = workspace(g);
  require_artifact(ws.model(), "model checkpoint", "owner init");
  const auto model = load_model_checkpoint(ws.model().string());
  plan.validate(model.config.n_layers);

  SplitRecord rec;
  rec.plan = plan;
  rec.model_hash = model_weight_hash(model);
  rec.m = model.config.n_layers - plan.n_bottom - plan.n_top;
  write_split_record(ws.split_record(), rec);
  status_line("owner.split",
              {{"artifact", ws.split_record().string()},
               {"plan", std::to_string(plan.n_bottom) + "+" +
                            std::to_string(plan.n_top)},
               {"m", std::to_string(rec.m)}});
}

struct EmulatorArgs {
  std::string method;
  int64_t k = 0;
  double sparsity = 0.0;
  int bits = 0;
};

void run_owner_build_emulator(const CLI::App& c, const EmulatorArgs& a,
                              const Globals& g) {
  RunConfig rc = load_run_config(g.config);
  if (c.count("--method")) rc.emu_method = a.method;
  if (c.count("--k")) rc.emu_k = a.k;
  if (c.count("--sparsity")) rc.emu_sparsity = a.sparsity;
  if (c.count("--bits")) rc.emu_bits = a.bits;

  const Workspace ws = workspace(g);
  require_artifact(ws.model(), "model checkpoint", "owner init");
  require_artifact(ws.split_record(), "split record", "owner split");
  auto model = load_model_checkpoint(ws.model().string());
  const SplitRecord rec = read_split_record(ws.split_record());
  check_fresh(rec, model);
  auto sm = split(model, rec.plan);
  const int64_t m = static_cast<int64_t>(sm.middle.size());

  EmulatorSpec spec;
  spec.method = method_from_cli(rc.emu_method);
  std::vector<std::pair<std::string, std::string>> extra;
  switch (spec.method) {
    case EmulatorMethod::kLayerDrop:
    case EmulatorMethod::kDistilled:
      spec.plan = uniform_layer_drop(m, rc.emu_k);
      extra = {{"k", std::to_string(rc.emu_k)},
               {"retained", join_indices(spec.plan->retained_indices)}};
      break;
    case EmulatorMethod::kMagnitudePrune:
      spec.sparsity = rc.emu_sparsity;
      extra = {{"sparsity", fmt(rc.emu_sparsity)}};
      break;
    case EmulatorMethod::kQuantize:
      spec.bits = rc.emu_bits;
      extra = {{"bits", std::to_string(rc.emu_bits)}};
      break;
  }
  auto blocks = build_emulator(sm, spec);
  save_emulator_checkpoint(ws.emulator().string(), model.config, spec, blocks);

  std::vector<std::pair<std::string, std::string>> kv = {
      {"artifact", ws.emulator().string()},
      {"method", emulator_method_name(spec.method)},
      {"m", std::to_string(m)},
      {"blocks", std::to_string(blocks.size())}};
  kv.insert(kv.end(), extra.begin(), extra.end());
  status_line("owner.build-emulator", kv);
}

struct DistillArgs {
  int64_t steps = 0, batch = 0, seq = 0, warmup = 0;
  double lr = 0.0;
  std::string corpus;
};

void run_owner_distill(const CLI::App& c, const DistillArgs& a,
                       const Globals& g) {
  RunConfig rc = load_run_config(g.config);
  if (c.count("--steps")) rc.distill.steps = a.steps;
  if (c.count("--batch-size")) rc.distill.batch_size = a.batch;
  if (c.count("--seq-len")) {
    rc.distill.seq_len = a.seq;
    rc.distill_seq_explicit = true;
  }
  if (c.count("--lr")) rc.distill.schedule.lr_max = a.lr;
  if (c.count("--warmup")) rc.distill.schedule.warmup_steps = a.warmup;
  if (c.count("--corpus")) rc.pretrain_corpus = a.corpus;

  const Workspace ws = workspace(g);
  require_artifact(ws.model(), "model checkpoint", "owner init");
  require_artifact(ws.split_record(), "split record", "owner split");
  require_artifact(ws.emulator(), "emulator checkpoint",
                   "owner build-emulator");
  auto model = load_model_checkpoint(ws.model().string());
  const SplitRecord rec = read_split_record(ws.split_record());
  check_fresh(rec, model);
  auto emu = load_emulator_checkpoint(ws.emulator().string());
  OT_CHECK(same_config(emu.config, model.config), ContractError,
           "emulator checkpoint was built for a different model "
           "configuration: run `offtune owner build-emulator` again");
  OT_CHECK(emu.spec.method == EmulatorMethod::kLayerDrop ||
               emu.spec.method == EmulatorMethod::kDistilled,
           SpecError, "distillation is defined for layer-dropped emulators");
  resolve_window(rc.distill.seq_len, rc.distill_seq_explicit, model.config);

  auto sm = split(model, rec.plan);
  DistillOptions d = rc.distill;
  d.seed = rc.seed;
  d.schedule.total_steps = std::max<int64_t>(d.steps, 1);
  d.schedule.warmup_steps = std::min(d.schedule.warmup_steps, d.steps);
  d.log_path = (ws.dir / "distill_log.csv").string();
  const Corpus corpus = load_corpus(rc.pretrain_corpus, rc.train_frac);
  const DistillLog log = distill_emulator(sm, emu.blocks, corpus, d);

  if (d.steps > 0) emu.spec.method = EmulatorMethod::kDistilled;
  save_emulator_checkpoint(ws.emulator().string(), model.config, emu.spec,
                           emu.blocks);
  status_line("owner.distill",
              {{"artifact", ws.emulator().string()},
               {"steps", std::to_string(log.size())},
               {"first_loss", log.empty() ? "nan" : fmt(log.front())},
               {"final_loss", log.empty() ? "nan" : fmt(log.back())},
               {"log", d.log_path}});
}

void run_owner_package(const CLI::App& c, const std::string& model_id,
                       const std::string& out, const Globals& g) {
  RunConfig rc = load_run_config(g.config);
  if (c.count("--model-id")) rc.model_id = model_id;

  const Workspace ws = workspace(g);
  require_artifact(ws.model(), "model checkpoint", "owner init");
  require_artifact(ws.split_record(), "split record", "owner split");
  require_artifact(ws.emulator(), "emulator checkpoint",
                   "owner build-emulator");
  auto model = load_model_checkpoint(ws.model().string());
  const SplitRecord rec = read_split_record(ws.split_record());
  check_fresh(rec, model);
  auto emu = load_emulator_checkpoint(ws.emulator().string());
  OT_CHECK(same_config(emu.config, model.config), ContractError,
           "emulator checkpoint was built for a different model "
           "configuration: run `offtune owner build-emulator` again");

  auto sm = split(model, rec.plan);
  const ArtifactBundle bundle =
      package_owner(sm, emu.blocks, emu.spec, rc.model_id);
  const fs::path path = out.empty() ? ws.package() : fs::path(out);
  write_bundle(path.string(), bundle);
  status_line("owner.package",
              {{"artifact", path.string()},
               {"model_id", rc.model_id},
               {"tensors", std::to_string(bundle.manifest.index.size())},
               {"payload_bytes",
                std::to_string(bundle.payload.size() * sizeof(float))}});
}

void run_owner_plug_in(const std::string& ret_path, const std::string& out,
                       const Globals& g) {
  const Workspace ws = workspace(g);
  require_artifact(ws.model(), "model checkpoint", "owner init");
  const fs::path rp = ret_path.empty() ? ws.ret() : fs::path(ret_path);
  require_artifact(rp, "return bundle", "user package-return");
  const auto model = load_model_checkpoint(ws.model().string());
  const ArtifactBundle bundle = read_bundle(rp.string());
  const auto plugged = verify_and_plug(model, bundle);
  const fs::path path = out.empty() ? ws.plugged() : fs::path(out);
  save_model_checkpoint(path.string(), plugged);
  const std::string before = model_weight_hash(model);
  const std::string after = model_weight_hash(plugged);
  status_line("owner.plug-in", {{"artifact", path.string()},
                                {"hash", after.substr(0, 12)},
                                {"unchanged", before == after ? "true"
                                                              : "false"}});
}

struct EvalArgs {
  std::string corpus, target = "model", out;
  int64_t seq = 0, batch = 0;
};

void run_owner_eval(const CLI::App& c, const EvalArgs& a, const Globals& g) {
  RunConfig rc = load_run_config(g.config);
  if (c.count("--corpus")) rc.downstream_corpus = a.corpus;
  if (c.count("--seq-len")) {
    rc.eval_seq_len = a.seq;
    rc.eval_seq_explicit = true;
  }
  if (c.count("--batch-size")) rc.eval_batch = a.batch;

  const Workspace ws = workspace(g);
  const bool on_plugged = a.target == "plugged";
  const fs::path mp = on_plugged ? ws.plugged() : ws.model();
  require_artifact(mp, on_plugged ? "plugged checkpoint" : "model checkpoint",
                   on_plugged ? "owner plug-in" : "owner init");
  const auto model = load_model_checkpoint(mp.string());
  resolve_window(rc.eval_seq_len, rc.eval_seq_explicit, model.config);
  const Corpus corpus = load_corpus(rc.downstream_corpus, rc.train_frac);
  const double ppl = perplexity_full(model, val_tokens(corpus),
                                     rc.eval_seq_len, rc.eval_batch);

  std::ostringstream csv;
  csv << "target,corpus,split,seq_len,batch_size,ppl\n";
  char row[256];
  std::snprintf(row, sizeof(row), "%s,%s,val,%lld,%lld,%.17g\n",
                a.target.c_str(), corpus.name.c_str(),
                static_cast<long long>(rc.eval_seq_len),
                static_cast<long long>(rc.eval_batch), ppl);
  csv << row;
  const fs::path path =
      a.out.empty() ? ws.dir / "eval_owner.csv" : fs::path(a.out);
  write_text_file(path.string(), csv.str());
  status_line("owner.eval", {{"artifact", path.string()},
                             {"target", a.target},
                             {"ppl", fmt(ppl)}});
}

// ---------------------------------------------------------------------------
// user commands (bundles only)
// ---------------------------------------------------------------------------

struct FinetuneArgs {
  std::string package, corpus, out, lr_grid, peft;
  int64_t epochs = 0, steps_per_epoch = 0, steps = 0, batch = 0, seq = 0,
          warmup = 0, rank = 0, dim = 0;
  double lr = 0.0, alpha = 0.0;
  uint64_t seed = 0;
};

// Attaches the requested peft structure and reports the specs a return
// bundle must carry for it.
std::pair<std::optional<LoraSpec>, std::optional<BottleneckSpec>> attach_peft(
    AdapterWeights<float>& adapter, const RunConfig& rc, uint64_t seed) {
  if (rc.peft == "full") return {};
  if (rc.peft == "lora") {
    const LoraSpec spec{rc.lora_rank, rc.lora_alpha};
    attach_lora(adapter, spec, seed);
    return {spec, std::nullopt};
  }
  if (rc.peft == "bottleneck") {
    const BottleneckSpec spec{rc.bottleneck_dim};
    attach_bottleneck(adapter, spec, seed);
    return {std::nullopt, spec};
  }
  if (rc.peft == "bitfit") {
    attach_bitfit(adapter);
    return {};
  }
  OT_THROW(ContractError, "unknown peft mode '"
                              << rc.peft
                              << "' (expected full, lora, bottleneck, or "
                                 "bitfit)");
}

void run_user_finetune(const CLI::App& c, const FinetuneArgs& a,
                       const Globals& g) {
  RunConfig rc = load_run_config(g.config);
  if (c.count("--corpus")) rc.downstream_corpus = a.corpus;
  if (c.count("--epochs")) rc.tune.epochs = a.epochs;
  if (c.count("--steps-per-epoch")) rc.tune.steps_per_epoch = a.steps_per_epoch;
  if (c.count("--steps")) {  // shorthand: one epoch of exactly N steps
    rc.tune.epochs = a.steps == 0 ? 0 : 1;
    rc.tune.steps_per_epoch = std::max<int64_t>(a.steps, 1);
  }
  if (c.count("--batch-size")) rc.tune.batch_size = a.batch;
  if (c.count("--seq-len")) {
    rc.tune.seq_len = a.seq;
    rc.tune_seq_explicit = true;
  }
  if (c.count("--lr")) rc.tune.lr = a.lr;
  if (c.count("--warmup")) rc.tune.warmup_steps = a.warmup;
  if (c.count("--seed")) rc.seed = a.seed;
  if (c.count("--peft")) rc.peft = a.peft;
  if (c.count("--rank")) rc.lora_rank = a.rank;
  if (c.count("--alpha")) rc.lora_alpha = a.alpha;
  if (c.count("--dim")) rc.bottleneck_dim = a.dim;
  std::vector<double> grid = rc.lr_grid;
  if (c.count("--lr-grid")) grid = parse_lr_grid(a.lr_grid);

  const Workspace ws = workspace(g);
  const fs::path pkg = a.package.empty() ? ws.package() : fs::path(a.package);
  ensure_bundle_path(pkg, "owner package");
  const ArtifactBundle bundle = read_bundle(pkg.string());
  TuningStack<float> stack = unpack_owner(bundle);
  resolve_window(rc.tune.seq_len, rc.tune_seq_explicit, stack.config);

  FinetuneOptions t = rc.tune;
  t.seed = rc.seed;
  const auto [lora, bneck] = attach_peft(stack.adapter, rc, rc.seed);
  const Corpus corpus = load_corpus(rc.downstream_corpus, rc.train_frac);

  double chosen_lr = t.lr, val_nll = 0.0;
  size_t runs = 1;
  if (!grid.empty()) {
    const GridResult res = finetune_grid(stack, corpus, t, grid);
    std::ostringstream csv;
    csv << "lr,final_val_nll,best\n";
    for (size_t i = 0; i < res.points.size(); ++i) {
      char row[128];
      std::snprintf(row, sizeof(row), "%.17g,%.17g,%d\n", res.points[i].lr,
                    res.points[i].final_val_nll,
                    i == res.best_index ? 1 : 0);
      csv << row;
    }
    write_text_file((ws.dir / "lr_grid.csv").string(), csv.str());
    chosen_lr = res.points[res.best_index].lr;
    val_nll = res.points[res.best_index].final_val_nll;
    runs = res.points.size();
  } else {
    t.log_path = (ws.dir / "finetune_log.csv").string();
    const FinetuneResult res = finetune(stack, corpus, t);
    val_nll = res.final_val_nll;
  }

  const ArtifactBundle ret =
      package_return(stack.adapter, stack.config, bundle.manifest.model_id,
                     bundle.manifest.provenance, lora, bneck);
  const fs::path path = a.out.empty() ? ws.adapter() : fs::path(a.out);
  write_bundle(path.string(), ret);
  status_line("user.finetune",
              {{"artifact", path.string()},
               {"peft", rc.peft},
               {"runs", std::to_string(runs)},
               {"best_lr", fmt(chosen_lr)},
               {"val_nll", fmt(val_nll)},
               {"tensors", std::to_string(ret.manifest.index.size())}});
}

struct UserEvalArgs {
  std::string package, adapter, corpus, out;
  int64_t seq = 0, batch = 0;
};

void run_user_eval(const CLI::App& c, const UserEvalArgs& a,
                   const Globals& g) {
  RunConfig rc = load_run_config(g.config);
  if (c.count("--corpus")) rc.downstream_corpus = a.corpus;
  if (c.count("--seq-len")) {
    rc.eval_seq_len = a.seq;
    rc.eval_seq_explicit = true;
  }
  if (c.count("--batch-size")) rc.eval_batch = a.batch;

  const Workspace ws = workspace(g);
  const fs::path pkg = a.package.empty() ? ws.package() : fs::path(a.package);
  ensure_bundle_path(pkg, "owner package");
  const ArtifactBundle bundle = read_bundle(pkg.string());
  TuningStack<float> stack = unpack_owner(bundle);
  std::string adapter_state = "packaged";
  if (!a.adapter.empty()) {
    ensure_bundle_path(a.adapter, "adapter bundle");
    apply_return(stack, bundle.manifest, read_bundle(a.adapter));
    adapter_state = "tuned";
  }
  resolve_window(rc.eval_seq_len, rc.eval_seq_explicit, stack.config);
  const Corpus corpus = load_corpus(rc.downstream_corpus, rc.train_frac);
  const double ppl = perplexity(stack_logits_fn(stack), val_tokens(corpus),
                                rc.eval_seq_len, rc.eval_batch);

  std::ostringstream csv;
  csv << "adapter,corpus,split,seq_len,batch_size,ppl\n";
  char row[256];
  std::snprintf(row, sizeof(row), "%s,%s,val,%lld,%lld,%.17g\n",
                adapter_state.c_str(), corpus.name.c_str(),
                static_cast<long long>(rc.eval_seq_len),
                static_cast<long long>(rc.eval_batch), ppl);
  csv << row;
  const fs::path path =
      a.out.empty() ? ws.dir / "eval_user.csv" : fs::path(a.out);
  write_text_file(path.string(), csv.str());
  status_line("user.eval", {{"artifact", path.string()},
                            {"adapter", adapter_state},
                            {"ppl", fmt(ppl)}});
}

void run_user_package_return(const std::string& package,
                             const std::string& adapter,
                             const std::string& out, const Globals& g) {
  const Workspace ws = workspace(g);
  const fs::path pkg = package.empty() ? ws.package() : fs::path(package);
  const fs::path adp = adapter.empty() ? ws.adapter() : fs::path(adapter);
  ensure_bundle_path(pkg, "owner package");
  ensure_bundle_path(adp, "adapter bundle");
  const ArtifactBundle bundle = read_bundle(pkg.string());
  const ArtifactBundle ret = read_bundle(adp.string());
  // Full validation: rebuild the stack the return claims to fit and overlay.
  TuningStack<float> stack = unpack_owner(bundle);
  apply_return(stack, bundle.manifest, ret);
  const fs::path path = out.empty() ? ws.ret() : fs::path(out);
  write_bundle(path.string(), ret);
  status_line("user.package-return",
              {{"artifact", path.string()},
               {"tensors", std::to_string(ret.manifest.index.size())},
               {"payload_bytes",
                std::to_string(ret.payload.size() * sizeof(float))}});
}

// ---------------------------------------------------------------------------
// experiment commands
// ---------------------------------------------------------------------------

PipelineOptions pipeline_options(const RunConfig& rc,
                                 const ModelConfig& config) {
  PipelineOptions opt;
  opt.plan = SplitPlan{rc.n_bottom, rc.n_top, false, false};
  opt.plan.validate(config.n_layers);
  const int64_t m = config.n_layers - rc.n_bottom - rc.n_top;
  opt.spec.method = method_from_cli(rc.emu_method);
  switch (opt.spec.method) {
    case EmulatorMethod::kLayerDrop:
    case EmulatorMethod::kDistilled:
      opt.spec.plan = uniform_layer_drop(m, rc.emu_k);
      break;
    case EmulatorMethod::kMagnitudePrune:
      opt.spec.sparsity = rc.emu_sparsity;
      break;
    case EmulatorMethod::kQuantize:
      opt.spec.bits = rc.emu_bits;
      break;
  }
  opt.distill = rc.distill;
  opt.tune = rc.tune;
  opt.lr_grid = rc.lr_grid;
  opt.eval_seq_len = rc.eval_seq_len;
  opt.eval_batch = rc.eval_batch;
  opt.model_id = rc.model_id;
  return opt;
}

struct ExperimentArgs {
  std::vector<uint64_t> seeds;
  std::string axis, out, preset;
};

void run_experiment_four_metrics(const CLI::App& c, const ExperimentArgs& a,
                                 const Globals& g) {
  RunConfig rc = load_run_config(
      g.config, c.count("--preset") ? a.preset : std::string{});
  if (c.count("--seeds")) rc.seeds = a.seeds;
  OT_CHECK(!rc.seeds.empty(), ContractError, "need at least one seed");

  const ModelConfig config = preset_config(rc.preset);
  resolve_window(rc.pretrain.seq_len, rc.pretrain_seq_explicit, config);
  resolve_window(rc.distill.seq_len, rc.distill_seq_explicit, config);
  resolve_window(rc.tune.seq_len, rc.tune_seq_explicit, config);
  resolve_window(rc.eval_seq_len, rc.eval_seq_explicit, config);
  const PipelineOptions base_opt = pipeline_options(rc, config);
  const Corpus pre = load_corpus(rc.pretrain_corpus, rc.train_frac);
  const Corpus down = load_corpus(rc.downstream_corpus, rc.train_frac);

  std::vector<MetricsRecord> records;
  for (uint64_t seed : rc.seeds) {
    const auto base =
        make_pretrained_base<float>(config, seed, pre, rc.pretrain);
    PipelineOptions opt = base_opt;
    opt.seed = seed;
    records.push_back(four_metrics(base, pre, down, opt));
  }
  const Workspace ws = workspace(g);
  const fs::path path =
      a.out.empty() ? ws.dir / "metrics.csv" : fs::path(a.out);
  write_text_file(path.string(),
                  metrics_csv({records.data(), records.size()}));

  double zs = 0, em = 0, pl = 0, ft = 0;
  size_t ok = 0, failed = 0;
  for (const auto& r : records) {
    if (!r.failure.empty()) {
      ++failed;
      continue;
    }
    zs += r.zero_shot_ppl;
    em += r.emulator_ppl;
    pl += r.plug_in_ppl;
    ft += r.full_ft_ppl;
    ++ok;
  }
  const double n = ok ? static_cast<double>(ok) : 1.0;
  status_line("experiment.four-metrics",
              {{"artifact", path.string()},
               {"seeds", std::to_string(records.size())},
               {"failures", std::to_string(failed)},
               {"mean_zero_shot", fmt(zs / n)},
               {"mean_emulator", fmt(em / n)},
               {"mean_plug_in", fmt(pl / n)},
               {"mean_full_ft", fmt(ft / n)}});
}

void run_experiment_ablation(const CLI::App& c, const ExperimentArgs& a,
                             const Globals& g) {
  RunConfig rc = load_run_config(
      g.config, c.count("--preset") ? a.preset : std::string{});
  if (c.count("--seeds")) rc.seeds = a.seeds;
  OT_CHECK(!rc.seeds.empty(), ContractError, "need at least one seed");

  AblationAxis axis;
  if (a.axis == "adapter-position")
    axis = AblationAxis::kAdapterPosition;
  else if (a.axis == "compression-method")
    axis = AblationAxis::kCompressionMethod;
  else
    axis = AblationAxis::kDistillation;

  const ModelConfig config = preset_config(rc.preset);
  resolve_window(rc.pretrain.seq_len, rc.pretrain_seq_explicit, config);
  resolve_window(rc.distill.seq_len, rc.distill_seq_explicit, config);
  resolve_window(rc.tune.seq_len, rc.tune_seq_explicit, config);
  resolve_window(rc.eval_seq_len, rc.eval_seq_explicit, config);
  const PipelineOptions base_opt = pipeline_options(rc, config);
  const Corpus pre = load_corpus(rc.pretrain_corpus, rc.train_frac);
  const Corpus down = load_corpus(rc.downstream_corpus, rc.train_frac);

  std::vector<TransformerModel<float>> bases;
  for (uint64_t seed : rc.seeds)
    bases.push_back(make_pretrained_base<float>(config, seed, pre, rc.pretrain));
  const AblationReport report = run_ablation<float>(
      axis, {bases.data(), bases.size()}, {rc.seeds.data(), rc.seeds.size()},
      pre, down, base_opt);

  const Workspace ws = workspace(g);
  const fs::path path =
      a.out.empty()
          ? ws.dir / ("ablation_" + std::string(ablation_axis_name(axis)) +
                      ".csv")
          : fs::path(a.out);
  write_text_file(path.string(), ablation_csv(report));

  std::vector<std::pair<std::string, std::string>> kv = {
      {"artifact", path.string()},
      {"axis", ablation_axis_name(axis)},
      {"points", std::to_string(report.labels.size())},
      {"seeds", std::to_string(rc.seeds.size())}};
  for (size_t p = 0; p < report.labels.size(); ++p)
    kv.emplace_back("mean_plug_in." + report.labels[p],
                    fmt(point_mean(report, p, &MetricsRecord::plug_in_ppl)));
  status_line("experiment.ablation", kv);
}

struct AccountingArgs {
  std::string preset, plan, out;
  int64_t rank = 0, dim = 0, k = 0;
};

void run_experiment_accounting(const CLI::App& c, const AccountingArgs& a,
                               const Globals& g) {
  RunConfig rc = load_run_config(
      g.config, c.count("--preset") ? a.preset : std::string{});
  if (c.count("--rank")) rc.lora_rank = a.rank;
  if (c.count("--dim")) rc.bottleneck_dim = a.dim;
  if (c.count("--k")) rc.emu_k = a.k;
  SplitPlan plan{rc.n_bottom, rc.n_top, false, false};
  if (c.count("--plan")) {
    const auto plus = a.plan.find('+');
    plan.n_bottom = std::stoll(a.plan.substr(0, plus));
    plan.n_top = std::stoll(a.plan.substr(plus + 1));
  }

  const ModelConfig config = preset_config(rc.preset);
  plan.validate(config.n_layers);
  const LoraSpec lora{rc.lora_rank, rc.lora_alpha};
  const BottleneckSpec bneck{rc.bottleneck_dim};

  std::ostringstream csv;
  csv << "quantity,params,bytes\n";
  auto emit = [&csv](const std::string& name, int64_t params) {
    csv << name << ',' << params << ',' << params * 4 << '\n';
  };
  const auto full = count_params(config, plan, TuneMode::kFullModel);
  emit("total", full.total_params);
  emit("trainable.ft", full.trainable_params);
  const auto adapter = count_params(config, plan, TuneMode::kAdapterFull);
  emit("trainable.adapter", adapter.trainable_params);
  const auto lrep =
      count_params(config, plan, TuneMode::kAdapterLora, lora, bneck);
  emit("trainable.lora", lrep.trainable_params);
  const auto brep =
      count_params(config, plan, TuneMode::kAdapterBottleneck, lora, bneck);
  emit("trainable.bottleneck", brep.trainable_params);
  const auto bitfit = count_params(config, plan, TuneMode::kAdapterBitfit);
  emit("trainable.bitfit", bitfit.trainable_params);

  const int64_t m = config.n_layers - plan.n_bottom - plan.n_top;
  EmulatorSpec spec;
  spec.method = EmulatorMethod::kLayerDrop;
  spec.plan = uniform_layer_drop(m, rc.emu_k);
  const auto shipped = transmitted_footprint(plan, spec, config);
  emit("transmitted.package", shipped.transmitted_params);

  const Workspace ws = workspace(g);
  const fs::path path =
      a.out.empty() ? ws.dir / "accounting.csv" : fs::path(a.out);
  write_text_file(path.string(), csv.str());
  status_line("experiment.accounting",
              {{"artifact", path.string()},
               {"preset", rc.preset},
               {"ft", std::to_string(full.trainable_params)},
               {"adapter", std::to_string(adapter.trainable_params)},
               {"lora", std::to_string(lrep.trainable_params)},
               {"bottleneck", std::to_string(brep.trainable_params)},
               {"bitfit", std::to_string(bitfit.trainable_params)},
               {"transmitted", std::to_string(shipped.transmitted_params)}});
}

// ---------------------------------------------------------------------------
// wiring
// ---------------------------------------------------------------------------

const CLI::Validator kPlanFormat(
    [](std::string& s) -> std::string {
      const auto plus = s.find('+');
      if (plus == std::string::npos || plus == 0 || plus + 1 == s.size())
        return "plan must look like '2+2'";
      for (size_t i = 0; i < s.size(); ++i)
        if (i != plus && !std::isdigit(static_cast<unsigned char>(s[i])))
          return "plan must look like '2+2'";
      return {};
    },
    "PLAN");

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"split sandwich-adapter tuning over compressed emulators"};
  app.name("offtune");
  app.require_subcommand(1);

  Globals g;
  app.add_option("--workdir", g.workdir,
                 "artifact directory (env OFFTUNE_WORKDIR)")
      ->envname("OFFTUNE_WORKDIR")
      ->capture_default_str();
  app.add_option("--config", g.config, "declarative run configuration (JSON)");

  auto* owner =
      app.add_subcommand("owner", "model-owner pipeline (full model access)");
  owner->require_subcommand(1);
  {
    auto a = std::make_shared<InitArgs>();
    auto* c = owner->add_subcommand("init",
                                    "initialize (and pretrain) the base model");
    c->add_option("--preset", a->preset,
                  "model preset: nano, toy, gpt2-xl, opt-1.3b");
    c->add_option("--seed", a->seed, "initialization and pretraining seed");
    c->add_option("--corpus", a->corpus, "pretraining corpus path");
    c->add_option("--pretrain-steps", a->pretrain_steps,
                  "steps per pretraining epoch (0 skips pretraining)");
    c->add_option("--pretrain-epochs", a->pretrain_epochs,
                  "pretraining epochs");
    c->callback([c, a, &g] { run_owner_init(*c, *a, g); });
  }
  {
    auto plan = std::make_shared<std::string>();
    auto* c = owner->add_subcommand("split", "record the sandwich split plan");
    c->add_option("--plan", *plan, "bottom+top adapter blocks, e.g. 2+2")
        ->check(kPlanFormat);
    c->callback([c, plan, &g] { run_owner_split(*c, *plan, g); });
  }
  {
    auto a = std::make_shared<EmulatorArgs>();
    auto* c = owner->add_subcommand("build-emulator",
                                    "compress the frozen middle");
    c->add_option("--method", a->method, "layer-drop, magnitude-prune, quantize")
        ->check(CLI::IsMember({"layer-drop", "magnitude-prune", "quantize"}));
    c->add_option("--k", a->k, "retained blocks (layer-drop)");
    c->add_option("--sparsity", a->sparsity, "zeroed fraction (magnitude-prune)");
    c->add_option("--bits", a->bits, "quantizer width (quantize)");
    c->callback([c, a, &g] { run_owner_build_emulator(*c, *a, g); });
  }
  {
    auto a = std::make_shared<DistillArgs>();
    auto* c = owner->add_subcommand("distill",
                                    "distill the emulator toward the middle");
    c->add_option("--steps", a->steps, "distillation steps");
    c->add_option("--batch-size", a->batch, "batch size");
    c->add_option("--seq-len", a->seq, "sequence length");
    c->add_option("--lr", a->lr, "peak learning rate");
    c->add_option("--warmup", a->warmup, "warmup steps");
    c->add_option("--corpus", a->corpus, "distillation corpus path");
    c->callback([c, a, &g] { run_owner_distill(*c, *a, g); });
  }
  {
    auto id = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto* c = owner->add_subcommand("package", "write the shippable bundle");
    c->add_option("--model-id", *id, "identifier recorded in the manifest");
    c->add_option("--out", *out, "output path (default package.otb)");
    c->callback([c, id, out, &g] { run_owner_package(*c, *id, *out, g); });
  }
  {
    auto ret = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto* c = owner->add_subcommand(
        "plug-in", "verify a return bundle and plug the adapter in");
    c->add_option("--return", *ret, "return bundle path (default return.otb)");
    c->add_option("--out", *out, "plugged checkpoint path");
    c->callback([ret, out, &g] { run_owner_plug_in(*ret, *out, g); });
  }
  {
    auto a = std::make_shared<EvalArgs>();
    auto* c = owner->add_subcommand("eval", "perplexity of a full checkpoint");
    c->add_option("--corpus", a->corpus, "evaluation corpus path");
    c->add_option("--target", a->target, "model or plugged")
        ->check(CLI::IsMember({"model", "plugged"}));
    c->add_option("--seq-len", a->seq, "evaluation window");
    c->add_option("--batch-size", a->batch, "evaluation batch size");
    c->add_option("--out", a->out, "report path (default eval_owner.csv)");
    c->callback([c, a, &g] { run_owner_eval(*c, *a, g); });
  }

  auto* user =
      app.add_subcommand("user", "downstream pipeline (bundle access only)");
  user->require_subcommand(1);
  {
    auto a = std::make_shared<FinetuneArgs>();
    auto* c = user->add_subcommand("finetune",
                                   "tune the adapter against the emulator");
    c->add_option("--package", a->package, "owner package (default package.otb)");
    c->add_option("--corpus", a->corpus, "downstream corpus path");
    c->add_option("--out", a->out, "tuned adapter path (default adapter.otb)");
    c->add_option("--epochs", a->epochs, "training epochs");
    c->add_option("--steps-per-epoch", a->steps_per_epoch,
                  "steps per epoch (-1: every full batch)");
    c->add_option("--steps", a->steps,
                  "shorthand: one epoch of exactly N steps (0: none)");
    c->add_option("--batch-size", a->batch, "batch size");
    c->add_option("--seq-len", a->seq, "sequence length");
    c->add_option("--lr", a->lr, "learning rate");
    c->add_option("--lr-grid", a->lr_grid,
                  "'default' or comma-separated rates; best run wins");
    c->add_option("--warmup", a->warmup, "warmup steps");
    c->add_option("--seed", a->seed, "data-order seed");
    c->add_option("--peft", a->peft, "full, lora, bottleneck, bitfit")
        ->check(CLI::IsMember({"full", "lora", "bottleneck", "bitfit"}));
    c->add_option("--rank", a->rank, "lora rank");
    c->add_option("--alpha", a->alpha, "lora alpha");
    c->add_option("--dim", a->dim, "bottleneck width");
    c->callback([c, a, &g] { run_user_finetune(*c, *a, g); });
  }
  {
    auto a = std::make_shared<UserEvalArgs>();
    auto* c = user->add_subcommand("eval",
                                   "emulator-stack perplexity of a bundle");
    c->add_option("--package", a->package, "owner package (default package.otb)");
    c->add_option("--adapter", a->adapter, "tuned adapter bundle (optional)");
    c->add_option("--corpus", a->corpus, "evaluation corpus path");
    c->add_option("--seq-len", a->seq, "evaluation window");
    c->add_option("--batch-size", a->batch, "evaluation batch size");
    c->add_option("--out", a->out, "report path (default eval_user.csv)");
    c->callback([c, a, &g] { run_user_eval(*c, *a, g); });
  }
  {
    auto pkg = std::make_shared<std::string>();
    auto adp = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto* c = user->add_subcommand("package-return",
                                   "validate and emit the return bundle");
    c->add_option("--package", *pkg, "owner package (default package.otb)");
    c->add_option("--adapter", *adp, "tuned adapter (default adapter.otb)");
    c->add_option("--out", *out, "return bundle path (default return.otb)");
    c->callback([pkg, adp, out, &g] {
      run_user_package_return(*pkg, *adp, *out, g);
    });
  }

  auto* exp = app.add_subcommand("experiment", "measurement drivers");
  exp->require_subcommand(1);
  {
    auto a = std::make_shared<ExperimentArgs>();
    auto* c = exp->add_subcommand("four-metrics",
                                  "zero-shot / emulator / plug-in / full-FT");
    c->add_option("--preset", a->preset, "model preset");
    c->add_option("--seeds", a->seeds, "comma-separated seeds")
        ->delimiter(',');
    c->add_option("--out", a->out, "CSV path (default metrics.csv)");
    c->callback([c, a, &g] { run_experiment_four_metrics(*c, *a, g); });
  }
  {
    auto a = std::make_shared<ExperimentArgs>();
    auto* c = exp->add_subcommand("ablation", "one-axis ablation sweep");
    c->add_option("--axis", a->axis,
                  "adapter-position, compression-method, distillation")
        ->required()
        ->check(CLI::IsMember(
            {"adapter-position", "compression-method", "distillation"}));
    c->add_option("--preset", a->preset, "model preset");
    c->add_option("--seeds", a->seeds, "comma-separated seeds")
        ->delimiter(',');
    c->add_option("--out", a->out, "CSV path (default ablation_<axis>.csv)");
    c->callback([c, a, &g] { run_experiment_ablation(*c, *a, g); });
  }
  {
    auto a = std::make_shared<AccountingArgs>();
    auto* c = exp->add_subcommand("accounting",
                                  "exact parameter and byte accounting");
    c->add_option("--preset", a->preset, "model preset");
    c->add_option("--plan", a->plan, "bottom+top adapter blocks")
        ->check(kPlanFormat);
    c->add_option("--rank", a->rank, "lora rank");
    c->add_option("--dim", a->dim, "bottleneck width");
    c->add_option("--k", a->k, "emulator retained blocks");
    c->add_option("--out", a->out, "CSV path (default accounting.csv)");
    c->callback([c, a, &g] { run_experiment_accounting(*c, *a, g); });
  }

  try {
    app.parse(argc, argv);
    return 0;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "offtune: numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const OptimizerError& e) {
    std::cerr << "offtune: numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const Error& e) {
    std::cerr << "offtune: error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "offtune: error: " << e.what() << '\n';
    return 3;
  }
}
