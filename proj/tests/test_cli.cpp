// End-to-end tests of the `offtune` binary: exit codes, artifact layout,
// idempotent re-runs, owner/user role separation (user commands see bundles
// only), and the round trip from owner package to plugged-in return. The
// binary path arrives via OFFTUNE_BIN.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "ot/data.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string binary() {
  const char* bin = std::getenv("OFFTUNE_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "OFFTUNE_BIN must point at the binary");
  return bin;
}

struct RunResult {
  int code = -1;
  std::string out;  // stdout and stderr, interleaved

  bool contains(const std::string& needle) const {
    return out.find(needle) != std::string::npos;
  }
};

// Runs `offtune <args>` through the shell, merging stderr into the captured
// stream so refusal messages are assertable alongside status lines.
RunResult run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + binary() + " " +
                          args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult res;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) res.out += buf;
  const int status = pclose(pipe);
  res.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

// Fresh scratch directory per logical workspace; wiped so re-running the
// suite never sees stale artifacts.
fs::path scratch(const std::string& leaf) {
  const fs::path dir = fs::temp_directory_path() / "offtune-cli-tests" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

size_t line_count(const std::string& s) {
  size_t n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

// Per-tensor digests from a bundle file: magic, u64 manifest length, JSON.
std::map<std::string, std::string> bundle_digests(const fs::path& p) {
  const std::string bytes = slurp(p);
  REQUIRE(bytes.size() > 12);
  REQUIRE(bytes.substr(0, 4) == "OTB1");
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[4 + i]))
           << (8 * i);
  const json manifest = json::parse(bytes.substr(12, len));
  std::map<std::string, std::string> digests;
  for (const auto& e : manifest.at("index"))
    digests[e.at("name").get<std::string>()] =
        e.at("sha256").get<std::string>();
  return digests;
}

// Shared corpora, written once; small enough that every stage runs in
// seconds at the nano preset.
struct Corpora {
  fs::path pre, down;
  Corpora() {
    const fs::path dir = scratch("corpora");
    pre = dir / "pre.txt";
    down = dir / "down.txt";
    spit(pre, ot::generate_pretrain_text(404, 50 << 10));
    spit(down, ot::generate_downstream_text(303, 40 << 10));
  }
};

const Corpora& corpora() {
  static Corpora c;
  return c;
}

// One fully-staged owner workspace (init through package), shared by the
// cases that only consume its artifacts.
const fs::path& owner_dir() {
  static fs::path dir = [] {
    const fs::path d = scratch("owner");
    const std::string wd = "--workdir " + d.string() + " ";
    REQUIRE(run(wd + "owner init --preset nano --seed 1 --corpus " +
                corpora().pre.string() + " --pretrain-steps 8")
                .code == 0);
    REQUIRE(run(wd + "owner split --plan 1+1").code == 0);
    REQUIRE(run(wd + "owner build-emulator --method layer-drop --k 2").code ==
            0);
    REQUIRE(run(wd + "owner package --model-id nano-demo").code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("owner").code == 2);  // subcommand required
  CHECK(run("experiment ablation --axis nonsense").code == 2);
  CHECK(run("owner split --plan banana").code == 2);
  CHECK(run("owner split --plan 2+").code == 2);
  CHECK(run("user finetune --peft sparse").code == 2);
  const RunResult help = run("--help");
  CHECK(help.code == 0);
  CHECK(help.contains("owner"));
  CHECK(help.contains("user"));
  CHECK(help.contains("experiment"));
}

TEST_CASE("missing artifacts name the stage to run") {
  const fs::path dir = scratch("empty");
  const std::string wd = "--workdir " + dir.string() + " ";
  const RunResult split = run(wd + "owner split --plan 1+1");
  CHECK(split.code == 3);
  CHECK(split.contains("run `offtune owner init` first"));
  const RunResult pkg = run(wd + "owner package");
  CHECK(pkg.code == 3);
  CHECK(pkg.contains("owner init"));
  const RunResult plug = run(wd + "owner plug-in");
  CHECK(plug.code == 3);
}

TEST_CASE("owner pipeline stages artifacts and re-runs bitwise identically") {
  const fs::path dir = scratch("owner-idem");
  const std::string wd = "--workdir " + dir.string() + " ";
  const std::string init = "owner init --preset nano --seed 1 --corpus " +
                           corpora().pre.string() + " --pretrain-steps 8";

  const RunResult r1 = run(wd + init);
  CHECK(r1.code == 0);
  CHECK(r1.contains("status=ok command=owner.init"));
  CHECK(r1.contains("pretrain_steps=8"));
  CHECK(fs::exists(dir / "model.otc"));
  const std::string model_bytes = slurp(dir / "model.otc");

  const RunResult split = run(wd + "owner split --plan 1+1");
  CHECK(split.code == 0);
  CHECK(split.contains("plan=1+1"));
  CHECK(split.contains("m=4"));
  CHECK(fs::exists(dir / "split.json"));

  // Uniform drop of a 4-block middle to 2 keeps the endpoints.
  const RunResult emu = run(wd + "owner build-emulator --method layer-drop --k 2");
  CHECK(emu.code == 0);
  CHECK(emu.contains("method=layer_drop"));
  CHECK(emu.contains("retained=0,3"));
  CHECK(fs::exists(dir / "emulator.otc"));

  const std::string distill = "owner distill --steps 2 --batch-size 2 "
                              "--lr 1e-3 --warmup 1 --corpus " +
                              corpora().pre.string();
  const RunResult dis = run(wd + distill);
  CHECK(dis.code == 0);
  CHECK(dis.contains("steps=2"));
  CHECK(fs::exists(dir / "distill_log.csv"));
  CHECK(line_count(slurp(dir / "distill_log.csv")) == 3);  // header + 2

  const RunResult pkg = run(wd + "owner package");
  CHECK(pkg.code == 0);
  CHECK(fs::exists(dir / "package.otb"));

  // Same inputs, same bytes: every stage rewrites its artifact identically.
  const std::string emulator_bytes = slurp(dir / "emulator.otc");
  const std::string package_bytes = slurp(dir / "package.otb");
  CHECK(run(wd + init).code == 0);
  CHECK(slurp(dir / "model.otc") == model_bytes);
  CHECK(run(wd + "owner split --plan 1+1").code == 0);
  CHECK(run(wd + "owner build-emulator --method layer-drop --k 2").code == 0);
  CHECK(run(wd + distill).code == 0);
  CHECK(slurp(dir / "emulator.otc") == emulator_bytes);
  CHECK(run(wd + "owner package").code == 0);
  CHECK(slurp(dir / "package.otb") == package_bytes);

  // Evaluating the staged model reports a finite perplexity.
  const RunResult ev = run(wd + "owner eval --corpus " +
                           corpora().down.string() + " --batch-size 2");
  CHECK(ev.code == 0);
  CHECK(ev.contains("target=model"));
  CHECK(fs::exists(dir / "eval_owner.csv"));
}

TEST_CASE("stale split plans are rejected after the checkpoint changes") {
  const fs::path dir = scratch("stale");
  const std::string wd = "--workdir " + dir.string() + " ";
  REQUIRE(run(wd + "owner init --preset nano --seed 1 --corpus " +
              corpora().pre.string() + " --pretrain-steps 2")
              .code == 0);
  REQUIRE(run(wd + "owner split --plan 1+1").code == 0);
  // Re-initializing with another seed invalidates the recorded plan.
  REQUIRE(run(wd + "owner init --preset nano --seed 2 --corpus " +
              corpora().pre.string() + " --pretrain-steps 2")
              .code == 0);
  const RunResult emu = run(wd + "owner build-emulator --method layer-drop --k 2");
  CHECK(emu.code == 3);
  CHECK(emu.contains("owner split"));
}

TEST_CASE("user commands refuse full-model paths") {
  const fs::path model = owner_dir() / "model.otc";
  REQUIRE(fs::exists(model));
  const fs::path dir = scratch("refuse");
  const std::string wd = "--workdir " + dir.string() + " ";

  const RunResult ft = run(wd + "user finetune --package " + model.string() +
                           " --corpus " + corpora().down.string());
  CHECK(ft.code == 3);
  CHECK(ft.contains("not a bundle"));
  const RunResult ev = run(wd + "user eval --package " + model.string() +
                           " --corpus " + corpora().down.string());
  CHECK(ev.code == 3);
  CHECK(ev.contains("not a bundle"));
  const RunResult pr = run(wd + "user package-return --package " +
                           model.string() + " --adapter " + model.string());
  CHECK(pr.code == 3);
  CHECK(pr.contains("not a bundle"));
}

TEST_CASE("user pipeline runs in a directory holding only bundles") {
  // The user side sees exactly one file: the owner package.
  const fs::path dir = scratch("user");
  fs::copy_file(owner_dir() / "package.otb", dir / "package.otb");
  const std::string wd = "--workdir " + dir.string() + " ";
  const std::string down = corpora().down.string();

  const RunResult ft = run(wd + "user finetune --steps 2 --batch-size 2 "
                                "--lr 1e-3 --warmup 1 --seed 7 --corpus " +
                           down);
  CHECK(ft.code == 0);
  CHECK(ft.contains("status=ok command=user.finetune"));
  CHECK(ft.contains("runs=1"));
  CHECK(fs::exists(dir / "adapter.otb"));
  CHECK(fs::exists(dir / "finetune_log.csv"));

  const RunResult ev = run(wd + "user eval --batch-size 2 --corpus " + down);
  CHECK(ev.code == 0);
  CHECK(ev.contains("adapter=packaged"));
  const RunResult evt = run(wd + "user eval --adapter " +
                            (dir / "adapter.otb").string() +
                            " --batch-size 2 --corpus " + down);
  CHECK(evt.code == 0);
  CHECK(evt.contains("adapter=tuned"));

  const RunResult ret = run(wd + "user package-return");
  CHECK(ret.code == 0);
  CHECK(fs::exists(dir / "return.otb"));
  // The staged return is the validated adapter bundle, byte for byte.
  CHECK(slurp(dir / "return.otb") == slurp(dir / "adapter.otb"));

  // The workspace never grew a full-model file.
  for (const auto& entry : fs::directory_iterator(dir))
    CHECK(entry.path().extension() != ".otc");
}

TEST_CASE("a zero-step finetune returns the adapter it received") {
  const fs::path dir = scratch("zero-step");
  fs::copy_file(owner_dir() / "package.otb", dir / "package.otb");
  const std::string wd = "--workdir " + dir.string() + " ";

  const RunResult ft = run(wd + "user finetune --steps 0 --corpus " +
                           corpora().down.string());
  CHECK(ft.code == 0);
  const auto pkg = bundle_digests(dir / "package.otb");
  const auto ret = bundle_digests(dir / "adapter.otb");
  CHECK(!ret.empty());
  for (const auto& [name, sha] : ret) {
    REQUIRE(pkg.count(name) == 1);  // returned tensors are package tensors
    CHECK(pkg.at(name) == sha);     // with unchanged bytes
  }
}

TEST_CASE("the learning-rate grid sweeps five defaults and picks one") {
  const fs::path dir = scratch("grid");
  fs::copy_file(owner_dir() / "package.otb", dir / "package.otb");
  const std::string wd = "--workdir " + dir.string() + " ";

  const RunResult ft = run(wd + "user finetune --lr-grid default --steps 2 "
                                "--batch-size 2 --corpus " +
                           corpora().down.string());
  CHECK(ft.code == 0);
  CHECK(ft.contains("runs=5"));
  const std::string csv = slurp(dir / "lr_grid.csv");
  CHECK(line_count(csv) == 6);  // header + one row per rate
  CHECK(csv.find(",1\n") != std::string::npos);  // exactly one winner
  CHECK(run(wd + "user finetune --lr-grid 1e-3,bogus --steps 2 --corpus " +
            corpora().down.string())
            .code == 3);
}

TEST_CASE("plug-in verifies returns and reports unmodified ones as such") {
  const fs::path dir = scratch("plug");
  const std::string owd = "--workdir " + dir.string() + " ";
  // Stage a fresh owner workspace so plug-in artifacts land here.
  REQUIRE(run(owd + "owner init --preset nano --seed 1 --corpus " +
              corpora().pre.string() + " --pretrain-steps 8")
              .code == 0);
  REQUIRE(run(owd + "owner split --plan 1+1").code == 0);
  REQUIRE(run(owd + "owner build-emulator --method layer-drop --k 2").code ==
          0);
  REQUIRE(run(owd + "owner package").code == 0);

  const fs::path user = scratch("plug-user");
  fs::copy_file(dir / "package.otb", user / "package.otb");
  const std::string uwd = "--workdir " + user.string() + " ";
  const std::string down = corpora().down.string();

  // Untouched adapter round trip: the plugged model equals the original.
  REQUIRE(run(uwd + "user finetune --steps 0 --corpus " + down).code == 0);
  REQUIRE(run(uwd + "user package-return").code == 0);
  const RunResult same = run(owd + "owner plug-in --return " +
                             (user / "return.otb").string());
  CHECK(same.code == 0);
  CHECK(same.contains("unchanged=true"));
  CHECK(fs::exists(dir / "plugged.otc"));

  // A tuned adapter produces a genuinely different model.
  REQUIRE(run(uwd + "user finetune --steps 3 --batch-size 2 --lr 1e-3 "
                    "--warmup 1 --corpus " +
              down)
              .code == 0);
  REQUIRE(run(uwd + "user package-return").code == 0);
  const RunResult tuned = run(owd + "owner plug-in --return " +
                              (user / "return.otb").string());
  CHECK(tuned.code == 0);
  CHECK(tuned.contains("unchanged=false"));

  const RunResult ev = run(owd + "owner eval --target plugged --corpus " +
                           down + " --batch-size 2");
  CHECK(ev.code == 0);
  CHECK(ev.contains("target=plugged"));

  // A return from a different pretraining run fails provenance checks.
  const fs::path other = scratch("plug-other");
  const std::string xwd = "--workdir " + other.string() + " ";
  REQUIRE(run(xwd + "owner init --preset nano --seed 9 --corpus " +
              corpora().pre.string() + " --pretrain-steps 8")
              .code == 0);
  const RunResult cross = run(xwd + "owner plug-in --return " +
                              (user / "return.otb").string());
  CHECK(cross.code == 3);
}

TEST_CASE("config files default every field and flags override them") {
  const fs::path dir = scratch("config");
  const fs::path cfg = dir / "run.json";
  spit(cfg, R"({"preset": "nano", "plan": {"n_bottom": 1, "n_top": 1},
                "emulator": {"k": 2},
                "pretrain": {"steps_per_epoch": 4, "batch_size": 2}})");
  const std::string wd =
      "--workdir " + dir.string() + " --config " + cfg.string() + " ";

  REQUIRE(run(wd + "owner init --corpus " + corpora().pre.string()).code == 0);
  const RunResult split = run(wd + "owner split");  // plan from config
  CHECK(split.code == 0);
  CHECK(split.contains("plan=1+1"));
  const RunResult flag = run(wd + "owner split --plan 2+2");  // flag wins
  CHECK(flag.code == 0);
  CHECK(flag.contains("plan=2+2"));

  const fs::path bad = dir / "bad.json";
  spit(bad, R"({"presett": "nano"})");
  const RunResult unknown = run("--workdir " + dir.string() + " --config " +
                                bad.string() + " owner split");
  CHECK(unknown.code == 3);
  CHECK(unknown.contains("unknown key"));
  spit(bad, "{nope");
  CHECK(run("--workdir " + dir.string() + " --config " + bad.string() +
            " owner split")
            .code == 3);
}

TEST_CASE("the work directory can come from the environment") {
  const fs::path dir = scratch("envdir");
  REQUIRE(run("owner init --preset nano --seed 3 --corpus " +
                  corpora().pre.string() + " --pretrain-steps 0",
              "OFFTUNE_WORKDIR=" + dir.string())
              .code == 0);
  CHECK(fs::exists(dir / "model.otc"));
}

TEST_CASE("accounting reports exact counts for the large presets") {
  const fs::path dir = scratch("accounting");
  const std::string wd = "--workdir " + dir.string() + " ";
  const RunResult r =
      run(wd + "experiment accounting --preset gpt2-xl --plan 2+2");
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "accounting.csv"));
  // Four sandwich blocks of gpt2-xl: ~123M trainable adapter parameters.
  const std::string out = r.out;
  const auto pos = out.find("adapter=");
  REQUIRE(pos != std::string::npos);
  const long long adapter = std::stoll(out.substr(pos + 8));
  CHECK(adapter > 115'000'000);
  CHECK(adapter < 132'000'000);
  CHECK(r.contains("transmitted="));
  const std::string csv = slurp(dir / "accounting.csv");
  CHECK(csv.rfind("quantity,params,bytes\n", 0) == 0);
  CHECK(line_count(csv) == 8);  // header + 7 quantities
}

TEST_CASE("experiment four-metrics writes one record per seed") {
  const fs::path dir = scratch("metrics");
  const fs::path cfg = dir / "run.json";
  spit(cfg, R"({"preset": "nano", "plan": {"n_bottom": 1, "n_top": 1},
                "emulator": {"k": 2},
                "pretrain": {"steps_per_epoch": 6, "batch_size": 2},
                "distill": {"steps": 0},
                "tune": {"epochs": 1, "steps_per_epoch": 3, "batch_size": 2,
                         "lr": 1e-3, "warmup_steps": 1},
                "eval": {"batch_size": 2},
                "paths": {"pretrain_corpus": ")" +
                  corpora().pre.string() + R"(",
                          "downstream_corpus": ")" +
                  corpora().down.string() + R"("}})");
  const std::string wd =
      "--workdir " + dir.string() + " --config " + cfg.string() + " ";

  const RunResult r = run(wd + "experiment four-metrics --seeds 5,6");
  CHECK(r.code == 0);
  CHECK(r.contains("seeds=2"));
  CHECK(r.contains("failures=0"));
  const std::string csv = slurp(dir / "metrics.csv");
  CHECK(csv.rfind("seed,zero_shot_ppl,", 0) == 0);
  CHECK(line_count(csv) == 3);  // header + one row per seed
  CHECK(csv.find("\n5,") != std::string::npos);
  CHECK(csv.find("\n6,") != std::string::npos);
}

TEST_CASE("experiment ablation emits the three-point position sweep") {
  const fs::path dir = scratch("ablation");
  const fs::path cfg = dir / "run.json";
  spit(cfg, R"({"preset": "nano", "plan": {"n_bottom": 1, "n_top": 1},
                "emulator": {"k": 2},
                "pretrain": {"steps_per_epoch": 6, "batch_size": 2},
                "distill": {"steps": 0},
                "tune": {"epochs": 1, "steps_per_epoch": 3, "batch_size": 2,
                         "lr": 1e-3, "warmup_steps": 1},
                "eval": {"batch_size": 2},
                "paths": {"pretrain_corpus": ")" +
                  corpora().pre.string() + R"(",
                          "downstream_corpus": ")" +
                  corpora().down.string() + R"("}})");
  const std::string wd =
      "--workdir " + dir.string() + " --config " + cfg.string() + " ";

  const RunResult r =
      run(wd + "experiment ablation --axis adapter-position --seeds 5");
  CHECK(r.code == 0);
  CHECK(r.contains("axis=adapter_position"));
  CHECK(r.contains("points=3"));
  const std::string csv = slurp(dir / "ablation_adapter_position.csv");
  CHECK(csv.rfind("axis,point,seed,", 0) == 0);
  CHECK(line_count(csv) == 4);  // header + sandwich/top/bottom
  CHECK(csv.find(",sandwich,") != std::string::npos);
  CHECK(csv.find(",top,") != std::string::npos);
  CHECK(csv.find(",bottom,") != std::string::npos);
}
