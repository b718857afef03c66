#include "ot/data.hpp"

#include <fstream>
#include <sstream>

#include "ot/rng.hpp"
#include "ot/sha256.hpp"

namespace ot {

std::vector<int32_t> tokenize(const std::string& bytes) {
  std::vector<int32_t> ids;
  ids.reserve(bytes.size());
  for (char ch : bytes)
    ids.push_back(static_cast<int32_t>(static_cast<unsigned char>(ch)));
  return ids;
}

std::string detokenize(const std::vector<int32_t>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    OT_CHECK(id >= 0 && id < 256, IndexError,
             "detokenize: id " << id << " outside byte range");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

Corpus make_corpus(std::string name, const std::string& bytes,
                   double train_frac) {
  OT_CHECK(train_frac > 0.0 && train_frac <= 1.0, ContractError,
           "train fraction " << train_frac << " outside (0,1]");
  Corpus c;
  c.name = std::move(name);
  c.content_hash = sha256_hex(bytes);
  c.tokens = tokenize(bytes);
  c.train_end = static_cast<int64_t>(
      static_cast<double>(c.tokens.size()) * train_frac);
  return c;
}

Corpus load_corpus(const std::string& path, double train_frac) {
  std::ifstream in(path, std::ios::binary);
  OT_CHECK(in.good(), ContractError, "cannot open corpus file " << path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return make_corpus(path, buf.str(), train_frac);
}

std::span<const int32_t> train_tokens(const Corpus& c) {
  return {c.tokens.data(), static_cast<size_t>(c.train_end)};
}

std::span<const int32_t> val_tokens(const Corpus& c) {
  return {c.tokens.data() + c.train_end,
          c.tokens.size() - static_cast<size_t>(c.train_end)};
}

std::vector<Batch> make_batches(std::span<const int32_t> tokens,
                                const BatchPlan& plan) {
  OT_CHECK(plan.seq_len > 0 && plan.batch_size > 0, ContractError,
           "batch plan needs positive seq_len and batch_size");
  OT_CHECK(static_cast<int64_t>(tokens.size()) >= plan.seq_len + 1,
           ContractError, "corpus of " << tokens.size()
                                       << " tokens is smaller than one window ("
                                       << plan.seq_len + 1 << ")");
  const int64_t n_windows =
      (static_cast<int64_t>(tokens.size()) - 1) / plan.seq_len;
  std::vector<int64_t> order(static_cast<size_t>(n_windows));
  for (int64_t w = 0; w < n_windows; ++w) order[static_cast<size_t>(w)] = w;
  // Golden-ratio mixing keeps per-epoch shuffles decorrelated but pinned.
  Rng rng(plan.seed + 0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(plan.epoch));
  rng.shuffle(order);

  std::vector<Batch> batches;
  const int64_t n_batches = n_windows / plan.batch_size;
  batches.reserve(static_cast<size_t>(n_batches));
  for (int64_t g = 0; g < n_batches; ++g) {
    Batch b;
    b.batch = plan.batch_size;
    b.seq = plan.seq_len;
    b.inputs.reserve(static_cast<size_t>(plan.batch_size * plan.seq_len));
    b.targets.reserve(static_cast<size_t>(plan.batch_size * plan.seq_len));
    for (int64_t r = 0; r < plan.batch_size; ++r) {
      const int64_t start =
          order[static_cast<size_t>(g * plan.batch_size + r)] * plan.seq_len;
      for (int64_t t = 0; t < plan.seq_len; ++t) {
        b.inputs.push_back(tokens[static_cast<size_t>(start + t)]);
        b.targets.push_back(tokens[static_cast<size_t>(start + t + 1)]);
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

namespace {

const char* kAdjectives[] = {
    "old",    "small",  "bright", "quiet",  "green",  "heavy",
    "gentle", "sharp",  "golden", "narrow", "distant", "warm",
    "pale",   "silent", "steep",  "broad",  "early",  "late",
    "plain",  "rough",  "smooth", "tired",  "young",  "cold"};

const char* kNouns[] = {
    "river",   "mountain", "house",   "tree",    "road",    "garden",
    "child",   "bird",     "stone",   "window",  "village", "field",
    "lamp",    "door",     "cloud",   "winter",  "market",  "letter",
    "horse",   "bridge",   "forest",  "valley",  "miller",  "baker",
    "teacher", "orchard",  "meadow",  "chapel",  "tower",   "well",
    "cart",    "harvest",  "evening", "morning", "fire",    "song",
    "story",   "journey",  "shadow",  "path"};

const char* kVerbs[] = {
    "crossed",    "watched",  "followed", "carried", "opened",  "reached",
    "remembered", "found",    "built",    "left",    "passed",  "repaired",
    "painted",    "gathered", "planted",  "visited", "studied", "counted",
    "cleaned",    "borrowed", "returned", "kept",    "sold",    "traded"};

const char* kAdverbs[] = {"slowly",  "quietly", "again",   "often",
                          "finally", "almost",  "rarely",  "gladly",
                          "calmly",  "twice",   "together", "alone"};

const char* kPreps[] = {"near", "beyond", "under",  "across",
                        "through", "behind", "beside", "toward"};

// Downstream domain: a ship's log. Different content words, digit runs, and
// clause rhythm, with the same function words and punctuation conventions.
const char* kSeaNouns[] = {
    "crew",    "mast",    "anchor",  "harbor",  "channel", "storm",
    "rigging", "compass", "lantern", "cargo",   "deck",    "gull",
    "tide",    "reef",    "sail",    "rudder",  "galley",  "wake",
    "swell",   "fog",     "current", "shoal",   "buoy",    "wharf"};

const char* kSeaVerbs[] = {"hauled",   "sighted", "charted", "secured",
                           "lowered",  "raised",  "trimmed", "logged",
                           "measured", "rigged",  "anchored", "signaled"};

const char* kSeaAdjs[] = {"steady", "rising", "falling", "brisk",
                          "slack",  "heavy",  "light",   "fair",
                          "rough",  "calm",   "gray",    "clear"};

template <size_t N>
const char* pick(Rng& rng, const char* (&bank)[N]) {
  return bank[rng.next_below(N)];
}

void append_capitalized(std::string& out, const std::string& sentence) {
  std::string s = sentence;
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z')
    s[0] = static_cast<char>(s[0] - 'a' + 'A');
  out += s;
}

}  // namespace

std::string generate_pretrain_text(uint64_t seed, size_t target_bytes) {
  Rng rng(seed);
  std::string out;
  out.reserve(target_bytes + 256);
  while (out.size() < target_bytes) {
    const uint64_t n_sentences = 4 + rng.next_below(5);
    for (uint64_t s = 0; s < n_sentences; ++s) {
      std::string sent;
      switch (rng.next_below(4)) {
        case 0:
          sent = std::string("the ") + pick(rng, kAdjectives) + " " +
                 pick(rng, kNouns) + " " + pick(rng, kVerbs) + " the " +
                 pick(rng, kNouns) + " " + pick(rng, kPreps) + " the " +
                 pick(rng, kAdjectives) + " " + pick(rng, kNouns) + ".";
          break;
        case 1:
          sent = std::string("the ") + pick(rng, kNouns) + " " +
                 pick(rng, kVerbs) + " " + pick(rng, kAdverbs) +
                 ", and the " + pick(rng, kNouns) + " " + pick(rng, kVerbs) +
                 " the " + pick(rng, kNouns) + ".";
          break;
        case 2:
          sent = std::string("a ") + pick(rng, kAdjectives) + " " +
                 pick(rng, kNouns) + " " + pick(rng, kPreps) + " the " +
                 pick(rng, kNouns) + " " + pick(rng, kVerbs) + " the " +
                 pick(rng, kAdjectives) + " " + pick(rng, kNouns) + " " +
                 pick(rng, kAdverbs) + ".";
          break;
        case 3:
          sent = std::string("when the ") + pick(rng, kNouns) + " " +
                 pick(rng, kVerbs) + " the " + pick(rng, kNouns) + ", the " +
                 pick(rng, kAdjectives) + " " + pick(rng, kNouns) + " " +
                 pick(rng, kVerbs) + " " + pick(rng, kAdverbs) + ".";
          break;
      }
      append_capitalized(out, sent);
      out += (s + 1 == n_sentences) ? "\n\n" : " ";
    }
  }
  out.resize(target_bytes);
  return out;
}

std::string generate_downstream_text(uint64_t seed, size_t target_bytes) {
  Rng rng(seed);
  std::string out;
  out.reserve(target_bytes + 256);
  uint64_t day = 1;
  while (out.size() < target_bytes) {
    out += "Day " + std::to_string(day) + ". ";
    const uint64_t n_clauses = 2 + rng.next_below(3);
    for (uint64_t cla = 0; cla < n_clauses; ++cla) {
      std::string sent;
      switch (rng.next_below(3)) {
        case 0:
          sent = std::string("the crew ") + pick(rng, kSeaVerbs) + " the " +
                 pick(rng, kSeaNouns) + " " + pick(rng, kPreps) + " the " +
                 pick(rng, kSeaNouns) + ".";
          break;
        case 1:
          sent = std::string("wind ") + pick(rng, kSeaAdjs) + ", seas " +
                 pick(rng, kSeaAdjs) + "; we " + pick(rng, kSeaVerbs) +
                 " the " + pick(rng, kSeaNouns) + " at " +
                 std::to_string(1 + rng.next_below(12)) + " bells.";
          break;
        case 2:
          sent = std::string("the ") + pick(rng, kSeaAdjs) + " " +
                 pick(rng, kSeaNouns) + " " + pick(rng, kSeaVerbs) + " " +
                 pick(rng, kAdverbs) + " " + pick(rng, kPreps) + " the " +
                 pick(rng, kSeaNouns) + ".";
          break;
      }
      append_capitalized(out, sent);
      out += (cla + 1 == n_clauses) ? "\n" : " ";
    }
    ++day;
  }
  out.resize(target_bytes);
  return out;
}

}  // namespace ot
