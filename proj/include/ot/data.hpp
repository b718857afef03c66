#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ot/common.hpp"

namespace ot {

// Byte-level tokenization: identity mapping byte -> id, vocab 256.
std::vector<int32_t> tokenize(const std::string& bytes);
std::string detokenize(const std::vector<int32_t>& ids);

struct Corpus {
  std::string name;
  std::vector<int32_t> tokens;
  std::string content_hash;  // sha256 of the raw bytes
  int64_t train_end = 0;     // tokens [0, train_end) train, rest validation
};

// Builds a corpus from raw bytes; train_end = floor(token_count * train_frac),
// so the partition depends only on content and fraction.
Corpus make_corpus(std::string name, const std::string& bytes,
                   double train_frac);
Corpus load_corpus(const std::string& path, double train_frac);

std::span<const int32_t> train_tokens(const Corpus& c);
std::span<const int32_t> val_tokens(const Corpus& c);

struct BatchPlan {
  int64_t seq_len = 256;
  int64_t batch_size = 4;
  uint64_t seed = 0;
  int64_t epoch = 0;  // mixed into the shuffle so epochs reorder windows
};

struct Batch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int32_t> inputs;   // [batch * seq], row-major
  std::vector<int32_t> targets;  // inputs shifted one token right
};

// Cuts the stream into contiguous non-overlapping windows of seq_len
// (floor((n-1)/seq_len) of them; the tail is dropped), shuffles window order
// by seed+epoch, and groups them into full batches (trailing partial group
// dropped as well).
std::vector<Batch> make_batches(std::span<const int32_t> tokens,
                                const BatchPlan& plan);

// Deterministic synthetic corpora: a generic English-like prose stream for
// pretraining and a domain-shifted log-book stream for downstream tuning.
std::string generate_pretrain_text(uint64_t seed, size_t target_bytes);
std::string generate_downstream_text(uint64_t seed, size_t target_bytes);

}  // namespace ot
