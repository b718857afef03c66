#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace ot {

// Streaming SHA-256 (FIPS 180-4), endian-independent byte-wise padding.
class Sha256 {
 public:
  Sha256() { reset(); }

  void reset();
  void update(const void* data, size_t len);
  std::array<uint8_t, 32> digest();  // finalizes; further updates need reset()

 private:
  void process_block(const uint8_t* block);

  uint32_t state_[8];
  uint64_t bit_count_ = 0;
  uint8_t buffer_[64];
  size_t buffered_ = 0;
};

std::string to_hex(std::span<const uint8_t> bytes);

std::string sha256_hex(std::span<const uint8_t> data);
std::string sha256_hex(const std::string& s);

// Hash of a float buffer as little-endian 32-bit words, the normative
// encoding for weight provenance and bundle checksums.
std::string sha256_hex_f32(std::span<const float> values);

}  // namespace ot
