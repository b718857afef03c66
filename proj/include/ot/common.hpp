#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ot {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Error taxonomy. Every failure surfaces as one of these so the CLI can map
// them onto its exit codes (usage=2, validation=3, numeric=4).
struct Error : std::runtime_error {
  explicit Error(const std::string& m) : std::runtime_error(m) {}
};
struct DimensionError : Error { using Error::Error; };   // shape mismatch
struct ContractError : Error { using Error::Error; };    // precondition violated
struct IndexError : Error { using Error::Error; };       // id/index out of range
struct OptimizerError : Error { using Error::Error; };   // non-finite gradients etc.
struct PlanError : Error { using Error::Error; };        // invalid split/drop plan
struct SpecError : Error { using Error::Error; };        // invalid emulator spec
struct PackagingError : Error { using Error::Error; };   // bundle construction guard
struct IntegrationError : Error { using Error::Error; }; // plug-in provenance mismatch
struct BundleError : Error { using Error::Error; };      // malformed/tampered bundle
struct NumericError : Error { using Error::Error; };     // non-finite loss mid-run

}  // namespace ot

#define OT_THROW(ExcType, expr)            \
  do {                                     \
    std::ostringstream os_;                \
    os_ << expr;                           \
    throw ExcType(os_.str());              \
  } while (false)

#define OT_CHECK(cond, ExcType, expr)      \
  do {                                     \
    if (!(cond)) OT_THROW(ExcType, expr);  \
  } while (false)
