#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mtk {

#if defined(MTK_REAL_DOUBLE)
using Real = double;
#else
using Real = float;
#endif

// Error taxonomy. The CLI maps these onto exit codes:
// usage -> 1, data -> 2, numeric -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

using Rng = std::mt19937_64;

// Stable 64-bit string hash (FNV-1a), used to derive per-parameter
// init seeds that do not depend on construction order.
inline uint64_t hash64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for(unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace mtk
