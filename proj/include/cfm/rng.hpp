#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "cfm/matrix.hpp"

namespace cfm {

// Deterministic RNG wrapper. All sampling goes through explicit bit
// manipulation instead of std distributions, whose output is
// implementation-defined and would break run-to-run reproducibility
// across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // [0, n)
  int uniform_int(int n) {
    // rejection sampling to avoid modulo bias
    uint64_t limit = UINT64_MAX - UINT64_MAX % static_cast<uint64_t>(n);
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return static_cast<int>(v % static_cast<uint64_t>(n));
  }

  // standard normal via Box-Muller (stateless: second value discarded)
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  Matrix gaussian_matrix(int rows, int cols, double stddev) {
    Matrix m(rows, cols);
    for (Real& v : m.data) v = static_cast<Real>(normal() * stddev);
    return m;
  }

  std::string serialize() const {
    std::ostringstream ss;
    ss << gen_;
    return ss.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream ss(s);
    ss >> gen_;
    if (ss.fail()) throw std::runtime_error("Rng::deserialize: malformed state");
  }

 private:
  std::mt19937_64 gen_;
};

// Stable 64-bit mix for deriving per-(step, example) stream seeds.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a + 0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

}  // namespace cfm
