#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "virm/tensor.hpp"

namespace virm {

/// Deterministic random stream. All distributions are implemented on top of
/// the raw 64-bit output so that sequences are identical across standard
/// libraries, and the whole state round-trips through a string (checkpoints).
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller. Draws two uniforms per call and keeps
  /// no cached spare, so the stream state is exactly the engine state.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) {
    if (p < 0.0 || p > 1.0) {
      throw ValueError("bernoulli probability " + std::to_string(p) + " outside [0,1]");
    }
    return uniform() < p;
  }

  /// Unbiased uniform index in [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) throw ValueError("index range must be nonempty");
    const std::uint64_t bound = n;
    const std::uint64_t threshold = (0 - bound) % bound;  // 2^64 mod n
    for (;;) {
      const unsigned __int128 m =
          static_cast<unsigned __int128>(engine_()) * static_cast<unsigned __int128>(bound);
      if (static_cast<std::uint64_t>(m) >= threshold) {
        return static_cast<std::size_t>(m >> 64);
      }
    }
  }

  Tensor normal_tensor(std::vector<std::size_t> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = stddev * normal();
    return t;
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw FormatError("bad rng state string");
  }

private:
  std::mt19937_64 engine_;
};

/// splitmix64 step; used to derive independent stream seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace virm
