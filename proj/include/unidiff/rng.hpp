#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "unidiff/tensor.hpp"

namespace unidiff {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x51ed27ULL)));
}

// A fresh distribution per call keeps the draw a function of the engine state
// alone (libstdc++ caches the second polar-method value inside the distribution).
template <class T>
Tensor<T> randn(Rng& rng, Shape shape) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> d(0.0, 1.0);
  for (auto& v : t.vec()) v = static_cast<T>(d(rng));
  return t;
}

inline double uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  std::uniform_int_distribution<int> d(lo, hi_inclusive);
  return d(rng);
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& s) {
  Rng r;
  std::istringstream is(s);
  is >> r;
  if (!is) throw FormatError("malformed rng state");
  return r;
}

}  // namespace unidiff
