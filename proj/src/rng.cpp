#include "imf/rng.hpp"

#include <cmath>
#include <numbers>

namespace imf {

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : key_(mix64(mix64(seed + 0x9e3779b97f4a7c15ULL) ^ mix64(stream ^ 0x632be59bd9b4e019ULL))) {}

Rng Rng::domain(std::uint64_t seed, std::string_view name) { return Rng(seed, hash_name(name)); }

Rng::result_type Rng::operator()() { return mix64(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL); }

double Rng::uniform() {
  // 53 random bits, shifted half an ulp off zero.
  return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double rad = std::sqrt(-2.0 * std::log(u1));
  const double ang = 2.0 * std::numbers::pi * u2;
  spare_ = rad * std::sin(ang);
  has_spare_ = true;
  return rad * std::cos(ang);
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t x;
  do {
    x = (*this)();
  } while (x >= limit);
  return x % n;
}

Rng Rng::fork(std::uint64_t stream) const {
  Rng child(0);
  child.key_ = mix64(key_ ^ mix64(stream + 0xd1b54a32d192ed03ULL));
  return child;
}

Rng Rng::fork(std::string_view name) const { return fork(hash_name(name)); }

}  // namespace imf
