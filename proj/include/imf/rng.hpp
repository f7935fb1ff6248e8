#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace imf {

/// Counter-based generator: the i-th draw of a stream is a pure function of
/// (seed, stream id, i). Streams with distinct ids are independent, so batch
/// construction does not depend on evaluation order.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);
  /// Stream keyed by a domain name, e.g. Rng::domain(seed, "data.noise").
  static Rng domain(std::uint64_t seed, std::string_view name);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()();

  /// Uniform on the open interval (0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal (Box-Muller).
  double normal();
  /// Integer uniform on [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream.
  Rng fork(std::uint64_t stream) const;
  Rng fork(std::string_view name) const;

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

}  // namespace imf
