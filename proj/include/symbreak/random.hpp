#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>

namespace symbreak {

/// Finalizer from SplitMix64. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Counter-based random stream.
///
/// Word `c` of a stream is a pure function of (key, c), so a stream can be
/// split into independent children by id without touching shared state. Two
/// streams built from the same key produce the same sequence, which is what
/// lets Monte-Carlo trials run in any order and still be bit-identical.
class Stream {
 public:
  using result_type = std::uint64_t;

  constexpr Stream() noexcept = default;
  constexpr explicit Stream(std::uint64_t seed) noexcept : key_(mix64(seed ^ 0x5EEDULL)) {}

  /// Child stream keyed by `id`. Does not advance this stream.
  [[nodiscard]] constexpr Stream split(std::uint64_t id) const noexcept {
    Stream s;
    s.key_ = mix64(key_ ^ mix64(id + 0xA5A5A5A5A5A5A5A5ULL));
    return s;
  }

  [[nodiscard]] constexpr Stream split(std::uint64_t a, std::uint64_t b) const noexcept {
    return split(a).split(b);
  }

  constexpr result_type operator()() noexcept { return mix64(key_ + 0x2545F4914F6CDD1DULL * ++counter_); }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  /// Uniform in [0, 1) with 24 bits of resolution (exact in float).
  float uniform_float() noexcept { return static_cast<float>((*this)() >> 40) * 0x1.0p-24f; }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform_double() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Lemire's nearly-divisionless rejection.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    for (;;) {
      const unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
      const auto low = static_cast<std::uint64_t>(m);
      if (low >= n || low >= (-n) % n) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  bool bernoulli(double p) noexcept { return uniform_double() < p; }

  [[nodiscard]] constexpr std::uint64_t words_consumed() const noexcept { return counter_; }

 private:
  std::uint64_t key_ = mix64(0x5EEDULL);
  std::uint64_t counter_ = 0;
};

/// Hands out one bit at a time from an underlying stream, MSB of each word
/// first. `bits_consumed()` counts bits actually handed out.
class BitSource {
 public:
  explicit BitSource(Stream stream) noexcept : stream_(stream) {}

  bool next_bit() noexcept {
    if (available_ == 0) {
      word_ = stream_();
      available_ = 64;
    }
    --available_;
    ++consumed_;
    return ((word_ >> available_) & 1U) != 0;
  }

  [[nodiscard]] std::uint64_t bits_consumed() const noexcept { return consumed_; }

 private:
  Stream stream_;
  std::uint64_t word_ = 0;
  int available_ = 0;
  std::uint64_t consumed_ = 0;
};

}  // namespace symbreak
