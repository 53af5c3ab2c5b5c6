#pragma once

// Bitwise target encoding: a value in [lo, hi] is quantized onto 2^B levels
// and written as B binary decisions, most significant first. Bit i answers
// "is the value in the upper half of the current subdivision", so each extra
// bit halves the reconstruction error.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "focalpyr/errors.hpp"

namespace focalpyr {

enum class DecodeMode { threshold, expected };

inline std::string to_string(DecodeMode mode) {
  return mode == DecodeMode::threshold ? "threshold" : "expected";
}

inline DecodeMode parse_decode_mode(const std::string& name) {
  if (name == "threshold") return DecodeMode::threshold;
  if (name == "expected") return DecodeMode::expected;
  throw ConfigError("unknown decode mode '" + name + "' (expected threshold|expected)");
}

class BitCodec {
 public:
  static constexpr int max_bits = 52;

  BitCodec(double lo, double hi, int bits) : lo_(lo), hi_(hi), bits_(bits) {
    if (!(std::isfinite(lo) && std::isfinite(hi) && lo < hi))
      throw ParameterError("codec range requires finite lo < hi");
    if (bits < 1 || bits > max_bits)
      throw ParameterError("codec bit depth must be in [1, " + std::to_string(max_bits) + "], got " +
                           std::to_string(bits));
  }

  double lo() const { return lo_; }
  double hi() const { return hi_; }
  int bits() const { return bits_; }
  std::uint64_t levels() const { return std::uint64_t{1} << bits_; }
  // Worst-case |decode(encode(v)) - v| for v in [lo, hi]: half a bin.
  double max_error() const { return (hi_ - lo_) / std::ldexp(1.0, bits_ + 1); }

  // Quantization level; values outside [lo, hi] clamp to the end bins.
  std::uint64_t level(double v) const {
    if (!std::isfinite(v)) throw DomainError("codec: cannot encode a non-finite value");
    const double scaled = std::floor((v - lo_) / (hi_ - lo_) * std::ldexp(1.0, bits_));
    if (scaled <= 0.0) return 0;
    const double top = static_cast<double>(levels() - 1);
    return scaled >= top ? levels() - 1 : static_cast<std::uint64_t>(scaled);
  }

  std::vector<std::uint8_t> encode(double v) const {
    const std::uint64_t q = level(v);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(bits_));
    for (int i = 0; i < bits_; ++i) out[static_cast<std::size_t>(i)] = (q >> (bits_ - 1 - i)) & 1U;
    return out;
  }

  // Bin-center reconstruction of a level (fractional levels allowed).
  double decode_level(double q) const {
    return lo_ + (q + 0.5) / std::ldexp(1.0, bits_) * (hi_ - lo_);
  }

  double decode(std::span<const std::uint8_t> bits) const {
    if (bits.size() != static_cast<std::size_t>(bits_))
      throw ContractError("codec: expected " + std::to_string(bits_) + " bits, got " +
                          std::to_string(bits.size()));
    std::uint64_t q = 0;
    for (std::uint8_t b : bits) {
      if (b > 1) throw DomainError("codec: bit values must be 0 or 1");
      q = (q << 1) | b;
    }
    return decode_level(static_cast<double>(q));
  }

  // Decodes per-bit probabilities. threshold: bit = p >= 0.5 (ties go to 1).
  // expected: E[q] = sum_i p_i 2^(B-1-i) under independent bits.
  double decode_probabilistic(std::span<const double> p, DecodeMode mode) const {
    if (p.size() != static_cast<std::size_t>(bits_))
      throw ContractError("codec: expected " + std::to_string(bits_) + " probabilities, got " +
                          std::to_string(p.size()));
    for (double x : p)
      if (!(x >= 0.0 && x <= 1.0)) throw DomainError("codec: probability " + std::to_string(x) + " outside [0,1]");
    if (mode == DecodeMode::threshold) {
      std::vector<std::uint8_t> hard(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) hard[i] = p[i] >= 0.5 ? 1 : 0;
      return decode(hard);
    }
    double q = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) q += p[i] * std::ldexp(1.0, bits_ - 1 - static_cast<int>(i));
    return decode_level(q);
  }

 private:
  double lo_, hi_;
  int bits_;
};

}  // namespace focalpyr
