#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace ntkstop {

using Engine = std::mt19937_64;

/// Labels for the independent random substreams used by experiments.
enum class Stream : std::uint64_t {
  Data = 1,
  Noise = 2,
  Target = 3,
  Init = 4,
  Quadrature = 5,
  Test = 6,
  Grid = 7,
};

/// Engine seeded from a master seed plus an arbitrary tuple of labels.
/// Distinct label tuples give statistically independent streams.
inline Engine make_engine(std::uint64_t seed, std::initializer_list<std::uint64_t> labels = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * labels.size());
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (auto label : labels) push(label);
  std::seed_seq seq(words.begin(), words.end());
  return Engine(seq);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> labels) {
  auto engine = make_engine(seed, labels);
  return engine();
}

inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  return derive_seed(seed, {static_cast<std::uint64_t>(stream), a, b});
}

}  // namespace ntkstop
