#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace bipars {

using Rng = std::mt19937_64;

/// Seed for the named substream `name` of a run with master seed `master`.
/// Streams are keyed by name, so adding a consumer to one stream never
/// shifts the draws of another.
std::uint64_t substream_seed(std::uint64_t master, std::string_view name);

inline Rng make_stream(std::uint64_t master, std::string_view name) { return Rng(substream_seed(master, name)); }

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& text);

/// Uniform in [0, 1).
inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace bipars
