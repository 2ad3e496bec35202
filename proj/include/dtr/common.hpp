#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <random>
#include <string_view>

namespace spdlog {
class logger;
}

namespace dtr {

inline constexpr const char* kVersion = "0.1.0";

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

/// SplitMix64 finaliser. Every derived seed in the library goes through this mix so
/// that per-tree, per-fold and per-run streams are independent of scheduling order.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for the `index`-th child stream of `master`: mix64(master ^ mix64(index + 1)).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
  return mix64(master ^ mix64(index + 1));
}

/// 64-bit FNV-1a, used to key seeds by name (method names) rather than by position.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Shared library logger (stderr, warnings by default).
spdlog::logger& logger();

/// Upper bound on worker threads used by the OpenMP kernels. 0 restores the runtime default.
void set_thread_cap(int threads);
int thread_cap();

/// How a data-parallel kernel is executed. `serial` is the reference path used by tests.
enum class Execution { serial, parallel };

}  // namespace dtr
