#pragma once

#include "prisp/matrix.hpp"

#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace prisp {

// Counter-based splittable generator. Each draw hashes (key, counter) with the
// splitmix64 finalizer, so a value's position in the stream depends only on the
// seed and how many draws preceded it. split() derives an independent child key
// from a label without consuming any draws from the parent, which lets callers
// hand out per-user / per-epoch streams that stay stable when sibling code adds
// or removes draws of its own.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix64(seed ^ kGolden)) {}

  Rng split(uint64_t label) const {
    return Rng(key_, mix64(key_ ^ mix64(label + kGolden)));
  }

  Rng split(std::string_view label) const { return split(fnv1a64(label)); }

  uint64_t next_u64() { return mix64(key_ + (++counter_) * kGolden); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Inclusive on both ends.
  int uniform_int(int lo, int hi) {
    return lo + int(next_u64() % uint64_t(hi - lo + 1));
  }

  // Standard normal via Box-Muller; the sine mate of each pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  Mat normal_mat(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Mat out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        out(i, j) = stddev * normal();
      }
    }
    return out;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = next_u64() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

  // Picks k distinct indices from [0, n) in draw order.
  std::vector<int> sample_indices(int n, int k) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
    shuffle(idx);
    idx.resize(size_t(k));
    return idx;
  }

  static uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  Rng(uint64_t, uint64_t child_key) : key_(child_key) {}

  static uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  uint64_t key_ = 0;
  uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace prisp
