#pragma once

#include "prisp/matrix.hpp"

#include <cstring>
#include <filesystem>
#include <random>
#include <string>

namespace prisp::testutil {

inline bool bitwise_equal(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(),
                     size_t(a.size()) * sizeof(double)) == 0;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

// Scratch directory unique to the current test binary run.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("prisp_test_" + std::to_string(::getpid())) / name;
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace prisp::testutil
