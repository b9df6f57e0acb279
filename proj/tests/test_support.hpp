#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "repspace/common.hpp"

namespace testing_support {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = info ? std::string(info->test_suite_name()) + "." + info->name() : "repspace";
    for (char& c : name)
      if (c == '/') c = '_';
    path_ = fs::temp_directory_path() / ("repspace-test-" + name);
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline repspace::Matrix random_matrix(Eigen::Index r, Eigen::Index c, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  repspace::Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

inline repspace::Vector random_vector(Eigen::Index n, unsigned seed) {
  return random_matrix(n, 1, seed).col(0);
}

}  // namespace testing_support
