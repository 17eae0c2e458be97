#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "stgcvae/diffcore.hpp"
#include "stgcvae/rng.hpp"
#include "stgcvae/trajdata.hpp"

namespace testing_support {

using namespace stgcvae;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Central-difference gradient of a scalar function of one tensor.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-6) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// Window of straight walkers, one per agent, spaced 2 m apart.
inline SequenceWindow line_window(std::size_t agents, std::size_t frames = kSeqLen, double vx = 0.4) {
  SequenceWindow w;
  w.scene = "toy";
  w.positions = Tensor({frames, agents, 2});
  for (std::size_t a = 0; a < agents; ++a) {
    w.agent_ids.push_back(static_cast<std::int32_t>(a));
    for (std::size_t t = 0; t < frames; ++t) {
      w.positions.at(t, a, 0) = vx * static_cast<double>(t);
      w.positions.at(t, a, 1) = 2.0 * static_cast<double>(a);
    }
  }
  return w;
}

inline SequenceWindow random_window(std::size_t agents, Rng& rng, std::size_t frames = kSeqLen) {
  SequenceWindow w;
  w.scene = "random";
  w.positions = Tensor({frames, agents, 2});
  for (std::size_t a = 0; a < agents; ++a) {
    w.agent_ids.push_back(static_cast<std::int32_t>(a));
    double x = rng.uniform(-4.0, 4.0), y = rng.uniform(-4.0, 4.0);
    for (std::size_t t = 0; t < frames; ++t) {
      x += rng.uniform(-0.5, 0.5);
      y += rng.uniform(-0.5, 0.5);
      w.positions.at(t, a, 0) = x;
      w.positions.at(t, a, 1) = y;
    }
  }
  return w;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "stgcvae_test";
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace testing_support
