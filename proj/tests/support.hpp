#pragma once

// Shared generators and fixtures for the unit and acceptance suites.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "vekit/vekit.hpp"

namespace vekit::test {

inline std::string data_path(const std::string& name) { return std::string(VEKIT_TEST_DATA) + "/" + name; }

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data) v = static_cast<real>(rng.uniform(lo, hi));
  return t;
}

inline std::vector<std::int32_t> random_tokens(Rng& rng, std::size_t length, std::size_t vocab) {
  std::vector<std::int32_t> ids(length);
  for (auto& id : ids) id = static_cast<std::int32_t>(2 + rng.index(vocab - 2));
  return ids;
}

/// Grid features with d x d objects of width k.
inline FeatureSet random_grid(Rng& rng, const std::string& id, std::size_t k, std::size_t d) {
  FeatureSet fs;
  fs.image_id = id;
  fs.kind = FeatureKind::grid;
  fs.grid_k = k;
  fs.grid_d = d;
  fs.objects = random_tensor(rng, {d * d, k}, 0.0, 1.0);
  return fs;
}

inline FeatureSet random_roi(Rng& rng, const std::string& id, std::size_t k, std::size_t m) {
  FeatureSet fs;
  fs.image_id = id;
  fs.kind = FeatureKind::roi;
  if (m > 0) fs.objects = random_tensor(rng, {m, k}, 0.0, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto x = static_cast<float>(rng.uniform(0, 200));
    const auto y = static_cast<float>(rng.uniform(0, 200));
    fs.boxes.push_back({x, y, x + static_cast<float>(rng.uniform(1, 100)), y + static_cast<float>(rng.uniform(1, 100))});
  }
  return fs;
}

/// Small dimensions used by gradient checks.
inline ModelDims toy_dims(std::size_t vocab = 8, std::size_t k = 6) {
  ModelDims d;
  d.vocab = vocab;
  d.embed = 4;
  d.hidden = 5;
  d.classifier = 4;
  d.feature = k;
  d.rn_hidden = 4;
  d.fusion = 4;
  return d;
}

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("vekit-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
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
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

}  // namespace vekit::test
