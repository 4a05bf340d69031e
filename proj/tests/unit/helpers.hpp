#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <random>
#include <string>

#include "scalenet/checkpoint.hpp"
#include "scalenet/data.hpp"
#include "scalenet/image.hpp"

// Short descriptions for assertion messages.
namespace scalenet {
inline std::ostream& operator<<(std::ostream& os, const ImageTensor& t) {
  return os << "ImageTensor(" << t.height() << "x" << t.width() << "x" << t.channels() << ")";
}
inline std::ostream& operator<<(std::ostream& os, const WeightArray& w) {
  os << "WeightArray(";
  for (auto d : w.shape) os << d << ",";
  return os << ")";
}
}  // namespace scalenet

namespace testutil {

inline scalenet::ImageTensor random_image(int h, int w, int c, std::uint64_t seed, bool integral = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 255.0);
  scalenet::ImageTensor img(h, w, c);
  for (auto& v : img.data()) v = integral ? std::floor(u(rng)) : u(rng);
  return img;
}

inline scalenet::ImageSet random_images(int n, int h, int w, int c, std::uint64_t seed) {
  scalenet::ImageSet out;
  for (int i = 0; i < n; ++i) out.push_back(random_image(h, w, c, seed * 1000003ULL + static_cast<std::uint64_t>(i)));
  return out;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("scalenet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small synthetic labeled set shared by the training tests.
inline const scalenet::LabeledImages& tiny_labeled() {
  static const auto data = scalenet::synthesize_cifar_like(32, 7);
  return data;
}

}  // namespace testutil
