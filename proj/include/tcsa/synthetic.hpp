#pragma once

#include <random>
#include <vector>

#include "tcsa/tensor.hpp"

namespace tcsa {

// Deterministic synthetic segmentation sample: class 0 background, a filled
// disc of class 1 and, with 3+ classes, an axis-aligned rectangle of class 2.
// Channels encode the class with mild seeded noise.
template <class T>
struct SyntheticSample {
  TensorT<T> image;          // [1,H,W,3], values in [0,1]
  std::vector<int> target;   // H*W class indices
};

template <class T>
SyntheticSample<T> make_synthetic_sample(std::size_t height, std::size_t width,
                                         std::size_t num_classes, std::uint64_t seed) {
  SyntheticSample<T> s;
  s.image = TensorT<T>({1, height, width, 3});
  s.target.assign(height * width, 0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-0.05, 0.05);

  const double cy = height * 0.38, cx = width * 0.36, radius = std::min(height, width) * 0.22;
  const std::size_t ry0 = height * 5 / 8, ry1 = height * 7 / 8;
  const std::size_t rx0 = width * 9 / 16, rx1 = width * 7 / 8;

  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      int cls = 0;
      const double dy = y - cy, dx = x - cx;
      if (dy * dy + dx * dx <= radius * radius) cls = 1;
      if (num_classes > 2 && y >= ry0 && y < ry1 && x >= rx0 && x < rx1) cls = 2;
      s.target[y * width + x] = cls;
      double rgb[3] = {0.15, 0.15, 0.2};
      if (cls == 1) {
        rgb[0] = 0.85;
        rgb[1] = 0.3;
        rgb[2] = 0.25;
      } else if (cls == 2) {
        rgb[0] = 0.2;
        rgb[1] = 0.75;
        rgb[2] = 0.85;
      }
      for (std::size_t c = 0; c < 3; ++c)
        s.image.at(0, y, x, c) = static_cast<T>(std::clamp(rgb[c] + noise(rng), 0.0, 1.0));
    }
  return s;
}

}  // namespace tcsa
