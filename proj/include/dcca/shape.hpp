#pragma once

#include <cstddef>
#include <string>

namespace dcca {

/// Per-sample tensor geometry: rank 3 is channels x height x width, rank 1 is
/// a flat feature vector stored in `channels`.
struct Shape {
  std::size_t channels = 0;
  std::size_t height = 1;
  std::size_t width = 1;
  unsigned rank = 3;

  static Shape flat(std::size_t features) { return {features, 1, 1, 1}; }
  static Shape image(std::size_t c, std::size_t h, std::size_t w) { return {c, h, w, 3}; }

  std::size_t plane() const noexcept { return height * width; }
  std::size_t size() const noexcept { return channels * height * width; }
  std::string str() const {
    if (rank == 1) return std::to_string(channels);
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

}  // namespace dcca
