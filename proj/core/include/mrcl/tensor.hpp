#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <vector>

namespace mrcl {

/// Dense row-major matrix; rows are tokens or batch items throughout the library.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// HxWxC image with interleaved channels, values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  [[nodiscard]] std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int y, int x, int c) { return data[index(y, x, c)]; }
  [[nodiscard]] float at(int y, int x, int c) const { return data[index(y, x, c)]; }
  [[nodiscard]] bool empty() const { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace mrcl
