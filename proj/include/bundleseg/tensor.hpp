#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bundleseg/errors.hpp"

namespace bundleseg {

/// Batch of 2D multi-channel images in NCHW order (width fastest).
template <typename S>
struct Tensor4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<S> data;

  Tensor4() = default;
  // A zero channel count is allowed; it is the neutral element of concat_channels.
  Tensor4(int batch, int channels, int height, int width, S fill = S{})
      : n(batch), c(channels), h(height), w(width) {
    if (batch < 1 || channels < 0 || height < 1 || width < 1) {
      throw ShapeError("invalid tensor shape " + shape_string(batch, channels, height, width));
    }
    data.assign(static_cast<std::size_t>(batch) * channels * height * width, fill);
  }

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t item_size() const { return static_cast<std::size_t>(c) * plane(); }

  S& operator()(int b, int ch, int i, int j) {
    return data[((static_cast<std::size_t>(b) * c + ch) * h + i) * w + j];
  }
  const S& operator()(int b, int ch, int i, int j) const {
    return data[((static_cast<std::size_t>(b) * c + ch) * h + i) * w + j];
  }

  S* item(int b) { return data.data() + static_cast<std::size_t>(b) * item_size(); }
  const S* item(int b) const { return data.data() + static_cast<std::size_t>(b) * item_size(); }

  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape() const { return shape_string(n, c, h, w); }

  static std::string shape_string(int b, int ch, int hh, int ww) {
    return "(" + std::to_string(b) + "," + std::to_string(ch) + "," + std::to_string(hh) + "," +
           std::to_string(ww) + ")";
  }
};

/// A learnable parameter grid (or its gradient) with an explicit shape.
template <typename S>
struct ParamTensor {
  std::vector<int> shape;
  std::vector<S> values;

  ParamTensor() = default;
  explicit ParamTensor(std::vector<int> dims, S fill = S{}) : shape(std::move(dims)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    values.assign(count, fill);
  }

  std::size_t size() const { return values.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
};

}  // namespace bundleseg
