#include "bundleseg/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

#include "bundleseg/rng.hpp"

namespace bundleseg::ops {
namespace {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

// Unfolds one (C, H, W) item into a (C*k*k, H*W) matrix for "same" padding.
template <typename S>
void im2col(const S* x, int channels, int h, int w, int k, S* cols) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    const S* src = x + c * plane;
    for (int di = 0; di < k; ++di) {
      for (int dj = 0; dj < k; ++dj) {
        S* row = cols + ((static_cast<std::size_t>(c) * k + di) * k + dj) * plane;
        const int oi = di - pad;
        const int oj = dj - pad;
        const int j_lo = std::max(0, -oj);
        const int j_hi = std::min(w, w - oj);
        for (int i = 0; i < h; ++i) {
          S* dst = row + static_cast<std::size_t>(i) * w;
          const int si = i + oi;
          if (si < 0 || si >= h) {
            std::fill(dst, dst + w, S{0});
            continue;
          }
          std::fill(dst, dst + j_lo, S{0});
          const S* s = src + static_cast<std::size_t>(si) * w + oj;
          std::copy(s + j_lo, s + j_hi, dst + j_lo);
          std::fill(dst + j_hi, dst + w, S{0});
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image.
template <typename S>
void col2im(const S* cols, int channels, int h, int w, int k, S* dx) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::fill(dx, dx + channels * plane, S{0});
  for (int c = 0; c < channels; ++c) {
    S* dst_plane = dx + c * plane;
    for (int di = 0; di < k; ++di) {
      for (int dj = 0; dj < k; ++dj) {
        const S* row = cols + ((static_cast<std::size_t>(c) * k + di) * k + dj) * plane;
        const int oi = di - pad;
        const int oj = dj - pad;
        const int j_lo = std::max(0, -oj);
        const int j_hi = std::min(w, w - oj);
        for (int i = 0; i < h; ++i) {
          const int si = i + oi;
          if (si < 0 || si >= h) continue;
          const S* src = row + static_cast<std::size_t>(i) * w;
          S* d = dst_plane + static_cast<std::size_t>(si) * w + oj;
          for (int j = j_lo; j < j_hi; ++j) d[j] += src[j];
        }
      }
    }
  }
}

template <typename S>
void check_conv_shapes(const Tensor4<S>& x, const ParamTensor<S>& weights, const ParamTensor<S>& bias) {
  if (weights.shape.size() != 4 || weights.dim(2) != weights.dim(3) || weights.dim(2) % 2 == 0) {
    throw ShapeError("conv2d weights must be (Cout, Cin, k, k) with odd k");
  }
  if (weights.dim(1) != x.c) {
    throw ShapeError("conv2d expects " + std::to_string(weights.dim(1)) + " input channels, got " +
                     std::to_string(x.c));
  }
  if (bias.size() != static_cast<std::size_t>(weights.dim(0))) throw ShapeError("conv2d bias size mismatch");
}

}  // namespace

template <typename S>
Tensor4<S> conv2d(const Tensor4<S>& x, const ParamTensor<S>& weights, const ParamTensor<S>& bias) {
  check_conv_shapes(x, weights, bias);
  const int cout = weights.dim(0);
  const int k = weights.dim(2);
  const int kdim = x.c * k * k;
  const int hw = static_cast<int>(x.plane());
  Tensor4<S> y(x.n, cout, x.h, x.w);
  ConstMatMap<S> wmat(weights.values.data(), cout, kdim);
  std::vector<S> cols(k == 1 ? 0 : static_cast<std::size_t>(kdim) * hw);
  for (int b = 0; b < x.n; ++b) {
    const S* colp = x.item(b);
    if (k != 1) {
      im2col(x.item(b), x.c, x.h, x.w, k, cols.data());
      colp = cols.data();
    }
    MatMap<S> out(y.item(b), cout, hw);
    out.noalias() = wmat * ConstMatMap<S>(colp, kdim, hw);
    for (int o = 0; o < cout; ++o) out.row(o).array() += bias.values[o];
  }
  return y;
}

template <typename S>
Tensor4<S> conv2d_backward(const Tensor4<S>& x, const ParamTensor<S>& weights, const Tensor4<S>& dy,
                           ParamTensor<S>& dweights, ParamTensor<S>& dbias, bool want_input_grad) {
  const int cout = weights.dim(0);
  const int k = weights.dim(2);
  const int kdim = x.c * k * k;
  const int hw = static_cast<int>(x.plane());
  if (dy.n != x.n || dy.c != cout || dy.h != x.h || dy.w != x.w) throw ShapeError("conv2d upstream gradient shape");
  ConstMatMap<S> wmat(weights.values.data(), cout, kdim);
  MatMap<S> dw(dweights.values.data(), cout, kdim);
  Tensor4<S> dx;
  if (want_input_grad) dx = Tensor4<S>(x.n, x.c, x.h, x.w);
  std::vector<S> cols(k == 1 ? 0 : static_cast<std::size_t>(kdim) * hw);
  std::vector<S> dcols(want_input_grad && k != 1 ? static_cast<std::size_t>(kdim) * hw : 0);
  for (int b = 0; b < x.n; ++b) {
    const S* colp = x.item(b);
    if (k != 1) {
      im2col(x.item(b), x.c, x.h, x.w, k, cols.data());
      colp = cols.data();
    }
    ConstMatMap<S> g(dy.item(b), cout, hw);
    dw.noalias() += g * ConstMatMap<S>(colp, kdim, hw).transpose();
    // plain loop: Eigen's vectorized sum peels by address alignment, which
    // would make the result depend on where the allocator put the buffer
    for (int o = 0; o < cout; ++o) {
      const S* row = dy.item(b) + static_cast<std::size_t>(o) * hw;
      S acc{};
      for (int i = 0; i < hw; ++i) acc += row[i];
      dbias.values[o] += acc;
    }
    if (want_input_grad) {
      if (k == 1) {
        MatMap<S>(dx.item(b), kdim, hw).noalias() = wmat.transpose() * g;
      } else {
        MatMap<S>(dcols.data(), kdim, hw).noalias() = wmat.transpose() * g;
        col2im(dcols.data(), x.c, x.h, x.w, k, dx.item(b));
      }
    }
  }
  return dx;
}

template <typename S>
Tensor4<S> relu(const Tensor4<S>& x) {
  Tensor4<S> y = x;
  for (auto& v : y.data) v = v > S{0} ? v : S{0};
  return y;
}

template <typename S>
Tensor4<S> relu_backward(const Tensor4<S>& y, const Tensor4<S>& dy) {
  if (!y.same_shape(dy)) throw ShapeError("relu upstream gradient shape");
  Tensor4<S> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!(y.data[i] > S{0})) dx.data[i] = S{0};
  }
  return dx;
}

template <typename S>
Pooled<S> maxpool2(const Tensor4<S>& x) {
  if (x.h % 2 != 0 || x.w % 2 != 0) throw ShapeError("maxpool2 needs even height and width, got " + x.shape());
  Pooled<S> r{Tensor4<S>(x.n, x.c, x.h / 2, x.w / 2), {}};
  r.argmax.resize(r.out.size());
  std::size_t o = 0;
  for (int b = 0; b < x.n; ++b) {
    for (int c = 0; c < x.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(b) * x.c + c) * x.plane();
      for (int i = 0; i < x.h / 2; ++i) {
        for (int j = 0; j < x.w / 2; ++j, ++o) {
          // Scan in flat order with strict '>' so ties keep the lowest index.
          const std::size_t cand[4] = {base + (2 * i) * x.w + 2 * j, base + (2 * i) * x.w + 2 * j + 1,
                                       base + (2 * i + 1) * x.w + 2 * j, base + (2 * i + 1) * x.w + 2 * j + 1};
          std::size_t best = cand[0];
          for (int t = 1; t < 4; ++t) {
            if (x.data[cand[t]] > x.data[best]) best = cand[t];
          }
          r.out.data[o] = x.data[best];
          r.argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return r;
}

template <typename S>
Tensor4<S> maxpool2_backward(const Pooled<S>& pooled, const Tensor4<S>& x_shape, const Tensor4<S>& dy) {
  if (pooled.argmax.size() != dy.size()) throw ShapeError("maxpool2 upstream gradient shape");
  Tensor4<S> dx(x_shape.n, x_shape.c, x_shape.h, x_shape.w);
  for (std::size_t o = 0; o < dy.size(); ++o) dx.data[pooled.argmax[o]] += dy.data[o];
  return dx;
}

template <typename S>
Tensor4<S> upconv2(const Tensor4<S>& x, const ParamTensor<S>& weights) {
  if (weights.shape.size() != 4 || weights.dim(0) != x.c || weights.dim(2) != 2 || weights.dim(3) != 2) {
    throw ShapeError("upconv2 weights must be (Cin=" + std::to_string(x.c) + ", Cout, 2, 2)");
  }
  const int cout = weights.dim(1);
  const int hw = static_cast<int>(x.plane());
  Tensor4<S> y(x.n, cout, 2 * x.h, 2 * x.w);
  // (Cout*4, Cin) = W^T with W viewed as (Cin, Cout*4).
  ConstMatMap<S> wmat(weights.values.data(), x.c, cout * 4);
  RowMatrix<S> taps(cout * 4, hw);
  for (int b = 0; b < x.n; ++b) {
    taps.noalias() = wmat.transpose() * ConstMatMap<S>(x.item(b), x.c, hw);
    S* out = y.item(b);
    for (int o = 0; o < cout; ++o) {
      for (int t = 0; t < 4; ++t) {
        const int a = t / 2;
        const int d = t % 2;
        const S* src = taps.data() + (static_cast<std::size_t>(o) * 4 + t) * hw;
        S* dst = out + static_cast<std::size_t>(o) * y.plane();
        for (int i = 0; i < x.h; ++i) {
          for (int j = 0; j < x.w; ++j) dst[(2 * i + a) * y.w + 2 * j + d] = src[i * x.w + j];
        }
      }
    }
  }
  return y;
}

template <typename S>
Tensor4<S> upconv2_backward(const Tensor4<S>& x, const ParamTensor<S>& weights, const Tensor4<S>& dy,
                            ParamTensor<S>& dweights) {
  const int cout = weights.dim(1);
  const int hw = static_cast<int>(x.plane());
  if (dy.n != x.n || dy.c != cout || dy.h != 2 * x.h || dy.w != 2 * x.w) {
    throw ShapeError("upconv2 upstream gradient shape");
  }
  ConstMatMap<S> wmat(weights.values.data(), x.c, cout * 4);
  MatMap<S> dw(dweights.values.data(), x.c, cout * 4);
  Tensor4<S> dx(x.n, x.c, x.h, x.w);
  RowMatrix<S> dtaps(cout * 4, hw);
  for (int b = 0; b < x.n; ++b) {
    const S* g = dy.item(b);
    for (int o = 0; o < cout; ++o) {
      for (int t = 0; t < 4; ++t) {
        const int a = t / 2;
        const int d = t % 2;
        S* dst = dtaps.data() + (static_cast<std::size_t>(o) * 4 + t) * hw;
        const S* src = g + static_cast<std::size_t>(o) * dy.plane();
        for (int i = 0; i < x.h; ++i) {
          for (int j = 0; j < x.w; ++j) dst[i * x.w + j] = src[(2 * i + a) * dy.w + 2 * j + d];
        }
      }
    }
    ConstMatMap<S> xm(x.item(b), x.c, hw);
    dw.noalias() += xm * dtaps.transpose();
    MatMap<S>(dx.item(b), x.c, hw).noalias() = wmat * dtaps;
  }
  return dx;
}

template <typename S>
Tensor4<S> concat_channels(const Tensor4<S>& a, const Tensor4<S>& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) {
    throw ShapeError("concat_channels spatial mismatch " + a.shape() + " vs " + b.shape());
  }
  Tensor4<S> y(a.n, a.c + b.c, a.h, a.w);
  for (int i = 0; i < a.n; ++i) {
    std::copy(a.item(i), a.item(i) + a.item_size(), y.item(i));
    std::copy(b.item(i), b.item(i) + b.item_size(), y.item(i) + a.item_size());
  }
  return y;
}

template <typename S>
std::pair<Tensor4<S>, Tensor4<S>> concat_channels_backward(const Tensor4<S>& dy, int channels_a) {
  if (channels_a < 0 || channels_a > dy.c) throw ShapeError("concat_channels split out of range");
  Tensor4<S> da(dy.n, channels_a, dy.h, dy.w);
  Tensor4<S> db(dy.n, dy.c - channels_a, dy.h, dy.w);
  for (int i = 0; i < dy.n; ++i) {
    const S* src = dy.item(i);
    std::copy(src, src + da.item_size(), da.item(i));
    std::copy(src + da.item_size(), src + dy.item_size(), db.item(i));
  }
  return {std::move(da), std::move(db)};
}

void check_dropout_probability(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0,1), got " + std::to_string(p));
}

template <typename S>
Tensor4<S> dropout(const Tensor4<S>& x, double p, std::uint64_t seed, Mode mode, DropoutMask<S>* mask) {
  check_dropout_probability(p);
  if (mask != nullptr) mask->scale.clear();
  if (mode == Mode::Eval || p == 0.0) return x;
  SplitMix64 rng(seed);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  const float threshold = static_cast<float>(p);
  Tensor4<S> y = x;
  std::vector<S> scale(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    scale[i] = rng.uniform_float() < threshold ? S{0} : keep_scale;
    y.data[i] *= scale[i];
  }
  if (mask != nullptr) mask->scale = std::move(scale);
  return y;
}

template <typename S>
Tensor4<S> dropout_backward(const DropoutMask<S>& mask, const Tensor4<S>& dy) {
  if (mask.scale.empty()) return dy;
  if (mask.scale.size() != dy.size()) throw ShapeError("dropout upstream gradient shape");
  Tensor4<S> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= mask.scale[i];
  return dx;
}

template <typename S>
Tensor4<S> softmax2(const Tensor4<S>& logits) {
  if (logits.c != 2) throw ShapeError("softmax2 needs exactly 2 channels, got " + std::to_string(logits.c));
  Tensor4<S> p(logits.n, 2, logits.h, logits.w);
  const std::size_t plane = logits.plane();
  for (int b = 0; b < logits.n; ++b) {
    const S* z0 = logits.item(b);
    const S* z1 = z0 + plane;
    S* p0 = p.item(b);
    S* p1 = p0 + plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const S m = std::max(z0[i], z1[i]);
      const S e0 = std::exp(z0[i] - m);
      const S e1 = std::exp(z1[i] - m);
      const S inv = S{1} / (e0 + e1);
      p0[i] = e0 * inv;
      p1[i] = e1 * inv;
    }
  }
  return p;
}

template <typename S>
Tensor4<S> softmax2_backward(const Tensor4<S>& probs, const Tensor4<S>& dy) {
  if (!probs.same_shape(dy) || probs.c != 2) throw ShapeError("softmax2 upstream gradient shape");
  Tensor4<S> dx(dy.n, 2, dy.h, dy.w);
  const std::size_t plane = dy.plane();
  for (int b = 0; b < dy.n; ++b) {
    const S* p = probs.item(b);
    const S* g = dy.item(b);
    S* d = dx.item(b);
    for (std::size_t i = 0; i < plane; ++i) {
      const S dot = p[i] * g[i] + p[plane + i] * g[plane + i];
      d[i] = p[i] * (g[i] - dot);
      d[plane + i] = p[plane + i] * (g[plane + i] - dot);
    }
  }
  return dx;
}

#define BUNDLESEG_INSTANTIATE_OPS(S)                                                                          \
  template Tensor4<S> conv2d(const Tensor4<S>&, const ParamTensor<S>&, const ParamTensor<S>&);             \
  template Tensor4<S> conv2d_backward(const Tensor4<S>&, const ParamTensor<S>&, const Tensor4<S>&,         \
                                      ParamTensor<S>&, ParamTensor<S>&, bool);                             \
  template Tensor4<S> relu(const Tensor4<S>&);                                                             \
  template Tensor4<S> relu_backward(const Tensor4<S>&, const Tensor4<S>&);                                 \
  template Pooled<S> maxpool2(const Tensor4<S>&);                                                          \
  template Tensor4<S> maxpool2_backward(const Pooled<S>&, const Tensor4<S>&, const Tensor4<S>&);           \
  template Tensor4<S> upconv2(const Tensor4<S>&, const ParamTensor<S>&);                                   \
  template Tensor4<S> upconv2_backward(const Tensor4<S>&, const ParamTensor<S>&, const Tensor4<S>&,        \
                                       ParamTensor<S>&);                                                   \
  template Tensor4<S> concat_channels(const Tensor4<S>&, const Tensor4<S>&);                               \
  template std::pair<Tensor4<S>, Tensor4<S>> concat_channels_backward(const Tensor4<S>&, int);             \
  template Tensor4<S> dropout(const Tensor4<S>&, double, std::uint64_t, Mode, DropoutMask<S>*);            \
  template Tensor4<S> dropout_backward(const DropoutMask<S>&, const Tensor4<S>&);                          \
  template Tensor4<S> softmax2(const Tensor4<S>&);                                                         \
  template Tensor4<S> softmax2_backward(const Tensor4<S>&, const Tensor4<S>&);

BUNDLESEG_INSTANTIATE_OPS(float)
BUNDLESEG_INSTANTIATE_OPS(double)

}  // namespace bundleseg::ops
