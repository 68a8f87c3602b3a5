#pragma once

// Forward and backward kernels for every layer of the U-Net. Each backward
// takes the upstream gradient and returns the input gradient; parameter
// gradients are accumulated (+=) into caller-owned ParamTensors, so a batch
// can be reduced item by item in a fixed order.
//
// All kernels are instantiated for float (training) and double (gradient
// verification).

#include <cstdint>
#include <utility>
#include <vector>

#include "bundleseg/tensor.hpp"

namespace bundleseg::ops {

enum class Mode { Train, Eval };

/// Stride-1 convolution with an odd square kernel and "same" zero padding.
/// weights: (Cout, Cin, k, k), bias: (Cout).
template <typename S>
Tensor4<S> conv2d(const Tensor4<S>& x, const ParamTensor<S>& weights, const ParamTensor<S>& bias);

/// Accumulates into dweights/dbias. The input gradient is skipped (and an
/// empty tensor returned) when `want_input_grad` is false.
template <typename S>
Tensor4<S> conv2d_backward(const Tensor4<S>& x, const ParamTensor<S>& weights, const Tensor4<S>& dy,
                           ParamTensor<S>& dweights, ParamTensor<S>& dbias, bool want_input_grad = true);

template <typename S>
Tensor4<S> relu(const Tensor4<S>& x);

/// `y` is the forward output; y > 0 exactly where x > 0.
template <typename S>
Tensor4<S> relu_backward(const Tensor4<S>& y, const Tensor4<S>& dy);

template <typename S>
struct Pooled {
  Tensor4<S> out;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

/// 2x2 max pooling, stride 2. Ties resolve to the lowest flat index.
template <typename S>
Pooled<S> maxpool2(const Tensor4<S>& x);

template <typename S>
Tensor4<S> maxpool2_backward(const Pooled<S>& pooled, const Tensor4<S>& x_shape, const Tensor4<S>& dy);

/// Transposed 2x2 convolution, stride 2. weights: (Cin, Cout, 2, 2).
template <typename S>
Tensor4<S> upconv2(const Tensor4<S>& x, const ParamTensor<S>& weights);

template <typename S>
Tensor4<S> upconv2_backward(const Tensor4<S>& x, const ParamTensor<S>& weights, const Tensor4<S>& dy,
                            ParamTensor<S>& dweights);

/// Channels of `a` first, then `b`.
template <typename S>
Tensor4<S> concat_channels(const Tensor4<S>& a, const Tensor4<S>& b);

template <typename S>
std::pair<Tensor4<S>, Tensor4<S>> concat_channels_backward(const Tensor4<S>& dy, int channels_a);

/// Per-element multipliers of one dropout application: 0 for dropped
/// elements, 1/(1-p) for survivors. Empty means identity.
template <typename S>
struct DropoutMask {
  std::vector<S> scale;
};

void check_dropout_probability(double p);

/// Inverted dropout. Element i is dropped when the i-th uniform_float() of
/// SplitMix64(seed) is < p. Eval mode and p == 0 are the identity.
template <typename S>
Tensor4<S> dropout(const Tensor4<S>& x, double p, std::uint64_t seed, Mode mode, DropoutMask<S>* mask);

template <typename S>
Tensor4<S> dropout_backward(const DropoutMask<S>& mask, const Tensor4<S>& dy);

/// Per-pixel softmax over exactly two channels (background, bundle).
template <typename S>
Tensor4<S> softmax2(const Tensor4<S>& logits);

/// `probs` is the forward output.
template <typename S>
Tensor4<S> softmax2_backward(const Tensor4<S>& probs, const Tensor4<S>& dy);

}  // namespace bundleseg::ops
