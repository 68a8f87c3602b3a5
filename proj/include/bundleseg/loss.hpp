#pragma once

#include <cstdint>
#include <vector>

#include "bundleseg/tensor.hpp"

namespace bundleseg::train {

inline constexpr double kProbabilityFloor = 1e-7;

/// Class-weighted categorical cross-entropy over a batch of softmax outputs:
///
///   L = -(1/N) * sum_v w(c_v) * log(max(p[v, c_v], 1e-7))
///
/// with w(bundle) = fg_weight, w(background) = 1. `target` is (B, 1, H, W)
/// in {0, 1}. `valid`, when given, holds one byte per pixel; pixels marked 0
/// (grid padding) are excluded and N counts the rest, otherwise N = B*H*W.
/// When `dlogits` is non-null it receives dL/dlogits through the softmax,
/// (w/N) * (p - onehot), zero where the floor is active.
template <typename S>
double weighted_cross_entropy(const Tensor4<S>& probs, const Tensor4<S>& target, double fg_weight,
                              const std::vector<std::uint8_t>* valid = nullptr, Tensor4<S>* dlogits = nullptr);

}  // namespace bundleseg::train
