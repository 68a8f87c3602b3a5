#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bundleseg/ops.hpp"
#include "bundleseg/tensor.hpp"

namespace bundleseg::unet {

struct UNetConfig {
  int in_channels = 9;
  int depth = 3;
  int base_filters = 16;
  double dropout_p = 0.4;

  /// Feature maps at level k: base_filters * 2^k. Level `depth` is the bottleneck.
  int filters(int level) const { return base_filters << level; }
  /// Spatial sizes must be multiples of this.
  int grid() const { return 1 << depth; }
  void validate() const;

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Named architectures. "paper": depth 4, 64 base filters. "phantom":
/// depth 3, 16 base filters, the CPU-scale default. "tiny": depth 1,
/// 4 base filters, for smoke tests.
UNetConfig preset_config(std::string_view name, int in_channels, double dropout_p);

/// Learnable tensors in declared order:
///   encoder level k = 0..depth-1: conv a (w, b), conv b (w, b)
///   bottleneck: conv a (w, b), conv b (w, b)
///   up-convolutions, deepest first: w (Cin, Cout, 2, 2)
///   decoder blocks, deepest first: conv a (w, b), conv b (w, b)
///   final 1x1 convolution to 2 classes: w, b
template <typename S>
struct BasicParams {
  UNetConfig config;
  std::vector<ParamTensor<S>> tensors;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  template <typename T>
  BasicParams<T> cast() const {
    BasicParams<T> out{config, {}};
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) {
      ParamTensor<T> c(t.shape);
      for (std::size_t i = 0; i < t.size(); ++i) c.values[i] = static_cast<T>(t.values[i]);
      out.tensors.push_back(std::move(c));
    }
    return out;
  }

  friend bool operator==(const BasicParams& a, const BasicParams& b) {
    if (!(a.config == b.config) || a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      if (a.tensors[i].shape != b.tensors[i].shape || a.tensors[i].values != b.tensors[i].values) return false;
    }
    return true;
  }
};

using NetworkParams = BasicParams<float>;

std::vector<std::vector<int>> expected_shapes(const UNetConfig& config);

/// Throws ShapeError naming the first tensor whose shape disagrees with the config.
template <typename S>
void audit_shapes(const BasicParams<S>& params);

/// He initialisation: N(0, 2/fan_in) weights drawn in declared order from
/// SplitMix64(seed); zero biases.
NetworkParams build(const UNetConfig& config, std::uint64_t seed);

template <typename S>
std::vector<ParamTensor<S>> zero_like(const BasicParams<S>& params) {
  std::vector<ParamTensor<S>> g;
  g.reserve(params.tensors.size());
  for (const auto& t : params.tensors) g.emplace_back(t.shape);
  return g;
}

template <typename S>
struct BlockCache {
  Tensor4<S> input;
  Tensor4<S> a;  // after first conv + relu
  Tensor4<S> b;  // after second conv + relu
  ops::DropoutMask<S> mask;
};

/// Activations retained by a training forward pass for backward().
template <typename S>
struct ForwardCache {
  std::vector<BlockCache<S>> encoder;
  std::vector<ops::Pooled<S>> pools;
  BlockCache<S> bottleneck;
  std::vector<Tensor4<S>> upconv_inputs;  // deepest first
  std::vector<BlockCache<S>> decoder;     // deepest first
  Tensor4<S> head_input;
  Tensor4<S> probs;
};

/// Returns per-pixel class probabilities (B, 2, H, W); channel 1 is the
/// bundle. Dropout in Train mode draws block i's mask from
/// derive_seed(dropout_seed, i), blocks numbered encoder, bottleneck, decoder.
template <typename S>
Tensor4<S> forward(const BasicParams<S>& params, const Tensor4<S>& x, ops::Mode mode, std::uint64_t dropout_seed = 0,
                   ForwardCache<S>* cache = nullptr);

/// Backpropagates a gradient with respect to the pre-softmax logits.
/// Parameter gradients accumulate into `grads`; the input gradient is
/// written to `dx` when non-null.
template <typename S>
void backward(const BasicParams<S>& params, const ForwardCache<S>& cache, const Tensor4<S>& dlogits,
              std::vector<ParamTensor<S>>& grads, Tensor4<S>* dx = nullptr);

struct PadRecord {
  int top = 0;
  int bottom = 0;
  int left = 0;
  int right = 0;

  bool empty() const { return top == 0 && bottom == 0 && left == 0 && right == 0; }
  friend bool operator==(const PadRecord&, const PadRecord&) = default;
};

/// Padding that brings `extent` up to the next multiple of 2^depth: (low, high),
/// the odd voxel going to the high side.
std::pair<int, int> grid_padding(int extent, int depth);

template <typename S>
std::pair<Tensor4<S>, PadRecord> pad_to_grid(const Tensor4<S>& x, int depth);

template <typename S>
Tensor4<S> crop(const Tensor4<S>& x, const PadRecord& pad);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian container:
///   "BSGUNET\0" | u32 version | u32 in_channels | u32 depth | u32 base_filters
///   | f64 dropout_p | u32 tensor count | per tensor: u32 rank, u32 dims[rank],
///   f32 values[prod(dims)]
void save_params(const NetworkParams& params, const std::filesystem::path& path);
NetworkParams load_params(const std::filesystem::path& path);

}  // namespace bundleseg::unet
