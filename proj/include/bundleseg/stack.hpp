#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>

#include "bundleseg/slicing.hpp"
#include "bundleseg/train.hpp"
#include "bundleseg/unet.hpp"
#include "bundleseg/volume.hpp"

namespace bundleseg::stack {

inline constexpr int kFusionChannels = 3;
inline constexpr int kStackFormatVersion = 1;

/// Three per-axis networks (indexed by SlicePlane) plus the fusion network
/// that reads their concatenated probabilities.
struct StackedModel {
  std::array<unet::NetworkParams, 3> axis;
  unet::NetworkParams fusion;
  std::string bundle = "bundle";
  std::string preset = "phantom";
  std::string config_json;          // training config echo
  std::uint64_t config_hash = 0;    // FNV-1a of config_json
  std::array<int, 4> selected_epochs{-1, -1, -1, -1};  // xy, yz, zx, fusion

  /// Shared depth/filters across the four networks, 9 inputs per axis
  /// network and 3 for fusion. Throws ShapeError otherwise.
  void validate() const;
};

/// (X, Y, Z, 3) with channels in plane order XY, YZ, ZX; values copied as-is.
Volume<float> build_fusion_input(const ProbabilityVolume& p_xy, const ProbabilityVolume& p_yz,
                                 const ProbabilityVolume& p_zx);

struct Prediction {
  ProbabilityVolume probability;
  BinaryMask mask;  // probability >= 0.5
};

/// Axis predictions of an already-normalized peak volume, fused into the
/// 3-channel input of the fusion network.
Volume<float> fusion_input_for(const StackedModel& model, const Volume<float>& normalized, int threads = 1);

/// Fusion stage as a function of the fusion input; the stacked model uses
/// its fusion network on XY slices.
using FusionFunction = std::function<ProbabilityVolume(const Volume<float>& fusion_input)>;

Prediction predict_stacked(const StackedModel& model, const PeakVolume& volume, int threads = 1);
Prediction predict_stacked(const StackedModel& model, const PeakVolume& volume, const FusionFunction& fusion,
                           int threads = 1);
Prediction predict_plain(const unet::NetworkParams& params, const PeakVolume& volume, SlicePlane plane);

struct StackedTraining {
  StackedModel model;
  std::array<train::TrainResult, 4> results;  // xy, yz, zx, fusion
};

struct Subject {
  std::string id;
  PeakVolume peaks;  // raw; normalized inside train_stacked
  BinaryMask mask;
};

struct StackHooks {
  std::ostream* log = nullptr;
  /// Receives every stage-2 fusion input as it is computed.
  std::function<void(const std::string& id, const Volume<float>& fusion_input)> on_fusion_input;
};

/// Stage 1 trains one network per plane with seed cfg.seed + plane index,
/// up to `threads` at a time. Stage 2 freezes their best checkpoints, turns
/// every training and validation subject into its fusion input and trains
/// the fusion network on XY slices with seed cfg.seed + 3.
StackedTraining train_stacked(std::span<const Subject> train_set, std::span<const Subject> val_set,
                              const train::TrainConfig& cfg, const std::string& bundle, int threads = 1,
                              const StackHooks& hooks = {});

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& text);

/// Directory with xy.ckpt, yz.ckpt, zx.ckpt, fusion.ckpt and manifest.json.
void save_model(const StackedModel& model, const std::filesystem::path& dir);
StackedModel load_model(const std::filesystem::path& dir);

}  // namespace bundleseg::stack
