#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bundleseg/loss.hpp"
#include "bundleseg/slicing.hpp"
#include "bundleseg/unet.hpp"
#include "bundleseg/volume.hpp"

namespace bundleseg::train {

enum class Optimizer { Sgd, Adam };

std::string optimizer_name(Optimizer o);
Optimizer parse_optimizer(const std::string& name);

/// Defaults: learning rate 0.002, batch 8, 70 epochs, dropout 0.4, learning
/// rate cut by 3% per epoch, Adam with the usual constants.
struct TrainConfig {
  double learning_rate = 0.002;
  int batch_size = 8;
  int epochs = 70;
  double dropout_p = 0.4;
  double lr_decay_per_epoch = 0.03;
  std::uint64_t seed = 1;
  Optimizer optimizer = Optimizer::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::string preset = "phantom";
  double threshold = 0.5;  // binarisation level for validation Dice

  void validate() const;
};

/// learning_rate * (1 - lr_decay_per_epoch)^epoch
double learning_rate_at(const TrainConfig& cfg, int epoch);

/// z-score over all voxels and channels jointly: (x - mean) / max(std, 1e-8).
Volume<float> normalize(const Volume<float>& volume);
PeakVolume normalize(const PeakVolume& volume);

/// N_bg / N_fg over all training masks, clamped to >= 1. Throws
/// DegenerateDataset when no mask has a foreground voxel.
double initial_fg_weight(const std::vector<const BinaryMask*>& masks);

/// Linear decay from w0 at epoch 0 to 1 at the last epoch:
/// 1 + (w0 - 1) * (E - 1 - e) / (E - 1); w0 when E == 1.
double class_weight_at(double w0, int epoch, int total_epochs);

/// Slice indices 0..count-1 shuffled with SplitMix64(derive_seed(seed, epoch))
/// and cut into batches; the last batch may be short.
std::vector<std::vector<std::size_t>> make_epoch_batches(std::size_t count, int batch_size, std::uint64_t seed,
                                                         int epoch);

/// A network input volume (normalized peaks, or fusion probabilities) with
/// its reference mask.
struct LabeledVolume {
  std::string id;
  Volume<float> input;
  BinaryMask mask;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;
  double lr = 0.0;
  double fg_weight = 0.0;
};

struct TrainHooks {
  /// Replaces the validation Dice computation when set.
  std::function<double(const unet::NetworkParams&, int epoch)> validation_metric;
  /// Called after every epoch with the thresholded validation predictions
  /// (empty when validation_metric is set).
  std::function<void(const EpochRecord&, const std::vector<BinaryMask>&)> on_epoch;
  std::ostream* log = nullptr;
  std::string label;  // prefix for log lines and error context
};

struct TrainResult {
  unet::NetworkParams best;
  int best_epoch = -1;
  double best_dice = -1.0;
  std::vector<EpochRecord> history;
};

/// Trains one U-Net on the `plane` slices of every training volume. After
/// each epoch the mean per-volume validation Dice decides whether the
/// current weights become the new best (strictly greater; ties keep the
/// earlier epoch). Throws DivergenceError on a non-finite loss.
TrainResult train_network(const unet::UNetConfig& arch, std::span<const LabeledVolume> train_set,
                          std::span<const LabeledVolume> val_set, stack::SlicePlane plane, const TrainConfig& cfg,
                          const TrainHooks& hooks = {});

/// CSV "epoch,train_loss,val_dice,lr,fg_weight", 17 significant digits.
void write_history(std::ostream& out, const std::vector<EpochRecord>& history);
std::vector<EpochRecord> read_history(std::istream& in);
void write_history_table(std::ostream& out, const std::vector<EpochRecord>& history);

}  // namespace bundleseg::train
