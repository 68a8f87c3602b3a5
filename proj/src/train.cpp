#include "bundleseg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "bundleseg/metrics.hpp"
#include "bundleseg/rng.hpp"

namespace bundleseg::train {

std::string optimizer_name(Optimizer o) { return o == Optimizer::Adam ? "adam" : "sgd"; }

Optimizer parse_optimizer(const std::string& name) {
  if (name == "adam") return Optimizer::Adam;
  if (name == "sgd") return Optimizer::Sgd;
  throw ConfigError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

void TrainConfig::validate() const {
  auto in_unit = [](double v) { return v > 0.0 && v < 1.0; };
  if (!in_unit(learning_rate)) throw ConfigError("learning_rate must lie in (0,1)");
  if (!in_unit(lr_decay_per_epoch)) throw ConfigError("lr_decay_per_epoch must lie in (0,1)");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0,1)");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!in_unit(adam_beta1) || !in_unit(adam_beta2)) throw ConfigError("adam betas must lie in (0,1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (!in_unit(threshold)) throw ConfigError("threshold must lie in (0,1)");
}

double learning_rate_at(const TrainConfig& cfg, int epoch) {
  return cfg.learning_rate * std::pow(1.0 - cfg.lr_decay_per_epoch, epoch);
}

Volume<float> normalize(const Volume<float>& volume) {
  const auto& src = volume.data();
  double sum = 0.0;
  for (float v : src) sum += v;
  const double mean = sum / static_cast<double>(src.size());
  double sq = 0.0;
  for (float v : src) sq += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(sq / static_cast<double>(src.size())), 1e-8);
  Volume<float> out = volume;
  for (auto& v : out.data()) v = static_cast<float>((v - mean) / sd);
  return out;
}

PeakVolume normalize(const PeakVolume& volume) {
  return PeakVolume(normalize(static_cast<const Volume<float>&>(volume)));
}

double initial_fg_weight(const std::vector<const BinaryMask*>& masks) {
  std::size_t fg = 0;
  std::size_t total = 0;
  for (const BinaryMask* m : masks) {
    fg += m->count();
    total += m->size();
  }
  if (fg == 0) throw DegenerateDataset("training masks contain no foreground voxels");
  return std::max(1.0, static_cast<double>(total - fg) / static_cast<double>(fg));
}

double class_weight_at(double w0, int epoch, int total_epochs) {
  if (total_epochs <= 1) return w0;
  return 1.0 + (w0 - 1.0) * static_cast<double>(total_epochs - 1 - epoch) / static_cast<double>(total_epochs - 1);
}

std::vector<std::vector<std::size_t>> make_epoch_batches(std::size_t count, int batch_size, std::uint64_t seed,
                                                         int epoch) {
  if (count == 0) throw DegenerateDataset("no training slices");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t first = 0; first < count; first += static_cast<std::size_t>(batch_size)) {
    const std::size_t last = std::min(count, first + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(first),
                         order.begin() + static_cast<std::ptrdiff_t>(last));
  }
  return batches;
}

namespace {

class Optimizer_ {
 public:
  Optimizer_(const TrainConfig& cfg, const unet::NetworkParams& params) : cfg_(cfg) {
    if (cfg.optimizer == Optimizer::Adam) {
      m_ = unet::zero_like(params);
      v_ = unet::zero_like(params);
    }
  }

  void step(unet::NetworkParams& params, const std::vector<ParamTensor<float>>& grads, double lr) {
    ++t_;
    if (cfg_.optimizer == Optimizer::Sgd) {
      const float rate = static_cast<float>(lr);
      for (std::size_t k = 0; k < params.tensors.size(); ++k) {
        auto& p = params.tensors[k].values;
        const auto& g = grads[k].values;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= rate * g[i];
      }
      return;
    }
    const float b1 = static_cast<float>(cfg_.adam_beta1);
    const float b2 = static_cast<float>(cfg_.adam_beta2);
    const float eps = static_cast<float>(cfg_.adam_epsilon);
    const double c1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    const float step = static_cast<float>(lr / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    for (std::size_t k = 0; k < params.tensors.size(); ++k) {
      auto& p = params.tensors[k].values;
      const auto& g = grads[k].values;
      auto& m = m_[k].values;
      auto& v = v_[k].values;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        p[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<ParamTensor<float>> m_;
  std::vector<ParamTensor<float>> v_;
  std::uint64_t t_ = 0;
};

void check_dataset(std::span<const LabeledVolume> set, const char* what) {
  if (set.empty()) throw DegenerateDataset(std::string(what) + " set is empty");
  for (const auto& s : set) {
    if (s.input.dims() != s.mask.dims()) {
      throw ShapeError(std::string(what) + " subject " + s.id + ": mask dims " + to_string(s.mask.dims()) +
                       " differ from input dims " + to_string(s.input.dims()));
    }
  }
}

}  // namespace

TrainResult train_network(const unet::UNetConfig& arch_in, std::span<const LabeledVolume> train_set,
                          std::span<const LabeledVolume> val_set, stack::SlicePlane plane, const TrainConfig& cfg,
                          const TrainHooks& hooks) {
  cfg.validate();
  check_dataset(train_set, "training");
  check_dataset(val_set, "validation");
  unet::UNetConfig arch = arch_in;
  arch.dropout_p = cfg.dropout_p;
  arch.validate();
  const Dims3 dims = train_set.front().input.dims();
  for (const auto& s : train_set) {
    if (s.input.dims() != dims) throw ShapeError("all training volumes must share dims; " + s.id + " differs");
    if (s.input.channels() != arch.in_channels) {
      throw ShapeError("subject " + s.id + " has " + std::to_string(s.input.channels()) + " channels, network expects " +
                       std::to_string(arch.in_channels));
    }
  }

  std::vector<const BinaryMask*> masks;
  for (const auto& s : train_set) masks.push_back(&s.mask);
  const double w0 = initial_fg_weight(masks);

  const stack::SliceShape shape = stack::slice_shape(dims, plane);
  const auto [top, bottom] = unet::grid_padding(shape.h, arch.depth);
  const auto [left, right] = unet::grid_padding(shape.w, arch.depth);
  const int hp = shape.h + top + bottom;
  const int wp = shape.w + left + right;
  const bool padded = hp != shape.h || wp != shape.w;
  const std::size_t slice_count = train_set.size() * static_cast<std::size_t>(shape.count);

  unet::NetworkParams params = unet::build(arch, cfg.seed);
  auto grads = unet::zero_like(params);
  Optimizer_ optimizer(cfg, params);
  unet::ForwardCache<float> cache;

  TrainResult result;
  result.best = params;
  const std::string label = hooks.label.empty() ? std::string(stack::plane_name(plane)) : hooks.label;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = learning_rate_at(cfg, epoch);
    rec.fg_weight = class_weight_at(w0, epoch, cfg.epochs);

    const auto batches = make_epoch_batches(slice_count, cfg.batch_size, cfg.seed, epoch);
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, 0x100000ULL + static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::size_t loss_weight = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      const int n = static_cast<int>(batch.size());
      Tensor4<float> x(n, arch.in_channels, hp, wp);
      Tensor4<float> target(n, 1, hp, wp);
      std::vector<std::uint8_t> valid;
      if (padded) valid.assign(static_cast<std::size_t>(n) * hp * wp, 0);
      for (int b = 0; b < n; ++b) {
        const auto& subject = train_set[batch[b] / shape.count];
        const int index = static_cast<int>(batch[b] % shape.count);
        stack::copy_slice(subject.input, plane, index, x.item(b), hp, wp, top, left);
        stack::copy_slice(subject.mask, plane, index, target.item(b), hp, wp, top, left);
        if (padded) {
          for (int i = 0; i < shape.h; ++i) {
            auto* row = valid.data() + (static_cast<std::size_t>(b) * hp + i + top) * wp + left;
            std::fill(row, row + shape.w, std::uint8_t{1});
          }
        }
      }
      const Tensor4<float> probs =
          unet::forward(params, x, ops::Mode::Train, derive_seed(epoch_seed, bi), &cache);
      Tensor4<float> dlogits;
      const double loss = weighted_cross_entropy(probs, target, rec.fg_weight, padded ? &valid : nullptr, &dlogits);
      if (!std::isfinite(loss)) {
        throw DivergenceError(label + ": non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(bi));
      }
      loss_sum += loss * n;
      loss_weight += static_cast<std::size_t>(n);
      for (auto& g : grads) std::fill(g.values.begin(), g.values.end(), 0.0f);
      unet::backward(params, cache, dlogits, grads);
      optimizer.step(params, grads, rec.lr);
    }
    rec.train_loss = loss_sum / static_cast<double>(loss_weight);

    std::vector<BinaryMask> predictions;
    if (hooks.validation_metric) {
      rec.val_dice = hooks.validation_metric(params, epoch);
    } else {
      double dice_sum = 0.0;
      for (const auto& s : val_set) {
        predictions.push_back(stack::predict_axis(params, s.input, plane).threshold(static_cast<float>(cfg.threshold)));
        dice_sum += metrics::dice(predictions.back(), s.mask);
      }
      rec.val_dice = dice_sum / static_cast<double>(val_set.size());
    }
    if (rec.val_dice > result.best_dice) {
      result.best_dice = rec.val_dice;
      result.best_epoch = epoch;
      result.best = params;
    }
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, predictions);
    if (hooks.log != nullptr) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      std::ostringstream line;
      line << label << " epoch " << std::setw(3) << epoch << "  loss " << std::fixed << std::setprecision(5)
           << rec.train_loss << "  val_dice " << std::setprecision(4) << rec.val_dice << "  lr "
           << std::scientific << std::setprecision(3) << rec.lr << "  w_fg " << std::fixed << std::setprecision(2)
           << rec.fg_weight << "  (" << std::setprecision(1) << secs << " s)\n";
      *hooks.log << line.str() << std::flush;
    }
  }
  return result;
}

void write_history(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,train_loss,val_dice,lr,fg_weight\n" << std::setprecision(17);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_dice << ',' << r.lr << ',' << r.fg_weight << '\n';
  }
}

std::vector<EpochRecord> read_history(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_dice,lr,fg_weight") {
    throw FormatError("history records: missing header");
  }
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    EpochRecord r;
    char comma;
    if (!(row >> r.epoch >> comma >> r.train_loss >> comma >> r.val_dice >> comma >> r.lr >> comma >> r.fg_weight)) {
      throw FormatError("history records: malformed line '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

void write_history_table(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << std::left << std::setw(7) << "epoch" << std::setw(12) << "train_loss" << std::setw(10) << "val_dice"
      << std::setw(12) << "lr" << "fg_weight\n";
  for (const auto& r : history) {
    out << std::setw(7) << r.epoch << std::fixed << std::setprecision(5) << std::setw(12) << r.train_loss
        << std::setprecision(4) << std::setw(10) << r.val_dice << std::scientific << std::setprecision(4)
        << std::setw(12) << r.lr << std::fixed << std::setprecision(3) << r.fg_weight << '\n';
  }
  out << std::defaultfloat;
}

}  // namespace bundleseg::train
