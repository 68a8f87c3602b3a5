#include "bundleseg/stack.hpp"

#include <exception>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include "bundleseg/run_config.hpp"
#include "json.hpp"

namespace bundleseg::stack {

namespace {

constexpr const char* kCheckpointNames[4] = {"xy.ckpt", "yz.ckpt", "zx.ckpt", "fusion.ckpt"};

void require_same_dims(const ProbabilityVolume& a, const ProbabilityVolume& b, const char* what) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string("fusion input: ") + what + " has dims " + to_string(b.dims()) + ", expected " +
                     to_string(a.dims()));
  }
}

// Runs f(0..count-1), at most `threads` at a time, and rethrows the first
// failure in index order.
template <typename F>
void run_indexed(int count, int threads, F&& f) {
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  auto guarded = [&](int i) {
    try {
      f(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) guarded(i);
  } else {
    for (int first = 0; first < count; first += threads) {
      std::vector<std::thread> pool;
      for (int i = first; i < std::min(count, first + threads); ++i) pool.emplace_back(guarded, i);
      for (auto& t : pool) t.join();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<train::LabeledVolume> normalized(std::span<const Subject> subjects) {
  std::vector<train::LabeledVolume> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) out.push_back({s.id, train::normalize(static_cast<const Volume<float>&>(s.peaks)), s.mask});
  return out;
}

}  // namespace

void StackedModel::validate() const {
  const auto& ref = axis[0].config;
  for (int k = 0; k < 4; ++k) {
    const auto& p = k < 3 ? axis[k] : fusion;
    const int want_in = k < 3 ? kPeakChannels : kFusionChannels;
    if (p.config.in_channels != want_in) {
      throw ShapeError(std::string(kCheckpointNames[k]) + " expects " + std::to_string(p.config.in_channels) +
                       " input channels, need " + std::to_string(want_in));
    }
    if (p.config.depth != ref.depth || p.config.base_filters != ref.base_filters) {
      throw ShapeError(std::string(kCheckpointNames[k]) + " does not share the axis networks' architecture");
    }
    unet::audit_shapes(p);
  }
}

Volume<float> build_fusion_input(const ProbabilityVolume& p_xy, const ProbabilityVolume& p_yz,
                                 const ProbabilityVolume& p_zx) {
  require_same_dims(p_xy, p_yz, "YZ prediction");
  require_same_dims(p_xy, p_zx, "ZX prediction");
  Volume<float> out(p_xy.dims(), kFusionChannels);
  out.geometry() = p_xy.geometry();
  const std::size_t n = p_xy.dims().voxels();
  const ProbabilityVolume* parts[3] = {&p_xy, &p_yz, &p_zx};
  for (int c = 0; c < kFusionChannels; ++c) {
    std::copy(parts[c]->data().begin(), parts[c]->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(c * n));
  }
  return out;
}

Volume<float> fusion_input_for(const StackedModel& model, const Volume<float>& normalized, int threads) {
  std::array<ProbabilityVolume, 3> probs;
  run_indexed(3, threads, [&](int k) { probs[k] = predict_axis(model.axis[k], normalized, kPlanes[k]); });
  return build_fusion_input(probs[0], probs[1], probs[2]);
}

Prediction predict_stacked(const StackedModel& model, const PeakVolume& volume, int threads) {
  return predict_stacked(
      model, volume, [&](const Volume<float>& fused) { return predict_axis(model.fusion, fused, SlicePlane::XY); },
      threads);
}

Prediction predict_stacked(const StackedModel& model, const PeakVolume& volume, const FusionFunction& fusion,
                           int threads) {
  volume.validate();
  const Volume<float> input = train::normalize(static_cast<const Volume<float>&>(volume));
  const Volume<float> fused = fusion_input_for(model, input, threads);
  Prediction out;
  out.probability = fusion(fused);
  if (out.probability.dims() != volume.dims()) throw ShapeError("fusion output does not match the input grid");
  out.probability.geometry() = volume.geometry();
  out.mask = out.probability.threshold(0.5f);
  return out;
}

Prediction predict_plain(const unet::NetworkParams& params, const PeakVolume& volume, SlicePlane plane) {
  volume.validate();
  Prediction out;
  out.probability = predict_axis(params, train::normalize(static_cast<const Volume<float>&>(volume)), plane);
  out.probability.geometry() = volume.geometry();
  out.mask = out.probability.threshold(0.5f);
  return out;
}

StackedTraining train_stacked(std::span<const Subject> train_set, std::span<const Subject> val_set,
                              const train::TrainConfig& cfg, const std::string& bundle, int threads,
                              const StackHooks& hooks) {
  if (train_set.empty() || val_set.empty()) throw DegenerateDataset("stacked training needs training and validation subjects");
  cfg.validate();
  const auto train_in = normalized(train_set);
  const auto val_in = normalized(val_set);
  const unet::UNetConfig axis_arch = unet::preset_config(cfg.preset, kPeakChannels, cfg.dropout_p);

  StackedTraining out;
  const bool concurrent = threads > 1;
  std::array<std::ostringstream, 3> buffered;
  run_indexed(3, threads, [&](int k) {
    train::TrainConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(k);
    train::TrainHooks h;
    h.label = std::string(plane_name(kPlanes[k]));
    h.log = concurrent ? (hooks.log ? &buffered[k] : nullptr) : hooks.log;
    out.results[k] = train::train_network(axis_arch, train_in, val_in, kPlanes[k], c, h);
  });
  if (concurrent && hooks.log) {
    for (auto& b : buffered) *hooks.log << b.str();
  }
  for (int k = 0; k < 3; ++k) out.model.axis[k] = out.results[k].best;

  auto fusion_set = [&](const std::vector<train::LabeledVolume>& subjects) {
    std::vector<train::LabeledVolume> fused;
    fused.reserve(subjects.size());
    for (const auto& s : subjects) {
      fused.push_back({s.id, fusion_input_for(out.model, s.input, threads), s.mask});
      if (hooks.on_fusion_input) hooks.on_fusion_input(s.id, fused.back().input);
    }
    return fused;
  };
  const auto fusion_train = fusion_set(train_in);
  const auto fusion_val = fusion_set(val_in);

  train::TrainConfig fc = cfg;
  fc.seed = cfg.seed + 3;
  train::TrainHooks fh;
  fh.label = "fusion";
  fh.log = hooks.log;
  const unet::UNetConfig fusion_arch = unet::preset_config(cfg.preset, kFusionChannels, cfg.dropout_p);
  out.results[3] = train::train_network(fusion_arch, fusion_train, fusion_val, SlicePlane::XY, fc, fh);
  out.model.fusion = out.results[3].best;

  out.model.bundle = bundle;
  out.model.preset = cfg.preset;
  out.model.config_json = cli::train_config_json(cfg);
  out.model.config_hash = fnv1a(out.model.config_json);
  for (int k = 0; k < 4; ++k) out.model.selected_epochs[k] = out.results[k].best_epoch;
  return out;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void save_model(const StackedModel& model, const std::filesystem::path& dir) {
  model.validate();
  std::filesystem::create_directories(dir);
  for (int k = 0; k < 3; ++k) unet::save_params(model.axis[k], dir / kCheckpointNames[k]);
  unet::save_params(model.fusion, dir / kCheckpointNames[3]);

  nlohmann::ordered_json m;
  m["format_version"] = kStackFormatVersion;
  m["kind"] = "stacked";
  m["bundle"] = model.bundle;
  m["preset"] = model.preset;
  std::ostringstream hash;
  hash << std::hex << std::setw(16) << std::setfill('0') << model.config_hash;
  m["config_hash"] = hash.str();
  m["config"] = model.config_json.empty() ? nlohmann::ordered_json::object()
                                          : nlohmann::ordered_json::parse(model.config_json);
  m["selected_epochs"] = {{"xy", model.selected_epochs[0]},
                          {"yz", model.selected_epochs[1]},
                          {"zx", model.selected_epochs[2]},
                          {"fusion", model.selected_epochs[3]}};
  m["checkpoints"] = {kCheckpointNames[0], kCheckpointNames[1], kCheckpointNames[2], kCheckpointNames[3]};
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << m.dump(2) << "\n";
}

StackedModel load_model(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream f(manifest_path);
  if (!f) throw IoError("no stacked model at " + dir.string() + " (missing manifest.json)");
  nlohmann::ordered_json m;
  try {
    m = nlohmann::ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  StackedModel model;
  try {
    if (m.at("format_version").get<int>() != kStackFormatVersion) {
      throw FormatError("unsupported model format version in " + manifest_path.string());
    }
    if (m.value("kind", std::string("stacked")) != "stacked") {
      throw FormatError(manifest_path.string() + " does not describe a stacked model");
    }
    model.bundle = m.at("bundle").get<std::string>();
    model.preset = m.at("preset").get<std::string>();
    model.config_json = m.at("config").dump(2);
    model.config_hash = std::stoull(m.at("config_hash").get<std::string>(), nullptr, 16);
    const auto& e = m.at("selected_epochs");
    model.selected_epochs = {e.at("xy").get<int>(), e.at("yz").get<int>(), e.at("zx").get<int>(),
                             e.at("fusion").get<int>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  for (int k = 0; k < 3; ++k) model.axis[k] = unet::load_params(dir / kCheckpointNames[k]);
  model.fusion = unet::load_params(dir / kCheckpointNames[3]);
  model.validate();
  return model;
}

}  // namespace bundleseg::stack
