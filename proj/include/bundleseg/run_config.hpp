#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "bundleseg/phantom.hpp"
#include "bundleseg/train.hpp"

namespace bundleseg::cli {

struct PhantomOptions {
  int count = 30;
  std::uint64_t seed = 1;
  int dim = 64;
  double tube_radius = 3.0;
  double arc_radius_fraction = 0.55;
  double arc_tilt = 0.7853981633974483;
  double peak_noise_sigma = 0.05;
  double distractor_density = 0.3;
  bool crossing_sheet = true;
  double sheet_half_thickness = 2.0;

  phantom::PhantomSpec spec() const;
};

struct Paths {
  std::string data_dir = "data";
  std::string model_dir = "model";
  std::string report_dir = "reports";
};

/// JSON document with sections "train", "phantom", "paths" and top-level
/// "bundle" and "threads". Unknown keys are errors; absent keys keep their
/// defaults.
struct RunConfig {
  train::TrainConfig train;
  PhantomOptions phantom;
  Paths paths;
  std::string bundle = "bundle";
  int threads = 1;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string to_json_text(const RunConfig& config);

/// The "train" section alone; what a model manifest records.
std::string train_config_json(const train::TrainConfig& config);
train::TrainConfig parse_train_config(const std::string& text);

/// Writes `effective_config.json` into `dir` (created if needed).
void write_effective_config(const RunConfig& config, const std::filesystem::path& dir);

}  // namespace bundleseg::cli
