#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bundleseg/gradcheck.hpp"
#include "bundleseg/run_config.hpp"

namespace bundleseg::cli {

enum ExitCode : int { kSuccess = 0, kVerificationFailed = 1, kUsageError = 2, kDiverged = 3 };

/// Environment variable that replaces every configured seed.
inline constexpr const char* kSeedVariable = "BUNDLESEG_SEED";

/// Seed from BUNDLESEG_SEED when set; ConfigError if it is not an unsigned integer.
std::optional<std::uint64_t> seed_from_environment();

/// Data directory manifest written by cmd_phantom.
struct DataManifest {
  std::vector<std::string> subjects;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

/// n >= 3: val and test get max(1, round(n/6)) subjects each, in id order
/// after the training block. n < 3: everything trains and validates, no test.
DataManifest split_subjects(int n);
std::string subject_id(int index);  // "subject_007"
DataManifest read_data_manifest(const std::filesystem::path& data_dir);

int cmd_phantom(const PhantomOptions& options, const std::filesystem::path& out_dir, std::ostream& out,
                std::ostream& err);

struct TrainArgs {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> data_dir;   // overrides paths.data_dir
  std::optional<std::filesystem::path> model_dir;  // overrides paths.model_dir
  std::string mode = "stacked";                   // or plain:xy, plain:yz, plain:zx
  std::optional<int> threads;
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);

struct PredictArgs {
  std::filesystem::path model_dir;
  std::filesystem::path input;
  std::string prefix;
  std::optional<std::filesystem::path> reference;  // prints Dice against it when set
  int threads = 1;
};

int cmd_predict(const PredictArgs& args, std::ostream& out, std::ostream& err);

struct EvaluateArgs {
  std::vector<std::pair<std::string, std::filesystem::path>> predictions;  // (method, dir)
  std::filesystem::path reference_dir;
  std::filesystem::path out_dir;
  std::string bundle = "bundle";
  std::optional<std::string> split;  // train, val or test from the reference manifest
};

/// Writes dice_table.txt and dice_records.csv into out_dir.
int cmd_evaluate(const EvaluateArgs& args, std::ostream& out, std::ostream& err);

int cmd_gradcheck(std::ostream& out, std::ostream& err);
int cmd_gradcheck(const std::vector<gradcheck::Case>& suite, std::ostream& out, std::ostream& err);

/// Full command-line entry point; returns the process exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace bundleseg::cli
