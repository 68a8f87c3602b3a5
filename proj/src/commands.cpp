#include "bundleseg/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "bundleseg/metrics.hpp"
#include "bundleseg/nifti.hpp"
#include "bundleseg/phantom.hpp"
#include "bundleseg/stack.hpp"
#include "json.hpp"

namespace bundleseg::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr const char* kPeaksSuffix = "_peaks.nii.gz";
constexpr const char* kMaskSuffix = "_mask.nii.gz";

// Maps library exceptions onto exit codes.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

std::vector<stack::Subject> load_subjects(const fs::path& dir, const std::vector<std::string>& ids) {
  std::vector<stack::Subject> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    out.push_back({id, nifti::load_peaks(dir / (id + kPeaksSuffix)), nifti::load_mask(dir / (id + kMaskSuffix))});
  }
  return out;
}

std::string history_csv(const std::vector<train::EpochRecord>& h) {
  std::ostringstream s;
  train::write_history(s, h);
  return s.str();
}

// Subject ids of every "<id>_mask.nii.gz" (or .nii) in dir.
std::map<std::string, fs::path> mask_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    for (const std::string& suffix : {std::string(kMaskSuffix), std::string("_mask.nii")}) {
      if (name.size() > suffix.size() && name.ends_with(suffix)) {
        out.emplace(name.substr(0, name.size() - suffix.size()), entry.path());
      }
    }
  }
  return out;
}

std::vector<metrics::SubjectMask> load_masks(const std::map<std::string, fs::path>& files,
                                             const std::optional<std::set<std::string>>& keep) {
  std::vector<metrics::SubjectMask> out;
  for (const auto& [id, path] : files) {
    if (keep && !keep->count(id)) continue;
    out.emplace_back(id, nifti::load_mask(path));
  }
  return out;
}

}  // namespace

std::optional<std::uint64_t> seed_from_environment() {
  const char* raw = std::getenv(kSeedVariable);
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  const std::string text(raw);
  if (text.find_first_not_of("0123456789") != std::string::npos || text.size() > 20) {
    throw ConfigError(std::string(kSeedVariable) + " must be an unsigned integer, got '" + text + "'");
  }
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw ConfigError(std::string(kSeedVariable) + " is out of range");
  }
}

std::string subject_id(int index) {
  std::ostringstream s;
  s << "subject_" << std::setw(3) << std::setfill('0') << index;
  return s.str();
}

DataManifest split_subjects(int n) {
  if (n < 1) throw SpecError("need at least one subject");
  DataManifest m;
  for (int i = 0; i < n; ++i) m.subjects.push_back(subject_id(i));
  if (n < 3) {
    m.train = m.subjects;
    m.val = m.subjects;
    return m;
  }
  const int held = std::max(1, static_cast<int>(std::lround(n / 6.0)));
  const int n_train = n - 2 * held;
  m.train.assign(m.subjects.begin(), m.subjects.begin() + n_train);
  m.val.assign(m.subjects.begin() + n_train, m.subjects.begin() + n_train + held);
  m.test.assign(m.subjects.begin() + n_train + held, m.subjects.end());
  return m;
}

DataManifest read_data_manifest(const fs::path& data_dir) {
  const fs::path path = data_dir / "manifest.json";
  std::ifstream f(path);
  if (!f) throw IoError("no data manifest at " + path.string());
  try {
    const auto j = nlohmann::json::parse(f);
    DataManifest m;
    m.subjects = j.at("subjects").get<std::vector<std::string>>();
    const auto& split = j.at("split");
    m.train = split.at("train").get<std::vector<std::string>>();
    m.val = split.at("val").get<std::vector<std::string>>();
    m.test = split.at("test").get<std::vector<std::string>>();
    if (m.train.empty() || m.val.empty()) throw FormatError(path.string() + ": empty train or val split");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

int cmd_phantom(const PhantomOptions& options, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (options.count < 1) {
      err << "error: --n must be at least 1\n";
      return static_cast<int>(kUsageError);
    }
    const phantom::PhantomSpec base = options.spec();
    base.validate();
    const DataManifest m = split_subjects(options.count);
    fs::create_directories(out_dir);
    for (int i = 0; i < options.count; ++i) {
      const auto p = phantom::generate(phantom::jitter_spec(base, options.seed + static_cast<std::uint64_t>(i)));
      nifti::save(p.peaks, out_dir / (m.subjects[i] + kPeaksSuffix));
      nifti::save(p.mask, out_dir / (m.subjects[i] + kMaskSuffix));
    }
    Json j;
    j["subjects"] = m.subjects;
    j["split"] = {{"train", m.train}, {"val", m.val}, {"test", m.test}};
    RunConfig echo;
    echo.phantom = options;
    j["phantom"] = Json::parse(to_json_text(echo))["phantom"];
    write_text(out_dir / "manifest.json", j.dump(2) + "\n");
    out << "wrote " << options.count << " phantoms to " << out_dir.string() << " (train " << m.train.size()
        << ", val " << m.val.size() << ", test " << m.test.size() << ")\n";
    return static_cast<int>(kSuccess);
  });
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = args.config ? load_run_config(*args.config) : RunConfig{};
    if (const auto seed = seed_from_environment()) {
      cfg.train.seed = *seed;
      cfg.phantom.seed = *seed;
    }
    if (args.data_dir) cfg.paths.data_dir = args.data_dir->string();
    if (args.model_dir) cfg.paths.model_dir = args.model_dir->string();
    if (args.threads) cfg.threads = *args.threads;
    if (cfg.threads < 1) throw ConfigError("--threads must be >= 1");

    std::optional<stack::SlicePlane> plain;
    if (args.mode.starts_with("plain:")) {
      plain = stack::parse_plane(args.mode.substr(6));
    } else if (args.mode != "stacked") {
      throw ConfigError("unknown --mode '" + args.mode + "' (expected stacked or plain:<xy|yz|zx>)");
    }

    const fs::path data_dir = cfg.paths.data_dir;
    const fs::path model_dir = cfg.paths.model_dir;
    const DataManifest m = read_data_manifest(data_dir);
    const auto train_set = load_subjects(data_dir, m.train);
    const auto val_set = load_subjects(data_dir, m.val);
    fs::create_directories(model_dir);
    write_effective_config(cfg, model_dir);

    if (plain) {
      const int k = static_cast<int>(*plain);
      std::vector<train::LabeledVolume> tr, va;
      for (const auto& s : train_set) tr.push_back({s.id, train::normalize(static_cast<const Volume<float>&>(s.peaks)), s.mask});
      for (const auto& s : val_set) va.push_back({s.id, train::normalize(static_cast<const Volume<float>&>(s.peaks)), s.mask});
      train::TrainConfig c = cfg.train;
      c.seed = cfg.train.seed + static_cast<std::uint64_t>(k);  // matches the stacked model's axis network
      train::TrainHooks hooks;
      hooks.log = &out;
      const auto arch = unet::preset_config(c.preset, kPeakChannels, c.dropout_p);
      const auto result = train::train_network(arch, tr, va, *plain, c, hooks);
      const std::string name = "plain_" + std::string(stack::plane_name(*plain));
      unet::save_params(result.best, model_dir / (name + ".ckpt"));
      write_text(model_dir / ("history_" + name + ".csv"), history_csv(result.history));
      Json j;
      j["format_version"] = stack::kStackFormatVersion;
      j["kind"] = "plain";
      j["plane"] = stack::plane_name(*plain);
      j["bundle"] = cfg.bundle;
      j["preset"] = c.preset;
      j["config"] = Json::parse(train_config_json(cfg.train));
      j["selected_epoch"] = result.best_epoch;
      j["checkpoint"] = name + ".ckpt";
      write_text(model_dir / "manifest.json", j.dump(2) + "\n");
      out << "best epoch " << result.best_epoch << ", val dice " << result.best_dice << '\n';
      return static_cast<int>(kSuccess);
    }

    stack::StackHooks hooks;
    hooks.log = &out;
    const auto trained = stack::train_stacked(train_set, val_set, cfg.train, cfg.bundle, cfg.threads, hooks);
    stack::save_model(trained.model, model_dir);
    const char* names[4] = {"xy", "yz", "zx", "fusion"};
    for (int k = 0; k < 4; ++k) {
      write_text(model_dir / ("history_" + std::string(names[k]) + ".csv"), history_csv(trained.results[k].history));
    }
    for (int k = 0; k < 4; ++k) {
      out << names[k] << ": best epoch " << trained.results[k].best_epoch << ", val dice "
          << trained.results[k].best_dice << '\n';
    }
    return static_cast<int>(kSuccess);
  });
}

int cmd_predict(const PredictArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.threads < 1) throw ConfigError("--threads must be >= 1");
    const fs::path manifest_path = args.model_dir / "manifest.json";
    std::ifstream f(manifest_path);
    if (!f) throw IoError("no model at " + args.model_dir.string() + " (missing manifest.json)");
    std::string kind = "stacked";
    std::string plane;
    std::string checkpoint;
    try {
      const auto j = nlohmann::json::parse(f);
      kind = j.value("kind", std::string("stacked"));
      if (kind == "plain") {
        plane = j.at("plane").get<std::string>();
        checkpoint = j.at("checkpoint").get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(manifest_path.string() + ": " + e.what());
    }

    const PeakVolume peaks = nifti::load_peaks(args.input);
    stack::Prediction pred;
    const auto started = std::chrono::steady_clock::now();
    if (kind == "plain") {
      const auto params = unet::load_params(args.model_dir / checkpoint);
      pred = stack::predict_plain(params, peaks, stack::parse_plane(plane));
    } else if (kind == "stacked") {
      pred = stack::predict_stacked(stack::load_model(args.model_dir), peaks, args.threads);
    } else {
      throw FormatError(manifest_path.string() + ": unknown model kind '" + kind + "'");
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    const fs::path prob_path = args.prefix + "_prob.nii.gz";
    const fs::path mask_path = args.prefix + kMaskSuffix;
    if (prob_path.has_parent_path()) fs::create_directories(prob_path.parent_path());
    nifti::save(pred.probability, prob_path);
    nifti::save(pred.mask, mask_path);
    out << "inference " << std::fixed << std::setprecision(3) << seconds << " s" << std::defaultfloat << '\n';
    out << "wrote " << prob_path.string() << " and " << mask_path.string() << '\n';
    if (args.reference) {
      const BinaryMask ref = nifti::load_mask(*args.reference);
      out << "dice " << std::setprecision(17) << metrics::dice(pred.mask, ref) << std::defaultfloat << '\n';
    }
    return static_cast<int>(kSuccess);
  });
}

int cmd_evaluate(const EvaluateArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.predictions.empty()) throw ConfigError("evaluate needs at least one --pred method=dir");
    std::optional<std::set<std::string>> keep;
    if (args.split) {
      const DataManifest m = read_data_manifest(args.reference_dir);
      const std::vector<std::string>* ids = nullptr;
      if (*args.split == "train") ids = &m.train;
      else if (*args.split == "val") ids = &m.val;
      else if (*args.split == "test") ids = &m.test;
      else throw ConfigError("--split must be train, val or test");
      keep = std::set<std::string>(ids->begin(), ids->end());
    }
    const auto refs = load_masks(mask_files(args.reference_dir), keep);
    std::vector<metrics::DiceReport> reports;
    std::set<std::string> methods;
    for (const auto& [method, dir] : args.predictions) {
      if (!methods.insert(method).second) throw ConfigError("method '" + method + "' given twice");
      const auto preds = load_masks(mask_files(dir), keep);
      reports.push_back(metrics::evaluate(preds, refs, method, args.bundle));
    }
    fs::create_directories(args.out_dir);
    std::ostringstream table, records;
    metrics::write_table(table, reports);
    metrics::write_records(records, reports);
    write_text(args.out_dir / "dice_table.txt", table.str());
    write_text(args.out_dir / "dice_records.csv", records.str());
    out << table.str();
    return static_cast<int>(kSuccess);
  });
}

int cmd_gradcheck(const std::vector<gradcheck::Case>& suite, std::ostream& out, std::ostream& err) {
  const auto results = gradcheck::run_suite(suite, &out);
  int failed = 0;
  for (const auto& r : results) {
    if (!r.passed) {
      err << "gradcheck failed: " << r.op << '\n';
      ++failed;
    }
  }
  return failed == 0 ? kSuccess : kVerificationFailed;
}

int cmd_gradcheck(std::ostream& out, std::ostream& err) { return cmd_gradcheck(gradcheck::default_suite(), out, err); }

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bundle segmentation from fiber-orientation peaks with stacked 2D U-Nets"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker cap; 1 gives bitwise-reproducible runs")->check(CLI::PositiveNumber);

  PhantomOptions ph;
  std::string ph_out;
  std::optional<std::string> ph_config;
  auto* phantom_cmd = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  phantom_cmd->add_option("--n", ph.count, "Number of subjects")->required();
  phantom_cmd->add_option("--seed", ph.seed, "Dataset seed");
  phantom_cmd->add_option("--dim", ph.dim, "Cube side in voxels");
  phantom_cmd->add_option("--tube-radius", ph.tube_radius, "Tube radius in voxels");
  phantom_cmd->add_option("--noise", ph.peak_noise_sigma, "Peak noise sigma");
  phantom_cmd->add_option("--distractors", ph.distractor_density, "Distractor density");
  phantom_cmd->add_option("--config", ph_config, "Run config; its phantom section sets defaults");
  phantom_cmd->add_option("--out", ph_out, "Output directory")->required();

  TrainArgs tr;
  std::optional<std::string> tr_config, tr_data, tr_model;
  auto* train_cmd = app.add_subcommand("train", "Train a stacked or plain model");
  train_cmd->add_option("--config", tr_config, "Run config (JSON)");
  train_cmd->add_option("--data", tr_data, "Data directory with manifest.json");
  train_cmd->add_option("--model", tr_model, "Output model directory");
  train_cmd->add_option("--mode", tr.mode, "stacked or plain:<xy|yz|zx>");

  PredictArgs pr;
  std::string pr_model, pr_input;
  std::optional<std::string> pr_ref;
  auto* predict_cmd = app.add_subcommand("predict", "Segment one peak volume");
  predict_cmd->add_option("--model", pr_model, "Model directory")->required();
  predict_cmd->add_option("--input", pr_input, "Peak volume (.nii or .nii.gz)")->required();
  predict_cmd->add_option("--out", pr.prefix, "Output prefix")->required();
  predict_cmd->add_option("--ref", pr_ref, "Reference mask; prints Dice");

  EvaluateArgs ev;
  std::vector<std::string> ev_preds;
  std::string ev_ref, ev_out;
  std::optional<std::string> ev_split;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Dice of predicted masks against references");
  evaluate_cmd->add_option("--pred", ev_preds, "method=dir, repeatable")->required();
  evaluate_cmd->add_option("--ref", ev_ref, "Reference directory")->required();
  evaluate_cmd->add_option("--out", ev_out, "Report directory")->required();
  evaluate_cmd->add_option("--bundle", ev.bundle, "Bundle name");
  evaluate_cmd->add_option("--split", ev_split, "Restrict to train, val or test from the reference manifest");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }

  if (*phantom_cmd) {
    return guarded(err, [&] {
      PhantomOptions opts = ph;
      if (ph_config) {
        opts = load_run_config(*ph_config).phantom;
        // explicit flags win over the config file
        for (auto* o : phantom_cmd->get_options()) {
          if (o->count() == 0) continue;
          const std::string n = o->get_name();
          if (n == "--n") opts.count = ph.count;
          if (n == "--seed") opts.seed = ph.seed;
          if (n == "--dim") opts.dim = ph.dim;
          if (n == "--tube-radius") opts.tube_radius = ph.tube_radius;
          if (n == "--noise") opts.peak_noise_sigma = ph.peak_noise_sigma;
          if (n == "--distractors") opts.distractor_density = ph.distractor_density;
        }
      }
      if (const auto seed = seed_from_environment()) opts.seed = *seed;
      return cmd_phantom(opts, ph_out, out, err);
    });
  }
  if (*train_cmd) {
    if (tr_config) tr.config = *tr_config;
    if (tr_data) tr.data_dir = *tr_data;
    if (tr_model) tr.model_dir = *tr_model;
    if (app.get_option("--threads")->count() > 0) tr.threads = threads;
    return cmd_train(tr, out, err);
  }
  if (*predict_cmd) {
    pr.model_dir = pr_model;
    pr.input = pr_input;
    if (pr_ref) pr.reference = *pr_ref;
    pr.threads = threads;
    return cmd_predict(pr, out, err);
  }
  if (*evaluate_cmd) {
    for (const auto& spec : ev_preds) {
      const auto eq = spec.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
        err << "error: --pred expects method=dir, got '" << spec << "'\n";
        return kUsageError;
      }
      ev.predictions.emplace_back(spec.substr(0, eq), spec.substr(eq + 1));
    }
    ev.reference_dir = ev_ref;
    ev.out_dir = ev_out;
    ev.split = ev_split;
    return cmd_evaluate(ev, out, err);
  }
  if (*gradcheck_cmd) return cmd_gradcheck(out, err);
  return kUsageError;
}

}  // namespace bundleseg::cli
