#include "bundleseg/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace bundleseg::cli {

using Json = nlohmann::ordered_json;

namespace {

template <typename V>
void visit(train::TrainConfig& c, V&& v) {
  v("learning_rate", c.learning_rate);
  v("batch_size", c.batch_size);
  v("epochs", c.epochs);
  v("dropout_p", c.dropout_p);
  v("lr_decay_per_epoch", c.lr_decay_per_epoch);
  v("seed", c.seed);
  v("optimizer", c.optimizer);
  v("adam_beta1", c.adam_beta1);
  v("adam_beta2", c.adam_beta2);
  v("adam_epsilon", c.adam_epsilon);
  v("preset", c.preset);
  v("threshold", c.threshold);
}

template <typename V>
void visit(PhantomOptions& c, V&& v) {
  v("count", c.count);
  v("seed", c.seed);
  v("dim", c.dim);
  v("tube_radius", c.tube_radius);
  v("arc_radius_fraction", c.arc_radius_fraction);
  v("arc_tilt", c.arc_tilt);
  v("peak_noise_sigma", c.peak_noise_sigma);
  v("distractor_density", c.distractor_density);
  v("crossing_sheet", c.crossing_sheet);
  v("sheet_half_thickness", c.sheet_half_thickness);
}

template <typename V>
void visit(Paths& c, V&& v) {
  v("data_dir", c.data_dir);
  v("model_dir", c.model_dir);
  v("report_dir", c.report_dir);
}

struct Writer {
  Json& out;
  template <typename T>
  void operator()(const char* key, const T& value) {
    out[key] = value;
  }
  void operator()(const char* key, const train::Optimizer& value) { out[key] = train::optimizer_name(value); }
};

struct Reader {
  const Json& in;
  std::string section;

  template <typename T>
  void operator()(const char* key, T& value) {
    auto it = in.find(key);
    if (it == in.end()) return;
    try {
      if constexpr (std::is_same_v<T, train::Optimizer>) {
        value = train::parse_optimizer(it->template get<std::string>());
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer()) throw ConfigError("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_unsigned() || it->template get<long long>() >= 0) {
            value = it->template get<T>();
          } else {
            throw ConfigError("expected a non-negative integer");
          }
        } else {
          value = it->template get<T>();
        }
      } else {
        value = it->template get<T>();
      }
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(section + "." + key + " has the wrong type");
    } catch (const ConfigError& e) {
      throw ConfigError(section + "." + key + ": " + e.what());
    }
  }
};

template <typename T>
std::set<std::string> known_keys() {
  std::set<std::string> keys;
  T dummy;
  visit(dummy, [&](const char* key, auto&) { keys.insert(key); });
  return keys;
}

void reject_unknown(const Json& obj, const std::set<std::string>& known, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_section(const Json& root, const char* name, T& target) {
  auto it = root.find(name);
  if (it == root.end()) return;
  reject_unknown(*it, known_keys<T>(), std::string("section '") + name + "'");
  visit(target, Reader{*it, name});
}

template <typename T>
Json section_json(const T& source) {
  Json out = Json::object();
  T copy = source;
  visit(copy, Writer{out});
  return out;
}

Json parse_text(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

phantom::PhantomSpec PhantomOptions::spec() const {
  phantom::PhantomSpec s = phantom::PhantomSpec::defaults(dim);
  s.tube_radius = tube_radius;
  s.arc_radius = arc_radius_fraction * dim;
  s.arc_tilt = arc_tilt;
  s.peak_noise_sigma = peak_noise_sigma;
  s.distractor_density = distractor_density;
  s.crossing_sheet = crossing_sheet;
  s.sheet_half_thickness = sheet_half_thickness;
  s.seed = seed;
  s.center_arc();
  return s;
}

RunConfig parse_run_config(const std::string& text) {
  const Json root = parse_text(text);
  reject_unknown(root, {"train", "phantom", "paths", "bundle", "threads"}, "config");
  RunConfig cfg;
  read_section(root, "train", cfg.train);
  read_section(root, "phantom", cfg.phantom);
  read_section(root, "paths", cfg.paths);
  Reader top{root, "config"};
  top("bundle", cfg.bundle);
  top("threads", cfg.threads);
  cfg.train.validate();
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  if (cfg.bundle.empty()) throw ConfigError("bundle name must not be empty");
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_json_text(const RunConfig& config) {
  Json root = Json::object();
  root["bundle"] = config.bundle;
  root["threads"] = config.threads;
  root["train"] = section_json(config.train);
  root["phantom"] = section_json(config.phantom);
  root["paths"] = section_json(config.paths);
  return root.dump(2) + "\n";
}

std::string train_config_json(const train::TrainConfig& config) { return section_json(config).dump(2); }

train::TrainConfig parse_train_config(const std::string& text) {
  const Json obj = parse_text(text);
  reject_unknown(obj, known_keys<train::TrainConfig>(), "training config");
  train::TrainConfig cfg;
  visit(cfg, Reader{obj, "train"});
  cfg.validate();
  return cfg;
}

void write_effective_config(const RunConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "effective_config.json";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json_text(config);
}

}  // namespace bundleseg::cli
