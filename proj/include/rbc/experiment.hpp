#pragma once

// Experiment specification: a flat `key = value` text file covering the
// scene generator, the training configuration and the seed list.
//
//   # comment
//   name = biased
//   seeds = 0,1,2
//   scene.preset = biased
//   scene.cooccurrence = 1,0.3;0.3,1
//   alpha = 0.001

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rbc/benchmark.hpp"
#include "rbc/data_synth.hpp"
#include "rbc/trainer.hpp"

namespace rbc {

struct ExperimentSpec {
  std::string name = "experiment";
  std::string preset = "uniform";  // "uniform": one scene; "biased": the biased-context benchmark
  SceneSpec scene;                 // used by the uniform preset
  BenchmarkKnobs knobs;            // used by the biased preset
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::size_t train_count = 300;  // biased preset: new-class scenes with old context
  std::size_t test_count = 150;
  std::size_t context_free_count = kBiasedContextFreeCount;  // biased preset only

  int num_fg_classes() const { return preset == "biased" ? kBiasedOld + kBiasedNew : scene.num_fg_classes; }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': '" + v + "' is not a number");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  const double d = parse_double(key, v);
  if (d != static_cast<double>(static_cast<long long>(d)))
    throw ValidationError("config key '" + key + "': '" + v + "' is not an integer");
  return static_cast<long long>(d);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "': '" + v + "' is not a boolean");
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& part : split(v, ',')) out.push_back(parse_double(key, part));
  return out;
}

inline IntRange parse_range(const std::string& key, const std::string& v) {
  const auto l = parse_list(key, v);
  if (l.size() != 2) throw ValidationError("config key '" + key + "': expected 'min,max'");
  return {static_cast<int>(l[0]), static_cast<int>(l[1])};
}

}  // namespace detail

/// Parses `key = value` lines; later keys override earlier ones.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": missing '='");
    auto key = detail::trim(line.substr(0, eq));
    auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

/// Applies one key to a training configuration. Returns false if unknown.
inline bool apply_train_key(TrainConfig& c, const std::string& k, const std::string& v) {
  using namespace detail;
  if (k == "protocol") c.protocol = v;
  else if (k == "mode") c.mode = protocol_mode_from_string(v);
  else if (k == "epochs_per_step") c.epochs_per_step = static_cast<int>(parse_int(k, v));
  else if (k == "epochs_first_step") c.epochs_first_step = static_cast<int>(parse_int(k, v));
  else if (k == "batch_size") c.batch_size = static_cast<int>(parse_int(k, v));
  else if (k == "learning_rate") c.learning_rate = parse_double(k, v);
  else if (k == "learning_rate_increment") c.learning_rate_increment = parse_double(k, v);
  else if (k == "momentum") c.momentum = parse_double(k, v);
  else if (k == "weight_decay") c.weight_decay = parse_double(k, v);
  else if (k == "alpha") c.alpha = parse_double(k, v);
  else if (k == "gamma") c.gamma = parse_double(k, v);
  else if (k == "tau") c.tau = parse_double(k, v);
  else if (k == "mean_reduction") c.mean_reduction = parse_bool(k, v);
  else if (k == "ratio_cap") c.ratio_cap = parse_double(k, v);
  else if (k == "seed") c.seed = static_cast<std::uint64_t>(parse_int(k, v));
  else if (k == "ablation") c.ablation = ablation_from_string(v);
  else if (k == "fill") {
    if (v == "mean") c.fill = FillPolicy::Mean;
    else if (v == "constant") c.fill = FillPolicy::Constant;
    else throw ValidationError("config key 'fill': expected mean or constant");
  } else if (k == "fill_value") {
    const auto l = parse_list(k, v);
    if (l.size() != 3) throw ValidationError("config key 'fill_value': expected r,g,b");
    c.fill_value = {static_cast<float>(l[0]), static_cast<float>(l[1]), static_cast<float>(l[2])};
  } else if (k == "arch.width0") c.arch.width0 = static_cast<int>(parse_int(k, v));
  else if (k == "arch.width1") c.arch.width1 = static_cast<int>(parse_int(k, v));
  else if (k == "arch.width2") c.arch.width2 = static_cast<int>(parse_int(k, v));
  else return false;
  return true;
}

/// Applies one `scene.*` key. Returns false if unknown.
inline bool apply_scene_key(SceneSpec& s, const std::string& k, const std::string& v) {
  using namespace detail;
  if (k == "scene.size") s.height = s.width = static_cast<int>(parse_int(k, v));
  else if (k == "scene.height") s.height = static_cast<int>(parse_int(k, v));
  else if (k == "scene.width") s.width = static_cast<int>(parse_int(k, v));
  else if (k == "scene.num_fg_classes") {
    const int n = static_cast<int>(parse_int(k, v));
    if (n < 1) throw ValidationError("config key 'scene.num_fg_classes': must be >= 1");
    if (n != s.num_fg_classes) {
      // Resize to a uniform scene with the current off-diagonal probability.
      const double cooc = s.num_fg_classes > 1 ? s.cooccurrence[0][1] : 0.5;
      const SceneSpec u = uniform_scene(n, cooc, s.rng_seed, s.height);
      s.num_fg_classes = n;
      s.cooccurrence = u.cooccurrence;
      s.seed_weights = u.seed_weights;
      s.styles = u.styles;
    }
  } else if (k == "scene.cooccurrence") {
    s.cooccurrence.clear();
    for (const auto& row : split(v, ';')) s.cooccurrence.push_back(parse_list(k, row));
  } else if (k == "scene.seed_weights") s.seed_weights = parse_list(k, v);
  else if (k == "scene.shapes_per_image") s.shapes_per_image = parse_range(k, v);
  else if (k == "scene.radius") s.radius = parse_range(k, v);
  else if (k == "scene.noise") s.noise = parse_double(k, v);
  else if (k == "scene.rng_seed") s.rng_seed = static_cast<std::uint64_t>(parse_int(k, v));
  else return false;
  return true;
}

inline ExperimentSpec parse_experiment(const std::string& text) {
  using namespace detail;
  const auto kv = parse_key_values(text);
  ExperimentSpec e;
  // Presets first so explicit keys can refine them.
  int size = 32;
  for (const auto& [k, v] : kv) {
    if (k == "scene.preset") e.preset = v;
    if (k == "scene.size") size = static_cast<int>(parse_int(k, v));
  }
  if (e.preset == "biased") {
    e.knobs.size = size;
    e.scene = neutral_test_scene(0, e.knobs);
    e.train = biased_benchmark_config(0, Ablation::Full, size);
    e.train_count = kBiasedContextCount;
  } else if (e.preset == "uniform") {
    e.scene = uniform_scene(4, 0.5, 0, size);
    e.train.protocol = "2-2";
  } else {
    throw ValidationError("config key 'scene.preset': expected biased or uniform");
  }
  const bool biased = e.preset == "biased";
  for (const auto& [k, v] : kv) {
    if (k == "scene.preset" || k == "scene.size") continue;
    if (k == "name") e.name = v;
    else if (biased && k == "bench.old_old") e.knobs.old_old = parse_double(k, v);
    else if (biased && k == "bench.context") e.knobs.context = parse_double(k, v);
    else if (biased && k == "bench.test_old_new") e.knobs.test_old_new = parse_double(k, v);
    else if (biased && k == "bench.new_scale") e.knobs.new_scale = parse_double(k, v);
    else if (biased && k == "bench.new_contrast") e.knobs.new_contrast = parse_double(k, v);
    else if (biased && k == "bench.noise") e.knobs.noise = parse_double(k, v);
    else if (k == "seeds") {
      e.seeds.clear();
      for (const auto& s : split(v, ',')) e.seeds.push_back(static_cast<std::uint64_t>(parse_int(k, s)));
    } else if (k == "train_count") e.train_count = static_cast<std::size_t>(parse_int(k, v));
    else if (k == "test_count") e.test_count = static_cast<std::size_t>(parse_int(k, v));
    else if (k == "context_free_count") e.context_free_count = static_cast<std::size_t>(parse_int(k, v));
    else if ((!biased && apply_scene_key(e.scene, k, v)) || apply_train_key(e.train, k, v)) continue;
    else throw ValidationError("unknown config key '" + k + "'");
  }
  if (biased) e.scene = neutral_test_scene(0, e.knobs);
  e.scene.height = e.scene.width = size;
  e.train.arch.height = e.train.arch.width = size;
  if (e.seeds.empty()) throw ValidationError("seeds: at least one seed is required");
  if (e.train_count == 0 || e.test_count == 0) throw ValidationError("train_count and test_count must be >= 1");
  validate(e.scene);
  validate(e.train);
  build_task_sequence(e.num_fg_classes(), e.train.protocol, e.train.mode);
  return e;
}

struct ExperimentData {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;
};

/// Training pool and test set of one seed.
inline ExperimentData generate_experiment_data(const ExperimentSpec& e, std::uint64_t seed) {
  if (e.preset == "biased") {
    auto b = make_biased_benchmark(seed, e.knobs, e.context_free_count, e.train_count, e.test_count);
    return {std::move(b.train), std::move(b.test)};
  }
  SceneSpec train = e.scene, test = e.scene;
  train.rng_seed = detail::splitmix64(e.scene.rng_seed ^ detail::splitmix64(seed * 2 + 1));
  test.rng_seed = detail::splitmix64(e.scene.rng_seed ^ detail::splitmix64(seed * 2 + 2));
  auto test_items = generate_dataset(test, e.test_count);
  for (auto& it : test_items) it.id = "test" + it.id;
  return {generate_dataset(train, e.train_count), std::move(test_items)};
}

}  // namespace rbc
