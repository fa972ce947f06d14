#pragma once

// Biased-context benchmark: 4 old classes learned first, then 2 new classes.
// The training pool mixes old-only scenes with scenes seeded by a new class
// that always carry old-class objects around it; the test set is drawn from
// a neutral scene where old and new classes also appear on their own.

#include <cstdint>
#include <vector>

#include "rbc/data_synth.hpp"
#include "rbc/trainer.hpp"

namespace rbc {

inline constexpr int kBiasedOld = 4;
inline constexpr int kBiasedNew = 2;
inline constexpr std::size_t kBiasedContextFreeCount = 200;
inline constexpr std::size_t kBiasedContextCount = 150;
inline constexpr std::size_t kBiasedTestCount = 150;

struct BenchmarkKnobs {
  int size = 32;
  double old_old = 0.3;        // co-occurrence among old classes
  double context = 0.5;        // chance that a new-class scene includes a given old class
  double test_old_new = 0.3;   // old/new co-occurrence of the neutral test scene
  double new_scale = 1.5;      // radius multiplier of new-class shapes
  double new_contrast = -1.0;  // < 0: distinct palette colours; else offset from the background grey
  double noise = 0.15;
  double lookalike = 0.0;      // blend of each new class colour towards an old class colour
};

struct BenchmarkData {
  SceneSpec context_scene;  // new-class seeded, old classes as context
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;
};

inline SceneSpec biased_base_scene(std::uint64_t seed, const BenchmarkKnobs& k) {
  constexpr int kAll = kBiasedOld + kBiasedNew;
  SceneSpec spec;
  spec.height = spec.width = k.size;
  spec.num_fg_classes = kAll;
  spec.cooccurrence.assign(kAll, std::vector<double>(kAll, 0.0));
  for (int a = 0; a < kAll; ++a) spec.cooccurrence[a][a] = 1.0;
  spec.styles = default_styles(kAll);
  for (int c = kBiasedOld; c < kAll; ++c) {
    spec.styles[c].size_scale = k.new_scale;
    if (k.new_contrast >= 0) {
      const double f = k.new_contrast, g = 0.45;
      spec.styles[c].color = c == kBiasedOld ? std::array<double, 3>{g + f, g + 0.5 * f, g - 0.3 * f}
                                             : std::array<double, 3>{g - 0.3 * f, g + 0.2 * f, g + f};
    }
    const auto& twin = spec.styles[c - kBiasedOld].color;
    for (int i = 0; i < 3; ++i)
      spec.styles[c].color[i] = (1 - k.lookalike) * spec.styles[c].color[i] + k.lookalike * twin[i];
  }
  spec.seed_weights.assign(kAll, 1.0);
  spec.shapes_per_image = {2, 4};
  spec.radius = {k.size / 8, k.size / 4};
  spec.noise = k.noise;
  spec.rng_seed = seed;
  return spec;
}

namespace detail {

inline void set_blocks(SceneSpec& s, double old_old, double old_new, double new_new) {
  const int n = s.num_fg_classes;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      if (a == b) continue;
      const bool ao = a < kBiasedOld, bo = b < kBiasedOld;
      s.cooccurrence[a][b] = ao && bo ? old_old : (ao != bo ? old_new : new_new);
    }
}

inline std::vector<LabeledImage> tagged(std::vector<LabeledImage> items, const std::string& prefix) {
  for (auto& it : items) it.id = prefix + it.id;
  return items;
}

}  // namespace detail

/// Old-only scenes.
inline SceneSpec context_free_scene(std::uint64_t seed, const BenchmarkKnobs& k = {}) {
  SceneSpec s = biased_base_scene(detail::splitmix64(seed * 3 + 1), k);
  detail::set_blocks(s, k.old_old, 0.0, 0.0);
  for (int c = kBiasedOld; c < s.num_fg_classes; ++c) s.seed_weights[c] = 0.0;
  return s;
}

/// Scenes seeded by a new class; old classes are compatible with each other
/// so that several of them can surround the new object.
inline SceneSpec new_context_scene(std::uint64_t seed, const BenchmarkKnobs& k = {}) {
  SceneSpec s = biased_base_scene(detail::splitmix64(seed * 3 + 2), k);
  detail::set_blocks(s, 1.0, k.context, 0.0);
  for (int c = 0; c < kBiasedOld; ++c) s.seed_weights[c] = 0.0;
  return s;
}

inline SceneSpec neutral_test_scene(std::uint64_t seed, const BenchmarkKnobs& k = {}) {
  SceneSpec s = biased_base_scene(detail::splitmix64(seed * 3 + 3), k);
  detail::set_blocks(s, k.old_old, k.test_old_new, 0.0);
  return s;
}

inline BenchmarkData make_biased_benchmark(std::uint64_t seed, const BenchmarkKnobs& k = {},
                                           std::size_t n_context_free = kBiasedContextFreeCount,
                                           std::size_t n_context = kBiasedContextCount,
                                           std::size_t n_test = kBiasedTestCount) {
  BenchmarkData d;
  d.context_scene = new_context_scene(seed, k);
  d.train = detail::tagged(generate_dataset(context_free_scene(seed, k), n_context_free), "old");
  for (auto& it : detail::tagged(generate_dataset(d.context_scene, n_context), "ctx")) d.train.push_back(std::move(it));
  d.test = detail::tagged(generate_dataset(neutral_test_scene(seed, k), n_test), "test");
  return d;
}

inline TrainConfig biased_benchmark_config(std::uint64_t seed, Ablation ablation, int size = 32) {
  TrainConfig cfg;
  cfg.protocol = "4-2";
  cfg.mode = ProtocolMode::Overlapped;
  cfg.arch.height = cfg.arch.width = size;
  cfg.epochs_first_step = 12;
  cfg.epochs_per_step = 2;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.05;
  cfg.learning_rate_increment = 0.02;
  cfg.alpha = 0.001;
  cfg.tau = 0.9;
  cfg.gamma = 0.001;
  cfg.seed = seed;
  cfg.ablation = ablation;
  return cfg;
}

}  // namespace rbc
