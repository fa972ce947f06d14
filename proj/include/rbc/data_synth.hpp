#pragma once

// Synthetic shape scenes with a controllable class co-occurrence matrix, and
// the continual-learning task split / per-step relabeling built on top of them.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rbc/tensor.hpp"

namespace rbc {

enum class ShapeKind { Disc, Square, Triangle, Ring, Cross, Diamond };

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Disc: return "disc";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Ring: return "ring";
    case ShapeKind::Cross: return "cross";
    case ShapeKind::Diamond: return "diamond";
  }
  return "disc";
}

inline ShapeKind shape_kind_from_string(const std::string& s) {
  for (auto k : {ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring,
                 ShapeKind::Cross, ShapeKind::Diamond})
    if (s == to_string(k)) return k;
  throw ValidationError("unknown shape kind '" + s + "'");
}

/// Appearance of one foreground class: silhouette plus a striped color texture.
struct ShapeStyle {
  ShapeKind kind = ShapeKind::Disc;
  std::array<double, 3> color{0.8, 0.2, 0.2};
  double stripe_period = 0.0;  // 0 disables the stripes
  double stripe_angle = 0.0;   // radians
  double size_scale = 1.0;     // multiplies the sampled radius
};

struct IntRange {
  int min = 1;
  int max = 1;
};

struct SceneSpec {
  int height = 64;
  int width = 64;
  int num_fg_classes = 0;
  /// num_fg_classes x num_fg_classes, indexed by (label - 1). Diagonal unused.
  std::vector<std::vector<double>> cooccurrence;
  /// Relative probability of each class seeding an image; empty means uniform.
  std::vector<double> seed_weights;
  IntRange shapes_per_image{1, 3};
  IntRange radius{5, 12};
  std::vector<ShapeStyle> styles;
  double noise = 0.05;
  std::uint64_t rng_seed = 0;

  double cooc(int a, int b) const { return cooccurrence[a - 1][b - 1]; }
};

struct LabeledImage {
  Tensor<float> image;  // 3 x H x W, values in [0, 1]
  Mask mask;
  std::string id;

  bool operator==(const LabeledImage&) const = default;
};

inline void validate(const SceneSpec& spec) {
  const int k = spec.num_fg_classes;
  if (k < 1) throw ValidationError("SceneSpec: num_fg_classes must be >= 1");
  if (k > 254) throw ValidationError("SceneSpec: at most 254 foreground classes fit an 8-bit mask");
  if (spec.height < 1 || spec.width < 1) throw ValidationError("SceneSpec: empty image size");
  if (static_cast<int>(spec.cooccurrence.size()) != k)
    throw ValidationError("SceneSpec: cooccurrence must be num_fg_classes x num_fg_classes");
  for (int a = 0; a < k; ++a) {
    if (static_cast<int>(spec.cooccurrence[a].size()) != k)
      throw ValidationError("SceneSpec: cooccurrence row " + std::to_string(a + 1) + " has wrong length");
    for (int b = 0; b < k; ++b) {
      const double p = spec.cooccurrence[a][b];
      if (!(p >= 0.0 && p <= 1.0))
        throw ValidationError("SceneSpec: cooccurrence entries must lie in [0,1]");
      if (p != spec.cooccurrence[b][a]) throw ValidationError("SceneSpec: cooccurrence is not symmetric");
    }
  }
  if (!spec.seed_weights.empty()) {
    if (static_cast<int>(spec.seed_weights.size()) != k)
      throw ValidationError("SceneSpec: seed_weights needs one entry per class");
    double total = 0;
    for (double w : spec.seed_weights) {
      if (w < 0) throw ValidationError("SceneSpec: negative seed weight");
      total += w;
    }
    if (total <= 0) throw ValidationError("SceneSpec: seed weights sum to zero");
  }
  if (static_cast<int>(spec.styles.size()) != k)
    throw ValidationError("SceneSpec: need one shape style per class");
  if (spec.shapes_per_image.min < 1 || spec.shapes_per_image.max < spec.shapes_per_image.min)
    throw ValidationError("SceneSpec: invalid shapes_per_image range");
  if (spec.radius.min < 1 || spec.radius.max < spec.radius.min)
    throw ValidationError("SceneSpec: invalid radius range");
  if (spec.noise < 0) throw ValidationError("SceneSpec: negative noise");
  for (const auto& s : spec.styles)
    if (!(s.size_scale > 0)) throw ValidationError("SceneSpec: size_scale must be > 0");
}

/// A palette of distinguishable class appearances, cycled over shape kinds.
inline std::vector<ShapeStyle> default_styles(int num_classes) {
  static constexpr std::array<std::array<double, 3>, 8> kColors{{
      {0.90, 0.20, 0.20}, {0.20, 0.75, 0.25}, {0.20, 0.35, 0.90}, {0.90, 0.80, 0.15},
      {0.75, 0.25, 0.80}, {0.15, 0.80, 0.80}, {0.95, 0.55, 0.10}, {0.55, 0.55, 0.55},
  }};
  static constexpr std::array<ShapeKind, 6> kKinds{ShapeKind::Disc,  ShapeKind::Square,
                                                   ShapeKind::Triangle, ShapeKind::Diamond,
                                                   ShapeKind::Cross, ShapeKind::Ring};
  std::vector<ShapeStyle> out;
  for (int c = 0; c < num_classes; ++c) {
    ShapeStyle s;
    s.kind = kKinds[c % kKinds.size()];
    s.color = kColors[c % kColors.size()];
    s.stripe_period = (c / 8) % 2 == 0 ? 0.0 : 4.0 + (c % 3);
    s.stripe_angle = 0.4 * c;
    out.push_back(s);
  }
  return out;
}

/// Spec with a uniform off-diagonal co-occurrence probability.
inline SceneSpec uniform_scene(int num_classes, double cooc, std::uint64_t seed, int size = 64) {
  SceneSpec spec;
  spec.height = spec.width = size;
  spec.num_fg_classes = num_classes;
  spec.cooccurrence.assign(num_classes, std::vector<double>(num_classes, cooc));
  for (int a = 0; a < num_classes; ++a) spec.cooccurrence[a][a] = 1.0;
  spec.styles = default_styles(num_classes);
  spec.rng_seed = seed;
  return spec;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline bool inside(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::Disc: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::Triangle: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    case ShapeKind::Ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
    case ShapeKind::Cross:
      return (std::abs(dx) <= r / 3 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3 && std::abs(dx) <= r);
    case ShapeKind::Diamond: return std::abs(dx) + std::abs(dy) <= r;
  }
  return false;
}

inline std::set<int> classes_in(const Mask& m) {
  std::set<int> out;
  for (auto v : m.data)
    if (v != kBackground && v != kIgnore) out.insert(v);
  return out;
}

}  // namespace detail

/// Foreground labels present in a mask (background and ignore excluded).
inline std::vector<int> class_inventory(const Mask& m) {
  auto s = detail::classes_in(m);
  return {s.begin(), s.end()};
}

/// Renders image `index` of the dataset. Depends only on (spec, index).
inline LabeledImage generate_image(const SceneSpec& spec, std::size_t index) {
  std::mt19937_64 rng(detail::splitmix64(spec.rng_seed ^ detail::splitmix64(index + 1)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int k = spec.num_fg_classes;

  std::vector<double> weights = spec.seed_weights;
  if (weights.empty()) weights.assign(k, 1.0);
  std::discrete_distribution<int> pick_seed(weights.begin(), weights.end());
  const int seed_class = pick_seed(rng) + 1;

  std::vector<int> present{seed_class};
  std::vector<int> others;
  for (int c = 1; c <= k; ++c)
    if (c != seed_class) others.push_back(c);
  std::shuffle(others.begin(), others.end(), rng);
  for (int b : others) {
    const double u = unit(rng);
    if (u >= spec.cooc(seed_class, b)) continue;
    bool allowed = true;
    for (int s : present) allowed = allowed && spec.cooc(s, b) > 0.0;
    if (allowed) present.push_back(b);
  }

  std::uniform_int_distribution<int> count_dist(spec.shapes_per_image.min, spec.shapes_per_image.max);
  const int n_shapes = std::max<int>(count_dist(rng), static_cast<int>(present.size()));
  std::vector<int> shape_classes = present;
  std::uniform_int_distribution<std::size_t> which(0, present.size() - 1);
  while (static_cast<int>(shape_classes.size()) < n_shapes) shape_classes.push_back(present[which(rng)]);
  std::shuffle(shape_classes.begin(), shape_classes.end(), rng);

  LabeledImage item;
  item.id = "img" + std::to_string(index);
  item.image = Tensor<float>(3, spec.height, spec.width);
  item.mask = Mask(spec.height, spec.width, kBackground);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x)
      for (int c = 0; c < 3; ++c)
        item.image.at(c, y, x) = static_cast<float>(0.45 + spec.noise * (2 * unit(rng) - 1));

  std::uniform_int_distribution<int> radius_dist(spec.radius.min, spec.radius.max);
  for (int cls : shape_classes) {
    const ShapeStyle& style = spec.styles[cls - 1];
    const double r = std::max(1.0, radius_dist(rng) * style.size_scale);
    const double cx = unit(rng) * (spec.width - 1);
    const double cy = unit(rng) * (spec.height - 1);
    const double ca = std::cos(style.stripe_angle), sa = std::sin(style.stripe_angle);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r))),
              x1 = std::min(spec.width - 1, static_cast<int>(std::ceil(cx + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r))),
              y1 = std::min(spec.height - 1, static_cast<int>(std::ceil(cy + r)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - cx, dy = y - cy;
        if (!detail::inside(style.kind, dx, dy, r)) continue;
        double mod = 1.0;
        if (style.stripe_period > 0) {
          const double phase = (x * ca + y * sa) * 2 * std::numbers::pi / style.stripe_period;
          mod = std::sin(phase) >= 0 ? 1.0 : 0.6;
        }
        for (int c = 0; c < 3; ++c) {
          const double v = style.color[c] * mod + spec.noise * (2 * unit(rng) - 1);
          item.image.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        item.mask.at(y, x) = static_cast<std::uint8_t>(cls);
      }
  }
  // The last shape drawn is never occluded; a degenerate silhouette (a ring
  // too small to hit a pixel centre) still gets its centre pixel.
  if (detail::classes_in(item.mask).empty()) {
    const int cls = shape_classes.back();
    const int cy = spec.height / 2, cx = spec.width / 2;
    for (int c = 0; c < 3; ++c) item.image.at(c, cy, cx) = static_cast<float>(spec.styles[cls - 1].color[c]);
    item.mask.at(cy, cx) = static_cast<std::uint8_t>(cls);
  }
  return item;
}

/// Deterministic for a fixed spec.rng_seed; each image is independent of the others.
inline std::vector<LabeledImage> generate_dataset(const SceneSpec& spec, std::size_t count) {
  validate(spec);
  if (count < 1) throw ValidationError("generate_dataset: count must be >= 1");
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_image(spec, i));
  return out;
}

enum class ProtocolMode { Disjoint, Overlapped };

inline const char* to_string(ProtocolMode m) { return m == ProtocolMode::Disjoint ? "disjoint" : "overlapped"; }

inline ProtocolMode protocol_mode_from_string(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "disjoint") return ProtocolMode::Disjoint;
  if (s == "overlapped" || s == "overlap") return ProtocolMode::Overlapped;
  throw ValidationError("unknown protocol mode '" + s + "'");
}

/// Ordered partition of the foreground labels into learning steps. Steps are
/// 1-based; partitions are consecutive label ranges so that head channel c
/// always carries label c.
struct TaskSequence {
  std::vector<std::vector<int>> partitions;
  ProtocolMode mode = ProtocolMode::Overlapped;

  int num_steps() const { return static_cast<int>(partitions.size()); }
  int total_classes() const {
    int n = 0;
    for (const auto& p : partitions) n += static_cast<int>(p.size());
    return n;
  }
  /// |C_{1:t}|
  int classes_seen(int t) const {
    int n = 0;
    for (int s = 0; s < t; ++s) n += static_cast<int>(partitions[s].size());
    return n;
  }
  const std::vector<int>& new_classes(int t) const { return partitions.at(t - 1); }
  bool is_new(int label, int t) const {
    return label > classes_seen(t - 1) && label <= classes_seen(t);
  }
  bool is_old(int label, int t) const { return label >= 1 && label <= classes_seen(t - 1); }
  bool is_future(int label, int t) const { return label > classes_seen(t) && label != kIgnore; }
};

inline void validate(const TaskSequence& task) {
  if (task.partitions.empty()) throw ValidationError("TaskSequence: needs at least one step");
  int next = 1;
  for (const auto& part : task.partitions) {
    if (part.empty()) throw ValidationError("TaskSequence: empty partition");
    for (int c : part) {
      if (c != next)
        throw ValidationError("TaskSequence: partitions must be consecutive ascending label ranges starting at 1");
      ++next;
    }
  }
}

/// Parses "a-b": a initial classes, then steps of b classes each. "a-0" is a
/// single joint step.
inline TaskSequence build_task_sequence(int total_fg_classes, const std::string& protocol, ProtocolMode mode) {
  const auto dash = protocol.find('-');
  if (dash == std::string::npos) throw ValidationError("protocol '" + protocol + "' is not of the form a-b");
  int initial = -1, step = -1;
  const char* p = protocol.data();
  auto r1 = std::from_chars(p, p + dash, initial);
  auto r2 = std::from_chars(p + dash + 1, p + protocol.size(), step);
  if (r1.ec != std::errc{} || r1.ptr != p + dash || r2.ec != std::errc{} || r2.ptr != p + protocol.size())
    throw ValidationError("protocol '" + protocol + "' is not of the form a-b");
  if (initial < 1 || step < 0) throw ValidationError("protocol '" + protocol + "': sizes out of range");
  if (total_fg_classes < 1) throw ValidationError("total_fg_classes must be >= 1");

  TaskSequence task;
  task.mode = mode;
  if (step == 0) {
    if (initial != total_fg_classes)
      throw ValidationError("protocol '" + protocol + "' does not cover " + std::to_string(total_fg_classes) + " classes");
  } else {
    const int rest = total_fg_classes - initial;
    if (rest <= 0 || rest % step != 0)
      throw ValidationError("protocol '" + protocol + "' is inconsistent with " + std::to_string(total_fg_classes) +
                            " classes");
  }
  std::vector<int> first;
  for (int c = 1; c <= initial; ++c) first.push_back(c);
  task.partitions.push_back(first);
  for (int c = initial + 1; c <= total_fg_classes; c += step) {
    std::vector<int> part;
    for (int j = 0; j < step; ++j) part.push_back(c + j);
    task.partitions.push_back(part);
  }
  return task;
}

struct StepDataset {
  int step = 1;
  std::vector<LabeledImage> items;
  std::vector<int> visible_classes;
};

/// Rewrites every label outside C_t (and not ignore) to background.
inline Mask relabel_for_step(const Mask& m, const TaskSequence& task, int t) {
  Mask out = m;
  for (auto& v : out.data)
    if (v != kIgnore && v != kBackground && !task.is_new(v, t)) v = kBackground;
  return out;
}

/// Selects and relabels the images visible at step t.
inline StepDataset materialize_step(const std::vector<LabeledImage>& dataset, const TaskSequence& task, int t) {
  validate(task);
  if (t < 1 || t > task.num_steps())
    throw std::out_of_range("materialize_step: step " + std::to_string(t) + " outside 1.." +
                            std::to_string(task.num_steps()));
  StepDataset out;
  out.step = t;
  out.visible_classes = task.new_classes(t);
  for (const auto& item : dataset) {
    bool has_current = false, has_future = false;
    for (auto v : item.mask.data) {
      if (v == kIgnore || v == kBackground) continue;
      has_current = has_current || task.is_new(v, t);
      has_future = has_future || task.is_future(v, t);
    }
    if (!has_current) continue;
    if (task.mode == ProtocolMode::Disjoint && has_future) continue;
    out.items.push_back({item.image, relabel_for_step(item.mask, task, t), item.id});
  }
  return out;
}

}  // namespace rbc
