#pragma once

// Old-model pseudo labels fused with the new-class ground truth.

#include <compare>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rbc/model.hpp"
#include "rbc/tensor.hpp"

namespace rbc {

/// Pixel location; `w` is the column, `h` the row.
struct PixelCoord {
  int w = 0;
  int h = 0;
  auto operator<=>(const PixelCoord&) const = default;
};

/// Row-major ordered, duplicate-free set of locations.
using PixelSet = std::vector<PixelCoord>;

struct PseudoPrediction {
  Mask labels;                    // argmax over C_{0:t-1}
  std::vector<double> confidence; // max probability, row-major
};

struct RefinedTarget {
  Mask labels;
  double beta = 0.0;
  Mask accepted;  // 1 where an old-class pseudo label was accepted

  bool operator==(const RefinedTarget&) const = default;
};

class MissingOldModel : public std::logic_error {
 public:
  MissingOldModel() : std::logic_error("no previous-step model is available (step 1 has none)") {}
};

template <typename T>
PseudoPrediction predict_pseudo(const SegModel<T>* old_model, const Tensor<T>& image) {
  if (old_model == nullptr) throw MissingOldModel();
  auto [labels, conf] = argmax_labels(softmax_scores(forward(*old_model, image).scores));
  PseudoPrediction out;
  out.labels = std::move(labels);
  out.confidence.assign(conf.begin(), conf.end());
  return out;
}

/// Step-t mask (labels in C_t, 0 or 255) fused with old-model predictions.
///
/// Background pixels the old model assigns to an old class are candidates;
/// a candidate is accepted when its confidence exceeds tau and becomes ignore
/// otherwise. beta = accepted / candidates (0 without candidates).
inline RefinedTarget fuse_targets(const Mask& gt, const PseudoPrediction& pseudo, double tau) {
  require_same_extent(gt, pseudo.labels, "fuse_targets");
  if (pseudo.confidence.size() != gt.size()) throw ShapeError("fuse_targets: confidence size mismatch");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("fuse_targets: tau must lie in [0,1]");
  RefinedTarget rt;
  rt.labels = gt;
  rt.accepted = Mask(gt.height, gt.width, 0);
  std::size_t candidates = 0, accepted = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt.data[i] != kBackground) continue;
    const std::uint8_t p = pseudo.labels.data[i];
    if (p == kBackground) continue;
    ++candidates;
    if (pseudo.confidence[i] > tau) {
      rt.labels.data[i] = p;
      rt.accepted.data[i] = 1;
      ++accepted;
    } else {
      rt.labels.data[i] = kIgnore;
    }
  }
  rt.beta = candidates == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(candidates);
  return rt;
}

/// Locations whose refined label is an old class (1..num_old_classes).
inline PixelSet old_pixel_set(const RefinedTarget& rt, int num_old_classes) {
  PixelSet out;
  for (int h = 0; h < rt.labels.height; ++h)
    for (int w = 0; w < rt.labels.width; ++w) {
      const int v = rt.labels.at(h, w);
      if (v >= 1 && v <= num_old_classes) out.push_back({w, h});
    }
  return out;
}

}  // namespace rbc
