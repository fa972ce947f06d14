#pragma once

// Image duplets: an incremental-step image paired with a copy whose
// new-class pixels are blanked, so old-class pixels are also seen without
// their new-class context.

#include <algorithm>
#include <array>
#include <random>
#include <span>
#include <vector>

#include "rbc/data_synth.hpp"
#include "rbc/pseudo.hpp"

namespace rbc {

using FillValue = std::array<float, 3>;

struct Erasure {
  Tensor<float> image;
  Mask erased;  // 1 where gt is a current-step class
};

template <typename Label>
bool contains(std::span<const Label> set, Label v) {
  return std::find(set.begin(), set.end(), v) != set.end();
}

inline Erasure erase_new_pixels(const Tensor<float>& image, const Mask& gt, std::span<const int> new_classes,
                                const FillValue& fill) {
  require_same_extent(image, gt, "erase_new_pixels");
  Erasure out{image, Mask(gt.height, gt.width, 0)};
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      if (!contains<int>(new_classes, gt.at(y, x))) continue;
      out.erased.at(y, x) = 1;
      for (int c = 0; c < image.channels; ++c) out.image.at(c, y, x) = fill[c % 3];
    }
  return out;
}

/// Per-channel mean over a set of images.
inline FillValue mean_fill(std::span<const LabeledImage> items) {
  std::array<double, 3> sum{0, 0, 0};
  double n = 0;
  for (const auto& it : items) {
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < it.image.plane(); ++i) sum[c] += it.image.channel(c)[i];
    n += static_cast<double>(it.image.plane());
  }
  if (n == 0) return {0.5f, 0.5f, 0.5f};
  return {static_cast<float>(sum[0] / n), static_cast<float>(sum[1] / n), static_cast<float>(sum[2] / n)};
}

struct Duplet {
  LabeledImage original;  // mask holds the step-t ground truth
  RefinedTarget refined;
  Tensor<float> erased_image;
  Mask erased_target;
  Mask erase_mask;
  PixelSet old_pixels;
};

/// Refined labels with the erased pixels set to ignore.
inline Mask erased_target(const Mask& refined, const Mask& erase_mask) {
  require_same_extent(refined, erase_mask, "erased_target");
  Mask out = refined;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (erase_mask.data[i]) out.data[i] = kIgnore;
  return out;
}

/// Builds (x, y~, x-bar, y-bar) for one step-t item using the frozen model.
template <typename T>
Duplet make_duplet(const LabeledImage& item, const SegModel<T>* old_model, const TaskSequence& task, int t,
                   double tau, const FillValue& fill) {
  if (t < 2) throw MissingOldModel();
  const PseudoPrediction pseudo = predict_pseudo(old_model, item.image.template cast<T>());
  Duplet d;
  d.original = item;
  d.refined = fuse_targets(item.mask, pseudo, tau);
  const auto& fresh = task.new_classes(t);
  Erasure er = erase_new_pixels(item.image, item.mask, fresh, fill);
  d.erased_image = std::move(er.image);
  d.erase_mask = std::move(er.erased);
  d.erased_target = erased_target(d.refined.labels, d.erase_mask);
  d.old_pixels = old_pixel_set(d.refined, task.classes_seen(t - 1));
  return d;
}

struct BatchItem {
  std::size_t duplet = 0;  // id of the source duplet
  bool is_erased = false;
  std::size_t paired = 0;  // position of the partner inside the batch
};

struct DupletBatch {
  std::vector<BatchItem> items;
};

/// Draws batch_size / 2 distinct duplets and lays them out as adjacent
/// (original, erased) pairs in a seeded order.
template <typename Rng>
DupletBatch compose_batch(std::span<const std::size_t> duplet_ids, int batch_size, Rng& rng) {
  if (batch_size < 2 || batch_size % 2 != 0)
    throw ValidationError("compose_batch: batch_size must be an even number >= 2");
  const std::size_t pairs = static_cast<std::size_t>(batch_size / 2);
  if (duplet_ids.size() < pairs) throw ValidationError("compose_batch: not enough duplets for the batch");
  std::vector<std::size_t> ids(duplet_ids.begin(), duplet_ids.end());
  std::shuffle(ids.begin(), ids.end(), rng);
  DupletBatch batch;
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t pos = batch.items.size();
    batch.items.push_back({ids[p], false, pos + 1});
    batch.items.push_back({ids[p], true, pos});
  }
  return batch;
}

}  // namespace rbc
