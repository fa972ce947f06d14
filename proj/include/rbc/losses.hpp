#pragma once

// Loss terms of the duplet objective and their gradients with
// respect to the network outputs (scores S and features F).
//
// All reductions run in row-major pixel order, channel-minor, so results are
// bit-reproducible for identical inputs.

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "rbc/model.hpp"
#include "rbc/pseudo.hpp"

namespace rbc {

inline constexpr double kLogEps = 1e-12;
inline constexpr double kDefaultRatioCap = 20.0;

/// Per-pixel loss weights.
struct WeightMap {
  int height = 0;
  int width = 0;
  std::vector<double> eta;  // row-major

  double at(int h, int w) const { return eta[static_cast<std::size_t>(h) * width + w]; }
};

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// eta = 0.5 + sigmoid(N_old / N_new) on old pixels, 1 elsewhere. N_new counts
/// refined labels in `new_classes`; with N_new = 0 the ratio is `ratio_cap`.
inline WeightMap weight_map(const RefinedTarget& rt, const PixelSet& old_pixels, std::span<const int> new_classes,
                            double ratio_cap = kDefaultRatioCap) {
  WeightMap wm{rt.labels.height, rt.labels.width, std::vector<double>(rt.labels.size(), 1.0)};
  if (old_pixels.empty()) return wm;
  std::size_t n_new = 0;
  for (auto v : rt.labels.data)
    for (int c : new_classes) n_new += (v == c);
  const double ratio =
      n_new == 0 ? ratio_cap : static_cast<double>(old_pixels.size()) / static_cast<double>(n_new);
  const double eta_old = 0.5 + sigmoid(ratio);
  for (const auto& p : old_pixels) {
    if (p.w < 0 || p.h < 0 || p.w >= wm.width || p.h >= wm.height)
      throw std::out_of_range("weight_map: pixel outside the image");
    wm.eta[static_cast<std::size_t>(p.h) * wm.width + p.w] = eta_old;
  }
  return wm;
}

/// Cross-entropy of hard targets, -(beta / WH) sum eta * log p[label], with
/// ignore pixels skipped. If `d_scores` is given, dL/dS is accumulated there
/// (softmax-CE form). `clamped` reports whether the eps guard fired.
template <typename T>
double weighted_ce(const Tensor<T>& prob, const Mask& labels, double beta, const WeightMap* eta,
                   Tensor<T>* d_scores = nullptr, bool* clamped = nullptr) {
  require_same_extent(prob, labels, "pseudo-label loss");
  if (eta && (eta->height != labels.height || eta->width != labels.width))
    throw ShapeError("pseudo-label loss: weight map extent differs");
  const std::size_t n = prob.plane();
  const double scale = beta / static_cast<double>(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels.data[i];
    if (y == kIgnore) continue;
    if (y >= prob.channels)
      throw std::out_of_range("pseudo-label loss: label " + std::to_string(y) + " has no output channel");
    const double w = eta ? eta->eta[i] : 1.0;
    double p = static_cast<double>(prob.data[y * n + i]);
    if (p < kLogEps) {
      p = kLogEps;
      if (clamped) *clamped = true;
    }
    sum += w * std::log(p);
    if (d_scores && scale != 0.0) {
      const T coef = static_cast<T>(scale * w);
      for (int c = 0; c < prob.channels; ++c) d_scores->data[c * n + i] += coef * prob.data[c * n + i];
      d_scores->data[y * n + i] -= coef;
    }
  }
  return -scale * sum;
}

template <typename T>
double ps_loss(const Tensor<T>& prob, const RefinedTarget& rt) {
  return weighted_ce(prob, rt.labels, rt.beta, nullptr);
}

template <typename T>
double bps_loss(const Tensor<T>& prob, const RefinedTarget& rt, const WeightMap& eta) {
  return weighted_ce(prob, rt.labels, rt.beta, &eta);
}

/// ||phi(F_t) - phi(F_prev)||^2 given the frozen descriptor. Accumulates
/// dL/dF_t into `d_features` when given.
template <typename T>
double kd_loss_from_descriptor(const Tensor<T>& feat_t, const RowMatrix<T>& phi_prev, Tensor<T>* d_features = nullptr,
                               double scale = 1.0) {
  const RowMatrix<T> phi_t = phi_pool(feat_t);
  if (phi_t.rows() != phi_prev.rows() || phi_t.cols() != phi_prev.cols())
    throw ShapeError("kd_loss: feature shapes differ");
  const RowMatrix<T> diff = phi_t - phi_prev;
  double sum = 0.0;
  for (Eigen::Index r = 0; r < diff.rows(); ++r)
    for (Eigen::Index c = 0; c < diff.cols(); ++c) sum += static_cast<double>(diff(r, c)) * diff(r, c);
  if (d_features) {
    const int hgt = feat_t.height, wid = feat_t.width;
    const T row_scale = static_cast<T>(2.0 * scale / wid), col_scale = static_cast<T>(2.0 * scale / hgt);
    for (int c = 0; c < feat_t.channels; ++c)
      for (int y = 0; y < hgt; ++y)
        for (int x = 0; x < wid; ++x)
          d_features->at(c, y, x) += row_scale * diff(y, c) + col_scale * diff(hgt + x, c);
  }
  return scale * sum;
}

template <typename T>
double kd_loss(const Tensor<T>& feat_t, const Tensor<T>& feat_prev) {
  if (!feat_t.same_shape(feat_prev)) throw ShapeError("kd_loss: feature shapes differ");
  return kd_loss_from_descriptor(feat_t, phi_pool(feat_prev));
}

/// sum over old pixels and old-class channels 1..num_old_classes of
/// (S(x-bar) - S(x))^2, on pre-softmax scores.
template <typename T>
double ctx_loss(const Tensor<T>& score_x, const Tensor<T>& score_xbar, const PixelSet& old_pixels, int num_old_classes,
                Tensor<T>* d_score_x = nullptr, Tensor<T>* d_score_xbar = nullptr, double scale = 1.0) {
  if (!score_x.same_shape(score_xbar)) throw ShapeError("ctx_loss: score maps differ in shape");
  if (num_old_classes >= score_x.channels) throw std::out_of_range("ctx_loss: more old classes than channels");
  double sum = 0.0;
  for (const auto& p : old_pixels)
    for (int c = 1; c <= num_old_classes; ++c) {
      const double d = static_cast<double>(score_xbar.at(c, p.h, p.w)) - score_x.at(c, p.h, p.w);
      sum += d * d;
      if (d_score_x) d_score_x->at(c, p.h, p.w) -= static_cast<T>(2.0 * scale * d);
      if (d_score_xbar) d_score_xbar->at(c, p.h, p.w) += static_cast<T>(2.0 * scale * d);
    }
  return scale * sum;
}

struct LossHyper {
  double alpha = 1.0;
  double gamma = 0.01;
  double tau = 0.8;
  /// Divide l_kd by the descriptor size and l_ctx by |O(x)| * |C_{1:t-1}|.
  bool mean_reduction = false;
};

struct LossBreakdown {
  double l_ps = 0.0;              // plain pseudo-label CE terms
  std::optional<double> l_bps;    // balanced term, when the weight map was used
  double l_kd = 0.0;              // all distillation terms, before alpha
  std::optional<double> l_ctx;    // consistency term, when computed
  double l_dup = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double gamma = 0.0;
  double tau = 0.0;
  std::vector<double> betas;
  bool eps_clamped = false;
};

/// One forward pass of the current model with the frozen model's descriptor.
template <typename T>
struct BranchOutputs {
  const Tensor<T>* scores = nullptr;
  const Tensor<T>* features = nullptr;
  const RowMatrix<T>* phi_prev = nullptr;
  const Mask* target = nullptr;
};

/// Inputs for l'(x) [+ l(x-bar) + gamma * l_ctx]. `second` may be absent
/// (single-image objective) or carry x-bar / a duplicate of x.
template <typename T>
struct DupletLossInput {
  BranchOutputs<T> first;
  std::optional<BranchOutputs<T>> second;
  double beta = 0.0;
  const WeightMap* eta = nullptr;       // balanced CE on `first` when set
  const PixelSet* old_pixels = nullptr; // required for the consistency term
  int num_old_classes = 0;
  bool use_ctx = false;
};

template <typename T>
struct DupletLossGrads {
  Tensor<T> d_scores_first, d_features_first, d_scores_second, d_features_second;
};

template <typename T>
LossBreakdown total_loss(const DupletLossInput<T>& in, const LossHyper& hyper, DupletLossGrads<T>* grads = nullptr) {
  auto check = [](const BranchOutputs<T>& b) {
    if (!b.scores || !b.features || !b.target) throw std::invalid_argument("total_loss: incomplete branch");
    if (!b.phi_prev) throw MissingOldModel();
  };
  check(in.first);
  if (in.second) check(*in.second);
  if (grads) {
    auto zero_like = [](const Tensor<T>& t) { return Tensor<T>(t.channels, t.height, t.width); };
    grads->d_scores_first = zero_like(*in.first.scores);
    grads->d_features_first = zero_like(*in.first.features);
    if (in.second) {
      grads->d_scores_second = zero_like(*in.second->scores);
      grads->d_features_second = zero_like(*in.second->features);
    }
  }

  LossBreakdown b;
  b.alpha = hyper.alpha;
  b.gamma = hyper.gamma;
  b.tau = hyper.tau;
  b.betas.push_back(in.beta);

  auto branch = [&](const BranchOutputs<T>& br, const WeightMap* eta, Tensor<T>* ds, Tensor<T>* df) {
    const Tensor<T> prob = softmax_scores(*br.scores);
    const double ce = weighted_ce(prob, *br.target, in.beta, eta, ds, &b.eps_clamped);
    const double kd_scale =
        hyper.mean_reduction ? 1.0 / static_cast<double>(br.phi_prev->size()) : 1.0;
    const double kd = kd_loss_from_descriptor<T>(*br.features, *br.phi_prev, nullptr, kd_scale);
    if (df && hyper.alpha != 0.0) kd_loss_from_descriptor(*br.features, *br.phi_prev, df, hyper.alpha * kd_scale);
    return std::pair{ce, kd};
  };

  auto [ce_first, kd_first] = branch(in.first, in.eta, grads ? &grads->d_scores_first : nullptr,
                                     grads ? &grads->d_features_first : nullptr);
  if (in.eta)
    b.l_bps = ce_first;
  else
    b.l_ps += ce_first;
  b.l_kd += kd_first;
  if (in.second) {
    auto [ce_second, kd_second] = branch(*in.second, nullptr, grads ? &grads->d_scores_second : nullptr,
                                         grads ? &grads->d_features_second : nullptr);
    b.l_ps += ce_second;
    b.l_kd += kd_second;
  }
  b.l_dup = b.l_ps + b.l_bps.value_or(0.0) + hyper.alpha * b.l_kd;
  b.total = b.l_dup;
  if (in.use_ctx) {
    if (!in.second) throw std::invalid_argument("total_loss: the consistency term needs both duplet members");
    if (!in.old_pixels) throw std::invalid_argument("total_loss: the consistency term needs O(x)");
    const double denom = static_cast<double>(in.old_pixels->size()) * in.num_old_classes;
    const double scale = hyper.mean_reduction && denom > 0 ? 1.0 / denom : 1.0;
    b.l_ctx = ctx_loss<T>(*in.first.scores, *in.second->scores, *in.old_pixels, in.num_old_classes, nullptr, nullptr,
                       scale);
    if (grads && hyper.gamma != 0.0)
      ctx_loss(*in.first.scores, *in.second->scores, *in.old_pixels, in.num_old_classes, &grads->d_scores_first,
               &grads->d_scores_second, hyper.gamma * scale);
    b.total += hyper.gamma * *b.l_ctx;
  }
  return b;
}

}  // namespace rbc
