#pragma once

// Continual training loop: plain cross-entropy at step 1, then duplet-based
// incremental steps against a frozen copy of the previous model.

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rbc/data_synth.hpp"
#include "rbc/duplet.hpp"
#include "rbc/eval.hpp"
#include "rbc/losses.hpp"
#include "rbc/model.hpp"

namespace rbc {

/// Incremental-step variants. FineTune is the naive lower bound (plain CE on
/// the step labels, no pseudo labels, no distillation).
enum class Ablation { Baseline, Double, Duplet, DupletCtx, Balance, Full, FineTune };

inline const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::Baseline: return "baseline";
    case Ablation::Double: return "double";
    case Ablation::Duplet: return "duplet";
    case Ablation::DupletCtx: return "duplet_ctx";
    case Ablation::Balance: return "balance";
    case Ablation::Full: return "full";
    case Ablation::FineTune: return "ft";
  }
  return "baseline";
}

inline Ablation ablation_from_string(const std::string& s) {
  for (auto a : {Ablation::Baseline, Ablation::Double, Ablation::Duplet, Ablation::DupletCtx, Ablation::Balance,
                 Ablation::Full, Ablation::FineTune})
    if (s == to_string(a)) return a;
  throw ValidationError("unknown ablation '" + s + "'");
}

inline bool uses_erased(Ablation a) {
  return a == Ablation::Duplet || a == Ablation::DupletCtx || a == Ablation::Full;
}
inline bool uses_ctx(Ablation a) { return a == Ablation::DupletCtx || a == Ablation::Full; }
inline bool uses_balance(Ablation a) { return a == Ablation::Balance || a == Ablation::Full; }

enum class FillPolicy { Mean, Constant };

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string protocol = "4-2";
  ProtocolMode mode = ProtocolMode::Overlapped;
  int epochs_per_step = 10;
  int epochs_first_step = -1;  // < 0: same as epochs_per_step
  int batch_size = 8;
  double learning_rate = 0.05;
  double learning_rate_increment = -1;  // < 0: same as learning_rate
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double alpha = 0.001;
  double gamma = 0.01;
  double tau = 0.8;
  bool mean_reduction = false;
  double ratio_cap = kDefaultRatioCap;
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::Full;
  FillPolicy fill = FillPolicy::Mean;
  FillValue fill_value{0.5f, 0.5f, 0.5f};
  ArchConfig arch;

  int first_epochs() const { return epochs_first_step < 0 ? epochs_per_step : epochs_first_step; }
  double increment_lr() const { return learning_rate_increment < 0 ? learning_rate : learning_rate_increment; }
  LossHyper hyper() const { return {alpha, gamma, tau, mean_reduction}; }
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 2 || c.batch_size % 2 != 0) throw ValidationError("batch_size must be an even number >= 2");
  if (c.gamma < 0) throw ValidationError("gamma must be >= 0");
  if (!(c.tau >= 0 && c.tau <= 1)) throw ValidationError("tau must lie in [0,1]");
  if (c.epochs_per_step < 0) throw ValidationError("epochs_per_step must be >= 0");
  if (c.learning_rate <= 0) throw ValidationError("learning_rate must be > 0");
  if (c.momentum < 0 || c.momentum >= 1) throw ValidationError("momentum must lie in [0,1)");
  if (c.weight_decay < 0) throw ValidationError("weight_decay must be >= 0");
  if (c.alpha < 0) throw ValidationError("alpha must be >= 0");
}

/// Loss components of every optimization step of one epoch, and their mean.
struct EpochLog {
  int step = 1;
  int epoch = 0;
  LossBreakdown mean;
  int batches = 0;
  std::vector<LossBreakdown> per_batch;
};

struct StepArtifacts {
  int step = 1;
  SegModel<float> model;
  int predecessor_step = 0;  // 0 at step 1
  std::vector<EpochLog> log;
  MetricsReport metrics;     // on the test set, classes seen so far
  bool resumed = false;
};

/// SGD with momentum and L2 weight decay (PyTorch convention).
template <typename T>
class Sgd {
 public:
  Sgd(const SegModel<T>& model, double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), wd_(weight_decay), velocity_(model.zero_gradients()) {}

  void step(SegModel<T>& model, const Gradients<T>& g) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      update(model.layers[l].weight, g.weight[l], velocity_.weight[l], true);
      update(model.layers[l].bias, g.bias[l], velocity_.bias[l], false);
    }
  }

 private:
  void update(std::vector<T>& p, const std::vector<T>& g, std::vector<T>& v, bool decay) const {
    const T lr = static_cast<T>(lr_), mu = static_cast<T>(momentum_), wd = decay ? static_cast<T>(wd_) : T(0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] + g[i] + wd * p[i];
      p[i] -= lr * v[i];
    }
  }

  double lr_, momentum_, wd_;
  Gradients<T> velocity_;
};

namespace detail {

inline void add_breakdown(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.l_ps += w * b.l_ps;
  if (b.l_bps) acc.l_bps = acc.l_bps.value_or(0.0) + w * *b.l_bps;
  acc.l_kd += w * b.l_kd;
  if (b.l_ctx) acc.l_ctx = acc.l_ctx.value_or(0.0) + w * *b.l_ctx;
  acc.l_dup += w * b.l_dup;
  acc.total += w * b.total;
  acc.alpha = b.alpha;
  acc.gamma = b.gamma;
  acc.tau = b.tau;
  acc.betas.insert(acc.betas.end(), b.betas.begin(), b.betas.end());
  acc.eps_clamped = acc.eps_clamped || b.eps_clamped;
}

inline void scale_breakdown(LossBreakdown& b, double s) {
  b.l_ps *= s;
  if (b.l_bps) *b.l_bps *= s;
  b.l_kd *= s;
  if (b.l_ctx) *b.l_ctx *= s;
  b.l_dup *= s;
  b.total *= s;
}

template <typename T>
void scale(Tensor<T>& t, T s) {
  for (auto& v : t.data) v *= s;
}

inline void require_finite(double loss, int step, int epoch) {
  if (!std::isfinite(loss))
    throw TrainingDiverged("training diverged at step " + std::to_string(step) + ", epoch " + std::to_string(epoch) +
                           ": non-finite loss; lower alpha, gamma or the learning rate");
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline std::uint64_t step_seed(std::uint64_t seed, int step, std::uint64_t salt) {
  return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(step) * 1000003ull + salt));
}

/// Mean per-pixel cross-entropy over the non-ignore pixels of `mask`.
template <typename T>
double plain_ce_with_grad(const Tensor<T>& scores, const Mask& mask, Tensor<T>& d_scores) {
  std::size_t valid = 0;
  for (auto v : mask.data) valid += (v != kIgnore);
  if (valid == 0) return 0.0;
  const double beta = static_cast<double>(mask.size()) / static_cast<double>(valid);
  return weighted_ce(softmax_scores(scores), mask, beta, nullptr, &d_scores);
}

/// Plain cross-entropy epochs on the masks as given.
inline std::vector<EpochLog> train_plain_ce(SegModel<float>& model, const std::vector<LabeledImage>& items, int step,
                                            int epochs, double lr, const TrainConfig& cfg) {
  std::vector<EpochLog> logs;
  Sgd<float> opt(model, lr, cfg.momentum, cfg.weight_decay);
  std::mt19937_64 rng(step_seed(cfg.seed, step, 0x5eed));
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    EpochLog log{step, epoch, {}, 0, {}};
    const auto order = shuffled_indices(items.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const float weight = 1.0f / static_cast<float>(end - start);
      auto grads = model.zero_gradients();
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& item = items[order[k]];
        ForwardCache<float> cache;
        auto out = forward(model, item.image, &cache);
        Tensor<float> ds(out.scores.channels, out.scores.height, out.scores.width);
        batch_loss += plain_ce_with_grad(out.scores, item.mask, ds);
        scale(ds, weight);
        backward(model, cache, ds, Tensor<float>{}, grads);
      }
      require_finite(batch_loss, step, epoch);
      opt.step(model, grads);
      LossBreakdown b;
      b.l_ps = b.l_dup = b.total = batch_loss * weight;
      add_breakdown(log.mean, b, 1.0);
      log.per_batch.push_back(std::move(b));
      ++log.batches;
    }
    if (log.batches) scale_breakdown(log.mean, 1.0 / log.batches);
    logs.push_back(std::move(log));
  }
  return logs;
}

}  // namespace detail

/// Step 1: train from scratch with cross-entropy over C_0 and C_1.
inline StepArtifacts train_first_step(const TrainConfig& cfg, const StepDataset& data) {
  validate(cfg);
  if (data.step != 1) throw ValidationError("train_first_step: dataset is for step " + std::to_string(data.step));
  if (data.items.empty()) throw ValidationError("train_first_step: empty dataset");
  StepArtifacts art;
  art.step = 1;
  art.model = make_model<float>(cfg.arch, static_cast<int>(data.visible_classes.size()),
                                detail::step_seed(cfg.seed, 1, 0x1417));
  art.log = detail::train_plain_ce(art.model, data.items, 1, cfg.first_epochs(), cfg.learning_rate, cfg);
  return art;
}

/// Per-image quantities that depend only on the frozen model.
struct PreparedDuplet {
  Duplet duplet;
  Tensor<float> image;         // original, as fed to the network
  RowMatrix<float> phi_prev;   // phi(F_{t-1}(x))
  RowMatrix<float> phi_prev_erased;
  std::optional<WeightMap> eta;
};

inline std::vector<PreparedDuplet> prepare_duplets(const StepDataset& data, const SegModel<float>& prev,
                                                   const TaskSequence& task, const TrainConfig& cfg) {
  const FillValue fill = cfg.fill == FillPolicy::Mean ? mean_fill(data.items) : cfg.fill_value;
  std::vector<PreparedDuplet> out;
  out.reserve(data.items.size());
  for (const auto& item : data.items) {
    PreparedDuplet p;
    p.duplet = make_duplet(item, &prev, task, data.step, cfg.tau, fill);
    p.image = item.image;
    p.phi_prev = phi_pool(forward(prev, p.image).features);
    if (uses_erased(cfg.ablation)) p.phi_prev_erased = phi_pool(forward(prev, p.duplet.erased_image).features);
    if (uses_balance(cfg.ablation))
      p.eta = weight_map(p.duplet.refined, p.duplet.old_pixels, task.new_classes(data.step), cfg.ratio_cap);
    out.push_back(std::move(p));
  }
  return out;
}

/// Step t >= 2: extend the head and optimise the configured objective while
/// `prev` stays frozen.
inline StepArtifacts train_increment_step(const TrainConfig& cfg, const TaskSequence& task, const StepDataset& data,
                                          const SegModel<float>* prev) {
  validate(cfg);
  if (prev == nullptr) throw MissingOldModel();
  const int t = data.step;
  if (t < 2 || t > task.num_steps()) throw ValidationError("train_increment_step: invalid step " + std::to_string(t));
  StepArtifacts art;
  art.step = t;
  art.predecessor_step = t - 1;
  art.model = extend_head(*prev, static_cast<int>(task.new_classes(t).size()));
  if (data.items.empty()) return art;

  const int epochs = cfg.epochs_per_step;
  if (cfg.ablation == Ablation::FineTune) {
    art.log = detail::train_plain_ce(art.model, data.items, t, epochs, cfg.increment_lr(), cfg);
    return art;
  }

  const auto prepared = prepare_duplets(data, *prev, task, cfg);
  const LossHyper hyper = cfg.hyper();
  const int n_old = task.classes_seen(t - 1);
  Sgd<float> opt(art.model, cfg.increment_lr(), cfg.momentum, cfg.weight_decay);
  std::mt19937_64 rng(detail::step_seed(cfg.seed, t, 0x5eed));
  // Single-image objectives fill the batch with originals; duplet objectives
  // fill half of it with originals and half with their partners.
  const bool single = cfg.ablation == Ablation::Baseline || cfg.ablation == Ablation::Balance;
  const std::size_t originals_per_batch = static_cast<std::size_t>(single ? cfg.batch_size : cfg.batch_size / 2);
  SegModel<float>& model = art.model;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    EpochLog log{t, epoch, {}, 0, {}};
    const auto order = detail::shuffled_indices(prepared.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += originals_per_batch) {
      const std::size_t end = std::min(order.size(), start + originals_per_batch);
      const std::span<const std::size_t> chunk(order.data() + start, end - start);
      const DupletBatch batch = compose_batch(chunk, static_cast<int>(2 * chunk.size()), rng);
      const double denom = single ? static_cast<double>(chunk.size()) : static_cast<double>(batch.items.size());
      const float w = static_cast<float>(1.0 / denom);

      auto grads = model.zero_gradients();
      LossBreakdown batch_sum;
      for (const auto& item : batch.items) {
        if (item.is_erased) continue;  // handled with its original
        const PreparedDuplet& p = prepared[item.duplet];
        ForwardCache<float> cache_x;
        const auto out_x = forward(model, p.image, &cache_x);

        DupletLossInput<float> in;
        in.first = {&out_x.scores, &out_x.features, &p.phi_prev, &p.duplet.refined.labels};
        in.beta = p.duplet.refined.beta;
        in.num_old_classes = n_old;
        in.old_pixels = &p.duplet.old_pixels;
        if (uses_balance(cfg.ablation)) in.eta = &*p.eta;

        ForwardCache<float> cache_xbar;
        ForwardResult<float> out_xbar;
        if (cfg.ablation == Ablation::Double) {
          in.second = in.first;
        } else if (uses_erased(cfg.ablation)) {
          out_xbar = forward(model, p.duplet.erased_image, &cache_xbar);
          in.second = BranchOutputs<float>{&out_xbar.scores, &out_xbar.features, &p.phi_prev_erased,
                                           &p.duplet.erased_target};
          in.use_ctx = uses_ctx(cfg.ablation);
        }

        DupletLossGrads<float> g;
        const LossBreakdown b = total_loss(in, hyper, &g);
        detail::add_breakdown(batch_sum, b, 1.0);

        if (cfg.ablation == Ablation::Double) {
          detail::add_inplace(g.d_scores_first, g.d_scores_second);
          detail::add_inplace(g.d_features_first, g.d_features_second);
        }
        detail::scale(g.d_scores_first, w);
        detail::scale(g.d_features_first, w);
        backward(model, cache_x, g.d_scores_first, g.d_features_first, grads);
        if (uses_erased(cfg.ablation)) {
          detail::scale(g.d_scores_second, w);
          detail::scale(g.d_features_second, w);
          backward(model, cache_xbar, g.d_scores_second, g.d_features_second, grads);
        }
      }
      detail::require_finite(batch_sum.total, t, epoch);
      opt.step(model, grads);
      detail::scale_breakdown(batch_sum, 1.0 / denom);
      detail::add_breakdown(log.mean, batch_sum, 1.0);
      log.per_batch.push_back(std::move(batch_sum));
      ++log.batches;
    }
    if (log.batches) detail::scale_breakdown(log.mean, 1.0 / log.batches);
    art.log.push_back(std::move(log));
  }
  return art;
}

/// Confusion matrix over classes 0..|C_{1:t}| on a fully labelled test set;
/// labels of classes not yet introduced count as background.
inline ConfusionMatrix confusion_on(const SegModel<float>& model, const std::vector<LabeledImage>& test,
                                    const TaskSequence& task, int t) {
  const int seen = task.classes_seen(t);
  ConfusionMatrix cm(seen + 1);
  for (const auto& item : test) {
    Mask gt = item.mask;
    for (auto& v : gt.data)
      if (v != kIgnore && v > seen) v = kBackground;
    accumulate(cm, predict_labels(model, item.image), gt);
  }
  return cm;
}

inline ClassGroups groups_up_to(const TaskSequence& task, int t) {
  TaskSequence prefix = task;
  prefix.partitions.resize(static_cast<std::size_t>(t));
  return standard_groups(prefix);
}

inline MetricsReport evaluate_step(const SegModel<float>& model, const std::vector<LabeledImage>& test,
                                   const TaskSequence& task, int t) {
  return miou(confusion_on(model, test, task, t), groups_up_to(task, t));
}

struct RunHooks {
  /// Returns a finished model for step t to skip its training (resume / sharing).
  std::function<std::optional<SegModel<float>>(int)> load_step;
  std::function<void(const StepArtifacts&)> on_step;
};

struct ContinualResult {
  TaskSequence task;
  std::vector<StepArtifacts> steps;
  MetricsReport report;  // after the last step, with the per-step history
};

inline ContinualResult run_continual(const TrainConfig& cfg, int num_fg_classes,
                                     const std::vector<LabeledImage>& train_pool,
                                     const std::vector<LabeledImage>& test_set, const RunHooks& hooks = {}) {
  validate(cfg);
  ContinualResult res;
  res.task = build_task_sequence(num_fg_classes, cfg.protocol, cfg.mode);
  for (int t = 1; t <= res.task.num_steps(); ++t) {
    const StepDataset data = materialize_step(train_pool, res.task, t);
    StepArtifacts art;
    std::optional<SegModel<float>> loaded;
    if (hooks.load_step) loaded = hooks.load_step(t);
    if (loaded) {
      art.step = t;
      art.predecessor_step = t - 1;
      art.model = std::move(*loaded);
      art.resumed = true;
    } else if (t == 1) {
      art = train_first_step(cfg, data);
    } else {
      const SegModel<float> frozen = res.steps.back().model;
      art = train_increment_step(cfg, res.task, data, &frozen);
    }
    art.metrics = evaluate_step(art.model, test_set, res.task, t);
    res.report.per_step_history.push_back(art.metrics.group_miou);
    if (hooks.on_step) hooks.on_step(art);
    res.steps.push_back(std::move(art));
  }
  const auto history = std::move(res.report.per_step_history);
  res.report = res.steps.back().metrics;
  res.report.per_step_history = history;
  return res;
}

}  // namespace rbc
