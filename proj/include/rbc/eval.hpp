#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rbc/data_synth.hpp"
#include "rbc/tensor.hpp"

namespace rbc {

/// counts[gt][pred] over background plus all foreground classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 1)
      : n_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {}

  int num_classes() const { return n_; }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * n_ + pred]; }
  std::uint64_t& at(int gt, int pred) { return counts_[static_cast<std::size_t>(gt) * n_ + pred]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  void merge(const ConfusionMatrix& o) {
    if (o.n_ != n_) throw std::invalid_argument("ConfusionMatrix::merge: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int n_;
  std::vector<std::uint64_t> counts_;
};

/// Adds every non-ignore pixel to the matrix.
inline ConfusionMatrix& accumulate(ConfusionMatrix& cm, const Mask& pred, const Mask& gt) {
  require_same_extent(pred, gt, "accumulate");
  const int n = cm.num_classes();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt.data[i];
    if (g == kIgnore) continue;
    const int p = pred.data[i];
    if (g >= n || p >= n)
      throw std::out_of_range("accumulate: label " + std::to_string(g >= n ? g : p) + " outside 0.." +
                              std::to_string(n - 1));
    ++cm.at(g, p);
  }
  return cm;
}

struct ClassGroups {
  std::vector<int> initial;      // background + C_1
  std::vector<int> incremented;  // C_{2:T}
  std::vector<int> all;          // background + C_{1:T}
};

inline ClassGroups standard_groups(const TaskSequence& task) {
  ClassGroups g;
  g.initial.push_back(0);
  g.all.push_back(0);
  for (int t = 1; t <= task.num_steps(); ++t)
    for (int c : task.new_classes(t)) {
      (t == 1 ? g.initial : g.incremented).push_back(c);
      g.all.push_back(c);
    }
  return g;
}

struct GroupMiou {
  std::optional<double> initial;
  std::optional<double> incremented;
  std::optional<double> all;
};

struct MetricsReport {
  std::vector<std::optional<double>> per_class_iou;  // undefined when TP+FP+FN == 0
  GroupMiou group_miou;
  std::vector<GroupMiou> per_step_history;            // filled by the continual runner
};

inline std::optional<double> class_iou(const ConfusionMatrix& cm, int c) {
  std::uint64_t row = 0, col = 0;
  for (int k = 0; k < cm.num_classes(); ++k) {
    row += cm.at(c, k);
    col += cm.at(k, c);
  }
  const std::uint64_t tp = cm.at(c, c);
  const std::uint64_t denom = row + col - tp;  // TP + FN + FP
  if (denom == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(denom);
}

/// Mean over the defined IoUs of `classes`; undefined if none is defined.
inline std::optional<double> group_mean(const std::vector<std::optional<double>>& iou, const std::vector<int>& classes) {
  double sum = 0;
  int n = 0;
  for (int c : classes) {
    if (c < 0 || c >= static_cast<int>(iou.size())) throw std::out_of_range("group_mean: class outside inventory");
    if (iou[c]) {
      sum += *iou[c];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

inline MetricsReport miou(const ConfusionMatrix& cm, const ClassGroups& groups) {
  MetricsReport r;
  for (int c = 0; c < cm.num_classes(); ++c) r.per_class_iou.push_back(class_iou(cm, c));
  r.group_miou.initial = group_mean(r.per_class_iou, groups.initial);
  r.group_miou.incremented = group_mean(r.per_class_iou, groups.incremented);
  r.group_miou.all = group_mean(r.per_class_iou, groups.all);
  return r;
}

}  // namespace rbc
