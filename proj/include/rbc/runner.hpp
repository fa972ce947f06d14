#pragma once

// Experiment runner behind the command-line tool. Everything lives under one
// experiment directory:
//
//   datasets/seed<K>/{train,test}/            rasters + manifest.jsonl
//   checkpoints/seed<K>/<run>/step1.ckpt      shared by every ablation
//   checkpoints/seed<K>/<run>/<ablation>/step<T>.ckpt
//   logs/seed<K>/<run>/step1.jsonl, logs/seed<K>/<run>/<ablation>/step<T>.jsonl
//   metrics/seed<K>/<run>/<ablation>.json
//   metrics/summary.csv, metrics/table_<run>.csv
//   figures/miou_evolution_<run>.{svg,csv}, figures/per_class_<run>.{svg,csv}
//
// <run> is "<protocol>_<mode>", e.g. "4-2_overlapped".

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rbc/experiment.hpp"
#include "rbc/io.hpp"
#include "rbc/plot.hpp"

namespace rbc::runner {

namespace fs = std::filesystem;
using nlohmann::json;

inline const std::vector<Ablation>& all_ablations() {
  static const std::vector<Ablation> kAll{Ablation::FineTune, Ablation::Baseline, Ablation::Duplet,
                                          Ablation::DupletCtx, Ablation::Balance, Ablation::Full};
  return kAll;
}

inline std::string run_name(const TrainConfig& c) { return c.protocol + "_" + to_string(c.mode); }

struct Layout {
  fs::path root;

  fs::path dataset(std::uint64_t seed, const std::string& split) const {
    return root / "datasets" / ("seed" + std::to_string(seed)) / split;
  }
  fs::path run_checkpoints(std::uint64_t seed, const std::string& run) const {
    return root / "checkpoints" / ("seed" + std::to_string(seed)) / run;
  }
  fs::path checkpoint(std::uint64_t seed, const std::string& run, Ablation a, int t) const {
    const fs::path dir = run_checkpoints(seed, run);
    return t == 1 ? dir / "step1.ckpt" : dir / to_string(a) / ("step" + std::to_string(t) + ".ckpt");
  }
  fs::path log(std::uint64_t seed, const std::string& run, Ablation a, int t) const {
    const fs::path dir = root / "logs" / ("seed" + std::to_string(seed)) / run;
    return t == 1 ? dir / "step1.jsonl" : dir / to_string(a) / ("step" + std::to_string(t) + ".jsonl");
  }
  fs::path metrics(std::uint64_t seed, const std::string& run, Ablation a) const {
    return root / "metrics" / ("seed" + std::to_string(seed)) / run / (std::string(to_string(a)) + ".json");
  }
};

/// Progress lines from worker threads.
class Reporter {
 public:
  explicit Reporter(std::function<void(const std::string&)> sink = {}) : sink_(std::move(sink)) {}
  void operator()(const std::string& line) {
    if (!sink_) return;
    std::lock_guard lock(m_);
    sink_(line);
  }

 private:
  std::mutex m_;
  std::function<void(const std::string&)> sink_;
};

inline void generate(const ExperimentSpec& e, const Layout& out, std::uint64_t seed) {
  const auto data = generate_experiment_data(e, seed);
  for (const char* split : {"train", "test"}) {
    const fs::path dir = out.dataset(seed, split);
    fs::remove_all(dir);
    io::save_dataset(dir, split == std::string("train") ? data.train : data.test);
  }
}

inline ExperimentData load_or_generate(const ExperimentSpec& e, const Layout& out, std::uint64_t seed,
                                       Reporter& report) {
  if (!fs::exists(out.dataset(seed, "train") / "manifest.jsonl") ||
      !fs::exists(out.dataset(seed, "test") / "manifest.jsonl")) {
    report("seed " + std::to_string(seed) + ": generating dataset");
    generate(e, out, seed);
  }
  return {io::load_dataset(out.dataset(seed, "train")), io::load_dataset(out.dataset(seed, "test"))};
}

namespace detail {

/// Settings a checkpoint depends on. A stored fingerprint that differs from
/// the current one invalidates the checkpoints beneath it.
inline json fingerprint(const TrainConfig& c, const std::string& dataset_digest, bool with_increment) {
  json j{{"dataset", dataset_digest},
         {"protocol", c.protocol},
         {"mode", to_string(c.mode)},
         {"epochs_first_step", c.first_epochs()},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"momentum", c.momentum},
         {"weight_decay", c.weight_decay},
         {"arch", io::to_json(c.arch)},
         {"seed", c.seed}};
  if (with_increment) {
    j["ablation"] = to_string(c.ablation);
    j["epochs_per_step"] = c.epochs_per_step;
    j["learning_rate_increment"] = c.increment_lr();
    j["alpha"] = c.alpha;
    j["gamma"] = c.gamma;
    j["tau"] = c.tau;
    j["mean_reduction"] = c.mean_reduction;
    j["ratio_cap"] = c.ratio_cap;
    j["fill"] = c.fill == FillPolicy::Mean ? "mean" : "constant";
    j["fill_value"] = c.fill_value;
  }
  return j;
}

inline void ensure_fingerprint(const fs::path& dir, const json& fp) {
  const fs::path file = dir / "config.json";
  if (fs::exists(file)) {
    json old;
    try {
      old = json::parse(io::read_text(file));
    } catch (const json::exception&) {
    }
    if (old == fp) return;
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  io::write_text(file, fp.dump(2) + "\n");
}

}  // namespace detail

struct SeedRun {
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::Full;
  ContinualResult result;
};

/// Trains (or resumes) one seed and one ablation, writing checkpoints, logs
/// and metrics as each step completes.
inline SeedRun train_one(const ExperimentSpec& e, const Layout& out, const ExperimentData& data, std::uint64_t seed,
                         Ablation ablation, Reporter& report) {
  TrainConfig cfg = e.train;
  cfg.seed = seed;
  cfg.ablation = ablation;
  const std::string run = run_name(cfg);
  const fs::path shared = out.run_checkpoints(seed, run), own = shared / to_string(ablation);
  const std::string digest =
      std::to_string(std::hash<std::string>{}(io::read_text(out.dataset(seed, "train") / "manifest.jsonl")));
  detail::ensure_fingerprint(shared, detail::fingerprint(cfg, digest, false));
  detail::ensure_fingerprint(own, detail::fingerprint(cfg, digest, true));

  RunHooks hooks;
  hooks.load_step = [&](int t) -> std::optional<SegModel<float>> {
    const fs::path p = out.checkpoint(seed, run, ablation, t);
    if (!fs::exists(p)) return std::nullopt;
    auto ck = io::load_checkpoint(p);
    if (ck.step != t) throw io::IoError(p, "checkpoint holds step " + std::to_string(ck.step));
    return std::move(ck.model);
  };
  hooks.on_step = [&](const StepArtifacts& art) {
    const std::string tag = "seed " + std::to_string(seed) + " " + to_string(ablation) + " step " + std::to_string(art.step);
    if (art.resumed) {
      report(tag + ": loaded checkpoint");
      return;
    }
    io::save_checkpoint(out.checkpoint(seed, run, ablation, art.step), art.model, art.step);
    auto f = io::open_out(out.log(seed, run, ablation, art.step));
    io::append_training_log(f, art.log, seed, to_string(ablation));
    const auto all = art.metrics.group_miou.all;
    report(tag + ": mIoU(all) " + (all ? std::to_string(*all) : std::string("n/a")));
  };
  SeedRun r{seed, ablation, run_continual(cfg, e.num_fg_classes(), data.train, data.test, hooks)};
  json j = io::to_json(r.result.report);
  j["seed"] = seed;
  j["ablation"] = to_string(ablation);
  j["protocol"] = cfg.protocol;
  j["mode"] = to_string(cfg.mode);
  io::write_text(out.metrics(seed, run, ablation), j.dump(2) + "\n");
  return r;
}

/// Re-evaluates stored checkpoints of one seed and ablation.
inline MetricsReport evaluate_one(const ExperimentSpec& e, const Layout& out, const ExperimentData& data,
                                  std::uint64_t seed, Ablation ablation) {
  TrainConfig cfg = e.train;
  const std::string run = run_name(cfg);
  const auto task = build_task_sequence(e.num_fg_classes(), cfg.protocol, cfg.mode);
  MetricsReport report;
  for (int t = 1; t <= task.num_steps(); ++t) {
    const fs::path p = out.checkpoint(seed, run, ablation, t);
    if (!fs::exists(p)) throw io::IoError(p, "missing checkpoint; train this ablation first");
    const auto ck = io::load_checkpoint(p);
    auto m = evaluate_step(ck.model, data.test, task, t);
    report.per_step_history.push_back(m.group_miou);
    const auto history = report.per_step_history;
    report = std::move(m);
    report.per_step_history = history;
  }
  json j = io::to_json(report);
  j["seed"] = seed;
  j["ablation"] = to_string(ablation);
  j["protocol"] = cfg.protocol;
  j["mode"] = to_string(cfg.mode);
  io::write_text(out.metrics(seed, run, ablation), j.dump(2) + "\n");
  return report;
}

/// Runs `job` for every seed on up to `workers` threads. The first failure
/// is rethrown after all threads finish.
inline void for_each_seed(const std::vector<std::uint64_t>& seeds, int workers,
                          const std::function<void(std::uint64_t)>& job) {
  workers = std::max(1, std::min<int>(workers, static_cast<int>(seeds.size())));
  std::mutex m;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto loop = [&] {
    for (;;) {
      std::uint64_t seed;
      {
        std::lock_guard lock(m);
        if (next >= seeds.size() || failure) return;
        seed = seeds[next++];
      }
      try {
        job(seed);
      } catch (...) {
        std::lock_guard lock(m);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int i = 1; i < workers; ++i) pool.emplace_back(loop);
  loop();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------- aggregation

struct MetricsRecord {
  std::uint64_t seed = 0;
  std::string ablation, run;
  MetricsReport report;
};

/// Every metrics file under <root>/metrics, ordered by run, ablation, seed.
inline std::vector<MetricsRecord> collect_metrics(const Layout& out) {
  std::vector<MetricsRecord> recs;
  const fs::path dir = out.root / "metrics";
  if (!fs::exists(dir)) return recs;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
    json j;
    try {
      j = json::parse(io::read_text(entry.path()));
    } catch (const json::exception& ex) {
      throw io::IoError(entry.path(), ex.what());
    }
    MetricsRecord r;
    r.seed = j.at("seed");
    r.ablation = j.at("ablation");
    r.run = j.at("protocol").get<std::string>() + "_" + j.at("mode").get<std::string>();
    r.report = io::metrics_from_json(j);
    recs.push_back(std::move(r));
  }
  auto order = [](const std::string& a) {
    for (std::size_t i = 0; i < all_ablations().size(); ++i)
      if (a == to_string(all_ablations()[i])) return i;
    return all_ablations().size();
  };
  std::sort(recs.begin(), recs.end(), [&](const MetricsRecord& a, const MetricsRecord& b) {
    return std::tuple(a.run, order(a.ablation), a.ablation, a.seed) <
           std::tuple(b.run, order(b.ablation), b.ablation, b.seed);
  });
  return recs;
}

struct Stat {
  std::optional<double> mean, std;
  int n = 0;
};

/// Mean and sample standard deviation over the defined values.
inline Stat stat_of(const std::vector<std::optional<double>>& values) {
  Stat s;
  double sum = 0;
  for (const auto& v : values)
    if (v) sum += *v, ++s.n;
  if (s.n == 0) return s;
  s.mean = sum / s.n;
  double ss = 0;
  for (const auto& v : values)
    if (v) ss += (*v - *s.mean) * (*v - *s.mean);
  s.std = s.n > 1 ? std::sqrt(ss / (s.n - 1)) : 0.0;
  return s;
}

using Grouped = std::map<std::string, std::map<std::string, std::vector<const MetricsRecord*>>>;

inline Grouped group_records(const std::vector<MetricsRecord>& recs, std::vector<std::pair<std::string, std::string>>* order) {
  Grouped g;
  for (const auto& r : recs) {
    auto& v = g[r.run][r.ablation];
    if (v.empty() && order) order->emplace_back(r.run, r.ablation);
    v.push_back(&r);
  }
  return g;
}

/// metrics/summary.csv (one row per run, ablation and group) and one
/// metrics/table_<run>.csv of seed means per run.
inline void write_summaries(const Layout& out) {
  const auto recs = collect_metrics(out);
  if (recs.empty()) throw io::IoError(out.root / "metrics", "no metrics found");
  std::vector<std::pair<std::string, std::string>> order;
  const auto groups = group_records(recs, &order);
  std::string summary = "run,ablation,group,mean,std,n\n";
  std::map<std::string, std::vector<std::pair<std::string, GroupMiou>>> tables;
  for (const auto& [run, abl] : order) {
    const auto& rs = groups.at(run).at(abl);
    GroupMiou means;
    const std::pair<const char*, std::optional<double> GroupMiou::*> cols[] = {
        {"initial", &GroupMiou::initial}, {"incremented", &GroupMiou::incremented}, {"all", &GroupMiou::all}};
    for (const auto& [name, field] : cols) {
      std::vector<std::optional<double>> vals;
      for (const auto* r : rs) vals.push_back(r->report.group_miou.*field);
      const Stat s = stat_of(vals);
      summary += run + "," + abl + "," + name + "," + io::format_value(s.mean) + "," + io::format_value(s.std) + "," +
                 std::to_string(s.n) + "\n";
      means.*field = s.mean;
    }
    tables[run].emplace_back(abl, means);
  }
  io::write_text(out.root / "metrics" / "summary.csv", summary);
  for (const auto& [run, rows] : tables)
    io::write_text(out.root / "metrics" / ("table_" + run + ".csv"), io::metrics_table_csv(rows));
}

/// Figures per run: mIoU(all) evolution across steps, one curve per
/// ablation, and final per-class IoU bars. Each SVG has a CSV twin holding
/// the plotted values.
inline std::vector<fs::path> write_figures(const Layout& out) {
  const auto recs = collect_metrics(out);
  if (recs.empty()) throw io::IoError(out.root / "metrics", "no metrics found");
  std::vector<std::pair<std::string, std::string>> order;
  const auto groups = group_records(recs, &order);
  std::vector<fs::path> written;
  for (const auto& [run, by_abl] : groups) {
    std::vector<plot::Series> evolution, per_class;
    std::size_t steps = 0, classes = 0;
    for (const auto& [r, abl] : order) {
      if (r != run) continue;
      for (const auto* rec : by_abl.at(abl)) {
        steps = std::max(steps, rec->report.per_step_history.size());
        classes = std::max(classes, rec->report.per_class_iou.size());
      }
    }
    std::string evo_csv = "series,x,value\n", cls_csv = "series,x,value\n";
    std::vector<std::string> step_labels, class_labels;
    for (std::size_t t = 1; t <= steps; ++t) step_labels.push_back("step " + std::to_string(t));
    for (std::size_t c = 0; c < classes; ++c) class_labels.push_back(c == 0 ? "bg" : "class " + std::to_string(c));
    for (const auto& [r, abl] : order) {
      if (r != run) continue;
      const auto& rs = by_abl.at(abl);
      plot::Series evo{abl, {}}, bars{abl, {}};
      for (std::size_t t = 0; t < steps; ++t) {
        std::vector<std::optional<double>> vals;
        for (const auto* rec : rs)
          if (t < rec->report.per_step_history.size()) vals.push_back(rec->report.per_step_history[t].all);
        evo.values.push_back(stat_of(vals).mean);
        evo_csv += abl + "," + step_labels[t] + "," + io::format_value(evo.values.back()) + "\n";
      }
      for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::optional<double>> vals;
        for (const auto* rec : rs)
          if (c < rec->report.per_class_iou.size()) vals.push_back(rec->report.per_class_iou[c]);
        bars.values.push_back(stat_of(vals).mean);
        cls_csv += abl + "," + class_labels[c] + "," + io::format_value(bars.values.back()) + "\n";
      }
      evolution.push_back(std::move(evo));
      per_class.push_back(std::move(bars));
    }
    const fs::path fig = out.root / "figures";
    const auto emit = [&](const std::string& stem, const std::string& svg, const std::string& csv) {
      io::write_text(fig / (stem + ".svg"), svg);
      io::write_text(fig / (stem + ".csv"), csv);
      written.push_back(fig / (stem + ".svg"));
    };
    emit("miou_evolution_" + run, plot::line_chart("mIoU evolution (" + run + ")", step_labels, evolution, "mIoU (all)"),
         evo_csv);
    emit("per_class_" + run, plot::bar_chart("Per-class IoU after the last step (" + run + ")", class_labels, per_class),
         cls_csv);
  }
  return written;
}

}  // namespace rbc::runner
