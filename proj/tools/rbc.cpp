// Command-line front end: generate / train / ablate / eval / plot.
//
// Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation error.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rbc/runner.hpp"

namespace {

using namespace rbc;
namespace fs = std::filesystem;

struct Options {
  std::string spec;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> ablations;
  std::string protocol;
  std::string mode;
  bool quiet = false;
};

int worker_count() {
  const char* v = std::getenv("RBC_WORKERS");
  if (!v || !*v) return 1;
  try {
    const int n = std::stoi(v);
    if (n >= 1) return n;
  } catch (const std::exception&) {
  }
  throw ValidationError(std::string("RBC_WORKERS: expected a positive integer, got '") + v + "'");
}

ExperimentSpec load_spec(const Options& o) {
  ExperimentSpec e = parse_experiment(io::read_text(o.spec));
  if (!o.seeds.empty()) e.seeds = o.seeds;
  if (!o.protocol.empty()) e.train.protocol = o.protocol;
  if (!o.mode.empty()) e.train.mode = protocol_mode_from_string(o.mode);
  build_task_sequence(e.num_fg_classes(), e.train.protocol, e.train.mode);
  return e;
}

std::vector<Ablation> chosen_ablations(const Options& o, const ExperimentSpec& e, bool sweep) {
  if (o.ablations.empty()) return sweep ? runner::all_ablations() : std::vector<Ablation>{e.train.ablation};
  std::vector<Ablation> out;
  for (const auto& a : o.ablations) out.push_back(ablation_from_string(a));
  return out;
}

runner::Reporter reporter(const Options& o) {
  if (o.quiet) return runner::Reporter();
  return runner::Reporter([](const std::string& line) { std::cerr << line << std::endl; });
}

int cmd_generate(const Options& o) {
  const auto e = load_spec(o);
  const runner::Layout out{o.out};
  auto report = reporter(o);
  runner::for_each_seed(e.seeds, worker_count(), [&](std::uint64_t seed) {
    runner::generate(e, out, seed);
    report("seed " + std::to_string(seed) + ": dataset written to " + out.dataset(seed, "").parent_path().string());
  });
  return 0;
}

int cmd_train(const Options& o, bool sweep) {
  const auto e = load_spec(o);
  const auto ablations = chosen_ablations(o, e, sweep);
  const runner::Layout out{o.out};
  auto report = reporter(o);
  runner::for_each_seed(e.seeds, worker_count(), [&](std::uint64_t seed) {
    const auto data = runner::load_or_generate(e, out, seed, report);
    for (auto a : ablations) runner::train_one(e, out, data, seed, a, report);
  });
  runner::write_summaries(out);
  return 0;
}

int cmd_eval(const Options& o) {
  const auto e = load_spec(o);
  const auto ablations = chosen_ablations(o, e, false);
  const runner::Layout out{o.out};
  auto report = reporter(o);
  runner::for_each_seed(e.seeds, worker_count(), [&](std::uint64_t seed) {
    for (const char* split : {"train", "test"})
      if (!fs::exists(out.dataset(seed, split) / "manifest.jsonl"))
        throw io::IoError(out.dataset(seed, split), "missing dataset; run generate or train first");
    const ExperimentData data{io::load_dataset(out.dataset(seed, "train")),
                                      io::load_dataset(out.dataset(seed, "test"))};
    for (auto a : ablations) {
      const auto m = runner::evaluate_one(e, out, data, seed, a);
      report("seed " + std::to_string(seed) + " " + to_string(a) + ": mIoU(all) " + io::format_value(m.group_miou.all));
    }
  });
  runner::write_summaries(out);
  return 0;
}

int cmd_plot(const Options& o) {
  const runner::Layout out{o.out};
  auto report = reporter(o);
  for (const auto& p : runner::write_figures(out)) report("wrote " + p.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual semantic segmentation on synthetic shape scenes"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool needs_spec) {
    sub->add_option("--out", o.out, "Experiment directory")->required();
    sub->add_flag("-q,--quiet", o.quiet, "No progress output");
    if (!needs_spec) return;
    sub->add_option("--spec", o.spec, "Experiment spec file (key = value lines)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seeds", o.seeds, "Seeds, overriding the spec")->delimiter(',');
    sub->add_option("--protocol", o.protocol, "Class split such as 4-2 or 15-1");
    sub->add_option("--mode", o.mode, "disjoint or overlapped")->check(CLI::IsMember({"disjoint", "overlapped"}));
  };
  auto add_ablation = [&](CLI::App* sub) {
    sub->add_option("--ablation", o.ablations, "ft, baseline, duplet, duplet_ctx, balance, full, double")
        ->delimiter(',');
  };

  auto* gen = app.add_subcommand("generate", "Write train/test datasets for every seed");
  add_common(gen, true);
  auto* train = app.add_subcommand("train", "Continual training (resumes from checkpoints)");
  add_common(train, true);
  add_ablation(train);
  auto* ablate = app.add_subcommand("ablate", "Train every ablation (or the listed ones) and tabulate");
  add_common(ablate, true);
  add_ablation(ablate);
  auto* eval = app.add_subcommand("eval", "Re-evaluate stored checkpoints");
  add_common(eval, true);
  add_ablation(eval);
  auto* plt = app.add_subcommand("plot", "Draw figures from the metrics directory");
  add_common(plt, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(o);
    if (*train) return cmd_train(o, false);
    if (*ablate) return cmd_train(o, true);
    if (*eval) return cmd_eval(o);
    if (*plt) return cmd_plot(o);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
