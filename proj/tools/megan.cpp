// Command-line front end for the experiment pipeline.
//
//   megan generate      --config c.json --seed 1 --out runs/x
//   megan train-experts --config c.json --seed 1 --out runs/x
//   megan train-gate    --config c.json --seed 1 --out runs/x
//   megan evaluate      --config c.json --seed 1 --out runs/x --methods edl,gated
//   megan stratify      --config c.json --seed 1 --out runs/x
//   megan benchmark     --config c.json --seeds 1,2,3 --out runs/x
//   megan config        --config c.json   (prints the effective config)
//
// Failures print one line "error: <Kind>: <message>" to stderr and exit 1.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "megan/config.hpp"
#include "megan/errors.hpp"
#include "megan/io.hpp"
#include "megan/pipeline.hpp"

namespace {

using megan::pipeline::Method;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::string methods = "all";
  std::string out;
  bool force = false;
  bool quiet = false;
};

megan::pipeline::Run make_run(const Options& o) {
  megan::pipeline::Run run;
  run.cfg = o.config_path.empty() ? megan::config::default_config() : megan::config::load_config(o.config_path);
  if (o.seed) run.cfg.seed = *o.seed;
  if (!o.out.empty()) run.cfg.output_dir = o.out;
  run.force = o.force;
  run.log = o.quiet ? nullptr : &std::cerr;
  return run;
}

void print_results(const std::vector<megan::pipeline::ResultRow>& rows) {
  std::printf("%-11s %-7s %6s %8s %8s %10s %13s %13s\n", "method", "split", "seed", "f1", "ece", "retention",
              "confident_f1", "uncertain_f1");
  for (const auto& r : rows) {
    std::printf("%-11s %-7s %6llu %8.4f %8.4f %10.4f %13.4f %13.4f\n", to_string(r.method).c_str(),
                megan::simdata::to_string(r.split).c_str(), static_cast<unsigned long long>(r.seed), r.weighted_f1,
                r.ece, r.retention, r.confident_f1, r.uncertain_f1);
  }
}

void print_summary(const std::vector<megan::pipeline::SummaryRow>& rows) {
  std::printf("%-11s %-7s %-13s %8s %8s %3s\n", "method", "split", "metric", "mean", "sd", "n");
  for (const auto& r : rows) {
    std::printf("%-11s %-7s %-13s %8.4f %8.4f %3zu\n", to_string(r.method).c_str(),
                megan::simdata::to_string(r.split).c_str(), r.metric.c_str(), r.mean, r.sd, r.n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-expert evidential gating: synthetic benchmark pipeline"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool multi_seed) {
    sub->add_option("--config", o.config_path, "JSON config file (defaults apply when omitted)");
    if (multi_seed) {
      sub->add_option("--seeds", o.seeds, "Comma-separated run seeds")->delimiter(',')->required();
    } else {
      sub->add_option("--seed", o.seed, "Run seed (overrides the config)");
    }
    sub->add_option("--out", o.out, "Output directory (overrides the config)");
    sub->add_flag("--force", o.force, "Accept artifacts produced under a different config hash");
    sub->add_flag("--quiet", o.quiet, "Suppress progress messages");
  };

  auto* gen = app.add_subcommand("generate", "Simulate the multi-rater dataset");
  auto* tre = app.add_subcommand("train-experts", "Train the expert roster and softmax baselines");
  auto* trg = app.add_subcommand("train-gate", "Train the gating network over frozen experts");
  auto* eva = app.add_subcommand("evaluate", "Score methods on test and unseen splits");
  auto* str = app.add_subcommand("stratify", "Confident/uncertain stratification table");
  auto* ben = app.add_subcommand("benchmark", "Run every stage for several seeds and aggregate");
  auto* cfg = app.add_subcommand("config", "Print the effective config as canonical JSON");
  cfg->add_option("--config", o.config_path, "JSON config file (defaults apply when omitted)");
  for (auto* s : {gen, tre, trg, eva, str}) add_common(s, false);
  add_common(ben, true);
  for (auto* s : {eva, str, ben}) {
    s->add_option("--methods", o.methods, "softmax,mc_dropout,ensemble,edl,naive,gated or all");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const auto run = make_run(o);
    if (cfg->parsed()) {
      run.cfg.validate();
      std::printf("%s\n", megan::config::to_json(run.cfg).c_str());
    } else if (gen->parsed()) {
      megan::pipeline::generate(run);
    } else if (tre->parsed()) {
      megan::pipeline::train_experts(run);
    } else if (trg->parsed()) {
      megan::pipeline::train_gate(run);
    } else if (eva->parsed()) {
      const auto methods = megan::pipeline::parse_methods(o.methods);
      print_results(megan::pipeline::evaluate(run, methods));
    } else if (str->parsed()) {
      const auto methods = megan::pipeline::parse_methods(o.methods);
      const auto rows = megan::pipeline::stratify(run, methods);
      std::printf("%-11s %-7s %9s %9s %13s %13s %10s\n", "method", "split", "confident", "uncertain", "confident_f1",
                  "uncertain_f1", "retention");
      for (const auto& r : rows) {
        std::printf("%-11s %-7s %9zu %9zu %13.4f %13.4f %10.4f\n", to_string(r.method).c_str(),
                    megan::simdata::to_string(r.split).c_str(), r.table.confident_count, r.table.uncertain_count,
                    r.table.confident_f1, r.table.uncertain_f1, r.table.retention);
      }
    } else if (ben->parsed()) {
      const auto methods = megan::pipeline::parse_methods(o.methods);
      const auto report = megan::pipeline::benchmark(run, o.seeds, methods);
      print_results(report.results);
      std::printf("\n");
      print_summary(report.summary);
    }
  } catch (const megan::Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.kind().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: InternalError: %s\n", e.what());
    return 1;
  }
  return 0;
}
