#include "megan/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "megan/errors.hpp"
#include "megan/expert.hpp"
#include "megan/gate.hpp"
#include "megan/io.hpp"
#include "megan/rng.hpp"

namespace megan::pipeline {

using nlohmann::json;
using simdata::Split;
namespace fs = std::filesystem;

namespace {

// Seed streams for model initialization, one id per roster slot.
constexpr std::uint64_t kExpertSeedStream = 30;
constexpr std::uint64_t kBaselineSeedStream = 31;
constexpr std::uint64_t kGateSeedStream = 32;

constexpr std::array<Split, 2> kReportSplits = {Split::test, Split::unseen};

void say(const Run& run, const std::string& msg) {
  if (run.log) *run.log << msg << '\n' << std::flush;
}

std::string header_line(const char* what, const std::string& hash) {
  return std::string("# megan ") + what + " v1 config_hash=" + hash + "\n";
}

fs::path split_path(const Run& run, Split s) { return run.dir() / "dataset" / (simdata::to_string(s) + ".mgd"); }
fs::path expert_path(const Run& run, const std::string& name) { return run.dir() / "experts" / (name + ".ckpt"); }
fs::path baseline_path(const Run& run, std::size_t i) {
  return run.dir() / "baselines" / ("softmax_" + std::to_string(i) + ".ckpt");
}
fs::path gate_path(const Run& run) { return run.dir() / "gate.ckpt"; }

std::vector<simdata::FeatureBag> load_bags(const Run& run, Split s) {
  const fs::path p = split_path(run, s);
  if (!fs::exists(p)) throw IoError("missing dataset file '" + p.string() + "'; run generate first");
  auto f = io::load_split(p, run.hash(), run.force);
  if (f.seed != run.cfg.seed && !run.force) {
    throw ConfigHashError("'" + p.string() + "' was generated for seed " + std::to_string(f.seed) + ", not " +
                          std::to_string(run.cfg.seed));
  }
  return std::move(f.bags);
}

expert::ExpertModel load_model(const Run& run, const fs::path& p, const char* stage) {
  if (!fs::exists(p)) throw IoError("missing checkpoint '" + p.string() + "'; run " + stage + " first");
  return io::expert_from_checkpoint(io::load_checkpoint(p, run.hash(), run.force));
}

std::vector<expert::ExpertModel> load_experts(const Run& run) {
  std::vector<expert::ExpertModel> out;
  for (const auto& e : run.cfg.experts) out.push_back(load_model(run, expert_path(run, e.name), "train-experts"));
  return out;
}

std::vector<expert::ExpertModel> load_baselines(const Run& run, std::size_t count) {
  std::vector<expert::ExpertModel> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(load_model(run, baseline_path(run, i), "train-experts"));
  return out;
}

std::vector<const expert::ExpertModel*> pointers(const std::vector<expert::ExpertModel>& models) {
  std::vector<const expert::ExpertModel*> out;
  for (const auto& m : models) out.push_back(&m);
  return out;
}

expert::ExpertSpec expert_spec(const Run& run, std::size_t i) {
  const auto& e = run.cfg.experts[i];
  expert::ExpertSpec s;
  s.name = e.name;
  s.label_source = e.label_source;
  s.head = expert::HeadKind::evidential;
  s.attention_kind = e.attention_kind;
  s.hidden = e.hidden;
  s.attention = e.attention;
  s.dropout = e.dropout;
  s.seed = derive_seed(run.cfg.seed, i, kExpertSeedStream);
  return s;
}

expert::ExpertSpec baseline_spec(const Run& run, std::size_t i) {
  const auto& b = run.cfg.baselines;
  expert::ExpertSpec s;
  s.name = "softmax_" + std::to_string(i);
  s.label_source = b.label_source;
  s.head = expert::HeadKind::softmax;
  s.hidden = b.hidden;
  s.attention = b.attention;
  s.dropout = b.dropout;
  s.seed = derive_seed(run.cfg.seed, i, kBaselineSeedStream);
  return s;
}

void append_curve(std::string& csv, const std::string& name, const expert::TrainReport& report) {
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
    csv += name + "," + std::to_string(e) + "," + io::format_number(report.epoch_loss[e]) + "\n";
  }
}

std::vector<int> final_labels(std::span<const simdata::FeatureBag> bags) {
  std::vector<int> y;
  y.reserve(bags.size());
  for (const auto& b : bags) y.push_back(b.final_label);
  return y;
}

int argmax(std::span<const double> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

struct Scored {
  std::vector<double> probs;
  double uncertainty = 1.0;
};

// Predictions of every requested method on one split.
class Predictor {
 public:
  Predictor(const Run& run, std::span<const Method> methods) : run_(run) {
    bool need_experts = false, need_gate = false;
    std::size_t baselines = 0;
    for (Method m : methods) {
      switch (m) {
        case Method::softmax:
        case Method::mc_dropout:
          baselines = std::max<std::size_t>(baselines, 1);
          break;
        case Method::ensemble:
          baselines = run.cfg.baselines.ensemble_size;
          break;
        case Method::edl:
        case Method::naive:
          need_experts = true;
          break;
        case Method::gated:
          need_experts = need_gate = true;
          break;
      }
    }
    if (baselines > 0) baselines_ = load_baselines(run, baselines);
    if (need_experts) experts_ = load_experts(run);
    if (need_gate) {
      const fs::path p = gate_path(run);
      if (!fs::exists(p)) throw IoError("missing checkpoint '" + p.string() + "'; run train-gate first");
      gate_.emplace(io::gate_from_checkpoint(io::load_checkpoint(p, run.hash(), run.force)));
    }
  }

  std::map<Method, std::vector<Scored>> predict(std::span<const simdata::FeatureBag> bags,
                                                std::span<const Method> methods) const {
    std::map<Method, std::vector<Scored>> out;
    std::vector<gate::GateSample> samples;
    if (!experts_.empty()) {
      const auto ptrs = pointers(experts_);
      samples = gate::collect_gate_inputs(ptrs, bags);
    }
    std::vector<std::vector<expert::ExpertOutput>> member_out;
    for (Method m : methods) {
      auto& dst = out[m];
      dst.reserve(bags.size());
      switch (m) {
        case Method::softmax:
          for (const auto& o : member_outputs(member_out, bags, 0)) dst.push_back({o.probs, o.uncertainty});
          break;
        case Method::mc_dropout:
          for (const auto& b : bags) {
            const auto p = expert::mc_dropout_predict(baselines_[0], b, run_.cfg.baselines.mc_passes);
            dst.push_back({p.probs, p.uncertainty});
          }
          break;
        case Method::ensemble: {
          for (std::size_t i = 0; i < baselines_.size(); ++i) member_outputs(member_out, bags, i);
          for (std::size_t b = 0; b < bags.size(); ++b) {
            std::vector<std::vector<double>> probs;
            for (const auto& member : member_out) probs.push_back(member[b].probs);
            const auto p = expert::average_predictions(probs);
            dst.push_back({p.probs, p.uncertainty});
          }
          break;
        }
        case Method::edl:
          for (const auto& s : samples) {
            const auto row = s.probs.values().subspan(0, s.probs.cols());
            dst.push_back({{row.begin(), row.end()}, s.uncertainty[0]});
          }
          break;
        case Method::naive:
          for (const auto& s : samples) {
            const auto f = gate::naive_fuse(s);
            dst.push_back({f.probs, f.uncertainty});
          }
          break;
        case Method::gated:
          for (const auto& f : gate::gate_predict(*gate_, samples)) dst.push_back({f.probs, f.uncertainty});
          break;
      }
    }
    return out;
  }

 private:
  const std::vector<expert::ExpertOutput>& member_outputs(std::vector<std::vector<expert::ExpertOutput>>& cache,
                                                         std::span<const simdata::FeatureBag> bags,
                                                         std::size_t i) const {
    if (cache.size() <= i) cache.resize(i + 1);
    if (cache[i].empty()) cache[i] = expert::predict(baselines_[i], bags);
    return cache[i];
  }

  const Run& run_;
  std::vector<expert::ExpertModel> baselines_;
  std::vector<expert::ExpertModel> experts_;
  std::optional<gate::GateModel> gate_;
};

std::vector<metrics::ScoredPrediction> scored(const std::vector<Scored>& preds, std::span<const int> labels) {
  std::vector<metrics::ScoredPrediction> out;
  out.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out.push_back({argmax(preds[i].probs), preds[i].uncertainty, labels[i]});
  }
  return out;
}

// Shared work of evaluate and stratify: predictions on val, test and unseen
// plus per-method thresholds from val.
struct Evaluation {
  std::map<Split, std::vector<int>> labels;
  std::map<Split, std::map<Method, std::vector<Scored>>> preds;
  std::map<Method, metrics::Thresholds> thresholds;
};

Evaluation run_evaluation(const Run& run, std::span<const Method> methods) {
  if (methods.empty()) throw ConfigError("no methods selected");
  Predictor predictor(run, methods);
  Evaluation ev;
  for (Split s : {Split::val, Split::test, Split::unseen}) {
    const auto bags = load_bags(run, s);
    if (bags.empty()) throw EmptyInput("split '" + simdata::to_string(s) + "' has no bags");
    say(run, "  predicting " + simdata::to_string(s));
    ev.labels[s] = final_labels(bags);
    ev.preds[s] = predictor.predict(bags, methods);
  }
  for (Method m : methods) {
    ev.thresholds[m] = metrics::fit_thresholds(scored(ev.preds[Split::val][m], ev.labels[Split::val]),
                                               run.cfg.metrics.thresholds);
  }
  return ev;
}

json bins_json(const std::vector<metrics::ReliabilityBin>& bins) {
  json out = json::array();
  for (const auto& b : bins) {
    out.push_back(json{{"lower", b.lower},
                       {"upper", b.upper},
                       {"count", b.count},
                       {"accuracy", b.accuracy},
                       {"confidence", b.confidence}});
  }
  return out;
}

std::string seed_string(std::uint64_t s) { return std::to_string(s); }

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::softmax:
      return "softmax";
    case Method::mc_dropout:
      return "mc_dropout";
    case Method::ensemble:
      return "ensemble";
    case Method::edl:
      return "edl";
    case Method::naive:
      return "naive";
    case Method::gated:
      return "gated";
  }
  return "?";
}

std::vector<Method> parse_methods(const std::string& list) {
  if (list == "all") return {kAllMethods.begin(), kAllMethods.end()};
  std::vector<bool> want(kAllMethods.size(), false);
  std::stringstream ss(list);
  std::string item;
  bool any = false;
  while (std::getline(ss, item, ',')) {
    bool found = false;
    for (std::size_t i = 0; i < kAllMethods.size(); ++i) {
      if (to_string(kAllMethods[i]) == item) {
        want[i] = true;
        found = any = true;
      }
    }
    if (!found) {
      throw ConfigError("unknown method '" + item + "' (expected softmax, mc_dropout, ensemble, edl, naive, gated)");
    }
  }
  if (!any) throw ConfigError("no methods selected");
  std::vector<Method> out;
  for (std::size_t i = 0; i < kAllMethods.size(); ++i) {
    if (want[i]) out.push_back(kAllMethods[i]);
  }
  return out;
}

bool uncertainty_aware(Method m) { return m == Method::edl || m == Method::naive || m == Method::gated; }

fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed-" + seed_string(seed)); }

fs::path Run::dir() const { return seed_dir(cfg.output_dir, cfg.seed); }

std::string Run::hash() const { return config::config_hash(cfg); }

void generate(const Run& run) {
  run.cfg.validate();
  auto gen = run.cfg.generator;
  gen.seed = run.cfg.seed;
  say(run, "generating dataset for seed " + seed_string(run.cfg.seed));
  auto ds = simdata::generate_dataset(gen, run.cfg.raters, run.cfg.unseen_raters);
  for (Split s : simdata::kAllSplits) {
    io::save_split(split_path(run, s), {s, run.hash(), run.cfg.seed, std::move(ds.split(s))});
  }
}

void train_experts(const Run& run) {
  run.cfg.validate();
  const auto train = load_bags(run, Split::train);
  const std::size_t dim = run.cfg.generator.feature_dim;
  if (!train.empty() && train.front().dim() != dim) {
    throw ShapeError("dataset feature dimension " + std::to_string(train.front().dim()) + " differs from the config's " +
                     std::to_string(dim));
  }

  std::string curves = header_line("loss_curves", run.hash()) + "model,epoch,loss\n";
  for (std::size_t i = 0; i < run.cfg.experts.size(); ++i) {
    expert::ExpertModel m(expert_spec(run, i), dim, run.cfg.penultimate_dim);
    say(run, "training expert " + m.spec().name);
    const auto report = expert::train_expert(m, train, run.cfg.expert_training, run.cfg.edl);
    append_curve(curves, m.spec().name, report);
    io::save_checkpoint(expert_path(run, m.spec().name), io::expert_checkpoint(m, run.hash()));
  }
  io::atomic_write(run.dir() / "experts" / "loss_curves.csv", curves);

  std::string base_curves = header_line("loss_curves", run.hash()) + "model,epoch,loss\n";
  for (std::size_t i = 0; i < run.cfg.baselines.ensemble_size; ++i) {
    expert::ExpertModel m(baseline_spec(run, i), dim, run.cfg.penultimate_dim);
    say(run, "training baseline " + m.spec().name);
    const auto report = expert::train_expert(m, train, run.cfg.expert_training, run.cfg.edl);
    append_curve(base_curves, m.spec().name, report);
    io::save_checkpoint(baseline_path(run, i), io::expert_checkpoint(m, run.hash()));
  }
  io::atomic_write(run.dir() / "baselines" / "loss_curves.csv", base_curves);
}

void train_gate(const Run& run) {
  run.cfg.validate();
  const auto experts = load_experts(run);
  const auto bags = load_bags(run, run.cfg.gate.train_split);
  const auto ptrs = pointers(experts);
  const auto samples = gate::collect_gate_inputs(ptrs, bags);
  const auto labels = final_labels(bags);

  gate::GateSpec spec{run.cfg.gate.shared_dim, run.cfg.gate.head_hidden, run.cfg.gate.dropout,
                      derive_seed(run.cfg.seed, 0, kGateSeedStream)};
  gate::GateModel g(spec, experts.size(), run.cfg.penultimate_dim);
  say(run, "training gate on " + simdata::to_string(run.cfg.gate.train_split));
  std::vector<gate::GateSample> val_samples;
  std::vector<int> val_labels;
  gate::GateValidation validation;
  if (run.cfg.gate.select_on_val) {
    const auto val = load_bags(run, simdata::Split::val);
    val_samples = gate::collect_gate_inputs(ptrs, val);
    val_labels = final_labels(val);
    validation = {val_samples, val_labels};
  }
  const auto report = gate::train_gate(g, samples, labels, run.cfg.gate_training, run.cfg.gate.loss,
                                       run.cfg.gate.select_on_val ? &validation : nullptr);
  if (report.selected_epoch >= 0) say(run, "kept gate from epoch " + std::to_string(report.selected_epoch));

  std::string curve = header_line("loss_curves", run.hash()) + "model,epoch,loss,val_loss,selected\n";
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
    curve += "gate," + std::to_string(e) + "," + io::format_number(report.epoch_loss[e]) + ",";
    curve += (e < report.val_loss.size() ? io::format_number(report.val_loss[e]) : std::string()) + ",";
    curve += (static_cast<int>(e) == report.selected_epoch ? "1" : "0");
    curve += "\n";
  }
  io::atomic_write(run.dir() / "gate_loss.csv", curve);
  io::save_checkpoint(gate_path(run), io::gate_checkpoint(g, run.hash()));
}

std::vector<ResultRow> evaluate(const Run& run, std::span<const Method> methods) {
  run.cfg.validate();
  say(run, "evaluating seed " + seed_string(run.cfg.seed));
  auto ev = run_evaluation(run, methods);

  std::vector<ResultRow> rows;
  json records = json::array();
  for (Method m : methods) {
    for (Split s : kReportSplits) {
      const auto& preds = ev.preds[s][m];
      const auto& labels = ev.labels[s];
      const auto sp = scored(preds, labels);
      std::vector<int> p;
      std::vector<double> conf;
      std::vector<bool> correct;
      for (std::size_t i = 0; i < sp.size(); ++i) {
        p.push_back(sp[i].pred);
        conf.push_back(preds[i].probs[static_cast<std::size_t>(sp[i].pred)]);
        correct.push_back(sp[i].pred == labels[i]);
      }
      const auto bins = metrics::reliability_diagram(conf, correct, run.cfg.metrics.bins);
      const auto table = metrics::stratify(sp, ev.thresholds[m]);
      ResultRow r;
      r.method = m;
      r.split = s;
      r.seed = run.cfg.seed;
      r.weighted_f1 = metrics::weighted_f1(p, labels);
      r.ece = metrics::ece_from_bins(bins);
      r.retention = table.retention;
      r.confident_f1 = table.confident_f1;
      r.uncertain_f1 = table.uncertain_f1;
      rows.push_back(r);
      records.push_back(json{{"method", to_string(m)},
                             {"split", simdata::to_string(s)},
                             {"ece", r.ece},
                             {"bins", bins_json(bins)}});
    }
  }
  io::atomic_write(run.dir() / "results.csv", results_csv(rows, run.hash()));
  const json reliability{{"format", "megan-reliability"},
                         {"version", 1},
                         {"config_hash", run.hash()},
                         {"seed", run.cfg.seed},
                         {"records", records}};
  io::atomic_write(run.dir() / "reliability.json", reliability.dump(2) + "\n");
  return rows;
}

std::vector<StratRow> stratify(const Run& run, std::span<const Method> methods) {
  run.cfg.validate();
  say(run, "stratifying seed " + seed_string(run.cfg.seed));
  auto ev = run_evaluation(run, methods);
  std::vector<StratRow> rows;
  for (Method m : methods) {
    for (Split s : kReportSplits) {
      rows.push_back({m, s, run.cfg.seed, metrics::stratify(scored(ev.preds[s][m], ev.labels[s]), ev.thresholds[m])});
    }
  }
  io::atomic_write(run.dir() / "stratification.csv", stratification_csv(rows, run.hash()));
  return rows;
}

BenchmarkReport benchmark(const Run& run, std::span<const std::uint64_t> seeds, std::span<const Method> methods) {
  if (seeds.empty()) throw ConfigError("benchmark needs at least one seed");
  if (methods.empty()) throw ConfigError("no methods selected");
  std::vector<std::uint64_t> sorted(seeds.begin(), seeds.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("duplicate seed");

  BenchmarkReport report;
  for (std::uint64_t seed : seeds) {
    Run r = run;
    r.cfg.seed = seed;
    generate(r);
    train_experts(r);
    train_gate(r);
    auto res = evaluate(r, methods);
    auto strat = stratify(r, methods);
    report.results.insert(report.results.end(), res.begin(), res.end());
    report.stratification.insert(report.stratification.end(), strat.begin(), strat.end());
  }
  report.summary = summarize(report.results);
  const std::string hash = run.hash();
  io::atomic_write(run.cfg.output_dir / "results.csv", results_csv(report.results, hash));
  io::atomic_write(run.cfg.output_dir / "stratification.csv", stratification_csv(report.stratification, hash));
  io::atomic_write(run.cfg.output_dir / "summary.csv", summary_csv(report.summary, hash));
  return report;
}

std::string results_csv(std::span<const ResultRow> rows, const std::string& config_hash) {
  std::string out = header_line("results", config_hash);
  out += "method,split,seed,weighted_f1,ece,retention,confident_f1,uncertain_f1\n";
  for (const auto& r : rows) {
    out += to_string(r.method) + "," + simdata::to_string(r.split) + "," + seed_string(r.seed) + "," +
           io::format_number(r.weighted_f1) + "," + io::format_number(r.ece) + "," + io::format_number(r.retention) +
           "," + io::format_number(r.confident_f1) + "," + io::format_number(r.uncertain_f1) + "\n";
  }
  return out;
}

std::string stratification_csv(std::span<const StratRow> rows, const std::string& config_hash) {
  std::string out = header_line("stratification", config_hash);
  out += "method,split,seed,t_0,t_1,t_2,t_3,confident_count,uncertain_count,confident_f1,uncertain_f1,retention\n";
  for (const auto& r : rows) {
    out += to_string(r.method) + "," + simdata::to_string(r.split) + "," + seed_string(r.seed);
    for (double t : r.table.thresholds.per_class) out += "," + io::format_number(t);
    out += "," + std::to_string(r.table.confident_count) + "," + std::to_string(r.table.uncertain_count) + "," +
           io::format_number(r.table.confident_f1) + "," + io::format_number(r.table.uncertain_f1) + "," +
           io::format_number(r.table.retention) + "\n";
  }
  return out;
}

std::vector<SummaryRow> summarize(std::span<const ResultRow> rows) {
  // Keyed by (method, split) in first-appearance order.
  std::vector<std::pair<Method, Split>> keys;
  for (const auto& r : rows) {
    const std::pair<Method, Split> k{r.method, r.split};
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  const std::array<std::pair<const char*, double ResultRow::*>, 5> fields = {{{"weighted_f1", &ResultRow::weighted_f1},
                                                                             {"ece", &ResultRow::ece},
                                                                             {"retention", &ResultRow::retention},
                                                                             {"confident_f1", &ResultRow::confident_f1},
                                                                             {"uncertain_f1", &ResultRow::uncertain_f1}}};
  std::vector<SummaryRow> out;
  for (const auto& [m, s] : keys) {
    for (const auto& [name, field] : fields) {
      std::vector<double> v;
      for (const auto& r : rows) {
        if (r.method == m && r.split == s && !std::isnan(r.*field)) v.push_back(r.*field);
      }
      SummaryRow row;
      row.method = m;
      row.split = s;
      row.metric = name;
      row.n = v.size();
      row.mean = std::numeric_limits<double>::quiet_NaN();
      row.sd = std::numeric_limits<double>::quiet_NaN();
      if (!v.empty()) {
        double sum = 0.0;
        for (double x : v) sum += x;
        row.mean = sum / static_cast<double>(v.size());
      }
      if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - row.mean) * (x - row.mean);
        row.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
      }
      out.push_back(row);
    }
  }
  return out;
}

std::string summary_csv(std::span<const SummaryRow> rows, const std::string& config_hash) {
  std::string out = header_line("summary", config_hash);
  out += "method,split,metric,mean,sd,n\n";
  for (const auto& r : rows) {
    out += to_string(r.method) + "," + simdata::to_string(r.split) + "," + r.metric + "," + io::format_number(r.mean) +
           "," + io::format_number(r.sd) + "," + std::to_string(r.n) + "\n";
  }
  return out;
}

}  // namespace megan::pipeline
