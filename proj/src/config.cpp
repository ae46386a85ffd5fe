#include "megan/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "megan/errors.hpp"

namespace megan::config {

using nlohmann::json;

namespace {

// Reads keys of one JSON object, remembering which were consumed so that
// leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  void get_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_number_integer() || it->get<long long>() < 0) {
      throw ConfigError(where(key) + " must be a non-negative integer");
    }
    out = it->get<std::size_t>();
  }

  void get_u64(const char* key, std::uint64_t& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
    out = it->get<std::uint64_t>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + where(key) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string join(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

void read_rater(const json& j, const std::string& path, simdata::RaterProfile& r) {
  ObjectReader o(j, path);
  o.get("bias", r.bias);
  o.get("noise_sd", r.noise_sd);
  o.finish();
}

void read_raters(const json& j, const std::string& path, simdata::TrialRaters& r) {
  ObjectReader o(j, path);
  if (auto* c = o.child("local")) read_rater(*c, join(path, "local"), r.local);
  if (auto* c = o.child("central")) read_rater(*c, join(path, "central"), r.central);
  if (auto* c = o.child("adjudicator")) read_rater(*c, join(path, "adjudicator"), r.adjudicator);
  o.finish();
}

void read_generator(const json& j, simdata::GeneratorConfig& g) {
  ObjectReader o(j, "generator");
  if (auto* c = o.child("class_prior")) {
    if (!c->is_array() || c->size() != simdata::kNumGrades) {
      throw ConfigError("generator.class_prior must be an array of 4 numbers");
    }
    for (std::size_t i = 0; i < simdata::kNumGrades; ++i) {
      if (!(*c)[i].is_number()) throw ConfigError("generator.class_prior must be an array of 4 numbers");
      g.class_prior[i] = (*c)[i].get<double>();
    }
  }
  o.get_size("n_train", g.n_train);
  o.get_size("n_val", g.n_val);
  o.get_size("n_test", g.n_test);
  o.get_size("n_unseen", g.n_unseen);
  o.get_size("frames_min", g.frames_min);
  o.get_size("frames_max", g.frames_max);
  o.get_size("feature_dim", g.feature_dim);
  o.get("class_separation", g.class_separation);
  o.get("difficulty_sd", g.difficulty_sd);
  o.get("noninformative_frame_rate", g.noninformative_frame_rate);
  o.get("unseen_shift", g.unseen_shift);
  o.finish();
}

void read_train(const json& j, const std::string& path, expert::TrainConfig& t) {
  ObjectReader o(j, path);
  o.get("epochs", t.epochs);
  o.get("learning_rate", t.learning_rate);
  o.get("weight_decay", t.weight_decay);
  o.get_size("batch_size", t.batch_size);
  o.get("weighted_sampling", t.weighted_sampling);
  o.finish();
}

simdata::LabelSource read_label_source(ObjectReader& o, const char* key, simdata::LabelSource fallback) {
  std::string s = simdata::to_string(fallback);
  o.get(key, s);
  return simdata::parse_label_source(s);
}

expert::AttentionKind parse_attention_kind(const std::string& s) {
  if (s == "gated") return expert::AttentionKind::gated;
  if (s == "plain") return expert::AttentionKind::plain;
  throw ConfigError("unknown attention kind '" + s + "'");
}

std::string attention_kind_name(expert::AttentionKind k) { return k == expert::AttentionKind::gated ? "gated" : "plain"; }

json rater_json(const simdata::RaterProfile& r) { return json{{"bias", r.bias}, {"noise_sd", r.noise_sd}}; }

json raters_json(const simdata::TrialRaters& r) {
  return json{{"local", rater_json(r.local)}, {"central", rater_json(r.central)},
              {"adjudicator", rater_json(r.adjudicator)}};
}

json train_json(const expert::TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"learning_rate", t.learning_rate},
              {"weight_decay", t.weight_decay},
              {"batch_size", t.batch_size},
              {"weighted_sampling", t.weighted_sampling}};
}

json to_json_object(const ExperimentConfig& cfg) {
  const auto& g = cfg.generator;
  json experts = json::array();
  for (const auto& e : cfg.experts) {
    experts.push_back(json{{"name", e.name},
                           {"label_source", simdata::to_string(e.label_source)},
                           {"hidden", e.hidden},
                           {"attention", e.attention},
                           {"dropout", e.dropout},
                           {"attention_kind", attention_kind_name(e.attention_kind)}});
  }
  return json{
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir.generic_string()},
      {"generator",
       {{"class_prior", g.class_prior},
        {"n_train", g.n_train},
        {"n_val", g.n_val},
        {"n_test", g.n_test},
        {"n_unseen", g.n_unseen},
        {"frames_min", g.frames_min},
        {"frames_max", g.frames_max},
        {"feature_dim", g.feature_dim},
        {"class_separation", g.class_separation},
        {"difficulty_sd", g.difficulty_sd},
        {"noninformative_frame_rate", g.noninformative_frame_rate},
        {"unseen_shift", g.unseen_shift}}},
      {"raters", raters_json(cfg.raters)},
      {"unseen_raters", raters_json(cfg.unseen_raters)},
      {"penultimate_dim", cfg.penultimate_dim},
      {"experts", experts},
      {"baselines",
       {{"label_source", simdata::to_string(cfg.baselines.label_source)},
        {"hidden", cfg.baselines.hidden},
        {"attention", cfg.baselines.attention},
        {"dropout", cfg.baselines.dropout},
        {"mc_passes", cfg.baselines.mc_passes},
        {"ensemble_size", cfg.baselines.ensemble_size}}},
      {"edl",
       {{"annealing_threshold", cfg.edl.annealing_threshold},
        {"kl_evidence_adjustment", cfg.edl.kl_evidence_adjustment}}},
      {"gate",
       {{"shared_dim", cfg.gate.shared_dim},
        {"head_hidden", cfg.gate.head_hidden},
        {"dropout", cfg.gate.dropout},
        {"beta1", cfg.gate.loss.beta1},
        {"beta2", cfg.gate.loss.beta2},
        {"gamma1", cfg.gate.loss.gamma1},
        {"gamma2", cfg.gate.loss.gamma2},
        {"train_split", simdata::to_string(cfg.gate.train_split)},
        {"select_on_val", cfg.gate.select_on_val}}},
      {"training", {{"expert", train_json(cfg.expert_training)}, {"gate", train_json(cfg.gate_training)}}},
      {"metrics",
       {{"bins", cfg.metrics.bins},
        {"threshold_grid", cfg.metrics.thresholds.grid},
        {"min_retention", cfg.metrics.thresholds.min_retention}}},
  };
}

}  // namespace

void ExperimentConfig::validate() const {
  generator.validate();
  for (const auto* rs : {&raters, &unseen_raters}) {
    for (const auto* r : {&rs->local, &rs->central, &rs->adjudicator}) {
      if (!(r->noise_sd > 0.0)) throw ConfigError("rater noise_sd must be > 0");
    }
  }
  if (penultimate_dim == 0) throw ConfigError("penultimate_dim must be >= 1");
  if (experts.size() < 2) throw ConfigError("at least two experts are required");
  std::set<std::string> names;
  for (const auto& e : experts) {
    if (e.name.empty()) throw ConfigError("expert names must not be empty");
    if (!names.insert(e.name).second) throw ConfigError("duplicate expert name '" + e.name + "'");
    if (e.label_source == simdata::LabelSource::final) {
      throw ConfigError("expert '" + e.name + "': label_source must be local or central");
    }
    if (e.hidden == 0 || e.attention == 0) throw ConfigError("expert '" + e.name + "': widths must be positive");
    if (!(e.dropout >= 0.0 && e.dropout < 1.0)) throw ConfigError("expert '" + e.name + "': dropout outside [0, 1)");
  }
  if (baselines.hidden == 0 || baselines.attention == 0) throw ConfigError("baseline widths must be positive");
  if (!(baselines.dropout >= 0.0 && baselines.dropout < 1.0)) throw ConfigError("baseline dropout outside [0, 1)");
  if (baselines.mc_passes < 1) throw ConfigError("baselines.mc_passes must be >= 1");
  if (baselines.ensemble_size < 2) throw ConfigError("baselines.ensemble_size must be >= 2");
  if (edl.annealing_threshold < 1) throw ConfigError("edl.annealing_threshold must be >= 1");
  if (gate.shared_dim == 0 || gate.head_hidden == 0) throw ConfigError("gate widths must be positive");
  if (!(gate.dropout >= 0.0 && gate.dropout < 1.0)) throw ConfigError("gate dropout outside [0, 1)");
  if (gate.train_split == simdata::Split::test || gate.train_split == simdata::Split::unseen) {
    throw ConfigError("gate.train_split must be train or val");
  }
  if (gate.select_on_val && gate.train_split != simdata::Split::train) {
    throw ConfigError("gate.select_on_val needs gate.train_split = train");
  }
  gate.loss.validate();
  expert_training.validate();
  gate_training.validate();
  if (metrics.bins == 0) throw ConfigError("metrics.bins must be >= 1");
  metrics.thresholds.validate();
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.generator.n_train = 2000;
  cfg.generator.n_val = 500;
  cfg.generator.n_test = 500;
  cfg.generator.n_unseen = 500;
  cfg.generator.frames_min = 8;
  cfg.generator.frames_max = 32;
  cfg.unseen_raters.local.bias = 0.3;
  cfg.unseen_raters.central.bias = -0.2;
  using simdata::LabelSource;
  cfg.experts = {
      {"central_1", LabelSource::central, 64, 32, 0.1, expert::AttentionKind::gated},
      {"central_2", LabelSource::central, 64, 32, 0.25, expert::AttentionKind::gated},
      {"central_3", LabelSource::central, 96, 48, 0.1, expert::AttentionKind::gated},
      {"central_4", LabelSource::central, 96, 48, 0.25, expert::AttentionKind::gated},
      {"local_1", LabelSource::local, 64, 32, 0.25, expert::AttentionKind::gated},
      {"local_2", LabelSource::local, 96, 48, 0.1, expert::AttentionKind::gated},
  };
  cfg.expert_training.batch_size = 4;
  cfg.gate_training.batch_size = 32;
  cfg.gate_training.weighted_sampling = false;
  return cfg;
}

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg = default_config();
  ObjectReader o(j, "");
  o.get_u64("seed", cfg.seed);
  std::string out = cfg.output_dir.generic_string();
  o.get("output_dir", out);
  cfg.output_dir = out;
  if (auto* c = o.child("generator")) read_generator(*c, cfg.generator);
  if (auto* c = o.child("raters")) read_raters(*c, "raters", cfg.raters);
  if (auto* c = o.child("unseen_raters")) read_raters(*c, "unseen_raters", cfg.unseen_raters);
  o.get_size("penultimate_dim", cfg.penultimate_dim);
  if (auto* c = o.child("experts")) {
    if (!c->is_array()) throw ConfigError("experts must be an array");
    cfg.experts.clear();
    for (std::size_t i = 0; i < c->size(); ++i) {
      ObjectReader e((*c)[i], "experts[" + std::to_string(i) + "]");
      ExpertEntry entry;
      entry.name = "expert_" + std::to_string(i + 1);
      e.get("name", entry.name);
      entry.label_source = read_label_source(e, "label_source", entry.label_source);
      e.get_size("hidden", entry.hidden);
      e.get_size("attention", entry.attention);
      e.get("dropout", entry.dropout);
      std::string kind = attention_kind_name(entry.attention_kind);
      e.get("attention_kind", kind);
      entry.attention_kind = parse_attention_kind(kind);
      e.finish();
      cfg.experts.push_back(entry);
    }
  }
  if (auto* c = o.child("baselines")) {
    ObjectReader b(*c, "baselines");
    cfg.baselines.label_source = read_label_source(b, "label_source", cfg.baselines.label_source);
    b.get_size("hidden", cfg.baselines.hidden);
    b.get_size("attention", cfg.baselines.attention);
    b.get("dropout", cfg.baselines.dropout);
    b.get("mc_passes", cfg.baselines.mc_passes);
    b.get_size("ensemble_size", cfg.baselines.ensemble_size);
    b.finish();
  }
  if (auto* c = o.child("edl")) {
    ObjectReader e(*c, "edl");
    e.get("annealing_threshold", cfg.edl.annealing_threshold);
    e.get("kl_evidence_adjustment", cfg.edl.kl_evidence_adjustment);
    e.finish();
  }
  if (auto* c = o.child("gate")) {
    ObjectReader g(*c, "gate");
    g.get_size("shared_dim", cfg.gate.shared_dim);
    g.get_size("head_hidden", cfg.gate.head_hidden);
    g.get("dropout", cfg.gate.dropout);
    g.get("beta1", cfg.gate.loss.beta1);
    g.get("beta2", cfg.gate.loss.beta2);
    g.get("gamma1", cfg.gate.loss.gamma1);
    g.get("gamma2", cfg.gate.loss.gamma2);
    std::string split = simdata::to_string(cfg.gate.train_split);
    g.get("train_split", split);
    cfg.gate.train_split = simdata::parse_split(split);
    g.get("select_on_val", cfg.gate.select_on_val);
    g.finish();
  }
  if (auto* c = o.child("training")) {
    ObjectReader t(*c, "training");
    if (auto* e = t.child("expert")) read_train(*e, "training.expert", cfg.expert_training);
    if (auto* g = t.child("gate")) read_train(*g, "training.gate", cfg.gate_training);
    t.finish();
  }
  if (auto* c = o.child("metrics")) {
    ObjectReader m(*c, "metrics");
    m.get_size("bins", cfg.metrics.bins);
    m.get("threshold_grid", cfg.metrics.thresholds.grid);
    m.get("min_retention", cfg.metrics.thresholds.min_retention);
    m.finish();
  }
  o.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const ExperimentConfig& cfg, int indent) { return to_json_object(cfg).dump(indent); }

std::string config_hash(const ExperimentConfig& cfg) {
  json j = to_json_object(cfg);
  j.erase("seed");
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace megan::config
