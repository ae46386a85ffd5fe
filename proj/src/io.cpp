#include "megan/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "megan/errors.hpp"

namespace megan::io {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr std::string_view kDatasetMagic = "MGDSET01";
constexpr std::string_view kCheckpointMagic = "MGCKPT01";

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Cursor {
 public:
  Cursor(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw IoError(what_ + " is truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }
  json get_json() {
    const auto n = get<std::uint64_t>();
    try {
      return json::parse(take(static_cast<std::size_t>(n)));
    } catch (const json::parse_error&) {
      throw IoError(what_ + " has a malformed JSON block");
    }
  }
  void expect_end() const {
    if (pos_ != bytes_.size()) throw IoError(what_ + " has trailing bytes");
  }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

void put_json(std::string& out, const json& j) {
  const std::string s = j.dump();
  put<std::uint64_t>(out, s.size());
  out += s;
}

json optional_label(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

std::optional<int> read_optional(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<int>();
}

void check_hash(const std::string& stored, const std::string& expected, bool force, const std::filesystem::path& p) {
  if (stored != expected && !force) {
    throw ConfigHashError("'" + p.string() + "' was produced with config hash " + stored + " but the current config hashes to " +
                          expected + "; regenerate it or pass --force");
  }
}

}  // namespace

void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string encode_split(const SplitFile& file) {
  const std::size_t dim = file.bags.empty() ? 0 : file.bags.front().dim();
  json labels = json::array();
  json counts = json::array();
  for (const auto& b : file.bags) {
    if (b.dim() != dim) throw ShapeError("bags of one split must share a feature dimension");
    counts.push_back(b.num_frames());
    labels.push_back(json{{"bag_id", b.bag_id},
                          {"frames", b.num_frames()},
                          {"local", optional_label(b.local_label)},
                          {"central", optional_label(b.central_label)},
                          {"adjudicator", optional_label(b.adjudicator_label)},
                          {"final", b.final_label},
                          {"true_class", b.true_class},
                          {"difficulty", b.difficulty}});
  }
  const json header{{"format", "megan-dataset"},
                    {"version", kFormatVersion},
                    {"split", simdata::to_string(file.split)},
                    {"count", file.bags.size()},
                    {"feature_dim", dim},
                    {"frame_counts", counts},
                    {"config_hash", file.config_hash},
                    {"seed", file.seed}};
  std::string out(kDatasetMagic);
  put_json(out, header);
  for (const auto& b : file.bags) {
    for (double v : b.frames.values()) put<float>(out, static_cast<float>(v));
  }
  put_json(out, labels);
  return out;
}

SplitFile decode_split(std::string_view bytes) {
  Cursor cur(bytes, "dataset file");
  if (cur.take(kDatasetMagic.size()) != kDatasetMagic) throw IoError("not a dataset file (bad magic)");
  const json header = cur.get_json();
  try {
    if (header.at("format") != "megan-dataset") throw IoError("dataset header has an unexpected format tag");
    if (header.at("version").get<int>() != kFormatVersion) throw IoError("unsupported dataset format version");
    SplitFile file;
    file.split = simdata::parse_split(header.at("split").get<std::string>());
    file.config_hash = header.at("config_hash").get<std::string>();
    file.seed = header.at("seed").get<std::uint64_t>();
    const auto count = header.at("count").get<std::size_t>();
    const auto dim = header.at("feature_dim").get<std::size_t>();
    const auto counts = header.at("frame_counts").get<std::vector<std::size_t>>();
    if (counts.size() != count) throw IoError("dataset header frame counts disagree with the bag count");

    std::vector<std::vector<double>> frames(count);
    for (std::size_t i = 0; i < count; ++i) {
      frames[i].resize(counts[i] * dim);
      for (auto& v : frames[i]) v = static_cast<double>(cur.get<float>());
    }
    const json labels = cur.get_json();
    cur.expect_end();
    if (!labels.is_array() || labels.size() != count) throw IoError("dataset label table has the wrong length");

    file.bags.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const json& rec = labels[i];
      if (rec.at("frames").get<std::size_t>() != counts[i]) throw IoError("dataset label table disagrees with the header");
      simdata::FeatureBag b;
      b.bag_id = rec.at("bag_id").get<std::uint64_t>();
      b.split = file.split;
      b.frames = diff::Tensor::matrix(counts[i], dim, std::move(frames[i]));
      b.local_label = read_optional(rec.at("local"));
      b.central_label = read_optional(rec.at("central"));
      b.adjudicator_label = read_optional(rec.at("adjudicator"));
      b.final_label = rec.at("final").get<int>();
      b.true_class = rec.at("true_class").get<int>();
      b.difficulty = rec.at("difficulty").get<double>();
      file.bags.push_back(std::move(b));
    }
    return file;
  } catch (const json::exception& e) {
    throw IoError(std::string("dataset file is malformed: ") + e.what());
  }
}

void save_split(const std::filesystem::path& path, const SplitFile& file) { atomic_write(path, encode_split(file)); }

SplitFile load_split(const std::filesystem::path& path, const std::string& expected_hash, bool force) {
  SplitFile f = decode_split(read_file(path));
  check_hash(f.config_hash, expected_hash, force, path);
  return f;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  json params = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.params) {
    params.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const json header{{"format_version", kFormatVersion},
                    {"kind", ckpt.kind},
                    {"architecture", ckpt.architecture},
                    {"seed", ckpt.seed},
                    {"config_hash", ckpt.config_hash},
                    {"params", params}};
  std::string out(kCheckpointMagic);
  put_json(out, header);
  for (const auto& [name, t] : ckpt.params) {
    for (double v : t.values()) put<double>(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Cursor cur(bytes, "checkpoint");
  if (cur.take(kCheckpointMagic.size()) != kCheckpointMagic) throw IoError("not a checkpoint (bad magic)");
  const json header = cur.get_json();
  try {
    if (header.at("format_version").get<int>() != kFormatVersion) throw IoError("unsupported checkpoint format version");
    Checkpoint ckpt;
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.architecture = header.at("architecture");
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.config_hash = header.at("config_hash").get<std::string>();
    std::size_t expected_offset = 0;
    for (const auto& p : header.at("params")) {
      const auto shape = p.at("shape").get<std::vector<std::size_t>>();
      if (p.at("offset").get<std::size_t>() != expected_offset) throw IoError("checkpoint parameter offsets are not contiguous");
      std::size_t n = 1;
      for (auto s : shape) n *= s;
      std::vector<double> values(n);
      for (auto& v : values) v = cur.get<double>();
      expected_offset += n;
      try {
        ckpt.params.emplace(p.at("name").get<std::string>(), diff::Tensor(shape, std::move(values)));
      } catch (const NumericError&) {
        throw IoError("checkpoint holds non-finite parameter values");
      }
    }
    cur.expect_end();
    return ckpt;
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint header is malformed: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  atomic_write(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash, bool force) {
  Checkpoint c = decode_checkpoint(read_file(path));
  check_hash(c.config_hash, expected_hash, force, path);
  return c;
}

Checkpoint expert_checkpoint(const expert::ExpertModel& model, const std::string& config_hash) {
  const auto& s = model.spec();
  Checkpoint c;
  c.kind = "expert";
  c.architecture = json{{"name", s.name},
                        {"label_source", simdata::to_string(s.label_source)},
                        {"head", expert::to_string(s.head)},
                        {"attention_kind", s.attention_kind == expert::AttentionKind::gated ? "gated" : "plain"},
                        {"hidden", s.hidden},
                        {"attention", s.attention},
                        {"dropout", s.dropout},
                        {"input_dim", model.input_dim()},
                        {"feature_dim", model.feature_dim()}};
  c.seed = s.seed;
  c.config_hash = config_hash;
  c.params = model.params();
  return c;
}

expert::ExpertModel expert_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "expert") throw IoError("checkpoint holds a '" + ckpt.kind + "', not an expert");
  try {
    const json& a = ckpt.architecture;
    expert::ExpertSpec s;
    s.name = a.at("name").get<std::string>();
    s.label_source = simdata::parse_label_source(a.at("label_source").get<std::string>());
    s.head = expert::parse_head_kind(a.at("head").get<std::string>());
    const auto kind = a.at("attention_kind").get<std::string>();
    if (kind != "gated" && kind != "plain") throw IoError("unknown attention kind '" + kind + "' in checkpoint");
    s.attention_kind = kind == "gated" ? expert::AttentionKind::gated : expert::AttentionKind::plain;
    s.hidden = a.at("hidden").get<std::size_t>();
    s.attention = a.at("attention").get<std::size_t>();
    s.dropout = a.at("dropout").get<double>();
    s.seed = ckpt.seed;
    return expert::ExpertModel(s, a.at("input_dim").get<std::size_t>(), a.at("feature_dim").get<std::size_t>(),
                               ckpt.params);
  } catch (const json::exception& e) {
    throw IoError(std::string("expert checkpoint architecture is malformed: ") + e.what());
  }
}

Checkpoint gate_checkpoint(const gate::GateModel& model, const std::string& config_hash) {
  const auto& s = model.spec();
  Checkpoint c;
  c.kind = "gate";
  c.architecture = json{{"shared_dim", s.shared_dim},
                        {"head_hidden", s.head_hidden},
                        {"dropout", s.dropout},
                        {"num_experts", model.num_experts()},
                        {"feature_dim", model.feature_dim()}};
  c.seed = s.seed;
  c.config_hash = config_hash;
  c.params = model.params();
  return c;
}

gate::GateModel gate_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "gate") throw IoError("checkpoint holds a '" + ckpt.kind + "', not a gate");
  try {
    const json& a = ckpt.architecture;
    gate::GateSpec s;
    s.shared_dim = a.at("shared_dim").get<std::size_t>();
    s.head_hidden = a.at("head_hidden").get<std::size_t>();
    s.dropout = a.at("dropout").get<double>();
    s.seed = ckpt.seed;
    return gate::GateModel(s, a.at("num_experts").get<std::size_t>(), a.at("feature_dim").get<std::size_t>(),
                           ckpt.params);
  } catch (const json::exception& e) {
    throw IoError(std::string("gate checkpoint architecture is malformed: ") + e.what());
  }
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace megan::io
