#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "megan/errors.hpp"
#include "megan/io.hpp"

using namespace megan;

namespace {

simdata::Dataset small_dataset() {
  simdata::GeneratorConfig g;
  g.n_train = 12;
  g.n_val = 4;
  g.n_test = 4;
  g.n_unseen = 4;
  g.frames_min = 2;
  g.frames_max = 5;
  g.feature_dim = 6;
  g.seed = 3;
  simdata::TrialRaters r;
  return simdata::generate_dataset(g, r, r);
}

std::filesystem::path scratch(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "megan_test_io" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("split files round-trip exactly") {
  const auto ds = small_dataset();
  for (auto s : simdata::kAllSplits) {
    io::SplitFile f{s, "0123456789abcdef", 3, ds.split(s)};
    const std::string bytes = io::encode_split(f);
    const auto back = io::decode_split(bytes);
    CHECK(back.split == s);
    CHECK(back.config_hash == f.config_hash);
    CHECK(back.seed == 3);
    // Generated frames are already float-representable.
    CHECK(back.bags == f.bags);
    CHECK(io::encode_split(back) == bytes);
  }
}

TEST_CASE("split files keep missing rater scores") {
  auto ds = small_dataset();
  ds.train[0].adjudicator_label.reset();
  ds.train[1].adjudicator_label = 2;
  io::SplitFile f{simdata::Split::train, "h", 1, ds.train};
  const auto back = io::decode_split(io::encode_split(f));
  CHECK_FALSE(back.bags[0].adjudicator_label.has_value());
  CHECK(back.bags[1].adjudicator_label == 2);
}

TEST_CASE("corrupt split files raise IoError") {
  const auto ds = small_dataset();
  io::SplitFile f{simdata::Split::val, "h", 1, ds.val};
  std::string bytes = io::encode_split(f);
  CHECK_THROWS_AS(io::decode_split(bytes.substr(0, bytes.size() - 3)), IoError);
  CHECK_THROWS_AS(io::decode_split("XXXXXXXX" + bytes.substr(8)), IoError);
  CHECK_THROWS_AS(io::decode_split(bytes + "x"), IoError);
}

TEST_CASE("config hash mismatch is reported unless forced") {
  const auto dir = scratch("hash");
  const auto ds = small_dataset();
  io::save_split(dir / "val.mgd", {simdata::Split::val, "aaaa", 1, ds.val});
  CHECK_NOTHROW(io::load_split(dir / "val.mgd", "aaaa"));
  CHECK_THROWS_AS(io::load_split(dir / "val.mgd", "bbbb"), ConfigHashError);
  CHECK(io::load_split(dir / "val.mgd", "bbbb", true).bags.size() == ds.val.size());
  CHECK_THROWS_AS(io::load_split(dir / "missing.mgd", "aaaa"), IoError);
  CHECK_FALSE(std::filesystem::exists(dir / "val.mgd.tmp"));
}

TEST_CASE("expert checkpoints round-trip") {
  expert::ExpertSpec spec;
  spec.name = "central_x";
  spec.head = expert::HeadKind::softmax;
  spec.attention_kind = expert::AttentionKind::plain;
  spec.hidden = 5;
  spec.attention = 3;
  spec.dropout = 0.2;
  spec.seed = 42;
  expert::ExpertModel m(spec, 6, 4);
  const auto ck = io::expert_checkpoint(m, "cafe");
  const std::string bytes = io::encode_checkpoint(ck);
  const auto back = io::decode_checkpoint(bytes);
  CHECK(io::encode_checkpoint(back) == bytes);
  const auto m2 = io::expert_from_checkpoint(back);
  CHECK(m2.params() == m.params());
  CHECK(m2.spec().name == "central_x");
  CHECK(m2.spec().head == expert::HeadKind::softmax);
  CHECK(m2.spec().attention_kind == expert::AttentionKind::plain);
  CHECK(m2.spec().seed == 42);
  CHECK(m2.input_dim() == 6);
  CHECK(m2.feature_dim() == 4);
  CHECK_THROWS_AS(io::gate_from_checkpoint(back), IoError);
}

TEST_CASE("gate checkpoints round-trip through disk") {
  const auto dir = scratch("gate");
  gate::GateSpec spec{7, 3, 0.1, 9};
  gate::GateModel g(spec, 3, 4);
  io::save_checkpoint(dir / "gate.ckpt", io::gate_checkpoint(g, "beef"));
  const auto back = io::gate_from_checkpoint(io::load_checkpoint(dir / "gate.ckpt", "beef"));
  CHECK(back.params() == g.params());
  CHECK(back.num_experts() == 3);
  CHECK(back.spec().shared_dim == 7);
  CHECK_THROWS_AS(io::load_checkpoint(dir / "gate.ckpt", "dead"), ConfigHashError);
}

TEST_CASE("checkpoint with wrong parameter shapes is rejected") {
  expert::ExpertSpec spec;
  spec.hidden = 4;
  spec.attention = 2;
  expert::ExpertModel m(spec, 3, 2);
  auto ck = io::expert_checkpoint(m, "h");
  ck.architecture["hidden"] = 5;
  CHECK_THROWS_AS(io::expert_from_checkpoint(ck), ShapeError);
}

TEST_CASE("format_number is shortest round-trip") {
  CHECK(io::format_number(0.1) == "0.1");
  CHECK(io::format_number(1.0) == "1");
  CHECK(io::format_number(std::numeric_limits<double>::quiet_NaN()) == "nan");
  const double x = 0.1 + 0.2;
  CHECK(std::stod(io::format_number(x)) == x);
}
