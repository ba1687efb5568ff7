#include <fstream>
#include <json.hpp>
#include <sstream>

#include "commands.hpp"
#include "doctest.h"
#include "mambaclip/ood.hpp"
#include "mambaclip/synthetic.hpp"
#include "support/test_util.hpp"

using namespace mambaclip;
using namespace mambaclip::cli;
using mambaclip::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

RunConfig tiny(const std::string& command, const fs::path& out) {
  RunConfig c;
  apply_ini_text(c, R"(
[model]
image_size = 16
stage_depths = 1
stage_dims = 16
state_dim = 4
embed_dim = 16
text_dim = 16
text_depth = 1
[train]
total_steps = 12
warmup_steps = 2
)");
  c.command = command;
  c.out = out;
  return c;
}

int run(const RunConfig& c) {
  std::ostringstream log;
  return run_command(c, log);
}

}  // namespace

TEST_CASE("config parsing") {
  RunConfig c;
  CHECK_THROWS_WITH_AS(set_value(c, "train", "bogus", "1"), doctest::Contains("train.bogus"), ConfigError);
  CHECK_THROWS_WITH_AS(set_value(c, "nosuch", "seed", "1"), doctest::Contains("nosuch.seed"), ConfigError);
  CHECK_THROWS_WITH_AS(set_value(c, "train", "batch_size", "sixteen"), doctest::Contains("train.batch_size"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(set_value(c, "model", "text_tower", "transformer"), doctest::Contains("model.text_tower"),
                       ConfigError);
  CHECK_THROWS_AS(apply_ini_text(c, "seed = 3\n"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "seed=3"), ConfigError);

  apply_override(c, "run.seed=42");
  CHECK(c.seed == 42);
  CHECK(c.train.seed == 42);
  apply_ini_text(c, "[model]\nstage_dims = 8, 16\ntext_tower = attention-free-mlp\n[zeroshot]\ntemplates = a {}. | the {}!\n");
  CHECK(c.train.model.stage_dims == std::vector<std::size_t>{8, 16});
  CHECK(c.train.model.text_tower == TextTower::attention_free_mlp);
  CHECK(c.templates == std::vector<std::string>{"a {}.", "the {}!"});
  CHECK(c.model_set);
  apply_override(c, "train.learning_rate=0.00123");
  apply_override(c, "ood.levels=1,0.5,0.25");

  RunConfig back;
  apply_ini_text(back, echo(c));
  CHECK(echo(back) == echo(c));
  CHECK(back.train.learning_rate == 0.00123);
  CHECK(back.ood_levels == std::vector<double>{1.0, 0.5, 0.25});
  CHECK(back.templates == c.templates);

  std::vector<std::string> names;
  for (const auto& i : commands()) names.push_back(i.name);
  CHECK(names == std::vector<std::string>{"train", "eval-zeroshot", "eval-ood", "eval-stimulus", "shape-bias",
                                          "perturb", "hessian", "summarize", "make-synthetic"});
  RunConfig unknown;
  unknown.command = "plot";
  CHECK_THROWS_AS(run(unknown), ConfigError);
}

TEST_CASE("train command") {
  TempDir dir("cli_train");
  const auto set = write_synthetic_dataset(dir / "syn", 16);

  auto missing = tiny("train", dir / "t0");
  CHECK_THROWS_WITH_AS(run(missing), doctest::Contains("run.manifest"), ConfigError);

  auto c = tiny("train", dir / "t1");
  c.manifest = set.captions;
  CHECK(run(c) == 0);
  for (const char* f : {"checkpoint.ckpt", "loss.csv", "config.ini"}) CHECK(fs::exists(dir / "t1" / f));
  const auto lines = read_lines(dir / "t1" / "loss.csv");
  CHECK(lines.size() == 13);
  CHECK(lines[0] == "step,loss,lr");

  c.out = dir / "t2";
  CHECK(run(c) == 0);
  CHECK(read_file(dir / "t1" / "loss.csv") == read_file(dir / "t2" / "loss.csv"));

  // The echo alone reproduces the run.
  RunConfig from_echo;
  apply_ini_file(from_echo, dir / "t1" / "config.ini");
  from_echo.out = dir / "t3";
  CHECK(run(from_echo) == 0);
  CHECK(read_file(dir / "t1" / "loss.csv") == read_file(dir / "t3" / "loss.csv"));

  // Evaluation takes the model shape from the checkpoint's echo...
  RunConfig ev;
  ev.command = "eval-zeroshot";
  ev.out = dir / "z";
  ev.checkpoint = dir / "t1" / "checkpoint.ckpt";
  ev.manifest = set.labeled;
  CHECK(run(ev) == 0);
  const auto z = read_lines(dir / "z" / "zeroshot.csv");
  REQUIRE(z.size() == 2);
  CHECK(z[1].ends_with(",64"));
  CHECK(nlohmann::json::parse(read_file(dir / "z" / "zeroshot.json"))["per_class"].size() == 8);

  // ...and rejects an explicit model section that disagrees, naming the tensor.
  ev.train.model = c.train.model;
  set_value(ev, "model", "embed_dim", "24");
  CHECK_THROWS_WITH_AS(run(ev), doctest::Contains("text.proj.weight"), std::invalid_argument);
}

TEST_CASE("perturb command composes inverse rotations") {
  TempDir dir("cli_perturb");
  const auto set = write_synthetic_dataset(dir / "syn", 8);
  RunConfig a;
  a.command = "perturb";
  a.perturb_input = dir / "syn" / "images";
  a.perturb_kind = "rotation";
  a.perturb_level = 90.0;
  a.out = dir / "r90";
  CHECK(run(a) == 0);
  RunConfig b = a;
  b.perturb_input = dir / "r90";
  b.perturb_level = 270.0;
  b.out = dir / "r360";
  CHECK(run(b) == 0);
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir / "syn" / "images")) {
    const auto name = e.path().filename();
    CHECK(decode_image_u8(e.path()).to_vector() == decode_image_u8(dir / "r360" / name).to_vector());
    ++n;
  }
  CHECK(n == 64);

  RunConfig bad = a;
  bad.perturb_level = 45.0;
  CHECK_THROWS_AS(run(bad), ConfigError);
  RunConfig same = a;
  same.out = a.perturb_input;
  CHECK_THROWS_AS(run(same), ConfigError);
}

TEST_CASE("evaluation, hessian and summary commands") {
  TempDir dir("cli_eval");
  const auto set = write_synthetic_dataset(dir / "syn", 16);
  auto c = tiny("train", dir / "t");
  c.manifest = set.captions;
  REQUIRE(run(c) == 0);
  const fs::path ckpt = dir / "t" / "checkpoint.ckpt";

  // 16-category manifests over the synthetic images.
  auto labeled = load_manifest(set.labeled, ManifestKind::labeled);
  for (std::size_t i = 0; i < labeled.records.size(); ++i) labeled.records[i].category16 = std::string(kCategories16[i % 16]);
  write_manifest(dir / "syn" / "ood.jsonl", labeled);
  auto cue = labeled;
  cue.kind = ManifestKind::cue_conflict;
  for (std::size_t i = 0; i < cue.records.size(); ++i) {
    cue.records[i].shape_category = std::string(kCategories16[i % 16]);
    cue.records[i].texture_category = std::string(kCategories16[(i + 5) % 16]);
  }
  write_manifest(dir / "syn" / "cue.jsonl", cue);

  RunConfig st;
  st.command = "eval-stimulus";
  st.checkpoint = ckpt;
  st.manifest = dir / "syn" / "ood.jsonl";
  st.out = dir / "st";
  CHECK(run(st) == 0);
  const double clean = nlohmann::json::parse(read_file(dir / "st" / "stimulus.json"))["top1"].get<double>();

  RunConfig ood = st;
  ood.command = "eval-ood";
  ood.ood_kind = "contrast";
  ood.out = dir / "ood";
  CHECK(run(ood) == 0);
  const auto rows = read_lines(dir / "ood" / "ood.csv");
  REQUIRE(rows.size() == 9);
  std::istringstream first(rows[1]);
  std::string kind, level, acc;
  std::getline(first, kind, ',');
  std::getline(first, level, ',');
  std::getline(first, acc, ',');
  CHECK(kind == "contrast");
  CHECK(level == "1");
  CHECK(std::stod(acc) == clean);

  RunConfig sb = st;
  sb.command = "shape-bias";
  sb.manifest = dir / "syn" / "cue.jsonl";
  sb.out = dir / "sb";
  CHECK(run(sb) == 0);
  const auto j = nlohmann::json::parse(read_file(dir / "sb" / "shape_bias.json"));
  CHECK(j["shape_count"].get<int>() + j["texture_count"].get<int>() + j["neither_count"].get<int>() == 64);

  RunConfig h = tiny("hessian", dir / "h");
  h.manifest = set.captions;
  h.hessian_samples = 30;
  h.hessian_iterations = 10;
  CHECK(run(h) == 0);
  CHECK(read_lines(dir / "h" / "spectrum.csv").size() == 1 + 2 * 5);
  CHECK(read_lines(dir / "h" / "histogram.csv").size() == 1 + 20);
  CHECK(nlohmann::json::parse(read_file(dir / "h" / "sharpness.json"))["batch_count"] == 2);

  RunConfig s;
  s.command = "summarize";
  s.table = fs::path(MAMBACLIP_TEST_DATA) / "table1.csv";
  s.out = dir / "s";
  CHECK(run(s) == 0);
  const auto summary = read_lines(dir / "s" / "summary.csv");
  CHECK(summary[0] == "dataset,best,models,margin");
  CHECK(std::find(summary.begin(), summary.end(), "ImageNet,41.6,Simba_L,1.2000000000000028") != summary.end());
}
