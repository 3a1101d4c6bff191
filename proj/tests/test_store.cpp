#include "moelab/checkpoint.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "moelab/config.hpp"
#include "moelab/pipeline.hpp"
#include "moelab/plots.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig store_cfg() {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.d_model = 6;
  cfg.d_ff = 8;
  cfg.n_blocks = 2;
  cfg.n_experts = 3;
  cfg.max_seq = 16;
  cfg.init_seed = 77;
  return cfg;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  TempDir dir("moelab_ckpt_test");
  MoEModel model(store_cfg());
  auto trig = init_trigger(3, model.token_embedding, 5);
  const std::string base = (dir.path / "model").string();
  save_checkpoint(Checkpoint::snapshot(model, &trig), base);

  auto loaded = load_checkpoint(base);
  auto restored = loaded.restore_model();
  for (auto& [name, t] : model.named_parameters()) {
    bool found = false;
    for (auto& [name2, t2] : restored.named_parameters()) {
      if (name2 != name) continue;
      found = true;
      REQUIRE(t2->shape == t->shape);
      REQUIRE(std::memcmp(t2->data.data(), t->data.data(), t->numel() * sizeof(float)) == 0);
    }
    REQUIRE(found);
  }
  auto trig2 = loaded.restore_trigger();
  CHECK(trig2.q == 3);
  CHECK(std::memcmp(trig2.rows->data.data(), trig.rows->data.data(), trig.rows->numel() * sizeof(float)) == 0);

  // saving the restored model reproduces the digest
  save_checkpoint(Checkpoint::snapshot(restored, &trig2), (dir.path / "model2").string());
  CHECK(load_checkpoint((dir.path / "model2").string()).digest == loaded.digest);
}

TEST_CASE("checkpoint detects corruption") {
  TempDir dir("moelab_ckpt_corrupt");
  MoEModel model(store_cfg());
  const std::string base = (dir.path / "model").string();
  save_checkpoint(Checkpoint::snapshot(model), base);
  {
    std::fstream f(base + ".bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    char junk = 0x5a;
    f.write(&junk, 1);
  }
  CHECK_THROWS_AS(load_checkpoint(base), IoError);
}

TEST_CASE("run config applies defaults and carries paper values") {
  auto cfg = RunConfig::from_json_text(R"({"seed": 7})");
  CHECK(cfg.seed == 7);
  CHECK(cfg.sigma == 0.5);
  CHECK(cfg.alpha == 0.5);
  CHECK(cfg.q == 3);
  CHECK(cfg.top_s == 3);
  CHECK(cfg.model.n_experts == 8);
  CHECK(cfg.model.top_k == 1);
  CHECK(cfg.baseline.batch_size == 2);
  CHECK(cfg.baseline.grad_accum == 16);
  CHECK(cfg.pretrain.epochs == 10);
  CHECK(cfg.posttrain.epochs == 10);
  CHECK(cfg.onion_budget == 3);
  CHECK(cfg.run_id.size() == 12);
}

TEST_CASE("run config rejects unknown keys, missing seed, bad values") {
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"seed":1,"not_a_key":2})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"seed":1,"model":{"d_modell":32}})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"output_dir":"x"})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"seed":1,"trigger":{"sigma":1.5}})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"seed":1,"sensitivity":{"top_s":9}})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json_text("not json"), ConfigError);
}

TEST_CASE("run id is a stable hash of the config bytes") {
  const std::string text = R"({"seed": 3})";
  auto a = RunConfig::from_json_text(text);
  auto b = RunConfig::from_json_text(text);
  CHECK(a.run_id == b.run_id);
  auto c = RunConfig::from_json_text(R"({"seed": 4})");
  CHECK(c.run_id != a.run_id);
  auto d = RunConfig::from_json_text(R"({ "seed": 3 })");  // different bytes, different id
  CHECK(d.run_id != a.run_id);
}

TEST_CASE("manifest records artifacts and verifies digests") {
  TempDir dir("moelab_manifest_test");
  auto cfg = RunConfig::from_json_text(R"({"seed": 1})");
  auto manifest = RunManifest::start(cfg);

  const fs::path artifact = dir.path / "artifact.txt";
  {
    std::ofstream out(artifact);
    out << "payload\n";
  }
  manifest.record_phase("gen-data", {artifact}, {{"n", 1}});
  manifest.save(dir.path / "manifest.json");

  auto back = RunManifest::load(dir.path / "manifest.json");
  CHECK(back.run_id == cfg.run_id);
  CHECK(back.has_phase("gen-data"));
  CHECK_NOTHROW(back.verify_artifacts());

  {
    std::ofstream out(artifact);
    out << "tampered\n";
  }
  CHECK_THROWS_AS(back.verify_artifacts(), IoError);
  fs::remove(artifact);
  CHECK_THROWS_AS(back.verify_artifacts(), IoError);
}

TEST_CASE("run lock is exclusive per run directory") {
  TempDir dir("moelab_lock_test");
  RunPaths paths;
  paths.root = dir.path;
  paths.ensure_dirs();
  {
    RunLock lock(paths);
    CHECK_THROWS_AS(RunLock(paths), IoError);
  }
  CHECK_NOTHROW(RunLock(paths));  // released on destruction
}

TEST_CASE("plot emission accounting") {
  TempDir dir("moelab_plots_test");
  RunPaths paths;
  paths.root = dir.path;
  paths.ensure_dirs();

  // synthesize a trace: 4 steps (2 per branch) x 2 blocks x 3 experts
  MoEModel model(store_cfg());
  const int plen = int(model.blocks[0].experts[0].wi->numel() + model.blocks[0].experts[0].wo->numel());
  SensitivityRecorder rec(2, 3, plen);
  for (int t = 0; t < 4; ++t) {
    rec.begin_step(t % 2 ? Branch::kPoison : Branch::kClean);
    rec.record_step(model);
  }
  {
    std::ofstream out(paths.trace_jsonl());
    write_trace_jsonl(rec.trace(), out);
  }
  SenScoreTable table;
  table.n_blocks = 2;
  table.n_experts = 3;
  table.scores = {3, 2, 1, 1, 2, 3};
  auto cluster = select_top_s(table, 2);
  {
    std::ofstream out(paths.cluster_json());
    out << cluster.to_json().dump(2) << "\n";
  }

  emit_plot_data(paths);

  // rows = steps-per-branch x blocks x experts x 2 branches
  std::ifstream csv(paths.plots() / "grad_series.csv");
  REQUIRE(csv.good());
  std::string line;
  int rows = -1;  // discount header
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2 * 2 * 3 * 2);

  // heat grid has exactly S marked cells per block
  std::ifstream grid(paths.plots() / "cluster_grid.csv");
  REQUIRE(grid.good());
  std::getline(grid, line);  // header
  std::map<int, int> marks;
  while (std::getline(grid, line)) {
    if (line.empty()) continue;
    int b, e, sel;
    char c;
    std::istringstream(line) >> b >> c >> e >> c >> sel;
    marks[b] += sel;
  }
  CHECK(marks[0] == 2);
  CHECK(marks[1] == 2);

  // SVG well-formed: every opened tag closes
  for (int b = 0; b < 2; ++b) {
    std::ifstream svg(paths.plots() / ("grad_series_block" + std::to_string(b) + ".svg"));
    REQUIRE(svg.good());
    std::stringstream ss;
    ss << svg.rdbuf();
    const std::string body = ss.str();
    CHECK(body.find("<svg") != std::string::npos);
    CHECK(body.find("</svg>") != std::string::npos);
    size_t opens = 0, closes = 0, selfclosed = 0;
    for (size_t i = 0; i + 1 < body.size(); ++i) {
      if (body[i] == '<' && body[i + 1] != '/' && body[i + 1] != '?') ++opens;
      if (body[i] == '<' && body[i + 1] == '/') ++closes;
      if (body[i] == '/' && body[i + 1] == '>') ++selfclosed;
    }
    CHECK(opens == closes + selfclosed);
  }

  SECTION("missing trace raises an io error") {
    RunPaths empty;
    empty.root = dir.path / "empty";
    empty.ensure_dirs();
    CHECK_THROWS_AS(emit_plot_data(empty), IoError);
  }
}
