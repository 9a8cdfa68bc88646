#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "splitnn/channel.hpp"
#include "splitnn/error.hpp"
#include "splitnn/harness.hpp"

using namespace splitnn;
namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Fresh scratch directory per test case; survives after a failure for
// inspection, wiped on the next run.
std::string scratch(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("splitnn_harness_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(bool(f));
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// Small enough that a full four-phase pipeline finishes in a couple of
// seconds; quality is irrelevant here, only orchestration behavior.
ExperimentConfig tiny_config(const std::string& dir) {
  ExperimentConfig cfg;
  cfg.dataset.classes = 4;
  cfg.dataset.train_per_class = 16;
  cfg.dataset.test_per_class = 5;
  cfg.dataset.seed = 7;
  cfg.backbone.width_scale = 0.125;
  cfg.split = 2;
  cfg.pruning_ratio = 0.0;
  cfg.c_enc = 4;
  cfg.snr_db_list = {20.0};
  cfg.pipeline.batch_size = 32;
  cfg.pipeline.phase1.epochs = 2;
  cfg.pipeline.phase1.lr_drops = {};
  cfg.pipeline.phase3.epochs = 2;
  cfg.pipeline.phase4.epochs = 1;
  cfg.seed = 5;
  cfg.output_dir = dir;
  return cfg;
}

ResultRow make_row(int split, double ratio, int c_enc, int bw, double snr,
                   double acc, long long flops, double base, uint64_t seed) {
  ResultRow r;
  r.split = split;
  r.ratio = ratio;
  r.c_enc = c_enc;
  r.bandwidth = bw;
  r.snr_db = snr;
  r.accuracy = acc;
  r.device_flops = flops;
  r.baseline_accuracy = base;
  r.seed = seed;
  return r;
}

int count_matching(const fs::path& dir, const std::string& needle) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().find(needle) != std::string::npos) ++n;
  return n;
}

}  // namespace

TEST_CASE("json config: partial documents override only their fields") {
  ExperimentConfig cfg;
  apply_json(cfg, R"({
    "split": 4,
    "snr_db_list": [1, "inf"],
    "dataset": {"classes": 6},
    "pipeline": {"phase3": {"epochs": 7}}
  })");
  CHECK(cfg.split == 4);
  REQUIRE(cfg.snr_db_list.size() == 2);
  CHECK(cfg.snr_db_list[0] == 1.0);
  CHECK(std::isinf(cfg.snr_db_list[1]));
  CHECK(cfg.dataset.classes == 6);
  CHECK(cfg.dataset.train_per_class == 500);  // untouched default
  CHECK(cfg.pipeline.phase3.epochs == 7);
  CHECK(cfg.pipeline.phase3.lr == 0.1);  // untouched default
  CHECK(cfg.c_enc == 8);
  CHECK(cfg.pruning_ratio == 0.0);
}

TEST_CASE("json config: unknown keys and wrong types are rejected") {
  ExperimentConfig cfg;
  CHECK_THROWS_AS(apply_json(cfg, R"({"bogus": 1})"), ConfigError);
  CHECK_THROWS_AS(apply_json(cfg, R"({"split": "two"})"), ConfigError);
  CHECK_THROWS_AS(apply_json(cfg, R"({"pipeline": {"phase1": {"epoch": 3}}})"),
                  ConfigError);
  CHECK_THROWS_AS(apply_json(cfg, R"({"dataset": {"klass": 3}})"), ConfigError);
  CHECK_THROWS_AS(apply_json(cfg, R"({"snr_db_list": 5})"), ConfigError);
  CHECK_THROWS_AS(apply_json(cfg, R"({"identity_codec": "yes"})"), ConfigError);
  CHECK_THROWS_AS(apply_json(cfg, "not json at all"), ConfigError);
  CHECK_THROWS_AS(apply_json(cfg, "[1, 2]"), ConfigError);
  CHECK_THROWS_AS(config_from_file("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("normalized: derived fields and domain validation") {
  ExperimentConfig cfg = tiny_config("unused");
  cfg.backbone.num_classes = 99;  // must be overwritten from the dataset
  cfg.pruning_ratio = 0.25;
  const ExperimentConfig n = normalized(cfg);
  CHECK(n.backbone.num_classes == 4);
  CHECK(n.pipeline.seed == cfg.seed);
  CHECK(n.pipeline.phase2.target_ratio == 0.25);

  auto reject = [&](auto&& mutate) {
    ExperimentConfig c = tiny_config("unused");
    mutate(c);
    CHECK_THROWS_AS(normalized(c), ConfigError);
  };
  reject([](ExperimentConfig& c) { c.split = 0; });
  reject([](ExperimentConfig& c) { c.split = 6; });
  reject([](ExperimentConfig& c) { c.pruning_ratio = 1.0; });
  reject([](ExperimentConfig& c) { c.pruning_ratio = -0.1; });
  reject([](ExperimentConfig& c) { c.snr_db_list.clear(); });
  reject([](ExperimentConfig& c) { c.c_enc = 0; });
  reject([](ExperimentConfig& c) { c.eval_draws = 0; });
  reject([](ExperimentConfig& c) { c.dataset.kind = "mnist"; });
  reject([](ExperimentConfig& c) { c.dataset.classes = 1; });
  reject([](ExperimentConfig& c) {
    c.dataset.kind = "cifar100";
    c.dataset.path.clear();
  });
  reject([](ExperimentConfig& c) { c.output_dir.clear(); });
}

TEST_CASE("config_hash: sensitive to the cell, blind to presentation") {
  const ExperimentConfig base = tiny_config("dir_a");
  const uint64_t h = config_hash(base);

  ExperimentConfig same = base;
  same.output_dir = "dir_b";
  same.snr_db_list = {-5.0, 0.0, 10.0};
  same.bandwidth_reference = 1024;
  CHECK(config_hash(same) == h);

  auto differs = [&](auto&& mutate) {
    ExperimentConfig c = base;
    mutate(c);
    CHECK(config_hash(c) != h);
  };
  differs([](ExperimentConfig& c) { c.split = 3; });
  differs([](ExperimentConfig& c) { c.pruning_ratio = 0.25; });
  differs([](ExperimentConfig& c) { c.c_enc = 16; });
  differs([](ExperimentConfig& c) { c.seed = 6; });
  differs([](ExperimentConfig& c) { c.identity_codec = true; });
  differs([](ExperimentConfig& c) { c.backbone.width_scale = 0.25; });
  differs([](ExperimentConfig& c) { c.pipeline.phase4.epochs = 2; });
  differs([](ExperimentConfig& c) { c.dataset.seed = 8; });
  differs([](ExperimentConfig& c) { c.eval_draws = 3; });
}

TEST_CASE("phase1_key: shared across codec cells, split by backbone concerns") {
  const ExperimentConfig base = tiny_config("dir_a");
  const uint64_t k = phase1_key(base);

  ExperimentConfig same = base;
  same.split = 4;
  same.pruning_ratio = 0.5;
  same.c_enc = 64;
  same.identity_codec = true;
  same.snr_db_list = {0.0};
  same.pipeline.phase3.epochs = 99;
  same.pipeline.phase4.epochs = 99;
  same.output_dir = "dir_b";
  CHECK(phase1_key(same) == k);

  auto differs = [&](auto&& mutate) {
    ExperimentConfig c = base;
    mutate(c);
    CHECK(phase1_key(c) != k);
  };
  differs([](ExperimentConfig& c) { c.seed = 6; });
  differs([](ExperimentConfig& c) { c.backbone.width_scale = 0.25; });
  differs([](ExperimentConfig& c) { c.pipeline.phase1.epochs = 3; });
  differs([](ExperimentConfig& c) { c.pipeline.batch_size = 16; });
  differs([](ExperimentConfig& c) { c.dataset.classes = 5; });
  differs([](ExperimentConfig& c) { c.dataset.seed = 8; });
}

TEST_CASE("csv schema: fixed header prefix and hand-checked line") {
  const std::string fixed =
      "split,ratio,c_enc,bandwidth,snr_db,accuracy,device_flops,"
      "baseline_accuracy,seed";
  CHECK(csv_header().rfind(fixed, 0) == 0);

  const ResultRow r = make_row(2, 0.25, 8, 128, 20.0, 0.91, 123456, 0.93, 7);
  const auto f = split_fields(csv_line(r, 3072));
  REQUIRE(f.size() == 11);
  CHECK(f[0] == "2");
  CHECK(f[1] == "0.25");
  CHECK(f[2] == "8");
  CHECK(f[3] == "128");
  CHECK(f[4] == "20");
  CHECK(f[5] == "0.91");
  CHECK(f[6] == "123456");
  CHECK(f[7] == "0.93");
  CHECK(f[8] == "7");
  CHECK(std::stod(f[9]) == doctest::Approx(capacity(20.0) * 128));
  CHECK(f[10] == "24");  // 3072 / 128

  // Non-finite SNR travels as "inf", and so does its digital reference.
  const ResultRow rn = make_row(2, 0.0, 8, 1024, kInf, 0.5, 1, 0.5, 1);
  const auto g = split_fields(csv_line(rn, 3072));
  CHECK(g[4] == "inf");
  CHECK(g[9] == "inf");

  // The digital reference grows in both bandwidth and SNR.
  CHECK(capacity(0.0) * 8 < capacity(0.0) * 64);
  CHECK(capacity(-5.0) * 64 < capacity(0.0) * 64);
  CHECK(capacity(0.0) * 64 < capacity(10.0) * 64);
}

TEST_CASE("csv emission: empty results still produce the header") {
  const std::string dir = scratch("empty_csv");
  const std::string path = dir + "/out.csv";
  write_csv({}, path);
  CHECK(slurp(path) == csv_header() + "\n");
}

TEST_CASE("results store: json round trip preserves rows and keys") {
  const std::string dir = scratch("store");
  std::vector<StoredRow> rows;
  StoredRow a;
  a.key = 0xdeadbeefcafebabeull;
  a.row = make_row(2, 0.25, 8, 2048, kInf, 0.875, 25167872, 0.9, 11);
  a.row.timings_s = {{"phase1", 12.5}, {"phase4", 3.25}};
  StoredRow b;
  b.key = 42;
  b.row = make_row(4, 0.0, 128, 128, -5.0, 0.01, 161833472, 0.02, 3);
  rows.push_back(a);
  rows.push_back(b);

  save_results(dir, rows);
  const auto back = load_results(dir);
  REQUIRE(back.size() == 2);
  CHECK(back[0].key == a.key);
  CHECK(back[0].row.split == 2);
  CHECK(back[0].row.ratio == 0.25);
  CHECK(back[0].row.c_enc == 8);
  CHECK(back[0].row.bandwidth == 2048);
  CHECK(std::isinf(back[0].row.snr_db));
  CHECK(back[0].row.accuracy == 0.875);
  CHECK(back[0].row.device_flops == 25167872);
  CHECK(back[0].row.baseline_accuracy == 0.9);
  CHECK(back[0].row.seed == 11);
  CHECK(back[0].row.timings_s.at("phase1") == 12.5);
  CHECK(back[1].key == 42);
  CHECK(back[1].row.snr_db == -5.0);

  CHECK(load_results(scratch("store_none")).empty());
}

TEST_CASE("emitted json carries timings and survives a parse") {
  const std::string dir = scratch("emit_json");
  ResultRow r = make_row(3, 0.5, 16, 256, kInf, 0.8, 999, 0.82, 2);
  r.timings_s["phase3"] = 1.5;
  const std::string path = dir + "/rows.json";
  write_json({r}, path);

  const nlohmann::json j = nlohmann::json::parse(slurp(path));
  REQUIRE(j.at("rows").size() == 1);
  const auto& jr = j.at("rows").at(0);
  CHECK(jr.at("split") == 3);
  CHECK(jr.at("snr_db") == "inf");
  CHECK(jr.at("timings_s").at("phase3") == 1.5);
}

TEST_CASE("frontier: floor filter and pareto reduction, hand-derived") {
  std::vector<ResultRow> rows;
  rows.push_back(make_row(2, 0, 1, 50, 10, 0.89, 100, 0.90, 1));
  rows.push_back(make_row(3, 0, 1, 40, 10, 0.90, 200, 0.90, 1));
  rows.push_back(make_row(4, 0, 1, 60, 10, 0.90, 150, 0.90, 1));  // dominated
  rows.push_back(make_row(1, 0, 1, 5, 10, 0.87, 10, 0.90, 1));  // below floor
  rows.push_back(make_row(5, 0, 1, 45, 10, 0.88, 50, 0.90, 1));  // boundary

  const std::string dir = scratch("frontier");
  const std::string path = dir + "/frontier.csv";
  write_frontier(rows, 0.02, path);
  CHECK(slurp(path) == "x,y,series\n45,50,split5\n40,200,split3\n");

  write_frontier({}, 0.02, path);
  CHECK(slurp(path) == "x,y,series\n");
}

TEST_CASE("sweep_from_json: grid axes split off from the base config") {
  const SweepGrid g = sweep_from_json(R"({
    "seed": 9,
    "c_enc": 2,
    "sweep": {"splits": [2, 3], "ratios": [0, 0.25]}
  })");
  CHECK(g.base.seed == 9);
  CHECK(g.base.c_enc == 2);
  CHECK(g.splits == std::vector<int>{2, 3});
  CHECK(g.ratios == std::vector<double>{0.0, 0.25});
  CHECK(g.c_encs.empty());

  CHECK_THROWS_AS(sweep_from_json(R"({"sweep": {"bogus": [1]}})"), ConfigError);
}

TEST_CASE("run: noiseless identity cell reproduces the phase-1 baseline exactly") {
  const std::string dir = scratch("sanity");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.identity_codec = true;
  cfg.snr_db_list = {kInf};

  const auto rows = run(cfg);
  REQUIRE(rows.size() == 1);
  const ResultRow& r = rows[0];
  CHECK(r.accuracy == r.baseline_accuracy);  // exact, not approximate
  CHECK(r.bandwidth == 16 * 8 * 8);  // raw split feature, no codec
  CHECK(r.device_flops > 0);
  CHECK(r.split == 2);
  CHECK(r.seed == 5);

  CHECK(fs::exists(fs::path(dir) / "results.csv"));
  CHECK(fs::exists(fs::path(dir) / "results.json"));
  CHECK(count_matching(fs::path(dir) / "ck", "phase1_") == 1);
  // Identity cells never fit a codec, so no phase-3/4 checkpoints appear.
  CHECK(count_matching(fs::path(dir) / "ck", "_phase3") == 0);
  CHECK(count_matching(fs::path(dir) / "ck", "_phase4") == 0);

  const auto text = lines_of(slurp(fs::path(dir) / "results.csv"));
  REQUIRE(text.size() == 2);
  CHECK(text[0] == csv_header());
  const auto f = split_fields(text[1]);
  CHECK(f[4] == "inf");
  CHECK(f[5] == f[7]);  // accuracy column equals baseline column
}

TEST_CASE("run: one row per snr, idempotent on rerun") {
  const std::string dir = scratch("fourrow");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.snr_db_list = {-5.0, 0.0, 10.0, 20.0};

  const auto rows = run(cfg);
  REQUIRE(rows.size() == 4);
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].snr_db == cfg.snr_db_list[i]);
    CHECK(rows[i].bandwidth == 4 * 4 * 4);  // (8/2)*(8/2)*c_enc
    CHECK(rows[i].accuracy >= 0.0);
    CHECK(rows[i].accuracy <= 1.0);
    CHECK(rows[i].baseline_accuracy == rows[0].baseline_accuracy);
  }

  const std::string csv_before = slurp(fs::path(dir) / "results.csv");
  CHECK(lines_of(csv_before).size() == 5);  // header + 4 rows

  // A rerun serves every row from the store: identical rows, untouched files.
  const auto again = run(cfg);
  REQUIRE(again.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(again[i].accuracy == rows[i].accuracy);
    CHECK(again[i].device_flops == rows[i].device_flops);
  }
  CHECK(slurp(fs::path(dir) / "results.csv") == csv_before);
}

TEST_CASE("run: resuming from partial checkpoints reproduces the rows") {
  const std::string dir_full = scratch("resume_full");
  ExperimentConfig cfg = tiny_config(dir_full);
  cfg.snr_db_list = {0.0, 20.0};

  const auto rows_full = run(cfg);
  REQUIRE(rows_full.size() == 2);
  const std::string csv_full = slurp(fs::path(dir_full) / "results.csv");

  // Interrupted after phase 1: only the pretrain checkpoint survives.
  const std::string dir_p1 = scratch("resume_p1");
  fs::create_directories(fs::path(dir_p1) / "ck");
  for (const auto& e : fs::directory_iterator(fs::path(dir_full) / "ck")) {
    const std::string name = e.path().filename().string();
    if (name.rfind("phase1_", 0) == 0)
      fs::copy_file(e.path(), fs::path(dir_p1) / "ck" / name);
  }
  cfg.output_dir = dir_p1;
  const auto rows_p1 = run(cfg);
  REQUIRE(rows_p1.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(rows_p1[i].accuracy == rows_full[i].accuracy);
    CHECK(rows_p1[i].device_flops == rows_full[i].device_flops);
    CHECK(rows_p1[i].baseline_accuracy == rows_full[i].baseline_accuracy);
  }
  CHECK(slurp(fs::path(dir_p1) / "results.csv") == csv_full);

  // Interrupted between phases 3 and 4.
  const std::string dir_p3 = scratch("resume_p3");
  fs::create_directories(fs::path(dir_p3) / "ck");
  for (const auto& e : fs::directory_iterator(fs::path(dir_full) / "ck")) {
    const std::string name = e.path().filename().string();
    if (name.rfind("phase1_", 0) == 0 ||
        name.find("_phase3") != std::string::npos)
      fs::copy_file(e.path(), fs::path(dir_p3) / "ck" / name);
  }
  cfg.output_dir = dir_p3;
  const auto rows_p3 = run(cfg);
  REQUIRE(rows_p3.size() == 2);
  for (size_t i = 0; i < 2; ++i)
    CHECK(rows_p3[i].accuracy == rows_full[i].accuracy);
  CHECK(slurp(fs::path(dir_p3) / "results.csv") == csv_full);
}

TEST_CASE("sweep: 2x2 grid shares one pretrained backbone") {
  const std::string dir = scratch("grid");
  SweepGrid grid;
  grid.base = tiny_config(dir);
  grid.base.snr_db_list = {10.0};
  grid.splits = {2, 3};
  grid.c_encs = {2, 4};

  const SweepOutcome out = sweep(grid);
  CHECK(out.cells == 4);
  CHECK(out.failed_cells == 0);
  CHECK(out.errors.empty());
  REQUIRE(out.rows.size() == 4);

  std::set<std::pair<int, int>> cells;
  for (const ResultRow& r : out.rows) {
    cells.insert({r.split, r.c_enc});
    CHECK(r.baseline_accuracy == out.rows[0].baseline_accuracy);
  }
  CHECK(cells.size() == 4);

  CHECK(count_matching(fs::path(dir) / "ck", "phase1_") == 1);
  CHECK(lines_of(slurp(fs::path(dir) / "results.csv")).size() == 5);
}

TEST_CASE("sweep: a failing cell is isolated, the rest complete") {
  const std::string dir = scratch("isolate");
  SweepGrid grid;
  grid.base = tiny_config(dir);
  grid.base.snr_db_list = {10.0};
  grid.c_encs = {4096, 4};  // first cell exceeds the encoder width guard

  const SweepOutcome out = sweep(grid);
  CHECK(out.cells == 2);
  CHECK(out.failed_cells == 1);
  REQUIRE(out.errors.size() == 1);
  CHECK(out.errors[0].find("c_enc=4096") != std::string::npos);
  REQUIRE(out.rows.size() == 1);
  CHECK(out.rows[0].c_enc == 4);
  // The failed cell still left the shared phase-1 checkpoint behind.
  CHECK(count_matching(fs::path(dir) / "ck", "phase1_") == 1);
}

TEST_CASE("run_through and eval_only: stagewise execution against checkpoints") {
  const std::string dir = scratch("stages");
  ExperimentConfig cfg = tiny_config(dir);

  // Evaluation refuses to train; nothing exists yet.
  CHECK_THROWS_AS(eval_only(cfg), StateError);

  run_through(cfg, Stage::pretrain);
  CHECK(count_matching(fs::path(dir) / "ck", "phase1_") == 1);
  CHECK(count_matching(fs::path(dir) / "ck", "_phase3") == 0);
  CHECK_THROWS_AS(eval_only(cfg), StateError);  // codec still missing

  run_through(cfg, Stage::codec);
  CHECK(count_matching(fs::path(dir) / "ck", "_phase3") == 1);
  CHECK(count_matching(fs::path(dir) / "ck", "_phase4") == 0);
  CHECK_THROWS_AS(eval_only(cfg), StateError);  // end-to-end still missing

  run_through(cfg, Stage::e2e);
  CHECK(count_matching(fs::path(dir) / "ck", "_phase4") == 1);

  const auto rows_eval = eval_only(cfg);
  const auto rows_run = run(cfg);
  REQUIRE(rows_eval.size() == 1);
  CHECK(rows_eval[0].accuracy == rows_run[0].accuracy);

  // A fresh SNR point is scored straight from the checkpoints.
  cfg.snr_db_list = {0.0};
  const auto more = eval_only(cfg);
  REQUIRE(more.size() == 1);
  CHECK(more[0].snr_db == 0.0);
}

TEST_CASE("run_through: prune stage leaves a phase-2 checkpoint behind") {
  const std::string dir = scratch("prunestage");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.pruning_ratio = 0.25;
  cfg.pipeline.phase2.saliency_batches = 2;
  cfg.pipeline.phase2.finetune_epochs = 1;

  run_through(cfg, Stage::prune);
  CHECK(count_matching(fs::path(dir) / "ck", "_phase2") == 1);
  CHECK(count_matching(fs::path(dir) / "ck", "_phase3") == 0);

  // Continuing to a full run reuses the pruned backbone and completes.
  const auto rows = run(cfg);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].ratio == 0.25);
  CHECK(rows[0].device_flops > 0);
}
