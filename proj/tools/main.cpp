#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "splitnn/complexity.hpp"
#include "splitnn/error.hpp"
#include "splitnn/harness.hpp"
#include "splitnn/model.hpp"

namespace fs = std::filesystem;
using namespace splitnn;

namespace {

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string snr_db;
  int split = 0;
  double ratio = 0.0;
  int c_enc = 0;
  std::string out;
  bool resume = false;
  std::string format = "csv";
  double floor = 0.02;
};

std::string slurp(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(std::string("cannot open ") + what + ": " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> parse_snr_list(const std::string& text) {
  std::vector<double> out;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::size_t a = item.find_first_not_of(" \t");
    if (a == std::string::npos)
      throw ConfigError("empty entry in --snr-db list: '" + text + "'");
    const std::size_t b = item.find_last_not_of(" \t");
    item = item.substr(a, b - a + 1);
    if (item == "inf" || item == "+inf") {
      out.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    if (item == "-inf") {
      out.push_back(-std::numeric_limits<double>::infinity());
      continue;
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size())
      throw ConfigError("bad --snr-db entry: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--snr-db needs at least one value");
  return out;
}

void add_run_flags(CLI::App* cmd, Flags& f, bool with_resume = true) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--seed", f.seed, "experiment seed");
  cmd->add_option("--snr-db", f.snr_db,
                  "comma-separated evaluation SNRs in dB (inf and -inf allowed)");
  cmd->add_option("--split", f.split, "cut the network after this pooling stage")
      ->check(CLI::Range(1, 5));
  cmd->add_option("--ratio", f.ratio, "fraction of device-side filters to prune")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--c-enc", f.c_enc, "encoder output channels");
  cmd->add_option("--out", f.out, "output directory");
  if (with_resume)
    cmd->add_flag("--resume", f.resume,
                  "continue from checkpoints already present in --out");
}

void add_format_flag(CLI::App* cmd, Flags& f) {
  cmd->add_option("--format", f.format, "stdout row format")
      ->check(CLI::IsMember({"csv", "json"}));
}

void apply_overrides(ExperimentConfig& cfg, const CLI::App* cmd,
                     const Flags& f) {
  if (cmd->count("--seed")) cfg.seed = f.seed;
  if (cmd->count("--snr-db")) cfg.snr_db_list = parse_snr_list(f.snr_db);
  if (cmd->count("--split")) cfg.split = f.split;
  if (cmd->count("--ratio")) cfg.pruning_ratio = f.ratio;
  if (cmd->count("--c-enc")) cfg.c_enc = f.c_enc;
  if (cmd->count("--out")) cfg.output_dir = f.out;
}

ExperimentConfig build_config(const CLI::App* cmd, const Flags& f) {
  ExperimentConfig cfg;
  if (cmd->count("--config")) cfg = config_from_file(f.config);
  apply_overrides(cfg, cmd, f);
  return cfg;
}

// Training verbs refuse to write into a directory that already holds run
// state unless the caller owns up to continuing it.
void guard_fresh(const ExperimentConfig& cfg, bool resume) {
  if (resume) return;
  const fs::path dir = cfg.output_dir;
  const fs::path ck = dir / "ck";
  const bool holds_state = (fs::exists(ck) && !fs::is_empty(ck)) ||
                           fs::exists(dir / "results.json");
  if (holds_state)
    throw ConfigError(
        "output directory '" + cfg.output_dir +
        "' already holds checkpoints or results; pass --resume to continue "
        "that run or point --out at a fresh directory");
}

void print_rows(const std::vector<ResultRow>& rows, const std::string& format,
                int bandwidth_reference) {
  if (rows.empty()) std::cerr << "warning: no result rows\n";
  if (format == "json") {
    std::cout << rows_json(rows) << "\n";
    return;
  }
  std::cout << csv_header() << "\n";
  for (const ResultRow& r : rows)
    std::cout << csv_line(r, bandwidth_reference) << "\n";
}

int run_sweep(const CLI::App* cmd, const Flags& f) {
  SweepGrid grid;
  if (cmd->count("--config"))
    grid = sweep_from_json(slurp(f.config, "config file"));
  apply_overrides(grid.base, cmd, f);
  guard_fresh(grid.base, f.resume);
  const SweepOutcome outcome = sweep(grid, &std::cerr);
  print_rows(outcome.rows, f.format, grid.base.bandwidth_reference);
  if (outcome.rows.empty() && !grid.base.output_dir.empty()) {
    const fs::path csv = fs::path(grid.base.output_dir) / "results.csv";
    if (!fs::exists(csv)) {
      fs::create_directories(grid.base.output_dir);
      write_csv({}, csv.string(), grid.base.bandwidth_reference);
    }
  }
  std::cerr << outcome.cells - outcome.failed_cells << "/" << outcome.cells
            << " cells succeeded\n";
  return outcome.failed_cells > 0 ? 3 : 0;
}

int run_frontier(const Flags& f) {
  const std::string dir = f.out.empty() ? std::string("runs") : f.out;
  const std::vector<StoredRow> stored = load_results(dir);
  std::vector<ResultRow> rows;
  rows.reserve(stored.size());
  for (const StoredRow& s : stored) rows.push_back(s.row);
  const std::string path = (fs::path(dir) / "frontier.csv").string();
  write_frontier(rows, f.floor, path);
  const std::string text = slurp(path, "frontier file");
  std::cout << text;
  if (std::count(text.begin(), text.end(), '\n') <= 1)
    std::cerr << "warning: empty frontier (no stored rows survive the "
                 "accuracy floor)\n";
  return 0;
}

int run_flops(const CLI::App* cmd, const Flags& f) {
  const ExperimentConfig cfg = normalized(build_config(cmd, f));
  BackboneConfig bb = cfg.backbone;
  bb.width_scale *= 1.0 - cfg.pruning_ratio;
  CodecConfig cc;
  cc.c_enc = cfg.c_enc;
  cc.identity = cfg.identity_codec;
  const FlopReport rep = device_flops_for(bb, SplitPoint{cfg.split}, cc);
  const int ch =
      bb.scaled(bb.blocks[static_cast<std::size_t>(cfg.split) - 1].first);
  const int side = 32 >> cfg.split;
  const int bw = bandwidth_for({ch, side, side}, cc);
  if (f.format == "json") {
    nlohmann::json j;
    j["per_layer"] = nlohmann::json::array();
    for (const LayerMacs& l : rep.per_layer)
      j["per_layer"].push_back(
          {{"name", l.name}, {"kind", l.kind}, {"macs", l.macs}});
    j["device_total"] = rep.device_total;
    j["bandwidth"] = bw;
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::cout << "layer,kind,macs\n";
  for (const LayerMacs& l : rep.per_layer)
    std::cout << l.name << "," << l.kind << "," << l.macs << "\n";
  std::cout << "device_total,," << rep.device_total << "\n";
  std::cout << "bandwidth,," << bw << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) try {
  CLI::App app{"split inference over a noisy channel: train, prune, evaluate"};
  app.require_subcommand(1);
  Flags f;

  CLI::App* cmd_pretrain = app.add_subcommand(
      "pretrain", "train the full backbone (phase 1) and checkpoint it");
  add_run_flags(cmd_pretrain, f);

  CLI::App* cmd_prune = app.add_subcommand(
      "prune", "phase 1 plus saliency-driven filter pruning (phase 2)");
  add_run_flags(cmd_prune, f);

  CLI::App* cmd_codec = app.add_subcommand(
      "codec", "phases 1-3: backbone, pruning, codec pretraining");
  add_run_flags(cmd_codec, f);

  CLI::App* cmd_e2e = app.add_subcommand(
      "e2e", "full pipeline, then score every requested SNR");
  add_run_flags(cmd_e2e, f);
  add_format_flag(cmd_e2e, f);

  CLI::App* cmd_eval = app.add_subcommand(
      "eval", "score SNR points from existing checkpoints, no training");
  add_run_flags(cmd_eval, f, /*with_resume=*/false);
  add_format_flag(cmd_eval, f);

  CLI::App* cmd_sweep = app.add_subcommand(
      "sweep", "run a cartesian grid of split/ratio/c_enc cells");
  add_run_flags(cmd_sweep, f);
  add_format_flag(cmd_sweep, f);

  CLI::App* cmd_frontier = app.add_subcommand(
      "frontier", "flops-vs-bandwidth pareto front of stored results");
  cmd_frontier->add_option("--out", f.out,
                           "run directory holding results.json");
  cmd_frontier->add_option("--floor", f.floor,
                           "keep rows within this accuracy drop from baseline");

  CLI::App* cmd_flops = app.add_subcommand(
      "flops", "analytic device-side cost for a configuration");
  cmd_flops->add_option("--config", f.config, "JSON config file");
  cmd_flops->add_option("--split", f.split,
                        "cut the network after this pooling stage")
      ->check(CLI::Range(1, 5));
  cmd_flops->add_option("--ratio", f.ratio,
                        "fraction of device-side filters to prune")
      ->check(CLI::Range(0.0, 1.0));
  cmd_flops->add_option("--c-enc", f.c_enc, "encoder output channels");
  add_format_flag(cmd_flops, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  if (*cmd_pretrain) {
    const ExperimentConfig cfg = build_config(cmd_pretrain, f);
    guard_fresh(cfg, f.resume);
    run_through(cfg, Stage::pretrain, &std::cerr);
    return 0;
  }
  if (*cmd_prune) {
    const ExperimentConfig cfg = build_config(cmd_prune, f);
    guard_fresh(cfg, f.resume);
    run_through(cfg, Stage::prune, &std::cerr);
    return 0;
  }
  if (*cmd_codec) {
    const ExperimentConfig cfg = build_config(cmd_codec, f);
    guard_fresh(cfg, f.resume);
    run_through(cfg, Stage::codec, &std::cerr);
    return 0;
  }
  if (*cmd_e2e) {
    const ExperimentConfig cfg = build_config(cmd_e2e, f);
    guard_fresh(cfg, f.resume);
    const std::vector<ResultRow> rows = run(cfg, &std::cerr);
    print_rows(rows, f.format, cfg.bandwidth_reference);
    return 0;
  }
  if (*cmd_eval) {
    const ExperimentConfig cfg = build_config(cmd_eval, f);
    const std::vector<ResultRow> rows = eval_only(cfg, &std::cerr);
    print_rows(rows, f.format, cfg.bandwidth_reference);
    return 0;
  }
  if (*cmd_sweep) return run_sweep(cmd_sweep, f);
  if (*cmd_frontier) return run_frontier(f);
  if (*cmd_flops) return run_flops(cmd_flops, f);
  return 0;
} catch (const ConfigError& e) {
  std::cerr << "config error: " << e.what() << "\n";
  return 1;
} catch (const std::exception& e) {
  std::cerr << "error: " << e.what() << "\n";
  return 2;
}
