#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "splitnn/model.hpp"
#include "splitnn/results.hpp"
#include "splitnn/training.hpp"

namespace splitnn {

// Where the experiment's images come from. "synthetic" builds a seeded blob
// dataset in memory; "cifar100" reads train.bin/test.bin from path.
struct DatasetSpec {
  std::string kind = "synthetic";
  std::string path;  // cifar100 root directory
  int classes = 4;
  int train_per_class = 500;
  int test_per_class = 100;
  double pixel_noise = 0.08;
  uint64_t seed = 7;  // generation seed, decoupled from the training seed
};

// Everything one experiment cell needs. The JSON schema mirrors the field
// names; json_to_config applies a (possibly partial) document on top of the
// defaults below, so config files only have to spell out what they change.
struct ExperimentConfig {
  DatasetSpec dataset;
  BackboneConfig backbone;  // num_classes is always overwritten from dataset
  int split = 2;
  double pruning_ratio = 0.0;  // fraction of device-side filters removed
  int c_enc = 8;
  bool identity_codec = false;  // diagnostic bypass: no codec, no channel fit
  std::vector<double> snr_db_list = {20.0};
  PipelineConfig pipeline;
  int eval_draws = 1;  // independent noise realizations averaged per row
  // Reference symbol count for the bandwidth-reduction column; defaults to
  // the raw pixel count of a 32x32 RGB image.
  int bandwidth_reference = 3072;
  uint64_t seed = 1;
  std::string output_dir = "runs";
};

// Copies the cross-field invariants into place: backbone.num_classes from the
// dataset, pipeline.seed from seed, pipeline.phase2.target_ratio from
// pruning_ratio. run() and sweep() call this themselves.
ExperimentConfig normalized(const ExperimentConfig& cfg);

// Applies a JSON document over cfg. Unknown keys raise ConfigError naming the
// key; so do value-domain violations (empty snr list, ratio outside [0,1)).
void apply_json(ExperimentConfig& cfg, const std::string& json_text);

ExperimentConfig config_from_file(const std::string& path);

// Canonical JSON for the normalized config: sorted keys, full field set.
std::string config_to_json(const ExperimentConfig& cfg);

// FNV-1a over the canonical JSON minus snr_db_list, output_dir, and
// bandwidth_reference: the identity of the trained artifact and its
// evaluation protocol, not of presentation choices. Rows are keyed by this
// hash plus snr_db.
uint64_t config_hash(const ExperimentConfig& cfg);

// Key under which the phase-1 checkpoint is shared: dataset, backbone,
// phase-1 hyperparameters, and seed. Sweep cells that differ only in split,
// ratio, codec, or SNR reuse one pretrained backbone.
uint64_t phase1_key(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Results persistence. results.json in the output directory is the
// authoritative store (it carries the row key); results.csv is appended in
// step for plotting. Both live under a single-writer discipline.

struct StoredRow {
  uint64_t key = 0;  // config_hash of the producing cell
  ResultRow row;
};

std::vector<StoredRow> load_results(const std::string& dir);
void save_results(const std::string& dir, const std::vector<StoredRow>& rows);

// CSV schema: split,ratio,c_enc,bandwidth,snr_db,accuracy,device_flops,
// baseline_accuracy,seed, then the derived digital_bits (capacity*B) and
// bandwidth_reduction (reference/B) columns.
std::string csv_header();
std::string csv_line(const ResultRow& r, int bandwidth_reference);

void write_csv(const std::vector<ResultRow>& rows, const std::string& path,
               int bandwidth_reference = 3072);
std::string rows_json(const std::vector<ResultRow>& rows);
void write_json(const std::vector<ResultRow>& rows, const std::string& path);

// Pareto frontier of (device_flops, bandwidth) over rows within
// accuracy_floor of their baseline, as plot-ready x=bandwidth,
// y=device_flops, series=split columns followed by the full row.
void write_frontier(const std::vector<ResultRow>& rows, double accuracy_floor,
                    const std::string& path);

// ---------------------------------------------------------------------------
// Orchestration.

// Runs the full pipeline for one cell and evaluates every SNR in the list.
// Phase products are checkpointed under <output_dir>/ck and reloaded when
// present, so a rerun after an interruption retrains nothing it already has
// and appends only the rows that are missing. Phase 2 is skipped at ratio 0;
// an identity-codec cell also skips phases 3-4 so its accuracy measures the
// bare split (the noiseless sanity configuration). Rows are flushed as they
// are produced; exceptions propagate to the caller after the flush.
// `log`, when non-null, receives one progress line per phase and row.
std::vector<ResultRow> run(const ExperimentConfig& cfg,
                           std::ostream* log = nullptr);

// Pipeline prefix for the stage-wise CLI verbs: stop after the named stage,
// training whatever earlier products are missing and checkpointing them.
// `prune` is a no-op at ratio 0, `codec` for an identity cell.
enum class Stage { pretrain, prune, codec, e2e };
void run_through(const ExperimentConfig& cfg, Stage upto,
                 std::ostream* log = nullptr);

// Like run(), but never trains: every phase product the cell needs must
// already be checkpointed, otherwise StateError says which step to run.
// Useful for scoring extra SNR points on a finished cell.
std::vector<ResultRow> eval_only(const ExperimentConfig& cfg,
                                 std::ostream* log = nullptr);

// Cartesian sweep over the grid axes with everything else taken from base.
// Empty axes fall back to the base value, cells share base.output_dir (one
// results file, shared phase-1 checkpoints), and a failing cell is logged and
// skipped instead of aborting the sweep.
struct SweepGrid {
  ExperimentConfig base;
  std::vector<int> splits;
  std::vector<double> ratios;
  std::vector<int> c_encs;
};

// Parses {"sweep": {"splits": [...], "ratios": [...], "c_encs": [...]}} plus
// the regular experiment fields for the base.
SweepGrid sweep_from_json(const std::string& json_text);

struct SweepOutcome {
  std::vector<ResultRow> rows;
  int cells = 0;
  int failed_cells = 0;
  std::vector<std::string> errors;  // one "<cell>: <what>" line per failure
};

SweepOutcome sweep(const SweepGrid& grid, std::ostream* log = nullptr);

}  // namespace splitnn
