#include "splitnn/harness.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "splitnn/checkpoint.hpp"
#include "splitnn/complexity.hpp"
#include "splitnn/data.hpp"
#include "splitnn/error.hpp"
#include "splitnn/pruning.hpp"
#include "splitnn/rng.hpp"

namespace splitnn {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kInf = std::numeric_limits<double>::infinity();

uint64_t sub(uint64_t seed, uint64_t stream) {
  return Rng::derive(seed, stream).next_u64();
}

// Shortest round-trip decimal form; "inf"/"-inf"/"nan" for non-finite.
std::string fmt(double v) {
  std::array<char, 32> buf;
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string hex16(uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof(b), "%016llx", static_cast<unsigned long long>(v));
  return std::string(b);
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// JSON has no non-finite numbers; they travel as strings.
json num_to_json(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double num_from_json(const json& j, const std::string& what) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return kInf;
    if (s == "-inf") return -kInf;
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw ConfigError(what + ": expected a number or \"inf\"/\"-inf\"/\"nan\"");
}

void check_keys(const json& j, const char* scope,
                std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        known = true;
        break;
      }
    }
    if (!known)
      throw ConfigError(std::string(scope) + ": unknown key \"" + item.key() +
                        "\"");
  }
}

void read_int(const json& j, const char* key, int& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer())
    throw ConfigError(std::string(key) + ": expected an integer");
  out = v.get<int>();
}

void read_u64(const json& j, const char* key, uint64_t& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0))
    throw ConfigError(std::string(key) + ": expected a non-negative integer");
  out = v.get<uint64_t>();
}

void read_num(const json& j, const char* key, double& out) {
  if (!j.contains(key)) return;
  out = num_from_json(j.at(key), key);
}

void read_bool(const json& j, const char* key, bool& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_boolean())
    throw ConfigError(std::string(key) + ": expected a boolean");
  out = v.get<bool>();
}

void read_str(const json& j, const char* key, std::string& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_string()) throw ConfigError(std::string(key) + ": expected a string");
  out = v.get<std::string>();
}

void read_ints(const json& j, const char* key, std::vector<int>& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array())
    throw ConfigError(std::string(key) + ": expected an array of integers");
  std::vector<int> vals;
  for (const json& e : v) {
    if (!e.is_number_integer())
      throw ConfigError(std::string(key) + ": expected an array of integers");
    vals.push_back(e.get<int>());
  }
  out = std::move(vals);
}

void read_nums(const json& j, const char* key, std::vector<double>& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array())
    throw ConfigError(std::string(key) + ": expected an array of numbers");
  std::vector<double> vals;
  for (const json& e : v) vals.push_back(num_from_json(e, key));
  out = std::move(vals);
}

void apply_dataset(const json& j, DatasetSpec& d) {
  check_keys(j, "dataset",
             {"kind", "path", "classes", "train_per_class", "test_per_class",
              "pixel_noise", "seed"});
  read_str(j, "kind", d.kind);
  read_str(j, "path", d.path);
  read_int(j, "classes", d.classes);
  read_int(j, "train_per_class", d.train_per_class);
  read_int(j, "test_per_class", d.test_per_class);
  read_num(j, "pixel_noise", d.pixel_noise);
  read_u64(j, "seed", d.seed);
}

void apply_pipeline(const json& j, PipelineConfig& p) {
  check_keys(j, "pipeline",
             {"batch_size", "momentum", "weight_decay", "train_snr_db",
              "phase1", "phase2", "phase3", "phase4"});
  read_int(j, "batch_size", p.batch_size);
  read_num(j, "momentum", p.momentum);
  read_num(j, "weight_decay", p.weight_decay);
  read_num(j, "train_snr_db", p.snr_db);
  if (j.contains("phase1")) {
    const json& q = j.at("phase1");
    check_keys(q, "phase1", {"epochs", "lr", "lr_factor", "lr_drops"});
    read_int(q, "epochs", p.phase1.epochs);
    read_num(q, "lr", p.phase1.lr);
    read_num(q, "lr_factor", p.phase1.lr_factor);
    read_ints(q, "lr_drops", p.phase1.lr_drops);
  }
  if (j.contains("phase2")) {
    const json& q = j.at("phase2");
    check_keys(q, "phase2",
               {"n_remove", "finetune_epochs", "finetune_lr",
                "saliency_batches"});
    read_int(q, "n_remove", p.phase2.n_remove);
    read_int(q, "finetune_epochs", p.phase2.finetune_epochs);
    read_num(q, "finetune_lr", p.phase2.finetune_lr);
    read_int(q, "saliency_batches", p.phase2.saliency_batches);
  }
  if (j.contains("phase3")) {
    const json& q = j.at("phase3");
    check_keys(q, "phase3", {"epochs", "lr"});
    read_int(q, "epochs", p.phase3.epochs);
    read_num(q, "lr", p.phase3.lr);
  }
  if (j.contains("phase4")) {
    const json& q = j.at("phase4");
    check_keys(q, "phase4", {"epochs", "lr"});
    read_int(q, "epochs", p.phase4.epochs);
    read_num(q, "lr", p.phase4.lr);
  }
}

json parse_object(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config JSON: expected an object");
  return j;
}

void apply_tree(const json& j, ExperimentConfig& cfg) {
  check_keys(j, "config",
             {"dataset", "backbone", "split", "pruning_ratio", "c_enc",
              "identity_codec", "snr_db_list", "pipeline", "eval_draws",
              "bandwidth_reference", "seed", "output_dir"});
  if (j.contains("dataset")) apply_dataset(j.at("dataset"), cfg.dataset);
  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    check_keys(b, "backbone", {"width_scale"});
    read_num(b, "width_scale", cfg.backbone.width_scale);
  }
  read_int(j, "split", cfg.split);
  read_num(j, "pruning_ratio", cfg.pruning_ratio);
  read_int(j, "c_enc", cfg.c_enc);
  read_bool(j, "identity_codec", cfg.identity_codec);
  read_nums(j, "snr_db_list", cfg.snr_db_list);
  if (j.contains("pipeline")) apply_pipeline(j.at("pipeline"), cfg.pipeline);
  read_int(j, "eval_draws", cfg.eval_draws);
  read_int(j, "bandwidth_reference", cfg.bandwidth_reference);
  read_u64(j, "seed", cfg.seed);
  read_str(j, "output_dir", cfg.output_dir);
}

// Canonical tree of a normalized config. Mirror fields (pipeline.seed,
// pipeline.phase2.target_ratio) are omitted: the top-level knobs own them.
json config_tree(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = {{"kind", cfg.dataset.kind},
                  {"path", cfg.dataset.path},
                  {"classes", cfg.dataset.classes},
                  {"train_per_class", cfg.dataset.train_per_class},
                  {"test_per_class", cfg.dataset.test_per_class},
                  {"pixel_noise", cfg.dataset.pixel_noise},
                  {"seed", cfg.dataset.seed}};
  j["backbone"] = {{"width_scale", cfg.backbone.width_scale},
                   {"num_classes", cfg.backbone.num_classes}};
  j["split"] = cfg.split;
  j["pruning_ratio"] = cfg.pruning_ratio;
  j["c_enc"] = cfg.c_enc;
  j["identity_codec"] = cfg.identity_codec;
  json snrs = json::array();
  for (double s : cfg.snr_db_list) snrs.push_back(num_to_json(s));
  j["snr_db_list"] = std::move(snrs);
  const PipelineConfig& p = cfg.pipeline;
  j["pipeline"] = {
      {"batch_size", p.batch_size},
      {"momentum", p.momentum},
      {"weight_decay", p.weight_decay},
      {"train_snr_db", num_to_json(p.snr_db)},
      {"phase1",
       {{"epochs", p.phase1.epochs},
        {"lr", p.phase1.lr},
        {"lr_factor", p.phase1.lr_factor},
        {"lr_drops", p.phase1.lr_drops}}},
      {"phase2",
       {{"n_remove", p.phase2.n_remove},
        {"finetune_epochs", p.phase2.finetune_epochs},
        {"finetune_lr", p.phase2.finetune_lr},
        {"saliency_batches", p.phase2.saliency_batches}}},
      {"phase3", {{"epochs", p.phase3.epochs}, {"lr", p.phase3.lr}}},
      {"phase4", {{"epochs", p.phase4.epochs}, {"lr", p.phase4.lr}}}};
  j["eval_draws"] = cfg.eval_draws;
  j["bandwidth_reference"] = cfg.bandwidth_reference;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  return j;
}

json row_to_json(const ResultRow& r) {
  json j;
  j["split"] = r.split;
  j["ratio"] = r.ratio;
  j["c_enc"] = r.c_enc;
  j["bandwidth"] = r.bandwidth;
  j["snr_db"] = num_to_json(r.snr_db);
  j["accuracy"] = r.accuracy;
  j["device_flops"] = r.device_flops;
  j["baseline_accuracy"] = r.baseline_accuracy;
  j["seed"] = r.seed;
  j["timings_s"] = r.timings_s;
  return j;
}

ResultRow row_from_json(const json& j) {
  ResultRow r;
  r.split = j.at("split").get<int>();
  r.ratio = j.at("ratio").get<double>();
  r.c_enc = j.at("c_enc").get<int>();
  r.bandwidth = j.at("bandwidth").get<int>();
  r.snr_db = num_from_json(j.at("snr_db"), "snr_db");
  r.accuracy = j.at("accuracy").get<double>();
  r.device_flops = j.at("device_flops").get<long long>();
  r.baseline_accuracy = j.at("baseline_accuracy").get<double>();
  r.seed = j.at("seed").get<uint64_t>();
  if (j.contains("timings_s"))
    r.timings_s = j.at("timings_s").get<std::map<std::string, double>>();
  return r;
}

void atomic_write(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f << text;
    f.flush();
    if (!f.good()) throw IoError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot rename " + tmp + " to " + path);
}

void append_csv_row(const fs::path& p, const ResultRow& r, int reference) {
  const bool fresh = !fs::exists(p) || fs::file_size(p) == 0;
  std::ofstream f(p, std::ios::binary | std::ios::app);
  if (!f) throw IoError("cannot open " + p.string() + " for appending");
  if (fresh) f << csv_header() << "\n";
  f << csv_line(r, reference) << "\n";
  f.flush();
  if (!f.good()) throw IoError("write failed: " + p.string());
}

std::pair<Dataset, Dataset> load_data(const DatasetSpec& d) {
  if (d.kind == "cifar100") return load_cifar100(d.path);
  return synthetic_pair(d.classes, d.train_per_class, d.test_per_class, d.seed,
                        d.pixel_noise);
}

}  // namespace

ExperimentConfig normalized(const ExperimentConfig& in) {
  ExperimentConfig cfg = in;
  if (cfg.dataset.kind == "synthetic") {
    if (cfg.dataset.classes < 2)
      throw ConfigError("dataset.classes must be >= 2");
    if (cfg.dataset.train_per_class < 1 || cfg.dataset.test_per_class < 1)
      throw ConfigError("dataset per-class counts must be >= 1");
    cfg.backbone.num_classes = cfg.dataset.classes;
  } else if (cfg.dataset.kind == "cifar100") {
    if (cfg.dataset.path.empty())
      throw ConfigError("dataset.path is required when dataset.kind is cifar100");
    cfg.backbone.num_classes = 100;
  } else {
    throw ConfigError("dataset.kind must be \"synthetic\" or \"cifar100\", got \"" +
                      cfg.dataset.kind + "\"");
  }
  if (cfg.split < 1 || cfg.split > 5)
    throw ConfigError("split must be in [1,5], got " + std::to_string(cfg.split));
  if (!(cfg.pruning_ratio >= 0.0 && cfg.pruning_ratio < 1.0))
    throw ConfigError("pruning_ratio must be in [0,1), got " +
                      fmt(cfg.pruning_ratio));
  if (cfg.c_enc < 1) throw ConfigError("c_enc must be >= 1");
  if (cfg.snr_db_list.empty()) throw ConfigError("snr_db_list must not be empty");
  if (cfg.eval_draws < 1) throw ConfigError("eval_draws must be >= 1");
  if (cfg.bandwidth_reference < 1)
    throw ConfigError("bandwidth_reference must be >= 1");
  if (cfg.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  cfg.pipeline.seed = cfg.seed;
  cfg.pipeline.phase2.target_ratio = cfg.pruning_ratio;
  return cfg;
}

void apply_json(ExperimentConfig& cfg, const std::string& json_text) {
  apply_tree(parse_object(json_text), cfg);
}

ExperimentConfig config_from_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  ExperimentConfig cfg;
  apply_json(cfg, ss.str());
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
  return config_tree(normalized(cfg)).dump(2);
}

uint64_t config_hash(const ExperimentConfig& cfg) {
  json j = config_tree(normalized(cfg));
  j.erase("snr_db_list");
  j.erase("output_dir");
  j.erase("bandwidth_reference");
  return fnv1a(j.dump());
}

uint64_t phase1_key(const ExperimentConfig& cfg) {
  const ExperimentConfig n = normalized(cfg);
  const json full = config_tree(n);
  json j;
  j["dataset"] = full.at("dataset");
  j["backbone"] = full.at("backbone");
  j["batch_size"] = n.pipeline.batch_size;
  j["momentum"] = n.pipeline.momentum;
  j["weight_decay"] = n.pipeline.weight_decay;
  j["phase1"] = full.at("pipeline").at("phase1");
  j["seed"] = n.seed;
  return fnv1a(j.dump());
}

std::vector<StoredRow> load_results(const std::string& dir) {
  const fs::path p = fs::path(dir) / "results.json";
  if (!fs::exists(p)) return {};
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  std::vector<StoredRow> out;
  try {
    const json j = json::parse(ss.str());
    for (const json& jr : j.at("rows")) {
      StoredRow s;
      s.key = jr.at("key").get<uint64_t>();
      s.row = row_from_json(jr);
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw IoError(p.string() + ": " + e.what());
  }
  return out;
}

void save_results(const std::string& dir, const std::vector<StoredRow>& rows) {
  json arr = json::array();
  for (const StoredRow& s : rows) {
    json jr = row_to_json(s.row);
    jr["key"] = s.key;
    arr.push_back(std::move(jr));
  }
  json j;
  j["rows"] = std::move(arr);
  atomic_write((fs::path(dir) / "results.json").string(), j.dump(2) + "\n");
}

std::string csv_header() {
  return "split,ratio,c_enc,bandwidth,snr_db,accuracy,device_flops,"
         "baseline_accuracy,seed,digital_bits,bandwidth_reduction";
}

std::string csv_line(const ResultRow& r, int bandwidth_reference) {
  std::ostringstream o;
  o << r.split << ',' << fmt(r.ratio) << ',' << r.c_enc << ',' << r.bandwidth
    << ',' << fmt(r.snr_db) << ',' << fmt(r.accuracy) << ',' << r.device_flops
    << ',' << fmt(r.baseline_accuracy) << ',' << r.seed << ','
    << fmt(capacity(r.snr_db) * r.bandwidth) << ','
    << fmt(static_cast<double>(bandwidth_reference) / r.bandwidth);
  return o.str();
}

void write_csv(const std::vector<ResultRow>& rows, const std::string& path,
               int bandwidth_reference) {
  std::string text = csv_header() + "\n";
  for (const ResultRow& r : rows) text += csv_line(r, bandwidth_reference) + "\n";
  atomic_write(path, text);
}

std::string rows_json(const std::vector<ResultRow>& rows) {
  json arr = json::array();
  for (const ResultRow& r : rows) arr.push_back(row_to_json(r));
  json j;
  j["rows"] = std::move(arr);
  return j.dump(2);
}

void write_json(const std::vector<ResultRow>& rows, const std::string& path) {
  atomic_write(path, rows_json(rows) + "\n");
}

void write_frontier(const std::vector<ResultRow>& rows, double accuracy_floor,
                    const std::string& path) {
  const std::vector<ResultRow> frontier =
      flops_vs_bandwidth_frontier(rows, accuracy_floor);
  std::string text = "x,y,series\n";
  for (const ResultRow& r : frontier) {
    text += std::to_string(r.bandwidth) + "," + std::to_string(r.device_flops) +
            ",split" + std::to_string(r.split) + "\n";
  }
  atomic_write(path, text);
}

namespace {

// In-flight pipeline for one cell: phase products appear as the ensure_*
// steps run, each either restored from its checkpoint or (train_missing)
// computed and checkpointed.
struct PipelineState {
  ExperimentConfig cfg;  // normalized
  uint64_t key = 0;
  fs::path out_dir;
  fs::path ck_dir;
  std::pair<Dataset, Dataset> data;
  std::map<std::string, double> timings;
  Sequential net;         // phase-1 backbone
  double baseline = 0.0;  // its unsplit test accuracy
  Sequential device_net;  // pruned backbone (== net at ratio 0)
  std::optional<SplitModel> model;
};

void note(const PipelineState& st, std::ostream* log, const std::string& s) {
  if (log) (*log) << "[" << hex16(st.key) << "] " << s << std::endl;
}

template <class F>
void timed(PipelineState& st, const std::string& tag, F&& fn) {
  using clk = std::chrono::steady_clock;
  const auto t0 = clk::now();
  fn();
  st.timings[tag] = std::chrono::duration<double>(clk::now() - t0).count();
}

PipelineState open_run(const ExperimentConfig& raw) {
  PipelineState st;
  st.cfg = normalized(raw);
  st.key = config_hash(st.cfg);
  st.out_dir = fs::path(st.cfg.output_dir);
  st.ck_dir = st.out_dir / "ck";
  std::error_code ec;
  fs::create_directories(st.ck_dir, ec);
  if (ec)
    throw IoError("cannot create " + st.ck_dir.string() + ": " + ec.message());
  if (st.cfg.dataset.kind == "cifar100" && !fs::exists(st.cfg.dataset.path))
    throw ConfigError("dataset.path does not exist: " + st.cfg.dataset.path);
  st.data = load_data(st.cfg.dataset);
  return st;
}

// Phase 1. The checkpoint is keyed by (dataset, backbone, phase-1
// hyperparameters, seed) so sweep cells share one pretrained backbone.
void ensure_phase1(PipelineState& st, bool train_missing, std::ostream* log) {
  const ExperimentConfig& cfg = st.cfg;
  const fs::path p1 = st.ck_dir / ("phase1_" + hex16(phase1_key(cfg)) + ".ck");
  Rng build_rng(sub(cfg.seed, 100));
  st.net = build_backbone(cfg.backbone, build_rng);
  if (fs::exists(p1)) {
    Checkpoint ck = load_checkpoint(p1.string());
    require_phase(ck, {"phase1"}, "reuse the pretrained backbone");
    restore_sequential(st.net, ck);
    note(st, log, "phase1: reusing " + p1.filename().string());
  } else if (train_missing) {
    note(st, log, "phase1: pretraining for " +
                      std::to_string(cfg.pipeline.phase1.epochs) + " epochs");
    std::vector<EpochMetric> trace;
    timed(st, "phase1", [&] {
      trace = phase1_pretrain(st.net, st.data.first, st.data.second,
                              cfg.pipeline);
    });
    Checkpoint ck;
    ck.phase = "phase1";
    ck.config_json = config_to_json(cfg);
    ck.metrics = std::move(trace);
    capture_sequential(st.net, ck);
    save_checkpoint(ck, p1.string());
  } else {
    throw StateError("pretrained backbone checkpoint missing (" +
                     p1.filename().string() + "); run pretrain or e2e first");
  }
  st.baseline = backbone_accuracy(st.net, st.data.second);
  note(st, log, "baseline accuracy " + fmt(st.baseline));
}

// Phase 2, skipped entirely at ratio 0 (device_net then shares the phase-1
// layers).
void ensure_phase2(PipelineState& st, bool train_missing, std::ostream* log) {
  const ExperimentConfig& cfg = st.cfg;
  st.device_net = st.net;
  if (cfg.pruning_ratio <= 0.0) return;
  const fs::path p2 = st.ck_dir / (hex16(st.key) + "_phase2.ck");
  if (fs::exists(p2)) {
    Checkpoint ck = load_checkpoint(p2.string());
    require_phase(ck, {"phase2"}, "reuse the pruned backbone");
    st.device_net = apply_prune(st.net, ck.mask);
    restore_sequential(st.device_net, ck);
    note(st, log, "phase2: reusing " + p2.filename().string());
  } else if (train_missing) {
    note(st, log, "phase2: pruning to ratio " + fmt(cfg.pruning_ratio));
    Phase2Result pr;
    timed(st, "phase2", [&] {
      pr = phase2_prune(st.net, st.data.first, SplitPoint{cfg.split},
                        cfg.pipeline);
    });
    st.device_net = std::move(pr.backbone);
    Checkpoint ck;
    ck.phase = "phase2";
    ck.config_json = config_to_json(cfg);
    ck.mask.layer_names = std::move(pr.pruned_layers);
    ck.mask.keep = std::move(pr.cumulative_keep);
    ck.metrics = std::move(pr.trace);
    capture_sequential(st.device_net, ck);
    save_checkpoint(ck, p2.string());
  } else {
    throw StateError("pruned backbone checkpoint missing (" +
                     p2.filename().string() + "); run prune or e2e first");
  }
}

void ensure_model(PipelineState& st) {
  const ExperimentConfig& cfg = st.cfg;
  CodecConfig cc;
  cc.c_enc = cfg.c_enc;
  cc.identity = cfg.identity_codec;
  Rng codec_rng(sub(cfg.seed, 101));
  st.model.emplace(build_split_model(st.device_net, SplitPoint{cfg.split}, cc,
                                     cfg.pipeline.snr_db, sub(cfg.seed, 102),
                                     codec_rng));
}

// Phases 3-4. An identity-codec cell skips both: it has no codec to fit, and
// leaving the backbone untouched is what makes it the noiseless sanity
// reference. The channel is reseeded at each phase boundary so a resumed run
// sees exactly the noise stream an uninterrupted one would.
void ensure_codec_phases(PipelineState& st, bool train_missing, bool want_e2e,
                         std::ostream* log) {
  const ExperimentConfig& cfg = st.cfg;
  if (cfg.identity_codec) return;
  SplitModel& model = *st.model;
  const fs::path p3 = st.ck_dir / (hex16(st.key) + "_phase3.ck");
  const fs::path p4 = st.ck_dir / (hex16(st.key) + "_phase4.ck");

  if (want_e2e && fs::exists(p4)) {
    Checkpoint ck = load_checkpoint(p4.string());
    require_phase(ck, {"phase4"}, "evaluate the end-to-end model");
    restore_split_model(model, ck);
    note(st, log, "phase4: reusing " + p4.filename().string());
    return;
  }

  if (fs::exists(p3)) {
    Checkpoint ck = load_checkpoint(p3.string());
    require_phase(ck, {"phase3"}, "run end-to-end training");
    restore_split_model(model, ck);
    note(st, log, "phase3: reusing " + p3.filename().string());
  } else if (train_missing) {
    note(st, log, "phase3: codec pretraining");
    model.channel().reseed(sub(cfg.seed, 103));
    std::vector<EpochMetric> trace;
    timed(st, "phase3", [&] {
      trace = phase3_codec_pretrain(model, st.data.first, cfg.pipeline);
    });
    Checkpoint ck;
    ck.phase = "phase3";
    ck.config_json = config_to_json(cfg);
    ck.metrics = std::move(trace);
    capture_split_model(model, ck);
    save_checkpoint(ck, p3.string());
  } else {
    throw StateError("codec checkpoint missing (" + p3.filename().string() +
                     "); run codec or e2e first");
  }

  if (!want_e2e) return;
  if (!train_missing)
    throw StateError("end-to-end checkpoint missing (" + p4.filename().string() +
                     "); run e2e first");
  note(st, log, "phase4: end-to-end training");
  model.channel().reseed(sub(cfg.seed, 104));
  std::vector<EpochMetric> trace;
  timed(st, "phase4", [&] {
    trace = phase4_end_to_end(model, st.data.first, st.data.second,
                              cfg.pipeline);
  });
  Checkpoint ck;
  ck.phase = "phase4";
  ck.config_json = config_to_json(cfg);
  ck.metrics = std::move(trace);
  capture_split_model(model, ck);
  save_checkpoint(ck, p4.string());
}

// Evaluation rows, keyed by (config hash, snr). Existing rows are returned
// as-is; new ones are flushed to results.json and results.csv one by one.
std::vector<ResultRow> emit_rows(PipelineState& st, std::ostream* log) {
  const ExperimentConfig& cfg = st.cfg;
  SplitModel& model = *st.model;
  const FlopReport flop_report = device_flops(model);
  std::vector<StoredRow> stored = load_results(cfg.output_dir);
  std::vector<ResultRow> out;
  for (double snr : cfg.snr_db_list) {
    const ResultRow* existing = nullptr;
    for (const StoredRow& s : stored) {
      if (s.key == st.key && s.row.snr_db == snr) {
        existing = &s.row;
        break;
      }
    }
    if (existing) {
      out.push_back(*existing);
      note(st, log, "row snr=" + fmt(snr) + ": already stored");
      continue;
    }
    ResultRow r;
    r.split = cfg.split;
    r.ratio = cfg.pruning_ratio;
    r.c_enc = cfg.c_enc;
    r.bandwidth = model.bandwidth();
    r.snr_db = snr;
    r.accuracy = evaluate(model, st.data.second, snr, cfg.eval_draws,
                          sub(cfg.seed, 105));
    r.device_flops = flop_report.device_total;
    r.baseline_accuracy = st.baseline;
    r.seed = cfg.seed;
    r.timings_s = st.timings;
    stored.push_back({st.key, r});
    save_results(cfg.output_dir, stored);
    append_csv_row(st.out_dir / "results.csv", r, cfg.bandwidth_reference);
    note(st, log, "row snr=" + fmt(snr) + " accuracy=" + fmt(r.accuracy));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ResultRow> run_impl(const ExperimentConfig& raw, bool train_missing,
                                std::ostream* log) {
  PipelineState st = open_run(raw);
  ensure_phase1(st, train_missing, log);
  ensure_phase2(st, train_missing, log);
  ensure_model(st);
  ensure_codec_phases(st, train_missing, /*want_e2e=*/true, log);
  return emit_rows(st, log);
}

}  // namespace

std::vector<ResultRow> run(const ExperimentConfig& raw, std::ostream* log) {
  return run_impl(raw, /*train_missing=*/true, log);
}

std::vector<ResultRow> eval_only(const ExperimentConfig& raw,
                                 std::ostream* log) {
  return run_impl(raw, /*train_missing=*/false, log);
}

void run_through(const ExperimentConfig& raw, Stage upto, std::ostream* log) {
  PipelineState st = open_run(raw);
  ensure_phase1(st, /*train_missing=*/true, log);
  if (upto == Stage::pretrain) return;
  ensure_phase2(st, /*train_missing=*/true, log);
  if (upto == Stage::prune) return;
  ensure_model(st);
  ensure_codec_phases(st, /*train_missing=*/true,
                      /*want_e2e=*/upto == Stage::e2e, log);
}

SweepGrid sweep_from_json(const std::string& json_text) {
  json j = parse_object(json_text);
  SweepGrid grid;
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    check_keys(s, "sweep", {"splits", "ratios", "c_encs"});
    read_ints(s, "splits", grid.splits);
    read_nums(s, "ratios", grid.ratios);
    read_ints(s, "c_encs", grid.c_encs);
    j.erase("sweep");
  }
  apply_tree(j, grid.base);
  return grid;
}

SweepOutcome sweep(const SweepGrid& grid, std::ostream* log) {
  const std::vector<int> splits =
      grid.splits.empty() ? std::vector<int>{grid.base.split} : grid.splits;
  const std::vector<double> ratios =
      grid.ratios.empty() ? std::vector<double>{grid.base.pruning_ratio}
                          : grid.ratios;
  const std::vector<int> c_encs =
      grid.c_encs.empty() ? std::vector<int>{grid.base.c_enc} : grid.c_encs;

  SweepOutcome out;
  for (int sp : splits) {
    for (double ratio : ratios) {
      for (int ce : c_encs) {
        ExperimentConfig cfg = grid.base;
        cfg.split = sp;
        cfg.pruning_ratio = ratio;
        cfg.c_enc = ce;
        ++out.cells;
        const std::string cell = "split=" + std::to_string(sp) +
                                 " ratio=" + fmt(ratio) +
                                 " c_enc=" + std::to_string(ce);
        if (log) (*log) << "sweep cell " << out.cells << ": " << cell << std::endl;
        try {
          const std::vector<ResultRow> rows = run(cfg, log);
          out.rows.insert(out.rows.end(), rows.begin(), rows.end());
        } catch (const std::exception& e) {
          ++out.failed_cells;
          out.errors.push_back(cell + ": " + e.what());
          if (log) (*log) << "sweep cell failed: " << out.errors.back() << std::endl;
        }
      }
    }
  }
  return out;
}

}  // namespace splitnn
