#pragma once

#include <map>
#include <string>
#include <vector>

#include "splitnn/model.hpp"
#include "splitnn/pruning.hpp"
#include "splitnn/training.hpp"

namespace splitnn {

inline constexpr int kCheckpointVersion = 1;

// One stored array: trainable parameter, BN running statistic, or any other
// named block of doubles.
struct TensorEntry {
  Shape shape;
  std::vector<double> data;
};

// Self-describing single-file training snapshot. The on-disk layout is a
// "SPCK1\0" magic, a 32-bit little-endian manifest length, a JSON manifest
// (shapes, offsets, per-block CRC32, run metadata), then the raw blocks as
// little-endian 64-bit floats. Round-tripping is bit-exact.
struct Checkpoint {
  int version = kCheckpointVersion;
  std::string phase;        // which pipeline stage produced this snapshot
  std::string config_json;  // opaque run configuration, stored verbatim
  PruneMask mask;           // empty layer list when nothing was pruned
  std::vector<EpochMetric> metrics;
  std::map<std::string, std::string> rng_states;
  std::map<std::string, std::vector<double>> velocities;  // optimizer state
  std::map<std::string, TensorEntry> tensors;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);

// Throws IoError on missing file, bad magic, version mismatch, truncation,
// or a block whose checksum does not match its bytes.
Checkpoint load_checkpoint(const std::string& path);

// Copies every trainable parameter plus the running statistics of every
// initialized BatchNorm layer into ck.tensors (stats under
// "stats/<layer>.running_mean" / ".running_var").
void capture_sequential(const Sequential& net, Checkpoint& ck);

// Assigns stored values back into an already-built net with the same
// structure. Entries the net does not have are ignored, so a backbone can be
// restored from a full split-model snapshot. Throws StateError when the net
// needs a tensor the checkpoint lacks and ShapeError on shape mismatch.
void restore_sequential(const Sequential& net, const Checkpoint& ck);

// Same, over all four pieces of a split model (prefix, codec, suffix).
void capture_split_model(const SplitModel& model, Checkpoint& ck);
void restore_split_model(SplitModel& model, const Checkpoint& ck);

// Guard for pipeline ordering: throws StateError unless ck.phase is one of
// allowed. `action` names the attempted step for the error message.
void require_phase(const Checkpoint& ck, const std::vector<std::string>& allowed,
                   const std::string& action);

}  // namespace splitnn
