#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "splitnn/data.hpp"
#include "splitnn/layers.hpp"
#include "splitnn/model.hpp"

namespace splitnn {

// A normalized scoring batch with aligned labels.
struct LabeledBatch {
  Tensor images;
  std::vector<int> labels;
};

// First-order importance of every output filter of the device-side convs,
// listed in model order. raw scores are non-negative; normalized scores have
// unit L2 norm within each layer.
struct FilterSaliency {
  std::vector<std::string> layer_names;
  std::vector<std::vector<double>> raw;
  std::vector<std::vector<double>> normalized;

  int total_filters() const;
};

// Keep-vector over output filters, one entry per prunable conv layer.
struct PruneMask {
  std::vector<std::string> layer_names;
  std::vector<std::vector<char>> keep;

  int removed() const;
  int kept() const;
};

// Names and output-filter counts of the convs before the split point, in
// model order.
std::vector<std::pair<std::string, int>> prunable_filters(
    const Sequential& backbone, SplitPoint split);

// Scores each device-side filter by the absolute batch/spatial mean of
// (post-activation value x its loss gradient), accumulated over batches and
// L2-normalized per layer. The model runs in train mode with running-stat
// updates suspended.
FilterSaliency taylor_saliency(const Sequential& backbone,
                               const std::vector<LabeledBatch>& batches,
                               SplitPoint split);

// Marks the n_remove globally lowest normalized scores for removal; ties
// break toward the earlier (layer, filter); every layer retains at least
// `floor` filters.
PruneMask select_filters(const FilterSaliency& s, int n_remove, int floor = 1);

// Rebuilds the network with masked filters deleted: each pruned conv loses
// the marked output filters, its BN loses the matching channels, and the
// first downstream consumer (conv or classifier linear) loses the matching
// input channels. Surviving weights and running stats are copied verbatim.
Sequential apply_prune(const Sequential& backbone, const PruneMask& mask);

// Exact loss change from zeroing one filter's post-activation channel,
// averaged over batches. Brute-force reference; guarded to small models.
double oracle_loss_delta(const Sequential& backbone, const std::string& layer,
                         int filter, const std::vector<LabeledBatch>& batches,
                         int64_t max_params = 2000000);

struct FinetuneConfig {
  int epochs = 10;
  double lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 128;
  int saliency_batches = 10;
  uint64_t seed = 1;
};

struct PruneStep {
  Sequential backbone;  // rebuilt without the removed filters
  PruneMask mask;       // what this step kept, indexed pre-step
  std::vector<double> finetune_loss;  // mean loss per recovery epoch
};

// One scoring/removal/recovery round: saliency on a seeded batch subset,
// global selection, structural rebuild, then a few recovery epochs.
PruneStep prune_iteration(const Sequential& backbone, const Dataset& train,
                          SplitPoint split, int n_remove,
                          const FinetuneConfig& cfg);

// Builds normalized (no augmentation) scoring batches from a seeded sample.
std::vector<LabeledBatch> saliency_batches(const Dataset& train, int n_batches,
                                           int batch_size, uint64_t seed);

}  // namespace splitnn
