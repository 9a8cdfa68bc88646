#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "splitnn/data.hpp"
#include "splitnn/layers.hpp"
#include "splitnn/model.hpp"
#include "splitnn/pruning.hpp"

namespace splitnn {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// Momentum SGD with decoupled-from-nothing classic L2: g' = g + wd*w,
// v <- m*v + g', w <- w - lr*v. Velocity buffers are keyed by parameter name
// so they can round-trip through checkpoints.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg);

  // One update from the gradients currently accumulated on the parameters.
  // Gradients are left in place; call zero_grads afterwards.
  void step(const ParamList& params);
  static void zero_grads(const ParamList& params);

  double lr() const { return cfg_.lr; }
  void set_lr(double lr);
  const SgdConfig& config() const { return cfg_; }

  std::map<std::string, std::vector<double>>& velocities() { return vel_; }
  const std::map<std::string, std::vector<double>>& velocities() const {
    return vel_;
  }

 private:
  SgdConfig cfg_;
  std::map<std::string, std::vector<double>> vel_;
};

// Piecewise-constant decay: lr = base * factor^(number of milestones passed),
// where a milestone m counts as passed when epoch >= m.
struct LrSchedule {
  double base = 0.01;
  double factor = 0.1;
  std::vector<int> milestones = {20, 40};

  double lr_at(int epoch) const;
};

struct Phase1Config {
  int epochs = 60;
  double lr = 0.01;
  double lr_factor = 0.1;
  std::vector<int> lr_drops = {20, 40};
};

struct Phase2Config {
  double target_ratio = 0.0;  // fraction of device-side filters to remove
  int n_remove = 512;         // per-iteration removal granule
  int finetune_epochs = 10;
  double finetune_lr = 1e-4;
  int saliency_batches = 10;
};

struct Phase3Config {
  int epochs = 40;
  double lr = 0.1;
};

struct Phase4Config {
  int epochs = 30;
  double lr = 1e-4;
};

struct PipelineConfig {
  Phase1Config phase1;
  Phase2Config phase2;
  Phase3Config phase3;
  Phase4Config phase4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 128;
  double snr_db = 20.0;
  uint64_t seed = 1;
};

// One logged row per epoch (or prune iteration). accuracy is -1 when the
// phase does not measure it; for phase3, loss is the L1 reconstruction loss.
struct EpochMetric {
  std::string phase;
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double accuracy = -1.0;
  long long flops = 0;
};

// Shared supervised loop: augmented batches, cross-entropy, momentum SGD;
// logs test accuracy per epoch when test is non-null.
std::vector<EpochMetric> train_backbone(Sequential& net, const Dataset& train,
                                        const Dataset* test, int epochs,
                                        const LrSchedule& sched,
                                        double momentum, double weight_decay,
                                        int batch_size, uint64_t seed,
                                        const std::string& phase_tag);

// Top-1 accuracy of a plain backbone in eval mode (no channel involved).
double backbone_accuracy(const Sequential& net, const Dataset& ds);

// Phase 1: supervised pretraining of the full backbone.
std::vector<EpochMetric> phase1_pretrain(Sequential& backbone,
                                         const Dataset& train,
                                         const Dataset& test,
                                         const PipelineConfig& cfg);

struct Phase2Result {
  Sequential backbone;  // pruned rebuild (the input when ratio is 0)
  std::vector<std::string> pruned_layers;
  // Per pruned layer: keep-vector indexed by original filter position,
  // composed across iterations.
  std::vector<std::vector<char>> cumulative_keep;
  std::vector<EpochMetric> trace;
};

// Phase 2: iterative filter removal until the target ratio is met.
Phase2Result phase2_prune(const Sequential& backbone, const Dataset& train,
                          SplitPoint split, const PipelineConfig& cfg);

// Phase 3: codec training on features from the frozen prefix, L1 objective
// through the channel. Only codec parameters move.
std::vector<EpochMetric> phase3_codec_pretrain(SplitModel& model,
                                               const Dataset& train,
                                               const PipelineConfig& cfg);

// Phase 4: joint training of every parameter with channel noise active;
// test accuracy at cfg.snr_db logged per epoch.
std::vector<EpochMetric> phase4_end_to_end(SplitModel& model,
                                           const Dataset& train,
                                           const Dataset& test,
                                           const PipelineConfig& cfg);

// Top-1 accuracy averaged over independent channel noise realizations; the
// model's own channel is saved and restored around the draws.
double evaluate(SplitModel& model, const Dataset& dataset, double snr_db,
                int n_noise_draws, uint64_t noise_seed = 0x5eed);

}  // namespace splitnn
