#include "splitnn/training.hpp"

#include <algorithm>
#include <cmath>

#include "splitnn/channel.hpp"
#include "splitnn/error.hpp"

namespace splitnn {

namespace {

uint64_t sub_seed(uint64_t seed, uint64_t stream) {
  Rng r = Rng::derive(seed, stream);
  return r.next_u64();
}

std::vector<std::vector<int>> fixed_batches(int n, int batch_size) {
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n; start += batch_size) {
    std::vector<int> b;
    for (int i = start; i < std::min(n, start + batch_size); ++i)
      b.push_back(i);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace

Sgd::Sgd(SgdConfig cfg) : cfg_(cfg) {
  if (cfg_.lr <= 0) throw ConfigError("learning rate must be positive");
  if (cfg_.momentum < 0 || cfg_.momentum >= 1)
    throw ConfigError("momentum must be in [0,1)");
  if (cfg_.weight_decay < 0)
    throw ConfigError("weight decay must be non-negative");
}

void Sgd::set_lr(double lr) {
  if (lr <= 0) throw ConfigError("learning rate must be positive");
  cfg_.lr = lr;
}

void Sgd::step(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;  // shared handle; updates land on the model
    auto& w = t.values();
    const auto& g = t.grad();
    auto& v = vel_[p.name];
    if (v.empty()) v.assign(w.size(), 0.0);
    if (v.size() != w.size())
      throw StateError("velocity buffer for " + p.name +
                       " does not match the parameter size");
    for (size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("non-finite gradient in parameter " + p.name);
      const double gp = g[i] + cfg_.weight_decay * w[i];
      v[i] = cfg_.momentum * v[i] + gp;
      w[i] -= cfg_.lr * v[i];
    }
  }
}

void Sgd::zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

double LrSchedule::lr_at(int epoch) const {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  double lr = base;
  for (int m : milestones)
    if (epoch >= m) lr *= factor;
  return lr;
}

double backbone_accuracy(const Sequential& net, const Dataset& ds) {
  if (ds.size() == 0) throw ConfigError("empty dataset");
  NoGradGuard ng;
  int hits = 0;
  for (const auto& idx : fixed_batches(ds.size(), 256)) {
    Tensor x = normalize_batch(ds.gather(idx), ds.stats);
    const std::vector<int> pred = argmax_rows(net.forward(x, Mode::Eval));
    const std::vector<int> truth = ds.gather_labels(idx);
    for (size_t i = 0; i < pred.size(); ++i)
      hits += pred[i] == truth[i] ? 1 : 0;
  }
  return double(hits) / double(ds.size());
}

std::vector<EpochMetric> train_backbone(Sequential& net, const Dataset& train,
                                        const Dataset* test, int epochs,
                                        const LrSchedule& sched,
                                        double momentum, double weight_decay,
                                        int batch_size, uint64_t seed,
                                        const std::string& phase_tag) {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  const ParamList params = net.params();
  Sgd opt({sched.lr_at(0), momentum, weight_decay});
  std::vector<EpochMetric> trace;
  const AugmentConfig aug_cfg;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    opt.set_lr(sched.lr_at(epoch));
    Rng order = Rng::derive(seed, 2 * static_cast<uint64_t>(epoch));
    Rng aug_rng = Rng::derive(seed, 2 * static_cast<uint64_t>(epoch) + 1);
    double loss_sum = 0;
    int n_batches = 0;
    for (const auto& idx : epoch_batches(train.size(), batch_size, order)) {
      Tensor x = augment(train.gather(idx), aug_cfg, train.stats, aug_rng);
      Tensor loss =
          cross_entropy(net.forward(x, Mode::Train), train.gather_labels(idx));
      loss.backward();
      opt.step(params);
      Sgd::zero_grads(params);
      loss_sum += loss.values()[0];
      ++n_batches;
    }
    EpochMetric m;
    m.phase = phase_tag;
    m.epoch = epoch;
    m.lr = opt.lr();
    m.loss = n_batches ? loss_sum / n_batches : 0.0;
    if (test) m.accuracy = backbone_accuracy(net, *test);
    trace.push_back(std::move(m));
  }
  return trace;
}

std::vector<EpochMetric> phase1_pretrain(Sequential& backbone,
                                         const Dataset& train,
                                         const Dataset& test,
                                         const PipelineConfig& cfg) {
  LrSchedule sched{cfg.phase1.lr, cfg.phase1.lr_factor, cfg.phase1.lr_drops};
  return train_backbone(backbone, train, &test, cfg.phase1.epochs, sched,
                        cfg.momentum, cfg.weight_decay, cfg.batch_size,
                        sub_seed(cfg.seed, 10), "phase1");
}

Phase2Result phase2_prune(const Sequential& backbone, const Dataset& train,
                          SplitPoint split, const PipelineConfig& cfg) {
  Phase2Result res;
  res.backbone = backbone;

  const auto prunable = prunable_filters(backbone, split);
  int total_orig = 0;
  for (const auto& [name, count] : prunable) total_orig += count;

  const double ratio = cfg.phase2.target_ratio;
  if (ratio < 0 || ratio >= 1)
    throw ConfigError("pruning ratio must be in [0,1)");
  const int need =
      static_cast<int>(std::ceil(ratio * total_orig - 1e-9));
  if (need == 0) return res;

  int removable = 0;
  for (const auto& [name, count] : prunable) removable += std::max(0, count - 1);
  if (need > removable)
    throw ConfigError("target ratio " + std::to_string(ratio) +
                      " would remove " + std::to_string(need) + " of " +
                      std::to_string(total_orig) +
                      " filters but only " + std::to_string(removable) +
                      " are removable under the per-layer floor");

  int granule = cfg.phase2.n_remove;
  if (granule < 1) throw ConfigError("n_remove must be >= 1");
  if (granule > removable)
    granule = std::min(granule, std::max(1, total_orig / 10));

  for (const auto& [name, count] : prunable) {
    res.pruned_layers.push_back(name);
    res.cumulative_keep.emplace_back(static_cast<size_t>(count), char(1));
  }
  // current filter position -> original index, per layer
  std::vector<std::vector<int>> origin;
  for (const auto& [name, count] : prunable) {
    std::vector<int> ids(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) ids[static_cast<size_t>(i)] = i;
    origin.push_back(std::move(ids));
  }

  int removed = 0, iter = 0;
  Sequential current = backbone;
  while (removed < need) {
    const int this_remove = std::min(granule, need - removed);
    FinetuneConfig fcfg;
    fcfg.epochs = cfg.phase2.finetune_epochs;
    fcfg.lr = cfg.phase2.finetune_lr;
    fcfg.momentum = cfg.momentum;
    fcfg.weight_decay = cfg.weight_decay;
    fcfg.batch_size = cfg.batch_size;
    fcfg.saliency_batches = cfg.phase2.saliency_batches;
    fcfg.seed = sub_seed(cfg.seed, 20 + static_cast<uint64_t>(iter));
    PruneStep step =
        prune_iteration(current, train, split, this_remove, fcfg);

    for (size_t l = 0; l < step.mask.keep.size(); ++l) {
      std::vector<int> next;
      for (size_t f = 0; f < step.mask.keep[l].size(); ++f) {
        const int orig = origin[l][f];
        if (step.mask.keep[l][f])
          next.push_back(orig);
        else
          res.cumulative_keep[l][static_cast<size_t>(orig)] = 0;
      }
      origin[l] = std::move(next);
    }

    current = step.backbone;
    removed += this_remove;
    ++iter;

    EpochMetric m;
    m.phase = "phase2";
    m.epoch = iter;
    m.lr = cfg.phase2.finetune_lr;
    m.loss = step.finetune_loss.empty() ? 0.0 : step.finetune_loss.back();
    m.flops = split_at(current, split).first.macs({1, 3, 32, 32});
    res.trace.push_back(std::move(m));
  }
  res.backbone = std::move(current);
  return res;
}

std::vector<EpochMetric> phase3_codec_pretrain(SplitModel& model,
                                               const Dataset& train,
                                               const PipelineConfig& cfg) {
  if (model.identity_codec()) return {};
  const ParamList params = model.codec_params();
  Sgd opt({cfg.phase3.lr, cfg.momentum, cfg.weight_decay});
  const uint64_t seed = sub_seed(cfg.seed, 30);
  std::vector<EpochMetric> trace;
  for (int epoch = 0; epoch < cfg.phase3.epochs; ++epoch) {
    Rng order = Rng::derive(seed, static_cast<uint64_t>(epoch));
    double loss_sum = 0;
    int n_batches = 0;
    for (const auto& idx :
         epoch_batches(train.size(), cfg.batch_size, order)) {
      Tensor features;
      {
        NoGradGuard ng;
        Tensor x = normalize_batch(train.gather(idx), train.stats);
        features = model.device_prefix().forward(x, Mode::Eval);
      }
      Tensor symbols = model.encode_features(features, Mode::Train);
      Tensor received = model.channel().transmit(symbols);
      Tensor rebuilt = model.decode_symbols(received, Mode::Train);
      Tensor loss = l1_loss(rebuilt, features);
      loss.backward();
      opt.step(params);
      Sgd::zero_grads(params);
      loss_sum += loss.values()[0];
      ++n_batches;
    }
    EpochMetric m;
    m.phase = "phase3";
    m.epoch = epoch;
    m.lr = opt.lr();
    m.loss = n_batches ? loss_sum / n_batches : 0.0;
    trace.push_back(std::move(m));
  }
  return trace;
}

std::vector<EpochMetric> phase4_end_to_end(SplitModel& model,
                                           const Dataset& train,
                                           const Dataset& test,
                                           const PipelineConfig& cfg) {
  const ParamList params = model.params();
  Sgd opt({cfg.phase4.lr, cfg.momentum, cfg.weight_decay});
  const uint64_t seed = sub_seed(cfg.seed, 40);
  const AugmentConfig aug_cfg;
  std::vector<EpochMetric> trace;
  for (int epoch = 0; epoch < cfg.phase4.epochs; ++epoch) {
    Rng order = Rng::derive(seed, 2 * static_cast<uint64_t>(epoch));
    Rng aug_rng = Rng::derive(seed, 2 * static_cast<uint64_t>(epoch) + 1);
    double loss_sum = 0;
    int n_batches = 0;
    for (const auto& idx :
         epoch_batches(train.size(), cfg.batch_size, order)) {
      Tensor x = augment(train.gather(idx), aug_cfg, train.stats, aug_rng);
      Tensor loss = cross_entropy(model.end_to_end(x, Mode::Train),
                                  train.gather_labels(idx));
      loss.backward();
      opt.step(params);
      Sgd::zero_grads(params);
      loss_sum += loss.values()[0];
      ++n_batches;
    }
    EpochMetric m;
    m.phase = "phase4";
    m.epoch = epoch;
    m.lr = opt.lr();
    m.loss = n_batches ? loss_sum / n_batches : 0.0;
    m.accuracy = evaluate(model, test, cfg.snr_db, 1,
                          sub_seed(cfg.seed, 50 + static_cast<uint64_t>(epoch)));
    trace.push_back(std::move(m));
  }
  return trace;
}

double evaluate(SplitModel& model, const Dataset& dataset, double snr_db,
                int n_noise_draws, uint64_t noise_seed) {
  if (dataset.size() == 0) throw ConfigError("empty dataset");
  if (n_noise_draws < 1)
    throw ConfigError("need at least one noise realization");
  const AwgnChannel saved = model.channel();
  NoGradGuard ng;
  double acc_sum = 0;
  for (int d = 0; d < n_noise_draws; ++d) {
    model.set_channel(
        AwgnChannel(snr_db, sub_seed(noise_seed, static_cast<uint64_t>(d))));
    int hits = 0;
    for (const auto& idx : fixed_batches(dataset.size(), 256)) {
      Tensor x = normalize_batch(dataset.gather(idx), dataset.stats);
      const std::vector<int> pred =
          argmax_rows(model.end_to_end(x, Mode::Eval));
      const std::vector<int> truth = dataset.gather_labels(idx);
      for (size_t i = 0; i < pred.size(); ++i)
        hits += pred[i] == truth[i] ? 1 : 0;
    }
    acc_sum += double(hits) / double(dataset.size());
  }
  model.set_channel(saved);
  return acc_sum / n_noise_draws;
}

}  // namespace splitnn
