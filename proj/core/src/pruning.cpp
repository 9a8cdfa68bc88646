#include "splitnn/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "splitnn/error.hpp"
#include "splitnn/training.hpp"

namespace splitnn {

namespace {

// Layer indices of the convs strictly before the split pool, plus a validity
// check on the split itself.
std::vector<size_t> prunable_conv_indices(const Sequential& backbone,
                                          SplitPoint split) {
  if (split.pool_index < 1) throw ConfigError("split pool index must be >= 1");
  std::vector<size_t> idx;
  int pools = 0;
  for (size_t i = 0; i < backbone.size(); ++i) {
    const auto& l = backbone.at(i);
    if (l->kind() == "pool") {
      if (++pools >= split.pool_index) break;
    } else if (l->kind() == "conv") {
      idx.push_back(i);
    }
  }
  if (pools < split.pool_index)
    throw ConfigError("split pool index beyond the last pooling layer");
  if (idx.empty())
    throw ConfigError("no prunable conv layers before the split point");
  return idx;
}

struct BnFlagGuard {
  explicit BnFlagGuard(const Sequential& net) {
    for (const auto& l : net.layers())
      if (auto* bn = dynamic_cast<BatchNormLayer*>(l.get())) {
        saved.emplace_back(bn, bn->update_stats);
        bn->update_stats = false;
      }
  }
  ~BnFlagGuard() {
    for (auto& [bn, flag] : saved) bn->update_stats = flag;
  }
  std::vector<std::pair<BatchNormLayer*, bool>> saved;
};

std::vector<int> keep_indices(const std::vector<char>& keep) {
  std::vector<int> out;
  for (size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.push_back(static_cast<int>(i));
  return out;
}

// Selects entries along dimension 0 (rows / output filters).
Tensor take_dim0(const Tensor& t, const std::vector<int>& idx) {
  Shape s = t.shape();
  size_t block = 1;
  for (size_t d = 1; d < s.size(); ++d) block *= static_cast<size_t>(s[d]);
  s[0] = static_cast<int>(idx.size());
  std::vector<double> vals;
  vals.reserve(idx.size() * block);
  for (int i : idx) {
    const double* src = t.values().data() + static_cast<size_t>(i) * block;
    vals.insert(vals.end(), src, src + block);
  }
  return Tensor::from(s, std::move(vals), t.requires_grad());
}

// Selects entries along dimension 1 (input channels / columns).
Tensor take_dim1(const Tensor& t, const std::vector<int>& idx) {
  Shape s = t.shape();
  const size_t d0 = static_cast<size_t>(s[0]);
  const size_t d1 = static_cast<size_t>(s[1]);
  size_t block = 1;
  for (size_t d = 2; d < s.size(); ++d) block *= static_cast<size_t>(s[d]);
  s[1] = static_cast<int>(idx.size());
  std::vector<double> vals;
  vals.reserve(d0 * idx.size() * block);
  for (size_t r = 0; r < d0; ++r)
    for (int i : idx) {
      const double* src =
          t.values().data() + (r * d1 + static_cast<size_t>(i)) * block;
      vals.insert(vals.end(), src, src + block);
    }
  return Tensor::from(s, std::move(vals), t.requires_grad());
}

std::vector<double> take_vec(const std::vector<double>& v,
                             const std::vector<int>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(v[static_cast<size_t>(i)]);
  return out;
}

// Per-filter mean of value*grad over batch and spatial positions.
void accumulate_scores(const Tensor& act, std::vector<double>& into) {
  const int n = act.dim(0), c = act.dim(1);
  const int hw = act.dim(2) * act.dim(3);
  const auto& v = act.values();
  const auto& g = act.grad();
  for (int f = 0; f < c; ++f) {
    double s = 0;
    for (int i = 0; i < n; ++i) {
      const size_t base = static_cast<size_t>(i * c + f) * static_cast<size_t>(hw);
      for (int p = 0; p < hw; ++p) s += v[base + static_cast<size_t>(p)] * g[base + static_cast<size_t>(p)];
    }
    into[static_cast<size_t>(f)] += std::abs(s / (double(n) * double(hw)));
  }
}

}  // namespace

std::vector<std::pair<std::string, int>> prunable_filters(
    const Sequential& backbone, SplitPoint split) {
  std::vector<std::pair<std::string, int>> out;
  for (size_t i : prunable_conv_indices(backbone, split)) {
    auto* c = static_cast<ConvLayer*>(backbone.at(i).get());
    out.emplace_back(c->name(), c->out_ch());
  }
  return out;
}

int FilterSaliency::total_filters() const {
  int n = 0;
  for (const auto& l : raw) n += static_cast<int>(l.size());
  return n;
}

int PruneMask::removed() const {
  int n = 0;
  for (const auto& l : keep)
    for (char k : l) n += k ? 0 : 1;
  return n;
}

int PruneMask::kept() const {
  int n = 0;
  for (const auto& l : keep)
    for (char k : l) n += k ? 1 : 0;
  return n;
}

FilterSaliency taylor_saliency(const Sequential& backbone,
                               const std::vector<LabeledBatch>& batches,
                               SplitPoint split) {
  if (batches.empty())
    throw ConfigError("taylor_saliency needs at least one batch");
  const std::vector<size_t> conv_idx = prunable_conv_indices(backbone, split);

  FilterSaliency s;
  for (size_t i : conv_idx) {
    auto* conv = static_cast<ConvLayer*>(backbone.at(i).get());
    s.layer_names.push_back(conv->name());
    s.raw.emplace_back(static_cast<size_t>(conv->out_ch()), 0.0);
  }

  BnFlagGuard freeze(backbone);
  for (const auto& batch : batches) {
    Tensor x = batch.images;
    std::vector<Tensor> acts(conv_idx.size());
    int pending = -1;  // prunable conv awaiting its activation
    size_t next_conv = 0;
    for (size_t i = 0; i < backbone.size(); ++i) {
      x = backbone.at(i)->forward(x, Mode::Train);
      if (next_conv < conv_idx.size() && i == conv_idx[next_conv]) {
        pending = static_cast<int>(next_conv);
        ++next_conv;
      } else if (backbone.at(i)->kind() == "relu" && pending >= 0) {
        acts[static_cast<size_t>(pending)] = x;
        pending = -1;
      }
    }
    Tensor loss = cross_entropy(x, batch.labels);
    loss.backward();
    for (size_t l = 0; l < acts.size(); ++l)
      accumulate_scores(acts[l], s.raw[l]);
  }
  for (auto& layer : s.raw)
    for (auto& v : layer) v /= static_cast<double>(batches.size());

  // Saliency passes must not leave stray gradient mass on the weights.
  for (auto& p : backbone.params()) p.tensor.zero_grad();

  for (const auto& layer : s.raw) {
    double norm = 0;
    for (double v : layer) norm += v * v;
    norm = std::sqrt(norm);
    std::vector<double> nl(layer);
    if (norm > 0)
      for (auto& v : nl) v /= norm;
    s.normalized.push_back(std::move(nl));
  }
  return s;
}

PruneMask select_filters(const FilterSaliency& s, int n_remove, int floor) {
  if (floor < 1) throw ConfigError("per-layer keep floor must be >= 1");
  if (n_remove < 0) throw ConfigError("n_remove must be >= 0");
  int removable = 0;
  for (const auto& layer : s.normalized)
    removable += std::max(0, static_cast<int>(layer.size()) - floor);
  if (n_remove > removable)
    throw ConfigError("n_remove " + std::to_string(n_remove) +
                      " exceeds the " + std::to_string(removable) +
                      " filters removable under the per-layer floor");

  struct Entry {
    double score;
    int layer;
    int filter;
  };
  std::vector<Entry> entries;
  for (size_t l = 0; l < s.normalized.size(); ++l)
    for (size_t f = 0; f < s.normalized[l].size(); ++f)
      entries.push_back(
          {s.normalized[l][f], static_cast<int>(l), static_cast<int>(f)});
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.filter < b.filter;
  });

  PruneMask mask;
  mask.layer_names = s.layer_names;
  std::vector<int> kept;
  for (const auto& layer : s.normalized) {
    mask.keep.emplace_back(layer.size(), char(1));
    kept.push_back(static_cast<int>(layer.size()));
  }
  int removed = 0;
  for (const auto& e : entries) {
    if (removed == n_remove) break;
    if (kept[static_cast<size_t>(e.layer)] > floor) {
      mask.keep[static_cast<size_t>(e.layer)][static_cast<size_t>(e.filter)] = 0;
      --kept[static_cast<size_t>(e.layer)];
      ++removed;
    }
  }
  return mask;
}

Sequential apply_prune(const Sequential& backbone, const PruneMask& mask) {
  if (mask.layer_names.size() != mask.keep.size())
    throw ConfigError("prune mask layer/keep arity mismatch");
  // name -> mask slot, with per-layer sanity checks deferred to the walk
  std::vector<char> used(mask.layer_names.size(), 0);
  auto mask_slot = [&](const std::string& name) -> int {
    for (size_t i = 0; i < mask.layer_names.size(); ++i)
      if (mask.layer_names[i] == name) return static_cast<int>(i);
    return -1;
  };

  Sequential out;
  std::vector<int> active;  // kept channel indices flowing downstream
  int active_orig = 0;      // channel count before pruning at that point
  for (const auto& l : backbone.layers()) {
    const std::string kind = l->kind();
    if (kind == "conv") {
      auto* c = static_cast<ConvLayer*>(l.get());
      Tensor w = c->weight;
      Tensor b = c->bias;
      if (!active.empty()) w = take_dim1(w, active);
      const int slot = mask_slot(c->name());
      if (slot >= 0) {
        const auto& keep = mask.keep[static_cast<size_t>(slot)];
        if (static_cast<int>(keep.size()) != c->out_ch())
          throw ConfigError("prune mask for " + c->name() + " has " +
                            std::to_string(keep.size()) + " entries but the layer has " +
                            std::to_string(c->out_ch()) + " filters");
        const std::vector<int> ki = keep_indices(keep);
        if (ki.empty())
          throw ConfigError("prune mask would empty layer " + c->name());
        w = take_dim0(w, ki);
        b = take_dim0(b, ki);
        active = ki;
        active_orig = static_cast<int>(keep.size());
        used[static_cast<size_t>(slot)] = 1;
      } else {
        active.clear();
      }
      out.add(std::make_shared<ConvLayer>(c->name(), w, b, c->stride(),
                                          c->pad()));
    } else if (kind == "bn") {
      auto* bn = static_cast<BatchNormLayer*>(l.get());
      Tensor gamma = bn->gamma;
      Tensor beta = bn->beta;
      BnRunningStats stats = bn->stats;
      if (!active.empty()) {
        gamma = take_dim0(gamma, active);
        beta = take_dim0(beta, active);
        if (stats.initialized) {
          stats.mean = take_vec(stats.mean, active);
          stats.var = take_vec(stats.var, active);
        }
      }
      auto nl = std::make_shared<BatchNormLayer>(bn->name(), gamma, beta,
                                                 std::move(stats));
      nl->update_stats = bn->update_stats;
      out.add(std::move(nl));
    } else if (kind == "prelu") {
      auto* p = static_cast<PreluLayer*>(l.get());
      Tensor slope = p->slope;
      if (!active.empty()) slope = take_dim0(slope, active);
      out.add(std::make_shared<PreluLayer>(p->name(), slope));
    } else if (kind == "linear") {
      auto* lin = static_cast<LinearLayer*>(l.get());
      Tensor w = lin->weight;
      if (!active.empty()) {
        // The input was flattened from (C,H,W): each surviving channel keeps
        // a contiguous block of H*W columns.
        const int din = w.dim(1);
        const int block = active_orig > 0 ? din / active_orig : 0;
        if (block <= 0 || din % active_orig != 0)
          throw ConfigError("cannot align pruned channels with " +
                            lin->name() + " input");
        std::vector<int> cols;
        for (int c : active)
          for (int k = 0; k < block; ++k) cols.push_back(c * block + k);
        w = take_dim1(w, cols);
        active.clear();
      }
      out.add(std::make_shared<LinearLayer>(lin->name(), w, lin->bias));
    } else if (kind == "relu") {
      out.add(std::make_shared<ReluLayer>(l->name()));
    } else if (kind == "pool") {
      out.add(std::make_shared<MaxPoolLayer>(l->name()));
    } else if (kind == "flatten") {
      out.add(std::make_shared<FlattenLayer>(l->name()));
    } else if (kind == "upsample") {
      out.add(std::make_shared<UpsampleLayer>(l->name()));
    } else if (kind == "gdn" || kind == "igdn") {
      auto* g = static_cast<GdnLayer*>(l.get());
      Tensor beta_raw = g->beta_raw;
      Tensor gamma_raw = g->gamma_raw;
      if (!active.empty()) {
        beta_raw = take_dim0(beta_raw, active);
        gamma_raw = take_dim1(take_dim0(gamma_raw, active), active);
      }
      out.add(std::make_shared<GdnLayer>(g->name(), beta_raw, gamma_raw,
                                         g->inverse()));
    } else {
      throw ConfigError("apply_prune: unhandled layer kind " + kind);
    }
  }
  for (size_t i = 0; i < used.size(); ++i)
    if (!used[i])
      throw ConfigError("prune mask names layer " + mask.layer_names[i] +
                        " which is not a conv in this model");
  return out;
}

double oracle_loss_delta(const Sequential& backbone, const std::string& layer,
                         int filter, const std::vector<LabeledBatch>& batches,
                         int64_t max_params) {
  int64_t n_params = 0;
  for (const auto& p : backbone.params()) n_params += p.tensor.numel();
  if (n_params > max_params)
    throw ConfigError("model has " + std::to_string(n_params) +
                      " parameters; the brute-force oracle is limited to " +
                      std::to_string(max_params));
  if (batches.empty()) throw ConfigError("oracle needs at least one batch");

  // Locate the target conv and the activation that follows it.
  int conv_at = -1, relu_at = -1;
  for (size_t i = 0; i < backbone.size(); ++i) {
    if (backbone.at(i)->kind() == "conv" &&
        backbone.at(i)->name() == layer) {
      conv_at = static_cast<int>(i);
      auto* c = static_cast<ConvLayer*>(backbone.at(i).get());
      if (filter < 0 || filter >= c->out_ch())
        throw ConfigError("filter index out of range for " + layer);
    } else if (conv_at >= 0 && backbone.at(i)->kind() == "relu") {
      relu_at = static_cast<int>(i);
      break;
    }
  }
  if (conv_at < 0) throw ConfigError("no conv layer named " + layer);
  if (relu_at < 0)
    throw ConfigError("no activation follows conv layer " + layer);

  NoGradGuard ng;
  BnFlagGuard freeze(backbone);
  auto run = [&](const LabeledBatch& b, bool zeroed) {
    Tensor x = b.images;
    for (size_t i = 0; i < backbone.size(); ++i) {
      x = backbone.at(i)->forward(x, Mode::Train);
      if (zeroed && static_cast<int>(i) == relu_at) {
        Tensor cut = Tensor::from(x.shape(), x.values());
        const int n = cut.dim(0), c = cut.dim(1);
        const int hw = cut.dim(2) * cut.dim(3);
        for (int img = 0; img < n; ++img) {
          const size_t base =
              static_cast<size_t>(img * c + filter) * static_cast<size_t>(hw);
          std::fill_n(cut.values().begin() + static_cast<long>(base), hw, 0.0);
        }
        x = cut;
      }
    }
    return cross_entropy(x, b.labels).values()[0];
  };

  double delta = 0;
  for (const auto& b : batches) delta += run(b, true) - run(b, false);
  return delta / static_cast<double>(batches.size());
}

std::vector<LabeledBatch> saliency_batches(const Dataset& train, int n_batches,
                                           int batch_size, uint64_t seed) {
  if (n_batches < 1 || batch_size < 1)
    throw ConfigError("need at least one scoring batch of at least one image");
  Rng rng = Rng::derive(seed, 0);
  const std::vector<int> perm = rng.permutation(train.size());
  std::vector<LabeledBatch> out;
  for (int b = 0; b < n_batches; ++b) {
    const size_t start = static_cast<size_t>(b) * static_cast<size_t>(batch_size);
    if (start >= perm.size()) break;
    const size_t end = std::min(perm.size(), start + static_cast<size_t>(batch_size));
    std::vector<int> idx(perm.begin() + static_cast<long>(start),
                         perm.begin() + static_cast<long>(end));
    out.push_back({normalize_batch(train.gather(idx), train.stats),
                   train.gather_labels(idx)});
  }
  return out;
}

PruneStep prune_iteration(const Sequential& backbone, const Dataset& train,
                          SplitPoint split, int n_remove,
                          const FinetuneConfig& cfg) {
  const auto batches =
      saliency_batches(train, cfg.saliency_batches, cfg.batch_size, cfg.seed);
  const FilterSaliency sal = taylor_saliency(backbone, batches, split);
  PruneMask mask = select_filters(sal, n_remove);
  Sequential pruned = apply_prune(backbone, mask);

  LrSchedule flat{cfg.lr, 1.0, {}};
  Rng sub = Rng::derive(cfg.seed, 1);
  const auto trace =
      train_backbone(pruned, train, nullptr, cfg.epochs, flat, cfg.momentum,
                     cfg.weight_decay, cfg.batch_size, sub.next_u64(),
                     "prune-finetune");
  PruneStep step;
  step.backbone = std::move(pruned);
  step.mask = std::move(mask);
  for (const auto& m : trace) step.finetune_loss.push_back(m.loss);
  return step;
}

}  // namespace splitnn
