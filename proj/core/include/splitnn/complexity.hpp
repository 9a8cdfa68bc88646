#pragma once

#include <map>
#include <vector>

#include "splitnn/model.hpp"
#include "splitnn/results.hpp"

namespace splitnn {

// All complexity numbers use the multiply-accumulate convention: one MAC per
// conv/linear multiply (bias folded in), 2 ops per element for
// normalization/activation layers, pooling and reshapes free.

struct LayerMacs {
  std::string name;
  std::string kind;
  long long macs = 0;
};

struct FlopReport {
  std::vector<LayerMacs> per_layer;
  long long device_total = 0;  // sum over device-side layers (prefix+encoder)
};

long long conv_macs(int in_ch, int out_ch, int kh, int kw, int out_h,
                    int out_w);

// Per-forward-pass MACs of the layers the device executes: the (possibly
// pruned) prefix plus the encoder. Identity-codec models count the prefix
// only.
FlopReport device_flops(const SplitModel& m);

// Same report computed from configuration arithmetic alone — no parameter
// tensors are allocated, so full-scale models cost nothing to account.
// width_scale doubles as the uniform-pruning knob: a ratio-r uniformly pruned
// device side is a width_scale (1-r) prefix.
FlopReport device_flops_for(const BackboneConfig& cfg, SplitPoint sp,
                            const CodecConfig& cc);

// Running MAC total of the backbone keyed by split point: entry k holds the
// cost of everything up to and including the k-th pool.
std::map<int, long long> cumulative_split_macs(const Sequential& backbone,
                                               const Shape& input);

// Rows within accuracy_floor of their baseline, reduced to the Pareto-minimal
// (device_flops, bandwidth) set, sorted by ascending flops. Empty input or
// nothing surviving the filter yields an empty frontier.
std::vector<ResultRow> flops_vs_bandwidth_frontier(
    const std::vector<ResultRow>& rows, double accuracy_floor);

}  // namespace splitnn
