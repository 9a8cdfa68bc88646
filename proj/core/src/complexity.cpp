#include "splitnn/complexity.hpp"

#include <algorithm>
#include <limits>

#include "splitnn/error.hpp"

namespace splitnn {

long long conv_macs(int in_ch, int out_ch, int kh, int kw, int out_h,
                    int out_w) {
  if (in_ch < 1 || out_ch < 1 || kh < 1 || kw < 1 || out_h < 1 || out_w < 1)
    throw ConfigError("conv_macs: dimensions must be positive");
  return 1LL * in_ch * out_ch * kh * kw * out_h * out_w;
}

namespace {

void walk(const Sequential& seq, Shape s, FlopReport& out) {
  for (const auto& layer : seq.layers()) {
    out.per_layer.push_back({layer->name(), layer->kind(), layer->macs(s)});
    out.device_total += out.per_layer.back().macs;
    s = layer->out_shape(s);
  }
}

}  // namespace

FlopReport device_flops(const SplitModel& m) {
  FlopReport out;
  walk(m.device_prefix(), {1, 3, 32, 32}, out);
  if (!m.identity_codec()) {
    const Shape& f = m.split_feature();
    walk(m.encoder(), {1, f[0], f[1], f[2]}, out);
  }
  return out;
}

FlopReport device_flops_for(const BackboneConfig& cfg, SplitPoint sp,
                            const CodecConfig& cc) {
  if (sp.pool_index < 1 || sp.pool_index > int(cfg.blocks.size()))
    throw ConfigError("pool_index out of range for this backbone");
  FlopReport out;
  auto add = [&](const std::string& name, const std::string& kind,
                 long long macs) {
    out.per_layer.push_back({name, kind, macs});
    out.device_total += macs;
  };

  int in_ch = 3, spatial = 32;
  for (int b = 0; b < sp.pool_index; ++b) {
    const auto [width, count] = cfg.blocks[size_t(b)];
    const int out_ch = cfg.scaled(width);
    const std::string bi = std::to_string(b + 1);
    for (int c = 1; c <= count; ++c) {
      const std::string ci = std::to_string(c);
      add("b" + bi + "c" + ci, "conv",
          conv_macs(in_ch, out_ch, 3, 3, spatial, spatial));
      const long long el = 1LL * out_ch * spatial * spatial;
      add("b" + bi + "n" + ci, "bn", 2 * el);
      add("b" + bi + "r" + ci, "relu", 2 * el);
      in_ch = out_ch;
    }
    add("pool" + bi, "pool", 0);
    spatial /= 2;
  }

  if (!cc.identity) {
    const int enc_spatial = spatial == 1 ? 1 : spatial / 2;
    add("enc_conv", "conv",
        conv_macs(in_ch, cc.c_enc, 3, 3, enc_spatial, enc_spatial));
    const long long el = 1LL * cc.c_enc * enc_spatial * enc_spatial;
    add("enc_gdn", "gdn", 2 * el);
    add("enc_act", "prelu", 2 * el);
  }
  return out;
}

std::map<int, long long> cumulative_split_macs(const Sequential& backbone,
                                               const Shape& input) {
  std::map<int, long long> out;
  Shape s = input;
  long long total = 0;
  int pool = 0;
  for (const auto& layer : backbone.layers()) {
    total += layer->macs(s);
    s = layer->out_shape(s);
    if (layer->kind() == "pool") out[++pool] = total;
  }
  return out;
}

std::vector<ResultRow> flops_vs_bandwidth_frontier(
    const std::vector<ResultRow>& rows, double accuracy_floor) {
  std::vector<ResultRow> kept;
  for (const auto& r : rows) {
    if (r.accuracy >= r.baseline_accuracy - accuracy_floor) kept.push_back(r);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const ResultRow& a, const ResultRow& b) {
                     if (a.device_flops != b.device_flops)
                       return a.device_flops < b.device_flops;
                     return a.bandwidth < b.bandwidth;
                   });
  std::vector<ResultRow> frontier;
  int best_bw = std::numeric_limits<int>::max();
  for (const auto& r : kept) {
    if (r.bandwidth < best_bw) {
      frontier.push_back(r);
      best_bw = r.bandwidth;
    }
  }
  return frontier;
}

}  // namespace splitnn
