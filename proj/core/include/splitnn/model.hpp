#pragma once

#include <utility>

#include "splitnn/channel.hpp"
#include "splitnn/layers.hpp"

namespace splitnn {

// VGG16-BN style backbone description. Widths can be scaled down uniformly for
// desk-scale experiments; every conv width (and the classifier hidden widths)
// goes through scaled(), which floors at 8 channels.
struct BackboneConfig {
  std::vector<std::pair<int, int>> blocks = {
      {64, 2}, {128, 2}, {256, 3}, {512, 3}, {512, 3}};  // (filters, convs)
  std::vector<int> classifier_hidden = {512, 512};
  int num_classes = 100;
  double width_scale = 1.0;

  int scaled(int width) const;
};

// The network is divided right after the pool_index-th pooling layer.
struct SplitPoint {
  int pool_index = 2;
};

struct CodecConfig {
  int c_enc = 8;        // encoder output channels; controls the bandwidth
  int max_c_enc = 512;  // guard against runaway configs
  bool identity = false;  // bypass the codec entirely (diagnostic mode)
};

// Number of real channel symbols per image. The stride-2 encoder halves each
// spatial dim, so B = (H/2)*(W/2)*c_enc; a 1x1 split feature cannot be
// downsampled, so there B = c_enc. Identity mode transmits the raw feature.
int bandwidth_for(const Shape& split_feature, const CodecConfig& cc);

Sequential build_backbone(const BackboneConfig& cfg, Rng& rng);

// Shape of the tensor crossing the split, for a given input shape (N,3,H,W).
Shape split_feature_shape(const Sequential& backbone, SplitPoint sp,
                          const Shape& input);

// Both halves share the backbone's layer objects; concatenating them
// reproduces the original forward exactly.
std::pair<Sequential, Sequential> split_at(const Sequential& backbone,
                                           SplitPoint sp);

// encoder: conv(s2 or s1 on 1x1, 3x3) -> GDN -> PReLU
// decoder: conv(s1) -> IGDN -> PReLU -> upsample2x (skipped for 1x1 splits)
//          -> conv(s1) -> BN -> PReLU, restoring the split channel count.
std::pair<Sequential, Sequential> build_codec(const Shape& split_feature,
                                              const CodecConfig& cc, Rng& rng);

// Device prefix -> encoder -> power normalization -> AWGN channel -> decoder
// -> server suffix. Differentiable end to end; the device half is
// deterministic (all randomness lives in the channel).
class SplitModel {
 public:
  SplitModel(Sequential prefix, Sequential encoder, Sequential decoder,
             Sequential suffix, AwgnChannel channel, Shape split_feature,
             bool identity_codec);

  // images (N,3,H,W) -> power-normalized symbols (N,B).
  Tensor forward_device(const Tensor& images, Mode mode);
  // symbols (N,B) -> logits (N,num_classes).
  Tensor forward_server(const Tensor& symbols, Mode mode);
  Tensor end_to_end(const Tensor& images, Mode mode);

  // Codec halves at the split-feature level, for training the codec on
  // extracted features: (N,C,H,W) -> (N,B) and (N,B) -> (N,C,H,W).
  Tensor encode_features(const Tensor& features, Mode mode);
  Tensor decode_symbols(const Tensor& symbols, Mode mode);

  Sequential& device_prefix() { return prefix_; }
  Sequential& encoder() { return encoder_; }
  Sequential& decoder() { return decoder_; }
  Sequential& server_suffix() { return suffix_; }
  const Sequential& device_prefix() const { return prefix_; }
  const Sequential& encoder() const { return encoder_; }
  const Sequential& decoder() const { return decoder_; }
  const Sequential& server_suffix() const { return suffix_; }

  AwgnChannel& channel() { return channel_; }
  const AwgnChannel& channel() const { return channel_; }
  void set_channel(AwgnChannel ch) { channel_ = std::move(ch); }

  const Shape& split_feature() const { return split_feature_; }  // (C,H,W)
  int bandwidth() const { return bandwidth_; }
  bool identity_codec() const { return identity_; }

  ParamList params() const;        // prefix + codec + suffix
  ParamList codec_params() const;  // encoder + decoder only
  void set_bn_stats_update(bool on) const;

 private:
  Sequential prefix_, encoder_, decoder_, suffix_;
  AwgnChannel channel_;
  Shape split_feature_;  // (C,H,W)
  Shape enc_out_;        // (C',H',W') entering the channel
  int bandwidth_;
  bool identity_;
};

// Convenience assembly from an already-built (possibly pruned) backbone.
SplitModel build_split_model(const Sequential& backbone, SplitPoint sp,
                             const CodecConfig& cc, double snr_db,
                             uint64_t noise_seed, Rng& rng);

}  // namespace splitnn
