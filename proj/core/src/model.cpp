#include "splitnn/model.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "splitnn/error.hpp"

namespace splitnn {

namespace {

Shape tail3(const Shape& s) {
  if (s.size() == 4) return {s[1], s[2], s[3]};
  if (s.size() == 3) return s;
  throw ShapeError("expected a (N,C,H,W) or (C,H,W) shape, got " +
                   shape_str(s));
}

void check_codec_cfg(const CodecConfig& cc) {
  if (cc.c_enc < 1) throw ConfigError("c_enc must be positive");
  if (cc.c_enc > cc.max_c_enc)
    throw ConfigError("c_enc " + std::to_string(cc.c_enc) +
                      " exceeds the configured max " +
                      std::to_string(cc.max_c_enc));
}

void check_split_spatial(int h, int w) {
  const bool unit = (h == 1 && w == 1);
  if (!unit && (h % 2 != 0 || w % 2 != 0))
    throw ShapeError("split feature spatial dims must be even or 1x1, got " +
                     std::to_string(h) + "x" + std::to_string(w));
}

}  // namespace

int BackboneConfig::scaled(int width) const {
  if (width_scale <= 0.0 || width_scale > 1.0)
    throw ConfigError("width_scale must be in (0,1]");
  const int w = static_cast<int>(std::lround(width * width_scale));
  return std::max(8, w);
}

int bandwidth_for(const Shape& split_feature, const CodecConfig& cc) {
  const Shape f = tail3(split_feature);
  const int c = f[0], h = f[1], w = f[2];
  if (cc.identity) return c * h * w;
  check_codec_cfg(cc);
  check_split_spatial(h, w);
  if (h == 1 && w == 1) return cc.c_enc;
  return (h / 2) * (w / 2) * cc.c_enc;
}

Sequential build_backbone(const BackboneConfig& cfg, Rng& rng) {
  if (cfg.blocks.empty()) throw ConfigError("backbone needs at least 1 block");
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be >= 2");

  Sequential net;
  int in_ch = 3;
  int spatial = 32;
  for (size_t b = 0; b < cfg.blocks.size(); ++b) {
    const auto [width, count] = cfg.blocks[b];
    if (width < 1 || count < 1) throw ConfigError("invalid block spec");
    const int out_ch = cfg.scaled(width);
    const std::string bi = std::to_string(b + 1);
    for (int c = 1; c <= count; ++c) {
      const std::string ci = std::to_string(c);
      net.add(std::make_shared<ConvLayer>("b" + bi + "c" + ci, in_ch, out_ch,
                                          1, 1, rng));
      net.add(std::make_shared<BatchNormLayer>("b" + bi + "n" + ci, out_ch));
      net.add(std::make_shared<ReluLayer>("b" + bi + "r" + ci));
      in_ch = out_ch;
    }
    net.add(std::make_shared<MaxPoolLayer>("pool" + bi));
    if (spatial % 2 != 0)
      throw ConfigError("too many blocks for a 32x32 input");
    spatial /= 2;
  }

  net.add(std::make_shared<FlattenLayer>("flatten"));
  int din = in_ch * spatial * spatial;
  for (size_t i = 0; i < cfg.classifier_hidden.size(); ++i) {
    const int dout = cfg.scaled(cfg.classifier_hidden[i]);
    const std::string fi = std::to_string(i + 1);
    net.add(std::make_shared<LinearLayer>("fc" + fi, din, dout, rng));
    net.add(std::make_shared<ReluLayer>("fcr" + fi));
    din = dout;
  }
  // Small-normal init on the logits layer keeps the starting cross-entropy
  // at ln(num_classes); hidden layers stay Kaiming so gradients still flow
  // at narrow widths.
  net.add(std::make_shared<LinearLayer>(
      "fc" + std::to_string(cfg.classifier_hidden.size() + 1), din,
      cfg.num_classes, rng, InitScheme::normal(0.0, 0.01)));
  return net;
}

namespace {

// Index of the layer right after the pool_index-th pool.
size_t split_position(const Sequential& backbone, SplitPoint sp) {
  if (sp.pool_index < 1)
    throw ConfigError("pool_index must be >= 1, got " +
                      std::to_string(sp.pool_index));
  int seen = 0;
  for (size_t i = 0; i < backbone.size(); ++i) {
    if (backbone.at(i)->kind() == "pool" && ++seen == sp.pool_index)
      return i + 1;
  }
  throw ConfigError("pool_index " + std::to_string(sp.pool_index) +
                    " exceeds the " + std::to_string(seen) +
                    " pooling layers present");
}

}  // namespace

Shape split_feature_shape(const Sequential& backbone, SplitPoint sp,
                          const Shape& input) {
  const size_t pos = split_position(backbone, sp);
  Shape s = input;
  for (size_t i = 0; i < pos; ++i) s = backbone.at(i)->out_shape(s);
  return s;
}

std::pair<Sequential, Sequential> split_at(const Sequential& backbone,
                                           SplitPoint sp) {
  const size_t pos = split_position(backbone, sp);
  Sequential prefix, suffix;
  for (size_t i = 0; i < pos; ++i) prefix.add(backbone.at(i));
  for (size_t i = pos; i < backbone.size(); ++i) suffix.add(backbone.at(i));
  return {std::move(prefix), std::move(suffix)};
}

std::pair<Sequential, Sequential> build_codec(const Shape& split_feature,
                                              const CodecConfig& cc,
                                              Rng& rng) {
  if (cc.identity) return {Sequential{}, Sequential{}};
  check_codec_cfg(cc);
  const Shape f = tail3(split_feature);
  const int c = f[0], h = f[1], w = f[2];
  check_split_spatial(h, w);
  const bool unit = (h == 1 && w == 1);
  const int stride = unit ? 1 : 2;

  Sequential enc;
  enc.add(std::make_shared<ConvLayer>("enc_conv", c, cc.c_enc, stride, 1, rng));
  enc.add(std::make_shared<GdnLayer>("enc_gdn", cc.c_enc, false));
  enc.add(std::make_shared<PreluLayer>("enc_act", cc.c_enc));

  Sequential dec;
  dec.add(std::make_shared<ConvLayer>("dec_conv1", cc.c_enc, cc.c_enc, 1, 1,
                                      rng));
  dec.add(std::make_shared<GdnLayer>("dec_igdn", cc.c_enc, true));
  dec.add(std::make_shared<PreluLayer>("dec_act1", cc.c_enc));
  if (!unit) dec.add(std::make_shared<UpsampleLayer>("dec_up"));
  dec.add(std::make_shared<ConvLayer>("dec_conv2", cc.c_enc, c, 1, 1, rng));
  dec.add(std::make_shared<BatchNormLayer>("dec_bn", c));
  dec.add(std::make_shared<PreluLayer>("dec_act2", c));
  return {std::move(enc), std::move(dec)};
}

SplitModel::SplitModel(Sequential prefix, Sequential encoder,
                       Sequential decoder, Sequential suffix,
                       AwgnChannel channel, Shape split_feature,
                       bool identity_codec)
    : prefix_(std::move(prefix)),
      encoder_(std::move(encoder)),
      decoder_(std::move(decoder)),
      suffix_(std::move(suffix)),
      channel_(std::move(channel)),
      split_feature_(tail3(split_feature)),
      identity_(identity_codec) {
  if (identity_) {
    enc_out_ = split_feature_;
  } else {
    Shape e = encoder_.out_shape({1, split_feature_[0], split_feature_[1],
                                  split_feature_[2]});
    enc_out_ = tail3(e);
    const Shape d = decoder_.out_shape(e);
    if (tail3(d) != split_feature_)
      throw ShapeError("decoder output " + shape_str(d) +
                       " does not match the split feature " +
                       shape_str(split_feature_));
  }
  bandwidth_ = enc_out_[0] * enc_out_[1] * enc_out_[2];
}

Tensor SplitModel::forward_device(const Tensor& images, Mode mode) {
  return encode_features(prefix_.forward(images, mode), mode);
}

Tensor SplitModel::forward_server(const Tensor& symbols, Mode mode) {
  return suffix_.forward(decode_symbols(symbols, mode), mode);
}

Tensor SplitModel::encode_features(const Tensor& features, Mode mode) {
  if (identity_) return flatten2(features);
  Tensor e = encoder_.forward(features, mode);
  return power_normalize(flatten2(e));
}

Tensor SplitModel::decode_symbols(const Tensor& symbols, Mode mode) {
  if (symbols.ndim() != 2 || symbols.dim(1) != bandwidth_)
    throw ShapeError("bandwidth mismatch: expected (N," +
                     std::to_string(bandwidth_) + ") symbols, got " +
                     shape_str(symbols.shape()));
  const int n = symbols.dim(0);
  Tensor f = reshape(symbols, {n, enc_out_[0], enc_out_[1], enc_out_[2]});
  if (!identity_) f = decoder_.forward(f, mode);
  return f;
}

Tensor SplitModel::end_to_end(const Tensor& images, Mode mode) {
  return forward_server(channel_.transmit(forward_device(images, mode)), mode);
}

ParamList SplitModel::params() const {
  ParamList out = prefix_.params();
  for (auto& p : encoder_.params()) out.push_back(p);
  for (auto& p : decoder_.params()) out.push_back(p);
  for (auto& p : suffix_.params()) out.push_back(p);
  return out;
}

ParamList SplitModel::codec_params() const {
  ParamList out = encoder_.params();
  for (auto& p : decoder_.params()) out.push_back(p);
  return out;
}

void SplitModel::set_bn_stats_update(bool on) const {
  prefix_.set_bn_stats_update(on);
  encoder_.set_bn_stats_update(on);
  decoder_.set_bn_stats_update(on);
  suffix_.set_bn_stats_update(on);
}

SplitModel build_split_model(const Sequential& backbone, SplitPoint sp,
                             const CodecConfig& cc, double snr_db,
                             uint64_t noise_seed, Rng& rng) {
  const Shape feat = split_feature_shape(backbone, sp, {1, 3, 32, 32});
  auto [prefix, suffix] = split_at(backbone, sp);
  auto [enc, dec] = build_codec(feat, cc, rng);
  return SplitModel(std::move(prefix), std::move(enc), std::move(dec),
                    std::move(suffix), AwgnChannel(snr_db, noise_seed), feat,
                    cc.identity);
}

}  // namespace splitnn
