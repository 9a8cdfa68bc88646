#pragma once

#include <memory>
#include <string>
#include <vector>

#include "splitnn/rng.hpp"
#include "splitnn/tensor.hpp"

namespace splitnn {

enum class Mode { Train, Eval };

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

// ---- free functions (all differentiable unless noted) ----------------------

// x: (N,C,H,W); w: (OC,IC,KH,KW); b: (OC). Cross-correlation plus bias.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);

// x: (N,din); w: (dout,din); b: (dout).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(const Tensor& x);

// slope: (C), one learnable negative slope per channel (dim 1 of x).
Tensor prelu(const Tensor& x, const Tensor& slope);

// 2x2 window, stride 2; H and W must be even. Gradient goes to the first
// maximal element of each window in row-major order.
Tensor maxpool2x2(const Tensor& x);

// Each pixel replicated into a 2x2 block; backward sums the 4 replicas.
Tensor upsample_nearest2x(const Tensor& x);

// Running statistics live outside the parameter tensors: they are state, not
// learnable weights.
struct BnRunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  bool initialized = false;
};

// Train mode normalizes by batch statistics over (N,H,W) with population
// variance and, when update_stats is set, folds them into the running stats
// (momentum-weighted; first update copies directly). Eval mode uses running
// stats and throws StateError if none were ever recorded.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BnRunningStats& stats, Mode mode, bool update_stats,
                  double momentum = 0.1, double eps = 1e-5);

// Divisive normalization: u_i = w_i / (beta_i + sum_j gamma_ij w_j^2)^(1/2),
// per spatial position, channels coupled.
// Positivity is kept by reparameterization: the raw tensors are unconstrained
// and the effective parameters are beta = max(beta_raw, 1e-6)^2,
// gamma = gamma_raw^2. beta_raw: (C); gamma_raw: (C,C).
Tensor gdn(const Tensor& x, const Tensor& beta_raw, const Tensor& gamma_raw);

// Approximate inverse: w_i = u_i * (beta_i + sum_j gamma_ij u_j^2)^(1/2),
// same reparameterization.
Tensor igdn(const Tensor& x, const Tensor& beta_raw, const Tensor& gamma_raw);

// Row-wise softmax of (N,K) logits. Forward-only (the training loss has its
// own fused backward); used for prediction and diagnostics.
Tensor softmax(const Tensor& logits);

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Mean absolute difference; subgradient at zero difference is 0.
Tensor l1_loss(const Tensor& a, const Tensor& b);

// Row-wise argmax of (N,K) logits.
std::vector<int> argmax_rows(const Tensor& logits);

// ---- layer objects ---------------------------------------------------------

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual std::string kind() const = 0;
  virtual Shape out_shape(const Shape& in) const = 0;
  // Multiply-accumulate count for one forward pass at the given input shape.
  // Convention: conv = ic*oc*kh*kw*oh*ow (bias folded in), linear = din*dout,
  // normalization/activation = 2 per output element, pooling/reshape/upsample
  // free.
  virtual int64_t macs(const Shape& in) const = 0;
  virtual void collect_params(ParamList& out) {}

  const std::string& name() const { return name_; }

 protected:
  std::string name_;
};

class ConvLayer : public Layer {
 public:
  ConvLayer(std::string name, int in_ch, int out_ch, int stride, int pad,
            Rng& rng);
  // Adopts existing parameter tensors (pruned rebuilds, checkpoint loads).
  ConvLayer(std::string name, Tensor weight, Tensor bias, int stride, int pad);

  Tensor forward(const Tensor& x, Mode) override;
  std::string kind() const override { return "conv"; }
  Shape out_shape(const Shape& in) const override;
  int64_t macs(const Shape& in) const override;
  void collect_params(ParamList& out) override;

  int in_ch() const { return weight.dim(1); }
  int out_ch() const { return weight.dim(0); }
  int stride() const { return stride_; }
  int pad() const { return pad_; }

  Tensor weight;  // (OC,IC,3,3)
  Tensor bias;    // (OC)

 private:
  int stride_;
  int pad_;
};

class BatchNormLayer : public Layer {
 public:
  BatchNormLayer(std::string name, int channels);
  BatchNormLayer(std::string name, Tensor gamma, Tensor beta,
                 BnRunningStats stats);

  Tensor forward(const Tensor& x, Mode mode) override;
  std::string kind() const override { return "bn"; }
  Shape out_shape(const Shape& in) const override { return in; }
  int64_t macs(const Shape& in) const override;
  void collect_params(ParamList& out) override;

  int channels() const { return gamma.dim(0); }

  Tensor gamma;
  Tensor beta;
  BnRunningStats stats;
  // Saliency/oracle passes run train-mode forwards that must not disturb the
  // running statistics.
  bool update_stats = true;
};

class ReluLayer : public Layer {
 public:
  explicit ReluLayer(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, Mode) override { return relu(x); }
  std::string kind() const override { return "relu"; }
  Shape out_shape(const Shape& in) const override { return in; }
  int64_t macs(const Shape& in) const override { return 2 * numel_of(in); }
};

class PreluLayer : public Layer {
 public:
  PreluLayer(std::string name, int channels);
  PreluLayer(std::string name, Tensor slope);
  Tensor forward(const Tensor& x, Mode) override { return prelu(x, slope); }
  std::string kind() const override { return "prelu"; }
  Shape out_shape(const Shape& in) const override { return in; }
  int64_t macs(const Shape& in) const override { return 2 * numel_of(in); }
  void collect_params(ParamList& out) override;

  Tensor slope;  // (C)
};

class GdnLayer : public Layer {
 public:
  GdnLayer(std::string name, int channels, bool inverse);
  GdnLayer(std::string name, Tensor beta_raw, Tensor gamma_raw, bool inverse);
  Tensor forward(const Tensor& x, Mode) override;
  std::string kind() const override { return inverse_ ? "igdn" : "gdn"; }
  Shape out_shape(const Shape& in) const override { return in; }
  int64_t macs(const Shape& in) const override { return 2 * numel_of(in); }
  void collect_params(ParamList& out) override;

  bool inverse() const { return inverse_; }

  Tensor beta_raw;   // (C)
  Tensor gamma_raw;  // (C,C)

 private:
  bool inverse_;
};

class MaxPoolLayer : public Layer {
 public:
  explicit MaxPoolLayer(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, Mode) override { return maxpool2x2(x); }
  std::string kind() const override { return "pool"; }
  Shape out_shape(const Shape& in) const override;
  int64_t macs(const Shape&) const override { return 0; }
};

class UpsampleLayer : public Layer {
 public:
  explicit UpsampleLayer(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, Mode) override {
    return upsample_nearest2x(x);
  }
  std::string kind() const override { return "upsample"; }
  Shape out_shape(const Shape& in) const override;
  int64_t macs(const Shape&) const override { return 0; }
};

class FlattenLayer : public Layer {
 public:
  explicit FlattenLayer(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, Mode) override { return flatten2(x); }
  std::string kind() const override { return "flatten"; }
  Shape out_shape(const Shape& in) const override;
  int64_t macs(const Shape&) const override { return 0; }
};

class LinearLayer : public Layer {
 public:
  LinearLayer(std::string name, int din, int dout, Rng& rng,
              const InitScheme& scheme = InitScheme::kaiming());
  LinearLayer(std::string name, Tensor weight, Tensor bias);
  Tensor forward(const Tensor& x, Mode) override {
    return linear(x, weight, bias);
  }
  std::string kind() const override { return "linear"; }
  Shape out_shape(const Shape& in) const override;
  int64_t macs(const Shape& in) const override;
  void collect_params(ParamList& out) override;

  Tensor weight;  // (dout,din)
  Tensor bias;    // (dout)
};

// Ordered layer container; forward threads the tensor through every layer.
class Sequential {
 public:
  Sequential() = default;

  void add(std::shared_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  size_t size() const { return layers_.size(); }
  const std::shared_ptr<Layer>& at(size_t i) const { return layers_[i]; }
  std::shared_ptr<Layer>& at(size_t i) { return layers_[i]; }
  const std::vector<std::shared_ptr<Layer>>& layers() const { return layers_; }
  std::vector<std::shared_ptr<Layer>>& layers() { return layers_; }

  Tensor forward(const Tensor& x, Mode mode) const;
  Shape out_shape(Shape in) const;
  int64_t macs(Shape in) const;
  ParamList params() const;

  // Toggle running-stat updates on every contained BatchNormLayer.
  void set_bn_stats_update(bool on) const;

 private:
  std::vector<std::shared_ptr<Layer>> layers_;
};

}  // namespace splitnn
