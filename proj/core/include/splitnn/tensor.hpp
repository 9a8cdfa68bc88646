#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "splitnn/error.hpp"
#include "splitnn/rng.hpp"

namespace splitnn {

// Dense double tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations record a tape:
// each result node keeps its parent handles alive plus a closure that
// propagates the node's grad into the parents. backward() from a scalar loss
// runs the closures once each in reverse topological order.
//
// Layout is row-major; feature maps use NCHW.

using Shape = std::vector<int>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated on first use, same length as val
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

bool grad_enabled();
void set_grad_enabled(bool on);

}  // namespace detail

// Disables tape construction for its scope (evaluation, oracles).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor ones(const Shape& shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values,
                     bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(n_->val.size()); }

  std::vector<double>& values() { return n_->val; }
  const std::vector<double>& values() const { return n_->val; }

  // Allocates (zeroed) on first access so the invariant
  // len(values) == len(grad) holds whenever grad is observable.
  std::vector<double>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<double>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    if (rg) n_->ensure_grad();
  }

  double item() const;

  // Reverse pass from a scalar. Visits each reachable node exactly once.
  void backward();

  void zero_grad() {
    n_->ensure_grad();
    std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  // Value copy with no tape history.
  Tensor detach() const;
  // Deep copy (leaf), preserving requires_grad.
  Tensor clone() const;

  std::shared_ptr<detail::Node> node() const { return n_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> n_;
};

// Assembles an op result: allocates the node, wires parents and the backward
// closure when grad mode is on and any parent requires grad.
Tensor make_op(const Shape& out_shape, std::vector<double> values,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backprop);

void check_same_shape(const char* op, const Tensor& a, const Tensor& b);

// ---- elementwise -----------------------------------------------------------

enum class EwOp { Add, Sub, Mul, Div };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor divt(const Tensor& a, double b);

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(EwOp op, const Tensor& a, double b);

Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

// ---- reductions ------------------------------------------------------------

enum class RedOp { Sum, Mean, Max };

// Reduces over the given axes (dropped from the output shape). Sum and Mean
// are differentiable; Max is forward-only.
Tensor reduce(RedOp op, const Tensor& a, const std::vector<int>& axes);
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<int>& axes);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, const std::vector<int>& axes);

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape);
// (N, d1, d2, ...) -> (N, d1*d2*...)
Tensor flatten2(const Tensor& a);

// ---- initialization --------------------------------------------------------

struct InitScheme {
  enum Kind { KaimingNormal, Normal, Constant } kind;
  double mean = 0.0;
  double stddev = 1.0;
  double value = 0.0;

  // Kaiming: std = sqrt(2 / fan_in); fan_in inferred from shape
  // (conv: in_ch*kh*kw, linear: columns).
  static InitScheme kaiming() { return {KaimingNormal, 0, 0, 0}; }
  static InitScheme normal(double mean, double stddev) {
    return {Normal, mean, stddev, 0};
  }
  static InitScheme constant(double v) { return {Constant, 0, 0, v}; }
};

Tensor init(const Shape& shape, const InitScheme& scheme, Rng& rng,
            bool requires_grad = true);

// ---- gradient checking -----------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued f. f must be deterministic across calls. Throws
// NumericError when f produces a non-finite value.
double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor x,
                  double eps);

// Same check restricted to n_coords seeded random coordinates; used where a
// full sweep is too expensive (end-to-end models).
double grad_check_sampled(const std::function<Tensor(Tensor&)>& f, Tensor x,
                          double eps, int n_coords, Rng& rng);

}  // namespace splitnn
