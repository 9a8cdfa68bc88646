#include "splitnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace splitnn {

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

void set_grad_enabled(bool on) { g_grad_enabled = on; }

}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(detail::grad_enabled()) {
  detail::set_grad_enabled(false);
}

NoGradGuard::~NoGradGuard() { detail::set_grad_enabled(prev_); }

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::ones(const Shape& shape, bool requires_grad) {
  return full(shape, 1.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = shape;
  n->val.assign(static_cast<size_t>(numel_of(shape)), v);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return wrap(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return full({1}, v, requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values,
                    bool requires_grad) {
  if (numel_of(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = shape;
  n->val = std::move(values);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Tensor::wrap(std::move(n));
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a single-element tensor, got " +
                     shape_str(shape()));
  }
  return n_->val[0];
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = n_->shape;
  n->val = n_->val;
  return wrap(std::move(n));
}

Tensor Tensor::clone() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = n_->shape;
  n->val = n_->val;
  n->requires_grad = n_->requires_grad;
  if (n->requires_grad) n->ensure_grad();
  return wrap(std::move(n));
}

void Tensor::backward() {
  if (numel() != 1) {
    throw ShapeError("backward() must start from a scalar, got " +
                     shape_str(shape()));
  }
  // Iterative post-order DFS to get a reverse topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  struct Frame {
    detail::Node* node;
    size_t next_child;
  };
  std::vector<Frame> stack;
  if (n_->requires_grad) {
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.node->parents.size()) {
      detail::Node* child = f.node->parents[f.next_child++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  n_->ensure_grad();
  n_->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backprop) {
      node->backprop(*node);
    }
  }
}

Tensor make_op(const Shape& out_shape, std::vector<double> values,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backprop) {
  auto n = std::make_shared<detail::Node>();
  n->shape = out_shape;
  n->val = std::move(values);
  bool need_grad = false;
  if (detail::grad_enabled()) {
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        need_grad = true;
        break;
      }
    }
  }
  if (need_grad) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) {
      if (p.defined()) n->parents.push_back(p.node());
    }
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(n));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// ---- elementwise -----------------------------------------------------------

namespace {

// Grad accumulation helper: adds src into t's grad buffer.
void accum(const std::shared_ptr<detail::Node>& n, const std::vector<double>& src) {
  if (!n->requires_grad) return;
  n->ensure_grad();
  for (size_t i = 0; i < src.size(); ++i) n->grad[i] += src[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& o) {
    accum(an, o.grad);
    accum(bn, o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& o) {
    accum(an, o.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->val[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->val[i];
    }
  });
}

Tensor divt(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] / bn->val[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) {
        const double b2 = bn->val[i] * bn->val[i];
        bn->grad[i] -= o.grad[i] * an->val[i] / b2;
      }
    }
  });
}

namespace {

Tensor scalar_op(const Tensor& a, double b, EwOp op) {
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  switch (op) {
    case EwOp::Add:
      for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + b;
      break;
    case EwOp::Sub:
      for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - b;
      break;
    case EwOp::Mul:
      for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * b;
      break;
    case EwOp::Div:
      for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / b;
      break;
  }
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an, b, op](detail::Node& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    switch (op) {
      case EwOp::Add:
      case EwOp::Sub:
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        break;
      case EwOp::Mul:
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * b;
        break;
      case EwOp::Div:
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] / b;
        break;
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, double b) { return scalar_op(a, b, EwOp::Add); }
Tensor sub(const Tensor& a, double b) { return scalar_op(a, b, EwOp::Sub); }
Tensor mul(const Tensor& a, double b) { return scalar_op(a, b, EwOp::Mul); }
Tensor divt(const Tensor& a, double b) { return scalar_op(a, b, EwOp::Div); }

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case EwOp::Add: return add(a, b);
    case EwOp::Sub: return sub(a, b);
    case EwOp::Mul: return mul(a, b);
    case EwOp::Div: return divt(a, b);
  }
  throw ConfigError("unknown elementwise op");
}

Tensor elementwise(EwOp op, const Tensor& a, double b) {
  return scalar_op(a, b, op);
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor square(const Tensor& a) {
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an](detail::Node& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      an->grad[i] += o.grad[i] * 2.0 * an->val[i];
    }
  });
}

Tensor sqrt_t(const Tensor& a) {
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an](detail::Node& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      an->grad[i] += o.grad[i] * 0.5 / o.val[i];
    }
  });
}

Tensor abs_t(const Tensor& a) {
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(av[i]);
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an](detail::Node& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    // Subgradient 0 at the kink.
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const double x = an->val[i];
      an->grad[i] += o.grad[i] * (x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0));
    }
  });
}

Tensor clamp_min(const Tensor& a, double lo) {
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(av[i], lo);
  auto an = a.node();
  return make_op(a.shape(), std::move(out), {a}, [an, lo](detail::Node& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      if (an->val[i] > lo) an->grad[i] += o.grad[i];
    }
  });
}

// ---- reductions ------------------------------------------------------------

namespace {

void check_axes(const Tensor& a, const std::vector<int>& axes) {
  for (int ax : axes) {
    if (ax < 0 || ax >= a.ndim()) {
      throw ShapeError("reduce: axis " + std::to_string(ax) +
                       " invalid for shape " + shape_str(a.shape()));
    }
  }
}

}  // namespace

Tensor reduce(RedOp op, const Tensor& a, const std::vector<int>& axes) {
  check_axes(a, axes);
  std::vector<bool> reduced(a.ndim(), false);
  for (int ax : axes) reduced[static_cast<size_t>(ax)] = true;

  Shape out_shape;
  for (int i = 0; i < a.ndim(); ++i) {
    if (!reduced[static_cast<size_t>(i)]) out_shape.push_back(a.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Strides of the input, and the flat output index for each input element.
  const Shape& in_shape = a.shape();
  const int nd = a.ndim();
  std::vector<int64_t> in_stride(nd, 1);
  for (int i = nd - 2; i >= 0; --i) {
    in_stride[i] = in_stride[i + 1] * in_shape[i + 1];
  }
  std::vector<int64_t> out_stride_for_dim(nd, 0);
  {
    int64_t s = 1;
    for (int i = nd - 1; i >= 0; --i) {
      if (!reduced[static_cast<size_t>(i)]) {
        out_stride_for_dim[i] = s;
        s *= in_shape[i];
      }
    }
  }

  const int64_t out_n = numel_of(out_shape);
  const auto& av = a.values();
  const int64_t in_n = static_cast<int64_t>(av.size());
  int64_t group = 1;
  for (int i = 0; i < nd; ++i) {
    if (reduced[static_cast<size_t>(i)]) group *= in_shape[i];
  }

  // Map each input flat index to its output flat index.
  auto out_index = [&](int64_t flat) {
    int64_t rem = flat;
    int64_t oi = 0;
    for (int i = 0; i < nd; ++i) {
      const int64_t c = rem / in_stride[i];
      rem -= c * in_stride[i];
      oi += c * out_stride_for_dim[i];
    }
    return oi;
  };

  std::vector<double> out;
  switch (op) {
    case RedOp::Sum:
    case RedOp::Mean: {
      out.assign(static_cast<size_t>(out_n), 0.0);
      for (int64_t i = 0; i < in_n; ++i) out[static_cast<size_t>(out_index(i))] += av[static_cast<size_t>(i)];
      if (op == RedOp::Mean) {
        for (auto& v : out) v /= static_cast<double>(group);
      }
      break;
    }
    case RedOp::Max: {
      out.assign(static_cast<size_t>(out_n), -HUGE_VAL);
      for (int64_t i = 0; i < in_n; ++i) {
        auto& slot = out[static_cast<size_t>(out_index(i))];
        slot = std::max(slot, av[static_cast<size_t>(i)]);
      }
      break;
    }
  }

  if (op == RedOp::Max) {
    // Forward-only.
    return Tensor::from(out_shape, std::move(out));
  }

  auto an = a.node();
  const double scale = (op == RedOp::Mean) ? 1.0 / static_cast<double>(group) : 1.0;
  return make_op(out_shape, std::move(out), {a},
                 [an, in_stride, out_stride_for_dim, nd, scale](detail::Node& o) {
                   if (!an->requires_grad) return;
                   an->ensure_grad();
                   const int64_t n = static_cast<int64_t>(an->val.size());
                   for (int64_t i = 0; i < n; ++i) {
                     int64_t rem = i;
                     int64_t oi = 0;
                     for (int d = 0; d < nd; ++d) {
                       const int64_t c = rem / in_stride[d];
                       rem -= c * in_stride[d];
                       oi += c * out_stride_for_dim[d];
                     }
                     an->grad[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(oi)] * scale;
                   }
                 });
}

namespace {

std::vector<int> all_axes(const Tensor& a) {
  std::vector<int> axes(static_cast<size_t>(a.ndim()));
  for (int i = 0; i < a.ndim(); ++i) axes[static_cast<size_t>(i)] = i;
  return axes;
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce(RedOp::Sum, a, all_axes(a)); }
Tensor sum(const Tensor& a, const std::vector<int>& axes) {
  return reduce(RedOp::Sum, a, axes);
}
Tensor mean(const Tensor& a) { return reduce(RedOp::Mean, a, all_axes(a)); }
Tensor mean(const Tensor& a, const std::vector<int>& axes) {
  return reduce(RedOp::Mean, a, axes);
}

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  std::vector<double> out = a.values();
  auto an = a.node();
  return make_op(shape, std::move(out), {a}, [an](detail::Node& o) {
    accum(an, o.grad);
  });
}

Tensor flatten2(const Tensor& a) {
  if (a.ndim() < 2) {
    throw ShapeError("flatten2 needs at least 2 dims, got " + shape_str(a.shape()));
  }
  int64_t rest = 1;
  for (int i = 1; i < a.ndim(); ++i) rest *= a.dim(i);
  return reshape(a, {a.dim(0), static_cast<int>(rest)});
}

// ---- initialization --------------------------------------------------------

Tensor init(const Shape& shape, const InitScheme& scheme, Rng& rng,
            bool requires_grad) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  auto& v = t.values();
  switch (scheme.kind) {
    case InitScheme::Constant:
      std::fill(v.begin(), v.end(), scheme.value);
      break;
    case InitScheme::Normal:
      for (auto& x : v) x = rng.normal(scheme.mean, scheme.stddev);
      break;
    case InitScheme::KaimingNormal: {
      // fan_in: product of all dims after the first (conv: in_ch*kh*kw;
      // linear (dout, din): din).
      int64_t fan_in = 1;
      for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& x : v) x = rng.normal(0.0, stddev);
      break;
    }
  }
  return t;
}

// ---- gradient checking -----------------------------------------------------

namespace {

double check_coord(const std::function<Tensor(Tensor&)>& f, Tensor& x,
                   double eps, size_t i, double analytic) {
  auto& v = x.values();
  const double saved = v[i];
  NoGradGuard ng;
  v[i] = saved + eps;
  const double fp = f(x).item();
  v[i] = saved - eps;
  const double fm = f(x).item();
  v[i] = saved;
  if (!std::isfinite(fp) || !std::isfinite(fm)) {
    throw NumericError("grad_check: non-finite function value");
  }
  const double numeric = (fp - fm) / (2.0 * eps);
  return std::fabs(analytic - numeric) / std::max(1.0, std::fabs(analytic));
}

std::vector<double> analytic_grad(const std::function<Tensor(Tensor&)>& f,
                                  Tensor& x) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor y = f(x);
  if (!std::isfinite(y.item())) {
    throw NumericError("grad_check: non-finite function value");
  }
  y.backward();
  return x.grad();
}

}  // namespace

double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor x,
                  double eps) {
  const std::vector<double> g = analytic_grad(f, x);
  double worst = 0.0;
  for (size_t i = 0; i < x.values().size(); ++i) {
    worst = std::max(worst, check_coord(f, x, eps, i, g[i]));
  }
  return worst;
}

namespace {

// Central differences only estimate a derivative when f is smooth across the
// whole bracket [x-eps, x+eps]. Deep piecewise-smooth models (ReLU, maxpool,
// PReLU) put kinks everywhere, and a sampled coordinate occasionally lands
// with a kink inside its bracket, corrupting the estimate by the local slope
// jump no matter how small eps is. Such brackets are detectable: the eps and
// eps/2 estimates disagree (kink off-center), or the one-sided differences
// disagree (kink near the center). Smooth brackets pass both to O(eps^2) and
// O(eps*f'') respectively.
struct BracketProbe {
  double estimate = 0.0;  // eps/2 central difference (the more accurate one)
  bool smooth = false;
};

BracketProbe probe_coord(const std::function<Tensor(Tensor&)>& f, Tensor& x,
                         double eps, size_t i, double f0) {
  auto& v = x.values();
  const double saved = v[i];
  NoGradGuard ng;
  auto eval = [&](double d) {
    v[i] = saved + d;
    const double y = f(x).item();
    v[i] = saved;
    if (!std::isfinite(y))
      throw NumericError("grad_check: non-finite function value");
    return y;
  };
  const double fp = eval(eps), fm = eval(-eps);
  const double fph = eval(eps / 2), fmh = eval(-eps / 2);
  const double d1 = (fp - fm) / (2.0 * eps);
  const double d2 = (fph - fmh) / eps;
  const double fw = (fp - f0) / eps, bw = (f0 - fm) / eps;
  const double scale = std::max({1.0, std::fabs(d1), std::fabs(d2)});
  BracketProbe out;
  out.estimate = d2;
  // Thresholds sized so that an undetected kink can only contribute an error
  // below the 1e-3 acceptance level, while smooth curvature (eps*f'') stays
  // under them for any reasonable f''.
  out.smooth = std::fabs(d1 - d2) <= std::max(1e-6, 5e-4 * scale) &&
               std::fabs(fw - bw) <= std::max(1e-4, 1.5e-3 * scale);
  return out;
}

}  // namespace

double grad_check_sampled(const std::function<Tensor(Tensor&)>& f, Tensor x,
                          double eps, int n_coords, Rng& rng) {
  const std::vector<double> g = analytic_grad(f, x);
  const int n = static_cast<int>(x.values().size());
  double f0;
  {
    NoGradGuard ng;
    f0 = f(x).item();
  }
  double worst = 0.0;
  int accepted = 0;
  const int budget = 10 * n_coords;
  for (int k = 0; k < budget && accepted < n_coords; ++k) {
    const size_t i = static_cast<size_t>(rng.uniform_int(n));
    const BracketProbe p = probe_coord(f, x, eps, i, f0);
    if (!p.smooth) continue;  // kink in the bracket; resample
    ++accepted;
    worst = std::max(worst, std::fabs(g[i] - p.estimate) /
                                std::max(1.0, std::fabs(g[i])));
  }
  if (accepted == 0)
    throw NumericError("grad_check: no smooth brackets found to sample");
  return worst;
}

}  // namespace splitnn
