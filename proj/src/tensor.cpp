#include "xdc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <unordered_set>

#include "xdc/error.hpp"

namespace xdc {

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

bool finite_checks_enabled() {
  static const bool on = [] {
    const char* v = std::getenv("XDC_CHECK_FINITE");
    return v && *v && std::string(v) != "0";
  }();
  return on;
}

namespace {

std::shared_ptr<Node> leaf(const Shape& shape, std::vector<double> v, bool rg) {
  if (shape.size() > 3) fail(Errc::ShapeMismatch, "rank above 3: " + shape_str(shape));
  if (numel(shape) != v.size()) fail(Errc::ShapeMismatch, "data length does not match " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(v);
  n->requires_grad = rg;
  return n;
}

// Builds an op result. Parents and the closure are kept only when a gradient is needed.
Tensor make(const Shape& shape, std::vector<double> v, std::initializer_list<const Tensor*> parents,
            std::function<void(Node&)> bw) {
  auto n = leaf(shape, std::move(v), false);
  if (finite_checks_enabled())
    for (double x : n->value)
      if (!std::isfinite(x)) fail(Errc::NonFiniteInput, "op produced a non-finite value");
  for (const Tensor* p : parents)
    if (p->requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (const Tensor* p : parents) n->parents.push_back(p->ptr());
    n->backward = std::move(bw);
  }
  return Tensor(n);
}

Tensor make_n(const Shape& shape, std::vector<double> v, const std::vector<Tensor>& parents,
              std::function<void(Node&)> bw) {
  auto n = leaf(shape, std::move(v), false);
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(bw);
  }
  return Tensor(n);
}

bool is_one(const Tensor& t) { return t.size() == 1; }

void require_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape() && !is_one(a) && !is_one(b))
    fail(Errc::ShapeMismatch, std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// out shape for a binary op with scalar broadcast
const Shape& binary_shape(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  return is_one(a) ? b.shape() : a.shape();
}

template <typename F>
Tensor unary(const Tensor& a, F f, std::function<void(Node&)> bw) {
  std::vector<double> v(a.size());
  const auto& x = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(x[i]);
  return make(a.shape(), std::move(v), {&a}, std::move(bw));
}

// elementwise backward helper: grad_in += dy * d(x, y)
template <typename D>
std::function<void(Node&)> unary_bw(D d) {
  return [d](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += self.grad[i] * d(p.value[i], self.value[i]);
  };
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) fail(Errc::UnsupportedAxis, "axis " + std::to_string(axis) + " for shape " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool rg) { return Tensor(leaf(shape, std::vector<double>(numel(shape), 0.0), rg)); }
Tensor Tensor::full(const Shape& shape, double v, bool rg) {
  return Tensor(leaf(shape, std::vector<double>(numel(shape), v), rg));
}
Tensor Tensor::from(const Shape& shape, std::vector<double> data, bool rg) { return Tensor(leaf(shape, std::move(data), rg)); }
Tensor Tensor::scalar(double v, bool rg) { return Tensor(leaf({1}, {v}, rg)); }
Tensor Tensor::randn(const Shape& shape, double stddev, std::mt19937_64& rng, bool rg) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = nd(rng);
  return Tensor(leaf(shape, std::move(v), rg));
}

std::vector<double>& Tensor::grad() {
  node_->g();
  return node_->grad;
}

double Tensor::item() const {
  if (size() != 1) fail(Errc::ShapeMismatch, "item() on " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(leaf(shape(), data(), false)); }

void Tensor::backward() {
  if (size() != 1) fail(Errc::ShapeMismatch, "backward() needs a scalar root, got " + shape_str(shape()));
  if (!node_->requires_grad) return;
  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->g()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // free interior buffers; leaves keep theirs
  for (Node* n : order)
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
}

// ---- ops -----------------------------------------------------------------------

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
  require_binary(a, b, "add");
  const Shape& s = binary_shape(a, b);
  const std::size_t n = numel(s);
  std::vector<double> v(n);
  const bool a1 = a.size() == 1 && n != 1, b1 = b.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) v[i] = a[a1 ? 0 : i] + b[b1 ? 0 : i];
  return make(s, std::move(v), {&a, &b}, [a1, b1](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[static_cast<std::size_t>(k)];
      if (!p.requires_grad) continue;
      double* g = p.g();
      const bool one = k == 0 ? a1 : b1;
      for (std::size_t i = 0; i < self.value.size(); ++i) g[one ? 0 : i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_binary(a, b, "sub");
  const Shape& s = binary_shape(a, b);
  const std::size_t n = numel(s);
  std::vector<double> v(n);
  const bool a1 = a.size() == 1 && n != 1, b1 = b.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) v[i] = a[a1 ? 0 : i] - b[b1 ? 0 : i];
  return make(s, std::move(v), {&a, &b}, [a1, b1](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[static_cast<std::size_t>(k)];
      if (!p.requires_grad) continue;
      double* g = p.g();
      const bool one = k == 0 ? a1 : b1;
      const double sign = k == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < self.value.size(); ++i) g[one ? 0 : i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_binary(a, b, "mul");
  const Shape& s = binary_shape(a, b);
  const std::size_t n = numel(s);
  std::vector<double> v(n);
  const bool a1 = a.size() == 1 && n != 1, b1 = b.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) v[i] = a[a1 ? 0 : i] * b[b1 ? 0 : i];
  return make(s, std::move(v), {&a, &b}, [a1, b1](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      double* g = pa.g();
      for (std::size_t i = 0; i < self.value.size(); ++i) g[a1 ? 0 : i] += self.grad[i] * pb.value[b1 ? 0 : i];
    }
    if (pb.requires_grad) {
      double* g = pb.g();
      for (std::size_t i = 0; i < self.value.size(); ++i) g[b1 ? 0 : i] += self.grad[i] * pa.value[a1 ? 0 : i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_binary(a, b, "div");
  const Shape& s = binary_shape(a, b);
  const std::size_t n = numel(s);
  std::vector<double> v(n);
  const bool a1 = a.size() == 1 && n != 1, b1 = b.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) v[i] = a[a1 ? 0 : i] / b[b1 ? 0 : i];
  return make(s, std::move(v), {&a, &b}, [a1, b1](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      double* g = pa.g();
      for (std::size_t i = 0; i < self.value.size(); ++i) g[a1 ? 0 : i] += self.grad[i] / pb.value[b1 ? 0 : i];
    }
    if (pb.requires_grad) {
      double* g = pb.g();
      for (std::size_t i = 0; i < self.value.size(); ++i)
        g[b1 ? 0 : i] -= self.grad[i] * self.value[i] / pb.value[b1 ? 0 : i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, unary_bw([c](double, double) { return c; }));
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, unary_bw([](double, double) { return 1.0; }));
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      unary_bw([](double, double y) { return y * (1.0 - y); }));
}

Tensor gelu(const Tensor& a) {
  constexpr double r2 = std::numbers::sqrt2;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x / r2)); },
      unary_bw([inv_sqrt_2pi](double x, double) {
        return 0.5 * (1.0 + std::erf(x / r2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      }));
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, unary_bw([](double x, double) { return x > 0 ? 1.0 : 0.0; }));
}

Tensor sqrt(const Tensor& a) {
  for (double x : a.data())
    if (x < 0) fail(Errc::NonFiniteInput, "sqrt of a negative value");
  return unary(a, [](double x) { return std::sqrt(x); }, unary_bw([](double, double y) { return 0.5 / y; }));
}

Tensor safe_sqrt(const Tensor& a, double eps) {
  return unary(a, [eps](double x) { return std::sqrt(std::max(x, 0.0) + eps); },
               unary_bw([](double x, double y) { return x < 0 ? 0.0 : 0.5 / y; }));
}

Tensor abs(const Tensor& a) {
  return unary(a, [](double x) { return std::abs(x); },
               unary_bw([](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }));
}

Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0)) fail(Errc::NonFiniteInput, "log of a non-positive value");
  return unary(a, [](double x) { return std::log(x); }, unary_bw([](double x, double) { return 1.0 / x; }));
}

Tensor minimum(const Tensor& a, double c) {
  return unary(a, [c](double x) { return std::min(x, c); }, unary_bw([c](double x, double) { return x < c ? 1.0 : 0.0; }));
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) fail(Errc::ShapeMismatch, "bce_with_logits: shapes differ");
  std::vector<double> v(logits.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double z = logits[i], t = targets[i];
    v[i] = std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  return make(logits.shape(), std::move(v), {&logits, &targets}, [](Node& self) {
    Node& pz = *self.parents[0];
    Node& pt = *self.parents[1];
    if (pz.requires_grad) {
      double* g = pz.g();
      for (std::size_t i = 0; i < self.value.size(); ++i) {
        const double z = pz.value[i];
        const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        g[i] += self.grad[i] * (s - pt.value[i]);
      }
    }
    if (pt.requires_grad) {
      double* g = pt.g();
      for (std::size_t i = 0; i < self.value.size(); ++i) g[i] -= self.grad[i] * pz.value[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0;
  for (double x : a.data()) s += x;
  return make({1}, {s}, {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Shape s = a.shape();
  s[axis] = 1;
  std::vector<double> v(sp.outer * sp.inner, 0.0);
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) v[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  return make(s, std::move(v), {&a}, [sp](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.n + j) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

Tensor expand(const Tensor& a, const Shape& shape) {
  if (a.rank() != shape.size()) fail(Errc::ShapeMismatch, "expand keeps rank: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (a.dim(d) != shape[d] && a.dim(d) != 1)
      fail(Errc::ShapeMismatch, "expand: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  // source index for each output element
  Shape in = a.shape();
  Shape out = shape;
  while (in.size() < 3) {
    in.insert(in.begin(), 1);
    out.insert(out.begin(), 1);
  }
  const std::size_t n = numel(out);
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<double> v(n);
  std::size_t idx = 0;
  for (std::size_t i0 = 0; i0 < out[0]; ++i0)
    for (std::size_t i1 = 0; i1 < out[1]; ++i1)
      for (std::size_t i2 = 0; i2 < out[2]; ++i2) {
        const std::size_t j0 = in[0] == 1 ? 0 : i0, j1 = in[1] == 1 ? 0 : i1, j2 = in[2] == 1 ? 0 : i2;
        const std::size_t s = (j0 * in[1] + j1) * in[2] + j2;
        (*src)[idx] = s;
        v[idx++] = a[s];
      }
  return make(shape, std::move(v), {&a}, [src](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t i = 0; i < self.value.size(); ++i) g[(*src)[i]] += self.grad[i];
  });
}

Tensor add_row(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.size() != x.dim(1))
    fail(Errc::ShapeMismatch, "add_row: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.data());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] += b[j];
  return make(x.shape(), std::move(v), {&x, &b}, [r, c](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    if (px.requires_grad) {
      double* g = px.g();
      for (std::size_t i = 0; i < r * c; ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      double* g = pb.g();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
    }
  });
}

namespace {

// C[m,n] += A[m,k] B[k,n] with optional transposes, row-major
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B, double* C) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* c = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double a = A[i * k + p];
        if (a == 0) continue;
        const double* b = B + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
      }
    }
  } else if (ta && !tb) {  // A stored [k, m]
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double a = A[p * m + i];
        if (a == 0) continue;
        double* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
      }
    }
  } else if (!ta && tb) {  // B stored [n, k]
    for (std::size_t i = 0; i < m; ++i) {
      const double* a = A + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* b = B + j * k;
        double acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
        C[i * n + j] += acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += A[p * m + i] * B[j * k + p];
        C[i * n + j] += acc;
      }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    fail(Errc::ShapeMismatch, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n, 0.0);
  gemm(false, false, m, n, k, a.data().data(), b.data().data(), v.data());
  return make({m, n}, std::move(v), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) gemm(false, true, m, k, n, self.grad.data(), pb.value.data(), pa.g());
    if (pb.requires_grad) gemm(true, false, k, n, m, pa.value.data(), self.grad.data(), pb.g());
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) fail(Errc::ShapeMismatch, "transpose needs rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = a[i * c + j];
  return make({c, r}, std::move(v), {&a}, [r, c](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.size())
    fail(Errc::ShapeMismatch, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make(shape, a.data(), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_axis(a.shape(), axis);
  if (start + length > sp.n || length == 0)
    fail(Errc::ShapeMismatch, "slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") of " +
                                  shape_str(a.shape()));
  Shape s = a.shape();
  s[axis] = length;
  std::vector<double> v(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(a.data().begin() + static_cast<long>((o * sp.n + start) * sp.inner), length * sp.inner,
                v.begin() + static_cast<long>(o * length * sp.inner));
  return make(s, std::move(v), {&a}, [sp, start, length](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < length * sp.inner; ++i)
        g[(o * sp.n + start) * sp.inner + i] += self.grad[o * length * sp.inner + i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail(Errc::ShapeMismatch, "concat of nothing");
  Shape s = parts[0].shape();
  split_axis(s, axis);
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape q = p.shape();
    if (q.size() != s.size()) fail(Errc::ShapeMismatch, "concat rank mismatch");
    total += q[axis];
    q[axis] = s[axis];
    if (q != s) fail(Errc::ShapeMismatch, "concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
  }
  const auto sp0 = split_axis(s, axis);
  s[axis] = total;
  std::vector<double> v(numel(s));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.dim(axis);
    for (std::size_t o = 0; o < sp0.outer; ++o)
      std::copy_n(p.data().begin() + static_cast<long>(o * n * sp0.inner), n * sp0.inner,
                  v.begin() + static_cast<long>((o * total + off) * sp0.inner));
    offsets.push_back(off);
    off += n;
  }
  const std::size_t outer = sp0.outer, inner = sp0.inner;
  return make_n(s, std::move(v), parts, [offsets, total, outer, inner](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      double* g = p.g();
      const std::size_t n = p.value.size() / (outer * inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < n * inner; ++i) g[o * n * inner + i] += self.grad[(o * total + offsets[k]) * inner + i];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() != 2) fail(Errc::ShapeMismatch, "gather_rows needs rank 2");
  const std::size_t c = a.dim(1);
  std::vector<double> v(rows.size() * c);
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.dim(0)) fail(Errc::ShapeMismatch, "row index out of range");
    std::copy_n(a.data().begin() + static_cast<long>(rows[r] * c), c, v.begin() + static_cast<long>(r * c));
  }
  return make({rows.size(), c}, std::move(v), {&a}, [idx, c](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t r = 0; r < idx->size(); ++r)
      for (std::size_t j = 0; j < c; ++j) g[(*idx)[r] * c + j] += self.grad[r * c + j];
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) { return gather_rows(table, ids); }

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  std::vector<double> v(a.size());
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
      double m = -INFINITY;
      for (std::size_t j = 0; j < sp.n; ++j) m = std::max(m, x[at(j)]);
      double s = 0;
      for (std::size_t j = 0; j < sp.n; ++j) s += v[at(j)] = std::exp(x[at(j)] - m);
      for (std::size_t j = 0; j < sp.n; ++j) v[at(j)] /= s;
    }
  return make(a.shape(), std::move(v), {&a}, [sp](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
        double dot = 0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += self.grad[at(j)] * self.value[at(j)];
        for (std::size_t j = 0; j < sp.n; ++j) g[at(j)] += self.value[at(j)] * (self.grad[at(j)] - dot);
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 2 || gamma.size() != x.dim(1) || beta.size() != x.dim(1))
    fail(Errc::ShapeMismatch, "layer_norm: " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xhat = std::make_shared<std::vector<double>>(r * c);
  auto inv = std::make_shared<std::vector<double>>(r);
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    double mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[i * c + j] = h;
      v[i * c + j] = h * gamma[j] + beta[j];
    }
  }
  return make(x.shape(), std::move(v), {&x, &gamma, &beta}, [r, c, xhat, inv](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const double* dy = self.grad.data();
    if (pg.requires_grad) {
      double* g = pg.g();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += dy[i * c + j] * (*xhat)[i * c + j];
    }
    if (pb.requires_grad) {
      double* g = pb.g();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += dy[i * c + j];
    }
    if (px.requires_grad) {
      double* g = px.g();
      const double n = static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        double m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = dy[i * c + j] * pg.value[j];
          m1 += d;
          m2 += d * (*xhat)[i * c + j];
        }
        m1 /= n;
        m2 /= n;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = dy[i * c + j] * pg.value[j];
          g[i * c + j] += (*inv)[i] * (d - m1 - (*xhat)[i * c + j] * m2);
        }
      }
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad_left,
              std::size_t pad_right) {
  if (x.rank() != 2 || w.rank() != 3 || w.dim(1) != x.dim(0))
    fail(Errc::ShapeMismatch, "conv1d: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()));
  const std::size_t cin = x.dim(0), len = x.dim(1), cout = w.dim(0), ks = w.dim(2);
  const bool has_bias = b.defined();
  if (has_bias && b.size() != cout) fail(Errc::ShapeMismatch, "conv1d bias length");
  if (stride == 0 || len + pad_left + pad_right < ks)
    fail(Errc::ShapeMismatch, "conv1d: input length " + std::to_string(len) + " shorter than kernel " + std::to_string(ks));
  const std::size_t lout = (len + pad_left + pad_right - ks) / stride + 1;
  const long pl = static_cast<long>(pad_left);
  const long s = static_cast<long>(stride);
  // valid output range per tap: 0 <= t*s + k - pl < len
  auto range = [=](std::size_t k, long& lo, long& hi) {
    const long off = static_cast<long>(k) - pl;
    lo = off >= 0 ? 0 : (-off + s - 1) / s;
    const long last = static_cast<long>(len) - 1 - off;
    hi = last < 0 ? -1 : std::min(static_cast<long>(lout) - 1, last / s);
  };
  std::vector<double> v(cout * lout, 0.0);
  const double* xv = x.data().data();
  const double* wv = w.data().data();
  for (std::size_t co = 0; co < cout; ++co) {
    double* out = v.data() + co * lout;
    if (has_bias)
      for (std::size_t t = 0; t < lout; ++t) out[t] = b[co];
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xi = xv + ci * len;
      for (std::size_t k = 0; k < ks; ++k) {
        const double wk = wv[(co * cin + ci) * ks + k];
        long lo, hi;
        range(k, lo, hi);
        const long off = static_cast<long>(k) - pl;
        if (s == 1) {
          const double* src = xi + off;
          for (long t = lo; t <= hi; ++t) out[t] += wk * src[t];
        } else {
          for (long t = lo; t <= hi; ++t) out[t] += wk * xi[t * s + off];
        }
      }
    }
  }
  Tensor bias = has_bias ? b : Tensor::zeros({cout});
  return make({cout, lout}, std::move(v), {&x, &w, &bias},
              [=](Node& self) {
                Node& px = *self.parents[0];
                Node& pw = *self.parents[1];
                Node& pb = *self.parents[2];
                const double* dy = self.grad.data();
                if (has_bias && pb.requires_grad) {
                  double* g = pb.g();
                  for (std::size_t co = 0; co < cout; ++co)
                    for (std::size_t t = 0; t < lout; ++t) g[co] += dy[co * lout + t];
                }
                double* gx = px.requires_grad ? px.g() : nullptr;
                double* gw = pw.requires_grad ? pw.g() : nullptr;
                for (std::size_t co = 0; co < cout; ++co) {
                  const double* d = dy + co * lout;
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* xi = px.value.data() + ci * len;
                    for (std::size_t k = 0; k < ks; ++k) {
                      long lo, hi;
                      range(k, lo, hi);
                      const long off = static_cast<long>(k) - pl;
                      const std::size_t wi = (co * cin + ci) * ks + k;
                      if (gw) {
                        double acc = 0;
                        for (long t = lo; t <= hi; ++t) acc += d[t] * xi[t * s + off];
                        gw[wi] += acc;
                      }
                      if (gx) {
                        const double wk = pw.value[wi];
                        double* gxi = gx + ci * len;
                        for (long t = lo; t <= hi; ++t) gxi[t * s + off] += wk * d[t];
                      }
                    }
                  }
                }
              });
}

Tensor upsample(const Tensor& x, std::size_t factor) {
  if (x.rank() != 2 || factor == 0) fail(Errc::ShapeMismatch, "upsample needs [C, L] and factor >= 1");
  const std::size_t c = x.dim(0), len = x.dim(1);
  std::vector<double> v(c * len * factor);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t t = 0; t < len * factor; ++t) v[i * len * factor + t] = x[i * len + t / factor];
  return make({c, len * factor}, std::move(v), {&x}, [c, len, factor](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t t = 0; t < len * factor; ++t) g[i * len + t / factor] += self.grad[i * len * factor + t];
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.shape() != k.shape() || q.dim(1) != k.dim(1) || heads == 0 ||
      q.dim(1) % heads != 0)
    fail(Errc::ShapeMismatch, "attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                                  shape_str(v.shape()) + ", heads " + std::to_string(heads));
  const std::size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1), dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<double>>(heads * tq * tk);
  std::vector<double> out(tq * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    double* P = probs->data() + h * tq * tk;
    for (std::size_t i = 0; i < tq; ++i) {
      double m = -INFINITY;
      for (std::size_t j = 0; j < tk; ++j) {
        double acc = 0;
        for (std::size_t e = 0; e < dh; ++e) acc += Q[i * d + h * dh + e] * K[j * d + h * dh + e];
        P[i * tk + j] = acc * sc;
        m = std::max(m, P[i * tk + j]);
      }
      double s = 0;
      for (std::size_t j = 0; j < tk; ++j) s += P[i * tk + j] = std::exp(P[i * tk + j] - m);
      for (std::size_t j = 0; j < tk; ++j) {
        const double p = P[i * tk + j] /= s;
        for (std::size_t e = 0; e < dh; ++e) out[i * d + h * dh + e] += p * V[j * d + h * dh + e];
      }
    }
  }
  return make({tq, d}, std::move(out), {&q, &k, &v}, [=](Node& self) {
    Node& pq = *self.parents[0];
    Node& pk = *self.parents[1];
    Node& pv = *self.parents[2];
    double* gq = pq.requires_grad ? pq.g() : nullptr;
    double* gk = pk.requires_grad ? pk.g() : nullptr;
    double* gv = pv.requires_grad ? pv.g() : nullptr;
    const double* dO = self.grad.data();
    std::vector<double> dS(tk);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* P = probs->data() + h * tq * tk;
      for (std::size_t i = 0; i < tq; ++i) {
        double dot = 0;
        for (std::size_t j = 0; j < tk; ++j) {
          double dp = 0;
          for (std::size_t e = 0; e < dh; ++e) dp += dO[i * d + h * dh + e] * pv.value[j * d + h * dh + e];
          dS[j] = dp;
          dot += dp * P[i * tk + j];
          if (gv)
            for (std::size_t e = 0; e < dh; ++e) gv[j * d + h * dh + e] += P[i * tk + j] * dO[i * d + h * dh + e];
        }
        for (std::size_t j = 0; j < tk; ++j) {
          const double ds = P[i * tk + j] * (dS[j] - dot) * sc;
          if (ds == 0) continue;
          if (gq)
            for (std::size_t e = 0; e < dh; ++e) gq[i * d + h * dh + e] += ds * pk.value[j * d + h * dh + e];
          if (gk)
            for (std::size_t e = 0; e < dh; ++e) gk[j * d + h * dh + e] += ds * pq.value[i * d + h * dh + e];
        }
      }
    }
  });
}

Tensor patchify(const Tensor& x, std::size_t size, std::size_t stride) {
  if (x.rank() != 2 || x.dim(0) != 1 || size == 0 || stride == 0 || x.dim(1) < size)
    fail(Errc::PatchConfigInvalid, "cannot cut " + shape_str(x.shape()) + " into patches of " + std::to_string(size));
  const std::size_t n = (x.dim(1) - size) / stride + 1;
  std::vector<double> v(n * size);
  for (std::size_t p = 0; p < n; ++p)
    std::copy_n(x.data().begin() + static_cast<long>(p * stride), size, v.begin() + static_cast<long>(p * size));
  return make({n, size}, std::move(v), {&x}, [n, size, stride](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    double* g = px.g();
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t j = 0; j < size; ++j) g[p * stride + j] += self.grad[p * size + j];
  });
}

Tensor overlap_add(const Tensor& patches, std::size_t stride) {
  if (patches.rank() != 2 || stride == 0) fail(Errc::PatchConfigInvalid, "overlap_add needs [P, size] patches");
  const std::size_t n = patches.dim(0), size = patches.dim(1);
  const std::size_t len = (n - 1) * stride + size;
  auto cover = std::make_shared<std::vector<double>>(len, 0.0);
  std::vector<double> v(len, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t j = 0; j < size; ++j) {
      v[p * stride + j] += patches[p * size + j];
      (*cover)[p * stride + j] += 1.0;
    }
  for (std::size_t i = 0; i < len; ++i) v[i] /= (*cover)[i];
  return make({1, len}, std::move(v), {&patches}, [n, size, stride, cover](Node& self) {
    Node& pp = *self.parents[0];
    if (!pp.requires_grad) return;
    double* g = pp.g();
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t j = 0; j < size; ++j) g[p * size + j] += self.grad[p * stride + j] / (*cover)[p * stride + j];
  });
}

Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng, bool train) {
  if (!train || p <= 0) return a;
  if (p >= 1) fail(Errc::InvalidConfig, "dropout probability must be < 1");
  auto keep = std::make_shared<std::vector<double>>(a.size());
  std::bernoulli_distribution bern(1.0 - p);
  const double sc = 1.0 / (1.0 - p);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    (*keep)[i] = bern(rng) ? sc : 0.0;
    v[i] = a[i] * (*keep)[i];
  }
  return make(a.shape(), std::move(v), {&a}, [keep](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.g();
    for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += self.grad[i] * (*keep)[i];
  });
}

}  // namespace ops

double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                         double eps, double floor) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor out = f(inputs);
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& data = inputs[k].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = f(inputs).item();
      data[i] = orig - eps;
      const double dn = f(inputs).item();
      data[i] = orig;
      const double num = (up - dn) / (2 * eps);
      const double a = analytic[k][i];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace xdc
