// Reverse-mode automatic differentiation over dense float64 arrays of rank <= 3.
//
// A Tensor is a shared handle to a graph node. Ops record their parents and a
// backward closure only when some input requires a gradient, so inference
// builds no graph. Layout conventions used by the network:
//   sequences  [T, D]   (row per position)
//   feature maps [C, L] (row per channel)

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace xdc {

using Shape = std::vector<std::size_t>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  double* g() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(const Shape& shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  /// Gradient buffer (zeros if backward never reached this tensor).
  std::vector<double>& grad();
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad();

  /// Reverse pass from a scalar root. Gradients accumulate into leaves.
  void backward();
  /// Same values, no history.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Checks forward results for NaN/Inf when XDC_CHECK_FINITE is set.
bool finite_checks_enabled();

namespace ops {

// elementwise; operands must have equal shapes or one of them has one element
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);
/// sqrt(a + eps): finite gradient at zero.
Tensor safe_sqrt(const Tensor& a, double eps = 1e-6);
Tensor abs(const Tensor& a);
Tensor log(const Tensor& a);
/// min(a, c) elementwise; gradient 0 where clipped.
Tensor minimum(const Tensor& a, double c);
/// Elementwise binary cross-entropy of logits against fixed targets.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reduces `axis`, keeping it with length 1.
Tensor sum_axis(const Tensor& a, std::size_t axis);

/// Broadcasts size-1 dims of `a` to `shape` (same rank).
Tensor expand(const Tensor& a, const Shape& shape);
/// x[T, D] + b[D] on every row.
Tensor add_row(const Tensor& x, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Rows of a 2D tensor picked by index (repeats allowed).
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// x[Cin, L], w[Cout, Cin, K], optional b[Cout] -> [Cout, (L + pl + pr - K) / stride + 1].
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad_left,
              std::size_t pad_right);
/// Nearest-neighbour upsampling of [C, L] to [C, L * factor].
Tensor upsample(const Tensor& x, std::size_t factor);

/// Multi-head scaled dot-product attention. q[Tq, D], k/v[Tk, D] -> [Tq, D].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

/// Overlapping windows of a [1, L] row: [P, size], P = (L - size) / stride + 1.
Tensor patchify(const Tensor& x, std::size_t size, std::size_t stride);
/// Inverse of patchify by overlap-averaging: [P, size] -> [1, (P - 1) * stride + size].
Tensor overlap_add(const Tensor& patches, std::size_t stride);

/// Inverted dropout; identity when !train or p == 0.
Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng, bool train);

}  // namespace ops

/// Max relative error between analytic gradients of the scalar `f(inputs)` and
/// central differences with step `eps`, over every element of every input.
/// Relative error = |a - n| / max(|a|, |n|, floor).
double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                         double eps = 1e-5, double floor = 1e-6);

}  // namespace xdc
