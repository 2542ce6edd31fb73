#ifndef T2FNORM_TENSOR_HPP
#define T2FNORM_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace t2fnorm {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Eigen::ArrayXd value;
  // Empty until a gradient has been accumulated.
  Eigen::ArrayXd grad;
  bool requires_grad = false;
  bool freed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  void accumulate(const Eigen::ArrayXd& g);
};

}  // namespace detail

/// Dense row-major array of doubles that may take part in a reverse-mode
/// differentiation graph. Copies share the underlying node.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, Eigen::ArrayXd values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from_matrix(const RowMatrix& m);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return static_cast<std::size_t>(node_->value.size()); }

  const Eigen::ArrayXd& values() const { return node_->value; }
  /// Writable storage; only valid for leaves (parameters, inputs).
  Eigen::ArrayXd& mutable_values();
  double item() const;
  double at(std::size_t flat) const { return node_->value(static_cast<Eigen::Index>(flat)); }

  /// Rank-2 view copied into an Eigen matrix.
  RowMatrix matrix() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return node_->grad.size() != 0; }
  const Eigen::ArrayXd& grad() const;
  void zero_grad() { node_->grad.resize(0); }

  bool is_leaf() const { return node_->is_leaf(); }
  /// Value copy with no graph attached.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Runs reverse-mode accumulation from a single-element tensor. Leaves
/// accumulate into existing gradients; the traversed graph is released.
void backward(const Tensor& loss);

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& x);

// Broadcasting needed by the model: bias rows, channel biases, per-sample scaling.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// Divides every leading-axis slice x[n, ...] by s[n].
Tensor div_rows(const Tensor& x, const Tensor& s);

// Reductions
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// (sum |x_i|^p)^(1/p) of a vector. Throws on a zero vector that requires grad.
Tensor l_p_norm(const Tensor& x, int p);
/// Per-row L_p norm of an N x D matrix; zero rows get a zero subgradient.
Tensor row_lp_norm(const Tensor& x, int p);

// Softmax family (max-shifted)
Tensor logsumexp(const Tensor& z);
Tensor softmax(const Tensor& z);
Tensor cross_entropy(const Tensor& logits, std::size_t label);
Tensor logsumexp_rows(const Tensor& z);
Tensor softmax_rows(const Tensor& z);
/// out[n] = z[n, index[n]]
Tensor pick(const Tensor& z, std::span<const std::size_t> index);
/// Mean cross-entropy over the rows of an N x C logit matrix.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace t2fnorm

#endif  // T2FNORM_TENSOR_HPP
