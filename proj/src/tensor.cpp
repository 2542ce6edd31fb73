#include "t2fnorm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace t2fnorm {

namespace {

using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;
using NodePtr = std::shared_ptr<detail::Node>;

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

void ensure_finite(const Eigen::ArrayXd& v, const char* op) {
  if (!v.allFinite()) throw TensorError(std::string(op) + ": non-finite value in output");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw TensorError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                      shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

thread_local bool g_grad_enabled = true;

// Builds the output node; the backward closure is attached only when some
// input takes part in differentiation.
Tensor make_result(Shape shape, Eigen::ArrayXd value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> fn, const char* op) {
  ensure_finite(value, op);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(fn);
  }
  return Tensor::wrap(node);
}

const Eigen::ArrayXd& parent_value(const detail::Node& n, std::size_t i) {
  return n.parents[i]->value;
}

void accumulate_parent(detail::Node& n, std::size_t i, const Eigen::ArrayXd& g) {
  if (n.parents[i]->requires_grad) n.parents[i]->accumulate(g);
}

bool parent_wants(const detail::Node& n, std::size_t i) { return n.parents[i]->requires_grad; }

void check_p(int p, const char* op) {
  if (p < 1 || p > 4) throw TensorError(std::string(op) + ": p must be in {1,2,3,4}");
}

double abs_pow(double v, int p) {
  const double a = std::abs(v);
  switch (p) {
    case 1: return a;
    case 2: return a * a;
    default: return std::pow(a, p);
  }
}

double norm_from_sum(double s, int p) {
  switch (p) {
    case 1: return s;
    case 2: return std::sqrt(s);
    default: return std::pow(s, 1.0 / p);
  }
}

// d||x||_p / dx_i
double norm_partial(double xi, double norm, int p) {
  if (xi == 0.0) return 0.0;
  const double sign = xi > 0.0 ? 1.0 : -1.0;
  if (p == 1) return sign;
  return sign * std::pow(std::abs(xi) / norm, p - 1);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void detail::Node::accumulate(const Eigen::ArrayXd& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : Tensor(Shape{}, Eigen::ArrayXd::Zero(1)) {}

Tensor::Tensor(Shape shape, Eigen::ArrayXd values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != static_cast<std::size_t>(values.size())) {
    throw TensorError("Tensor: " + std::to_string(values.size()) +
                      " elements do not fit shape " + shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), Eigen::ArrayXd::Zero(idx(n)), requires_grad);
}

Tensor Tensor::constant(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), Eigen::ArrayXd::Constant(idx(n), value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, Eigen::ArrayXd::Constant(1, value)); }

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Eigen::ArrayXd v(m.size());
  RowMap(v.data(), m.rows(), m.cols()) = m;
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::move(v));
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= rank()) throw TensorError("dim: axis out of range for shape " + shape_string(shape()));
  return node_->shape[i];
}

Eigen::ArrayXd& Tensor::mutable_values() {
  if (!node_->is_leaf()) throw TensorError("mutable_values: tensor is not a leaf");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw TensorError("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->value(0);
}

RowMatrix Tensor::matrix() const {
  require_rank(*this, 2, "matrix");
  return ConstRowMap(node_->value.data(), idx(dim(0)), idx(dim(1)));
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw TensorError("set_requires_grad: only leaves can be flagged");
  node_->requires_grad = flag;
}

const Eigen::ArrayXd& Tensor::grad() const {
  if (!has_grad()) throw TensorError("grad: no gradient has been accumulated");
  return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(shape(), values()); }

// ---------------------------------------------------------------------------
// Backward pass

void backward(const Tensor& loss) {
  const NodePtr& root = loss.node();
  if (loss.numel() != 1) {
    throw TensorError("backward: loss must be a single element, got shape " +
                      shape_string(loss.shape()));
  }
  if (root->freed) throw TensorError("backward: graph has already been released");
  if (!root->requires_grad) throw TensorError("backward: loss does not require grad");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->accumulate(Eigen::ArrayXd::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }

  for (detail::Node* node : order) {
    if (node->is_leaf()) continue;
    node->parents.clear();
    node->backward = nullptr;
    node->grad.resize(0);
    node->freed = true;
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = idx(a.dim(0)), k = idx(a.dim(1)), n = idx(b.dim(1));
  if (a.dim(1) != b.dim(0)) {
    throw TensorError("matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                      shape_string(b.shape()));
  }
  ConstRowMap A(a.values().data(), m, k);
  ConstRowMap B(b.values().data(), k, n);
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(m * n);
  RowMap C(out.data(), m, n);
  // Row-axpy form: each output element sums over k in ascending order.
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) C.row(i) += A(i, j) * B.row(j);
  }
  return make_result(
      {a.dim(0), b.dim(1)}, std::move(out), {a, b},
      [m, k, n](detail::Node& self) {
        ConstRowMap G(self.grad.data(), m, n);
        ConstRowMap A(parent_value(self, 0).data(), m, k);
        ConstRowMap B(parent_value(self, 1).data(), k, n);
        if (parent_wants(self, 0)) {
          Eigen::ArrayXd ga(m * k);
          RowMap(ga.data(), m, k).noalias() = G * B.transpose();
          accumulate_parent(self, 0, ga);
        }
        if (parent_wants(self, 1)) {
          Eigen::ArrayXd gb(k * n);
          RowMap(gb.data(), k, n).noalias() = A.transpose() * G;
          accumulate_parent(self, 1, gb);
        }
      },
      "matmul");
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const auto r = idx(a.dim(0)), c = idx(a.dim(1));
  Eigen::ArrayXd out(r * c);
  RowMap(out.data(), c, r) = ConstRowMap(a.values().data(), r, c).transpose();
  return make_result(
      {a.dim(1), a.dim(0)}, std::move(out), {a},
      [r, c](detail::Node& self) {
        Eigen::ArrayXd g(r * c);
        RowMap(g.data(), r, c) = ConstRowMap(self.grad.data(), c, r).transpose();
        accumulate_parent(self, 0, g);
      },
      "transpose");
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (stride == 0) throw TensorError("conv2d: stride must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
  if (kernel.dim(1) != C) {
    throw TensorError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                      " input channels, input has " + std::to_string(C));
  }
  if (KH > H + 2 * padding || KW > W + 2 * padding) {
    throw TensorError("conv2d: kernel larger than padded input");
  }
  const std::size_t HO = (H + 2 * padding - KH) / stride + 1;
  const std::size_t WO = (W + 2 * padding - KW) / stride + 1;
  const std::size_t R = C * KH * KW, P = HO * WO;

  // im2col per sample; columns ordered (c, kh, kw) to match the kernel layout.
  auto cols = std::make_shared<std::vector<RowMatrix>>(N, RowMatrix(idx(R), idx(P)));
  const double* xs = x.values().data();
  for (std::size_t n = 0; n < N; ++n) {
    RowMatrix& col = (*cols)[n];
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = xs + (n * C + c) * H * W;
      for (std::size_t kh = 0; kh < KH; ++kh) {
        for (std::size_t kw = 0; kw < KW; ++kw) {
          const auto r = idx((c * KH + kh) * KW + kw);
          for (std::size_t oy = 0; oy < HO; ++oy) {
            const long iy = static_cast<long>(oy * stride + kh) - static_cast<long>(padding);
            for (std::size_t ox = 0; ox < WO; ++ox) {
              const long ix = static_cast<long>(ox * stride + kw) - static_cast<long>(padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(H) &&
                                  ix < static_cast<long>(W);
              col(r, idx(oy * WO + ox)) = inside ? plane[iy * static_cast<long>(W) + ix] : 0.0;
            }
          }
        }
      }
    }
  }

  ConstRowMap K(kernel.values().data(), idx(F), idx(R));
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(idx(N * F * P));
  for (std::size_t n = 0; n < N; ++n) {
    RowMap O(out.data() + n * F * P, idx(F), idx(P));
    const RowMatrix& col = (*cols)[n];
    // Rank-1 updates keep the per-element summation order fixed at (c, kh, kw).
    for (Eigen::Index r = 0; r < idx(R); ++r) O.noalias() += K.col(r) * col.row(r);
  }

  return make_result(
      {N, F, HO, WO}, std::move(out), {x, kernel},
      [=](detail::Node& self) {
        ConstRowMap K(parent_value(self, 1).data(), idx(F), idx(R));
        const bool want_x = parent_wants(self, 0);
        const bool want_k = parent_wants(self, 1);
        Eigen::ArrayXd gx;
        if (want_x) gx = Eigen::ArrayXd::Zero(idx(N * C * H * W));
        RowMatrix gk = RowMatrix::Zero(idx(F), idx(R));
        RowMatrix gcol(idx(R), idx(P));
        for (std::size_t n = 0; n < N; ++n) {
          ConstRowMap G(self.grad.data() + n * F * P, idx(F), idx(P));
          const RowMatrix& col = (*cols)[n];
          if (want_k) gk.noalias() += G * col.transpose();
          if (!want_x) continue;
          gcol.noalias() = K.transpose() * G;
          double* plane0 = gx.data() + n * C * H * W;
          for (std::size_t c = 0; c < C; ++c) {
            double* plane = plane0 + c * H * W;
            for (std::size_t kh = 0; kh < KH; ++kh) {
              for (std::size_t kw = 0; kw < KW; ++kw) {
                const auto r = idx((c * KH + kh) * KW + kw);
                for (std::size_t oy = 0; oy < HO; ++oy) {
                  const long iy = static_cast<long>(oy * stride + kh) - static_cast<long>(padding);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  for (std::size_t ox = 0; ox < WO; ++ox) {
                    const long ix =
                        static_cast<long>(ox * stride + kw) - static_cast<long>(padding);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    plane[iy * static_cast<long>(W) + ix] += gcol(r, idx(oy * WO + ox));
                  }
                }
              }
            }
          }
        }
        if (want_x) accumulate_parent(self, 0, gx);
        if (want_k) {
          Eigen::ArrayXd g(idx(F * R));
          RowMap(g.data(), idx(F), idx(R)) = gk;
          accumulate_parent(self, 1, g);
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return make_result(
      a.shape(), a.values() + b.values(), {a, b},
      [](detail::Node& self) {
        accumulate_parent(self, 0, self.grad);
        accumulate_parent(self, 1, self.grad);
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return make_result(
      a.shape(), a.values() - b.values(), {a, b},
      [](detail::Node& self) {
        accumulate_parent(self, 0, self.grad);
        if (parent_wants(self, 1)) accumulate_parent(self, 1, -self.grad);
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return make_result(
      a.shape(), a.values() * b.values(), {a, b},
      [](detail::Node& self) {
        if (parent_wants(self, 0)) accumulate_parent(self, 0, self.grad * parent_value(self, 1));
        if (parent_wants(self, 1)) accumulate_parent(self, 1, self.grad * parent_value(self, 0));
      },
      "mul");
}

Tensor scale(const Tensor& a, double factor) {
  return make_result(
      a.shape(), a.values() * factor, {a},
      [factor](detail::Node& self) { accumulate_parent(self, 0, self.grad * factor); }, "scale");
}

Tensor add_scalar(const Tensor& a, double c) {
  return make_result(
      a.shape(), a.values() + c, {a},
      [](detail::Node& self) { accumulate_parent(self, 0, self.grad); }, "add_scalar");
}

Tensor relu(const Tensor& x) {
  return make_result(
      x.shape(), x.values().max(0.0), {x},
      [](detail::Node& self) {
        // Subgradient 0 at the kink.
        accumulate_parent(self, 0, (parent_value(self, 0) > 0.0).select(self.grad, 0.0));
      },
      "relu");
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const auto n = idx(x.dim(0)), d = idx(x.dim(1));
  if (bias.dim(0) != x.dim(1)) throw TensorError("add_row_bias: bias length mismatch");
  Eigen::ArrayXd out(n * d);
  RowMap(out.data(), n, d) = ConstRowMap(x.values().data(), n, d).rowwise() +
                             bias.values().matrix().transpose();
  return make_result(
      x.shape(), std::move(out), {x, bias},
      [n, d](detail::Node& self) {
        accumulate_parent(self, 0, self.grad);
        if (parent_wants(self, 1)) {
          Eigen::ArrayXd gb = ConstRowMap(self.grad.data(), n, d).colwise().sum().transpose();
          accumulate_parent(self, 1, gb);
        }
      },
      "add_row_bias");
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 4, "add_channel_bias");
  require_rank(bias, 1, "add_channel_bias");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (bias.dim(0) != C) throw TensorError("add_channel_bias: bias length mismatch");
  Eigen::ArrayXd out = x.values();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) out.segment(idx((n * C + c) * HW), idx(HW)) += bias.at(c);
  }
  return make_result(
      x.shape(), std::move(out), {x, bias},
      [N, C, HW](detail::Node& self) {
        accumulate_parent(self, 0, self.grad);
        if (parent_wants(self, 1)) {
          Eigen::ArrayXd gb = Eigen::ArrayXd::Zero(idx(C));
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
              gb(idx(c)) += self.grad.segment(idx((n * C + c) * HW), idx(HW)).sum();
            }
          }
          accumulate_parent(self, 1, gb);
        }
      },
      "add_channel_bias");
}

Tensor div_rows(const Tensor& x, const Tensor& s) {
  if (x.rank() < 1) throw TensorError("div_rows: input must have a leading axis");
  require_rank(s, 1, "div_rows");
  const std::size_t N = x.dim(0);
  if (s.dim(0) != N) throw TensorError("div_rows: divisor length mismatch");
  const std::size_t row = N == 0 ? 0 : x.numel() / N;
  Eigen::ArrayXd out(x.values().size());
  for (std::size_t n = 0; n < N; ++n) {
    out.segment(idx(n * row), idx(row)) = x.values().segment(idx(n * row), idx(row)) / s.at(n);
  }
  return make_result(
      x.shape(), std::move(out), {x, s},
      [N, row](detail::Node& self) {
        const auto& xv = parent_value(self, 0);
        const auto& sv = parent_value(self, 1);
        if (parent_wants(self, 0)) {
          Eigen::ArrayXd gx(xv.size());
          for (std::size_t n = 0; n < N; ++n) {
            gx.segment(idx(n * row), idx(row)) = self.grad.segment(idx(n * row), idx(row)) / sv(idx(n));
          }
          accumulate_parent(self, 0, gx);
        }
        if (parent_wants(self, 1)) {
          Eigen::ArrayXd gs(idx(N));
          for (std::size_t n = 0; n < N; ++n) {
            const double dot = (self.grad.segment(idx(n * row), idx(row)) *
                                xv.segment(idx(n * row), idx(row)))
                                   .sum();
            gs(idx(n)) = -dot / (sv(idx(n)) * sv(idx(n)));
          }
          accumulate_parent(self, 1, gs);
        }
      },
      "div_rows");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const auto n = x.values().size();
  return make_result(
      {}, Eigen::ArrayXd::Constant(1, x.values().sum()), {x},
      [n](detail::Node& self) {
        accumulate_parent(self, 0, Eigen::ArrayXd::Constant(n, self.grad(0)));
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  const auto n = x.values().size();
  if (n == 0) throw TensorError("mean: empty tensor");
  return make_result(
      {}, Eigen::ArrayXd::Constant(1, x.values().sum() / static_cast<double>(n)), {x},
      [n](detail::Node& self) {
        accumulate_parent(self, 0,
                          Eigen::ArrayXd::Constant(n, self.grad(0) / static_cast<double>(n)));
      },
      "mean");
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw TensorError("global_avg_pool: empty spatial extent");
  Eigen::ArrayXd out(idx(N * C));
  for (std::size_t i = 0; i < N * C; ++i) {
    out(idx(i)) = x.values().segment(idx(i * HW), idx(HW)).sum() / static_cast<double>(HW);
  }
  return make_result(
      {N, C}, std::move(out), {x},
      [N, C, HW](detail::Node& self) {
        Eigen::ArrayXd g(idx(N * C * HW));
        for (std::size_t i = 0; i < N * C; ++i) {
          g.segment(idx(i * HW), idx(HW)).setConstant(self.grad(idx(i)) / static_cast<double>(HW));
        }
        accumulate_parent(self, 0, g);
      },
      "global_avg_pool");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw TensorError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                      shape_string(shape));
  }
  return make_result(
      std::move(shape), x.values(), {x},
      [](detail::Node& self) { accumulate_parent(self, 0, self.grad); }, "reshape");
}

Tensor l_p_norm(const Tensor& x, int p) {
  check_p(p, "l_p_norm");
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.values().size(); ++i) s += abs_pow(x.values()(i), p);
  const double norm = norm_from_sum(s, p);
  if (norm == 0.0 && x.requires_grad()) {
    throw TensorError("l_p_norm: gradient requested at the zero vector");
  }
  return make_result(
      {}, Eigen::ArrayXd::Constant(1, norm), {x},
      [p, norm](detail::Node& self) {
        const auto& xv = parent_value(self, 0);
        Eigen::ArrayXd g(xv.size());
        for (Eigen::Index i = 0; i < xv.size(); ++i) {
          g(i) = self.grad(0) * norm_partial(xv(i), norm, p);
        }
        accumulate_parent(self, 0, g);
      },
      "l_p_norm");
}

Tensor row_lp_norm(const Tensor& x, int p) {
  check_p(p, "row_lp_norm");
  require_rank(x, 2, "row_lp_norm");
  const auto n = idx(x.dim(0)), d = idx(x.dim(1));
  ConstRowMap X(x.values().data(), n, d);
  Eigen::ArrayXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) s += abs_pow(X(i, j), p);
    out(i) = norm_from_sum(s, p);
  }
  return make_result(
      {x.dim(0)}, std::move(out), {x},
      [n, d, p](detail::Node& self) {
        ConstRowMap X(parent_value(self, 0).data(), n, d);
        Eigen::ArrayXd g = Eigen::ArrayXd::Zero(n * d);
        RowMap G(g.data(), n, d);
        for (Eigen::Index i = 0; i < n; ++i) {
          const double norm = self.value(i);
          if (norm == 0.0) continue;
          for (Eigen::Index j = 0; j < d; ++j) G(i, j) = self.grad(i) * norm_partial(X(i, j), norm, p);
        }
        accumulate_parent(self, 0, g);
      },
      "row_lp_norm");
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {

double stable_lse(const Eigen::Ref<const Eigen::ArrayXd>& z) {
  const double m = z.maxCoeff();
  return m + std::log((z - m).exp().sum());
}

Eigen::ArrayXd stable_softmax(const Eigen::Ref<const Eigen::ArrayXd>& z) {
  Eigen::ArrayXd e = (z - z.maxCoeff()).exp();
  return e / e.sum();
}

void require_vector(const Tensor& z, const char* op) {
  require_rank(z, 1, op);
  if (z.numel() == 0) throw TensorError(std::string(op) + ": needs at least one class");
}

void require_rows(const Tensor& z, const char* op) {
  require_rank(z, 2, op);
  if (z.dim(1) == 0) throw TensorError(std::string(op) + ": needs at least one class");
}

}  // namespace

Tensor logsumexp(const Tensor& z) {
  require_vector(z, "logsumexp");
  return make_result(
      {}, Eigen::ArrayXd::Constant(1, stable_lse(z.values())), {z},
      [](detail::Node& self) {
        accumulate_parent(self, 0, self.grad(0) * stable_softmax(parent_value(self, 0)));
      },
      "logsumexp");
}

Tensor softmax(const Tensor& z) {
  require_vector(z, "softmax");
  return make_result(
      z.shape(), stable_softmax(z.values()), {z},
      [](detail::Node& self) {
        const Eigen::ArrayXd& s = self.value;
        const double dot = (self.grad * s).sum();
        accumulate_parent(self, 0, s * (self.grad - dot));
      },
      "softmax");
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  require_vector(logits, "cross_entropy");
  if (label >= logits.numel()) throw TensorError("cross_entropy: label out of range");
  const double value = stable_lse(logits.values()) - logits.at(label);
  return make_result(
      {}, Eigen::ArrayXd::Constant(1, value), {logits},
      [label](detail::Node& self) {
        Eigen::ArrayXd g = stable_softmax(parent_value(self, 0));
        g(idx(label)) -= 1.0;
        accumulate_parent(self, 0, self.grad(0) * g);
      },
      "cross_entropy");
}

Tensor logsumexp_rows(const Tensor& z) {
  require_rows(z, "logsumexp_rows");
  const auto n = idx(z.dim(0)), c = idx(z.dim(1));
  ConstRowMap Z(z.values().data(), n, c);
  Eigen::ArrayXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = stable_lse(Z.row(i).transpose().array());
  return make_result(
      {z.dim(0)}, std::move(out), {z},
      [n, c](detail::Node& self) {
        ConstRowMap Z(parent_value(self, 0).data(), n, c);
        Eigen::ArrayXd g(n * c);
        RowMap G(g.data(), n, c);
        for (Eigen::Index i = 0; i < n; ++i) {
          G.row(i) = self.grad(i) * stable_softmax(Z.row(i).transpose().array()).matrix().transpose();
        }
        accumulate_parent(self, 0, g);
      },
      "logsumexp_rows");
}

Tensor softmax_rows(const Tensor& z) {
  require_rows(z, "softmax_rows");
  const auto n = idx(z.dim(0)), c = idx(z.dim(1));
  ConstRowMap Z(z.values().data(), n, c);
  Eigen::ArrayXd out(n * c);
  RowMap S(out.data(), n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    S.row(i) = stable_softmax(Z.row(i).transpose().array()).matrix().transpose();
  }
  return make_result(
      z.shape(), std::move(out), {z},
      [n, c](detail::Node& self) {
        ConstRowMap S(self.value.data(), n, c);
        ConstRowMap G(self.grad.data(), n, c);
        Eigen::ArrayXd g(n * c);
        RowMap GZ(g.data(), n, c);
        for (Eigen::Index i = 0; i < n; ++i) {
          const double dot = G.row(i).dot(S.row(i));
          GZ.row(i) = (S.row(i).array() * (G.row(i).array() - dot)).matrix();
        }
        accumulate_parent(self, 0, g);
      },
      "softmax_rows");
}

Tensor pick(const Tensor& z, std::span<const std::size_t> index) {
  require_rows(z, "pick");
  const std::size_t n = z.dim(0), c = z.dim(1);
  if (index.size() != n) throw TensorError("pick: index count differs from row count");
  Eigen::ArrayXd out(idx(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= c) throw TensorError("pick: index out of range");
    out(idx(i)) = z.at(i * c + index[i]);
  }
  std::vector<std::size_t> where(index.begin(), index.end());
  return make_result(
      {n}, std::move(out), {z},
      [n, c, where = std::move(where)](detail::Node& self) {
        Eigen::ArrayXd g = Eigen::ArrayXd::Zero(idx(n * c));
        for (std::size_t i = 0; i < n; ++i) g(idx(i * c + where[i])) = self.grad(idx(i));
        accumulate_parent(self, 0, g);
      },
      "pick");
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rows(logits, "cross_entropy_rows");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw TensorError("cross_entropy_rows: label count differs from batch");
  if (n == 0) throw TensorError("cross_entropy_rows: empty batch");
  for (auto y : labels) {
    if (y >= c) throw TensorError("cross_entropy_rows: label out of range");
  }
  ConstRowMap Z(logits.values().data(), idx(n), idx(c));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += stable_lse(Z.row(idx(i)).transpose().array()) - Z(idx(i), idx(labels[i]));
  }
  std::vector<std::size_t> ys(labels.begin(), labels.end());
  return make_result(
      {}, Eigen::ArrayXd::Constant(1, total / static_cast<double>(n)), {logits},
      [n, c, ys = std::move(ys)](detail::Node& self) {
        ConstRowMap Z(parent_value(self, 0).data(), idx(n), idx(c));
        Eigen::ArrayXd g(idx(n * c));
        RowMap G(g.data(), idx(n), idx(c));
        const double w = self.grad(0) / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          G.row(idx(i)) = stable_softmax(Z.row(idx(i)).transpose().array()).matrix().transpose();
          G(idx(i), idx(ys[i])) -= 1.0;
        }
        g *= w;
        accumulate_parent(self, 0, g);
      },
      "cross_entropy_rows");
}

}  // namespace t2fnorm
