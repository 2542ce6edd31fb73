// Test-side helpers: random inputs, brute-force oracles and the central
// finite-difference checker shared by the unit tests and the acceptance run.
#ifndef T2FNORM_TESTS_SUPPORT_HPP
#define T2FNORM_TESTS_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "t2fnorm/nn.hpp"
#include "t2fnorm/tensor.hpp"

namespace t2fnorm::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::ArrayXd v(static_cast<Eigen::Index>(shape_numel(shape)));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = u(rng);
  return Tensor(shape, v, requires_grad);
}

/// Values bounded in [-2, 2] but at least `gap` away from zero, so kinks
/// (ReLU, |x|) stay outside the finite-difference stencil.
inline Tensor random_away_from_zero(const Shape& shape, std::mt19937_64& rng, double gap = 1e-3) {
  std::uniform_real_distribution<double> mag(gap, 2.0);
  std::bernoulli_distribution sign(0.5);
  Eigen::ArrayXd v(static_cast<Eigen::Index>(shape_numel(shape)));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(shape, v, true);
}

inline RowMatrix matmul_oracle(const RowMatrix& a, const RowMatrix& b) {
  RowMatrix c = RowMatrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// Direct cross-correlation with zero padding; returns N x F x Ho x Wo values.
inline Eigen::ArrayXd conv_oracle(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - KH) / stride + 1, Wo = (W + 2 * pad - KW) / stride + 1;
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(N * F * Ho * Wo));
  auto xv = [&](std::size_t n, std::size_t c, long i, long j) -> double {
    if (i < 0 || j < 0 || i >= static_cast<long>(H) || j >= static_cast<long>(W)) return 0.0;
    return x.at(((n * C + c) * H + static_cast<std::size_t>(i)) * W + static_cast<std::size_t>(j));
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < KH; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                s += xv(n, c, iy, ix) * k.at(((f * C + c) * KH + ky) * KW + kx);
              }
          out(static_cast<Eigen::Index>(((n * F + f) * Ho + oy) * Wo + ox)) = s;
        }
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences

/// |analytic - numeric| / max(|analytic|, |numeric|, 1): relative for large
/// gradients, absolute below unit magnitude.
inline double fd_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1.0});
}

/// One sampled configuration: leaf inputs and a scalar function of them.
struct GradPoint {
  std::vector<Tensor> inputs;
  std::function<Tensor()> f;
};

struct GradCase {
  std::string name;
  std::function<GradPoint(std::mt19937_64&)> sample;
};

/// Wraps an op with a fixed random projection so the loss exercises a
/// non-uniform upstream gradient: loss = sum(op(...) * R).
inline std::function<Tensor()> projected(std::function<Tensor()> op, std::mt19937_64& rng) {
  Tensor probe;
  {
    NoGradGuard g;
    probe = op();
  }
  auto r = std::make_shared<Tensor>(random_tensor(probe.shape(), rng, -1.0, 1.0));
  return [op, r] { return sum(mul(op(), *r)); };
}

/// Largest fd_error over every coordinate of every input (central
/// differences with step h).
inline double gradcheck(const GradPoint& p, double h = 1e-6) {
  for (const auto& t : p.inputs) t.node()->grad.resize(0);
  backward(p.f());
  double worst = 0.0;
  for (const auto& t : p.inputs) {
    const Eigen::ArrayXd analytic = t.has_grad() ? t.grad() : Eigen::ArrayXd::Zero(t.values().size());
    Tensor leaf = t;
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
      const double x0 = leaf.values()(i);
      double fp, fm;
      {
        NoGradGuard g;
        leaf.mutable_values()(i) = x0 + h;
        fp = p.f().item();
        leaf.mutable_values()(i) = x0 - h;
        fm = p.f().item();
        leaf.mutable_values()(i) = x0;
      }
      worst = std::max(worst, fd_error(analytic(i), (fp - fm) / (2.0 * h)));
    }
  }
  return worst;
}

/// A tiny model (1x6x6 input, blocks 3 and 4 channels, 3 classes) with
/// non-zero random biases.
inline ModelState tiny_model(Method method, std::uint64_t seed, int p = 2, std::size_t block = 0) {
  ModelSpec s;
  s.in_height = s.in_width = 6;
  s.blocks = {{3, 2}, {4, 2}};
  s.classes = 3;
  s.method = method;
  s.p_norm = p;
  s.tau = 0.5;
  s.tau_logit = 0.5;
  s.normalize_after_block = block;
  s.penalty_weight = 0.3;
  ModelState m = init_model(s, seed);
  std::mt19937_64 rng(seed ^ 0xb1a5);
  std::uniform_real_distribution<double> u(0.05, 0.3);
  for (auto& prm : m.params) {
    if (prm.role == ParamRole::bias || prm.role == ParamRole::fc_bias) {
      for (Eigen::Index i = 0; i < prm.value.mutable_values().size(); ++i) prm.value.mutable_values()(i) = u(rng);
    }
  }
  return m;
}

inline std::vector<GradCase> gradient_catalogue() {
  using R = std::mt19937_64;
  std::vector<GradCase> c;
  auto unary = [&](std::string name, Shape shape, std::function<Tensor(const Tensor&)> op, bool kink = false) {
    c.push_back({name, [=](R& rng) {
                   Tensor x = kink ? random_away_from_zero(shape, rng) : random_tensor(shape, rng, -2, 2, true);
                   return GradPoint{{x}, projected([=] { return op(x); }, rng)};
                 }});
  };
  auto binary = [&](std::string name, Shape sa, Shape sb, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    c.push_back({name, [=](R& rng) {
                   Tensor a = random_tensor(sa, rng, -2, 2, true), b = random_tensor(sb, rng, -2, 2, true);
                   return GradPoint{{a, b}, projected([=] { return op(a, b); }, rng)};
                 }});
  };

  binary("matmul", {3, 4}, {4, 2}, [](const Tensor& a, const Tensor& b) { return matmul(a, b); });
  unary("transpose", {3, 5}, [](const Tensor& a) { return transpose(a); });
  binary("conv2d s1 p1", {2, 2, 5, 5}, {3, 2, 3, 3}, [](const Tensor& x, const Tensor& k) { return conv2d(x, k, 1, 1); });
  binary("conv2d s2 p0", {1, 2, 6, 5}, {2, 2, 3, 2}, [](const Tensor& x, const Tensor& k) { return conv2d(x, k, 2, 0); });
  binary("conv2d s2 p1", {2, 1, 6, 6}, {2, 1, 3, 3}, [](const Tensor& x, const Tensor& k) { return conv2d(x, k, 2, 1); });
  binary("add", {3, 4}, {3, 4}, [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary("sub", {3, 4}, {3, 4}, [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  binary("mul", {3, 4}, {3, 4}, [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  unary("scale", {7}, [](const Tensor& a) { return scale(a, -1.7); });
  unary("add_scalar", {7}, [](const Tensor& a) { return add_scalar(a, 0.3); });
  unary("relu", {4, 5}, [](const Tensor& a) { return relu(a); }, true);
  binary("add_row_bias", {4, 3}, {3}, [](const Tensor& a, const Tensor& b) { return add_row_bias(a, b); });
  binary("add_channel_bias", {2, 3, 2, 2}, {3}, [](const Tensor& a, const Tensor& b) { return add_channel_bias(a, b); });
  c.push_back({"div_rows", [](R& rng) {
                 Tensor x = random_tensor({3, 2, 2}, rng, -2, 2, true);
                 Tensor s = random_tensor({3}, rng, 0.5, 2, true);
                 return GradPoint{{x, s}, projected([=] { return div_rows(x, s); }, rng)};
               }});
  unary("sum", {3, 4}, [](const Tensor& a) { return sum(a); });
  unary("mean", {3, 4}, [](const Tensor& a) { return mean(a); });
  unary("global_avg_pool", {2, 3, 3, 2}, [](const Tensor& a) { return global_avg_pool(a); });
  unary("reshape", {2, 6}, [](const Tensor& a) { return reshape(a, {3, 4}); });
  for (int p = 1; p <= 4; ++p) {
    unary("l_p_norm p=" + std::to_string(p), {8}, [p](const Tensor& a) { return l_p_norm(a, p); }, true);
    unary("row_lp_norm p=" + std::to_string(p), {3, 5}, [p](const Tensor& a) { return row_lp_norm(a, p); }, true);
  }
  unary("logsumexp", {6}, [](const Tensor& a) { return logsumexp(a); });
  unary("softmax", {6}, [](const Tensor& a) { return softmax(a); });
  unary("cross_entropy", {5}, [](const Tensor& a) { return cross_entropy(a, 3); });
  unary("logsumexp_rows", {3, 4}, [](const Tensor& a) { return logsumexp_rows(a); });
  unary("softmax_rows", {3, 4}, [](const Tensor& a) { return softmax_rows(a); });
  unary("pick", {3, 4}, [](const Tensor& a) {
    static const std::vector<std::size_t> idx{2, 0, 3};
    return pick(a, idx);
  });
  unary("cross_entropy_rows", {3, 4}, [](const Tensor& a) {
    static const std::vector<std::size_t> y{1, 3, 0};
    return cross_entropy_rows(a, y);
  });

  // Model-level operations.
  for (int p = 1; p <= 4; ++p) {
    c.push_back({"feature_normalize p=" + std::to_string(p), [p](R& rng) {
                   Tensor h = random_away_from_zero({3, 5}, rng);
                   return GradPoint{{h}, projected([=] { return feature_normalize(h, 0.1, p); }, rng)};
                 }});
  }
  unary("logit_normalize", {3, 4}, [](const Tensor& z) { return logit_normalize(z, 0.04); });
  c.push_back({"fc_logits", [](R& rng) {
                 Tensor h = random_tensor({3, 5}, rng, -2, 2, true);
                 Tensor w = random_tensor({4, 5}, rng, -2, 2, true);
                 Tensor b = random_tensor({4}, rng, -2, 2, true);
                 return GradPoint{{h, w, b}, projected([=] { return fc_logits(h, w, b); }, rng)};
               }});

  struct Variant {
    std::string name;
    Method method;
    int p;
    std::size_t block;
  };
  const std::vector<Variant> variants{{"baseline", Method::baseline, 2, 0},
                                      {"t2fnorm", Method::t2fnorm, 2, 0},
                                      {"t2fnorm p=1", Method::t2fnorm, 1, 0},
                                      {"t2fnorm p=3", Method::t2fnorm, 3, 0},
                                      {"t2fnorm block 1", Method::t2fnorm, 2, 1},
                                      {"logitnorm", Method::logitnorm, 2, 0},
                                      {"feature_penalty", Method::feature_penalty, 2, 0}};
  for (const auto& v : variants) {
    c.push_back({"loss wrt parameters (" + v.name + ")", [v](R& rng) {
                   auto m = std::make_shared<ModelState>(tiny_model(v.method, rng(), v.p, v.block));
                   const Tensor x = random_tensor({2, 1, 6, 6}, rng);
                   const std::vector<std::size_t> y{0, 2};
                   std::vector<Tensor> leaves;
                   for (const auto& prm : m->params) leaves.push_back(prm.value);
                   return GradPoint{leaves, [m, x, y] { return loss(*m, x, y); }};
                 }});
  }
  c.push_back({"scoring logits wrt input (t2fnorm)", [](R& rng) {
                 auto m = std::make_shared<ModelState>(frozen_copy(tiny_model(Method::t2fnorm, rng())));
                 Tensor x = random_tensor({2, 1, 6, 6}, rng, -2, 2, true);
                 return GradPoint{{x}, projected([m, x] { return forward_score(*m, x).logits; }, rng)};
               }});
  return c;
}

// ---------------------------------------------------------------------------
// Detection-metric oracles (quadratic, written straight from the definitions)

/// A score-set pair; `tied` draws from a coarse lattice so ties are common.
struct ScorePair {
  std::vector<double> id, ood;
};

inline ScorePair random_score_pair(std::mt19937_64& rng, bool tied) {
  std::uniform_int_distribution<int> size(1, 60), lattice(0, 12);
  std::normal_distribution<double> g(0.0, 1.0);
  ScorePair p;
  const int n_id = size(rng), n_ood = size(rng);
  const double shift = g(rng);
  for (int i = 0; i < n_id; ++i) p.id.push_back(tied ? 0.25 * lattice(rng) : g(rng) + shift);
  for (int i = 0; i < n_ood; ++i) p.ood.push_back(tied ? 0.25 * lattice(rng) - 0.5 : g(rng));
  return p;
}

inline double count_at_least(const std::vector<double>& v, double t) {
  return static_cast<double>(std::count_if(v.begin(), v.end(), [t](double s) { return s >= t; }));
}

/// Sweeps every observed score as a threshold and keeps the largest one whose
/// ID acceptance rate reaches the target. Returns {fpr, threshold}.
inline std::pair<double, double> fpr_sweep_oracle(const std::vector<double>& id, const std::vector<double>& ood,
                                                  double target = 0.95) {
  std::vector<double> candidates = id;
  candidates.insert(candidates.end(), ood.begin(), ood.end());
  double best = -INFINITY;
  for (double t : candidates) {
    if (count_at_least(id, t) / static_cast<double>(id.size()) >= target) best = std::max(best, t);
  }
  return {count_at_least(ood, best) / static_cast<double>(ood.size()), best};
}

inline double auroc_pairwise_oracle(const std::vector<double>& id, const std::vector<double>& ood) {
  double wins = 0.0;
  for (double a : id)
    for (double b : ood) wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  return wins / (static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

/// Enumerates distinct thresholds from high to low; each contributes its
/// recall increment times its precision.
inline double aupr_enumeration_oracle(const std::vector<double>& id, const std::vector<double>& ood) {
  std::vector<double> t = id;
  t.insert(t.end(), ood.begin(), ood.end());
  std::sort(t.begin(), t.end(), std::greater<>());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  double area = 0.0, prev = 0.0;
  for (double th : t) {
    const double tp = count_at_least(id, th), fp = count_at_least(ood, th);
    const double recall = tp / static_cast<double>(id.size());
    area += (recall - prev) * (tp / (tp + fp));
    prev = recall;
  }
  return area;
}

}  // namespace t2fnorm::testing

#endif  // T2FNORM_TESTS_SUPPORT_HPP
