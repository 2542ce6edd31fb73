#include "t2fnorm/nn.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace t2fnorm {

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  const auto n = shape_numel(shape);
  Eigen::ArrayXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// x / (tau * (||pool||_p + eps)) per sample, where pool is the per-sample
// pooled representation of x (x itself when already pooled).
Tensor normalize_by(const Tensor& x, const Tensor& pooled, double tau, int p) {
  return div_rows(x, scale(add_scalar(row_lp_norm(pooled, p), kNormEpsilon), tau));
}

Tensor divide_by_tau(const Tensor& x, double tau) {
  return div_rows(x, Tensor::constant({x.dim(0)}, tau));
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::baseline: return "baseline";
    case Method::t2fnorm: return "t2fnorm";
    case Method::logitnorm: return "logitnorm";
    case Method::feature_penalty: return "feature_penalty";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (auto m : {Method::baseline, Method::t2fnorm, Method::logitnorm, Method::feature_penalty}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown method '" + name + "'");
}

std::string to_string(ParamRole r) {
  switch (r) {
    case ParamRole::conv_kernel: return "conv-kernel";
    case ParamRole::bias: return "bias";
    case ParamRole::fc_weight: return "fc-weight";
    case ParamRole::fc_bias: return "fc-bias";
  }
  return "unknown";
}

void ModelSpec::validate() const {
  if (classes == 0) throw std::invalid_argument("ModelSpec: classes must be positive");
  if (in_channels == 0 || in_height == 0 || in_width == 0) {
    throw std::invalid_argument("ModelSpec: input extents must be positive");
  }
  if (blocks.empty()) throw std::invalid_argument("ModelSpec: at least one conv block is required");
  for (const auto& b : blocks) {
    if (b.out_channels == 0 || b.stride == 0) {
      throw std::invalid_argument("ModelSpec: block channels and stride must be positive");
    }
  }
  if (!(tau > 0.0)) throw std::invalid_argument("ModelSpec: tau must be positive");
  if (!(tau_logit > 0.0)) throw std::invalid_argument("ModelSpec: tau_logit must be positive");
  if (p_norm < 1 || p_norm > 4) throw std::invalid_argument("ModelSpec: p_norm must be in {1,2,3,4}");
  if (normalize_after_block > blocks.size()) {
    throw std::invalid_argument("ModelSpec: normalize_after_block exceeds block count");
  }
  if (!(penalty_weight >= 0.0)) throw std::invalid_argument("ModelSpec: penalty_weight must be >= 0");
}

// ---------------------------------------------------------------------------
// ModelState

const Parameter& ModelState::param(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

Parameter& ModelState::param(const std::string& name) {
  return const_cast<Parameter&>(static_cast<const ModelState&>(*this).param(name));
}

const Tensor& ModelState::conv_kernel(std::size_t block) const {
  return param("block" + std::to_string(block + 1) + ".kernel").value;
}

const Tensor& ModelState::conv_bias(std::size_t block) const {
  return param("block" + std::to_string(block + 1) + ".bias").value;
}

const Tensor& ModelState::fc_weight() const { return param("fc.weight").value; }
const Tensor& ModelState::fc_bias() const { return param("fc.bias").value; }

void ModelState::zero_grad() {
  for (auto& p : params) p.value.zero_grad();
}

ModelState init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelState m;
  m.spec = spec;
  std::mt19937_64 rng(seed);
  std::size_t in = spec.in_channels;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const std::size_t out = spec.blocks[i].out_channels;
    const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
    const std::string prefix = "block" + std::to_string(i + 1);
    m.params.push_back({prefix + ".kernel", ParamRole::conv_kernel,
                        uniform_tensor({out, in, 3, 3}, bound, rng), {}});
    m.params.push_back({prefix + ".bias", ParamRole::bias, Tensor::zeros({out}, true), {}});
    in = out;
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  m.params.push_back(
      {"fc.weight", ParamRole::fc_weight, uniform_tensor({spec.classes, in}, bound, rng), {}});
  m.params.push_back({"fc.bias", ParamRole::fc_bias, Tensor::zeros({spec.classes}, true), {}});
  return m;
}

ModelState frozen_copy(const ModelState& m) {
  ModelState out;
  out.spec = m.spec;
  out.epoch = m.epoch;
  for (const auto& p : m.params) out.params.push_back({p.name, p.role, p.value.detach(), {}});
  return out;
}

// ---------------------------------------------------------------------------
// Forward routes

Tensor feature_normalize(const Tensor& h_star, double tau, int p) {
  if (!(tau > 0.0)) throw std::invalid_argument("feature_normalize: tau must be positive");
  return normalize_by(h_star, h_star, tau, p);
}

Tensor logit_normalize(const Tensor& z, double tau_logit) {
  return div_rows(z, scale(add_scalar(row_lp_norm(z, 2), kNormEpsilon), tau_logit));
}

Tensor fc_logits(const Tensor& h, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(matmul(h, transpose(weight)), bias);
}

namespace {

void check_input(const ModelSpec& spec, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != spec.in_channels || x.dim(2) != spec.in_height ||
      x.dim(3) != spec.in_width) {
    throw std::invalid_argument("model input has shape " + shape_string(x.shape()) +
                                ", expected Nx" + std::to_string(spec.in_channels) + "x" +
                                std::to_string(spec.in_height) + "x" +
                                std::to_string(spec.in_width));
  }
}

bool normalizing_route(FeaturePath path) { return path != FeaturePath::score; }

// Pooled feature of the last block, with any intermediate T2FNorm step
// applied according to the route.
Tensor trunk(const ModelState& m, const Tensor& x, FeaturePath path) {
  check_input(m.spec, x);
  const ModelSpec& s = m.spec;
  const bool t2f = s.method == Method::t2fnorm;
  const std::size_t norm_block = s.normalization_block();
  Tensor h = x;
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    h = relu(add_channel_bias(conv2d(h, m.conv_kernel(i), s.blocks[i].stride, 1), m.conv_bias(i)));
    if (t2f && i + 1 == norm_block && i + 1 < s.blocks.size()) {
      h = normalizing_route(path) ? normalize_by(h, global_avg_pool(h), s.tau, s.p_norm)
                                  : divide_by_tau(h, s.tau);
    }
  }
  return global_avg_pool(h);
}

Tensor head(const ModelState& m, const Tensor& h_star, FeaturePath path, Tensor* h_scaled_out) {
  const ModelSpec& s = m.spec;
  Tensor h_scaled = h_star;
  if (s.method == Method::t2fnorm && s.normalizes_final_block()) {
    h_scaled = normalizing_route(path) ? feature_normalize(h_star, s.tau, s.p_norm)
                                       : divide_by_tau(h_star, s.tau);
  }
  Tensor logits = fc_logits(h_scaled, m.fc_weight(), m.fc_bias());
  if (s.method == Method::logitnorm && normalizing_route(path)) {
    logits = logit_normalize(logits, s.tau_logit);
  }
  if (h_scaled_out) *h_scaled_out = h_scaled;
  return logits;
}

}  // namespace

ForwardResult forward(const ModelState& m, const Tensor& x, FeaturePath path) {
  ForwardResult r;
  r.h_star = trunk(m, x, path);
  r.logits = head(m, r.h_star, path, &r.h_scaled);
  return r;
}

Tensor extract_feature(const ModelState& m, const Tensor& x) {
  return trunk(m, x, FeaturePath::train);
}

Tensor head_train(const ModelState& m, const Tensor& h_star) {
  return head(m, h_star, FeaturePath::train, nullptr);
}

Tensor head_score(const ModelState& m, const Tensor& h_star) {
  return head(m, h_star, FeaturePath::score, nullptr);
}

Tensor forward_train(const ModelState& m, const Tensor& x) {
  return forward(m, x, FeaturePath::train).logits;
}

ForwardResult forward_score(const ModelState& m, const Tensor& x, bool normalize_at_scoring) {
  return forward(m, x, normalize_at_scoring ? FeaturePath::score_normalized : FeaturePath::score);
}

std::vector<std::size_t> argmax_rows(const RowMatrix& logits) {
  std::vector<std::size_t> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < logits.cols(); ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
  }
  return out;
}

std::vector<std::size_t> classify(const ModelState& m, const Tensor& x) {
  return argmax_rows(forward_train(m, x).matrix());
}

Objective training_objective(const ModelState& m, const Tensor& x,
                             const std::vector<std::size_t>& labels) {
  const ForwardResult r = forward(m, x, FeaturePath::train);
  Tensor l = cross_entropy_rows(r.logits, labels);
  if (m.spec.method == Method::feature_penalty && m.spec.penalty_weight != 0.0) {
    l = add(l, scale(mean(row_lp_norm(r.h_star, 2)), m.spec.penalty_weight));
  }
  return {l, r.logits, r.h_star};
}

Tensor loss(const ModelState& m, const Tensor& x, const std::vector<std::size_t>& labels) {
  return training_objective(m, x, labels).loss;
}

}  // namespace t2fnorm
