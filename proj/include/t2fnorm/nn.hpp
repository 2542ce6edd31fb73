#ifndef T2FNORM_NN_HPP
#define T2FNORM_NN_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "t2fnorm/tensor.hpp"

namespace t2fnorm {

/// Denominator floor shared by every normalization: x / (||x|| + kNormEpsilon).
inline constexpr double kNormEpsilon = 1e-12;

enum class Method { baseline, t2fnorm, logitnorm, feature_penalty };

std::string to_string(Method m);
Method parse_method(const std::string& name);

/// One 3x3 convolution (padding 1) followed by ReLU.
struct ConvBlock {
  std::size_t out_channels = 16;
  std::size_t stride = 2;
};

struct ModelSpec {
  std::size_t in_channels = 1;
  std::size_t in_height = 16;
  std::size_t in_width = 16;
  std::vector<ConvBlock> blocks{{16, 2}, {32, 2}};
  std::size_t classes = 4;
  Method method = Method::baseline;
  double tau = 0.1;
  double tau_logit = 0.04;
  int p_norm = 2;
  // 1-based block after which T2FNorm normalizes; 0 selects the final block.
  std::size_t normalize_after_block = 0;
  double penalty_weight = 0.01;

  void validate() const;
  std::size_t feature_dim() const { return blocks.empty() ? in_channels : blocks.back().out_channels; }
  std::size_t normalization_block() const {
    return normalize_after_block == 0 ? blocks.size() : normalize_after_block;
  }
  bool normalizes_final_block() const { return normalization_block() == blocks.size(); }
};

enum class ParamRole { conv_kernel, bias, fc_weight, fc_bias };

std::string to_string(ParamRole r);

struct Parameter {
  std::string name;
  ParamRole role = ParamRole::bias;
  Tensor value;
  // SGD momentum buffer; empty until the first step.
  Eigen::ArrayXd velocity;
};

struct ModelState {
  ModelSpec spec;
  std::vector<Parameter> params;
  std::size_t epoch = 0;

  const Parameter& param(const std::string& name) const;
  Parameter& param(const std::string& name);
  const Tensor& conv_kernel(std::size_t block) const;
  const Tensor& conv_bias(std::size_t block) const;
  const Tensor& fc_weight() const;
  const Tensor& fc_bias() const;
  void zero_grad();
};

ModelState init_model(const ModelSpec& spec, std::uint64_t seed);
/// Value copy whose parameters do not require grad; safe for concurrent scoring.
ModelState frozen_copy(const ModelState& m);

/// Which feature route the head sees.
enum class FeaturePath {
  train,            // normalized (classification and training)
  score,            // h*/tau, no norm division (OOD scoring)
  score_normalized  // ablation: scoring through the normalized route
};

struct ForwardResult {
  Tensor logits;
  // Final pooled post-ReLU feature along the chosen route.
  Tensor h_star;
  // Input to the FC layer.
  Tensor h_scaled;
};

ForwardResult forward(const ModelState& m, const Tensor& x, FeaturePath path);

/// Penultimate feature phi(x); for non-final placements the intermediate
/// normalization of the training route is applied.
Tensor extract_feature(const ModelState& m, const Tensor& x);
/// Row-wise h / (tau * (||h||_p + eps)).
Tensor feature_normalize(const Tensor& h_star, double tau, int p);
/// Row-wise z / (tau_logit * (||z||_2 + eps)).
Tensor logit_normalize(const Tensor& z, double tau_logit);
/// FC(h) = h W^T + b
Tensor fc_logits(const Tensor& h, const Tensor& weight, const Tensor& bias);

/// Training-route head applied to a penultimate feature (final placement).
Tensor head_train(const ModelState& m, const Tensor& h_star);
/// Scoring-route head applied to a penultimate feature (final placement).
Tensor head_score(const ModelState& m, const Tensor& h_star);

Tensor forward_train(const ModelState& m, const Tensor& x);
ForwardResult forward_score(const ModelState& m, const Tensor& x, bool normalize_at_scoring = false);

/// Row argmax with ties going to the lowest index.
std::vector<std::size_t> argmax_rows(const RowMatrix& logits);
std::vector<std::size_t> classify(const ModelState& m, const Tensor& x);

struct Objective {
  Tensor loss;
  Tensor logits;
  Tensor h_star;
};

/// Loss together with the training-route logits it was computed from.
Objective training_objective(const ModelState& m, const Tensor& x,
                             const std::vector<std::size_t>& labels);

/// Mean cross-entropy of the training route, plus the feature-norm penalty
/// for Method::feature_penalty.
Tensor loss(const ModelState& m, const Tensor& x, const std::vector<std::size_t>& labels);

// Snapshot container (binary, bitwise round-trip).
void save_model(const ModelState& m, std::ostream& out);
ModelState load_model(std::istream& in);
void save_model(const ModelState& m, const std::filesystem::path& path);
ModelState load_model(const std::filesystem::path& path);

}  // namespace t2fnorm

#endif  // T2FNORM_NN_HPP
