#ifndef T2FNORM_SCORE_HPP
#define T2FNORM_SCORE_HPP

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "t2fnorm/data.hpp"
#include "t2fnorm/nn.hpp"

namespace t2fnorm {

class ScoringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ScorerKind { msp, tempscale, energy, odin, gradnorm, dice };

std::string to_string(ScorerKind k);
ScorerKind parse_scorer_kind(const std::string& name);

struct ScorerSpec {
  ScorerKind kind = ScorerKind::msp;
  double odin_temperature = 1000.0;
  double odin_epsilon = 0.0014;
  double dice_sparsity = 0.9;
  double tempscale_T = 1.0;
  bool normalize_at_scoring = false;

  void validate() const;
  /// Short label such as "msp", "odin", "dice_p0.5"; excludes the normalization flag.
  std::string label() const;
};

/// Higher is more in-distribution for every scorer.
struct ScoreSet {
  std::vector<double> scores;
  std::string dataset_id;
  ScorerSpec spec;
  std::string model_id;
};

// Logit-only scorers. `logits` is one sample's logit vector.
double msp(const Eigen::Ref<const Eigen::VectorXd>& logits);
double tempscale(const Eigen::Ref<const Eigen::VectorXd>& logits, double temperature);
double energy(const Eigen::Ref<const Eigen::VectorXd>& logits);

/// Picks the temperature from `grid` with the lowest mean NLL of `logits`
/// against `labels`; ties go to the earlier grid entry.
double fit_temperature(const RowMatrix& logits, std::span<const std::size_t> labels,
                       std::span<const double> grid);
std::vector<double> default_temperature_grid();

/// Perturbed input x - eps * sign(grad_x(-log max softmax(logits / T))).
Tensor odin_perturb(const ModelState& m, const Tensor& x, double temperature, double epsilon,
                    bool normalize_at_scoring = false);
/// Max softmax of logits(x_perturbed) / T for each row of x.
Eigen::VectorXd odin(const ModelState& m, const Tensor& x, double temperature, double epsilon,
                     bool normalize_at_scoring = false);

/// L1 norm of d KL(uniform || softmax(FC(h))) / d W for each row of the
/// FC input `h` (bias excluded).
Eigen::VectorXd gradnorm_from_features(const RowMatrix& h, const Tensor& fc_weight,
                                       const Tensor& fc_bias);
Eigen::VectorXd gradnorm(const ModelState& m, const Tensor& x, bool normalize_at_scoring = false);

/// 0/1 mask over the FC weight matrix, C x D.
struct DiceMask {
  RowMatrix keep;
  double sparsity = 0.0;
  Eigen::VectorXd mean_feature;
};

/// Keeps the top (1 - p) fraction of W .* mean_feature (global top-k, ties
/// resolved toward the lower flat index).
DiceMask dice_mask_from_mean(const RowMatrix& fc_weight, const Eigen::VectorXd& mean_feature,
                             double sparsity);
/// Mean FC-input feature over up to `max_samples` ID samples, then the mask.
DiceMask dice_precompute(const ModelState& m, const Dataset& id_sample, double sparsity,
                         bool normalize_at_scoring = false, std::size_t max_samples = 2048);
Eigen::VectorXd dice_score(const ModelState& m, const Tensor& x, const DiceMask& mask,
                           bool normalize_at_scoring = false);

/// Applies `spec` to every sample through the scoring route. DICE requires a
/// precomputed mask.
ScoreSet score_dataset(const ModelState& m, const Dataset& data, const ScorerSpec& spec,
                       const DiceMask* mask = nullptr, const std::string& model_id = "");

/// CSV: sample_index,score
void write_score_csv(const ScoreSet& s, const std::filesystem::path& path);
std::vector<double> read_score_csv(const std::filesystem::path& path);
/// <model>__<scorer>__<dataset>__norm<0|1>.csv
std::string score_file_name(const ScoreSet& s);

}  // namespace t2fnorm

#endif  // T2FNORM_SCORE_HPP
