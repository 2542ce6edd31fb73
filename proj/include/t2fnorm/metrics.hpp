#ifndef T2FNORM_METRICS_HPP
#define T2FNORM_METRICS_HPP

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "t2fnorm/nn.hpp"

namespace t2fnorm {

// ID samples are the positive class throughout; a score >= threshold means ID.

struct FprAtTpr {
  double fpr = 0.0;
  double threshold = 0.0;
  double tpr = 0.0;
};

/// Threshold is the largest value whose ID acceptance rate reaches `tpr_target`.
FprAtTpr fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                    double tpr_target = 0.95);

/// Mann-Whitney form with half credit for ties.
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Step-wise area under precision-recall with ID as the positive class.
double aupr(std::span<const double> id_scores, std::span<const double> ood_scores);
/// Same area with OOD as the positive class (scores negated).
double aupr_out(std::span<const double> id_scores, std::span<const double> ood_scores);

struct MetricsReport {
  double fpr_at_95 = 0.0;
  double auroc = 0.0;
  double aupr = 0.0;
  double aupr_out = 0.0;
  double threshold = 0.0;
  double id_accuracy = 0.0;
  double separability_feature = 0.0;
  double separability_logit = 0.0;
  double id_feature_norm = 0.0;
  double ood_feature_norm = 0.0;
  double id_logit_norm = 0.0;
  double ood_logit_norm = 0.0;
};

/// Fills the three detection metrics and the threshold; diagnostics stay zero.
MetricsReport detection_metrics(std::span<const double> id_scores, std::span<const double> ood_scores);

/// (name, value) pairs in the fixed reporting order.
std::vector<std::pair<std::string, double>> metric_fields(const MetricsReport& r);
/// Field by name; throws std::invalid_argument for unknown names.
double& metric_field(MetricsReport& r, const std::string& name);
double metric_field(const MetricsReport& r, const std::string& name);

/// Flat "key=value" lines in a fixed order.
std::string to_key_value(const MetricsReport& r);
/// CSV header and row in the same fixed order.
std::string metrics_csv_header();
std::string to_csv_row(const MetricsReport& r);

// ---------------------------------------------------------------------------
// FC weight statistics

struct SignedMeans {
  double all = 0.0;
  double negative = 0.0;
  double positive = 0.0;
  // False when the partition was empty; the mean is then reported as 0.
  bool has_negative = false;
  bool has_positive = false;
};

struct WeightStats {
  std::vector<SignedMeans> per_class;
  SignedMeans overall;
  std::vector<double> per_class_variance;
  double mean_variance = 0.0;
  std::optional<double> variance_ratio;
};

WeightStats weight_stats(const RowMatrix& fc_weight, const RowMatrix* reference = nullptr);
WeightStats fc_weight_stats(const ModelState& m, const ModelState* reference = nullptr);

// ---------------------------------------------------------------------------
// Score histogram over [0, 1]

struct ScoreHistogram {
  std::size_t bins = 0;
  std::vector<std::size_t> id_counts;
  std::vector<std::size_t> ood_counts;
  std::vector<double> id_mass;
  std::vector<double> ood_mass;
  // Sum over bins of min(id_mass, ood_mass).
  double overlap = 0.0;
};

/// Bin index floor(s * bins), clamped into [0, bins - 1].
std::size_t histogram_bin(double score, std::size_t bins);
ScoreHistogram msp_histogram(std::span<const double> id_scores, std::span<const double> ood_scores,
                             std::size_t bins);

}  // namespace t2fnorm

#endif  // T2FNORM_METRICS_HPP
