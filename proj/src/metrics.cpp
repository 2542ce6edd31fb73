#include "t2fnorm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace t2fnorm {

namespace {

void require_nonempty(std::span<const double> id, std::span<const double> ood, const char* op) {
  if (id.empty() || ood.empty()) throw std::invalid_argument(std::string(op) + ": empty score set");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

FprAtTpr fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                    double tpr_target) {
  require_nonempty(id_scores, ood_scores, "fpr_at_tpr");
  std::vector<double> id(id_scores.begin(), id_scores.end());
  std::sort(id.begin(), id.end(), std::greater<>());
  const double n = static_cast<double>(id.size());
  // The threshold must be an ID score: between ID scores the rate is flat.
  std::size_t k = 1;
  while (k < id.size() && static_cast<double>(k) / n < tpr_target) ++k;
  const double lambda = id[k - 1];
  const auto accepted_id = std::count_if(id.begin(), id.end(), [&](double s) { return s >= lambda; });
  const auto accepted_ood =
      std::count_if(ood_scores.begin(), ood_scores.end(), [&](double s) { return s >= lambda; });
  return {static_cast<double>(accepted_ood) / static_cast<double>(ood_scores.size()), lambda,
          static_cast<double>(accepted_id) / n};
}

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require_nonempty(id_scores, ood_scores, "auroc");
  std::vector<double> ood(ood_scores.begin(), ood_scores.end());
  std::sort(ood.begin(), ood.end());
  // Integer-valued pair counts keep the result independent of summation order.
  double wins2 = 0.0;
  for (double s : id_scores) {
    const auto lo = std::lower_bound(ood.begin(), ood.end(), s);
    const auto hi = std::upper_bound(lo, ood.end(), s);
    wins2 += 2.0 * static_cast<double>(lo - ood.begin()) + static_cast<double>(hi - lo);
  }
  return wins2 / (2.0 * static_cast<double>(id_scores.size()) * static_cast<double>(ood.size()));
}

double aupr(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require_nonempty(id_scores, ood_scores, "aupr");
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) items.push_back({s, true});
  for (double s : ood_scores) items.push_back({s, false});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

  const double positives = static_cast<double>(id_scores.size());
  double area = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < items.size();) {
    const double t = items[i].score;
    for (; i < items.size() && items[i].score == t; ++i) (items[i].positive ? tp : fp)++;
    const double recall = static_cast<double>(tp) / positives;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

double aupr_out(std::span<const double> id_scores, std::span<const double> ood_scores) {
  std::vector<double> id_neg(id_scores.size()), ood_neg(ood_scores.size());
  std::transform(id_scores.begin(), id_scores.end(), id_neg.begin(), std::negate<>());
  std::transform(ood_scores.begin(), ood_scores.end(), ood_neg.begin(), std::negate<>());
  return aupr(ood_neg, id_neg);
}

MetricsReport detection_metrics(std::span<const double> id_scores, std::span<const double> ood_scores) {
  MetricsReport r;
  const FprAtTpr f = fpr_at_tpr(id_scores, ood_scores, 0.95);
  r.fpr_at_95 = f.fpr;
  r.threshold = f.threshold;
  r.auroc = auroc(id_scores, ood_scores);
  r.aupr = aupr(id_scores, ood_scores);
  r.aupr_out = aupr_out(id_scores, ood_scores);
  return r;
}

std::vector<std::pair<std::string, double>> metric_fields(const MetricsReport& r) {
  return {{"fpr_at_95", r.fpr_at_95},
          {"auroc", r.auroc},
          {"aupr", r.aupr},
          {"aupr_out", r.aupr_out},
          {"threshold", r.threshold},
          {"id_accuracy", r.id_accuracy},
          {"separability_feature", r.separability_feature},
          {"separability_logit", r.separability_logit},
          {"id_feature_norm", r.id_feature_norm},
          {"ood_feature_norm", r.ood_feature_norm},
          {"id_logit_norm", r.id_logit_norm},
          {"ood_logit_norm", r.ood_logit_norm}};
}

double& metric_field(MetricsReport& r, const std::string& name) {
  if (name == "fpr_at_95") return r.fpr_at_95;
  if (name == "auroc") return r.auroc;
  if (name == "aupr") return r.aupr;
  if (name == "aupr_out") return r.aupr_out;
  if (name == "threshold") return r.threshold;
  if (name == "id_accuracy") return r.id_accuracy;
  if (name == "separability_feature") return r.separability_feature;
  if (name == "separability_logit") return r.separability_logit;
  if (name == "id_feature_norm") return r.id_feature_norm;
  if (name == "ood_feature_norm") return r.ood_feature_norm;
  if (name == "id_logit_norm") return r.id_logit_norm;
  if (name == "ood_logit_norm") return r.ood_logit_norm;
  throw std::invalid_argument("unknown metric '" + name + "'");
}

double metric_field(const MetricsReport& r, const std::string& name) {
  return metric_field(const_cast<MetricsReport&>(r), name);
}

std::string to_key_value(const MetricsReport& r) {
  std::ostringstream os;
  for (const auto& [k, v] : metric_fields(r)) os << k << '=' << num(v) << '\n';
  return os.str();
}

std::string metrics_csv_header() {
  std::string out;
  for (const auto& [k, v] : metric_fields(MetricsReport{})) out += (out.empty() ? "" : ",") + k;
  return out;
}

std::string to_csv_row(const MetricsReport& r) {
  std::string out;
  bool first = true;
  for (const auto& [k, v] : metric_fields(r)) {
    out += (first ? "" : ",") + num(v);
    first = false;
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Row>
SignedMeans signed_means(const Row& values) {
  SignedMeans s;
  double sum = 0.0, neg = 0.0, pos = 0.0;
  std::size_t n_neg = 0, n_pos = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double v = values(i);
    sum += v;
    if (v < 0.0) {
      neg += v;
      ++n_neg;
    } else if (v > 0.0) {
      pos += v;
      ++n_pos;
    }
  }
  s.all = values.size() ? sum / static_cast<double>(values.size()) : 0.0;
  s.has_negative = n_neg > 0;
  s.has_positive = n_pos > 0;
  s.negative = n_neg ? neg / static_cast<double>(n_neg) : 0.0;
  s.positive = n_pos ? pos / static_cast<double>(n_pos) : 0.0;
  return s;
}

double row_variance(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  if (row.size() == 0) return 0.0;
  const double mu = row.mean();
  return (row.array() - mu).square().sum() / static_cast<double>(row.size());
}

double mean_row_variance(const RowMatrix& w) {
  if (w.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < w.rows(); ++i) total += row_variance(w.row(i));
  return total / static_cast<double>(w.rows());
}

}  // namespace

WeightStats weight_stats(const RowMatrix& w, const RowMatrix* reference) {
  WeightStats s;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    s.per_class.push_back(signed_means(w.row(i)));
    s.per_class_variance.push_back(row_variance(w.row(i)));
  }
  const Eigen::Map<const Eigen::VectorXd> flat(w.data(), w.size());
  s.overall = signed_means(flat);
  s.mean_variance = mean_row_variance(w);
  if (reference) {
    const double ref = mean_row_variance(*reference);
    if (ref > 0.0) s.variance_ratio = s.mean_variance / ref;
  }
  return s;
}

WeightStats fc_weight_stats(const ModelState& m, const ModelState* reference) {
  const RowMatrix w = m.fc_weight().matrix();
  if (!reference) return weight_stats(w, nullptr);
  const RowMatrix ref = reference->fc_weight().matrix();
  return weight_stats(w, &ref);
}

// ---------------------------------------------------------------------------

std::size_t histogram_bin(double score, std::size_t bins) {
  if (!(score > 0.0)) return 0;
  const double pos = std::floor(score * static_cast<double>(bins));
  if (pos >= static_cast<double>(bins)) return bins - 1;
  return static_cast<std::size_t>(pos);
}

ScoreHistogram msp_histogram(std::span<const double> id_scores, std::span<const double> ood_scores,
                             std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("msp_histogram: need at least two bins");
  ScoreHistogram h;
  h.bins = bins;
  h.id_counts.assign(bins, 0);
  h.ood_counts.assign(bins, 0);
  for (double s : id_scores) ++h.id_counts[histogram_bin(s, bins)];
  for (double s : ood_scores) ++h.ood_counts[histogram_bin(s, bins)];
  h.id_mass.assign(bins, 0.0);
  h.ood_mass.assign(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) {
    if (!id_scores.empty()) h.id_mass[b] = static_cast<double>(h.id_counts[b]) / static_cast<double>(id_scores.size());
    if (!ood_scores.empty()) h.ood_mass[b] = static_cast<double>(h.ood_counts[b]) / static_cast<double>(ood_scores.size());
    h.overlap += std::min(h.id_mass[b], h.ood_mass[b]);
  }
  return h;
}

}  // namespace t2fnorm
