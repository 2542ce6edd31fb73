#include "t2fnorm/score.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace t2fnorm {

namespace {

constexpr std::size_t kScoreBatch = 256;

Eigen::VectorXd row(const RowMatrix& m, Eigen::Index i) { return m.row(i).transpose(); }

RowMatrix score_logits(const ModelState& m, const Tensor& x, bool normalize_at_scoring) {
  NoGradGuard no_grad;
  return forward_score(m, x, normalize_at_scoring).logits.matrix();
}

}  // namespace

std::string to_string(ScorerKind k) {
  switch (k) {
    case ScorerKind::msp: return "msp";
    case ScorerKind::tempscale: return "tempscale";
    case ScorerKind::energy: return "energy";
    case ScorerKind::odin: return "odin";
    case ScorerKind::gradnorm: return "gradnorm";
    case ScorerKind::dice: return "dice";
  }
  return "unknown";
}

ScorerKind parse_scorer_kind(const std::string& name) {
  for (auto k : {ScorerKind::msp, ScorerKind::tempscale, ScorerKind::energy, ScorerKind::odin,
                 ScorerKind::gradnorm, ScorerKind::dice}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown scorer '" + name + "'");
}

void ScorerSpec::validate() const {
  if (!(odin_temperature > 0.0)) throw std::invalid_argument("ScorerSpec: odin_temperature must be > 0");
  if (!(odin_epsilon >= 0.0)) throw std::invalid_argument("ScorerSpec: odin_epsilon must be >= 0");
  if (!(dice_sparsity >= 0.0 && dice_sparsity <= 1.0)) {
    throw std::invalid_argument("ScorerSpec: dice_sparsity must lie in [0, 1]");
  }
  if (!(tempscale_T > 0.0)) throw std::invalid_argument("ScorerSpec: tempscale_T must be > 0");
}

std::string ScorerSpec::label() const {
  char buf[64];
  switch (kind) {
    case ScorerKind::dice:
      std::snprintf(buf, sizeof buf, "dice_p%g", dice_sparsity);
      return buf;
    case ScorerKind::tempscale:
      std::snprintf(buf, sizeof buf, "tempscale_T%g", tempscale_T);
      return buf;
    case ScorerKind::odin:
      if (odin_temperature == 1000.0 && odin_epsilon == 0.0014) return "odin";
      std::snprintf(buf, sizeof buf, "odin_T%g_eps%g", odin_temperature, odin_epsilon);
      return buf;
    default:
      return to_string(kind);
  }
}

// ---------------------------------------------------------------------------
// Logit scorers

double msp(const Eigen::Ref<const Eigen::VectorXd>& logits) {
  if (logits.size() == 0) throw ScoringError("msp: empty logit vector");
  const double top = logits.maxCoeff();
  return 1.0 / (logits.array() - top).exp().sum();
}

double tempscale(const Eigen::Ref<const Eigen::VectorXd>& logits, double temperature) {
  if (!(temperature > 0.0)) throw ScoringError("tempscale: temperature must be positive");
  return msp(logits / temperature);
}

double energy(const Eigen::Ref<const Eigen::VectorXd>& logits) {
  if (logits.size() == 0) throw ScoringError("energy: empty logit vector");
  const double top = logits.maxCoeff();
  return top + std::log((logits.array() - top).exp().sum());
}

std::vector<double> default_temperature_grid() {
  std::vector<double> grid;
  for (int i = -10; i <= 10; ++i) grid.push_back(std::pow(10.0, i / 10.0));
  return grid;
}

double fit_temperature(const RowMatrix& logits, std::span<const std::size_t> labels,
                       std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("fit_temperature: empty grid");
  if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.empty()) {
    throw std::invalid_argument("fit_temperature: logits and labels disagree");
  }
  double best_t = grid.front(), best_nll = std::numeric_limits<double>::infinity();
  for (double t : grid) {
    if (!(t > 0.0)) throw std::invalid_argument("fit_temperature: grid values must be positive");
    double nll = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const Eigen::VectorXd z = row(logits, i) / t;
      nll += energy(z) - z(static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]));
    }
    nll /= static_cast<double>(labels.size());
    if (nll < best_nll) {
      best_nll = nll;
      best_t = t;
    }
  }
  return best_t;
}

// ---------------------------------------------------------------------------
// ODIN

Tensor odin_perturb(const ModelState& m, const Tensor& x, double temperature, double epsilon,
                    bool normalize_at_scoring) {
  if (!(epsilon >= 0.0)) throw ScoringError("odin: epsilon must be non-negative");
  if (!(temperature > 0.0)) throw ScoringError("odin: temperature must be positive");
  if (epsilon == 0.0) return x.detach();

  const ModelState frozen = frozen_copy(m);
  Tensor input(x.shape(), x.values(), true);
  const Tensor z = forward_score(frozen, input, normalize_at_scoring).logits;
  const Tensor zt = scale(z, 1.0 / temperature);
  const std::vector<std::size_t> top = argmax_rows(z.matrix());
  // Sum over rows of -log max softmax(z / T); samples do not interact.
  backward(sum(sub(logsumexp_rows(zt), pick(zt, top))));

  Eigen::ArrayXd perturbed = x.values();
  const Eigen::ArrayXd& g = input.grad();
  for (Eigen::Index i = 0; i < perturbed.size(); ++i) {
    const double sign = g(i) > 0.0 ? 1.0 : (g(i) < 0.0 ? -1.0 : 0.0);
    perturbed(i) -= epsilon * sign;
  }
  return Tensor(x.shape(), std::move(perturbed));
}

Eigen::VectorXd odin(const ModelState& m, const Tensor& x, double temperature, double epsilon,
                     bool normalize_at_scoring) {
  const Tensor perturbed = odin_perturb(m, x, temperature, epsilon, normalize_at_scoring);
  const RowMatrix logits = score_logits(m, perturbed, normalize_at_scoring);
  Eigen::VectorXd out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) out(i) = tempscale(row(logits, i), temperature);
  return out;
}

// ---------------------------------------------------------------------------
// GradNorm

Eigen::VectorXd gradnorm_from_features(const RowMatrix& h, const Tensor& fc_weight,
                                       const Tensor& fc_bias) {
  const std::size_t classes = fc_weight.dim(0);
  const double log_c = std::log(static_cast<double>(classes));
  const Tensor bias = fc_bias.detach();
  Eigen::VectorXd out(h.rows());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    Tensor w(fc_weight.shape(), fc_weight.values(), true);
    const Tensor hi = Tensor::from_matrix(h.row(i));
    const Tensor z = fc_logits(hi, w, bias);
    // KL(u || softmax(z)) = logsumexp(z) - mean(z) - log C
    const Tensor kl = add_scalar(
        add(sum(logsumexp_rows(z)), scale(sum(z), -1.0 / static_cast<double>(classes))), -log_c);
    backward(kl);
    out(i) = w.grad().abs().sum();
  }
  return out;
}

Eigen::VectorXd gradnorm(const ModelState& m, const Tensor& x, bool normalize_at_scoring) {
  RowMatrix h;
  {
    NoGradGuard no_grad;
    h = forward_score(m, x, normalize_at_scoring).h_scaled.matrix();
  }
  return gradnorm_from_features(h, m.fc_weight(), m.fc_bias());
}

// ---------------------------------------------------------------------------
// DICE

DiceMask dice_mask_from_mean(const RowMatrix& w, const Eigen::VectorXd& mean_feature, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ScoringError("dice: sparsity must lie in [0, 1]");
  if (mean_feature.size() != w.cols()) throw ScoringError("dice: feature length differs from FC width");
  const auto total = static_cast<std::size_t>(w.size());
  const auto keep = static_cast<std::size_t>(std::llround((1.0 - sparsity) * static_cast<double>(total)));

  std::vector<double> contrib(total);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      contrib[static_cast<std::size_t>(r * w.cols() + c)] = w(r, c) * mean_feature(c);
    }
  }
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return contrib[a] > contrib[b]; });

  DiceMask mask;
  mask.keep = RowMatrix::Zero(w.rows(), w.cols());
  for (std::size_t i = 0; i < keep && i < total; ++i) mask.keep.data()[order[i]] = 1.0;
  mask.sparsity = sparsity;
  mask.mean_feature = mean_feature;
  return mask;
}

DiceMask dice_precompute(const ModelState& m, const Dataset& id_sample, double sparsity,
                         bool normalize_at_scoring, std::size_t max_samples) {
  const std::size_t n = std::min(id_sample.size(), max_samples);
  if (n == 0) throw ScoringError("dice_precompute: empty ID sample");
  NoGradGuard no_grad;
  Eigen::VectorXd total = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.spec.feature_dim()));
  for (const auto& b : sequential_batches(id_sample.head(n), kScoreBatch)) {
    const RowMatrix h = forward_score(m, b.images, normalize_at_scoring).h_scaled.matrix();
    total += h.colwise().sum().transpose();
  }
  return dice_mask_from_mean(m.fc_weight().matrix(), total / static_cast<double>(n), sparsity);
}

Eigen::VectorXd dice_score(const ModelState& m, const Tensor& x, const DiceMask& mask,
                           bool normalize_at_scoring) {
  const RowMatrix w = m.fc_weight().matrix();
  if (mask.keep.rows() != w.rows() || mask.keep.cols() != w.cols()) {
    throw ScoringError("dice_score: mask shape does not match the FC layer");
  }
  NoGradGuard no_grad;
  const Tensor h = forward_score(m, x, normalize_at_scoring).h_scaled;
  const Tensor masked = Tensor::from_matrix(w.cwiseProduct(mask.keep));
  Tensor z = fc_logits(h, masked, m.fc_bias());
  if (m.spec.method == Method::logitnorm && normalize_at_scoring) {
    z = logit_normalize(z, m.spec.tau_logit);
  }
  const RowMatrix logits = z.matrix();
  Eigen::VectorXd out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) out(i) = energy(row(logits, i));
  return out;
}

// ---------------------------------------------------------------------------

ScoreSet score_dataset(const ModelState& m, const Dataset& data, const ScorerSpec& spec,
                       const DiceMask* mask, const std::string& model_id) {
  spec.validate();
  if (spec.kind == ScorerKind::dice && !mask) throw ScoringError("score_dataset: DICE needs a mask");
  ScoreSet out;
  out.dataset_id = data.id;
  out.spec = spec;
  out.model_id = model_id;
  out.scores.reserve(data.size());
  const bool norm = spec.normalize_at_scoring;
  for (const auto& b : sequential_batches(data, kScoreBatch)) {
    Eigen::VectorXd s;
    try {
      switch (spec.kind) {
        case ScorerKind::msp:
        case ScorerKind::tempscale:
        case ScorerKind::energy: {
          const RowMatrix logits = score_logits(m, b.images, norm);
          s.resize(logits.rows());
          for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            const Eigen::VectorXd z = row(logits, i);
            s(i) = spec.kind == ScorerKind::msp         ? msp(z)
                   : spec.kind == ScorerKind::tempscale ? tempscale(z, spec.tempscale_T)
                                                        : energy(z);
          }
          break;
        }
        case ScorerKind::odin:
          s = odin(m, b.images, spec.odin_temperature, spec.odin_epsilon, norm);
          break;
        case ScorerKind::gradnorm:
          s = gradnorm(m, b.images, norm);
          break;
        case ScorerKind::dice:
          s = dice_score(m, b.images, *mask, norm);
          break;
      }
    } catch (const std::exception& e) {
      throw ScoringError("scoring failed for samples " + std::to_string(b.indices.front()) + ".." +
                         std::to_string(b.indices.back()) + " of " + data.id + ": " + e.what());
    }
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      if (!std::isfinite(s(i))) {
        throw ScoringError("non-finite score at sample " +
                           std::to_string(b.indices[static_cast<std::size_t>(i)]) + " of " + data.id);
      }
      out.scores.push_back(s(i));
    }
  }
  return out;
}

void write_score_csv(const ScoreSet& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "sample_index,score\n";
  char buf[40];
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", s.scores[i]);
    out << i << ',' << buf << '\n';
  }
}

std::vector<double> read_score_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    out.push_back(std::stod(line.substr(comma + 1)));
  }
  return out;
}

std::string score_file_name(const ScoreSet& s) {
  return s.model_id + "__" + s.spec.label() + "__" + s.dataset_id + "__norm" +
         (s.spec.normalize_at_scoring ? "1" : "0") + ".csv";
}

}  // namespace t2fnorm
