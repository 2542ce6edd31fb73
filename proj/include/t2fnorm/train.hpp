#ifndef T2FNORM_TRAIN_HPP
#define T2FNORM_TRAIN_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

#include "t2fnorm/data.hpp"
#include "t2fnorm/nn.hpp"

namespace t2fnorm {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LrSchedule { constant, step };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::step;
  std::vector<std::size_t> decay_epochs{15};
  double decay_factor = 0.1;
  // Norm/separability monitoring; absent monitor set means ID-only traces.
  const Dataset* monitor_ood = nullptr;
  std::size_t monitor_samples = 1024;

  void validate() const;
  /// Learning rate used during the given 1-based epoch.
  double lr_at(std::size_t epoch) const;
};

/// One row of training progress. Epoch 0 is the untrained model evaluated
/// on the monitor subset; later epochs report running averages.
struct EpochTrace {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double id_feature_norm = 0.0;
  double id_logit_norm = 0.0;
  std::optional<double> ood_feature_norm;
  std::optional<double> ood_logit_norm;
  std::optional<double> separability_feature;
  std::optional<double> separability_logit;
};

/// v <- momentum * v + (g + wd * theta); theta <- theta - lr * v; grads cleared.
void sgd_step(ModelState& m, double lr, double momentum, double weight_decay);

std::vector<EpochTrace> train(ModelState& m, const Dataset& data, const TrainConfig& cfg);

/// Mean L2 norms of forward_score features (h*/tau) and logits.
struct ScoreNorms {
  double feature = 0.0;
  double logit = 0.0;
};

ScoreNorms mean_score_norms(const ModelState& m, const Dataset& d, bool normalize_at_scoring = false);

struct Separability {
  double feature = 0.0;
  double logit = 0.0;
  ScoreNorms id;
  ScoreNorms ood;
};

/// Ratio of mean ID norm to mean OOD norm in feature and logit space.
Separability track_separability(const ModelState& m, const Dataset& id_set, const Dataset& ood_set);

/// Fraction of correctly classified labelled samples.
double accuracy(const ModelState& m, const Dataset& d);

/// Column order: epoch,train_loss,train_accuracy,id_feature_norm,id_logit_norm,
/// ood_feature_norm,ood_logit_norm,separability_feature,separability_logit
void write_trace_csv(const std::vector<EpochTrace>& traces, const std::filesystem::path& path);
std::vector<EpochTrace> read_trace_csv(const std::filesystem::path& path);

}  // namespace t2fnorm

#endif  // T2FNORM_TRAIN_HPP
