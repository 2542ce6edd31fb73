#include "t2fnorm/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace t2fnorm {

namespace {

constexpr std::size_t kEvalBatch = 256;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::optional<double> parse_opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

struct EvalTotals {
  double loss = 0.0;
  double correct = 0.0;
  std::size_t count = 0;
};

EvalTotals evaluate_objective(const ModelState& m, const Dataset& d) {
  NoGradGuard no_grad;
  EvalTotals t;
  for (const auto& b : sequential_batches(d, kEvalBatch)) {
    const Objective obj = training_objective(m, b.images, b.labels);
    const auto pred = argmax_rows(obj.logits.matrix());
    t.loss += obj.loss.item() * static_cast<double>(b.labels.size());
    for (std::size_t i = 0; i < pred.size(); ++i) t.correct += pred[i] == b.labels[i] ? 1.0 : 0.0;
    t.count += b.labels.size();
  }
  return t;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("TrainConfig: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("TrainConfig: momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (schedule == LrSchedule::step && !(decay_factor > 0.0)) {
    throw std::invalid_argument("TrainConfig: decay_factor must be positive");
  }
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double rate = lr;
  if (schedule == LrSchedule::step) {
    for (auto boundary : decay_epochs) {
      if (epoch > boundary) rate *= decay_factor;
    }
  }
  return rate;
}

void sgd_step(ModelState& m, double lr, double momentum, double weight_decay) {
  for (const auto& p : m.params) {
    if (!p.value.has_grad()) throw TrainingError("sgd_step: parameter '" + p.name + "' has no gradient");
  }
  for (auto& p : m.params) {
    Eigen::ArrayXd& theta = p.value.mutable_values();
    if (p.velocity.size() != theta.size()) p.velocity = Eigen::ArrayXd::Zero(theta.size());
    p.velocity = momentum * p.velocity + (p.value.grad() + weight_decay * theta);
    theta -= lr * p.velocity;
    p.value.zero_grad();
  }
}

ScoreNorms mean_score_norms(const ModelState& m, const Dataset& d, bool normalize_at_scoring) {
  if (d.size() == 0) throw std::invalid_argument("mean_score_norms: empty dataset");
  NoGradGuard no_grad;
  double feature = 0.0, logit = 0.0;
  for (const auto& b : sequential_batches(d, kEvalBatch)) {
    const ForwardResult r = forward_score(m, b.images, normalize_at_scoring);
    const RowMatrix h = r.h_scaled.matrix();
    const RowMatrix z = r.logits.matrix();
    feature += h.rowwise().norm().sum();
    logit += z.rowwise().norm().sum();
  }
  const double n = static_cast<double>(d.size());
  return {feature / n, logit / n};
}

Separability track_separability(const ModelState& m, const Dataset& id_set, const Dataset& ood_set) {
  if (id_set.size() == 0 || ood_set.size() == 0) {
    throw std::invalid_argument("track_separability: both sets must be non-empty");
  }
  Separability s;
  s.id = mean_score_norms(m, id_set);
  s.ood = mean_score_norms(m, ood_set);
  if (s.ood.feature == 0.0 || s.ood.logit == 0.0) {
    throw std::domain_error("track_separability: OOD mean norm is zero");
  }
  s.feature = s.id.feature / s.ood.feature;
  s.logit = s.id.logit / s.ood.logit;
  return s;
}

double accuracy(const ModelState& m, const Dataset& d) {
  if (!d.labelled() || d.size() == 0) throw std::invalid_argument("accuracy: needs a labelled dataset");
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (const auto& b : sequential_batches(d, kEvalBatch)) {
    const auto pred = classify(m, b.images);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

std::vector<EpochTrace> train(ModelState& m, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0 || !data.labelled()) throw std::invalid_argument("train: needs labelled data");

  const Dataset id_monitor = data.head(cfg.monitor_samples);
  std::optional<Dataset> ood_monitor;
  if (cfg.monitor_ood) ood_monitor = cfg.monitor_ood->head(cfg.monitor_samples);

  auto record = [&](EpochTrace t) {
    const ScoreNorms id = mean_score_norms(m, id_monitor);
    t.id_feature_norm = id.feature;
    t.id_logit_norm = id.logit;
    if (ood_monitor) {
      const ScoreNorms ood = mean_score_norms(m, *ood_monitor);
      t.ood_feature_norm = ood.feature;
      t.ood_logit_norm = ood.logit;
      if (ood.feature > 0.0) t.separability_feature = id.feature / ood.feature;
      if (ood.logit > 0.0) t.separability_logit = id.logit / ood.logit;
    }
    return t;
  };

  std::vector<EpochTrace> traces;
  {
    const EvalTotals start = evaluate_objective(m, id_monitor);
    EpochTrace t;
    t.epoch = 0;
    t.train_loss = start.loss / static_cast<double>(start.count);
    t.train_accuracy = start.correct / static_cast<double>(start.count);
    traces.push_back(record(t));
  }

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0.0, correct = 0.0;
    std::size_t seen = 0, step = 0;
    for (const auto& b : batches(data, cfg.batch_size, cfg.seed, epoch)) {
      m.zero_grad();
      Objective obj;
      try {
        obj = training_objective(m, b.images, b.labels);
      } catch (const TensorError& e) {
        throw TrainingError("non-finite forward pass at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(step) + ": " + e.what());
      }
      const double l = obj.loss.item();
      if (!std::isfinite(l)) {
        throw TrainingError("NaN loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step));
      }
      const auto pred = argmax_rows(obj.logits.matrix());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i] ? 1.0 : 0.0;
      loss_sum += l * static_cast<double>(b.labels.size());
      seen += b.labels.size();
      try {
        backward(obj.loss);
      } catch (const TensorError& e) {
        throw TrainingError("backward failed at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      sgd_step(m, lr, cfg.momentum, cfg.weight_decay);
      for (const auto& p : m.params) {
        if (!p.value.values().allFinite()) {
          throw TrainingError("parameter '" + p.name + "' diverged at epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(step));
        }
      }
      ++step;
    }
    m.epoch = epoch;
    EpochTrace t;
    t.epoch = epoch;
    t.train_loss = loss_sum / static_cast<double>(seen);
    t.train_accuracy = correct / static_cast<double>(seen);
    traces.push_back(record(t));
  }
  return traces;
}

void write_trace_csv(const std::vector<EpochTrace>& traces, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,train_accuracy,id_feature_norm,id_logit_norm,ood_feature_norm,"
         "ood_logit_norm,separability_feature,separability_logit\n";
  for (const auto& t : traces) {
    out << t.epoch << ',' << fmt(t.train_loss) << ',' << fmt(t.train_accuracy) << ','
        << fmt(t.id_feature_norm) << ',' << fmt(t.id_logit_norm) << ',' << fmt(t.ood_feature_norm)
        << ',' << fmt(t.ood_logit_norm) << ',' << fmt(t.separability_feature) << ','
        << fmt(t.separability_logit) << '\n';
  }
}

std::vector<EpochTrace> read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<EpochTrace> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    while (f.size() < 9) f.emplace_back();
    EpochTrace t;
    t.epoch = std::stoul(f[0]);
    t.train_loss = std::stod(f[1]);
    t.train_accuracy = std::stod(f[2]);
    t.id_feature_norm = std::stod(f[3]);
    t.id_logit_norm = std::stod(f[4]);
    t.ood_feature_norm = parse_opt(f[5]);
    t.ood_logit_norm = parse_opt(f[6]);
    t.separability_feature = parse_opt(f[7]);
    t.separability_logit = parse_opt(f[8]);
    out.push_back(t);
  }
  return out;
}

}  // namespace t2fnorm
