#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "support.hpp"
#include "t2fnorm/data.hpp"
#include "t2fnorm/train.hpp"

using namespace t2fnorm;
using namespace t2fnorm::testing;

namespace {

SyntheticSpec small_data(std::uint64_t seed) {
  SyntheticSpec s;
  s.samples_per_class = 50;
  s.image_size = 8;
  s.amplitude = 0.5;
  s.seed = seed;
  return s;
}

ModelSpec small_model(Method method) {
  ModelSpec s;
  s.in_height = s.in_width = 8;
  s.blocks = {{8, 2}, {16, 2}};
  s.method = method;
  return s;
}

TrainConfig small_train(std::uint64_t seed, std::size_t epochs = 20) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.seed = seed;
  c.decay_epochs = {15};
  return c;
}

// Gives every parameter the gradient `grads[i]` via a linear loss.
void set_grads(ModelState& m, const std::vector<Eigen::ArrayXd>& grads) {
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    total = add(total, sum(mul(m.params[i].value, Tensor(m.params[i].value.shape(), grads[i]))));
  }
  backward(total);
}

std::vector<Eigen::ArrayXd> random_grads(const ModelState& m, std::mt19937_64& rng) {
  std::vector<Eigen::ArrayXd> g;
  for (const auto& p : m.params) g.push_back(random_tensor(p.value.shape(), rng).values());
  return g;
}

}  // namespace

TEST_CASE("sgd_step") {
  std::mt19937_64 rng(21);
  SUBCASE("zero gradient and no decay leave parameters unchanged") {
    ModelState m = init_model(small_model(Method::baseline), 1);
    const ModelState before = frozen_copy(m);
    std::vector<Eigen::ArrayXd> zeros;
    for (const auto& p : m.params) zeros.push_back(Eigen::ArrayXd::Zero(p.value.values().size()));
    set_grads(m, zeros);
    sgd_step(m, 0.1, 0.9, 0.0);
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      CHECK((m.params[i].value.values() == before.params[i].value.values()).all());
      CHECK_FALSE(m.params[i].value.has_grad());
    }
  }
  SUBCASE("one analytic step") {
    ModelState m = init_model(small_model(Method::baseline), 1);
    for (auto& p : m.params) p.value.mutable_values().setConstant(1.0);
    std::vector<Eigen::ArrayXd> half;
    for (const auto& p : m.params) half.push_back(Eigen::ArrayXd::Constant(p.value.values().size(), 0.5));
    set_grads(m, half);
    sgd_step(m, 0.1, 0.0, 0.0);
    for (const auto& p : m.params) CHECK((p.value.values() == 0.95).all());
  }
  SUBCASE("two momentum steps against a hand unroll") {
    ModelState m = init_model(small_model(Method::baseline), 2);
    const double lr = 0.05, mu = 0.9, wd = 1e-3;
    std::vector<Eigen::ArrayXd> theta, v;
    for (const auto& p : m.params) {
      theta.push_back(p.value.values());
      v.push_back(Eigen::ArrayXd::Zero(p.value.values().size()));
    }
    for (int step = 0; step < 2; ++step) {
      const auto g = random_grads(m, rng);
      set_grads(m, g);
      sgd_step(m, lr, mu, wd);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        for (Eigen::Index k = 0; k < theta[i].size(); ++k) {
          v[i](k) = mu * v[i](k) + (g[i](k) + wd * theta[i](k));
          theta[i](k) = theta[i](k) - lr * v[i](k);
        }
      }
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      CHECK((m.params[i].value.values() - theta[i]).abs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("missing gradients") {
    ModelState m = init_model(small_model(Method::baseline), 1);
    CHECK_THROWS_AS(sgd_step(m, 0.1, 0.9, 0.0), TrainingError);
  }
}

TEST_CASE("TrainConfig") {
  TrainConfig c;
  c.lr = 0.1;
  c.decay_epochs = {3, 5};
  c.decay_factor = 0.5;
  CHECK(c.lr_at(1) == 0.1);
  CHECK(c.lr_at(3) == 0.1);
  CHECK(c.lr_at(4) == 0.05);
  CHECK(c.lr_at(6) == 0.025);
  c.schedule = LrSchedule::constant;
  CHECK(c.lr_at(6) == 0.1);

  TrainConfig bad;
  bad.lr = 0.0;
  CHECK_THROWS(bad.validate());
  bad = TrainConfig{};
  bad.momentum = 1.0;
  CHECK_THROWS(bad.validate());
  bad = TrainConfig{};
  bad.weight_decay = -1e-4;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("train learns separable data") {
  for (std::uint64_t seed : {1, 2, 3}) {
    CAPTURE(seed);
    const Dataset d = gen_synthetic_id(small_data(seed));
    for (Method method : {Method::baseline, Method::t2fnorm}) {
      ModelState m = init_model(small_model(method), seed);
      const auto traces = train(m, d, small_train(seed));
      REQUIRE(traces.size() == 21);
      CHECK(traces.back().train_accuracy > 0.9);
      CHECK(accuracy(m, d) > 0.9);
      CHECK(m.epoch == 20);
    }
  }
}

TEST_CASE("epoch-0 trace") {
  const Dataset d = gen_synthetic_id(small_data(4));
  ModelState m = init_model(small_model(Method::baseline), 4);
  // Shrink the head so the untrained logits are near uniform.
  m.param("fc.weight").value.mutable_values() *= 0.01;
  const auto traces = train(m, d, small_train(4, 1));
  REQUIRE(traces.size() == 2);
  CHECK(traces[0].epoch == 0);
  CHECK(std::abs(traces[0].train_loss - std::log(4.0)) < 0.1);
  CHECK(traces[1].epoch == 1);
  CHECK_FALSE(traces[0].separability_feature.has_value());
}

TEST_CASE("training is deterministic") {
  const Dataset d = gen_synthetic_id(small_data(5));
  OodSpec os;
  os.size = 64;
  const Dataset ood = gen_ood(os, small_data(5), d.stats);
  TrainConfig c = small_train(5, 3);
  c.monitor_ood = &ood;
  ModelState a = init_model(small_model(Method::t2fnorm), 5), b = init_model(small_model(Method::t2fnorm), 5);
  const auto ta = train(a, d, c), tb = train(b, d, c);
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i].train_loss == tb[i].train_loss);
    CHECK(ta[i].train_accuracy == tb[i].train_accuracy);
    CHECK(ta[i].id_feature_norm == tb[i].id_feature_norm);
    CHECK(ta[i].separability_feature == tb[i].separability_feature);
    CHECK(ta[i].separability_logit == tb[i].separability_logit);
    CHECK(ta[i].ood_logit_norm.has_value());
  }
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    CHECK(std::memcmp(a.params[i].value.values().data(), b.params[i].value.values().data(),
                      sizeof(double) * a.params[i].value.numel()) == 0);
  }
}

TEST_CASE("divergence aborts with a diagnostic") {
  const Dataset d = gen_synthetic_id(small_data(6));
  ModelState m = init_model(small_model(Method::baseline), 6);
  TrainConfig c = small_train(6, 5);
  c.lr = 1e12;
  c.momentum = 0.0;
  CHECK_THROWS_AS(train(m, d, c), TrainingError);
}

TEST_CASE("track_separability") {
  const Dataset d = gen_synthetic_id(small_data(7));
  const ModelState m = init_model(small_model(Method::t2fnorm), 7);
  const Separability same = track_separability(m, d, d);
  CHECK(same.feature == 1.0);
  CHECK(same.logit == 1.0);

  // Oracle: mean row norms of h*/tau and of its logits.
  OodSpec os;
  os.size = 40;
  const Dataset ood = gen_ood(os, small_data(7), d.stats);
  const Separability s = track_separability(m, d, ood);
  auto mean_norms = [&](const Dataset& set) {
    const ForwardResult r = forward_score(m, set.images);
    return std::pair{(extract_feature(m, set.images).matrix() / m.spec.tau).rowwise().norm().mean(),
                     r.logits.matrix().rowwise().norm().mean()};
  };
  const auto [idf, idl] = mean_norms(d);
  const auto [oodf, oodl] = mean_norms(ood);
  CHECK(s.feature == doctest::Approx(idf / oodf).epsilon(1e-12));
  CHECK(s.logit == doctest::Approx(idl / oodl).epsilon(1e-12));

  Dataset zero;
  zero.id = "zero";
  zero.images = Tensor::zeros({3, 1, 8, 8});
  CHECK_THROWS(track_separability(m, d, zero));
  zero.images = Tensor::zeros({0, 1, 8, 8});
  CHECK_THROWS(track_separability(m, d, zero));
}

TEST_CASE("trace CSV round trip") {
  std::vector<EpochTrace> t(3);
  for (std::size_t i = 0; i < 3; ++i) {
    t[i].epoch = i;
    t[i].train_loss = 1.0 / (3.0 + static_cast<double>(i));
    t[i].train_accuracy = 0.1 * static_cast<double>(i);
    t[i].id_feature_norm = std::sqrt(2.0) * static_cast<double>(i + 1);
    t[i].id_logit_norm = 1e-300;
  }
  t[1].ood_feature_norm = 0.7;
  t[1].ood_logit_norm = 0.3;
  t[1].separability_feature = 1.0 / 7.0;
  t[1].separability_logit = 2.0 / 3.0;
  const auto path = std::filesystem::temp_directory_path() / "t2fnorm_trace_test.csv";
  write_trace_csv(t, path);
  const auto r = read_trace_csv(path);
  std::filesystem::remove(path);
  REQUIRE(r.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(r[i].epoch == t[i].epoch);
    CHECK(r[i].train_loss == t[i].train_loss);
    CHECK(r[i].train_accuracy == t[i].train_accuracy);
    CHECK(r[i].id_feature_norm == t[i].id_feature_norm);
    CHECK(r[i].id_logit_norm == t[i].id_logit_norm);
    CHECK(r[i].ood_feature_norm == t[i].ood_feature_norm);
    CHECK(r[i].separability_feature == t[i].separability_feature);
    CHECK(r[i].separability_logit == t[i].separability_logit);
  }
}
