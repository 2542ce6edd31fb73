#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "support.hpp"
#include "t2fnorm/nn.hpp"

using namespace t2fnorm;
using namespace t2fnorm::testing;

namespace {

ModelSpec small_spec(Method method) {
  ModelSpec s;
  s.in_height = s.in_width = 8;
  s.blocks = {{4, 2}, {6, 2}};
  s.classes = 4;
  s.method = method;
  return s;
}

Tensor input(std::size_t n, const ModelSpec& s, std::mt19937_64& rng) {
  return random_tensor({n, s.in_channels, s.in_height, s.in_width}, rng);
}

}  // namespace

TEST_CASE("init_model") {
  ModelSpec spec;  // 16x16 input, blocks 16 and 32, four classes
  const ModelState a = init_model(spec, 5), b = init_model(spec, 5), c = init_model(spec, 6);
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    CHECK((a.params[i].value.values() == b.params[i].value.values()).all());
  }
  CHECK_FALSE((a.fc_weight().values() == c.fc_weight().values()).all());

  CHECK(a.fc_weight().shape() == Shape{4, 32});
  CHECK(a.fc_bias().shape() == Shape{4});
  CHECK(a.conv_kernel(0).shape() == Shape{16, 1, 3, 3});
  CHECK(a.conv_kernel(1).shape() == Shape{32, 16, 3, 3});

  // Every weight lies within its fan-in bound sqrt(6 / fan_in); biases start at zero.
  for (const auto& p : a.params) {
    CAPTURE(p.name);
    CHECK(p.value.requires_grad());
    if (p.role == ParamRole::bias || p.role == ParamRole::fc_bias) {
      CHECK((p.value.values() == 0.0).all());
      continue;
    }
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < p.value.rank(); ++d) fan_in *= p.value.dim(d);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    CHECK(p.value.values().abs().maxCoeff() <= bound);
    CHECK(p.value.values().abs().maxCoeff() > 0.5 * bound);
  }
  CHECK_THROWS(a.param("nope"));
}

TEST_CASE("spec validation") {
  ModelSpec s = small_spec(Method::t2fnorm);
  s.tau = 0.0;
  CHECK_THROWS(s.validate());
  s = small_spec(Method::t2fnorm);
  s.p_norm = 5;
  CHECK_THROWS(s.validate());
  s = small_spec(Method::t2fnorm);
  s.normalize_after_block = 3;
  CHECK_THROWS(s.validate());
  CHECK(parse_method("logitnorm") == Method::logitnorm);
  CHECK_THROWS(parse_method("mixup"));
}

TEST_CASE("extract_feature") {
  std::mt19937_64 rng(11);
  for (Method method : {Method::baseline, Method::t2fnorm}) {
    const ModelState m = init_model(small_spec(method), 3);
    const Tensor x = input(5, m.spec, rng);
    const Tensor h = extract_feature(m, x);
    CHECK(h.shape() == Shape{5, 6});
    CHECK((h.values() >= 0.0).all());
    // Zero biases: a zero image has a zero feature.
    CHECK((extract_feature(m, Tensor::zeros({1, 1, 8, 8})).values() == 0.0).all());

    // Composition of the library primitives, written out by hand.
    Tensor y = x;
    for (std::size_t i = 0; i < 2; ++i) {
      y = relu(add_channel_bias(conv2d(y, m.conv_kernel(i), 2, 1), m.conv_bias(i)));
    }
    CHECK((global_avg_pool(y).values() == h.values()).all());
  }
  CHECK_THROWS(extract_feature(init_model(small_spec(Method::baseline), 1), Tensor::zeros({1, 1, 7, 8})));
}

TEST_CASE("feature_normalize") {
  const Tensor h({1, 2}, (Eigen::ArrayXd(2) << 3, 4).finished());
  const Tensor n = feature_normalize(h, 0.1, 2);
  CHECK(n.at(0) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(n.at(1) == doctest::Approx(8.0).epsilon(1e-12));

  std::mt19937_64 rng(12);
  for (int t = 0; t < 20; ++t) {
    const Tensor v = random_tensor({3, 5}, rng, 0.0, 2.0);
    for (int p = 1; p <= 4; ++p) {
      const Tensor a = feature_normalize(v, 0.25, p);
      const Tensor b = feature_normalize(scale(v, 17.0), 0.25, p);
      CHECK((a.values() - b.values()).abs().maxCoeff() < 1e-11);
      const RowMatrix am = a.matrix();
      for (Eigen::Index r = 0; r < am.rows(); ++r) {
        const double norm = std::pow(am.row(r).array().abs().pow(p).sum(), 1.0 / p);
        CHECK(norm == doctest::Approx(4.0).epsilon(1e-10));
      }
    }
  }
  // The epsilon floor keeps zero rows finite.
  CHECK((feature_normalize(Tensor::zeros({1, 3}), 0.1, 2).values() == 0.0).all());
}

TEST_CASE("training route per method") {
  std::mt19937_64 rng(13);
  SUBCASE("t2fnorm logits are invariant to feature scale") {
    ModelState m = init_model(small_spec(Method::t2fnorm), 4);
    const Tensor x = relu(input(3, m.spec, rng));
    // With zero biases every block is positively homogeneous.
    const Tensor a = forward_train(m, x), b = forward_train(m, scale(x, 9.0));
    CHECK((a.values() - b.values()).abs().maxCoeff() < 1e-10);
  }
  SUBCASE("logitnorm logits have norm 1/tau_logit") {
    ModelState m = init_model(small_spec(Method::logitnorm), 4);
    const RowMatrix z = forward_train(m, input(6, m.spec, rng)).matrix();
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      CHECK(z.row(r).norm() == doctest::Approx(1.0 / m.spec.tau_logit).epsilon(1e-10));
    }
  }
  SUBCASE("baseline ignores tau") {
    ModelSpec s = small_spec(Method::baseline);
    const ModelState a = init_model(s, 4);
    s.tau = 7.0;
    const ModelState b = init_model(s, 4);
    const Tensor x = input(3, s, rng);
    CHECK((forward_train(a, x).values() == forward_train(b, x).values()).all());
  }
}

TEST_CASE("scoring route") {
  std::mt19937_64 rng(14);
  ModelState m = init_model(small_spec(Method::t2fnorm), 8);
  const Tensor x = input(4, m.spec, rng);
  const ForwardResult s = forward_score(m, x);
  const ForwardResult t = forward(m, x, FeaturePath::train);

  CHECK((s.h_star.values() == t.h_star.values()).all());
  CHECK((s.h_scaled.values() - 10.0 * s.h_star.values()).abs().maxCoeff() < 1e-12);
  CHECK((s.logits.values() - t.logits.values()).abs().maxCoeff() > 1e-3);
  const RowMatrix want = matmul_oracle(s.h_scaled.matrix(), m.fc_weight().matrix().transpose());
  CHECK((s.logits.matrix() - want).cwiseAbs().maxCoeff() < 1e-12);

  const ForwardResult ablation = forward_score(m, x, true);
  CHECK((ablation.logits.values() == t.logits.values()).all());
  const RowMatrix hs = ablation.h_scaled.matrix();
  for (Eigen::Index r = 0; r < hs.rows(); ++r) CHECK(hs.row(r).norm() == doctest::Approx(10.0).epsilon(1e-10));

  SUBCASE("logitnorm scores raw logits") {
    ModelState l = init_model(small_spec(Method::logitnorm), 8);
    const ForwardResult raw = forward_score(l, x);
    const RowMatrix expect = matmul_oracle(raw.h_star.matrix(), l.fc_weight().matrix().transpose());
    CHECK((raw.logits.matrix() - expect).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((forward_score(l, x, true).logits.values() == forward_train(l, x).values()).all());
  }
  SUBCASE("non-final placement") {
    ModelSpec spec = small_spec(Method::t2fnorm);
    spec.normalize_after_block = 1;
    ModelState e = init_model(spec, 8);
    const ForwardResult tr = forward(e, x, FeaturePath::train);
    const ForwardResult sc = forward_score(e, x);
    // The head receives the pooled feature unchanged; only the trunk differs.
    CHECK((tr.h_scaled.values() == tr.h_star.values()).all());
    CHECK((sc.h_scaled.values() == sc.h_star.values()).all());
    CHECK((forward_score(e, x, true).logits.values() == tr.logits.values()).all());
  }
}

TEST_CASE("classify") {
  RowMatrix z(3, 4);
  z << 1, 3, 3, 0,  //
      5, 5, 5, 5,   //
      -1, -2, -3, 0;
  CHECK(argmax_rows(z) == std::vector<std::size_t>{1, 0, 3});

  std::mt19937_64 rng(15);
  ModelState m = init_model(small_spec(Method::t2fnorm), 9);
  const Tensor x = input(10, m.spec, rng);
  CHECK(classify(m, x) == argmax_rows(forward_train(m, x).matrix()));
}

TEST_CASE("loss") {
  std::mt19937_64 rng(16);
  const std::vector<std::size_t> labels{0, 1, 2, 3, 0, 1, 2, 3};

  SUBCASE("baseline cross-entropy oracle") {
    ModelState m = init_model(small_spec(Method::baseline), 10);
    const Tensor x = input(8, m.spec, rng);
    const RowMatrix z = forward_train(m, x).matrix();
    double want = 0.0;
    for (Eigen::Index r = 0; r < 8; ++r) {
      want += std::log(z.row(r).array().exp().sum()) - z(r, static_cast<Eigen::Index>(labels[r]));
    }
    CHECK(loss(m, x, labels).item() == doctest::Approx(want / 8.0).epsilon(1e-12));
  }
  SUBCASE("near ln C for a freshly initialised logit-scaled model") {
    ModelSpec s = small_spec(Method::baseline);
    ModelState m = init_model(s, 10);
    m.param("fc.weight").value.mutable_values() *= 1e-3;
    CHECK(loss(m, input(8, s, rng), labels).item() == doctest::Approx(std::log(4.0)).epsilon(1e-3));
  }
  SUBCASE("feature penalty") {
    ModelSpec s = small_spec(Method::feature_penalty);
    s.penalty_weight = 0.5;
    ModelState m = init_model(s, 10);
    const Tensor x = input(8, s, rng);
    const RowMatrix h = extract_feature(m, x).matrix();
    s.method = Method::baseline;
    const double ce = loss(init_model(s, 10), x, labels).item();
    CHECK(loss(m, x, labels).item() == doctest::Approx(ce + 0.5 * h.rowwise().norm().mean()).epsilon(1e-12));

    ModelSpec zero = small_spec(Method::feature_penalty);
    zero.penalty_weight = 0.0;
    CHECK(loss(init_model(zero, 10), x, labels).item() == ce);
  }
  SUBCASE("label out of range") {
    ModelState m = init_model(small_spec(Method::baseline), 10);
    CHECK_THROWS(loss(m, input(1, m.spec, rng), {4}));
  }
}

TEST_CASE("frozen_copy") {
  ModelState m = init_model(small_spec(Method::t2fnorm), 12);
  const ModelState f = frozen_copy(m);
  for (std::size_t i = 0; i < f.params.size(); ++i) {
    CHECK_FALSE(f.params[i].value.requires_grad());
    CHECK((f.params[i].value.values() == m.params[i].value.values()).all());
  }
  m.param("fc.weight").value.mutable_values()(0) += 1.0;
  CHECK(f.fc_weight().at(0) != m.fc_weight().at(0));
}

TEST_CASE("snapshot round trip is bitwise") {
  ModelSpec s = small_spec(Method::t2fnorm);
  s.p_norm = 3;
  s.normalize_after_block = 1;
  s.tau = 0.123456789012345;
  ModelState m = init_model(s, 13);
  m.epoch = 7;
  m.param("block1.bias").value.mutable_values() << 0.1, -0.2, 1e-300, 3.5;

  std::stringstream buf;
  save_model(m, buf);
  const ModelState r = load_model(buf);
  CHECK(r.epoch == 7);
  CHECK(r.spec.tau == s.tau);
  CHECK(r.spec.p_norm == 3);
  CHECK(r.spec.normalize_after_block == 1);
  CHECK(r.spec.method == Method::t2fnorm);
  REQUIRE(r.params.size() == m.params.size());
  for (std::size_t i = 0; i < r.params.size(); ++i) {
    CHECK(r.params[i].name == m.params[i].name);
    CHECK(r.params[i].value.shape() == m.params[i].value.shape());
    CHECK(std::memcmp(r.params[i].value.values().data(), m.params[i].value.values().data(),
                      sizeof(double) * m.params[i].value.numel()) == 0);
  }

  std::stringstream junk("not a model");
  CHECK_THROWS(load_model(junk));
  std::string bytes = buf.str();
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS(load_model(cut));
}
