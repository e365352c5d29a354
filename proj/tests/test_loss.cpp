#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "camhfa/gradcheck.hpp"
#include "camhfa/loss.hpp"
#include "camhfa/suites.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace camhfa;

namespace {

Embedding unit(std::mt19937_64& rng, std::size_t dim) {
  Tensor v = random_normal({dim}, rng);
  const double n = l2_norm(v.data());
  for (double& x : v.data()) x /= n;
  return {v};
}

ClassifierHead head(Tensor w, double m, double s, MarginType type) { return {std::move(w), m, s, type}; }

}  // namespace

TEST(MarginType, ParsesBothSpellings) {
  EXPECT_EQ(parse_margin_type("aam"), MarginType::kAdditiveAngular);
  EXPECT_EQ(parse_margin_type("additive-cosine"), MarginType::kAdditiveCosine);
  EXPECT_THROW(parse_margin_type("arc"), ConfigError);
  EXPECT_EQ(margin_type_name(MarginType::kAdditiveCosine), "am");
}

TEST(MarginLoss, AdditiveCosineClosedForm) {
  // Target class 0 has cosine 1, the other class cosine 0:
  // loss = -log(e^{s(1-m)} / (e^{s(1-m)} + e^0)) = log(1 + e^{s(0 - (1 - m))}).
  const Embedding e{Tensor::vector({1.0, 0.0})};
  const ClassifierHead h = head(Tensor::matrix(2, 2, {1, 0, 0, 1}), 0.2, 32.0, MarginType::kAdditiveCosine);
  EXPECT_NEAR(margin_softmax_loss(e, 0, h), std::log(1.0 + std::exp(32.0 * (0.0 - (1.0 - 0.2)))), 1e-12);
}

TEST(MarginLoss, ZeroMarginIsScaledSoftmaxCrossEntropy) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const Embedding e = unit(rng, 4);
    const Tensor w = random_normal({5, 4}, rng);
    const std::size_t label = static_cast<std::size_t>(rep % 5);
    std::vector<double> logits;
    for (std::size_t c = 0; c < 5; ++c) logits.push_back(3.0 * dot(e.values(), w.row(c)) / l2_norm(w.row(c)));
    const double ref = -std::log(oracle::softmax(logits)[label]);
    const double aam = margin_softmax_loss(e, label, head(w, 0.0, 3.0, MarginType::kAdditiveAngular));
    const double am = margin_softmax_loss(e, label, head(w, 0.0, 3.0, MarginType::kAdditiveCosine));
    EXPECT_NEAR(aam, ref, 1e-12);
    EXPECT_NEAR(am, ref, 1e-12);
    EXPECT_NEAR(aam, am, 1e-12);
  }
}

TEST(MarginLoss, SingleClassIsZero) {
  std::mt19937_64 rng(2);
  const Embedding e = unit(rng, 3);
  for (auto type : {MarginType::kAdditiveAngular, MarginType::kAdditiveCosine}) {
    EXPECT_NEAR(margin_softmax_loss(e, 0, head(random_normal({1, 3}, rng), 0.3, 32.0, type)), 0.0, 1e-15);
  }
}

TEST(MarginLoss, MatchesAngleOracle) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const Embedding e = unit(rng, 3);
    const Tensor w = random_normal({4, 3}, rng);
    const std::size_t label = static_cast<std::size_t>(rep % 4);
    const double m = rep < 100 ? 0.2 : 1.3;  // the larger margin exercises the fallback branch
    for (bool angular : {true, false}) {
      const MarginType type = angular ? MarginType::kAdditiveAngular : MarginType::kAdditiveCosine;
      const double ref = oracle::margin_loss({e.values().begin(), e.values().end()}, testing_support::to_mat(w),
                                             label, m, 32.0, angular);
      EXPECT_NEAR(margin_softmax_loss(e, label, head(w, m, 32.0, type)), ref, 1e-9 * std::max(1.0, ref));
    }
  }
}

TEST(MarginLoss, AngularFallbackPastPi) {
  // theta = pi - 0.05 with m = 0.2 crosses pi: target logit becomes cos(theta) - m sin(m).
  const double theta = std::numbers::pi - 0.05;
  const auto [value, slope] = target_logit(std::cos(theta), 0.2, MarginType::kAdditiveAngular);
  EXPECT_NEAR(value, std::cos(theta) - 0.2 * std::sin(0.2), 1e-15);
  EXPECT_EQ(slope, 1.0);
  const auto [inside, inside_slope] = target_logit(std::cos(1.0), 0.2, MarginType::kAdditiveAngular);
  EXPECT_NEAR(inside, std::cos(1.2), 1e-15);
  EXPECT_NEAR(inside_slope, std::sin(1.2) / std::sin(1.0), 1e-12);
}

TEST(MarginLoss, NonIncreasingInTargetCosine) {
  for (auto type : {MarginType::kAdditiveAngular, MarginType::kAdditiveCosine}) {
    for (double m : {0.2, 0.5, 1.5}) {
      double previous = std::numeric_limits<double>::infinity();
      for (int i = 0; i <= 2000; ++i) {
        const double target = -1.0 + i / 1000.0;
        ad::Tape tape;
        ad::Var cos = tape.leaf(Tensor::matrix(1, 3, {0.3, target, -0.4}));
        const double loss =
            ad::cross_entropy(ad::scale(ad::apply_target_margin(cos, 1, m, type), 32.0), 1).value()[0];
        EXPECT_LE(loss, previous + 1e-12) << "cos=" << target << " m=" << m;
        previous = loss;
      }
    }
  }
}

TEST(MarginLoss, ClassWeightRowScaleInvariance) {
  std::mt19937_64 rng(4);
  const Embedding e = unit(rng, 3);
  Tensor w = random_normal({4, 3}, rng);
  const double base = margin_softmax_loss(e, 2, head(w, 0.2, 32.0, MarginType::kAdditiveAngular));
  std::uniform_real_distribution<double> factor(0.01, 100.0);
  for (std::size_t c = 0; c < 4; ++c) {
    const double k = factor(rng);
    for (double& v : w.row(c)) v *= k;
  }
  EXPECT_NEAR(margin_softmax_loss(e, 2, head(w, 0.2, 32.0, MarginType::kAdditiveAngular)), base, 1e-12);
}

TEST(MarginLoss, RejectsBadInputs) {
  std::mt19937_64 rng(5);
  const Embedding e = unit(rng, 3);
  EXPECT_THROW(margin_softmax_loss(e, 4, head(random_normal({4, 3}, rng), 0.2, 32, MarginType::kAdditiveAngular)),
               ContractError);
  EXPECT_THROW(margin_softmax_loss(e, 0, head(random_normal({4, 2}, rng), 0.2, 32, MarginType::kAdditiveAngular)),
               DimensionError);
  EXPECT_THROW(margin_softmax_loss(e, 0, head(random_normal({4, 3}, rng), -0.1, 32, MarginType::kAdditiveAngular)),
               ConfigError);
  EXPECT_THROW(margin_softmax_loss(e, 0, head(random_normal({4, 3}, rng), 0.2, 0, MarginType::kAdditiveAngular)),
               ConfigError);
  EXPECT_THROW(margin_softmax_loss(Embedding{Tensor::vector({2, 0, 0})}, 0,
                                   head(random_normal({4, 3}, rng), 0.2, 32, MarginType::kAdditiveAngular)),
               ContractError);
}

TEST(MarginLoss, GradientsWrtEmbeddingAndClassWeights) {
  // At s = 32 the loss is O(10) and central differences carry ~1e-9 of roundoff, so components
  // much smaller than that cannot be resolved; they get an absolute allowance there.
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    for (auto type : {MarginType::kAdditiveAngular, MarginType::kAdditiveCosine}) {
      for (double s : {1.0, 32.0}) {
        const Tensor e = unit(rng, 3).vector.reshaped({1, 3});
        const Tensor w = random_normal({4, 3}, rng);
        ad::Tape tape;
        ad::Var ev = tape.leaf(e), wv = tape.leaf(w);
        tape.backward(ad::margin_softmax_loss(ev, wv, 1, 0.2, s, type).loss);
        auto loss_at = [&](const Tensor& ee, const Tensor& ww) {
          ad::Tape t;
          return ad::margin_softmax_loss(t.leaf(ee), t.leaf(ww), 1, 0.2, s, type).loss.value()[0];
        };
        const Tensor ge = finite_difference_gradient([&](const Tensor& x) { return loss_at(x, w); }, e);
        const Tensor gw = finite_difference_gradient([&](const Tensor& x) { return loss_at(e, x); }, w);
        if (s == 1.0) {
          EXPECT_LE(max_relative_error(tape.grad(ev), ge), 1e-5);
          EXPECT_LE(max_relative_error(tape.grad(wv), gw), 1e-5);
        } else {
          for (const auto& [a, n] : {std::pair{tape.grad(ev), ge}, std::pair{tape.grad(wv), gw}}) {
            for (std::size_t k = 0; k < a.size(); ++k) {
              EXPECT_LE(std::abs(a[k] - n[k]), 1e-5 * std::max(std::abs(a[k]), std::abs(n[k])) + 1e-7);
            }
          }
        }
      }
    }
  }
}

TEST(ClassifierHead, InitIsSeeded) {
  const auto a = ClassifierHead::init(5, 4, 0.2, 32, MarginType::kAdditiveAngular, 9);
  EXPECT_EQ(a, ClassifierHead::init(5, 4, 0.2, 32, MarginType::kAdditiveAngular, 9));
  EXPECT_EQ(a.num_classes(), 5u);
  EXPECT_EQ(a.embed_dim(), 4u);
}
