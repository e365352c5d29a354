#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>

#include "camhfa/autodiff.hpp"
#include "camhfa/error.hpp"
#include "camhfa/pooling.hpp"
#include "camhfa/tensor.hpp"

namespace camhfa {

enum class MarginType : std::uint32_t {
  kAdditiveAngular = 0,  // cos(theta + m)
  kAdditiveCosine = 1,   // cos(theta) - m
};

inline std::string_view margin_type_name(MarginType t) {
  return t == MarginType::kAdditiveAngular ? "aam" : "am";
}

inline MarginType parse_margin_type(std::string_view s) {
  if (s == "aam" || s == "additive-angular") return MarginType::kAdditiveAngular;
  if (s == "am" || s == "additive-cosine") return MarginType::kAdditiveCosine;
  throw ConfigError("unknown margin type '" + std::string(s) + "' (expected aam or am)");
}

/// Cosine classifier over C classes with an additive margin on the target logit.
struct ClassifierHead {
  Tensor class_weights;  // C x E, rows normalized inside the loss
  double margin = 0.2;
  double scale = 32.0;
  MarginType margin_type = MarginType::kAdditiveAngular;

  std::size_t num_classes() const { return class_weights.rank() == 2 ? class_weights.rows() : 0; }
  std::size_t embed_dim() const { return class_weights.rank() == 2 ? class_weights.cols() : 0; }

  void validate() const {
    require_rank2(class_weights, "class weights");
    if (num_classes() == 0 || embed_dim() == 0) throw ConfigError("classifier head is empty");
    if (!(margin >= 0.0)) throw ConfigError("margin must be non-negative");
    if (!(scale > 0.0)) throw ConfigError("scale must be positive");
  }

  static ClassifierHead init(std::size_t classes, std::size_t embed_dim, double margin,
                             double scale, MarginType type, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    ClassifierHead h{Tensor({classes, embed_dim}), margin, scale, type};
    for (double& v : h.class_weights.data()) v = dist(rng);
    h.validate();
    return h;
  }

  friend bool operator==(const ClassifierHead&, const ClassifierHead&) = default;
};

/// Margin-adjusted target logit phi(cos) and d phi / d cos.
///
/// Angular margin uses cos(theta + m) while theta + m <= pi and falls back to
/// cos(theta) - m sin(m) past that point.
inline std::pair<double, double> target_logit(double cosine, double margin, MarginType type) {
  if (type == MarginType::kAdditiveCosine) return {cosine - margin, 1.0};
  const double cos_m = std::cos(margin), sin_m = std::sin(margin);
  const double threshold = std::cos(std::numbers::pi - margin);
  if (cosine < threshold) return {cosine - margin * sin_m, 1.0};
  const double sine = std::sqrt(std::max(0.0, 1.0 - cosine * cosine));
  const double value = cosine * cos_m - sine * sin_m;
  // d sin(theta)/d cos = -cos / sin; singular at |cos| = 1
  const double slope = sine > 1e-12 ? cos_m + cosine * sin_m / sine : cos_m;
  return {value, slope};
}

namespace ad {

/// Replaces entry `label` of a logit row with its margin-adjusted value.
inline Var apply_target_margin(Var cosines, std::size_t label, double margin, MarginType type) {
  Tensor out = cosines.value();
  if (label >= out.size()) {
    throw ContractError("label " + std::to_string(label) + " out of range for " +
                        std::to_string(out.size()) + " classes");
  }
  const auto [value, slope] = target_logit(out[label], margin, type);
  out[label] = value;
  const std::size_t ic = cosines.id();
  return cosines.tape()->record(std::move(out), [ic, label, slope](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    Tensor& gc = t.adjoint(ic);
    for (std::size_t i = 0; i < g.size(); ++i) gc[i] += i == label ? slope * g[i] : g[i];
  });
}

struct MarginLoss {
  Var loss;     // scalar
  Var cosines;  // 1 x C, before margin and scale
};

/// Cross-entropy over s * [cosines with margin on the target], for a 1 x E unit-norm embedding.
inline MarginLoss margin_softmax_loss(Var embedding, Var class_weights, std::size_t label,
                                      double margin, double logit_scale, MarginType type) {
  if (class_weights.value().rank() != 2 || embedding.value().size() != class_weights.value().cols()) {
    throw DimensionError("embedding " + shape_string(embedding.value().shape()) +
                         " incompatible with class weights " +
                         shape_string(class_weights.value().shape()));
  }
  if (label >= class_weights.value().rows()) {
    throw ContractError("label " + std::to_string(label) + " out of range for " +
                        std::to_string(class_weights.value().rows()) + " classes");
  }
  Var cosines = matmul_transposed(embedding, l2_normalize_rows(class_weights));
  Var logits = scale(apply_target_margin(cosines, label, margin, type), logit_scale);
  return {cross_entropy(logits, label), cosines};
}

}  // namespace ad

inline double margin_softmax_loss(const Embedding& e, std::size_t label, const ClassifierHead& head) {
  head.validate();
  if (std::abs(l2_norm(e.values()) - 1.0) > 1e-9) throw ContractError("embedding must be unit-norm");
  ad::Tape tape;
  ad::Var ev = tape.leaf(e.vector.reshaped({1, e.dim()}));
  ad::Var w = tape.leaf(head.class_weights);
  return ad::margin_softmax_loss(ev, w, label, head.margin, head.scale, head.margin_type)
      .loss.value()[0];
}

}  // namespace camhfa
