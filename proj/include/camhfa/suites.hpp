#pragma once

// Self-checks run by `camhfa gradcheck` and `camhfa equiv`.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "camhfa/gradcheck.hpp"
#include "camhfa/loss.hpp"
#include "camhfa/pooling.hpp"
#include "camhfa/synth.hpp"
#include "camhfa/train.hpp"

namespace camhfa {

struct SuiteCheck {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_error <= tolerance; }
};

inline bool all_passed(const std::vector<SuiteCheck>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const SuiteCheck& c) { return c.passed(); });
}

struct RandomInstance {
  LayerwiseFeatures features;
  CaMhfaParams params;
};

inline Tensor random_normal(Shape shape, std::mt19937_64& rng, double sigma = 1.0) {
  std::normal_distribution<double> normal(0.0, sigma);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = normal(rng);
  return t;
}

/// Features and parameters drawn from N(0, 1) for the given dimensions.
inline RandomInstance random_instance(const PoolingDims& d, std::size_t frames, std::mt19937_64& rng) {
  std::vector<Tensor> layers;
  for (std::size_t n = 0; n < d.layers; ++n) layers.push_back(random_normal({frames, d.feature_dim}, rng));
  RandomInstance inst{LayerwiseFeatures(std::move(layers)), {}};
  CaMhfaParams& p = inst.params;
  p.omega_k_raw = random_normal({d.layers}, rng);
  p.omega_v_raw = random_normal({d.layers}, rng);
  p.s_k = random_normal({d.feature_dim, d.compressed_dim}, rng, 0.5);
  p.s_v = random_normal({d.feature_dim, d.compressed_dim}, rng, 0.5);
  p.queries = random_normal({d.heads, d.context, d.compressed_dim}, rng, 0.5);
  p.w_out = random_normal({d.heads * d.compressed_dim, d.embed_dim}, rng, 0.5);
  p.b_out = random_normal({d.embed_dim}, rng, 0.1);
  return inst;
}

/// Instance family: T in 1..16, F in 2..8, N in 0..4, D in 2..6, G in 1..4,
/// L in {1, 3, 5, 9, 17}, E in 2..6.
inline std::pair<PoolingDims, std::size_t> random_family_dims(std::mt19937_64& rng) {
  auto pick = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  static constexpr std::array<std::size_t, 5> kContexts = {1, 3, 5, 9, 17};
  PoolingDims d;
  const std::size_t frames = pick(1, 16);
  d.feature_dim = pick(2, 8);
  d.layers = pick(0, 4) + 1;
  d.compressed_dim = pick(2, 6);
  d.heads = pick(1, 4);
  d.context = kContexts[pick(0, kContexts.size() - 1)];
  d.embed_dim = pick(2, 6);
  return {d, frames};
}

namespace reference {

/// Context-free multi-head attention: a[t,g] = softmax_t(q_g . k_t) for a G x D query matrix.
inline Tensor mhfa_attention(const Tensor& keys, const Tensor& queries) {
  const std::size_t frames = keys.rows(), groups = queries.rows(), dim = keys.cols();
  Tensor a({frames, groups});
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<double> logits(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      double s = 0.0;
      for (std::size_t d = 0; d < dim; ++d) s += queries(g, d) * keys(t, d);
      logits[t] = s;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& v : logits) z += (v = std::exp(v - mx));
    for (std::size_t t = 0; t < frames; ++t) a(t, g) = logits[t] / z;
  }
  return a;
}

/// Single learned query: weights softmax(K q), output sum_t w_t v_t.
inline std::pair<std::vector<double>, std::vector<double>> self_attentive_pooling(
    const Tensor& keys, const Tensor& values, std::span<const double> query) {
  const Tensor a = mhfa_attention(keys, Tensor({1, query.size()}, {query.begin(), query.end()}));
  std::vector<double> w(a.values());
  std::vector<double> pooled(values.cols(), 0.0);
  for (std::size_t t = 0; t < values.rows(); ++t)
    for (std::size_t d = 0; d < values.cols(); ++d) pooled[d] += w[t] * values(t, d);
  return {w, pooled};
}

}  // namespace reference

/// Degeneration, conv/direct and normalization checks over `instances` random instances.
inline std::vector<SuiteCheck> run_equivalence_suite(std::size_t instances, std::uint64_t seed) {
  SuiteCheck mhfa{"degeneration: L=1 equals MHFA attention", 0.0, 1e-12};
  SuiteCheck mean{"degeneration: Q=0 equals mean pooling", 0.0, 1e-12};
  SuiteCheck sap{"degeneration: G=1, L=1 equals self-attentive pooling", 0.0, 1e-12};
  SuiteCheck conv{"conv/direct attention equivalence", 0.0, 1e-12};
  SuiteCheck norms{"normalization invariants", 0.0, 1e-12};
  std::mt19937_64 rng(seed);
  auto track = [](SuiteCheck& c, double err) { c.max_error = std::max(c.max_error, err); };

  for (std::size_t i = 0; i < instances; ++i) {
    auto [dims, frames] = random_family_dims(rng);
    RandomInstance inst = random_instance(dims, frames, rng);
    const LayerwiseFeatures& z = inst.features;
    CaMhfaParams& p = inst.params;
    const Tensor wk = normalize_layer_weights(p.omega_k_raw);
    const Tensor wv = normalize_layer_weights(p.omega_v_raw);
    const Tensor keys = compute_keys(z, wk, p.s_k);
    const Tensor values = compute_values(z, wv, p.s_v);

    // Conv path vs direct path at the drawn L.
    const AttentionMap direct = attention_weights_direct(keys, p.queries);
    track(conv, max_abs_diff(direct.weights, attention_weights_conv(keys, p.queries).weights));

    // Normalization invariants.
    for (const Tensor* w : {&wk, &wv}) {
      double total = 0.0;
      for (double v : w->data()) {
        total += v;
        if (!(v > 0.0)) track(norms, 1.0);
      }
      track(norms, std::abs(total - 1.0));
    }
    for (std::size_t g = 0; g < direct.groups(); ++g) {
      double total = 0.0;
      for (std::size_t t = 0; t < direct.frames(); ++t) total += direct(t, g);
      track(norms, std::abs(total - 1.0));
    }
    track(norms, std::abs(l2_norm(extract_embedding(z, p).values()) - 1.0));

    // L = 1: plain multi-head attention with the first query of each group.
    Tensor q1 = random_normal({dims.heads, 1, dims.compressed_dim}, rng, 0.5);
    const Tensor mhfa_ref = reference::mhfa_attention(keys, q1.reshaped({dims.heads, dims.compressed_dim}));
    track(mhfa, max_abs_diff(attention_weights_direct(keys, q1).weights, mhfa_ref));

    // Q = 0: uniform weights, pooled output equals the frame mean of V per group.
    const Tensor zero_q({dims.heads, dims.context, dims.compressed_dim});
    const AttentionMap uniform = attention_weights_direct(keys, zero_q);
    for (double v : uniform.weights.data()) track(mean, std::abs(v - 1.0 / static_cast<double>(frames)));
    const Tensor pooled = pool(values, uniform);
    for (std::size_t g = 0; g < dims.heads; ++g)
      for (std::size_t d = 0; d < dims.compressed_dim; ++d) {
        double m = 0.0;
        for (std::size_t t = 0; t < frames; ++t) m += values(t, d);
        m /= static_cast<double>(frames);
        track(mean, std::abs(pooled[g * dims.compressed_dim + d] - m));
      }

    // G = 1, L = 1: a single query.
    const Tensor q_single = random_normal({1, 1, dims.compressed_dim}, rng, 0.5);
    const auto [w_ref, c_ref] = reference::self_attentive_pooling(keys, values, q_single.data());
    const AttentionMap single = attention_weights_direct(keys, q_single);
    const Tensor c_single = pool(values, single);
    for (std::size_t t = 0; t < frames; ++t) track(sap, std::abs(single(t, 0) - w_ref[t]));
    for (std::size_t d = 0; d < dims.compressed_dim; ++d) track(sap, std::abs(c_single[d] - c_ref[d]));
  }
  return {mhfa, mean, sap, conv, norms};
}

/// Dimensions used by the gradient check.
struct GradcheckDims {
  std::size_t frames = 7, feature_dim = 5, num_layers = 3, compressed_dim = 4, heads = 2,
              context = 3, embed_dim = 3, classes = 4, batch = 2;
};

struct GradcheckSetup {
  Model model;
  std::vector<LabeledUtterance> batch;
};

inline GradcheckSetup gradcheck_setup(std::uint64_t seed, const GradcheckDims& g = {},
                                      double margin = 0.2, double scale = 32.0,
                                      MarginType type = MarginType::kAdditiveAngular) {
  std::mt19937_64 rng(seed);
  const PoolingDims d{g.num_layers + 1, g.feature_dim, g.compressed_dim, g.heads, g.context, g.embed_dim};
  GradcheckSetup s;
  s.model.pooling = random_instance(d, g.frames, rng).params;
  s.model.head.class_weights = random_normal({g.classes, g.embed_dim}, rng);
  s.model.head.margin = margin;
  s.model.head.scale = scale;
  s.model.head.margin_type = type;
  for (std::size_t b = 0; b < g.batch; ++b) {
    RandomInstance inst = random_instance(d, g.frames, rng);
    s.batch.push_back({std::move(inst.features), static_cast<std::uint32_t>(b % g.classes),
                       "gc" + std::to_string(b)});
  }
  return s;
}

inline const std::array<const char*, 8>& model_tensor_names() {
  static const std::array<const char*, 8> names = {"omega_k_raw", "omega_v_raw", "s_k",   "s_v",
                                                   "queries",     "w_out",       "b_out", "class_weights"};
  return names;
}

/// Analytic batch-loss gradient of every trainable tensor vs central differences.
inline std::vector<SuiteCheck> run_gradcheck_suite(const GradcheckSetup& setup, double eps = 1e-6,
                                                   double tolerance = 1e-5) {
  std::vector<const LabeledUtterance*> batch;
  for (const auto& u : setup.batch) batch.push_back(&u);
  BatchResult analytic = evaluate_batch(setup.model, batch);
  std::vector<Tensor*> grads = analytic.grads.tensors();

  Model probe = setup.model;
  std::vector<Tensor*> params = probe.tensors();
  std::vector<SuiteCheck> out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor original = *params[k];
    auto f = [&](const Tensor& x) {
      *params[k] = x;
      return batch_loss(probe, batch);
    };
    const Tensor numeric = finite_difference_gradient(f, original, eps);
    *params[k] = original;
    out.push_back({std::string("gradient: ") + model_tensor_names()[k],
                   max_relative_error(*grads[k], numeric), tolerance});
  }
  return out;
}

}  // namespace camhfa
