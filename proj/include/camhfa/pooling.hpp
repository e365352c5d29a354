#pragma once

// Context-aware multi-head factorized attentive pooling.
//
// Layer-wise features Z = {z_0..z_N} (each T x F) are mixed by two softmax-normalized layer
// weightings and compressed into keys K = (sum w^k_n z_n) S_k and values V = (sum w^v_n z_n) S_v.
// Each of G query groups holds L vectors that score a window of L consecutive key frames
// centred on frame t; the per-group frame softmax pools the values, and the concatenated
// group outputs feed a linear layer followed by L2 normalization.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "camhfa/autodiff.hpp"
#include "camhfa/error.hpp"
#include "camhfa/tensor.hpp"

namespace camhfa {

/// Stack of N+1 layer outputs, each frames x features.
class LayerwiseFeatures {
 public:
  LayerwiseFeatures() = default;

  explicit LayerwiseFeatures(std::vector<Tensor> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw DimensionError("layer-wise features need at least one layer");
    for (std::size_t n = 0; n < layers_.size(); ++n) {
      require_rank2(layers_[n], "feature layer");
      if (layers_[n].shape() != layers_[0].shape()) {
        throw DimensionError("layer " + std::to_string(n) + " has shape " +
                             shape_string(layers_[n].shape()) + ", layer 0 has " +
                             shape_string(layers_[0].shape()));
      }
    }
    if (frames() == 0) throw DimensionError("layer-wise features need at least one frame");
  }

  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t frames() const { return layers_.at(0).rows(); }
  std::size_t feature_dim() const { return layers_.at(0).cols(); }

  const Tensor& layer(std::size_t n) const { return layers_.at(n); }
  const std::vector<Tensor>& layers() const noexcept { return layers_; }

  friend bool operator==(const LayerwiseFeatures&, const LayerwiseFeatures&) = default;

 private:
  std::vector<Tensor> layers_;
};

/// Per-group frame weights, frames x groups. Every column is a distribution over frames.
struct AttentionMap {
  Tensor weights;

  std::size_t frames() const { return weights.rows(); }
  std::size_t groups() const { return weights.cols(); }
  double operator()(std::size_t t, std::size_t g) const { return weights(t, g); }
};

/// Unit-norm speaker embedding.
struct Embedding {
  Tensor vector;

  std::size_t dim() const noexcept { return vector.size(); }
  std::span<const double> values() const noexcept { return vector.data(); }
};

struct PoolingDims {
  std::size_t layers = 1;          // N + 1
  std::size_t feature_dim = 1;     // F
  std::size_t compressed_dim = 1;  // D
  std::size_t heads = 1;           // G
  std::size_t context = 1;         // L
  std::size_t embed_dim = 1;       // E

  std::size_t radius() const noexcept { return (context - 1) / 2; }

  void validate() const {
    if (layers == 0 || feature_dim == 0 || compressed_dim == 0 || heads == 0 || embed_dim == 0) {
      throw ConfigError("pooling dimensions must all be positive");
    }
    if (context == 0 || context % 2 == 0) {
      throw ConfigError("context length L must be odd, got " + std::to_string(context));
    }
  }

  friend bool operator==(const PoolingDims&, const PoolingDims&) = default;
};

/// Trainable parameters of the pooling back-end.
struct CaMhfaParams {
  Tensor omega_k_raw;  // N+1
  Tensor omega_v_raw;  // N+1
  Tensor s_k;          // F x D
  Tensor s_v;          // F x D
  Tensor queries;      // G x L x D
  Tensor w_out;        // G*D x E
  Tensor b_out;        // E

  PoolingDims dims() const {
    PoolingDims d;
    d.layers = omega_k_raw.size();
    d.feature_dim = s_k.rank() == 2 ? s_k.rows() : 0;
    d.compressed_dim = s_k.rank() == 2 ? s_k.cols() : 0;
    if (queries.rank() == 3) {
      d.heads = queries.shape()[0];
      d.context = queries.shape()[1];
    }
    d.embed_dim = b_out.size();
    return d;
  }

  void validate() const {
    const PoolingDims d = dims();
    d.validate();
    auto expect = [](const Tensor& t, const Shape& s, const char* name) {
      if (t.shape() != s) {
        throw DimensionError(std::string(name) + " has shape " + shape_string(t.shape()) +
                             ", expected " + shape_string(s));
      }
    };
    expect(omega_k_raw, {d.layers}, "omega_k_raw");
    expect(omega_v_raw, {d.layers}, "omega_v_raw");
    expect(s_k, {d.feature_dim, d.compressed_dim}, "s_k");
    expect(s_v, {d.feature_dim, d.compressed_dim}, "s_v");
    expect(queries, {d.heads, d.context, d.compressed_dim}, "queries");
    expect(w_out, {d.heads * d.compressed_dim, d.embed_dim}, "w_out");
    expect(b_out, {d.embed_dim}, "b_out");
  }

  /// Zero raw layer weights; everything else uniform in +-1/sqrt(fan_in).
  static CaMhfaParams init(const PoolingDims& d, std::uint64_t seed) {
    d.validate();
    std::mt19937_64 rng(seed);
    auto uniform = [&rng](Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Tensor t(std::move(shape));
      for (double& v : t.data()) v = dist(rng);
      return t;
    };
    CaMhfaParams p;
    p.omega_k_raw = Tensor({d.layers});
    p.omega_v_raw = Tensor({d.layers});
    p.s_k = uniform({d.feature_dim, d.compressed_dim}, d.feature_dim);
    p.s_v = uniform({d.feature_dim, d.compressed_dim}, d.feature_dim);
    p.queries = uniform({d.heads, d.context, d.compressed_dim}, d.context * d.compressed_dim);
    p.w_out = uniform({d.heads * d.compressed_dim, d.embed_dim}, d.heads * d.compressed_dim);
    p.b_out = uniform({d.embed_dim}, d.heads * d.compressed_dim);
    return p;
  }

  friend bool operator==(const CaMhfaParams&, const CaMhfaParams&) = default;
};

inline Tensor normalize_layer_weights(const Tensor& raw) {
  if (raw.rank() != 1) throw DimensionError("raw layer weights must be a vector");
  return softmax(raw);
}

/// sum_n omega[n] * z_n, accumulated in increasing n.
inline Tensor weighted_layer_sum(const LayerwiseFeatures& z, const Tensor& omega) {
  if (omega.size() != z.num_layers()) {
    throw DimensionError("layer weights have " + std::to_string(omega.size()) + " entries for " +
                         std::to_string(z.num_layers()) + " layers");
  }
  Tensor out({z.frames(), z.feature_dim()});
  for (std::size_t n = 0; n < z.num_layers(); ++n) {
    const auto src = z.layer(n).data();
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += omega[n] * src[i];
  }
  return out;
}

namespace detail {

inline void require_normalized(const Tensor& omega) {
  double total = 0.0;
  for (double w : omega.data()) {
    if (!(w > 0.0)) throw ContractError("layer weights must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("layer weights must sum to 1");
}

inline void require_queries(const Tensor& keys, const Tensor& queries) {
  require_rank2(keys, "keys");
  if (queries.rank() != 3) {
    throw DimensionError("query bank must be G x L x D, got " + shape_string(queries.shape()));
  }
  if (queries.shape()[2] != keys.cols()) {
    throw DimensionError("query dim " + std::to_string(queries.shape()[2]) +
                         " does not match key dim " + std::to_string(keys.cols()));
  }
  const std::size_t context = queries.shape()[1];
  if (context % 2 == 0) {
    throw ConfigError("context length L must be odd, got " + std::to_string(context));
  }
}

}  // namespace detail

inline Tensor compute_keys(const LayerwiseFeatures& z, const Tensor& omega_k, const Tensor& s_k) {
  detail::require_normalized(omega_k);
  return matmul(weighted_layer_sum(z, omega_k), s_k);
}

inline Tensor compute_values(const LayerwiseFeatures& z, const Tensor& omega_v, const Tensor& s_v) {
  detail::require_normalized(omega_v);
  return matmul(weighted_layer_sum(z, omega_v), s_v);
}

/// score[t,g] = (1/L) sum_{j=-R..R} q^g_{j+R} . k_{t+j}, keys outside [0,T) read as zero.
inline Tensor context_scores(const Tensor& keys, const Tensor& queries) {
  detail::require_queries(keys, queries);
  const std::size_t frames = keys.rows(), dim = keys.cols();
  const std::size_t groups = queries.shape()[0], context = queries.shape()[1];
  const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>((context - 1) / 2);
  Tensor scores({frames, groups});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t g = 0; g < groups; ++g) {
      double acc = 0.0;
      for (std::size_t i = 0; i < context; ++i) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(i) - radius;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(frames)) continue;
        for (std::size_t d = 0; d < dim; ++d) acc += queries(g, i, d) * keys(src, d);
      }
      scores(t, g) = acc / static_cast<double>(context);
    }
  }
  return scores;
}

/// Attention map evaluated frame by frame from the windowed score definition.
inline AttentionMap attention_weights_direct(const Tensor& keys, const Tensor& queries) {
  return AttentionMap{softmax(context_scores(keys, queries), 0)};
}

/// Same map computed as a zero-padded 2D convolution: the T x D key map is unfolded into
/// T x (L*D) windows and multiplied by the G kernels of shape (L, D).
inline AttentionMap attention_weights_conv(const Tensor& keys, const Tensor& queries) {
  detail::require_queries(keys, queries);
  const std::size_t frames = keys.rows(), dim = keys.cols();
  const std::size_t groups = queries.shape()[0], context = queries.shape()[1];
  const std::size_t radius = (context - 1) / 2;

  // Padded key map: R zero frames on each side.
  Tensor padded({frames + 2 * radius, dim});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t d = 0; d < dim; ++d) padded(t + radius, d) = keys(t, d);

  Tensor windows({frames, context * dim});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 0; i < context; ++i)
      for (std::size_t d = 0; d < dim; ++d) windows(t, i * dim + d) = padded(t + i, d);

  const Tensor kernels = queries.reshaped({groups, context * dim});
  Tensor scores = matmul_transposed(windows, kernels);
  for (double& v : scores.data()) v /= static_cast<double>(context);
  return AttentionMap{softmax(scores, 0)};
}

/// c = concat_g(sum_t a[t,g] v_t), shape 1 x (G*D).
inline Tensor pool(const Tensor& values, const AttentionMap& attention) {
  require_rank2(values, "values");
  const Tensor& a = attention.weights;
  require_rank2(a, "attention map");
  if (a.rows() != values.rows()) {
    throw DimensionError("attention map has " + std::to_string(a.rows()) + " frames, values have " +
                         std::to_string(values.rows()));
  }
  const std::size_t frames = values.rows(), dim = values.cols(), groups = a.cols();
  Tensor c({1, groups * dim});
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t t = 0; t < frames; ++t) {
      const double w = a(t, g);
      for (std::size_t d = 0; d < dim; ++d) c[g * dim + d] += w * values(t, d);
    }
  return c;
}

inline Embedding embedding_head(const Tensor& pooled, const Tensor& w_out, const Tensor& b_out) {
  Tensor h = matmul(pooled, w_out);
  if (h.size() != b_out.size()) {
    throw DimensionError("bias " + shape_string(b_out.shape()) + " does not match head output " +
                         shape_string(h.shape()));
  }
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += b_out[i];
  Tensor e = l2_normalize_rows(h);
  return Embedding{e.reshaped({e.size()})};
}

inline void check_compatible(const LayerwiseFeatures& z, const CaMhfaParams& params) {
  params.validate();
  const PoolingDims d = params.dims();
  if (z.num_layers() != d.layers || z.feature_dim() != d.feature_dim) {
    throw DimensionError("features have " + std::to_string(z.num_layers()) + " layers of dim " +
                         std::to_string(z.feature_dim()) + ", model expects " +
                         std::to_string(d.layers) + " of dim " + std::to_string(d.feature_dim));
  }
}

inline Embedding extract_embedding(const LayerwiseFeatures& z, const CaMhfaParams& params) {
  check_compatible(z, params);
  const Tensor keys = compute_keys(z, normalize_layer_weights(params.omega_k_raw), params.s_k);
  const Tensor values = compute_values(z, normalize_layer_weights(params.omega_v_raw), params.s_v);
  const AttentionMap attention = attention_weights_direct(keys, params.queries);
  return embedding_head(pool(values, attention), params.w_out, params.b_out);
}

// Differentiable counterparts. Forward values are computed by the functions above, so a
// tape evaluation is bit-identical to the plain one.
namespace ad {

inline Var weighted_layer_sum(Var omega, const LayerwiseFeatures& z) {
  Tensor out = camhfa::weighted_layer_sum(z, omega.value());
  const std::size_t io = omega.id();
  return omega.tape()->record(std::move(out), [io, &z](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    Tensor& go = t.adjoint(io);
    for (std::size_t n = 0; n < z.num_layers(); ++n) go[n] += dot(g.data(), z.layer(n).data());
  });
}

inline Var context_scores(Var keys, Var queries) {
  Tape& tape = detail::same_tape(keys, queries);
  Tensor scores = camhfa::context_scores(keys.value(), queries.value());
  const std::size_t ik = keys.id(), iq = queries.id();
  return tape.record(std::move(scores), [ik, iq](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    const Tensor& k = t.value(ik);
    const Tensor& q = t.value(iq);
    Tensor& gk = t.adjoint(ik);
    Tensor& gq = t.adjoint(iq);
    const std::size_t frames = k.rows(), dim = k.cols();
    const std::size_t groups = q.shape()[0], context = q.shape()[1];
    const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>((context - 1) / 2);
    for (std::size_t tt = 0; tt < frames; ++tt)
      for (std::size_t grp = 0; grp < groups; ++grp) {
        const double w = g(tt, grp) / static_cast<double>(context);
        for (std::size_t i = 0; i < context; ++i) {
          const std::ptrdiff_t src =
              static_cast<std::ptrdiff_t>(tt) + static_cast<std::ptrdiff_t>(i) - radius;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(frames)) continue;
          for (std::size_t d = 0; d < dim; ++d) {
            gq(grp, i, d) += w * k(src, d);
            gk(src, d) += w * q(grp, i, d);
          }
        }
      }
  });
}

inline Var pool(Var values, Var attention) {
  Tape& tape = detail::same_tape(values, attention);
  Tensor c = camhfa::pool(values.value(), AttentionMap{attention.value()});
  const std::size_t iv = values.id(), ia = attention.id();
  return tape.record(std::move(c), [iv, ia](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    const Tensor& v = t.value(iv);
    const Tensor& a = t.value(ia);
    Tensor& gv = t.adjoint(iv);
    Tensor& ga = t.adjoint(ia);
    const std::size_t frames = v.rows(), dim = v.cols(), groups = a.cols();
    for (std::size_t grp = 0; grp < groups; ++grp)
      for (std::size_t tt = 0; tt < frames; ++tt) {
        double acc = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
          acc += g[grp * dim + d] * v(tt, d);
          gv(tt, d) += a(tt, grp) * g[grp * dim + d];
        }
        ga(tt, grp) += acc;
      }
  });
}

/// Pooling parameters registered as tape leaves.
struct ParamVars {
  Var omega_k_raw, omega_v_raw, s_k, s_v, queries, w_out, b_out;

  static ParamVars register_on(Tape& tape, const CaMhfaParams& p) {
    return {tape.leaf(p.omega_k_raw), tape.leaf(p.omega_v_raw), tape.leaf(p.s_k),
            tape.leaf(p.s_v),         tape.leaf(p.queries),     tape.leaf(p.w_out),
            tape.leaf(p.b_out)};
  }

  /// Gradients in the same layout as CaMhfaParams.
  CaMhfaParams grads(const Tape& tape) const {
    return {tape.grad(omega_k_raw), tape.grad(omega_v_raw), tape.grad(s_k), tape.grad(s_v),
            tape.grad(queries),     tape.grad(w_out),       tape.grad(b_out)};
  }
};

/// Embedding as a 1 x E row on the tape. `z` must outlive the tape's backward pass.
inline Var extract_embedding(const ParamVars& p, const LayerwiseFeatures& z) {
  Var keys = matmul(weighted_layer_sum(softmax(p.omega_k_raw), z), p.s_k);
  Var values = matmul(weighted_layer_sum(softmax(p.omega_v_raw), z), p.s_v);
  Var attention = softmax(context_scores(keys, p.queries), 0);
  Var pooled = pool(values, attention);
  return l2_normalize_rows(add_bias(matmul(pooled, p.w_out), p.b_out));
}

}  // namespace ad

}  // namespace camhfa
