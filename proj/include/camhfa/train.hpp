#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "camhfa/autodiff.hpp"
#include "camhfa/error.hpp"
#include "camhfa/loss.hpp"
#include "camhfa/pooling.hpp"
#include "camhfa/synth.hpp"
#include "camhfa/tensor.hpp"

namespace camhfa {

enum class LrDecay { kExponential, kLinear };

struct TrainConfig {
  std::size_t heads = 8;           // G
  std::size_t context = 3;         // L
  std::size_t compressed_dim = 16;  // D
  std::size_t embed_dim = 32;      // E
  double margin = 0.2;
  double scale = 32.0;
  MarginType margin_type = MarginType::kAdditiveAngular;
  double lr_start = 1e-4;
  double lr_end = 1e-6;
  LrDecay lr_decay = LrDecay::kExponential;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  double grad_scale_backbone = 1.0;  // no backbone is trained here; kept at 1.0
  std::uint64_t seed = 1;

  void validate() const {
    if (heads == 0 || compressed_dim == 0 || embed_dim == 0) {
      throw ConfigError("heads, compressed_dim and embed_dim must be positive");
    }
    if (context == 0 || context % 2 == 0) {
      throw ConfigError("context length L must be odd, got " + std::to_string(context));
    }
    if (!(lr_end > 0.0) || !(lr_start >= lr_end)) {
      throw ConfigError("learning rates must satisfy lr_start >= lr_end > 0");
    }
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(margin >= 0.0) || !(scale > 0.0)) throw ConfigError("need margin >= 0 and scale > 0");
    if (grad_scale_backbone != 1.0) {
      throw ConfigError("grad_scale_backbone only supports 1.0 (no backbone is trained)");
    }
  }

  PoolingDims pooling_dims(std::size_t layers, std::size_t feature_dim) const {
    return {layers, feature_dim, compressed_dim, heads, context, embed_dim};
  }
};

/// Learning rate at `epoch`, decaying from lr_start (first epoch) to lr_end (last epoch).
inline double lr_schedule(std::size_t epoch, const TrainConfig& config) {
  if (config.epochs <= 1) return config.lr_start;
  if (epoch >= config.epochs) {
    throw ContractError("epoch " + std::to_string(epoch) + " outside schedule of " +
                        std::to_string(config.epochs));
  }
  const double frac = static_cast<double>(epoch) / static_cast<double>(config.epochs - 1);
  if (config.lr_decay == LrDecay::kLinear) {
    return config.lr_start + (config.lr_end - config.lr_start) * frac;
  }
  return config.lr_start * std::pow(config.lr_end / config.lr_start, frac);
}

/// Everything that is trained: pooling back-end plus classifier.
struct Model {
  CaMhfaParams pooling;
  ClassifierHead head;

  template <class F>
  void for_each_tensor(F&& f) {
    f(pooling.omega_k_raw);
    f(pooling.omega_v_raw);
    f(pooling.s_k);
    f(pooling.s_v);
    f(pooling.queries);
    f(pooling.w_out);
    f(pooling.b_out);
    f(head.class_weights);
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for_each_tensor([&out](Tensor& t) { out.push_back(&t); });
    return out;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t steps = 0;
};

/// One AdamW update: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
inline void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                           AdamWState& state, double lr, double weight_decay,
                           const AdamWHyper& hyper = {}) {
  if (params.size() != grads.size()) {
    throw DimensionError("optimizer_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (state.steps == 0) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const Tensor* p : params) {
      state.first_moment.emplace_back(p->shape());
      state.second_moment.emplace_back(p->shape());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("optimizer state does not match parameter list");
  }
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double correct1 = 1.0 - std::pow(hyper.beta1, t);
  const double correct2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    require_same_shape(p, g, "optimizer_step");
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
      v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correct1;
      const double v_hat = v[k] / correct2;
      p[k] = p[k] * (1.0 - lr * weight_decay) - lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

inline void optimizer_step(Model& params, Model& grads, AdamWState& state, double lr,
                           double weight_decay) {
  const std::vector<Tensor*> p = params.tensors();
  const std::vector<Tensor*> g = grads.tensors();
  const std::vector<const Tensor*> gc(g.begin(), g.end());
  optimizer_step(p, gc, state, lr, weight_decay);
}

struct SampleResult {
  double loss = 0.0;
  bool correct = false;
  Model grads;
};

/// Loss, argmax-correctness and gradients for one labelled utterance.
inline SampleResult evaluate_sample(const Model& model, const LabeledUtterance& utt) {
  ad::Tape tape;
  const ad::ParamVars p = ad::ParamVars::register_on(tape, model.pooling);
  ad::Var w = tape.leaf(model.head.class_weights);
  ad::Var e = ad::extract_embedding(p, utt.features);
  const ad::MarginLoss out = ad::margin_softmax_loss(e, w, utt.speaker_id, model.head.margin,
                                                     model.head.scale, model.head.margin_type);
  tape.backward(out.loss);

  SampleResult r;
  r.loss = out.loss.value()[0];
  const Tensor& cos = out.cosines.value();
  const auto best = std::max_element(cos.data().begin(), cos.data().end()) - cos.data().begin();
  r.correct = static_cast<std::size_t>(best) == utt.speaker_id;
  r.grads.pooling = p.grads(tape);
  r.grads.head = model.head;
  r.grads.head.class_weights = tape.grad(w);
  return r;
}

/// Mean margin loss over a batch, forward only. Used as the finite-difference target.
inline double batch_loss(const Model& model, std::span<const LabeledUtterance* const> batch) {
  double total = 0.0;
  for (const LabeledUtterance* u : batch) {
    total += margin_softmax_loss(extract_embedding(u->features, model.pooling), u->speaker_id,
                                 model.head);
  }
  return total / static_cast<double>(batch.size());
}

struct BatchResult {
  double loss_sum = 0.0;
  std::size_t correct = 0;
  Model grads;  // gradient of the batch-mean loss
};

/// Per-sample work may run on up to `threads` threads; reduction is always in batch order.
inline BatchResult evaluate_batch(const Model& model, std::span<const LabeledUtterance* const> batch,
                                  unsigned threads = 1) {
  if (batch.empty()) throw ContractError("empty batch");
  std::vector<SampleResult> results(batch.size());
  const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), batch.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) results[i] = evaluate_sample(model, *batch[i]);
  } else {
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < batch.size(); i += workers) {
            results[i] = evaluate_sample(model, *batch[i]);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  BatchResult out;
  out.grads = std::move(results[0].grads);
  out.loss_sum = results[0].loss;
  out.correct = results[0].correct ? 1 : 0;
  for (std::size_t i = 1; i < results.size(); ++i) {
    out.loss_sum += results[i].loss;
    out.correct += results[i].correct ? 1 : 0;
    auto dst = out.grads.tensors();
    auto src = results[i].grads.tensors();
    for (std::size_t k = 0; k < dst.size(); ++k)
      for (std::size_t j = 0; j < dst[k]->size(); ++j) (*dst[k])[j] += (*src[k])[j];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.grads.for_each_tensor([inv](Tensor& t) {
    for (double& v : t.data()) v *= inv;
  });
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;  // not part of equality

  friend bool operator==(const EpochRecord& a, const EpochRecord& b) {
    return a.epoch == b.epoch && a.loss == b.loss && a.accuracy == b.accuracy && a.lr == b.lr;
  }
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

struct TrainResult {
  Model model;
  TrainLog log;
};

/// Number of classes implied by a dataset; every id below it must occur.
inline std::size_t count_classes(const std::vector<LabeledUtterance>& data) {
  std::uint32_t top = 0;
  for (const auto& u : data) top = std::max(top, u.speaker_id);
  std::vector<bool> seen(std::size_t{top} + 1, false);
  for (const auto& u : data) seen[u.speaker_id] = true;
  for (std::size_t s = 0; s < seen.size(); ++s) {
    if (!seen[s]) throw ConfigError("speaker " + std::to_string(s) + " has no utterances");
  }
  return seen.size();
}

inline Model init_model(const TrainConfig& config, std::size_t layers, std::size_t feature_dim,
                        std::size_t classes) {
  Model m;
  m.pooling = CaMhfaParams::init(config.pooling_dims(layers, feature_dim), config.seed);
  m.head = ClassifierHead::init(classes, config.embed_dim, config.margin, config.scale,
                                config.margin_type, config.seed + 1);
  return m;
}

/// Mini-batch AdamW training. Deterministic for a fixed dataset and config.seed,
/// independent of `threads`.
inline TrainResult train(const std::vector<LabeledUtterance>& data, const TrainConfig& config,
                         unsigned threads = 1,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  if (data.empty()) throw ConfigError("training set is empty");
  const std::size_t layers = data[0].features.num_layers();
  const std::size_t feature_dim = data[0].features.feature_dim();
  for (const auto& u : data) {
    if (u.features.num_layers() != layers || u.features.feature_dim() != feature_dim) {
      throw ConfigError("utterance '" + u.utterance_id + "' has inconsistent layer/feature dims");
    }
  }
  const std::size_t classes = count_classes(data);

  TrainResult result;
  result.model = init_model(config, layers, feature_dim, classes);
  AdamWState state;
  std::mt19937_64 shuffler(config.seed + 2);
  std::vector<const LabeledUtterance*> order;
  for (const auto& u : data) order.push_back(&u);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffler);
    const double lr = lr_schedule(epoch, config);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - b);
      BatchResult br = evaluate_batch(result.model, std::span(order).subspan(b, n), threads);
      loss_sum += br.loss_sum;
      correct += br.correct;
      optimizer_step(result.model, br.grads, state, lr, config.weight_decay);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(order.size());
    rec.accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    rec.lr = lr;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace camhfa
