#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "camhfa/error.hpp"
#include "camhfa/tensor.hpp"

namespace camhfa::ad {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive operations in evaluation order and replays their adjoints in reverse.
///
/// Nodes are appended as operations run, so every node's inputs have smaller ids and reverse
/// id order is a reverse topological order. Each node's backward rule runs exactly once per
/// backward() call.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an input. Gradients are reported for every leaf.
  Var leaf(Tensor value) { return push(std::move(value), nullptr); }

  /// Appends the output of a primitive together with its adjoint rule.
  Var record(Tensor value, BackwardFn backward) { return push(std::move(value), std::move(backward)); }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id()); }

  /// Gradient of the last backward() target w.r.t. `v`.
  const Tensor& grad(Var v) const {
    check_owned(v);
    if (!has_grads_) throw ContractError("grad() called before backward()");
    return nodes_[v.id()].grad;
  }

  /// Mutable adjoint slot, used by backward rules to accumulate into their inputs.
  Tensor& adjoint(std::size_t id) { return nodes_[id].grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Var loss) {
    check_owned(loss);
    if (nodes_[loss.id()].value.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          shape_string(nodes_[loss.id()].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor(n.value.shape());
    has_grads_ = true;
    nodes_[loss.id()].grad[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
  };

  Var push(Tensor value, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(backward)});
    has_grads_ = false;
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  bool has_grads_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractError("operands recorded on different tapes");
  }
  return *a.tape();
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      t.adjoint(ia)[i] += g[i];
      t.adjoint(ib)[i] += g[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), [ia, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    for (std::size_t i = 0; i < g.size(); ++i) t.adjoint(ia)[i] += factor * g[i];
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    const Tensor& va = t.value(ia);
    const Tensor& vb = t.value(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      t.adjoint(ia)[i] += g[i] * vb[i];
      t.adjoint(ib)[i] += g[i] * va[i];
    }
  });
}

inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.tape()->record(Tensor::scalar(total), [ia](Tape& t, std::size_t self) {
    const double g = t.adjoint(self)[0];
    for (double& v : t.adjoint(ia).data()) v += g;
  });
}

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(camhfa::matmul(a.value(), b.value()), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    const Tensor& va = t.value(ia);
    const Tensor& vb = t.value(ib);
    // dA = G B^T, dB = A^T G
    Tensor& ga = t.adjoint(ia);
    Tensor& gb = t.adjoint(ib);
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t k = 0; k < va.cols(); ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < vb.cols(); ++j) acc += g(i, j) * vb(k, j);
        ga(i, k) += acc;
        for (std::size_t j = 0; j < vb.cols(); ++j) gb(k, j) += va(i, k) * g(i, j);
      }
  });
}

/// a * b^T
inline Var matmul_transposed(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(camhfa::matmul_transposed(a.value(), b.value()),
                     [ia, ib](Tape& t, std::size_t self) {
                       const Tensor& g = t.adjoint(self);
                       const Tensor& va = t.value(ia);
                       const Tensor& vb = t.value(ib);
                       Tensor& ga = t.adjoint(ia);
                       Tensor& gb = t.adjoint(ib);
                       for (std::size_t i = 0; i < va.rows(); ++i)
                         for (std::size_t j = 0; j < vb.rows(); ++j) {
                           const double gij = g(i, j);
                           for (std::size_t k = 0; k < va.cols(); ++k) {
                             ga(i, k) += gij * vb(j, k);
                             gb(j, k) += gij * va(i, k);
                           }
                         }
                     });
}

/// Softmax along `axis`; same layout rules as camhfa::softmax.
inline Var softmax(Var x, std::size_t axis = 0) {
  Tensor y = camhfa::softmax(x.value(), axis);
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(y), [ix, axis](Tape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.adjoint(self);
    Tensor& gx = t.adjoint(ix);
    // dx = y * (g - <g, y>) per normalized slice
    std::size_t slices = 1, len = y.size(), stride = 1, step = 0;
    if (y.rank() == 2) {
      if (axis == 0) {
        slices = y.cols(), len = y.rows(), stride = y.cols(), step = 1;
      } else {
        slices = y.rows(), len = y.cols(), stride = 1, step = y.cols();
      }
    }
    for (std::size_t s = 0; s < slices; ++s) {
      const std::size_t base = s * step;
      double inner = 0.0;
      for (std::size_t i = 0; i < len; ++i) inner += g[base + i * stride] * y[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * stride;
        gx[k] += y[k] * (g[k] - inner);
      }
    }
  });
}

/// Row vector x (1xE or E) plus bias b (E).
inline Var add_bias(Var x, Var b) {
  Tape& tape = detail::same_tape(x, b);
  if (x.value().size() != b.value().size()) {
    throw DimensionError("add_bias: " + shape_string(x.value().shape()) + " vs bias " +
                         shape_string(b.value().shape()));
  }
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ix = x.id(), ib = b.id();
  return tape.record(std::move(out), [ix, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.adjoint(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      t.adjoint(ix)[i] += g[i];
      t.adjoint(ib)[i] += g[i];
    }
  });
}

inline Var l2_normalize_rows(Var x) {
  Tensor y = camhfa::l2_normalize_rows(x.value());
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(y), [ix](Tape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    const Tensor& xv = t.value(ix);
    const Tensor& g = t.adjoint(self);
    Tensor& gx = t.adjoint(ix);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double n = l2_norm(xv.row(r));
      const double yg = dot(y.row(r), g.row(r));
      auto yr = y.row(r);
      auto gr = g.row(r);
      auto out = gx.row(r);
      for (std::size_t i = 0; i < yr.size(); ++i) out[i] += (gr[i] - yr[i] * yg) / n;
    }
  });
}

/// Cross-entropy of a single row of logits against `label`: logsumexp(z) - z[label].
inline Var cross_entropy(Var logits, std::size_t label) {
  const Tensor& z = logits.value();
  if (label >= z.size()) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(z.size()) + " classes");
  }
  double mx = z[0];
  for (double v : z.data()) mx = std::max(mx, v);
  double total = 0.0;
  for (double v : z.data()) total += std::exp(v - mx);
  const double loss = mx + std::log(total) - z[label];
  const std::size_t iz = logits.id();
  return logits.tape()->record(Tensor::scalar(loss), [iz, label, mx, total](Tape& t, std::size_t self) {
    const double g = t.adjoint(self)[0];
    const Tensor& z = t.value(iz);
    Tensor& gz = t.adjoint(iz);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double p = std::exp(z[i] - mx) / total;
      gz[i] += g * (p - (i == label ? 1.0 : 0.0));
    }
  });
}

}  // namespace camhfa::ad
