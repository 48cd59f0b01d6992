#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "virm/tensor.hpp"

namespace virm {

// ---------------------------------------------------------------------------
// Forward kernels. Shared between the tape operations and tape-free
// evaluation paths so both compute bit-identical values.
// ---------------------------------------------------------------------------

inline Tensor affine_eval(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("affine: expected x[b x in] " + x.shape_str() + ", W[in x out] " +
                     w.shape_str() + ", b[out] " + b.shape_str());
  }
  const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
  if (w.dim(0) != in || b.dim(0) != out) {
    throw ShapeError("affine: inner dimensions disagree, x " + x.shape_str() + " vs W " +
                     w.shape_str() + " vs b " + b.shape_str());
  }
  Tensor y({rows, out});
  for (std::size_t i = 0; i < rows; ++i) {
    double* yi = &y(i, 0);
    for (std::size_t j = 0; j < out; ++j) yi[j] = b[j];
    for (std::size_t k = 0; k < in; ++k) {
      const double xv = x(i, k);
      if (xv == 0.0) continue;
      const double* wk = &w(k, 0);
      for (std::size_t j = 0; j < out; ++j) yi[j] += xv * wk[j];
    }
  }
  return y;
}

// Exact-erf GeLU: 0.5 x (1 + erf(x / sqrt(2))).
inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

inline Tensor gelu_eval(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return y;
}

// Tape-free batch norm sharing the training-mode semantics: the eval batch's
// own statistics (population variance) standardize each feature.
inline Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             double eps) {
  if (x.rank() != 2) throw ShapeError("batchnorm: expected rank-2 input, got " + x.shape_str());
  const std::size_t rows = x.dim(0), c = x.dim(1);
  if (rows < 2) {
    throw ValueError("batchnorm: degenerate batch of " + std::to_string(rows) +
                     " rows (need >= 2)");
  }
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batchnorm: gamma " + gamma.shape_str() + " / beta " + beta.shape_str() +
                     " do not match feature count " + std::to_string(c));
  }
  Tensor y({rows, c});
  for (std::size_t j = 0; j < c; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < rows; ++i) mu += x(i, j);
    mu /= static_cast<double>(rows);
    double var = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double d = x(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(rows);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < rows; ++i) y(i, j) = gamma[j] * (x(i, j) - mu) * inv_std + beta[j];
  }
  return y;
}

inline Tensor softmax_rows(const Tensor& logits) {
  Tensor p = logits;
  const std::size_t rows = logits.dim(0), c = logits.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = p(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, p(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p(i, j) = std::exp(p(i, j) - mx);
      z += p(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) p(i, j) /= z;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Computation tape
// ---------------------------------------------------------------------------

using NodeId = std::size_t;

/// Records a DAG of tensor operations as they execute. Node creation order is
/// a topological order, so the backward pass is a single reverse sweep.
/// Gradients accumulate additively: a value consumed k times receives the sum
/// of k contributions. One tape per loss; tapes share no state.
class Tape {
public:
  NodeId input(Tensor value) { return push(std::move(value), {}); }

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  const Tensor& grad(NodeId id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Every input reachable from the loss
  /// receives its exact gradient; unreachable inputs get zero.
  void backward(NodeId loss) {
    if (value(loss).numel() != 1) {
      throw ValueError("backward: seed must be a scalar, got shape " +
                       value(loss).shape_str());
    }
    for (auto& n : nodes_) {
      for (auto& g : n.grad.data()) g = 0.0;
    }
    nodes_[loss].grad[0] = 1.0;
    for (std::size_t i = loss + 1; i-- > 0;) {
      if (nodes_[i].pull) nodes_[i].pull(*this, i);
    }
  }

  // -- operations ----------------------------------------------------------

  NodeId affine(NodeId x, NodeId w, NodeId b) {
    Tensor y = affine_eval(value(x), value(w), value(b));
    return push(std::move(y), [x, w, b](Tape& t, NodeId self) {
      const Tensor& g = t.grad(self);
      const Tensor& xv = t.value(x);
      const Tensor& wv = t.value(w);
      const std::size_t rows = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
      Tensor& gx = t.mutable_grad(x);
      Tensor& gw = t.mutable_grad(w);
      Tensor& gb = t.mutable_grad(b);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* gi = &g(i, 0);
        for (std::size_t j = 0; j < out; ++j) gb[j] += gi[j];
        for (std::size_t k = 0; k < in; ++k) {
          const double* wk = &wv(k, 0);
          const double xik = xv(i, k);
          double acc = 0.0;
          double* gwk = &gw(k, 0);
          for (std::size_t j = 0; j < out; ++j) {
            acc += gi[j] * wk[j];
            gwk[j] += xik * gi[j];
          }
          gx(i, k) += acc;
        }
      }
    });
  }

  NodeId gelu(NodeId x) {
    Tensor y = gelu_eval(value(x));
    return push(std::move(y), [x](Tape& t, NodeId self) {
      const Tensor& g = t.grad(self);
      const Tensor& xv = t.value(x);
      Tensor& gx = t.mutable_grad(x);
      constexpr double inv_sqrt2pi = 0.3989422804014327;  // 1/sqrt(2 pi)
      for (std::size_t i = 0; i < xv.numel(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        gx[i] += (cdf + v * pdf) * g[i];
      }
    });
  }

  /// Training-mode batch norm with population (1/B) variance.
  NodeId batchnorm_train(NodeId x, NodeId gamma, NodeId beta, double eps) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2) throw ShapeError("batchnorm: expected rank-2 input, got " + xv.shape_str());
    const std::size_t rows = xv.dim(0), c = xv.dim(1);
    if (rows < 2) {
      throw ValueError("batchnorm: degenerate batch of " + std::to_string(rows) +
                       " rows (need >= 2)");
    }
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    if (gv.numel() != c || bv.numel() != c) {
      throw ShapeError("batchnorm: gamma " + gv.shape_str() + " / beta " + bv.shape_str() +
                       " do not match feature count " + std::to_string(c));
    }
    Tensor xhat({rows, c});
    std::vector<double> inv_std(c);
    for (std::size_t j = 0; j < c; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < rows; ++i) mu += xv(i, j);
      mu /= static_cast<double>(rows);
      double var = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        const double d = xv(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<double>(rows);
      inv_std[j] = 1.0 / std::sqrt(var + eps);
      for (std::size_t i = 0; i < rows; ++i) xhat(i, j) = (xv(i, j) - mu) * inv_std[j];
    }
    Tensor y({rows, c});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) y(i, j) = gv[j] * xhat(i, j) + bv[j];
    return push(std::move(y),
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                 c](Tape& t, NodeId self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& gv = t.value(gamma);
                  Tensor& gx = t.mutable_grad(x);
                  Tensor& ggamma = t.mutable_grad(gamma);
                  Tensor& gbeta = t.mutable_grad(beta);
                  const double inv_b = 1.0 / static_cast<double>(rows);
                  for (std::size_t j = 0; j < c; ++j) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t i = 0; i < rows; ++i) {
                      sum_g += g(i, j);
                      sum_gx += g(i, j) * xhat(i, j);
                    }
                    ggamma[j] += sum_gx;
                    gbeta[j] += sum_g;
                    const double a = gv[j] * inv_std[j];
                    for (std::size_t i = 0; i < rows; ++i) {
                      gx(i, j) += a * (g(i, j) - inv_b * sum_g - xhat(i, j) * inv_b * sum_gx);
                    }
                  }
                });
  }

  /// Mean over the batch of -log softmax(logits)[label], max-stabilized.
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
    const Tensor& lv = value(logits);
    if (lv.rank() != 2) {
      throw ShapeError("cross_entropy: expected rank-2 logits, got " + lv.shape_str());
    }
    const std::size_t rows = lv.dim(0), c = lv.dim(1);
    if (labels.size() != rows) {
      throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(rows) + " rows");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= c) {
        throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                         std::to_string(c) + ")");
      }
    }
    Tensor p = softmax_rows(lv);
    double loss = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      loss -= std::log(p(i, static_cast<std::size_t>(labels[i])));
    }
    loss /= static_cast<double>(rows);
    return push(Tensor::scalar(loss),
                [logits, labels = std::move(labels), p = std::move(p), rows, c](Tape& t,
                                                                               NodeId self) {
                  const double g = t.grad(self)[0] / static_cast<double>(rows);
                  Tensor& gl = t.mutable_grad(logits);
                  for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                      const double ind = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
                      gl(i, j) += (p(i, j) - ind) * g;
                    }
                  }
                });
  }

  /// (1/(2n)) sum (a - b)^2 with n = leading dimension of a.
  NodeId mse(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_same_shape(av, bv, "mse");
    const double n = static_cast<double>(av.rows());
    double s = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) {
      const double d = av[i] - bv[i];
      s += d * d;
    }
    return push(Tensor::scalar(s / (2.0 * n)), [a, b, n](Tape& t, NodeId self) {
      const double g = t.grad(self)[0] / n;
      const Tensor& av = t.value(a);
      const Tensor& bv = t.value(b);
      Tensor& ga = t.mutable_grad(a);
      Tensor& gb = t.mutable_grad(b);
      for (std::size_t i = 0; i < av.numel(); ++i) {
        const double d = (av[i] - bv[i]) * g;
        ga[i] += d;
        gb[i] -= d;
      }
    });
  }

  /// (1/M) sum (v_e - mean)^2 over scalar nodes.
  NodeId population_variance(std::span<const NodeId> scalars) {
    if (scalars.empty()) throw ValueError("population_variance: empty list");
    const double m = static_cast<double>(scalars.size());
    double mean = 0.0;
    for (NodeId id : scalars) mean += value(id).value();
    mean /= m;
    double var = 0.0;
    for (NodeId id : scalars) {
      const double d = value(id).value() - mean;
      var += d * d;
    }
    var /= m;
    return push(Tensor::scalar(var),
                [ids = std::vector<NodeId>(scalars.begin(), scalars.end()), mean, m](
                    Tape& t, NodeId self) {
                  const double g = t.grad(self)[0];
                  for (NodeId id : ids) {
                    t.mutable_grad(id)[0] += (2.0 / m) * (t.value(id).value() - mean) * g;
                  }
                });
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_same_shape(av, bv, "add");
    Tensor y = av;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += bv[i];
    return push(std::move(y), [a, b](Tape& t, NodeId self) {
      const Tensor& g = t.grad(self);
      Tensor& ga = t.mutable_grad(a);
      Tensor& gb = t.mutable_grad(b);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
    });
  }

  NodeId scale(NodeId a, double c) {
    Tensor y = value(a);
    for (auto& v : y.data()) v *= c;
    return push(std::move(y), [a, c](Tape& t, NodeId self) {
      const Tensor& g = t.grad(self);
      Tensor& ga = t.mutable_grad(a);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    });
  }

  NodeId square(NodeId a) {
    Tensor y = value(a);
    for (auto& v : y.data()) v *= v;
    return push(std::move(y), [a](Tape& t, NodeId self) {
      const Tensor& g = t.grad(self);
      const Tensor& av = t.value(a);
      Tensor& ga = t.mutable_grad(a);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += 2.0 * av[i] * g[i];
    });
  }

  NodeId sum_all(NodeId x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (std::size_t i = 0; i < xv.numel(); ++i) s += xv[i];
    return push(Tensor::scalar(s), [x](Tape& t, NodeId self) {
      const double g = t.grad(self)[0];
      Tensor& gx = t.mutable_grad(x);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
  }

  NodeId add_scalars(std::span<const NodeId> scalars) {
    if (scalars.empty()) throw ValueError("add_scalars: empty list");
    NodeId acc = scalars[0];
    for (std::size_t i = 1; i < scalars.size(); ++i) acc = add(acc, scalars[i]);
    return acc;
  }

  /// -1/2 sum (1 + logvar - exp(logvar)) over all entries. This is
  /// sum KL(N(0, sigma^2) || N(0, 1)) for the diagonal Gaussian with
  /// sigma^2 = exp(logvar); nonnegative, zero exactly at logvar = 0.
  NodeId gaussian_kl(NodeId logvar) {
    const Tensor& lv = value(logvar);
    double s = 0.0;
    for (std::size_t i = 0; i < lv.numel(); ++i) {
      s += 1.0 + lv[i] - std::exp(lv[i]);
    }
    return push(Tensor::scalar(-0.5 * s), [logvar](Tape& t, NodeId self) {
      const double g = t.grad(self)[0];
      const Tensor& lv = t.value(logvar);
      Tensor& gl = t.mutable_grad(logvar);
      for (std::size_t i = 0; i < lv.numel(); ++i) {
        gl[i] += 0.5 * (std::exp(lv[i]) - 1.0) * g;
      }
    });
  }

  /// xi = exp(logvar / 2) * eps with eps held constant; the gradient flows
  /// through the scale only (reparameterization).
  NodeId reparam_sample(NodeId logvar, Tensor eps) {
    const Tensor& lv = value(logvar);
    require_same_shape(lv, eps, "reparam_sample");
    Tensor y = lv;
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::exp(0.5 * lv[i]) * eps[i];
    return push(std::move(y), [logvar](Tape& t, NodeId self) {
      const Tensor& g = t.grad(self);
      const Tensor& y = t.value(self);
      Tensor& gl = t.mutable_grad(logvar);
      for (std::size_t i = 0; i < g.numel(); ++i) gl[i] += 0.5 * y[i] * g[i];
    });
  }

  /// z + mask * xi with a constant 0/1 mask broadcast over rows.
  NodeId translate_masked(NodeId z, NodeId xi, Tensor mask) {
    const Tensor& zv = value(z);
    const Tensor& xv = value(xi);
    require_same_shape(zv, xv, "translate_masked");
    const std::size_t c = zv.rank() == 2 ? zv.dim(1) : zv.numel();
    if (mask.numel() != c) {
      throw ShapeError("translate_masked: mask " + mask.shape_str() + " does not cover " +
                       std::to_string(c) + " features");
    }
    Tensor y = zv;
    const std::size_t rows = zv.numel() / c;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) y[i * c + j] += mask[j] * xv[i * c + j];
    return push(std::move(y), [z, xi, mask = std::move(mask), c](Tape& t, NodeId self) {
      const Tensor& g = t.grad(self);
      Tensor& gz = t.mutable_grad(z);
      Tensor& gxi = t.mutable_grad(xi);
      const std::size_t rows = g.numel() / c;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          gz[i * c + j] += g[i * c + j];
          gxi[i * c + j] += mask[j] * g[i * c + j];
        }
      }
    });
  }

  /// Vertical stack of rank-2 nodes with equal column counts.
  NodeId concat_rows(std::span<const NodeId> parts) {
    if (parts.empty()) throw ValueError("concat_rows: empty list");
    const std::size_t c = value(parts[0]).dim(1);
    std::size_t rows = 0;
    for (NodeId id : parts) {
      const Tensor& v = value(id);
      if (v.rank() != 2 || v.dim(1) != c) {
        throw ShapeError("concat_rows: incompatible part shape " + v.shape_str());
      }
      rows += v.dim(0);
    }
    Tensor y({rows, c});
    std::size_t at = 0;
    for (NodeId id : parts) {
      const Tensor& v = value(id);
      for (std::size_t i = 0; i < v.numel(); ++i) y[at * c + i] = v[i];
      at += v.dim(0);
    }
    return push(std::move(y),
                [ids = std::vector<NodeId>(parts.begin(), parts.end()), c](Tape& t, NodeId self) {
                  const Tensor& g = t.grad(self);
                  std::size_t at = 0;
                  for (NodeId id : ids) {
                    Tensor& gi = t.mutable_grad(id);
                    for (std::size_t i = 0; i < gi.numel(); ++i) gi[i] += g[at * c + i];
                    at += t.value(id).dim(0);
                  }
                });
  }

  /// Derivative of the cross-entropy risk with respect to a scalar multiplier
  /// on the logits, evaluated at multiplier 1:
  ///   g = (1/B) sum_i [ sum_c p_ic l_ic - l_{i,y_i} ].
  /// Differentiable in the logits, so its square gives the IRMv1 penalty.
  NodeId logit_scale_grad(NodeId logits, std::vector<int> labels) {
    const Tensor& lv = value(logits);
    if (lv.rank() != 2) {
      throw ShapeError("logit_scale_grad: expected rank-2 logits, got " + lv.shape_str());
    }
    const std::size_t rows = lv.dim(0), c = lv.dim(1);
    if (labels.size() != rows) {
      throw ShapeError("logit_scale_grad: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(rows) + " rows");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= c) {
        throw IndexError("logit_scale_grad: label " + std::to_string(y) + " outside [0, " +
                         std::to_string(c) + ")");
      }
    }
    Tensor p = softmax_rows(lv);
    std::vector<double> row_dot(rows, 0.0);  // sum_c p_ic l_ic
    double g = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < c; ++j) row_dot[i] += p(i, j) * lv(i, j);
      g += row_dot[i] - lv(i, static_cast<std::size_t>(labels[i]));
    }
    g /= static_cast<double>(rows);
    return push(Tensor::scalar(g),
                [logits, labels = std::move(labels), p = std::move(p),
                 row_dot = std::move(row_dot), rows, c](Tape& t, NodeId self) {
                  const double up = t.grad(self)[0] / static_cast<double>(rows);
                  const Tensor& lv = t.value(logits);
                  Tensor& gl = t.mutable_grad(logits);
                  for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                      const double ind = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
                      gl(i, j) += (p(i, j) * (1.0 + lv(i, j) - row_dot[i]) - ind) * up;
                    }
                  }
                });
  }

  Tensor& mutable_grad(NodeId id) { return nodes_[id].grad; }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&, NodeId)> pull;
  };

  NodeId push(Tensor value, std::function<void(Tape&, NodeId)> pull) {
    Node n;
    n.grad = Tensor::zeros(value.shape());
    n.value = std::move(value);
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
};

}  // namespace virm
