#pragma once

// Differentiable operations used by the network and the objectives.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rasa/tensor.hpp"

namespace rasa::ag {

namespace detail {

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

}  // namespace detail

/// a * b
inline Var matmul(const Var& a, const Var& b) {
  require<DimensionError>(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& na = detail::parent(self, 0);
    Node& nb = detail::parent(self, 1);
    if (na.requires_grad) na.accumulate_expr(self.grad * nb.value.transpose());
    if (nb.requires_grad) nb.accumulate_expr(na.value.transpose() * self.grad);
  });
}

/// a * b^T
inline Var matmul_transposed(const Var& a, const Var& b) {
  require<DimensionError>(a.cols() == b.cols(), "matmul_transposed: inner dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& na = detail::parent(self, 0);
    Node& nb = detail::parent(self, 1);
    if (na.requires_grad) na.accumulate_expr(self.grad * nb.value);
    if (nb.requires_grad) nb.accumulate_expr(self.grad.transpose() * na.value);
  });
}

/// x * weight + bias, with weight stored as (in x out) and bias as (1 x out).
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  require<DimensionError>(x.cols() == weight.rows(), "linear: input width does not match weight");
  require<DimensionError>(bias.rows() == 1 && bias.cols() == weight.cols(), "linear: bad bias shape");
  Matrix out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return make_node(std::move(out), {x, weight, bias}, [](Node& self) {
    Node& nx = detail::parent(self, 0);
    Node& nw = detail::parent(self, 1);
    Node& nb = detail::parent(self, 2);
    if (nx.requires_grad) nx.accumulate_expr(self.grad * nw.value.transpose());
    if (nw.requires_grad) nw.accumulate_expr(nx.value.transpose() * self.grad);
    if (nb.requires_grad) nb.accumulate_expr(self.grad.colwise().sum());
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      Node& p = detail::parent(self, i);
      if (p.requires_grad) p.accumulate(self.grad);
    }
  });
}

/// x + tile(pattern): pattern (L x D) repeated over consecutive L-row blocks of x.
inline Var add_tiled(const Var& x, const Var& pattern) {
  const Index block = pattern.rows();
  require<DimensionError>(block > 0 && x.rows() % block == 0 && x.cols() == pattern.cols(),
                          "add_tiled: x rows must be a multiple of the pattern rows");
  Matrix out = x.value();
  for (Index start = 0; start < out.rows(); start += block) {
    out.middleRows(start, block) += pattern.value();
  }
  return make_node(std::move(out), {x, pattern}, [block](Node& self) {
    Node& nx = detail::parent(self, 0);
    Node& np = detail::parent(self, 1);
    if (nx.requires_grad) nx.accumulate(self.grad);
    if (np.requires_grad) {
      Matrix g = Matrix::Zero(block, self.grad.cols());
      for (Index start = 0; start < self.grad.rows(); start += block) {
        g += self.grad.middleRows(start, block);
      }
      np.accumulate(g);
    }
  });
}

/// Elementwise product.
inline Var hadamard(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& na = detail::parent(self, 0);
    Node& nb = detail::parent(self, 1);
    if (na.requires_grad) na.accumulate_expr(self.grad.cwiseProduct(nb.value));
    if (nb.requires_grad) nb.accumulate_expr(self.grad.cwiseProduct(na.value));
  });
}

inline Var scale(const Var& x, double factor) {
  Matrix out = x.value() * factor;
  return make_node(std::move(out), {x}, [factor](Node& self) {
    detail::parent(self, 0).accumulate_expr(self.grad * factor);
  });
}

/// x / s for a 1x1 variable s.
inline Var divide(const Var& x, const Var& s) {
  require<DimensionError>(s.rows() == 1 && s.cols() == 1, "divide: divisor must be scalar");
  const double d = s.value()(0, 0);
  Matrix out = x.value() / d;
  return make_node(std::move(out), {x, s}, [d](Node& self) {
    Node& nx = detail::parent(self, 0);
    Node& ns = detail::parent(self, 1);
    if (nx.requires_grad) nx.accumulate_expr(self.grad / d);
    if (ns.requires_grad) {
      Matrix g(1, 1);
      g(0, 0) = -(self.grad.array() * nx.value.array()).sum() / (d * d);
      ns.accumulate(g);
    }
  });
}

/// Σ w_i · s_i over 1x1 terms.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  require<DimensionError>(terms.size() == weights.size(), "weighted_sum: size mismatch");
  Matrix out = Matrix::Zero(1, 1);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require<DimensionError>(terms[i].rows() == 1 && terms[i].cols() == 1, "weighted_sum: non-scalar term");
    out(0, 0) += weights[i] * terms[i].value()(0, 0);
  }
  return make_node(std::move(out), terms, [weights](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) p.accumulate_expr(self.grad * weights[i]);
    }
  });
}

inline Var sum(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  const Index r = x.rows();
  const Index c = x.cols();
  return make_node(std::move(out), {x}, [r, c](Node& self) {
    detail::parent(self, 0).accumulate_expr(Matrix::Constant(r, c, self.grad(0, 0)));
  });
}

/// Row-wise layer normalisation with learnable gain and bias (both 1 x D).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Index n = x.rows();
  const Index d = x.cols();
  require<DimensionError>(gain.cols() == d && bias.cols() == d, "layer_norm: parameter width mismatch");
  Matrix normalized(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mean = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    normalized.row(i) = (x.value().row(i).array() - mean) * inv_std(i);
  }
  Matrix out = normalized.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return make_node(std::move(out), {x, gain, bias},
                   [normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& self) {
                     Node& nx = detail::parent(self, 0);
                     Node& ng = detail::parent(self, 1);
                     Node& nb = detail::parent(self, 2);
                     if (ng.requires_grad) {
                       ng.accumulate_expr((self.grad.array() * normalized.array()).colwise().sum().matrix());
                     }
                     if (nb.requires_grad) nb.accumulate_expr(self.grad.colwise().sum());
                     if (nx.requires_grad) {
                       Matrix dn = self.grad.array().rowwise() * ng.value.row(0).array();
                       const Index rows = dn.rows();
                       Matrix dx(rows, dn.cols());
                       for (Index i = 0; i < rows; ++i) {
                         const double mean_dn = dn.row(i).mean();
                         const double mean_dn_n = (dn.row(i).array() * normalized.row(i).array()).mean();
                         dx.row(i) = inv_std(i) * (dn.row(i).array() - mean_dn -
                                                   normalized.row(i).array() * mean_dn_n);
                       }
                       nx.accumulate(dx);
                     }
                   });
}

/// Exact (erf-based) GELU.
inline Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix out = x.value().unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
  return make_node(std::move(out), {x}, [inv_sqrt_2pi](Node& self) {
    Node& nx = detail::parent(self, 0);
    Matrix d = nx.value.unaryExpr([inv_sqrt_2pi](double v) {
      return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    nx.accumulate_expr((self.grad.array() * d.array()).matrix());
  });
}

/// out = x[indices]; gradients scatter-add back.
inline Var gather_rows(const Var& x, std::vector<Index> indices) {
  Matrix out(static_cast<Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require<DimensionError>(indices[i] >= 0 && indices[i] < x.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = x.value().row(indices[i]);
  }
  const Index src_rows = x.rows();
  return make_node(std::move(out), {x}, [indices = std::move(indices), src_rows](Node& self) {
    Node& nx = detail::parent(self, 0);
    Matrix g = Matrix::Zero(src_rows, self.grad.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) g.row(indices[i]) += self.grad.row(static_cast<Index>(i));
    nx.accumulate(g);
  });
}

/// Rows of sample-blocks: picks blocks of `block` consecutive rows in the given order.
inline Var gather_blocks(const Var& x, Index block, std::span<const Index> which) {
  std::vector<Index> rows;
  rows.reserve(which.size() * static_cast<std::size_t>(block));
  for (Index b : which) {
    for (Index r = 0; r < block; ++r) rows.push_back(b * block + r);
  }
  return gather_rows(x, std::move(rows));
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require<DimensionError>(!parts.empty(), "concat_rows: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    require<DimensionError>(p.cols() == parts.front().cols(), "concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, parts.front().cols());
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_node(std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) p.accumulate_expr(self.grad.middleRows(offsets[i], p.value.rows()));
    }
  });
}

/// Row-wise L2 normalisation. Rows with norm below `min_norm` are rejected.
inline Var l2_normalize_rows(const Var& x, double min_norm = 1e-12) {
  const Index n = x.rows();
  Eigen::VectorXd norms(n);
  Matrix out(n, x.cols());
  for (Index i = 0; i < n; ++i) {
    norms(i) = x.value().row(i).norm();
    if (!(norms(i) > min_norm)) {
      throw NumericError("l2_normalize_rows: zero-norm vector cannot be normalised");
    }
    out.row(i) = x.value().row(i) / norms(i);
  }
  return make_node(out, {x}, [out, norms = std::move(norms)](Node& self) {
    Node& nx = detail::parent(self, 0);
    Matrix g(out.rows(), out.cols());
    for (Index i = 0; i < out.rows(); ++i) {
      const double dot = out.row(i).dot(self.grad.row(i));
      g.row(i) = (self.grad.row(i) - dot * out.row(i)) / norms(i);
    }
    nx.accumulate(g);
  });
}

/// Numerically stable row softmax with optional additive mask (-inf entries are excluded).
inline Matrix softmax_rows(const Matrix& logits, const Matrix* additive_mask = nullptr) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    RowVector row = logits.row(i);
    if (additive_mask != nullptr) row += additive_mask->row(i);
    const double mx = row.maxCoeff();
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: no finite entry in a row");
    // Vectorised exp maps -inf to a subnormal rather than 0; zero masked entries explicitly.
    RowVector e = (row.array() == -std::numeric_limits<double>::infinity()).select(0.0, (row.array() - mx).exp());
    out.row(i) = e / e.sum();
  }
  return out;
}

/// Mean cross-entropy of softmax(logits + mask) against integer targets.
/// `additive_mask`, when given, has the logits' shape with 0 or -inf entries.
inline Var cross_entropy(const Var& logits, std::span<const int> targets, const Matrix* additive_mask = nullptr) {
  const Index n = logits.rows();
  require<DimensionError>(static_cast<Index>(targets.size()) == n, "cross_entropy: one target per row");
  require<ContractError>(n > 0, "cross_entropy: empty input");
  Matrix probs = softmax_rows(logits.value(), additive_mask);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    require<DimensionError>(t >= 0 && t < logits.cols(), "cross_entropy: target out of range");
    const double p = probs(i, t);
    if (!(p > 0.0)) throw NumericError("cross_entropy: target has zero probability");
    total -= std::log(p);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_node(std::move(out), {logits}, [probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
    Node& nl = detail::parent(self, 0);
    const double scale = self.grad(0, 0) / static_cast<double>(probs.rows());
    Matrix g = probs;
    for (Index i = 0; i < g.rows(); ++i) g(i, tgt[static_cast<std::size_t>(i)]) -= 1.0;
    nl.accumulate_expr(g * scale);
  });
}

/// Scaled dot-product attention over a batch of sequences, all heads fused.
/// `query` is (batch*query_len x D); `key`/`value` are (batch*key_len x D).
/// `key_valid`, when non-empty, flags usable key rows (batch*key_len entries).
inline Var attention(const Var& query, const Var& key, const Var& value, Index batch, Index heads,
                     std::span<const std::uint8_t> key_valid = {}) {
  const Index d = query.cols();
  require<DimensionError>(batch > 0 && heads > 0 && d % heads == 0, "attention: bad head split");
  require<DimensionError>(key.cols() == d && value.cols() == d && key.rows() == value.rows(),
                          "attention: key/value shape mismatch");
  require<DimensionError>(query.rows() % batch == 0 && key.rows() % batch == 0,
                          "attention: rows not divisible by batch");
  const Index lq = query.rows() / batch;
  const Index lk = key.rows() / batch;
  const Index dh = d / heads;
  require<DimensionError>(key_valid.empty() || static_cast<Index>(key_valid.size()) == key.rows(),
                          "attention: key mask length mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(query.rows(), d);
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  const Matrix& q = query.value();
  const Matrix& k = key.value();
  const Matrix& v = value.value();
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      Matrix s = (q.block(b * lq, h * dh, lq, dh) * k.block(b * lk, h * dh, lk, dh).transpose()) * scale;
      if (!key_valid.empty()) {
        bool any = false;
        for (Index j = 0; j < lk; ++j) {
          if (key_valid[static_cast<std::size_t>(b * lk + j)] == 0) {
            s.col(j).setConstant(-std::numeric_limits<double>::infinity());
          } else {
            any = true;
          }
        }
        require<ContractError>(any, "attention: sequence without any valid key");
      }
      for (Index i = 0; i < lq; ++i) {
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() == -std::numeric_limits<double>::infinity())
                       .select(0.0, (s.row(i).array() - mx).exp());
        s.row(i) /= s.row(i).sum();
      }
      out.block(b * lq, h * dh, lq, dh).noalias() = s * v.block(b * lk, h * dh, lk, dh);
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }

  return make_node(std::move(out), {query, key, value},
                   [probs = std::move(probs), batch, heads, lq, lk, dh, scale](Node& self) {
                     Node& nq = detail::parent(self, 0);
                     Node& nk = detail::parent(self, 1);
                     Node& nv = detail::parent(self, 2);
                     Matrix dq = Matrix::Zero(nq.value.rows(), nq.value.cols());
                     Matrix dk = Matrix::Zero(nk.value.rows(), nk.value.cols());
                     Matrix dv = Matrix::Zero(nv.value.rows(), nv.value.cols());
                     for (Index b = 0; b < batch; ++b) {
                       for (Index h = 0; h < heads; ++h) {
                         const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
                         auto go = self.grad.block(b * lq, h * dh, lq, dh);
                         auto qb = nq.value.block(b * lq, h * dh, lq, dh);
                         auto kb = nk.value.block(b * lk, h * dh, lk, dh);
                         auto vb = nv.value.block(b * lk, h * dh, lk, dh);
                         dv.block(b * lk, h * dh, lk, dh).noalias() += p.transpose() * go;
                         Matrix dp = go * vb.transpose();
                         Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
                         Matrix ds = p.array() * (dp.colwise() - row_dot).array();
                         dq.block(b * lq, h * dh, lq, dh).noalias() += (ds * kb) * scale;
                         dk.block(b * lk, h * dh, lk, dh).noalias() += (ds.transpose() * qb) * scale;
                       }
                     }
                     if (nq.requires_grad) nq.accumulate(dq);
                     if (nk.requires_grad) nk.accumulate(dk);
                     if (nv.requires_grad) nv.accumulate(dv);
                   });
}

}  // namespace rasa::ag
