#pragma once

// Momentum (EMA) twin of the online network and the FIFO queues of
// momentum projections used as contrastive negatives.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rasa/error.hpp"
#include "rasa/network.hpp"

namespace rasa::momentum {

using model::Network;

/// theta_hat <- m * theta_hat + (1 - m) * theta, elementwise.
inline void ema_update(Matrix& target, const Matrix& online, double m) {
  if (target.rows() != online.rows() || target.cols() != online.cols()) {
    throw DimensionError("ema_update: parameter shapes differ");
  }
  target = m * target + (1.0 - m) * online;
}

inline void ema_update(Network& target, const Network& online, double m) {
  require<ConfigError>(m >= 0.0 && m <= 1.0, "ema_update: momentum must be in [0, 1]");
  auto src = online.named_parameters();
  std::size_t i = 0;
  target.visit([&](const std::string& name, Var& v, model::ParamGroup, bool) {
    if (i >= src.size() || src[i].first != name) throw DimensionError("ema_update: parameter lists differ at " + name);
    ema_update(v.mutable_value(), src[i].second.value(), m);
    ++i;
  });
  if (i != src.size()) throw DimensionError("ema_update: parameter lists differ in length");
}

/// The momentum copy theta_hat and its coefficient m.
class MomentumState {
 public:
  MomentumState() = default;
  MomentumState(const Network& online, double m) { bootstrap(online, m); }

  /// theta_hat := theta (exact copy); m is fixed from here on.
  void bootstrap(const Network& online, double m) {
    require<ConfigError>(m >= 0.0 && m <= 1.0, "momentum coefficient must be in [0, 1]");
    params_ = online.clone(false);
    m_ = m;
  }

  void update(const Network& online) {
    require<LifecycleError>(initialized(), "momentum state used before bootstrap");
    ema_update(*params_, online, m_);
  }

  [[nodiscard]] bool initialized() const { return params_.has_value(); }
  [[nodiscard]] double coefficient() const { return m_; }

  [[nodiscard]] const Network& params() const {
    require<LifecycleError>(initialized(), "momentum state used before bootstrap");
    return *params_;
  }
  [[nodiscard]] Network& mutable_params() {
    require<LifecycleError>(initialized(), "momentum state used before bootstrap");
    return *params_;
  }

 private:
  std::optional<Network> params_;
  double m_ = 0.995;
};

/// Forward pass under theta_hat. Nothing computed here carries gradients.
[[nodiscard]] inline model::RepresentationBundle momentum_forward(const MomentumState& state, const Matrix& pixels,
                                                                  const data::TokenBatch& tokens,
                                                                  bool with_fusion = false) {
  return model::represent(state.params(), pixels, tokens, with_fusion);
}

/// Ring buffer of unit-norm projections with the identity id of each entry.
class RepQueue {
 public:
  RepQueue() = default;
  RepQueue(int capacity, int dim) : buffer_(Matrix::Zero(capacity, dim)), ids_(static_cast<std::size_t>(capacity), -1) {
    require<ConfigError>(capacity >= 1 && dim >= 1, "RepQueue: capacity and dim must be >= 1");
  }

  /// Appends rows in order, evicting the oldest entries past capacity.
  void enqueue(const Matrix& vectors, std::span<const int> identity_ids, double tolerance = 1e-6) {
    require<DimensionError>(vectors.cols() == dim(), "RepQueue: vector width mismatch");
    require<DimensionError>(static_cast<Index>(identity_ids.size()) == vectors.rows(), "RepQueue: one id per vector");
    for (Index r = 0; r < vectors.rows(); ++r) {
      if (std::abs(vectors.row(r).norm() - 1.0) > tolerance) {
        throw ContractError("RepQueue: enqueued vector is not unit-norm");
      }
    }
    for (Index r = 0; r < vectors.rows(); ++r) {
      buffer_.row(head_) = vectors.row(r);
      ids_[static_cast<std::size_t>(head_)] = identity_ids[static_cast<std::size_t>(r)];
      head_ = (head_ + 1) % capacity();
      fill_ = std::min(fill_ + 1, capacity());
    }
  }

  [[nodiscard]] Index capacity() const { return buffer_.rows(); }
  [[nodiscard]] Index dim() const { return buffer_.cols(); }
  [[nodiscard]] Index size() const { return fill_; }
  [[nodiscard]] bool empty() const { return fill_ == 0; }

  /// Stored vectors, oldest first.
  [[nodiscard]] Matrix contents() const {
    Matrix out(fill_, dim());
    const Index start = fill_ < capacity() ? 0 : head_;
    for (Index i = 0; i < fill_; ++i) out.row(i) = buffer_.row((start + i) % capacity());
    return out;
  }

  /// Identity ids matching contents().
  [[nodiscard]] std::vector<int> identities() const {
    std::vector<int> out;
    const Index start = fill_ < capacity() ? 0 : head_;
    for (Index i = 0; i < fill_; ++i) out.push_back(ids_[static_cast<std::size_t>((start + i) % capacity())]);
    return out;
  }

  void clear() {
    head_ = 0;
    fill_ = 0;
  }

 private:
  Matrix buffer_;
  std::vector<int> ids_;
  Index head_ = 0;
  Index fill_ = 0;
};

}  // namespace rasa::momentum
