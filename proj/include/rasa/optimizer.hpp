#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rasa/error.hpp"
#include "rasa/network.hpp"

namespace rasa::optim {

using model::Network;
using model::ParamGroup;

struct AdamWOptions {
  double lr_heads = 1e-4;
  double lr_backbone = 1e-5;
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW (decoupled weight decay) with one learning rate for the task
/// heads and one for everything else. Constant learning rates.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const Network& net, AdamWOptions options) : options_(options) {
    net.visit([this](const std::string& name, const Var& v) {
      names_.push_back(name);
      first_.push_back(Matrix::Zero(v.rows(), v.cols()));
      second_.push_back(Matrix::Zero(v.rows(), v.cols()));
    });
  }

  /// One update from the gradients currently held by `net`'s parameters.
  void step(Network& net) {
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    std::size_t i = 0;
    net.visit([&](const std::string& name, Var& v, ParamGroup group, bool decay) {
      require<DimensionError>(i < names_.size() && names_[i] == name, "AdamW: parameter list changed");
      const double lr = learning_rate(group);
      Matrix& w = v.mutable_value();
      if (decay && options_.weight_decay > 0.0) w *= (1.0 - lr * options_.weight_decay);
      if (v.has_grad()) {
        const Matrix& g = v.mutable_grad();
        first_[i] = options_.beta1 * first_[i] + (1.0 - options_.beta1) * g;
        second_[i] = options_.beta2 * second_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
        w.array() -= lr * (first_[i].array() / c1) / ((second_[i].array() / c2).sqrt() + options_.eps);
      }
      ++i;
    });
  }

  [[nodiscard]] double learning_rate(ParamGroup group) const {
    return group == ParamGroup::head ? options_.lr_heads : options_.lr_backbone;
  }
  [[nodiscard]] const AdamWOptions& options() const { return options_; }
  [[nodiscard]] long steps() const { return t_; }
  [[nodiscard]] const std::vector<std::string>& names() const { return names_; }
  [[nodiscard]] const std::vector<Matrix>& first_moments() const { return first_; }
  [[nodiscard]] const std::vector<Matrix>& second_moments() const { return second_; }

  void restore(long steps, std::vector<Matrix> first, std::vector<Matrix> second) {
    require<DataError>(first.size() == names_.size() && second.size() == names_.size(), "AdamW: state size mismatch");
    t_ = steps;
    first_ = std::move(first);
    second_ = std::move(second);
  }

 private:
  AdamWOptions options_;
  std::vector<std::string> names_;
  std::vector<Matrix> first_;
  std::vector<Matrix> second_;
  long t_ = 0;
};

}  // namespace rasa::optim
