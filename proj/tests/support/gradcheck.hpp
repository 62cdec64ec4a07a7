#pragma once

// Central finite-difference gradient oracle. Independent of the backward
// closures: it only ever evaluates the forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rasa/tensor.hpp"

namespace rasa::testing {

struct GradCheck {
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  std::size_t coordinates = 0;
};

inline GradCheck check_gradients(const std::function<Var()>& loss, std::vector<Var> params, double step = 1e-5) {
  for (auto& p : params) p.zero_grad();
  ag::backward(loss());
  std::vector<double> analytic;
  std::vector<double> numeric;
  for (auto& p : params) {
    const Matrix g = p.grad();
    Matrix& w = p.mutable_value();
    for (Index i = 0; i < w.size(); ++i) {
      const double saved = w.data()[i];
      w.data()[i] = saved + step;
      const double up = loss().item();
      w.data()[i] = saved - step;
      const double down = loss().item();
      w.data()[i] = saved;
      analytic.push_back(g.data()[i]);
      numeric.push_back((up - down) / (2.0 * step));
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  GradCheck r;
  r.analytic_norm = std::sqrt(na);
  r.numeric_norm = std::sqrt(nn);
  r.relative_error = std::sqrt(diff) / std::max({r.analytic_norm, r.numeric_norm, 1e-300});
  r.coordinates = analytic.size();
  return r;
}

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(gen);
  return m;
}

}  // namespace rasa::testing
