#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "raptor/errors.hpp"

namespace raptor {

// Dense row-major f64 matrix. Only what the detector needs: storage, row
// views, and a couple of products.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Two-way routing weights.
struct Simplex2 {
  double p1 = 0.5;
  double p2 = 0.5;

  friend bool operator==(const Simplex2&, const Simplex2&) = default;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double learning_rate = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;

  static AdamState for_params(std::size_t n, double lr, double weight_decay);

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

double dot(std::span<const double> a, std::span<const double> b) noexcept;

double sigmoid(double z) noexcept;

// Numerically stable softmax (max-subtracted). Throws InvalidArgument on empty
// or non-finite input.
std::vector<double> softmax(std::span<const double> v);
Simplex2 softmax2(double z1, double z2) noexcept;

// -p ln p - (1-p) ln(1-p), with 0 ln 0 = 0. Nats.
double binary_entropy(double p);

// Jensen-Shannon divergence in nats. Probabilities are clamped at 1e-12 inside
// the logs. JS(p, q) == JS(q, p) bit for bit.
double js_divergence(std::span<const double> p, std::span<const double> q);
double js_divergence(const Simplex2& p, const Simplex2& q) noexcept;

// Gradient of js_divergence(p, q) w.r.t. p (respecting the clamp). The
// gradient w.r.t. q is obtained by swapping the arguments.
Simplex2 js_divergence_grad(const Simplex2& p, const Simplex2& q) noexcept;

// BCE on the logit: log(1 + exp(-|z|)) + max(z, 0) - z*y.
double bce_with_logit(double z, double y) noexcept;

// Bias-corrected Adam with decoupled weight decay, updating params and state in
// place. Non-finite gradients raise NumericFault naming the index.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

}  // namespace raptor
