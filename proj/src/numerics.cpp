#include "raptor/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace raptor {

namespace {

constexpr double kLogClamp = 1e-12;

double kl_term(double p, double m) noexcept {
  const double pc = std::max(p, kLogClamp);
  return pc * std::log(pc / m);
}

}  // namespace

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

AdamState AdamState::for_params(std::size_t n, double lr, double weight_decay) {
  AdamState s;
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  s.learning_rate = lr;
  s.weight_decay = weight_decay;
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("softmax: empty input");
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]))
      throw InvalidArgument("softmax: non-finite entry at index " + std::to_string(i));
  }
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

Simplex2 softmax2(double z1, double z2) noexcept {
  // p1 = sigmoid(z1 - z2); p2 is its complement so the pair sums to 1 exactly
  // whenever the subtraction is exact.
  const double p1 = sigmoid(z1 - z2);
  return {p1, sigmoid(z2 - z1)};
}

double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0))
    throw InvalidArgument("binary_entropy: p outside [0,1]: " + std::to_string(p));
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty())
    throw InvalidArgument("js_divergence: length mismatch");
  auto check = [](std::span<const double> d, const char* name) {
    double s = 0.0;
    for (double x : d) {
      if (!(x >= -1e-9 && x <= 1.0 + 1e-9))
        throw InvalidArgument(std::string("js_divergence: ") + name + " has an entry off the simplex");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw InvalidArgument(std::string("js_divergence: ") + name + " does not sum to 1");
  };
  check(p, "p");
  check(q, "q");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (std::max(p[i], kLogClamp) + std::max(q[i], kLogClamp));
    acc += kl_term(p[i], m) + kl_term(q[i], m);
  }
  return 0.5 * acc;
}

double js_divergence(const Simplex2& p, const Simplex2& q) noexcept {
  const double m1 = 0.5 * (std::max(p.p1, kLogClamp) + std::max(q.p1, kLogClamp));
  const double m2 = 0.5 * (std::max(p.p2, kLogClamp) + std::max(q.p2, kLogClamp));
  double acc = kl_term(p.p1, m1) + kl_term(q.p1, m1);
  acc += kl_term(p.p2, m2) + kl_term(q.p2, m2);
  return 0.5 * acc;
}

Simplex2 js_divergence_grad(const Simplex2& p, const Simplex2& q) noexcept {
  auto component = [](double pi, double qi) {
    if (pi < kLogClamp) return 0.0;
    const double m = 0.5 * (pi + std::max(qi, kLogClamp));
    return 0.5 * std::log(pi / m);
  };
  return {component(p.p1, q.p1), component(p.p2, q.p2)};
}

double bce_with_logit(double z, double y) noexcept {
  return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * y;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw InvalidArgument("adam_step: shape mismatch (params " + std::to_string(params.size()) +
                          ", grads " + std::to_string(grads.size()) + ", moments " +
                          std::to_string(state.m.size()) + ")");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i]))
      throw NumericFault("adam_step: non-finite gradient at index " + std::to_string(i));
  }

  const std::size_t t = state.step + 1;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double lr = state.learning_rate;
  const double decay = 1.0 - lr * state.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double m_hat = state.m[i] / bias1;
    const double v_hat = state.v[i] / bias2;
    double p = params[i];
    if (state.weight_decay != 0.0) p *= decay;
    params[i] = p - lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
  state.step = t;
}

}  // namespace raptor
