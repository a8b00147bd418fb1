#include "sigma/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sigma {

double AdamW::effective_lr() const {
  if (warmup_steps > 0 && step_ < warmup_steps)
    return lr * static_cast<double>(step_) / static_cast<double>(warmup_steps);
  return lr;
}

void AdamW::step(const std::vector<ParamRef>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].n, 0.0);
      v_[i].assign(params[i].n, 0.0);
    }
  }
  if (m_.size() != params.size())
    throw std::invalid_argument("adamw: parameter set changed");
  ++step_;
  const double lr_t = effective_lr();
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (static_cast<std::int64_t>(m_[i].size()) != p.n)
      throw std::invalid_argument("adamw: shape mismatch for " + p.name);
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::int64_t j = 0; j < p.n; ++j) {
      const double g = p.g[j];
      m[j] = beta1 * m[j] + (1.0 - beta1) * g;
      v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p.w[j] -= lr_t * (mh / (std::sqrt(vh) + eps) + weight_decay * p.w[j]);
    }
  }
}

void AdamW::zero_grad(const std::vector<ParamRef>& params) {
  for (const auto& p : params) std::fill(p.g, p.g + p.n, 0.0);
}

double grad_check(const std::function<double()>& loss_fn,
                  const std::vector<ParamRef>& params, double epsilon) {
  if (epsilon < 1e-7 || epsilon > 1e-3)
    throw std::invalid_argument("grad_check: epsilon out of [1e-7, 1e-3]");
  const double l0 = loss_fn();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.emplace_back(p.g, p.g + p.n);
  const double l1 = loss_fn();
  if (l0 != l1)
    throw std::runtime_error("grad_check: loss_fn is not deterministic");

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    for (std::int64_t j = 0; j < p.n; ++j) {
      const double keep = p.w[j];
      p.w[j] = keep + epsilon;
      const double lp = loss_fn();
      p.w[j] = keep - epsilon;
      const double lm = loss_fn();
      p.w[j] = keep;
      const double cd = (lp - lm) / (2.0 * epsilon);
      const double err =
          std::abs(analytic[i][j] - cd) / std::max(1.0, std::abs(cd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace sigma
