#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sigma {

// A view into one parameter tensor and its gradient buffer.
struct ParamRef {
  double* w = nullptr;
  double* g = nullptr;
  std::int64_t n = 0;
  std::string name;
};

// Decoupled weight decay Adam with linear warmup. Owned by a single trainer
// thread; moment buffers grow lazily on the first step.
class AdamW {
 public:
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::int64_t warmup_steps = 0;

  std::int64_t step_count() const { return step_; }
  double effective_lr() const;

  void step(const std::vector<ParamRef>& params);
  void zero_grad(const std::vector<ParamRef>& params);

 private:
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Central-difference check of analytic gradients. `loss_fn` must recompute
// the loss and refresh every params[i].g; it is called twice up front and the
// two results must agree exactly (non-deterministic loss functions are
// rejected). Returns max over parameter entries of
// |analytic - central| / max(1, |central|).
double grad_check(const std::function<double()>& loss_fn,
                  const std::vector<ParamRef>& params, double epsilon);

}  // namespace sigma
