#pragma once

#include <cstdint>
#include <vector>

#include "mrcl/layers.hpp"

namespace mrcl::optim {

/// Linear warmup from 0 to `peak` over `warmup_steps`, then half-cosine down to 0 at
/// step `total_steps - 1`.
struct LrSchedule {
  double peak = 0.0;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;

  [[nodiscard]] double at(std::int64_t step) const;
};

/// Linear scaling rule: base_lr * batch_size / 256.
double scaled_lr(double base_lr, std::int64_t batch_size, double reference_batch = 256.0);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-6;
};

/// AdamW with decoupled weight decay: p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps).
/// Parameters with Param::decay == false skip the decay factor.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const vit::ParamStore<T>& params, AdamWConfig config);

  void step(vit::ParamStore<T>& params, double lr);

  [[nodiscard]] const AdamWConfig& config() const { return config_; }
  [[nodiscard]] std::int64_t steps_taken() const { return t_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }
  std::vector<Mat<T>>& exp_avg() { return m_; }
  std::vector<Mat<T>>& exp_avg_sq() { return v_; }
  [[nodiscard]] const std::vector<Mat<T>>& exp_avg() const { return m_; }
  [[nodiscard]] const std::vector<Mat<T>>& exp_avg_sq() const { return v_; }

 private:
  AdamWConfig config_;
  std::int64_t t_ = 0;
  std::vector<Mat<T>> m_;
  std::vector<Mat<T>> v_;
};

/// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
template <typename T>
double clip_grad_norm(vit::ParamStore<T>& params, double max_norm);

}  // namespace mrcl::optim
