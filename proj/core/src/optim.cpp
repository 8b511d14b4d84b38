#include <cmath>
#include <numbers>

#include "mrcl/errors.hpp"
#include "mrcl/optim.hpp"

namespace mrcl::optim {

double LrSchedule::at(std::int64_t step) const {
  if (step < 0) step = 0;
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const std::int64_t last = total_steps - 1;
  if (step >= last) return step == warmup_steps ? peak : 0.0;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(last - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double scaled_lr(double base_lr, std::int64_t batch_size, double reference_batch) {
  return base_lr * static_cast<double>(batch_size) / reference_batch;
}

template <typename T>
AdamW<T>::AdamW(const vit::ParamStore<T>& params, AdamWConfig config) : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
  }
}

template <typename T>
void AdamW<T>::step(vit::ParamStore<T>& params, double lr) {
  if (params.size() != m_.size()) throw ShapeError("AdamW: optimizer state does not match the parameter set");
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const T step_size = static_cast<T>(lr / bias1);
  const T inv_sqrt_bias2 = static_cast<T>(1.0 / std::sqrt(bias2));
  const T eps = static_cast<T>(config_.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.value.rows() != m_[i].rows() || p.value.cols() != m_[i].cols()) {
      throw ShapeError("AdamW: moment shape mismatch for " + p.name);
    }
    m_[i] = static_cast<T>(b1) * m_[i] + static_cast<T>(1.0 - b1) * p.grad;
    v_[i] = static_cast<T>(b2) * v_[i] + static_cast<T>(1.0 - b2) * p.grad.cwiseProduct(p.grad);
    if (p.decay && config_.weight_decay != 0.0) p.value *= static_cast<T>(1.0 - lr * config_.weight_decay);
    p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bias2 + eps);
  }
}

template <typename T>
double clip_grad_norm(vit::ParamStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) sq += static_cast<double>(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : params) p.grad *= scale;
  }
  return norm;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm<float>(vit::ParamStore<float>&, double);
template double clip_grad_norm<double>(vit::ParamStore<double>&, double);

}  // namespace mrcl::optim
