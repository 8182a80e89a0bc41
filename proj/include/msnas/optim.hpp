#pragma once

#include <cmath>
#include <vector>

#include "msnas/tensor.hpp"

namespace msnas {

// lr(epoch) anneals from lr_max at epoch 0 towards lr_min over total_epochs.
template <typename T>
T cosine_lr(T lr_max, T lr_min, int epoch, int total_epochs) {
  check_arg(total_epochs >= 1, "cosine_lr: total_epochs must be >= 1");
  const double t = std::min(epoch, total_epochs) / static_cast<double>(total_epochs);
  return static_cast<T>(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t)));
}

// Momentum SGD with L2 weight decay folded into the gradient:
//   g = grad + wd * p;  buf = momentum * buf + g;  p -= lr * buf
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor<T>> params, T momentum, T weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) buf_.push_back(Tensor<T>::zeros(p.shape()));
  }

  void step(T lr) {
    check_arg(lr >= T(0), "sgd_step: learning rate must be >= 0, got ", lr);
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      const T* g = p.grad_data();
      T* v = buf_[i].data();
      T* w = p.data();
      const int64_t n = p.numel();
      for (int64_t j = 0; j < n; ++j) {
        const T gj = g[j] + weight_decay_ * w[j];
        v[j] = momentum_ * v[j] + gj;
        w[j] -= lr * v[j];
      }
    }
  }

  std::vector<Tensor<T>>& momentum_buffers() { return buf_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<Tensor<T>> buf_;
  T momentum_;
  T weight_decay_;
};

// Adam with L2 weight decay folded into the gradient and bias correction.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor<T>> params, T beta1, T beta2, T weight_decay,
                T eps = T(1e-8))
      : params_(std::move(params)),
        beta1_(beta1),
        beta2_(beta2),
        weight_decay_(weight_decay),
        eps_(eps) {
    for (const auto& p : params_) {
      m_.push_back(Tensor<T>::zeros(p.shape()));
      v_.push_back(Tensor<T>::zeros(p.shape()));
    }
  }

  void step(T lr) {
    check_arg(lr >= T(0), "adam_step: learning rate must be >= 0, got ", lr);
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      const T* g = p.grad_data();
      T* mp = m_[i].data();
      T* vp = v_[i].data();
      T* w = p.data();
      const int64_t n = p.numel();
      for (int64_t j = 0; j < n; ++j) {
        const T gj = g[j] + weight_decay_ * w[j];
        mp[j] = beta1_ * mp[j] + (T(1) - beta1_) * gj;
        vp[j] = beta2_ * vp[j] + (T(1) - beta2_) * gj * gj;
        const T mhat = mp[j] / bc1;
        const T vhat = vp[j] / bc2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  T beta1_, beta2_, weight_decay_, eps_;
  int64_t t_ = 0;
};

template <typename T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace msnas
