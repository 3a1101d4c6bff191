#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct OptimizerConfig {
  enum Kind { kSgd, kAdam };
  Kind kind = kAdam;
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;

  static OptimizerConfig sgd(float lr) { return {kSgd, lr, 0.f, 0.f, 0.f}; }
  static OptimizerConfig adam(float lr, float b1 = 0.9f, float b2 = 0.999f, float eps = 1e-8f) {
    return {kAdam, lr, b1, b2, eps};
  }
};

// In-place SGD / Adam over a fixed parameter list. Adam keeps first/second
// moment buffers per parameter plus a shared step count.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, const std::vector<NamedParam>& params) : cfg_(cfg) {
    if (cfg_.kind == OptimizerConfig::kAdam) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].tensor->numel(), 0.0f);
        v_[i].assign(params[i].tensor->numel(), 0.0f);
      }
    }
  }

  long step_count() const { return step_; }

  void step(const std::vector<NamedParam>& params) {
    ++step_;
    for (size_t p = 0; p < params.size(); ++p) {
      TensorNode& t = *params[p].tensor;
      if (t.grad.size() != t.data.size()) continue;  // parameter untouched this step
      for (float g : t.grad)
        if (!std::isfinite(g))
          throw NumericError("non-finite gradient in parameter '" + params[p].name + "'");
      if (cfg_.kind == OptimizerConfig::kSgd) {
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] -= cfg_.lr * t.grad[i];
      } else {
        const float bc1 = 1.0f - std::pow(cfg_.beta1, float(step_));
        const float bc2 = 1.0f - std::pow(cfg_.beta2, float(step_));
        auto& m = m_[p];
        auto& v = v_[p];
        for (size_t i = 0; i < t.data.size(); ++i) {
          const float g = t.grad[i];
          m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g;
          v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g * g;
          const float mhat = m[i] / bc1;
          const float vhat = v[i] / bc2;
          t.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
      }
    }
  }

  static void zero_grad(const std::vector<NamedParam>& params) {
    for (const auto& p : params) p.tensor->zero_grad();
  }

 private:
  OptimizerConfig cfg_;
  long step_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace moelab
