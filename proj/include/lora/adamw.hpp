#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "lora/tape.hpp"
#include "lora/tensor.hpp"

namespace lora {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// First/second moments per parameter name plus the shared step count.
struct AdamWState {
  struct Moments {
    Matrix m;
    Matrix v;
  };
  std::map<std::string, Moments> moments;
  std::size_t step = 0;

  /// Total scalars held in the moment buffers.
  std::size_t scalar_count() const;
};

/// A named, mutable parameter the optimizer may update.
struct NamedParam {
  std::string name;
  Matrix* value = nullptr;
};

/// One AdamW update with decoupled weight decay:
///   w <- w * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
/// Parameters without an entry in `grads` are left untouched and get no state.
/// `lr_scale` multiplies `hyper.lr` (learning-rate schedules).
void adamw_step(std::span<const NamedParam> params, const GradientMap& grads, AdamWState& state,
                const AdamWHyper& hyper, double lr_scale = 1.0);

}  // namespace lora
