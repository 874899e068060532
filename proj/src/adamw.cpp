#include "lora/adamw.hpp"

#include <cmath>

#include "lora/errors.hpp"

namespace lora {

std::size_t AdamWState::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, mom] : moments) n += mom.m.size() + mom.v.size();
  return n;
}

void adamw_step(std::span<const NamedParam> params, const GradientMap& grads, AdamWState& state,
                const AdamWHyper& hyper, double lr_scale) {
  for (const NamedParam& p : params) {
    auto g = grads.find(p.name);
    if (g == grads.end()) continue;
    if (g->second.rows() != p.value->rows() || g->second.cols() != p.value->cols()) {
      throw DimensionError("adamw_step: gradient " + g->second.shape_string() + " for " + p.name +
                           " " + p.value->shape_string());
    }
    auto [it, fresh] = state.moments.try_emplace(p.name);
    if (fresh) {
      it->second.m = Matrix(p.value->rows(), p.value->cols());
      it->second.v = Matrix(p.value->rows(), p.value->cols());
    } else if (it->second.m.rows() != p.value->rows() || it->second.m.cols() != p.value->cols()) {
      throw DimensionError("adamw_step: optimizer state " + it->second.m.shape_string() + " for " +
                           p.name + " " + p.value->shape_string());
    }
  }

  ++state.step;
  const double lr = hyper.lr * lr_scale;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  const double decay = 1.0 - lr * hyper.weight_decay;

  for (const NamedParam& p : params) {
    auto g = grads.find(p.name);
    if (g == grads.end()) continue;
    auto& mom = state.moments.at(p.name);
    double* w = p.value->data();
    const double* grad = g->second.data();
    double* m = mom.m.data();
    double* v = mom.v.data();
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] = w[i] * decay - lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

}  // namespace lora
