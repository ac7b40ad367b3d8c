#include "nttlab/adam.hpp"

#include <cmath>

#include "nttlab/error.hpp"

namespace nttlab::nn {

AdamState::AdamState(AdamConfig cfg, const ParameterList& params) : config(cfg) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto* p : params) {
    m.emplace_back(p->value.shape());
    v.emplace_back(p->value.shape());
  }
}

void adam_step(const ParameterList& params, AdamState& state) {
  if (state.m.size() != params.size()) {
    throw StateError("adam: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* p = params[i];
    if (!p->grad_ready) throw StateError("adam: parameter '" + p->name + "' has no gradient");
    if (state.m[i].shape() != p->value.shape()) {
      throw StateError("adam: moment shape " + shape_string(state.m[i].shape()) + " does not match '" +
                       p->name + "' " + shape_string(p->value.shape()));
    }
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    auto theta = p->value.values();
    const auto g = p->grad.values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
    if (!p->value.all_finite()) {
      throw NumericError("adam: parameter '" + p->name + "' became non-finite at step " +
                         std::to_string(state.step));
    }
  }
}

}  // namespace nttlab::nn
