#pragma once

#include <cstdint>
#include <vector>

#include "nttlab/tensor.hpp"

namespace nttlab::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  AdamState() = default;
  AdamState(AdamConfig cfg, const ParameterList& params);
};

/// One bias-corrected Adam update over `params`, in list order. Every
/// parameter must carry a gradient from a backward pass.
void adam_step(const ParameterList& params, AdamState& state);

}  // namespace nttlab::nn
