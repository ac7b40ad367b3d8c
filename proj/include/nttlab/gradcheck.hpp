#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nttlab/graph.hpp"

namespace nttlab::nn {

/// Records a scalar loss on the given graph.
using ForwardFn = std::function<Var(Graph&)>;

struct GradcheckOptions {
  double step = 1e-6;
  std::size_t max_coords_per_param = 64;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
};

double relative_error(double analytic, double numeric);

/// Reverse-mode gradients of `forward` for every parameter (zeroed first).
std::vector<Tensor> analytic_gradients(const ForwardFn& forward, const ParameterList& params);

/// Compares `analytic` with central differences on a sampled subset of
/// coordinates. Throws StateError when two identical forwards disagree.
GradcheckReport compare_gradients(const ForwardFn& forward, const ParameterList& params,
                                  const std::vector<Tensor>& analytic, const GradcheckOptions& opts = {});

GradcheckReport gradcheck(const ForwardFn& forward, const ParameterList& params,
                          const GradcheckOptions& opts = {});

}  // namespace nttlab::nn
