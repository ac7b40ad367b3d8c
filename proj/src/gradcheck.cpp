#include "nttlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "nttlab/error.hpp"
#include "nttlab/rng.hpp"

namespace nttlab::nn {

namespace {

double eval_loss(const ForwardFn& forward) {
  Graph g(false);
  const Var loss = forward(g);
  return g.value(loss).item();
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

std::vector<Tensor> analytic_gradients(const ForwardFn& forward, const ParameterList& params) {
  zero_grad(params);
  Graph g;
  const Var loss = forward(g);
  g.backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(p->grad);
  return out;
}

GradcheckReport compare_gradients(const ForwardFn& forward, const ParameterList& params,
                                  const std::vector<Tensor>& analytic, const GradcheckOptions& opts) {
  if (analytic.size() != params.size()) {
    throw ShapeError("gradcheck: " + std::to_string(analytic.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  const double base = eval_loss(forward);
  if (eval_loss(forward) != base) throw StateError("gradcheck: forward is not deterministic");

  GradcheckReport report;
  report.tolerance = opts.tolerance;
  Rng rng(derive_seed(opts.seed, "gradcheck"));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords;
    if (n <= opts.max_coords_per_param) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      auto perm = rng.permutation(n);
      coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(opts.max_coords_per_param));
      std::sort(coords.begin(), coords.end());
    }
    auto values = p->value.values();
    for (std::size_t idx : coords) {
      const double saved = values[idx];
      values[idx] = saved + opts.step;
      const double up = eval_loss(forward);
      values[idx] = saved - opts.step;
      const double down = eval_loss(forward);
      values[idx] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[pi].values()[idx];
      const double err = relative_error(a, numeric);
      ++report.coordinates_checked;
      if (err > report.max_rel_error || report.worst_parameter.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_parameter = p->name;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

GradcheckReport gradcheck(const ForwardFn& forward, const ParameterList& params, const GradcheckOptions& opts) {
  const auto analytic = analytic_gradients(forward, params);
  return compare_gradients(forward, params, analytic, opts);
}

}  // namespace nttlab::nn
