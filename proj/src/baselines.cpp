#include "nttlab/error.hpp"
#include "nttlab/model.hpp"

namespace nttlab::model {

double baseline_predict(BaselineKind kind, std::span<const double> history, double alpha) {
  if (history.empty()) throw ValidationError("baseline needs a non-empty history");
  if (kind == BaselineKind::LAST_OBSERVED) return history.back();
  double s = history.front();
  for (double x : history.subspan(1)) s = alpha * x + (1.0 - alpha) * s;
  return s;
}

}  // namespace nttlab::model
