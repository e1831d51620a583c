#include "dal/metrics.hpp"

#include <cmath>
#include <numeric>

namespace dal::metrics {

Confusion confusion(std::span<const int> labels, std::span<const int> preds) {
  if (labels.size() != preds.size())
    throw ValidationError("confusion: " + std::to_string(labels.size()) + " labels vs " +
                          std::to_string(preds.size()) + " predictions");
  if (labels.empty()) throw ValidationError("confusion: empty input");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    const int p = preds[i];
    if ((y != 0 && y != 1) || (p != 0 && p != 1))
      throw ValidationError("confusion: labels and predictions must be 0 or 1");
    if (y == 1 && p == 1) ++c.tp;
    else if (y == 0 && p == 1) ++c.fp;
    else if (y == 1 && p == 0) ++c.fn;
    else ++c.tn;
  }
  return c;
}

int argmax_prediction(double p0, double p1) { return p1 > p0 ? 1 : 0; }

double class_f1(const Confusion& c, int cls) {
  // For class 0 the roles of the off-diagonal counts swap.
  const double tp = cls == 1 ? c.tp : c.tn;
  const double fp = cls == 1 ? c.fp : c.fn;
  const double fn = cls == 1 ? c.fn : c.fp;
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

double f1_macro(const Confusion& c) { return 0.5 * (class_f1(c, 0) + class_f1(c, 1)); }

double f1_micro(const Confusion& c) {
  // Pooled over both classes: TP = tp + tn, FP = FN = fp + fn.
  const double tp = static_cast<double>(c.tp + c.tn);
  const double err = static_cast<double>(c.fp + c.fn);
  return tp + err > 0 ? tp / (tp + err) : 0.0;
}

Aggregate aggregate(std::span<const double> runs) {
  if (runs.empty()) throw ValidationError("aggregate: no runs");
  const double n = static_cast<double>(runs.size());
  Aggregate a;
  a.mean = std::accumulate(runs.begin(), runs.end(), 0.0) / n;
  if (runs.size() > 1) {
    double ss = 0.0;
    for (double r : runs) ss += (r - a.mean) * (r - a.mean);
    a.std = std::sqrt(ss / (n - 1.0));
  }
  return a;
}

}  // namespace dal::metrics
