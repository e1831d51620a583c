#pragma once

#include <span>
#include <vector>

#include "dal/tensor.hpp"

namespace dal::metrics {

// Binary confusion counts, class 1 taken as positive.
struct Confusion {
  long tp = 0;
  long fp = 0;
  long fn = 0;
  long tn = 0;

  long total() const { return tp + fp + fn + tn; }
  bool operator==(const Confusion&) const = default;
};

Confusion confusion(std::span<const int> labels, std::span<const int> preds);

// Index of the larger probability; ties go to class 0.
int argmax_prediction(double p0, double p1);

// Per-class F1 for class 1 (positive) or class 0; zero when P + R = 0.
double class_f1(const Confusion& c, int cls);
double f1_macro(const Confusion& c);
double f1_micro(const Confusion& c);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;
};

// Mean and sample standard deviation (n - 1 denominator, 0 for one run).
Aggregate aggregate(std::span<const double> runs);

}  // namespace dal::metrics
