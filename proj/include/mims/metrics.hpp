#pragma once

#include <vector>

namespace mims {

// Mann-Whitney AUROC with midranks for ties:
// (sum of positive ranks - n_pos*(n_pos+1)/2) / (n_pos * n_neg).
// Both classes must be present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Pearson correlation of two equal-length vectors. The denominator is
// sqrt(sxx*syy) with a single product rounding, so identical inputs give
// exactly 1.0. Returns NaN when either variance is zero.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

} // namespace mims
