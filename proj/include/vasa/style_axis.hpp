#pragma once

#include <string>
#include <vector>

#include "vasa/rng.hpp"
#include "vasa/tensor.hpp"

namespace vasa {

struct LabeledLatentSet {
  Tensor latents;              // [N,d] fine-tuned codes
  std::vector<double> labels;  // one real-valued style score per row

  // Equal lengths, N >= 2, and at least two labels more than 1e-6 apart.
  void validate() const;
};

enum class AxisMethod { Pairwise, Logistic };

std::string axis_method_name(AxisMethod m);
AxisMethod axis_method_from_name(const std::string& name);

struct StyleAxis {
  Tensor direction;        // [d], unit norm
  double sigma_style = 0;  // spread of the labeled projections
  AxisMethod method = AxisMethod::Pairwise;

  void save(const std::string& dir) const;
  static StyleAxis load(const std::string& dir);
};

// Median split: strictly above the median maps to 1, the rest to 0.
std::vector<double> binarize_at_median(const std::vector<double>& labels);

// Average of per-pair difference quotients (w_p - w_q) / (label_p - label_q)
// over sampled pairs with distinct labels, then normalized.
StyleAxis axis_pairwise(const LabeledLatentSet& set, int64_t n_pairs, uint64_t seed);

// Logistic regression on median-binarized labels; the normalized weight
// vector of the fitted separating plane is the axis.
StyleAxis axis_logistic(const LabeledLatentSet& set, int64_t epochs, uint64_t seed);

// Population standard deviation of <w_i, direction> over the rows.
double style_spread(const Tensor& latents, const StyleAxis& axis);

}  // namespace vasa
