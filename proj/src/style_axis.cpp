#include "vasa/style_axis.hpp"

#include <algorithm>
#include <cmath>

#include "vasa/serialize.hpp"

namespace vasa {

namespace {

constexpr double kLabelGap = 1e-6;

double dot_row(const Tensor& rows, int64_t i, const Tensor& v) {
  int64_t d = rows.dim(1);
  const double* p = rows.data() + i * d;
  double s = 0;
  for (int64_t j = 0; j < d; ++j) s += p[j] * v[j];
  return s;
}

Tensor normalized_direction(Tensor v) {
  double n = 0;
  for (int64_t i = 0; i < v.numel(); ++i) n += v[i] * v[i];
  n = std::sqrt(n);
  require(n > 1e-12, "style axis is degenerate (zero direction)");
  v.scale_(1.0 / n);
  return v;
}

double spread_of(const Tensor& latents, const Tensor& direction) {
  int64_t n = latents.dim(0);
  std::vector<double> proj(n);
  for (int64_t i = 0; i < n; ++i) proj[i] = dot_row(latents, i, direction);
  double mu = 0;
  for (double p : proj) mu += p;
  mu /= static_cast<double>(n);
  double var = 0;
  for (double p : proj) var += (p - mu) * (p - mu);
  return std::sqrt(var / static_cast<double>(n));
}

}  // namespace

void LabeledLatentSet::validate() const {
  require(latents.rank() == 2, "labeled latents must be [N,d]");
  require(latents.dim(0) == static_cast<int64_t>(labels.size()),
          "latents and labels must have equal length");
  require(latents.dim(0) >= 2, "need at least two labeled latents");
  auto [lo, hi] = std::minmax_element(labels.begin(), labels.end());
  require(*hi - *lo >= kLabelGap, "all labels identical, no style signal");
}

std::string axis_method_name(AxisMethod m) {
  return m == AxisMethod::Pairwise ? "pairwise" : "logistic";
}

AxisMethod axis_method_from_name(const std::string& name) {
  if (name == "pairwise") return AxisMethod::Pairwise;
  if (name == "logistic") return AxisMethod::Logistic;
  fail("unknown axis method: " + name);
}

void StyleAxis::save(const std::string& dir) const {
  Checkpoint ck;
  ck.tensors["direction"] = direction;
  ck.meta["kind"] = "style-axis";
  ck.meta["sigma_style"] = sigma_style;
  ck.meta["method"] = axis_method_name(method);
  ck.save(dir);
}

StyleAxis StyleAxis::load(const std::string& dir) {
  Checkpoint ck = Checkpoint::load(dir);
  require(ck.meta.value("kind", "") == "style-axis", "not a style axis: " + dir);
  StyleAxis a;
  a.direction = ck.tensor("direction");
  a.sigma_style = ck.meta.at("sigma_style").get<double>();
  a.method = axis_method_from_name(ck.meta.at("method").get<std::string>());
  return a;
}

std::vector<double> binarize_at_median(const std::vector<double>& labels) {
  require(!labels.empty(), "cannot binarize an empty label set");
  std::vector<double> sorted = labels;
  std::sort(sorted.begin(), sorted.end());
  size_t n = sorted.size();
  double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<double> out(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] > med ? 1.0 : 0.0;
  return out;
}

StyleAxis axis_pairwise(const LabeledLatentSet& set, int64_t n_pairs, uint64_t seed) {
  set.validate();
  require(n_pairs >= 1, "need at least one pair");
  int64_t n = set.latents.dim(0), d = set.latents.dim(1);

  RngStream rng = RngStream(seed).fork("axis.pairs", 0);
  Tensor sum({d});
  int64_t accepted = 0, attempts = 0;
  const int64_t max_attempts = 1000 * n_pairs;
  while (accepted < n_pairs) {
    require(attempts < max_attempts, "could not sample pairs with distinct labels");
    ++attempts;
    int64_t p = rng.uniform_int(n);
    int64_t q = rng.uniform_int(n);
    double dl = set.labels[p] - set.labels[q];
    if (std::abs(dl) < kLabelGap) continue;
    const double* wp = set.latents.data() + p * d;
    const double* wq = set.latents.data() + q * d;
    for (int64_t j = 0; j < d; ++j) sum[j] += (wp[j] - wq[j]) / dl;
    ++accepted;
  }

  StyleAxis axis;
  axis.method = AxisMethod::Pairwise;
  axis.direction = normalized_direction(std::move(sum));
  axis.sigma_style = spread_of(set.latents, axis.direction);
  return axis;
}

StyleAxis axis_logistic(const LabeledLatentSet& set, int64_t epochs, uint64_t /*seed*/) {
  set.validate();
  require(epochs >= 1, "need at least one epoch");
  int64_t n = set.latents.dim(0), d = set.latents.dim(1);

  bool any_varying = false;
  for (int64_t j = 0; j < d && !any_varying; ++j)
    for (int64_t i = 1; i < n; ++i)
      if (set.latents.at(i, j) != set.latents.at(0, j)) {
        any_varying = true;
        break;
      }
  require(any_varying, "latent features are constant, no separating plane");

  std::vector<double> y = binarize_at_median(set.labels);
  bool any0 = false, any1 = false;
  for (double v : y) (v > 0.5 ? any1 : any0) = true;
  require(any0 && any1, "median split left a single class");

  Tensor a({d});
  double b = 0;
  const double lr = 0.5;
  Tensor ga({d});
  for (int64_t e = 0; e < epochs; ++e) {
    ga.fill(0.0);
    double gb = 0;
    for (int64_t i = 0; i < n; ++i) {
      double z = dot_row(set.latents, i, a) + b;
      double r = 1.0 / (1.0 + std::exp(-z)) - y[i];
      const double* wi = set.latents.data() + i * d;
      for (int64_t j = 0; j < d; ++j) ga[j] += r * wi[j];
      gb += r;
    }
    double inv_n = 1.0 / static_cast<double>(n);
    a.axpy_(-lr * inv_n, ga);
    b -= lr * inv_n * gb;
  }

  StyleAxis axis;
  axis.method = AxisMethod::Logistic;
  axis.direction = normalized_direction(std::move(a));
  axis.sigma_style = spread_of(set.latents, axis.direction);
  return axis;
}

double style_spread(const Tensor& latents, const StyleAxis& axis) {
  require(latents.rank() == 2 && latents.dim(0) >= 2, "spread needs at least two latents");
  require(latents.dim(1) == axis.direction.numel(), "latent and axis dimensions differ");
  return spread_of(latents, axis.direction);
}

}  // namespace vasa
