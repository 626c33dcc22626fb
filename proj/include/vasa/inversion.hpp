#pragma once

#include <string>
#include <vector>

#include "vasa/core_model.hpp"

namespace vasa {

struct LatentStats {
  Tensor mu_w;         // [d_w]
  double sigma_w = 0;  // sqrt of mean squared distance to mu_w

  void save(const std::string& path) const;
  static LatentStats load(const std::string& path);
};

// Mean and spread of latent rows [N,d]; sigma_w^2 = mean_n ||w_n - mu||^2.
LatentStats latent_stats_from_w(const Tensor& w_rows);

// Encodes n model samples x = G(F(z), b) and reduces their codes.
LatentStats estimate_w_statistics(VasaModel& model, int64_t n_samples, uint64_t seed);
// Same reduction over the encodings of a given image set.
LatentStats estimate_w_statistics_from(VasaModel& model, const Tensor& images);

struct InversionConfig {
  int64_t iterations = 700;
  double lambda_p = 1.0;
  double lambda_m = 1.0;
  double alpha = 1e-2;
  double lambda_max = 0.1;
  int64_t rampup = 50;
  int64_t rampdown = 250;
  double w_noise_factor = 0.05;
  uint64_t seed = 2;
  uint64_t perceptual_seed = 101;

  // The published weighting; one common scale, so the argmin is unchanged.
  static InversionConfig paper_preset();

  void validate() const;
  KvConfig to_kv() const;
  static InversionConfig from_kv(const KvConfig& kv);
};

struct InversionResult {
  LatentW w_star;            // kind FineTuned
  NoiseMapSet noise;         // renormalized to mean 0 / var 1
  std::vector<double> loss_trace;  // evaluated loss per iteration
  std::vector<double> best_trace;  // running minimum, non-increasing
  double perceptual = 0;     // loss components at the returned iterate
  double mse_term = 0;
  double reg = 0;
  bool warning_divergence = false;

  void save(const std::string& dir) const;
  static InversionResult load(const std::string& dir);
};

// Fixed random conv feature stack standing in for a pretrained perceptual
// metric at desk resolution; pluggable by swapping this provider.
class PerceptualDistance {
 public:
  PerceptualDistance(int64_t img_channels, uint64_t seed);

  // Mean squared feature gap accumulated over stages; per-sample rows [N].
  Graph::Id dist_rows_g(Graph& g, Graph::Id a, Graph::Id b);
  double dist(const Tensor& a, const Tensor& b);  // single image or batch mean

 private:
  Graph::Id features_stage(Graph& g, Graph::Id x, size_t idx);
  std::vector<Conv2d> stages_;
};

// Builds a (2 * avgpool2x2)-halving pyramid from [r,r] down to 8x8.
// Maps of size <= 8 return just the original.
std::vector<Tensor> noise_pyramid(const Tensor& map);

// Toroidal autocorrelation penalty of one square map:
// (r^-2 sum n(y,x) n(y,x-1))^2 + (r^-2 sum n(y,x) n(y-1,x))^2.
double noise_autocorr_term(const Tensor& map);

struct InversionLossParts {
  double total = 0, perceptual = 0, mse_term = 0, reg = 0;
};

// Full objective for a candidate (w, noise) against target images.
// Per-sample rows; `total` is their sum (the backward root).
struct InversionLossIds {
  Graph::Id total = Graph::kNone;   // [1]
  Graph::Id per_image = Graph::kNone;  // [N]
  Graph::Id perceptual = Graph::kNone;  // [N]
  Graph::Id mse_term = Graph::kNone;    // [N]
  Graph::Id reg = Graph::kNone;         // [N]
  Graph::Id recon = Graph::kNone;       // [N,C,H,W] generator output
};
InversionLossIds inversion_loss_g(Graph& g, VasaModel& model, PerceptualDistance& pd,
                                  Graph::Id w, const std::vector<Graph::Id>& noise,
                                  const Tensor& x, const InversionConfig& cfg);
InversionLossParts inversion_loss(VasaModel& model, PerceptualDistance& pd, const Tensor& x,
                                  const Tensor& w, const NoiseMapSet& noise,
                                  const InversionConfig& cfg);

double lr_schedule(int64_t t, const InversionConfig& cfg);
double w_noise_sigma(int64_t t, const LatentStats& stats, const InversionConfig& cfg);

// Per-instance optimization of (w, noise maps) from w0 = E(x).
std::vector<InversionResult> fine_tune_batch(VasaModel& model, PerceptualDistance& pd,
                                             const Tensor& images, const LatentStats& stats,
                                             const InversionConfig& cfg);
InversionResult fine_tune(VasaModel& model, PerceptualDistance& pd, const Tensor& image,
                          const LatentStats& stats, const InversionConfig& cfg);

}  // namespace vasa
