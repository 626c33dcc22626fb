#pragma once

#include <string>
#include <vector>

#include "vasa/inversion.hpp"
#include "vasa/style_axis.hpp"

namespace vasa {

enum class GammaMode { UniformGrid, UniformRandom };

std::string gamma_mode_name(GammaMode m);
GammaMode gamma_mode_from_name(const std::string& name);

struct EditConfig {
  int64_t v = 200;     // copy count
  double eta = 0.25;   // fraction of the style spread used as the shift bound
  GammaMode mode = GammaMode::UniformRandom;
  bool resample_noise = false;  // fresh noise maps per copy instead of the fitted set
  uint64_t seed = 4;

  void validate() const;
  KvConfig to_kv() const;
  static EditConfig from_kv(const KvConfig& kv);
};

struct EditedCopySet {
  Tensor copies;               // [V,C,H,W]
  std::vector<double> gammas;  // shift per copy, inside the eta bound
  std::string source_fingerprint;
  std::string axis_id;
  bool warning_divergence = false;

  // Exact tensor payload plus an indexed 8-bit PGM view and JSON metadata.
  void save(const std::string& dir) const;
  static EditedCopySet load(const std::string& dir);
};

// Stable content hash used to tie a copy set back to its source image.
std::string image_fingerprint(const Tensor& x);
std::string axis_fingerprint(const StyleAxis& axis);

// Shifted code w + gamma * direction; kind becomes Shifted.
LatentW shift_latent(const LatentW& w, const StyleAxis& axis, double gamma);

// V shift magnitudes in [-eta*sigma, +eta*sigma]: an inclusive even grid, or
// seeded uniform draws.
std::vector<double> sample_gammas(const EditConfig& cfg, double sigma_style);

// encode -> fine-tune -> shift along the axis V times -> reconstruct, with
// the fitted noise maps shared by every copy unless resampling is enabled.
EditedCopySet generate_copies(const Tensor& x, VasaModel& model, const StyleAxis& axis,
                              const LatentStats& stats, const InversionConfig& inv_cfg,
                              const EditConfig& edit_cfg);

}  // namespace vasa
