#pragma once

#include <string>
#include <vector>

#include "vasa/config.hpp"
#include "vasa/rng.hpp"
#include "vasa/tensor.hpp"

namespace vasa {

struct LabeledImageSet {
  Tensor images;                // [N,1,H,W] in [-1,1]
  std::vector<int64_t> labels;  // digit class per image
  std::vector<double> styles;   // stroke thickness per image, in pixels

  int64_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  void validate() const;

  // PGM batch plus labels.txt / styles.txt; images quantize to 8 bit.
  void save(const std::string& dir) const;
  static LabeledImageSet load(const std::string& dir);
};

struct DigitSetConfig {
  int64_t n = 5000;
  int64_t res = 32;
  double thickness_lo = 1.0;   // stroke radius bounds in pixels
  double thickness_hi = 2.4;
  double jitter_shift = 1.6;   // max |translation| in pixels
  double jitter_rotate = 0.12; // max |angle| in radians
  double jitter_scale = 0.10;  // max relative scale deviation
  uint64_t seed = 7;

  void validate() const;
  KvConfig to_kv() const;
  static DigitSetConfig from_kv(const KvConfig& kv);
};

// One antialiased seven-segment digit on a [-1,1] canvas. thickness is the
// stroke radius in pixels; angle/scale/dx/dy place the glyph (dx, dy in
// pixels, y axis pointing down).
Tensor render_digit(int64_t digit, int64_t res, double thickness, double angle = 0.0,
                    double scale = 1.0, double dx = 0.0, double dy = 0.0);

// n jittered digits with uniform class labels and a continuous stroke
// thickness factor recorded as the style ground truth.
LabeledImageSet make_stroke_digits(const DigitSetConfig& cfg);

// Mean ink coverage in [0,1]; rises with the thickness factor.
double pixel_mass(const Tensor& img);

// Deterministic shuffle split into disjoint train/test parts.
void split_set(const LabeledImageSet& all, int64_t n_test, uint64_t seed, LabeledImageSet& train,
               LabeledImageSet& test);

}  // namespace vasa
