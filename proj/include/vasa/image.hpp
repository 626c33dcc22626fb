#pragma once

#include <string>

#include "vasa/tensor.hpp"

namespace vasa {

// Images are NCHW (or CHW for a single image) with values in [-1, 1].

inline double clamp(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }

void clamp_(Tensor& t, double lo = -1.0, double hi = 1.0);
Tensor clamped(const Tensor& t, double lo = -1.0, double hi = 1.0);

// 8-bit binary PGM, mapping [-1,1] -> [0,255]. Expects CHW with C=1 or HW.
void save_pgm(const std::string& path, const Tensor& img);
Tensor load_pgm(const std::string& path);  // returns [1,H,W] in [-1,1]

// Stacks every *.pgm under dir (sorted by name) into [M,1,H,W].
Tensor load_pgm_dir(const std::string& dir);
// One file per image: prefix_000000.pgm, ...
void save_pgm_batch(const std::string& dir, const std::string& prefix, const Tensor& batch);

// Lays a batch [N,C,H,W] out on a grid for eyeballing; returns [C, rows*H, cols*W].
Tensor tile_images(const Tensor& batch, int64_t cols);

}  // namespace vasa
