#include "vasa/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "vasa/image.hpp"

namespace vasa {

namespace {

struct Seg {
  double x0, y0, x1, y1;
};

// Seven-segment layout on a [-0.5, 0.5] canvas, y pointing down.
constexpr double kSegW = 0.26;
constexpr double kSegH = 0.38;

const Seg kSegments[7] = {
    {-kSegW, -kSegH, kSegW, -kSegH},  // top
    {kSegW, -kSegH, kSegW, 0.0},      // upper right
    {kSegW, 0.0, kSegW, kSegH},       // lower right
    {-kSegW, kSegH, kSegW, kSegH},    // bottom
    {-kSegW, 0.0, -kSegW, kSegH},     // lower left
    {-kSegW, -kSegH, -kSegW, 0.0},    // upper left
    {-kSegW, 0.0, kSegW, 0.0},        // middle
};

constexpr int kDigitMask[10] = {0x3F, 0x06, 0x5B, 0x4F, 0x66, 0x6D, 0x7D, 0x07, 0x7F, 0x6F};

double seg_distance(const Seg& s, double x, double y) {
  double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  double wx = x - s.x0, wy = y - s.y0;
  double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  double px = s.x0 + t * vx, py = s.y0 + t * vy;
  return std::sqrt((x - px) * (x - px) + (y - py) * (y - py));
}

}  // namespace

void LabeledImageSet::validate() const {
  require(images.rank() == 4 && images.dim(1) == 1, "image set must be [N,1,H,W]");
  require(images.dim(0) == static_cast<int64_t>(labels.size()),
          "label count does not match the image count");
  require(styles.empty() || styles.size() == labels.size(),
          "style count does not match the image count");
  for (int64_t l : labels) require(l >= 0, "negative class label");
}

void LabeledImageSet::save(const std::string& dir) const {
  validate();
  std::filesystem::create_directories(dir);
  save_pgm_batch(dir, "img", images);
  std::ofstream lf(dir + "/labels.txt");
  require(lf.good(), "cannot write labels under " + dir);
  for (int64_t l : labels) lf << l << "\n";
  if (!styles.empty()) {
    std::ofstream sf(dir + "/styles.txt");
    require(sf.good(), "cannot write styles under " + dir);
    sf.precision(17);
    for (double s : styles) sf << s << "\n";
  }
}

LabeledImageSet LabeledImageSet::load(const std::string& dir) {
  LabeledImageSet set;
  set.images = load_pgm_dir(dir);
  std::ifstream lf(dir + "/labels.txt");
  require(lf.good(), "cannot open labels under " + dir);
  int64_t l;
  while (lf >> l) set.labels.push_back(l);
  std::ifstream sf(dir + "/styles.txt");
  if (sf.good()) {
    double s;
    while (sf >> s) set.styles.push_back(s);
  }
  set.validate();
  return set;
}

void DigitSetConfig::validate() const {
  require(n >= 1, "digit set: need at least one image");
  require(res >= 8, "digit set: resolution too small");
  require(thickness_lo > 0.0 && thickness_hi >= thickness_lo, "digit set: bad thickness range");
  require(jitter_shift >= 0.0 && jitter_rotate >= 0.0 && jitter_scale >= 0.0,
          "digit set: jitter amounts must be non-negative");
  require(jitter_scale < 1.0, "digit set: scale jitter must stay below 1");
}

KvConfig DigitSetConfig::to_kv() const {
  KvConfig kv;
  kv.set_int("digits_n", n);
  kv.set_int("digits_res", res);
  kv.set_double("digits_thickness_lo", thickness_lo);
  kv.set_double("digits_thickness_hi", thickness_hi);
  kv.set_double("digits_jitter_shift", jitter_shift);
  kv.set_double("digits_jitter_rotate", jitter_rotate);
  kv.set_double("digits_jitter_scale", jitter_scale);
  kv.set_int("digits_seed", static_cast<int64_t>(seed));
  return kv;
}

DigitSetConfig DigitSetConfig::from_kv(const KvConfig& kv) {
  DigitSetConfig c;
  c.n = kv.get_int("digits_n", c.n);
  c.res = kv.get_int("digits_res", c.res);
  c.thickness_lo = kv.get_double("digits_thickness_lo", c.thickness_lo);
  c.thickness_hi = kv.get_double("digits_thickness_hi", c.thickness_hi);
  c.jitter_shift = kv.get_double("digits_jitter_shift", c.jitter_shift);
  c.jitter_rotate = kv.get_double("digits_jitter_rotate", c.jitter_rotate);
  c.jitter_scale = kv.get_double("digits_jitter_scale", c.jitter_scale);
  c.seed = static_cast<uint64_t>(kv.get_int("digits_seed", static_cast<int64_t>(c.seed)));
  c.validate();
  return c;
}

Tensor render_digit(int64_t digit, int64_t res, double thickness, double angle, double scale,
                    double dx, double dy) {
  require(digit >= 0 && digit <= 9, "digit must be 0..9");
  require(res >= 8, "digit resolution too small");
  require(thickness > 0.0 && scale > 0.0, "thickness and scale must be positive");

  int mask = kDigitMask[digit];
  double radius = thickness / static_cast<double>(res);
  double aa = 1.0 / static_cast<double>(res);
  double ca = std::cos(angle), sa = std::sin(angle);
  double tx = dx / static_cast<double>(res), ty = dy / static_cast<double>(res);

  Tensor img({1, res, res});
  for (int64_t i = 0; i < res; ++i) {
    for (int64_t j = 0; j < res; ++j) {
      double px = (j + 0.5) / res - 0.5 - tx;
      double py = (i + 0.5) / res - 0.5 - ty;
      double qx = (ca * px + sa * py) / scale;
      double qy = (-sa * px + ca * py) / scale;
      double d = 1e30;
      for (int s = 0; s < 7; ++s)
        if (mask & (1 << s)) d = std::min(d, seg_distance(kSegments[s], qx, qy));
      double ink = clamp(0.5 + (radius - d * scale) / aa, 0.0, 1.0);
      img.at(0, i, j) = 2.0 * ink - 1.0;
    }
  }
  return img;
}

LabeledImageSet make_stroke_digits(const DigitSetConfig& cfg) {
  cfg.validate();
  LabeledImageSet set;
  set.images = Tensor({cfg.n, 1, cfg.res, cfg.res});
  RngStream rng(cfg.seed);
  int64_t pix = cfg.res * cfg.res;
  for (int64_t i = 0; i < cfg.n; ++i) {
    RngStream r = rng.fork("digits", i);
    int64_t digit = i % 10;
    double thickness = cfg.thickness_lo + (cfg.thickness_hi - cfg.thickness_lo) * r.uniform();
    double angle = (2.0 * r.uniform() - 1.0) * cfg.jitter_rotate;
    double scale = 1.0 + (2.0 * r.uniform() - 1.0) * cfg.jitter_scale;
    double dx = (2.0 * r.uniform() - 1.0) * cfg.jitter_shift;
    double dy = (2.0 * r.uniform() - 1.0) * cfg.jitter_shift;
    Tensor img = render_digit(digit, cfg.res, thickness, angle, scale, dx, dy);
    std::copy(img.data(), img.data() + pix, set.images.data() + i * pix);
    set.labels.push_back(digit);
    set.styles.push_back(thickness);
  }
  return set;
}

double pixel_mass(const Tensor& img) {
  require(img.numel() > 0, "empty image");
  double sum = 0.0;
  for (int64_t i = 0; i < img.numel(); ++i) sum += 0.5 * (img[i] + 1.0);
  return sum / static_cast<double>(img.numel());
}

void split_set(const LabeledImageSet& all, int64_t n_test, uint64_t seed, LabeledImageSet& train,
               LabeledImageSet& test) {
  all.validate();
  int64_t n = all.size();
  require(n_test >= 1 && n_test < n, "test split must leave both parts non-empty");

  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  RngStream rng = RngStream(seed).fork("split", 0);
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(i + 1)]);

  int64_t pix = all.images.dim(2) * all.images.dim(3);
  auto take = [&](LabeledImageSet& out, int64_t from, int64_t count) {
    out.images = Tensor({count, 1, all.images.dim(2), all.images.dim(3)});
    out.labels.clear();
    out.styles.clear();
    for (int64_t i = 0; i < count; ++i) {
      int64_t src = order[from + i];
      std::copy(all.images.data() + src * pix, all.images.data() + (src + 1) * pix,
                out.images.data() + i * pix);
      out.labels.push_back(all.labels[src]);
      if (!all.styles.empty()) out.styles.push_back(all.styles[src]);
    }
  };
  take(test, 0, n_test);
  take(train, n_test, n - n_test);
}

}  // namespace vasa
