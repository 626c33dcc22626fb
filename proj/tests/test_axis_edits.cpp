#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include "vasa/edit_generation.hpp"
#include "vasa/style_axis.hpp"

using namespace vasa;

namespace {

double cosine(const Tensor& a, const Tensor& b) {
  double ab = 0, aa = 0, bb = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

double norm2(const Tensor& v) {
  double s = 0;
  for (int64_t i = 0; i < v.numel(); ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

// Latents spread along a planted unit direction by grouped style labels.
LabeledLatentSet planted_set(int64_t n, int64_t d, double noise, uint64_t seed, Tensor& g_out) {
  RngStream rng(seed);
  Tensor g = rng.fork("g", 0).normal_tensor({d});
  g.scale_(1.0 / norm2(g));
  g_out = g;

  LabeledLatentSet set;
  set.latents = rng.fork("noise", 0).normal_tensor({n, d}, 0.0, noise);
  RngStream lr = rng.fork("labels", 0);
  for (int64_t i = 0; i < n; ++i) {
    double label = 0.25 * static_cast<double>(lr.uniform_int(5));
    set.labels.push_back(label);
    for (int64_t j = 0; j < d; ++j) set.latents.at(i, j) += label * g[j];
  }
  return set;
}

ModelConfig tiny_config(int64_t levels = 2) {
  ModelConfig c;
  c.d_z = 8;
  c.d_w = 8;
  c.img_channels = 1;
  c.base_res = 4;
  c.levels = levels;
  c.channels = 6;
  c.mapping_layers = 2;
  c.disc_fc_layers = 2;
  c.disc_fc_width = 16;
  c.disc_channels = 6;
  c.seed = 3;
  return c;
}

Tensor toy_image(int64_t res, uint64_t seed) {
  RngStream rng(seed);
  Tensor x = rng.normal_tensor({1, 1, res, res}, 0.0, 0.3);
  for (int64_t y = 0; y < res / 2; ++y)
    for (int64_t xx = 0; xx < res / 2; ++xx) x.at(0, 0, y, xx) += 0.8;
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = std::clamp(x[i], -1.0, 1.0);
  return x;
}

InversionConfig short_config(int64_t iters) {
  InversionConfig cfg;
  cfg.iterations = iters;
  cfg.rampup = std::min<int64_t>(5, iters / 2);
  cfg.rampdown = std::min<int64_t>(20, iters / 3);
  return cfg;
}

StyleAxis unit_axis(int64_t d, uint64_t seed) {
  StyleAxis axis;
  RngStream rng(seed);
  axis.direction = rng.normal_tensor({d});
  axis.direction.scale_(1.0 / norm2(axis.direction));
  axis.sigma_style = 0.7;
  axis.method = AxisMethod::Pairwise;
  return axis;
}

double ks_uniform_pvalue(std::vector<double> u) {
  std::sort(u.begin(), u.end());
  int64_t n = static_cast<int64_t>(u.size());
  double d = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double lo = u[i] - static_cast<double>(i) / static_cast<double>(n);
    double hi = static_cast<double>(i + 1) / static_cast<double>(n) - u[i];
    d = std::max({d, lo, hi});
  }
  double rn = std::sqrt(static_cast<double>(n));
  double lam = (rn + 0.12 + 0.11 / rn) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * (k % 2 == 1 ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lam * lam);
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace

TEST_CASE("a single pair recovers the coordinate direction") {
  LabeledLatentSet set;
  set.latents = Tensor({2, 2});
  set.latents.at(1, 0) = 1.0;
  set.labels = {0.0, 1.0};

  StyleAxis axis = axis_pairwise(set, 8, 1);
  CHECK(axis.direction[0] == 1.0);
  CHECK(axis.direction[1] == 0.0);
  CHECK(axis.method == AxisMethod::Pairwise);
  CHECK(axis.sigma_style == 0.5);
}

TEST_CASE("negated labels flip the pairwise axis exactly") {
  Tensor g;
  LabeledLatentSet set = planted_set(100, 16, 0.05, 9, g);
  LabeledLatentSet neg = set;
  for (double& l : neg.labels) l = -l;

  StyleAxis a = axis_pairwise(set, 300, 4);
  StyleAxis b = axis_pairwise(neg, 300, 4);
  Tensor flipped = b.direction;
  flipped.scale_(-1.0);
  CHECK(max_abs_diff(a.direction, flipped) == 0.0);
}

TEST_CASE("label scaling leaves the pairwise axis unchanged") {
  Tensor g;
  LabeledLatentSet set = planted_set(200, 16, 0.05, 8, g);
  LabeledLatentSet scaled = set;
  for (double& l : scaled.labels) l *= 3.5;

  StyleAxis a = axis_pairwise(set, 400, 3);
  StyleAxis b = axis_pairwise(scaled, 400, 3);
  CHECK(max_abs_diff(a.direction, b.direction) < 1e-12);
}

TEST_CASE("both methods recover a planted grouped direction") {
  for (double noise : {0.05, 0.1}) {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
      Tensor g;
      LabeledLatentSet set = planted_set(500, 16, noise, seed, g);

      StyleAxis pw = axis_pairwise(set, 500, seed);
      StyleAxis lg = axis_logistic(set, 300, seed);
      CHECK(cosine(pw.direction, g) >= 0.95);
      CHECK(cosine(lg.direction, g) >= 0.95);
      CHECK(std::abs(norm2(pw.direction) - 1.0) < 1e-8);
      CHECK(std::abs(norm2(lg.direction) - 1.0) < 1e-8);
      CHECK(pw.sigma_style > 0.0);
      CHECK(lg.method == AxisMethod::Logistic);
      CHECK(pw.sigma_style == style_spread(set.latents, pw));
    }
  }
}

TEST_CASE("median split sends only the upper labels to one") {
  CHECK(binarize_at_median({3.0, 1.0, 2.0}) == std::vector<double>{1.0, 0.0, 0.0});
  CHECK(binarize_at_median({1.0, 2.0, 3.0, 4.0}) == std::vector<double>{0.0, 0.0, 1.0, 1.0});
  CHECK(binarize_at_median({1.0, 2.0, 2.0, 3.0}) == std::vector<double>{0.0, 0.0, 0.0, 1.0});
}

TEST_CASE("swapped classes negate the logistic axis") {
  RngStream rng(9);
  Tensor g = rng.fork("g", 0).normal_tensor({16});
  g.scale_(1.0 / norm2(g));
  LabeledLatentSet cls;
  cls.latents = rng.fork("noise", 0).normal_tensor({100, 16}, 0.0, 0.05);
  for (int64_t i = 0; i < 100; ++i) {
    double label = i < 50 ? 0.0 : 1.0;
    cls.labels.push_back(label);
    for (int64_t j = 0; j < 16; ++j) cls.latents.at(i, j) += label * g[j];
  }
  LabeledLatentSet swapped = cls;
  for (double& v : swapped.labels) v = 1.0 - v;

  StyleAxis a = axis_logistic(cls, 200, 0);
  StyleAxis b = axis_logistic(swapped, 200, 0);
  Tensor flipped = b.direction;
  flipped.scale_(-1.0);
  CHECK(max_abs_diff(a.direction, flipped) < 1e-12);
}

TEST_CASE("duplicated samples leave the logistic axis unchanged") {
  Tensor g;
  LabeledLatentSet set = planted_set(200, 16, 0.05, 7, g);
  LabeledLatentSet dup;
  dup.latents = Tensor({400, 16});
  for (int64_t i = 0; i < 200; ++i)
    for (int64_t j = 0; j < 16; ++j) {
      dup.latents.at(i, j) = set.latents.at(i, j);
      dup.latents.at(200 + i, j) = set.latents.at(i, j);
    }
  dup.labels = set.labels;
  dup.labels.insert(dup.labels.end(), set.labels.begin(), set.labels.end());

  StyleAxis a = axis_logistic(set, 300, 0);
  StyleAxis b = axis_logistic(dup, 300, 0);
  CHECK(max_abs_diff(a.direction, b.direction) < 1e-12);
}

TEST_CASE("degenerate labeled sets are rejected") {
  LabeledLatentSet bad;
  bad.latents = Tensor({3, 2});
  bad.labels = {0.0, 1.0};
  CHECK_THROWS(bad.validate());

  bad.labels = {0.0, 1.0, 2.0};
  bad.latents = Tensor({1, 2});
  CHECK_THROWS(bad.validate());

  LabeledLatentSet flat;
  flat.latents = RngStream(2).normal_tensor({4, 2});
  flat.labels = {1.0, 1.0, 1.0, 1.0};
  CHECK_THROWS(axis_pairwise(flat, 10, 1));
  CHECK_THROWS(axis_logistic(flat, 10, 1));

  LabeledLatentSet constant;
  constant.latents = Tensor({4, 2});
  constant.latents.fill(0.5);
  constant.labels = {0.0, 0.0, 1.0, 1.0};
  CHECK_THROWS(axis_logistic(constant, 10, 1));

  LabeledLatentSet single_class;
  single_class.latents = RngStream(3).normal_tensor({3, 2});
  single_class.labels = {0.0, 1.0, 1.0};
  CHECK_THROWS(axis_logistic(single_class, 10, 1));

  Tensor g;
  LabeledLatentSet ok = planted_set(20, 4, 0.05, 5, g);
  CHECK_THROWS(axis_pairwise(ok, 0, 1));
  CHECK_THROWS(axis_logistic(ok, 0, 1));
}

TEST_CASE("projection spread matches a two-pass oracle") {
  StyleAxis unit;
  unit.direction = Tensor({1});
  unit.direction[0] = 1.0;
  Tensor two({2, 1});
  two.at(0, 0) = -1.0;
  two.at(1, 0) = 1.0;
  CHECK(style_spread(two, unit) == 1.0);

  Tensor same({3, 1});
  same.fill(0.5);
  CHECK(style_spread(same, unit) == 0.0);

  Tensor g;
  LabeledLatentSet set = planted_set(50, 8, 0.3, 11, g);
  StyleAxis axis = axis_pairwise(set, 100, 2);
  std::vector<double> proj(50);
  for (int64_t i = 0; i < 50; ++i) {
    proj[i] = 0;
    for (int64_t j = 0; j < 8; ++j) proj[i] += set.latents.at(i, j) * axis.direction[j];
  }
  double mu = 0;
  for (double p : proj) mu += p / 50.0;
  double var = 0;
  for (double p : proj) var += (p - mu) * (p - mu) / 50.0;
  CHECK(std::abs(style_spread(set.latents, axis) - std::sqrt(var)) < 1e-8);

  Tensor one({1, 8});
  CHECK_THROWS(style_spread(one, axis));
  Tensor mismatched({4, 3});
  CHECK_THROWS(style_spread(mismatched, axis));
}

TEST_CASE("axis files round trip") {
  Tensor g;
  LabeledLatentSet set = planted_set(60, 8, 0.05, 13, g);
  for (AxisMethod m : {AxisMethod::Pairwise, AxisMethod::Logistic}) {
    StyleAxis axis =
        m == AxisMethod::Pairwise ? axis_pairwise(set, 120, 3) : axis_logistic(set, 150, 3);
    std::string dir = "/tmp/vasa_axis_test";
    std::filesystem::remove_all(dir);
    axis.save(dir);
    StyleAxis back = StyleAxis::load(dir);
    std::filesystem::remove_all(dir);

    CHECK(max_abs_diff(back.direction, axis.direction) == 0.0);
    CHECK(back.sigma_style == axis.sigma_style);
    CHECK(back.method == m);
  }
  CHECK(axis_method_from_name("pairwise") == AxisMethod::Pairwise);
  CHECK_THROWS(axis_method_from_name("nonsense"));
}

TEST_CASE("grid shift magnitudes form an exact inclusive ladder") {
  EditConfig cfg;
  cfg.v = 5;
  cfg.eta = 0.25;
  cfg.mode = GammaMode::UniformGrid;

  std::vector<double> g = sample_gammas(cfg, 2.0);
  CHECK(g == std::vector<double>{-0.5, -0.25, 0.0, 0.25, 0.5});

  cfg.v = 1;
  CHECK(sample_gammas(cfg, 2.0) == std::vector<double>{0.0});
  cfg.v = 2;
  CHECK(sample_gammas(cfg, 2.0) == std::vector<double>{-0.5, 0.5});
}

TEST_CASE("random shift magnitudes are bounded, uniform and reproducible") {
  EditConfig cfg;
  cfg.v = 10000;
  cfg.eta = 0.25;
  cfg.mode = GammaMode::UniformRandom;
  cfg.seed = 4;

  double bound = cfg.eta * 2.0;
  std::vector<double> g = sample_gammas(cfg, 2.0);
  REQUIRE(g.size() == 10000);
  for (double x : g) CHECK(std::abs(x) <= bound);

  std::vector<double> u(g.size());
  for (size_t i = 0; i < g.size(); ++i) u[i] = (g[i] + bound) / (2.0 * bound);
  CHECK(ks_uniform_pvalue(u) > 0.01);

  CHECK(sample_gammas(cfg, 2.0) == g);
  cfg.seed = 5;
  CHECK(sample_gammas(cfg, 2.0) != g);
}

TEST_CASE("degenerate shift requests are rejected") {
  EditConfig cfg;
  CHECK_THROWS(sample_gammas(cfg, 0.0));
  CHECK_THROWS(sample_gammas(cfg, -1.0));
  cfg.v = 0;
  CHECK_THROWS(sample_gammas(cfg, 1.0));
  cfg.v = 4;
  cfg.eta = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg.eta = 1.5;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("shifting a latent moves it along the axis only") {
  LatentW w;
  w.w = Tensor({2});
  w.w[0] = 1.0;
  w.w[1] = 2.0;
  w.kind = WKind::FineTuned;

  StyleAxis axis;
  axis.direction = Tensor({2});
  axis.direction[1] = 1.0;
  axis.sigma_style = 1.0;

  LatentW s = shift_latent(w, axis, 0.5);
  CHECK(s.kind == WKind::Shifted);
  CHECK(s.w[0] == 1.0);
  CHECK(s.w[1] == 2.5);

  LatentW z = shift_latent(w, axis, 0.0);
  CHECK(max_abs_diff(z.w, w.w) == 0.0);

  LatentW two_steps = shift_latent(shift_latent(w, axis, 0.3), axis, 0.4);
  LatentW one_step = shift_latent(w, axis, 0.7);
  CHECK(max_abs_diff(two_steps.w, one_step.w) < 1e-12);

  StyleAxis small;
  small.direction = Tensor({3});
  CHECK_THROWS(shift_latent(w, small, 0.1));
}

TEST_CASE("the zero-shift copy equals the plain reconstruction exactly") {
  VasaModel model(tiny_config());
  Tensor x = toy_image(8, 81);
  LatentStats stats = estimate_w_statistics(model, 64, 5);
  InversionConfig icfg = short_config(40);
  StyleAxis axis = unit_axis(8, 11);

  EditConfig ec;
  ec.v = 3;
  ec.eta = 0.25;
  ec.mode = GammaMode::UniformGrid;

  EditedCopySet set = generate_copies(x, model, axis, stats, icfg, ec);
  REQUIRE(set.copies.rank() == 4);
  CHECK(set.copies.dim(0) == 3);
  CHECK(set.copies.dim(1) == 1);
  CHECK(set.copies.dim(2) == 8);
  CHECK(set.copies.dim(3) == 8);
  CHECK_FALSE(set.warning_divergence);

  double bound = ec.eta * axis.sigma_style;
  CHECK(set.gammas == std::vector<double>{-bound, 0.0, bound});
  CHECK(set.source_fingerprint == image_fingerprint(x));
  CHECK(set.axis_id == axis_fingerprint(axis));

  PerceptualDistance pd(1, icfg.perceptual_seed);
  InversionResult inv = fine_tune(model, pd, x, stats, icfg);
  Tensor w1({1, 8});
  std::copy(inv.w_star.w.data(), inv.w_star.w.data() + 8, w1.data());
  Tensor recon = model.generate(w1, VasaModel::stack_noise({inv.noise}));

  double mid_gap = 0.0, end_gap = 0.0;
  for (int64_t i = 0; i < 64; ++i) {
    mid_gap = std::max(mid_gap, std::abs(set.copies[64 + i] - recon[i]));
    end_gap = std::max(end_gap, std::abs(set.copies[i] - set.copies[64 + i]));
  }
  CHECK(mid_gap == 0.0);
  CHECK(end_gap > 0.0);

  EditedCopySet again = generate_copies(x, model, axis, stats, icfg, ec);
  CHECK(max_abs_diff(again.copies, set.copies) == 0.0);
  CHECK(again.gammas == set.gammas);
}

TEST_CASE("chunked generation matches per-row shifts") {
  VasaModel model(tiny_config());
  Tensor x = toy_image(8, 82);
  LatentStats stats = estimate_w_statistics(model, 64, 5);
  InversionConfig icfg = short_config(12);
  StyleAxis axis = unit_axis(8, 12);
  axis.sigma_style = 0.5;

  EditConfig ec;
  ec.v = 33;
  ec.eta = 0.25;
  ec.mode = GammaMode::UniformGrid;

  EditedCopySet set = generate_copies(x, model, axis, stats, icfg, ec);
  REQUIRE(set.copies.dim(0) == 33);
  CHECK(set.gammas[16] == 0.0);

  PerceptualDistance pd(1, icfg.perceptual_seed);
  InversionResult inv = fine_tune(model, pd, x, stats, icfg);

  for (int64_t row : {int64_t{16}, int64_t{32}}) {
    LatentW ws = shift_latent(inv.w_star, axis, set.gammas[row]);
    Tensor w1({1, 8});
    std::copy(ws.w.data(), ws.w.data() + 8, w1.data());
    Tensor ref = model.generate(w1, VasaModel::stack_noise({inv.noise}));
    double gap = 0.0;
    for (int64_t i = 0; i < 64; ++i)
      gap = std::max(gap, std::abs(set.copies[row * 64 + i] - ref[i]));
    CHECK(gap == 0.0);
  }
}

TEST_CASE("resampled noise changes the copies but stays reproducible") {
  VasaModel model(tiny_config());
  Tensor x = toy_image(8, 81);
  LatentStats stats = estimate_w_statistics(model, 64, 5);
  InversionConfig icfg = short_config(12);
  StyleAxis axis = unit_axis(8, 11);

  EditConfig shared;
  shared.v = 3;
  shared.mode = GammaMode::UniformGrid;
  EditConfig fresh = shared;
  fresh.resample_noise = true;

  EditedCopySet a = generate_copies(x, model, axis, stats, icfg, shared);
  EditedCopySet b = generate_copies(x, model, axis, stats, icfg, fresh);
  CHECK(a.gammas == b.gammas);
  double gap = 0.0;
  for (int64_t i = 0; i < 64; ++i) gap = std::max(gap, std::abs(a.copies[64 + i] - b.copies[64 + i]));
  CHECK(gap > 0.0);

  EditedCopySet b2 = generate_copies(x, model, axis, stats, icfg, fresh);
  CHECK(max_abs_diff(b2.copies, b.copies) == 0.0);
}

TEST_CASE("a poisoned generator flags divergence in the copy set") {
  VasaModel model(tiny_config());
  model.params_generator()[0]->value[0] = std::numeric_limits<double>::infinity();
  Tensor x = toy_image(8, 83);
  LatentStats stats;
  stats.mu_w = Tensor({8});
  stats.sigma_w = 1.0;
  InversionConfig icfg = short_config(4);
  StyleAxis axis = unit_axis(8, 13);

  EditConfig ec;
  ec.v = 2;
  EditedCopySet set = generate_copies(x, model, axis, stats, icfg, ec);
  CHECK(set.warning_divergence);
  CHECK(set.gammas.size() == 2);
  CHECK(set.copies.dim(0) == 2);
}

TEST_CASE("copy sets survive a save/load round trip") {
  VasaModel model(tiny_config());
  Tensor x = toy_image(8, 84);
  LatentStats stats = estimate_w_statistics(model, 64, 5);
  InversionConfig icfg = short_config(8);
  StyleAxis axis = unit_axis(8, 14);

  EditConfig ec;
  ec.v = 4;
  ec.seed = 21;
  EditedCopySet set = generate_copies(x, model, axis, stats, icfg, ec);

  std::string dir = "/tmp/vasa_copyset_test";
  std::filesystem::remove_all(dir);
  set.save(dir);
  for (int i = 0; i < 4; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "copy_%06d.pgm", i);
    CHECK(std::filesystem::exists(dir + "/" + name));
  }

  EditedCopySet back = EditedCopySet::load(dir);
  std::filesystem::remove_all(dir);
  CHECK(max_abs_diff(back.copies, set.copies) == 0.0);
  CHECK(back.gammas == set.gammas);
  CHECK(back.source_fingerprint == set.source_fingerprint);
  CHECK(back.axis_id == set.axis_id);
  CHECK(back.warning_divergence == set.warning_divergence);

  CHECK_THROWS(EditedCopySet::load("/tmp/no_such_copyset_dir"));
}

TEST_CASE("edit config round trips through key-value form") {
  EditConfig cfg;
  cfg.v = 7;
  cfg.eta = 0.125;
  cfg.mode = GammaMode::UniformGrid;
  cfg.resample_noise = true;
  cfg.seed = 99;

  EditConfig back = EditConfig::from_kv(cfg.to_kv());
  CHECK(back.v == 7);
  CHECK(back.eta == 0.125);
  CHECK(back.mode == GammaMode::UniformGrid);
  CHECK(back.resample_noise);
  CHECK(back.seed == 99);

  CHECK(gamma_mode_name(GammaMode::UniformGrid) == "grid");
  CHECK(gamma_mode_name(GammaMode::UniformRandom) == "random");
  CHECK_THROWS(gamma_mode_from_name("nonsense"));

  EditConfig bad;
  bad.v = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("fingerprints distinguish images and axes") {
  Tensor a = toy_image(8, 91);
  Tensor b = toy_image(8, 92);
  CHECK(image_fingerprint(a).size() == 16);
  CHECK(image_fingerprint(a) != image_fingerprint(b));
  CHECK(image_fingerprint(a) == image_fingerprint(toy_image(8, 91)));

  StyleAxis ax = unit_axis(8, 15);
  CHECK(axis_fingerprint(ax).rfind("pairwise-", 0) == 0);
  ax.method = AxisMethod::Logistic;
  CHECK(axis_fingerprint(ax).rfind("logistic-", 0) == 0);
  StyleAxis other = unit_axis(8, 16);
  CHECK(axis_fingerprint(ax) != axis_fingerprint(other));
}
