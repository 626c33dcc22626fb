#include "vasa/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "vasa/serialize.hpp"

namespace vasa {

namespace {

constexpr double kRenormEps = 1e-16;
constexpr int64_t kPyramidFloor = 8;

// Per-sample, per-map zero-mean unit-variance rescale of [N,1,r,r].
void renorm_noise_param(Tensor& t) {
  int64_t n = t.dim(0), hw = t.dim(2) * t.dim(3);
  for (int64_t i = 0; i < n; ++i) {
    double* p = t.data() + i * hw;
    double mean = 0;
    for (int64_t k = 0; k < hw; ++k) mean += p[k];
    mean /= static_cast<double>(hw);
    double var = 0;
    for (int64_t k = 0; k < hw; ++k) var += (p[k] - mean) * (p[k] - mean);
    var /= static_cast<double>(hw);
    double inv = 1.0 / std::sqrt(var + kRenormEps);
    for (int64_t k = 0; k < hw; ++k) p[k] = (p[k] - mean) * inv;
  }
}

// Per-sample autocorrelation penalty rows [N] of one [N,1,r,r] level.
Graph::Id autocorr_rows_g(Graph& g, Graph::Id level) {
  int64_t n = g.val(level).dim(0), r = g.val(level).dim(2);
  double inv_r2 = 1.0 / static_cast<double>(r * r);
  Graph::Id h = g.mul(level, g.roll2d(level, 0, -1));
  Graph::Id v = g.mul(level, g.roll2d(level, -1, 0));
  Graph::Id sh = g.square(g.mul_scalar(g.sum_rows(g.reshape(h, {n, r * r})), inv_r2));
  Graph::Id sv = g.square(g.mul_scalar(g.sum_rows(g.reshape(v, {n, r * r})), inv_r2));
  return g.add(sh, sv);
}

}  // namespace

void LatentStats::save(const std::string& path) const {
  Checkpoint ck;
  ck.tensors["mu_w"] = mu_w;
  Tensor s({1});
  s[0] = sigma_w;
  ck.tensors["sigma_w"] = s;
  ck.meta["kind"] = "latent-stats";
  ck.save(path);
}

LatentStats LatentStats::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  require(ck.meta.value("kind", "") == "latent-stats", "not a latent-stats file: " + path);
  LatentStats st;
  st.mu_w = ck.tensor("mu_w");
  st.sigma_w = ck.tensor("sigma_w")[0];
  return st;
}

LatentStats latent_stats_from_w(const Tensor& w_rows) {
  require(w_rows.rank() == 2 && w_rows.dim(0) >= 1, "latent stats need [N>=1,d] codes");
  int64_t n = w_rows.dim(0), d = w_rows.dim(1);
  LatentStats st;
  st.mu_w = Tensor({d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) st.mu_w[j] += w_rows.at(i, j);
  st.mu_w.scale_(1.0 / static_cast<double>(n));
  double acc = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double dlt = w_rows.at(i, j) - st.mu_w[j];
      acc += dlt * dlt;
    }
  st.sigma_w = std::sqrt(acc / static_cast<double>(n));
  return st;
}

LatentStats estimate_w_statistics(VasaModel& model, int64_t n_samples, uint64_t seed) {
  require(n_samples >= 1, "estimate_w_statistics needs n_samples >= 1");
  RngStream rng(seed);
  int64_t d = model.config().d_w;
  Tensor rows({n_samples, d});
  int64_t done = 0, chunk_idx = 0;
  while (done < n_samples) {
    int64_t b = std::min<int64_t>(32, n_samples - done);
    RngStream zr = rng.fork("stats.z", chunk_idx);
    RngStream br = rng.fork("stats.b", chunk_idx);
    ++chunk_idx;
    Tensor z = model.sample_z(zr, b);
    Tensor w = model.map_latent(z);
    Tensor x = model.generate(w, model.sample_noise_batch(br, b));
    Tensor enc = model.encode(x);
    std::copy(enc.data(), enc.data() + b * d, rows.data() + done * d);
    done += b;
  }
  return latent_stats_from_w(rows);
}

LatentStats estimate_w_statistics_from(VasaModel& model, const Tensor& images) {
  require(images.rank() == 4 && images.dim(0) >= 1, "latent stats need [N>=1,C,H,W] images");
  return latent_stats_from_w(model.encode(images));
}

InversionConfig InversionConfig::paper_preset() {
  InversionConfig c;
  c.lambda_p = 1e5;
  c.lambda_m = 1e5;
  c.alpha = 1e5;
  return c;
}

void InversionConfig::validate() const {
  require(iterations >= 1, "inversion: iterations must be >= 1");
  require(rampup >= 0 && rampdown >= 0, "inversion: ramps must be >= 0");
  require(rampup + rampdown <= iterations, "inversion: rampup + rampdown must fit in iterations");
  require(lambda_max > 0.0, "inversion: lambda_max must be > 0");
  require(lambda_p >= 0.0 && lambda_m >= 0.0 && alpha >= 0.0,
          "inversion: loss weights must be >= 0");
  require(w_noise_factor >= 0.0, "inversion: w_noise_factor must be >= 0");
}

KvConfig InversionConfig::to_kv() const {
  KvConfig kv;
  kv.set_int("invert_iterations", iterations);
  kv.set_double("invert_lambda_p", lambda_p);
  kv.set_double("invert_lambda_m", lambda_m);
  kv.set_double("invert_alpha", alpha);
  kv.set_double("invert_lambda_max", lambda_max);
  kv.set_int("invert_rampup", rampup);
  kv.set_int("invert_rampdown", rampdown);
  kv.set_double("invert_w_noise_factor", w_noise_factor);
  kv.set_int("invert_seed", static_cast<int64_t>(seed));
  kv.set_int("invert_perceptual_seed", static_cast<int64_t>(perceptual_seed));
  return kv;
}

InversionConfig InversionConfig::from_kv(const KvConfig& kv) {
  InversionConfig c;
  c.iterations = kv.get_int("invert_iterations", c.iterations);
  c.lambda_p = kv.get_double("invert_lambda_p", c.lambda_p);
  c.lambda_m = kv.get_double("invert_lambda_m", c.lambda_m);
  c.alpha = kv.get_double("invert_alpha", c.alpha);
  c.lambda_max = kv.get_double("invert_lambda_max", c.lambda_max);
  c.rampup = kv.get_int("invert_rampup", c.rampup);
  c.rampdown = kv.get_int("invert_rampdown", c.rampdown);
  c.w_noise_factor = kv.get_double("invert_w_noise_factor", c.w_noise_factor);
  c.seed = static_cast<uint64_t>(kv.get_int("invert_seed", static_cast<int64_t>(c.seed)));
  c.perceptual_seed = static_cast<uint64_t>(
      kv.get_int("invert_perceptual_seed", static_cast<int64_t>(c.perceptual_seed)));
  c.validate();
  return c;
}

void InversionResult::save(const std::string& dir) const {
  Checkpoint ck;
  ck.tensors["w_star"] = w_star.w;
  for (size_t i = 0; i < noise.maps.size(); ++i)
    ck.tensors["noise." + std::to_string(i)] = noise.maps[i];
  ck.meta["kind"] = "inversion-result";
  ck.meta["loss_trace"] = loss_trace;
  ck.meta["best_trace"] = best_trace;
  ck.meta["perceptual"] = perceptual;
  ck.meta["mse_term"] = mse_term;
  ck.meta["reg"] = reg;
  ck.meta["warning_divergence"] = warning_divergence;
  ck.meta["noise_maps"] = noise.maps.size();
  ck.save(dir);
}

InversionResult InversionResult::load(const std::string& dir) {
  Checkpoint ck = Checkpoint::load(dir);
  require(ck.meta.value("kind", "") == "inversion-result", "not an inversion result: " + dir);
  InversionResult r;
  r.w_star.w = ck.tensor("w_star");
  r.w_star.kind = WKind::FineTuned;
  size_t nm = ck.meta.at("noise_maps").get<size_t>();
  for (size_t i = 0; i < nm; ++i) r.noise.maps.push_back(ck.tensor("noise." + std::to_string(i)));
  r.loss_trace = ck.meta.at("loss_trace").get<std::vector<double>>();
  r.best_trace = ck.meta.at("best_trace").get<std::vector<double>>();
  r.perceptual = ck.meta.at("perceptual").get<double>();
  r.mse_term = ck.meta.at("mse_term").get<double>();
  r.reg = ck.meta.at("reg").get<double>();
  r.warning_divergence = ck.meta.at("warning_divergence").get<bool>();
  return r;
}

PerceptualDistance::PerceptualDistance(int64_t img_channels, uint64_t seed) {
  RngStream rng(seed);
  stages_.emplace_back("perc.c0", img_channels, 16, 3, rng, 1, 1);
  stages_.emplace_back("perc.c1", 16, 32, 3, rng, 1, 1);
  stages_.emplace_back("perc.c2", 32, 64, 3, rng, 1, 1);
}

Graph::Id PerceptualDistance::features_stage(Graph& g, Graph::Id x, size_t idx) {
  return g.lrelu(stages_[idx].apply(g, x, true), 0.2);
}

Graph::Id PerceptualDistance::dist_rows_g(Graph& g, Graph::Id a, Graph::Id b) {
  require(g.val(a).rank() == 4 && g.val(a).same_shape(g.val(b)),
          "perceptual distance expects two equal NCHW batches");
  int64_t n = g.val(a).dim(0);
  Graph::Id acc = Graph::kNone;
  Graph::Id fa = a, fb = b;
  for (size_t s = 0; s < stages_.size(); ++s) {
    fa = features_stage(g, fa, s);
    fb = features_stage(g, fb, s);
    const Tensor& v = g.val(fa);
    int64_t k = v.dim(1) * v.dim(2) * v.dim(3);
    Graph::Id gap = g.mean_rows(g.reshape(g.square(g.sub(fa, fb)), {n, k}));
    acc = acc == Graph::kNone ? gap : g.add(acc, gap);
    if (s + 1 < stages_.size() && v.dim(2) >= 2) {
      fa = g.avgpool2x(fa);
      fb = g.avgpool2x(fb);
    }
  }
  return acc;
}

double PerceptualDistance::dist(const Tensor& a, const Tensor& b) {
  Tensor a4 = a.rank() == 3 ? a.reshaped({1, a.dim(0), a.dim(1), a.dim(2)}) : a;
  Tensor b4 = b.rank() == 3 ? b.reshaped({1, b.dim(0), b.dim(1), b.dim(2)}) : b;
  Graph g;
  Graph::Id rows = dist_rows_g(g, g.constant(a4), g.constant(b4));
  return g.val(rows).mean();
}

std::vector<Tensor> noise_pyramid(const Tensor& map) {
  require(map.rank() == 2 && map.dim(0) == map.dim(1), "noise_pyramid expects a square map");
  int64_t r = map.dim(0);
  require((r & (r - 1)) == 0, "noise_pyramid expects a power-of-two size");
  std::vector<Tensor> levels{map};
  while (r > kPyramidFloor) {
    const Tensor& prev = levels.back();
    int64_t half = r / 2;
    Tensor next({half, half});
    for (int64_t y = 0; y < half; ++y)
      for (int64_t x = 0; x < half; ++x)
        next.at(y, x) = 0.5 * (prev.at(2 * y, 2 * x) + prev.at(2 * y, 2 * x + 1) +
                               prev.at(2 * y + 1, 2 * x) + prev.at(2 * y + 1, 2 * x + 1));
    levels.push_back(std::move(next));
    r = half;
  }
  return levels;
}

double noise_autocorr_term(const Tensor& map) {
  require(map.rank() == 2 && map.dim(0) == map.dim(1), "autocorr expects a square map");
  int64_t r = map.dim(0);
  double sh = 0, sv = 0;
  for (int64_t y = 0; y < r; ++y)
    for (int64_t x = 0; x < r; ++x) {
      sh += map.at(y, x) * map.at(y, (x - 1 + r) % r);
      sv += map.at(y, x) * map.at((y - 1 + r) % r, x);
    }
  double inv_r2 = 1.0 / static_cast<double>(r * r);
  return (sh * inv_r2) * (sh * inv_r2) + (sv * inv_r2) * (sv * inv_r2);
}

InversionLossIds inversion_loss_g(Graph& g, VasaModel& model, PerceptualDistance& pd,
                                  Graph::Id w, const std::vector<Graph::Id>& noise,
                                  const Tensor& x, const InversionConfig& cfg) {
  require(x.rank() == 4, "inversion loss expects [N,C,H,W] targets");
  int64_t n = x.dim(0);

  Graph::Id xg = model.generator_g(g, w, noise, true);
  Graph::Id xc = g.constant(x);
  Graph::Id perc = pd.dist_rows_g(g, xg, xc);
  int64_t pix = x.dim(1) * x.dim(2) * x.dim(3);
  Graph::Id mse_rows = g.mean_rows(g.reshape(g.square(g.sub(xg, xc)), {n, pix}));

  Graph::Id reg = Graph::kNone;
  for (size_t i = 0; i < noise.size(); ++i) {
    int64_t r = g.val(noise[i]).dim(2);
    if (r <= kPyramidFloor) continue;
    Graph::Id level = noise[i];
    while (true) {
      Graph::Id term = autocorr_rows_g(g, level);
      reg = reg == Graph::kNone ? term : g.add(reg, term);
      if (r == kPyramidFloor) break;
      level = g.mul_scalar(g.avgpool2x(level), 2.0);
      r /= 2;
    }
  }
  if (reg == Graph::kNone) reg = g.constant(Tensor({n}));

  InversionLossIds ids;
  ids.recon = xg;
  ids.perceptual = perc;
  ids.mse_term = mse_rows;
  ids.reg = reg;
  ids.per_image = g.add(g.add(g.mul_scalar(perc, cfg.lambda_p), g.mul_scalar(mse_rows, cfg.lambda_m)),
                        g.mul_scalar(reg, cfg.alpha));
  ids.total = g.sum_all(ids.per_image);
  return ids;
}

namespace {

InversionLossParts eval_parts(VasaModel& model, PerceptualDistance& pd, const Tensor& x,
                              const Tensor& w, const NoiseMapSet& noise,
                              const InversionConfig& cfg) {
  Tensor x4 = x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
  Tensor w2 = w.rank() == 1 ? w.reshaped({1, w.dim(0)}) : w;
  require(x4.dim(0) == 1 && w2.dim(0) == 1, "inversion_loss evaluates one image");

  Graph g;
  std::vector<Graph::Id> nids;
  for (const Tensor& m : noise.maps)
    nids.push_back(g.constant(m.reshaped({1, 1, m.dim(0), m.dim(1)})));
  InversionLossIds ids = inversion_loss_g(g, model, pd, g.constant(w2), nids, x4, cfg);

  InversionLossParts parts;
  parts.perceptual = g.val(ids.perceptual)[0];
  parts.mse_term = g.val(ids.mse_term)[0];
  parts.reg = g.val(ids.reg)[0];
  parts.total = g.val(ids.total)[0];
  return parts;
}

}  // namespace

InversionLossParts inversion_loss(VasaModel& model, PerceptualDistance& pd, const Tensor& x,
                                  const Tensor& w, const NoiseMapSet& noise,
                                  const InversionConfig& cfg) {
  InversionLossParts parts = eval_parts(model, pd, x, w, noise, cfg);
  if (!std::isfinite(parts.total)) {
    std::string which = !std::isfinite(parts.perceptual) ? "perceptual"
                        : !std::isfinite(parts.mse_term) ? "mse"
                                                         : "regularization";
    fail("inversion loss is not finite (" + which + " component)");
  }
  return parts;
}

double lr_schedule(int64_t t, const InversionConfig& cfg) {
  require(t >= 0 && t < cfg.iterations, "lr_schedule: step out of range");
  if (t >= cfg.iterations - cfg.rampdown) {
    double u = static_cast<double>(t - (cfg.iterations - cfg.rampdown)) /
               static_cast<double>(cfg.rampdown);
    return cfg.lambda_max * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
  }
  if (t < cfg.rampup)
    return cfg.lambda_max * static_cast<double>(t) / static_cast<double>(cfg.rampup);
  return cfg.lambda_max;
}

double w_noise_sigma(int64_t t, const LatentStats& stats, const InversionConfig& cfg) {
  int64_t half = cfg.iterations / 2;
  if (t >= half || half == 0) return 0.0;
  double ramp = 1.0 - static_cast<double>(t) / static_cast<double>(half);
  return cfg.w_noise_factor * stats.sigma_w * ramp * ramp;
}

std::vector<InversionResult> fine_tune_batch(VasaModel& model, PerceptualDistance& pd,
                                             const Tensor& images, const LatentStats& stats,
                                             const InversionConfig& cfg) {
  cfg.validate();
  require(images.rank() == 4 && images.dim(0) >= 1, "fine_tune expects [N>=1,C,H,W]");
  int64_t n = images.dim(0), d = model.config().d_w;

  Param wp("invert.w", model.encode(images));
  RngStream rng(cfg.seed);
  std::vector<Param> noise_p;
  for (int64_t i = 0; i < model.config().noise_count(); ++i) {
    int64_t r = model.config().noise_res(i);
    Tensor init = rng.fork("invert.noise", i).normal_tensor({n, 1, r, r});
    renorm_noise_param(init);
    noise_p.emplace_back("invert.noise." + std::to_string(i), std::move(init));
  }
  std::vector<Param*> opt_params{&wp};
  for (Param& p : noise_p) opt_params.push_back(&p);
  Adam opt(opt_params, 0.0);

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> best(n, inf);
  Tensor best_w = wp.value;
  std::vector<NoiseMapSet> best_noise(n);
  for (int64_t i = 0; i < n; ++i) {
    for (const Param& p : noise_p) {
      int64_t r = p.value.dim(2);
      Tensor slice({r, r});
      std::copy(p.value.data() + i * r * r, p.value.data() + (i + 1) * r * r, slice.data());
      best_noise[i].maps.push_back(std::move(slice));
    }
  }
  std::vector<std::vector<double>> traces(n);
  bool diverged = false;

  for (int64_t t = 0; t < cfg.iterations; ++t) {
    double sigma = w_noise_sigma(t, stats, cfg);
    Tensor eps({n, d});
    if (sigma > 0.0) {
      eps = rng.fork("invert.weps", t).normal_tensor({n, d});
      eps.scale_(sigma);
    }

    Graph g;
    Graph::Id wh = g.add(g.param(wp), g.constant(eps));
    std::vector<Graph::Id> nids;
    for (Param& p : noise_p) nids.push_back(g.param(p));
    InversionLossIds ids = inversion_loss_g(g, model, pd, wh, nids, images, cfg);

    const Tensor& per_image = g.val(ids.per_image);
    for (int64_t i = 0; i < n; ++i) {
      double v = per_image[i];
      traces[i].push_back(v);
      if (std::isfinite(v) && v < best[i]) {
        best[i] = v;
        std::copy(wp.value.data() + i * d, wp.value.data() + (i + 1) * d,
                  best_w.data() + i * d);
        for (size_t k = 0; k < noise_p.size(); ++k) {
          int64_t r = noise_p[k].value.dim(2);
          Tensor slice({r, r});
          std::copy(noise_p[k].value.data() + i * r * r,
                    noise_p[k].value.data() + (i + 1) * r * r, slice.data());
          best_noise[i].maps[k] = std::move(slice);
        }
      }
    }
    if (!std::isfinite(g.val(ids.total)[0])) {
      diverged = true;
      break;
    }

    opt.set_lr(lr_schedule(t, cfg));
    opt.zero_grad();
    g.backward(ids.total);
    opt.step();
    for (Param& p : noise_p) renorm_noise_param(p.value);
  }

  std::vector<InversionResult> results(n);
  for (int64_t i = 0; i < n; ++i) {
    InversionResult& r = results[i];
    r.w_star.kind = WKind::FineTuned;
    r.w_star.w = Tensor({d});
    std::copy(best_w.data() + i * d, best_w.data() + (i + 1) * d, r.w_star.w.data());
    r.noise = best_noise[i];
    r.loss_trace = traces[i];
    r.best_trace.reserve(traces[i].size());
    double run = inf;
    for (double v : traces[i]) {
      run = std::min(run, v);
      r.best_trace.push_back(run);
    }
    r.warning_divergence = diverged;

    Tensor xi({1, images.dim(1), images.dim(2), images.dim(3)});
    int64_t pix = xi.numel();
    std::copy(images.data() + i * pix, images.data() + (i + 1) * pix, xi.data());
    InversionLossParts parts = eval_parts(model, pd, xi, r.w_star.w, r.noise, cfg);
    r.perceptual = parts.perceptual;
    r.mse_term = parts.mse_term;
    r.reg = parts.reg;
  }
  return results;
}

InversionResult fine_tune(VasaModel& model, PerceptualDistance& pd, const Tensor& image,
                          const LatentStats& stats, const InversionConfig& cfg) {
  Tensor x4 = image.rank() == 3
                  ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                  : image;
  require(x4.rank() == 4 && x4.dim(0) == 1, "fine_tune inverts a single image");
  return fine_tune_batch(model, pd, x4, stats, cfg)[0];
}

}  // namespace vasa
