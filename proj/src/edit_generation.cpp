#include "vasa/edit_generation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vasa/image.hpp"
#include "vasa/serialize.hpp"

namespace vasa {

namespace {

std::string fnv1a_hex(const double* data, int64_t count) {
  uint64_t h = 1469598103934665603ull;
  const unsigned char* bytes = reinterpret_cast<const unsigned char*>(data);
  for (int64_t i = 0; i < count * static_cast<int64_t>(sizeof(double)); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string gamma_mode_name(GammaMode m) {
  return m == GammaMode::UniformGrid ? "grid" : "random";
}

GammaMode gamma_mode_from_name(const std::string& name) {
  if (name == "grid") return GammaMode::UniformGrid;
  if (name == "random") return GammaMode::UniformRandom;
  fail("unknown gamma mode: " + name);
}

void EditConfig::validate() const {
  require(v >= 1, "edit config: copy count must be >= 1");
  require(eta > 0.0 && eta <= 1.0, "edit config: eta must be in (0,1]");
}

KvConfig EditConfig::to_kv() const {
  KvConfig kv;
  kv.set_int("edit_v", v);
  kv.set_double("edit_eta", eta);
  kv.set("edit_gamma_mode", gamma_mode_name(mode));
  kv.set_bool("edit_resample_noise", resample_noise);
  kv.set_int("edit_seed", static_cast<int64_t>(seed));
  return kv;
}

EditConfig EditConfig::from_kv(const KvConfig& kv) {
  EditConfig c;
  c.v = kv.get_int("edit_v", c.v);
  c.eta = kv.get_double("edit_eta", c.eta);
  c.mode = gamma_mode_from_name(kv.get_str("edit_gamma_mode", gamma_mode_name(c.mode)));
  c.resample_noise = kv.get_bool("edit_resample_noise", c.resample_noise);
  c.seed = static_cast<uint64_t>(kv.get_int("edit_seed", static_cast<int64_t>(c.seed)));
  c.validate();
  return c;
}

void EditedCopySet::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_tensor_file(dir + "/copies.vt", copies);
  save_pgm_batch(dir, "copy", copies);

  nlohmann::json meta;
  meta["kind"] = "edited-copies";
  meta["gammas"] = gammas;
  meta["source_fingerprint"] = source_fingerprint;
  meta["axis_id"] = axis_id;
  meta["warning_divergence"] = warning_divergence;
  std::ofstream out(dir + "/meta.json");
  require(out.good(), "cannot write copy-set metadata in " + dir);
  out << meta.dump(2) << "\n";
}

EditedCopySet EditedCopySet::load(const std::string& dir) {
  std::ifstream in(dir + "/meta.json");
  require(in.good(), "cannot open copy-set metadata in " + dir);
  nlohmann::json meta = nlohmann::json::parse(in);
  require(meta.value("kind", "") == "edited-copies", "not a copy-set directory: " + dir);

  EditedCopySet set;
  set.copies = load_tensor_file(dir + "/copies.vt");
  set.gammas = meta.at("gammas").get<std::vector<double>>();
  set.source_fingerprint = meta.at("source_fingerprint").get<std::string>();
  set.axis_id = meta.at("axis_id").get<std::string>();
  set.warning_divergence = meta.at("warning_divergence").get<bool>();
  require(set.copies.dim(0) == static_cast<int64_t>(set.gammas.size()),
          "copy count does not match the gamma list");
  return set;
}

std::string image_fingerprint(const Tensor& x) { return fnv1a_hex(x.data(), x.numel()); }

std::string axis_fingerprint(const StyleAxis& axis) {
  return axis_method_name(axis.method) + "-" +
         fnv1a_hex(axis.direction.data(), axis.direction.numel());
}

LatentW shift_latent(const LatentW& w, const StyleAxis& axis, double gamma) {
  require(w.w.numel() == axis.direction.numel(), "latent and axis dimensions differ");
  LatentW out;
  out.kind = WKind::Shifted;
  out.w = w.w;
  out.w.axpy_(gamma, axis.direction);
  return out;
}

std::vector<double> sample_gammas(const EditConfig& cfg, double sigma_style) {
  cfg.validate();
  require(sigma_style > 0.0, "axis has no spread, cannot scale shifts");
  double bound = cfg.eta * sigma_style;

  std::vector<double> gammas(cfg.v);
  if (cfg.mode == GammaMode::UniformGrid) {
    if (cfg.v == 1) {
      gammas[0] = 0.0;
    } else {
      for (int64_t i = 0; i < cfg.v; ++i)
        gammas[i] = -bound + 2.0 * bound * static_cast<double>(i) / static_cast<double>(cfg.v - 1);
    }
  } else {
    RngStream rng = RngStream(cfg.seed).fork("edit.gammas", 0);
    for (int64_t i = 0; i < cfg.v; ++i) gammas[i] = -bound + 2.0 * bound * rng.uniform();
  }
  for (double g : gammas) require(std::abs(g) <= bound, "shift left the configured bound");
  return gammas;
}

EditedCopySet generate_copies(const Tensor& x, VasaModel& model, const StyleAxis& axis,
                              const LatentStats& stats, const InversionConfig& inv_cfg,
                              const EditConfig& edit_cfg) {
  edit_cfg.validate();
  Tensor x4 = x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
  require(x4.rank() == 4 && x4.dim(0) == 1, "copies are generated for a single image");

  PerceptualDistance pd(model.config().img_channels, inv_cfg.perceptual_seed);
  InversionResult inv = fine_tune(model, pd, x4, stats, inv_cfg);

  EditedCopySet set;
  set.gammas = sample_gammas(edit_cfg, axis.sigma_style);
  set.source_fingerprint = image_fingerprint(x4);
  set.axis_id = axis_fingerprint(axis);
  set.warning_divergence = inv.warning_divergence;

  int64_t res = model.config().resolution();
  int64_t c = model.config().img_channels;
  set.copies = Tensor({edit_cfg.v, c, res, res});
  RngStream noise_rng(edit_cfg.seed);

  const int64_t chunk = 32;
  int64_t done = 0;
  while (done < edit_cfg.v) {
    int64_t b = std::min(chunk, edit_cfg.v - done);
    Tensor w_rows({b, model.config().d_w});
    std::vector<NoiseMapSet> noise_sets(b);
    for (int64_t i = 0; i < b; ++i) {
      LatentW shifted = shift_latent(inv.w_star, axis, set.gammas[done + i]);
      std::copy(shifted.w.data(), shifted.w.data() + shifted.w.numel(),
                w_rows.data() + i * model.config().d_w);
      if (edit_cfg.resample_noise) {
        RngStream r = noise_rng.fork("edit.noise", done + i);
        noise_sets[i] = model.sample_noise(r);
      } else {
        noise_sets[i] = inv.noise;
      }
    }
    Tensor out = model.generate(w_rows, VasaModel::stack_noise(noise_sets));
    std::copy(out.data(), out.data() + out.numel(), set.copies.data() + done * c * res * res);
    done += b;
  }
  return set;
}

}  // namespace vasa
