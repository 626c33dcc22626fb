#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "vasa/edit_generation.hpp"
#include "vasa/image.hpp"

using namespace vasa;

int main(int argc, char** argv) {
  CLI::App app{"Generate style-shifted copies of an image via latent inversion"};
  std::string ckpt_dir, axis_dir, image_path, out_dir, config_path, mode_name;
  int64_t v = -1;
  double eta = -1.0;
  int64_t seed = -1;
  int64_t stats_samples = 2000;
  int64_t stats_seed = 1;
  bool resample_noise = false;
  app.add_option("--ckpt", ckpt_dir, "trained model checkpoint directory")->required();
  app.add_option("--axis", axis_dir, "style axis directory")->required();
  app.add_option("--image", image_path, "source .pgm image")->required();
  app.add_option("--out", out_dir, "output directory for the copy set")->required();
  app.add_option("--V", v, "number of copies");
  app.add_option("--eta", eta, "shift bound as a fraction of the style spread");
  app.add_option("--mode", mode_name, "gamma sampling: grid or random");
  app.add_option("--seed", seed, "seed for random gammas and resampled noise");
  app.add_flag("--resample-noise", resample_noise, "fresh noise maps per copy");
  app.add_option("--config", config_path, "flat key=value file with edit and inversion keys");
  app.add_option("--stats-samples", stats_samples, "samples for the latent statistics");
  app.add_option("--stats-seed", stats_seed, "seed for the latent statistics");
  CLI11_PARSE(app, argc, argv);

  try {
    Checkpoint ck = Checkpoint::load(ckpt_dir);
    VasaModel model = VasaModel::load(ck);
    const ModelConfig& mc = model.config();

    EditConfig edit_cfg;
    InversionConfig inv_cfg;
    if (!config_path.empty()) {
      KvConfig kv = KvConfig::from_file(config_path);
      std::vector<std::string> known = EditConfig().to_kv().keys();
      for (const std::string& k : InversionConfig().to_kv().keys()) known.push_back(k);
      kv.check_known_keys(known);
      edit_cfg = EditConfig::from_kv(kv);
      inv_cfg = InversionConfig::from_kv(kv);
    }
    if (v >= 0) edit_cfg.v = v;
    if (eta >= 0.0) edit_cfg.eta = eta;
    if (!mode_name.empty()) edit_cfg.mode = gamma_mode_from_name(mode_name);
    if (seed >= 0) edit_cfg.seed = static_cast<uint64_t>(seed);
    if (resample_noise) edit_cfg.resample_noise = true;
    edit_cfg.validate();

    StyleAxis axis = StyleAxis::load(axis_dir);
    require(axis.direction.numel() == mc.d_w, "axis dimension does not match the model");

    Tensor img = load_pgm(image_path);
    require(img.dim(1) == mc.resolution() && img.dim(2) == mc.resolution(),
            "image size does not match the model resolution");
    require(mc.img_channels == 1, "PGM input requires a single-channel model");

    std::printf("model: res %lld, d_w %lld; axis: %s, spread %.5f\n",
                static_cast<long long>(mc.resolution()), static_cast<long long>(mc.d_w),
                axis_method_name(axis.method).c_str(), axis.sigma_style);
    LatentStats stats =
        estimate_w_statistics(model, stats_samples, static_cast<uint64_t>(stats_seed));
    std::printf("latent stats from %lld samples: sigma_w %.5f\n",
                static_cast<long long>(stats_samples), stats.sigma_w);
    std::printf("copies: V %lld, %s gammas in [%+.5f, %+.5f]\n",
                static_cast<long long>(edit_cfg.v), gamma_mode_name(edit_cfg.mode).c_str(),
                -edit_cfg.eta * axis.sigma_style, edit_cfg.eta * axis.sigma_style);

    EditedCopySet set = generate_copies(img, model, axis, stats, inv_cfg, edit_cfg);
    set.save(out_dir);
    std::printf("source fingerprint %s, axis id %s\n", set.source_fingerprint.c_str(),
                set.axis_id.c_str());
    std::printf("copy set: %s (%lld copies)\n", out_dir.c_str(),
                static_cast<long long>(set.copies.dim(0)));

    if (set.warning_divergence) {
      std::printf("warning: inversion diverged, copies built from the best iterate reached\n");
      return 2;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
