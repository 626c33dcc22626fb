#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "vasa/image.hpp"
#include "vasa/inversion.hpp"

using namespace vasa;

int main(int argc, char** argv) {
  CLI::App app{"Fit latent code and noise maps to reproduce an image"};
  std::string ckpt_dir, image_path, out_dir, config_path, recon_path;
  int64_t stats_samples = 2000;
  int64_t stats_seed = 1;
  app.add_option("--ckpt", ckpt_dir, "trained model checkpoint directory")->required();
  app.add_option("--image", image_path, "target .pgm image")->required();
  app.add_option("--out", out_dir, "output directory for the result")->required();
  app.add_option("--config", config_path, "flat key=value inversion config file");
  app.add_option("--stats-samples", stats_samples, "samples for the latent statistics");
  app.add_option("--stats-seed", stats_seed, "seed for the latent statistics");
  app.add_option("--recon", recon_path, "optional .pgm path for the reconstruction");
  CLI11_PARSE(app, argc, argv);

  try {
    Checkpoint ck = Checkpoint::load(ckpt_dir);
    VasaModel model = VasaModel::load(ck);
    const ModelConfig& mc = model.config();

    InversionConfig cfg;
    if (!config_path.empty()) {
      KvConfig kv = KvConfig::from_file(config_path);
      kv.check_known_keys(InversionConfig().to_kv().keys());
      cfg = InversionConfig::from_kv(kv);
    }

    Tensor img = load_pgm(image_path);
    require(img.dim(1) == mc.resolution() && img.dim(2) == mc.resolution(),
            "image size does not match the model resolution");
    require(mc.img_channels == 1, "PGM input requires a single-channel model");

    std::printf("model: res %lld, d_w %lld; image: %s\n", static_cast<long long>(mc.resolution()),
                static_cast<long long>(mc.d_w), image_path.c_str());
    LatentStats stats =
        estimate_w_statistics(model, stats_samples, static_cast<uint64_t>(stats_seed));
    std::printf("latent stats from %lld samples: sigma_w %.5f\n",
                static_cast<long long>(stats_samples), stats.sigma_w);

    PerceptualDistance pd(mc.img_channels, cfg.perceptual_seed);
    InversionResult result = fine_tune(model, pd, img, stats, cfg);
    result.save(out_dir);

    std::printf("loss: first %.6f best %.6f over %zu iterations\n", result.loss_trace.front(),
                result.best_trace.back(), result.loss_trace.size());
    std::printf("components: perceptual %.6f pixel %.6f smoothness %.6f\n", result.perceptual,
                result.mse_term, result.reg);
    if (!recon_path.empty()) {
      Tensor recon = model.generate_one(result.w_star.w, result.noise);
      save_pgm(recon_path, recon.reshaped({1, mc.resolution(), mc.resolution()}));
      std::printf("reconstruction: %s\n", recon_path.c_str());
    }
    std::printf("result: %s\n", out_dir.c_str());

    if (result.warning_divergence) {
      std::printf("warning: optimization diverged, result holds the best iterate reached\n");
      return 2;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
