#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "vasa/image.hpp"
#include "vasa/training.hpp"

using namespace vasa;

namespace {

std::vector<std::string> known_keys() {
  std::vector<std::string> keys;
  for (const std::string& k : ModelConfig().to_kv().keys()) keys.push_back(k);
  for (const std::string& k : TrainConfig().to_kv().keys()) keys.push_back(k);
  return keys;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train the invertible autoencoder on a directory of PGM images"};
  std::string config_path, data_dir, out_dir;
  app.add_option("--config", config_path, "flat key=value config file")->required();
  app.add_option("--data", data_dir, "directory of training .pgm images")->required();
  app.add_option("--out", out_dir, "output directory for checkpoints and the log")->required();
  CLI11_PARSE(app, argc, argv);

  try {
    KvConfig kv = KvConfig::from_file(config_path);
    kv.check_known_keys(known_keys());
    ModelConfig mc = ModelConfig::from_kv(kv);
    TrainConfig tc = TrainConfig::from_kv(kv);

    Tensor images = load_pgm_dir(data_dir);
    std::printf("data: %lld images at %lldx%lld from %s\n",
                static_cast<long long>(images.dim(0)), static_cast<long long>(images.dim(2)),
                static_cast<long long>(images.dim(3)), data_dir.c_str());
    std::printf("model: res %lld, %lld levels, %lld channels, d_w %lld\n",
                static_cast<long long>(mc.resolution()), static_cast<long long>(mc.levels),
                static_cast<long long>(mc.channels), static_cast<long long>(mc.d_w));

    VasaModel model(mc);
    TrainLog log = train(model, images, tc, out_dir);
    log.save_csv(out_dir + "/train_log.csv");

    if (log.diverged) {
      std::printf("diverged at step %lld; last good checkpoint: %s/last_good\n",
                  static_cast<long long>(log.divergence_step), out_dir.c_str());
      return 2;
    }
    if (!log.records.empty()) {
      const TrainRecord& r = log.records.back();
      std::printf("done: %zu steps in %.1fs, losses adv %.4f gen %.4f cycle %.4f\n",
                  log.records.size(), r.seconds, r.loss_adv, r.loss_gen, r.loss_cycle);
    } else {
      std::printf("done: 0 steps requested, checkpoint written unchanged\n");
    }
    std::printf("checkpoint: %s/final\n", out_dir.c_str());
    std::printf("log: %s/train_log.csv\n", out_dir.c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
