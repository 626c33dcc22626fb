#pragma once

#include <map>
#include <string>
#include <vector>

#include "vasa/core_model.hpp"

namespace vasa {

struct TrainConfig {
  double lr = 0.002;
  double beta1 = 0.001;
  double beta2 = 0.99;
  int64_t batch = 64;
  int64_t reg_interval = 16;
  double r1_weight = 10.0;
  double fd_sigma = 1e-3;  // probe size of the gradient-penalty estimator
  int64_t steps = 3000;
  uint64_t seed = 7;
  bool train_mapping = false;
  int64_t ckpt_interval = 0;  // 0 keeps only the final checkpoint

  void validate() const;
  KvConfig to_kv() const;
  static TrainConfig from_kv(const KvConfig& kv);
};

struct TrainRecord {
  int64_t step = 0;  // 1-based
  double loss_adv = 0.0;    // discriminator/encoder phase
  double loss_gen = 0.0;    // generator phase
  double loss_cycle = 0.0;  // latent autoencoder phase
  bool reg_event = false;
  double seconds = 0.0;  // wall clock since training start
};

struct TrainLog {
  std::vector<TrainRecord> records;
  bool diverged = false;
  int64_t divergence_step = -1;

  int64_t reg_events() const;
  std::string to_csv() const;
  void save_csv(const std::string& path) const;
};

// Mean over rows of ||a_row - b_row||^2; the generator/encoder cycle objective.
double latent_cycle_loss(const Tensor& w_hat, const Tensor& w);

// Alternating-phase trainer. Each phase takes one Adam step on its own
// parameter group and returns the loss value before that step:
//   phase 1: D and E against softplus(-D(G(w,b),w)) + softplus(D(x,E(x)))
//   phase 2: G (plus F when train_mapping) against softplus(D(G(w,b),w))
//   phase 3: G and E against mean ||E(G(w,b)) - w||^2
// The *_with variants take the latent sample explicitly; the step-indexed
// wrappers draw it deterministically from the config seed.
class Trainer {
 public:
  Trainer(VasaModel& model, const TrainConfig& cfg);

  double phase1_update(const Tensor& images, int64_t step);
  double phase2_update(const Tensor& images, int64_t step);
  double phase3_update(const Tensor& images, int64_t step);

  double phase1_update_with(const Tensor& images, const Tensor& z,
                            const std::vector<Tensor>& noise, bool reg_event);
  double phase2_update_with(const Tensor& z, const std::vector<Tensor>& noise);
  double phase3_update_with(const Tensor& z, const std::vector<Tensor>& noise);

  bool is_reg_step(int64_t step) const { return step % cfg_.reg_interval == 0; }

  // Mean generated-pair logit minus mean real-pair logit on a fixed probe
  // set; grows as the discriminator learns to separate the two.
  double logit_margin(const Tensor& images);

  VasaModel& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  VasaModel& model_;
  TrainConfig cfg_;
  RngStream rng_;
  Adam opt_adv_;    // D + E
  Adam opt_gen_;    // G (+ F)
  Adam opt_cycle_;  // G + E
};

// Runs the full phase I/II/III loop over `images` ([M,C,H,W] in [-1,1]).
// Checkpoints go under ckpt_dir ("" disables): step_XXXXXX per interval,
// `final` on success, `last_good` with the pre-divergence parameters when a
// non-finite loss aborts the run.
TrainLog train(VasaModel& model, const Tensor& images, const TrainConfig& cfg,
               const std::string& ckpt_dir);

}  // namespace vasa
