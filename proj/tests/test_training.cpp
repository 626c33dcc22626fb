#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vasa/training.hpp"

using namespace vasa;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_z = 8;
  c.d_w = 8;
  c.img_channels = 1;
  c.base_res = 4;
  c.levels = 2;
  c.channels = 6;
  c.mapping_layers = 2;
  c.disc_fc_layers = 2;
  c.disc_fc_width = 16;
  c.disc_channels = 6;
  c.seed = 3;
  return c;
}

TrainConfig tiny_train(int64_t steps, int64_t batch = 8) {
  TrainConfig t;
  t.steps = steps;
  t.batch = batch;
  t.seed = 11;
  return t;
}

// Two blob classes at opposite corners, amplitudes in [-1,1].
Tensor toy_images(int64_t m, int64_t res, uint64_t seed) {
  RngStream rng(seed);
  Tensor x({m, 1, res, res});
  for (int64_t i = 0; i < m; ++i) {
    int cls = static_cast<int>(i % 2);
    double cy = cls == 0 ? res * 0.3 : res * 0.7;
    double cx = cls == 0 ? res * 0.3 : res * 0.7;
    double s = res * 0.22;
    for (int64_t yy = 0; yy < res; ++yy)
      for (int64_t xx = 0; xx < res; ++xx) {
        double d2 = (yy - cy) * (yy - cy) + (xx - cx) * (xx - cx);
        double v = 1.4 * std::exp(-d2 / (2 * s * s)) - 0.7 + 0.05 * rng.normal();
        x.at(i, 0, yy, xx) = std::max(-1.0, std::min(1.0, v));
      }
  }
  return x;
}

std::map<std::string, Tensor> snapshot(std::vector<Param*> ps) {
  std::map<std::string, Tensor> out;
  export_params(ps, out);
  return out;
}

bool bitwise_equal(const std::map<std::string, Tensor>& a, std::vector<Param*> ps) {
  for (Param* p : ps) {
    const Tensor& old = a.at(p->name);
    if (!old.same_shape(p->value)) return false;
    for (int64_t i = 0; i < old.numel(); ++i)
      if (old[i] != p->value[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("initial phase losses equal the softplus values of a zero logit") {
  VasaModel m(tiny_config());
  TrainConfig tc = tiny_train(1);
  Trainer tr(m, tc);
  Tensor x = toy_images(8, m.config().resolution(), 5);

  const double ln2 = std::log(2.0);
  double l2 = tr.phase2_update(x, 1);
  CHECK(l2 == doctest::Approx(ln2).epsilon(1e-12));
  double l3 = tr.phase3_update(x, 1);
  CHECK(l3 >= 0.0);
  double l1 = tr.phase1_update(x, 1);
  CHECK(l1 == doctest::Approx(2.0 * ln2).epsilon(1e-12));
}

TEST_CASE("each phase updates exactly its own parameter group") {
  VasaModel m(tiny_config());
  Trainer tr(m, tiny_train(10));
  Tensor x = toy_images(8, m.config().resolution(), 6);

  auto sf = snapshot(m.params_mapping());
  auto sg = snapshot(m.params_generator());
  auto se = snapshot(m.params_encoder());
  auto sd = snapshot(m.params_discriminator());

  // Step 1 moves only the zero-init head of D (everything upstream of it
  // sees a zero gradient); a second step reaches E as well.
  tr.phase1_update(x, 1);
  tr.phase1_update(x, 2);
  CHECK(bitwise_equal(sf, m.params_mapping()));
  CHECK(bitwise_equal(sg, m.params_generator()));
  CHECK_FALSE(bitwise_equal(se, m.params_encoder()));
  CHECK_FALSE(bitwise_equal(sd, m.params_discriminator()));

  se = snapshot(m.params_encoder());
  sd = snapshot(m.params_discriminator());
  tr.phase2_update(x, 3);
  CHECK(bitwise_equal(sf, m.params_mapping()));
  CHECK(bitwise_equal(se, m.params_encoder()));
  CHECK(bitwise_equal(sd, m.params_discriminator()));
  CHECK_FALSE(bitwise_equal(sg, m.params_generator()));

  sg = snapshot(m.params_generator());
  tr.phase3_update(x, 4);
  CHECK(bitwise_equal(sf, m.params_mapping()));
  CHECK(bitwise_equal(sd, m.params_discriminator()));
  CHECK_FALSE(bitwise_equal(sg, m.params_generator()));
  CHECK_FALSE(bitwise_equal(se, m.params_encoder()));
}

TEST_CASE("train_mapping opts the mapping network into the generator phase") {
  VasaModel m(tiny_config());
  TrainConfig tc = tiny_train(10);
  tc.train_mapping = true;
  Trainer tr(m, tc);
  Tensor x = toy_images(8, m.config().resolution(), 6);

  tr.phase1_update(x, 1);  // de-zero the discriminator head first
  auto sf = snapshot(m.params_mapping());
  tr.phase2_update(x, 2);
  CHECK_FALSE(bitwise_equal(sf, m.params_mapping()));
}

TEST_CASE("lazy regularization fires on exact interval arithmetic") {
  VasaModel m(tiny_config());
  TrainConfig tc = tiny_train(23, 4);
  tc.reg_interval = 4;
  Tensor x = toy_images(8, m.config().resolution(), 7);

  TrainLog log = train(m, x, tc, "");
  CHECK_FALSE(log.diverged);
  REQUIRE(log.records.size() == 23);
  CHECK(log.reg_events() == 5);
  for (size_t i = 0; i < log.records.size(); ++i) {
    const TrainRecord& r = log.records[i];
    CHECK(r.step == static_cast<int64_t>(i + 1));
    CHECK(r.reg_event == (r.step % 4 == 0));
    CHECK(r.loss_adv >= 0.0);
    CHECK(r.loss_gen >= 0.0);
    CHECK(r.loss_cycle >= 0.0);
    CHECK(std::isfinite(r.loss_adv));
    CHECK(std::isfinite(r.loss_gen));
    CHECK(std::isfinite(r.loss_cycle));
  }
  std::string csv = log.to_csv();
  CHECK(csv.rfind("step,loss_adv,loss_gen,loss_cycle,reg_event,seconds\n", 0) == 0);
}

TEST_CASE("identical seed and data reproduce the loss sequence") {
  Tensor x = toy_images(8, 8, 9);
  TrainConfig tc = tiny_train(6, 4);

  VasaModel m1(tiny_config());
  VasaModel m2(tiny_config());
  TrainLog a = train(m1, x, tc, "");
  TrainLog b = train(m2, x, tc, "");
  REQUIRE(a.records.size() == b.records.size());
  for (size_t i = 0; i < a.records.size(); ++i) {
    CHECK(std::fabs(a.records[i].loss_adv - b.records[i].loss_adv) <= 1e-6);
    CHECK(std::fabs(a.records[i].loss_gen - b.records[i].loss_gen) <= 1e-6);
    CHECK(std::fabs(a.records[i].loss_cycle - b.records[i].loss_cycle) <= 1e-6);
  }
}

TEST_CASE("zero training steps leave the model untouched") {
  VasaModel m(tiny_config());
  auto all = snapshot(m.params_all());
  Tensor x = toy_images(8, m.config().resolution(), 10);
  TrainLog log = train(m, x, tiny_train(0), "");
  CHECK(log.records.empty());
  CHECK_FALSE(log.diverged);
  CHECK(bitwise_equal(all, m.params_all()));
}

TEST_CASE("empty batches and invalid configs are rejected") {
  VasaModel m(tiny_config());
  Trainer tr(m, tiny_train(1));
  Tensor empty({0, 1, 8, 8});
  CHECK_THROWS(tr.phase1_update(empty, 1));
  CHECK_THROWS(tr.phase2_update(empty, 1));
  CHECK_THROWS(tr.phase3_update(empty, 1));

  TrainConfig bad = tiny_train(1);
  bad.batch = 0;
  CHECK_THROWS(bad.validate());
  bad = tiny_train(1);
  bad.reg_interval = 0;
  CHECK_THROWS(bad.validate());
  bad = tiny_train(1);
  bad.lr = 0.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("latent cycle loss vanishes at the fixed point and matches phase 3") {
  RngStream rng(21);
  Tensor w = rng.normal_tensor({5, 8});
  CHECK(latent_cycle_loss(w, w) == 0.0);

  VasaModel m(tiny_config());
  Trainer tr(m, tiny_train(1));
  Tensor z = rng.normal_tensor({4, 8});
  RngStream nr = rng.fork("noise", 0);
  std::vector<Tensor> noise = m.sample_noise_batch(nr, 4);

  Tensor wm = m.map_latent(z);
  Tensor xg = m.generate(wm, noise);
  double oracle = latent_cycle_loss(m.encode(xg), wm);
  double l3 = tr.phase3_update_with(z, noise);
  CHECK(l3 == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("discriminator separation margin grows under phase-1 training") {
  VasaModel m(tiny_config());
  Trainer tr(m, tiny_train(60, 8));
  Tensor x = toy_images(16, m.config().resolution(), 13);
  Tensor probe = toy_images(8, m.config().resolution(), 14);

  std::vector<double> margins;
  for (int64_t step = 1; step <= 50; ++step) {
    tr.phase1_update(x, step);
    margins.push_back(tr.logit_margin(probe));
  }
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += margins[i] / 10.0;
    last += margins[40 + i] / 10.0;
  }
  CHECK(last >= first);
  CHECK(margins.back() > 0.0);
}

TEST_CASE("divergence aborts the run and persists the pre-step state") {
  VasaModel m(tiny_config());
  m.params_discriminator()[0]->value[0] = std::nan("");
  Tensor x = toy_images(8, m.config().resolution(), 15);

  std::string dir = "/tmp/vasa_train_div_test";
  std::filesystem::remove_all(dir);
  TrainLog log = train(m, x, tiny_train(5, 4), dir);
  CHECK(log.diverged);
  CHECK(log.divergence_step == 1);
  CHECK(log.records.empty());
  CHECK(std::filesystem::exists(dir + "/last_good/manifest.json"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoints appear on the configured interval and reload") {
  VasaModel m(tiny_config());
  Tensor x = toy_images(8, m.config().resolution(), 16);
  TrainConfig tc = tiny_train(5, 4);
  tc.ckpt_interval = 2;

  std::string dir = "/tmp/vasa_train_ckpt_test";
  std::filesystem::remove_all(dir);
  TrainLog log = train(m, x, tc, dir);
  CHECK_FALSE(log.diverged);
  CHECK(std::filesystem::exists(dir + "/step_000002/manifest.json"));
  CHECK(std::filesystem::exists(dir + "/step_000004/manifest.json"));
  CHECK_FALSE(std::filesystem::exists(dir + "/step_000005"));
  REQUIRE(std::filesystem::exists(dir + "/final/manifest.json"));

  Checkpoint ck = Checkpoint::load(dir + "/final");
  CHECK(ck.meta.at("train_step").get<int64_t>() == 5);
  VasaModel re = VasaModel::load(ck);
  auto now = snapshot(m.params_all());
  CHECK(bitwise_equal(now, re.params_all()));

  log.save_csv(dir + "/log.csv");
  CHECK(std::filesystem::exists(dir + "/log.csv"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("generator phase descends its objective against a fixed discriminator") {
  VasaModel m(tiny_config());
  Trainer tr(m, tiny_train(1));
  Tensor x = toy_images(16, m.config().resolution(), 41);

  for (int64_t s = 1; s <= 10; ++s) tr.phase1_update(x, s);
  std::vector<double> gl;
  for (int64_t s = 1; s <= 100; ++s) gl.push_back(tr.phase2_update(x, 100 + s));

  double first = 0.0, last = 0.0;
  for (int i = 0; i < 20; ++i) {
    first += gl[i] / 20.0;
    last += gl[80 + i] / 20.0;
  }
  CHECK(last < first);
}

TEST_CASE("full training cycle improves cycle loss and reconstruction") {
  VasaModel m(tiny_config());
  Tensor x = toy_images(32, m.config().resolution(), 41);

  auto recon_mse = [&] {
    Tensor w = m.encode(x);
    return mse(m.generate(w, m.zero_noise_batch(x.dim(0))), x);
  };

  double mse0 = recon_mse();
  TrainConfig tc = tiny_train(150, 8);
  TrainLog log = train(m, x, tc, "");
  REQUIRE_FALSE(log.diverged);

  double cyc_first = 0.0, cyc_last = 0.0;
  for (int i = 0; i < 20; ++i) {
    cyc_first += log.records[i].loss_cycle / 20.0;
    cyc_last += log.records[130 + i].loss_cycle / 20.0;
  }
  CHECK(cyc_last < 0.5 * cyc_first);
  CHECK(recon_mse() < mse0);
}

TEST_CASE("config round-trips through flat keys and rejects bad values") {
  TrainConfig t;
  t.lr = 0.004;
  t.batch = 32;
  t.steps = 123;
  t.train_mapping = true;
  TrainConfig u = TrainConfig::from_kv(t.to_kv());
  CHECK(u.lr == t.lr);
  CHECK(u.batch == t.batch);
  CHECK(u.steps == t.steps);
  CHECK(u.train_mapping == t.train_mapping);
  CHECK(u.beta1 == t.beta1);
  CHECK(u.beta2 == t.beta2);
  CHECK(u.reg_interval == t.reg_interval);
}
