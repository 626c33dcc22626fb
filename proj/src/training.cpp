#include "vasa/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

namespace vasa {

namespace {

std::vector<Graph::Id> as_constants(Graph& g, const std::vector<Tensor>& ts) {
  std::vector<Graph::Id> ids;
  ids.reserve(ts.size());
  for (const Tensor& t : ts) ids.push_back(g.constant(t));
  return ids;
}

Tensor gather_rows(const Tensor& images, const std::vector<int64_t>& idx, int64_t begin,
                   int64_t count) {
  Shape s = images.shape();
  int64_t stride = images.numel() / s[0];
  Shape out_shape = s;
  out_shape[0] = count;
  Tensor out(out_shape);
  for (int64_t i = 0; i < count; ++i) {
    int64_t src = idx[begin + i];
    std::copy(images.data() + src * stride, images.data() + (src + 1) * stride,
              out.data() + i * stride);
  }
  return out;
}

std::string step_dir(const std::string& root, int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%06lld", static_cast<long long>(step));
  return root + "/" + buf;
}

void save_model_checkpoint(VasaModel& model, const TrainConfig& cfg, int64_t step,
                           const std::string& dir) {
  Checkpoint ck;
  model.save(ck);
  ck.config.merge(cfg.to_kv());
  ck.meta["train_step"] = step;
  ck.save(dir);
}

}  // namespace

void TrainConfig::validate() const {
  require(lr > 0.0, "train: lr must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "train: beta1 must be in [0,1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "train: beta2 must be in [0,1)");
  require(batch >= 1, "train: batch must be >= 1");
  require(reg_interval >= 1, "train: reg_interval must be >= 1");
  require(r1_weight >= 0.0, "train: r1_weight must be >= 0");
  require(fd_sigma > 0.0, "train: fd_sigma must be > 0");
  require(steps >= 0, "train: steps must be >= 0");
  require(ckpt_interval >= 0, "train: ckpt_interval must be >= 0");
}

KvConfig TrainConfig::to_kv() const {
  KvConfig kv;
  kv.set_double("train_lr", lr);
  kv.set_double("train_beta1", beta1);
  kv.set_double("train_beta2", beta2);
  kv.set_int("train_batch", batch);
  kv.set_int("train_reg_interval", reg_interval);
  kv.set_double("train_r1_weight", r1_weight);
  kv.set_double("train_fd_sigma", fd_sigma);
  kv.set_int("train_steps", steps);
  kv.set_int("train_seed", static_cast<int64_t>(seed));
  kv.set_bool("train_mapping", train_mapping);
  kv.set_int("train_ckpt_interval", ckpt_interval);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.lr = kv.get_double("train_lr", c.lr);
  c.beta1 = kv.get_double("train_beta1", c.beta1);
  c.beta2 = kv.get_double("train_beta2", c.beta2);
  c.batch = kv.get_int("train_batch", c.batch);
  c.reg_interval = kv.get_int("train_reg_interval", c.reg_interval);
  c.r1_weight = kv.get_double("train_r1_weight", c.r1_weight);
  c.fd_sigma = kv.get_double("train_fd_sigma", c.fd_sigma);
  c.steps = kv.get_int("train_steps", c.steps);
  c.seed = static_cast<uint64_t>(kv.get_int("train_seed", static_cast<int64_t>(c.seed)));
  c.train_mapping = kv.get_bool("train_mapping", c.train_mapping);
  c.ckpt_interval = kv.get_int("train_ckpt_interval", c.ckpt_interval);
  c.validate();
  return c;
}

int64_t TrainLog::reg_events() const {
  int64_t n = 0;
  for (const TrainRecord& r : records) n += r.reg_event ? 1 : 0;
  return n;
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "step,loss_adv,loss_gen,loss_cycle,reg_event,seconds\n";
  char line[160];
  for (const TrainRecord& r : records) {
    std::snprintf(line, sizeof(line), "%lld,%.10g,%.10g,%.10g,%d,%.3f\n",
                  static_cast<long long>(r.step), r.loss_adv, r.loss_gen, r.loss_cycle,
                  r.reg_event ? 1 : 0, r.seconds);
    os << line;
  }
  return os.str();
}

void TrainLog::save_csv(const std::string& path) const {
  std::ofstream f(path);
  require(f.good(), "cannot write " + path);
  f << to_csv();
}

double latent_cycle_loss(const Tensor& w_hat, const Tensor& w) {
  require(w_hat.same_shape(w) && w.rank() == 2, "latent_cycle_loss: shapes must match, [N,d]");
  double total = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) {
    double d = w_hat[i] - w[i];
    total += d * d;
  }
  return total / static_cast<double>(w.dim(0));
}

Trainer::Trainer(VasaModel& model, const TrainConfig& cfg)
    : model_(model),
      cfg_(cfg),
      rng_(cfg.seed),
      opt_adv_(
          [&] {
            std::vector<Param*> ps = model.params_discriminator();
            for (Param* p : model.params_encoder()) ps.push_back(p);
            return ps;
          }(),
          cfg.lr, cfg.beta1, cfg.beta2),
      opt_gen_(
          [&] {
            std::vector<Param*> ps = model.params_generator();
            if (cfg.train_mapping)
              for (Param* p : model.params_mapping()) ps.push_back(p);
            return ps;
          }(),
          cfg.lr, cfg.beta1, cfg.beta2),
      opt_cycle_(
          [&] {
            std::vector<Param*> ps = model.params_generator();
            for (Param* p : model.params_encoder()) ps.push_back(p);
            return ps;
          }(),
          cfg.lr, cfg.beta1, cfg.beta2) {
  cfg_.validate();
}

double Trainer::phase1_update(const Tensor& images, int64_t step) {
  require(images.rank() == 4 && images.dim(0) >= 1, "phase1: batch must be [N>=1,C,H,W]");
  int64_t n = images.dim(0);
  RngStream zs = rng_.fork("phase1.z", step);
  RngStream bs = rng_.fork("phase1.b", step);
  Tensor z = model_.sample_z(zs, n);
  std::vector<Tensor> noise = model_.sample_noise_batch(bs, n);
  return phase1_update_with(images, z, noise, is_reg_step(step));
}

double Trainer::phase1_update_with(const Tensor& images, const Tensor& z,
                                   const std::vector<Tensor>& noise, bool reg_event) {
  require(images.rank() == 4 && images.dim(0) >= 1, "phase1: batch must be [N>=1,C,H,W]");
  Graph g;
  Graph::Id w = model_.map_latent_g(g, g.constant(z), true);
  Graph::Id xg = model_.generator_g(g, w, as_constants(g, noise), true);
  Graph::Id logit_fake = model_.discriminator_g(g, xg, w, false);

  Graph::Id xr = g.constant(images);
  Graph::Id e = model_.encoder_g(g, xr, false).w;
  Graph::Id logit_real = model_.discriminator_g(g, xr, e, false);

  Graph::Id loss = g.add(g.mean_all(g.softplus(g.neg(logit_fake))),
                         g.mean_all(g.softplus(logit_real)));

  if (reg_event && cfg_.r1_weight > 0.0) {
    // Directional probe of ||grad_x D(x,E(x))||^2: for u ~ N(0,I) the squared
    // one-sided difference quotient is an unbiased estimator up to O(sigma).
    RngStream us = rng_.fork("phase1.r1", opt_adv_.steps());
    Tensor xp = images;
    Tensor u = us.normal_tensor(images.shape());
    xp.axpy_(cfg_.fd_sigma, u);
    Graph::Id xpc = g.constant(xp);
    Graph::Id ep = model_.encoder_g(g, xpc, false).w;
    Graph::Id logit_p = model_.discriminator_g(g, xpc, ep, false);
    Graph::Id quot = g.mul_scalar(g.sub(logit_p, logit_real), 1.0 / cfg_.fd_sigma);
    loss = g.add(loss, g.mul_scalar(g.mean_all(g.square(quot)), 0.5 * cfg_.r1_weight));
  }

  double value = g.val(loss)[0];
  if (!std::isfinite(value)) return value;
  opt_adv_.zero_grad();
  g.backward(loss);
  opt_adv_.step();
  return value;
}

double Trainer::phase2_update(const Tensor& images, int64_t step) {
  require(images.rank() == 4 && images.dim(0) >= 1, "phase2: batch must be [N>=1,C,H,W]");
  int64_t n = images.dim(0);
  RngStream zs = rng_.fork("phase2.z", step);
  RngStream bs = rng_.fork("phase2.b", step);
  Tensor z = model_.sample_z(zs, n);
  std::vector<Tensor> noise = model_.sample_noise_batch(bs, n);
  return phase2_update_with(z, noise);
}

double Trainer::phase2_update_with(const Tensor& z, const std::vector<Tensor>& noise) {
  require(z.rank() == 2 && z.dim(0) >= 1, "phase2: latent batch must be [N>=1,d_z]");
  Graph g;
  Graph::Id w = model_.map_latent_g(g, g.constant(z), !cfg_.train_mapping);
  Graph::Id xg = model_.generator_g(g, w, as_constants(g, noise), false);
  Graph::Id logit = model_.discriminator_g(g, xg, w, true);
  Graph::Id loss = g.mean_all(g.softplus(logit));

  double value = g.val(loss)[0];
  if (!std::isfinite(value)) return value;
  opt_gen_.zero_grad();
  g.backward(loss);
  opt_gen_.step();
  return value;
}

double Trainer::phase3_update(const Tensor& images, int64_t step) {
  require(images.rank() == 4 && images.dim(0) >= 1, "phase3: batch must be [N>=1,C,H,W]");
  int64_t n = images.dim(0);
  RngStream zs = rng_.fork("phase3.z", step);
  RngStream bs = rng_.fork("phase3.b", step);
  Tensor z = model_.sample_z(zs, n);
  std::vector<Tensor> noise = model_.sample_noise_batch(bs, n);
  return phase3_update_with(z, noise);
}

double Trainer::phase3_update_with(const Tensor& z, const std::vector<Tensor>& noise) {
  require(z.rank() == 2 && z.dim(0) >= 1, "phase3: latent batch must be [N>=1,d_z]");
  Graph g;
  Graph::Id w = model_.map_latent_g(g, g.constant(z), true);
  Graph::Id xg = model_.generator_g(g, w, as_constants(g, noise), false);
  Graph::Id w_hat = model_.encoder_g(g, xg, false).w;
  Graph::Id diff = g.sub(w_hat, w);
  Graph::Id loss = g.mean_all(g.sum_rows(g.square(diff)));

  double value = g.val(loss)[0];
  if (!std::isfinite(value)) return value;
  opt_cycle_.zero_grad();
  g.backward(loss);
  opt_cycle_.step();
  return value;
}

double Trainer::logit_margin(const Tensor& images) {
  require(images.rank() == 4 && images.dim(0) >= 1, "logit_margin: batch must be [N>=1,C,H,W]");
  int64_t n = images.dim(0);
  RngStream zs = rng_.fork("margin.z", 0);
  RngStream bs = rng_.fork("margin.b", 0);
  Tensor z = model_.sample_z(zs, n);
  std::vector<Tensor> noise = model_.sample_noise_batch(bs, n);
  Tensor w = model_.map_latent(z);
  Tensor xg = model_.generate(w, noise);
  Tensor fake = model_.discriminate(xg, w);
  Tensor real = model_.discriminate(images, model_.encode(images));
  return fake.mean() - real.mean();
}

TrainLog train(VasaModel& model, const Tensor& images, const TrainConfig& cfg,
               const std::string& ckpt_dir) {
  cfg.validate();
  require(images.rank() == 4 && images.dim(0) >= 1, "train: dataset must be [M>=1,C,H,W]");
  require(images.dim(2) == model.config().resolution() &&
              images.dim(3) == model.config().resolution(),
          "train: dataset resolution does not match the model");

  TrainLog log;
  Trainer tr(model, cfg);
  RngStream order_rng = RngStream(cfg.seed).fork("train.order", 0);

  int64_t m = images.dim(0);
  int64_t batch = std::min<int64_t>(cfg.batch, m);
  std::vector<int64_t> order;
  int64_t pos = 0;
  int64_t epoch = 0;

  std::map<std::string, Tensor> last_good;
  export_params(model.params_all(), last_good);

  auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  for (int64_t step = 1; step <= cfg.steps; ++step) {
    if (pos + batch > m || order.empty()) {
      order = order_rng.fork("epoch", epoch++).permutation(m);
      pos = 0;
    }
    Tensor xb = gather_rows(images, order, pos, batch);
    pos += batch;

    TrainRecord rec;
    rec.step = step;
    rec.reg_event = tr.is_reg_step(step);
    rec.loss_adv = tr.phase1_update(xb, step);
    rec.loss_gen = std::isfinite(rec.loss_adv) ? tr.phase2_update(xb, step) : rec.loss_adv;
    rec.loss_cycle = std::isfinite(rec.loss_gen) ? tr.phase3_update(xb, step) : rec.loss_gen;
    rec.seconds = elapsed();

    if (!std::isfinite(rec.loss_adv) || !std::isfinite(rec.loss_gen) ||
        !std::isfinite(rec.loss_cycle)) {
      log.diverged = true;
      log.divergence_step = step;
      import_params(last_good, model.params_all());
      if (!ckpt_dir.empty()) save_model_checkpoint(model, cfg, step - 1, ckpt_dir + "/last_good");
      return log;
    }

    log.records.push_back(rec);
    last_good.clear();
    export_params(model.params_all(), last_good);
    if (!ckpt_dir.empty() && cfg.ckpt_interval > 0 && step % cfg.ckpt_interval == 0)
      save_model_checkpoint(model, cfg, step, step_dir(ckpt_dir, step));
  }

  if (!ckpt_dir.empty()) save_model_checkpoint(model, cfg, cfg.steps, ckpt_dir + "/final");
  return log;
}

}  // namespace vasa
