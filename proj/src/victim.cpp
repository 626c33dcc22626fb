#include "vasa/victim.hpp"

#include <algorithm>
#include <numeric>

namespace vasa {

void VictimConfig::validate() const {
  require(classes >= 2, "victim: need at least two classes");
  require(res >= 8 && res % 4 == 0, "victim: resolution must be >= 8 and divisible by 4");
  require(conv1 >= 1 && conv2 >= 1 && fc_width >= 1, "victim: layer widths must be positive");
  require(epochs >= 0, "victim: epochs must be non-negative");
  require(batch >= 1, "victim: batch size must be positive");
  require(lr > 0.0, "victim: learning rate must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "victim: momentum must be in [0,1)");
  require(weight_decay >= 0.0, "victim: weight decay must be non-negative");
}

KvConfig VictimConfig::to_kv() const {
  KvConfig kv;
  kv.set_int("victim_classes", classes);
  kv.set_int("victim_res", res);
  kv.set_int("victim_conv1", conv1);
  kv.set_int("victim_conv2", conv2);
  kv.set_int("victim_fc_width", fc_width);
  kv.set_int("victim_epochs", epochs);
  kv.set_int("victim_batch", batch);
  kv.set_double("victim_lr", lr);
  kv.set_double("victim_momentum", momentum);
  kv.set_double("victim_weight_decay", weight_decay);
  kv.set_int("victim_seed", static_cast<int64_t>(seed));
  return kv;
}

VictimConfig VictimConfig::from_kv(const KvConfig& kv) {
  VictimConfig c;
  c.classes = kv.get_int("victim_classes", c.classes);
  c.res = kv.get_int("victim_res", c.res);
  c.conv1 = kv.get_int("victim_conv1", c.conv1);
  c.conv2 = kv.get_int("victim_conv2", c.conv2);
  c.fc_width = kv.get_int("victim_fc_width", c.fc_width);
  c.epochs = kv.get_int("victim_epochs", c.epochs);
  c.batch = kv.get_int("victim_batch", c.batch);
  c.lr = kv.get_double("victim_lr", c.lr);
  c.momentum = kv.get_double("victim_momentum", c.momentum);
  c.weight_decay = kv.get_double("victim_weight_decay", c.weight_decay);
  c.seed = static_cast<uint64_t>(kv.get_int("victim_seed", static_cast<int64_t>(c.seed)));
  c.validate();
  return c;
}

VictimConfig VictimConfig::paper_preset() {
  VictimConfig c;
  c.conv1 = 32;
  c.conv2 = 64;
  c.fc_width = 200;
  c.epochs = 50;
  c.batch = 128;
  c.lr = 0.1;
  return c;
}

VictimNet::VictimNet(const VictimConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  RngStream rng(cfg_.seed);
  c1a_ = Conv2d("victim.c1a", 1, cfg_.conv1, 3, rng, 1, 1);
  c1b_ = Conv2d("victim.c1b", cfg_.conv1, cfg_.conv1, 3, rng, 1, 1);
  c2a_ = Conv2d("victim.c2a", cfg_.conv1, cfg_.conv2, 3, rng, 1, 1);
  c2b_ = Conv2d("victim.c2b", cfg_.conv2, cfg_.conv2, 3, rng, 1, 1);
  int64_t flat = cfg_.conv2 * (cfg_.res / 4) * (cfg_.res / 4);
  f1_ = Linear("victim.f1", flat, cfg_.fc_width, rng);
  f2_ = Linear("victim.f2", cfg_.fc_width, cfg_.fc_width, rng);
  head_ = Linear("victim.head", cfg_.fc_width, cfg_.classes, rng);
}

Graph::Id VictimNet::logits_g(Graph& g, Graph::Id x, bool frozen) {
  const Tensor& xv = g.val(x);
  require(xv.rank() == 4 && xv.dim(1) == 1 && xv.dim(2) == cfg_.res && xv.dim(3) == cfg_.res,
          "victim input must be [N,1,res,res]");
  int64_t n = xv.dim(0);

  Graph::Id h = g.relu(c1a_.apply(g, x, frozen));
  h = g.relu(c1b_.apply(g, h, frozen));
  h = g.maxpool2x(h);
  h = g.relu(c2a_.apply(g, h, frozen));
  h = g.relu(c2b_.apply(g, h, frozen));
  h = g.maxpool2x(h);
  h = g.reshape(h, {n, cfg_.conv2 * (cfg_.res / 4) * (cfg_.res / 4)});
  h = g.relu(f1_.apply(g, h, frozen));
  h = g.relu(f2_.apply(g, h, frozen));
  return head_.apply(g, h, frozen);
}

Tensor VictimNet::logits(const Tensor& x) {
  Tensor x4 = x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
  require(x4.rank() == 4, "victim expects an image or an image batch");
  int64_t n = x4.dim(0);
  Tensor out({n, cfg_.classes});
  int64_t pix = x4.dim(1) * x4.dim(2) * x4.dim(3);
  const int64_t chunk = 64;
  for (int64_t done = 0; done < n; done += chunk) {
    int64_t b = std::min(chunk, n - done);
    Tensor xb({b, x4.dim(1), x4.dim(2), x4.dim(3)});
    std::copy(x4.data() + done * pix, x4.data() + (done + b) * pix, xb.data());
    Graph g;
    Graph::Id z = logits_g(g, g.constant(std::move(xb)), true);
    const Tensor& zv = g.val(z);
    std::copy(zv.data(), zv.data() + b * cfg_.classes, out.data() + done * cfg_.classes);
  }
  return out;
}

std::vector<int64_t> VictimNet::predict(const Tensor& x) {
  Tensor z = logits(x);
  std::vector<int64_t> out(z.dim(0));
  for (int64_t i = 0; i < z.dim(0); ++i) {
    int64_t best = 0;
    for (int64_t k = 1; k < cfg_.classes; ++k)
      if (z.at(i, k) > z.at(i, best)) best = k;
    out[i] = best;
  }
  return out;
}

double VictimNet::accuracy(const LabeledImageSet& set) {
  set.validate();
  std::vector<int64_t> pred = predict(set.images);
  int64_t hits = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == set.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::vector<Param*> VictimNet::params() {
  std::vector<Param*> out;
  c1a_.params(out);
  c1b_.params(out);
  c2a_.params(out);
  c2b_.params(out);
  f1_.params(out);
  f2_.params(out);
  head_.params(out);
  return out;
}

void VictimNet::save(Checkpoint& ck) {
  ck.config.merge(cfg_.to_kv());
  ck.meta["kind"] = "victim-classifier";
  export_params(params(), ck.tensors);
}

VictimNet VictimNet::load(const Checkpoint& ck) {
  require(ck.meta.value("kind", "") == "victim-classifier", "not a victim classifier checkpoint");
  VictimNet net(VictimConfig::from_kv(ck.config));
  import_params(ck.tensors, net.params());
  return net;
}

VictimTrainLog train_victim(VictimNet& net, const LabeledImageSet& train,
                            const LabeledImageSet& test) {
  const VictimConfig& cfg = net.config();
  train.validate();
  test.validate();
  require(train.images.dim(2) == cfg.res && train.images.dim(3) == cfg.res,
          "training images do not match the victim resolution");
  for (int64_t l : train.labels) require(l < cfg.classes, "label outside the class range");

  int64_t n = train.size();
  int64_t pix = cfg.res * cfg.res;
  SgdMomentum opt(net.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
  RngStream rng(cfg.seed);

  VictimTrainLog log;
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream sr = rng.fork("victim.shuffle", epoch);
    for (int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[sr.uniform_int(i + 1)]);

    double loss_sum = 0.0;
    for (int64_t done = 0; done < n; done += cfg.batch) {
      int64_t b = std::min(cfg.batch, n - done);
      Tensor xb({b, 1, cfg.res, cfg.res});
      std::vector<int64_t> yb(b);
      for (int64_t i = 0; i < b; ++i) {
        int64_t src = order[done + i];
        std::copy(train.images.data() + src * pix, train.images.data() + (src + 1) * pix,
                  xb.data() + i * pix);
        yb[i] = train.labels[src];
      }
      Graph g;
      Graph::Id z = net.logits_g(g, g.constant(std::move(xb)), false);
      Graph::Id loss = g.neg(g.mean_all(g.pick_cols(g.log_softmax_rows(z), yb)));
      opt.zero_grad();
      g.backward(loss);
      opt.step();
      loss_sum += g.val(loss)[0] * static_cast<double>(b);
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(n));
  }

  log.train_accuracy = net.accuracy(train);
  log.test_accuracy = net.accuracy(test);
  log.warning_low_accuracy = log.test_accuracy < 0.9;
  return log;
}

}  // namespace vasa
