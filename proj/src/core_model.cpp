#include "vasa/core_model.hpp"

#include <cmath>

namespace vasa {

namespace {

constexpr double kVarEps = 1e-16;  // (1e-8)^2 under the square root
constexpr double kDemodEps = 1e-8;

}  // namespace

void NoiseMapSet::renormalize() {
  for (Tensor& m : maps) {
    double mean = m.mean();
    double var = 0.0;
    for (int64_t i = 0; i < m.numel(); ++i) {
      double d = m[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m.numel());
    double inv = 1.0 / std::sqrt(var + kVarEps);
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = (m[i] - mean) * inv;
  }
}

KvConfig ModelConfig::to_kv() const {
  KvConfig kv;
  kv.set_int("d_z", d_z);
  kv.set_int("d_w", d_w);
  kv.set_int("img_channels", img_channels);
  kv.set_int("base_res", base_res);
  kv.set_int("levels", levels);
  kv.set_int("channels", channels);
  kv.set_int("mapping_layers", mapping_layers);
  kv.set_int("disc_fc_layers", disc_fc_layers);
  kv.set_int("disc_fc_width", disc_fc_width);
  kv.set_int("disc_channels", disc_channels);
  kv.set_int("model_seed", static_cast<int64_t>(seed));
  return kv;
}

ModelConfig ModelConfig::from_kv(const KvConfig& kv) {
  ModelConfig c;
  c.d_z = kv.get_int("d_z", c.d_z);
  c.d_w = kv.get_int("d_w", c.d_w);
  c.img_channels = kv.get_int("img_channels", c.img_channels);
  c.base_res = kv.get_int("base_res", c.base_res);
  c.levels = kv.get_int("levels", c.levels);
  c.channels = kv.get_int("channels", c.channels);
  c.mapping_layers = kv.get_int("mapping_layers", c.mapping_layers);
  c.disc_fc_layers = kv.get_int("disc_fc_layers", c.disc_fc_layers);
  c.disc_fc_width = kv.get_int("disc_fc_width", c.disc_fc_width);
  c.disc_channels = kv.get_int("disc_channels", c.disc_channels);
  c.seed = static_cast<uint64_t>(kv.get_int("model_seed", static_cast<int64_t>(c.seed)));
  require(c.d_z > 0 && c.d_w > 0 && c.levels >= 1 && c.base_res >= 2, "bad model config");
  require(c.mapping_layers >= 1 && c.disc_fc_layers >= 1, "bad model config");
  return c;
}

Tensor adain(const Tensor& x, const Tensor& y_scale, const Tensor& y_bias) {
  Tensor x4 = x;
  if (x.rank() == 3) x4 = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  require(x4.rank() == 4, "adain expects CHW or NCHW");
  int64_t n = x4.dim(0), c = x4.dim(1);
  require(y_scale.numel() == c && y_bias.numel() == c, "adain style size mismatch");
  Graph g;
  Graph::Id xi = g.constant(x4);
  Tensor sc({n, c}), ba({n, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      sc.at(i, j) = y_scale[j];
      ba.at(i, j) = y_bias[j];
    }
  Graph::Id out = adain_g(g, xi, g.constant(sc), g.constant(ba));
  Tensor r = g.val(out);
  return x.rank() == 3 ? r.reshaped({x.dim(0), x.dim(1), x.dim(2)}) : r;
}

Graph::Id adain_g(Graph& g, Graph::Id x, Graph::Id y_scale, Graph::Id y_bias) {
  int64_t h = g.val(x).dim(2), w = g.val(x).dim(3);
  Graph::Id mu = g.mean_hw(x);
  Graph::Id sigma = g.std_hw(x, kVarEps);
  Graph::Id centered = g.sub(x, g.bcast_hw(mu, h, w));
  Graph::Id normed = g.scale_nc(centered, g.recip(sigma));
  return g.add(g.scale_nc(normed, y_scale), g.bcast_hw(y_bias, h, w));
}

Tensor combine_styles(const std::vector<std::pair<Tensor, Tensor>>& stats,
                      const std::vector<Tensor>& c_mats) {
  require(stats.size() == c_mats.size(), "combine_styles: level count mismatch");
  require(!stats.empty(), "combine_styles: no levels");
  Graph g;
  std::vector<Graph::Id> terms;
  for (size_t l = 0; l < stats.size(); ++l) {
    const Tensor& mu = stats[l].first;
    const Tensor& sg = stats[l].second;
    Tensor mu2 = mu.rank() == 1 ? mu.reshaped({1, mu.dim(0)}) : mu;
    Tensor sg2 = sg.rank() == 1 ? sg.reshaped({1, sg.dim(0)}) : sg;
    require(c_mats[l].rank() == 2 && c_mats[l].dim(1) == mu2.dim(1) + sg2.dim(1),
            "combine_styles: C matrix shape mismatch at level " + std::to_string(l));
    Graph::Id cat = g.concat_cols({g.constant(mu2), g.constant(sg2)});
    terms.push_back(g.linear(cat, g.constant(c_mats[l])));
  }
  Tensor out = g.val(g.add_n(terms));
  return stats[0].first.rank() == 1 ? out.reshaped({out.dim(1)}) : out;
}

VasaModel::VasaModel(const ModelConfig& cfg) : cfg_(cfg) {
  RngStream root(cfg.seed);
  RngStream fr = root.fork("F");
  RngStream gr = root.fork("G");
  RngStream er = root.fork("E");
  RngStream dr = root.fork("D");

  mapping_.reserve(cfg.mapping_layers);
  for (int64_t i = 0; i < cfg.mapping_layers; ++i) {
    int64_t in = i == 0 ? cfg.d_z : cfg.d_w;
    mapping_.emplace_back("F." + std::to_string(i), in, cfg.d_w, fr);
  }

  const int64_t C = cfg.channels;
  const_input_ = Param("G.const", gr.normal_tensor({C, cfg.base_res, cfg.base_res}));
  gen_.resize(cfg.levels);
  for (int64_t l = 0; l < cfg.levels; ++l) {
    std::string base = "G.l" + std::to_string(l);
    for (int k = 0; k < 2; ++k) {
      GenLayer& gl = gen_[l].layer[k];
      std::string lb = base + ".c" + std::to_string(k);
      gl.style = Linear(lb + ".style", cfg.d_w, C, gr);
      gl.style.b.value.fill(1.0);  // identity modulation at init
      gl.conv = Conv2d(lb, C, C, 3, gr, 1, 1, 1.0, false);
      Tensor ns({C});
      ns.fill(0.1);  // small nonzero so the noise branch is live from step one
      gl.noise_scale = Param(lb + ".noise", std::move(ns));
      gl.bias = Param(lb + ".bias", Tensor({C}));
    }
    gen_[l].to_rgb = Conv2d(base + ".rgb", C, cfg.img_channels, 1, gr, 1, 0);
  }

  enc_from_rgb_ = Conv2d("E.rgb", cfg.img_channels, C, 1, er, 1, 0);
  enc_.resize(cfg.levels);
  for (int64_t l = 0; l < cfg.levels; ++l) {
    std::string base = "E.l" + std::to_string(l);
    enc_[l].conv1 = Conv2d(base + ".c1", C, C, 3, er, 1, 1);
    enc_[l].conv2 = Conv2d(base + ".c2", C, C, 3, er, 1, 1);
    enc_[l].combine = Linear(base + ".comb", 2 * C, cfg.d_w, er, 1.0, false);
  }

  const int64_t DC = cfg.disc_channels;
  d_from_rgb_ = Conv2d("D.rgb", cfg.img_channels, DC, 1, dr, 1, 0);
  for (int64_t l = 0; l < cfg.levels; ++l)
    d_convs_.emplace_back("D.conv" + std::to_string(l), DC, DC, 3, dr, 1, 1);
  int64_t flat = DC * cfg.base_res * cfg.base_res + cfg.d_w;
  for (int64_t i = 0; i < cfg.disc_fc_layers; ++i) {
    int64_t in = i == 0 ? flat : cfg.disc_fc_width;
    int64_t out = i + 1 == cfg.disc_fc_layers ? 1 : cfg.disc_fc_width;
    // zero-init head: an untrained discriminator emits logit 0 everywhere
    double scale = i + 1 == cfg.disc_fc_layers ? 0.0 : 1.0;
    d_fc_.emplace_back("D.fc" + std::to_string(i), in, out, dr, scale);
  }
}

Graph::Id VasaModel::map_latent_g(Graph& g, Graph::Id z, bool frozen) {
  require(g.val(z).rank() == 2 && g.val(z).dim(1) == cfg_.d_z,
          "map_latent: z must be [N," + std::to_string(cfg_.d_z) + "], got " +
              shape_str(g.val(z).shape()));
  Graph::Id h = z;
  for (Linear& layer : mapping_) h = g.lrelu(layer.apply(g, h, frozen), 0.2);
  return h;
}

void VasaModel::check_noise_shapes(const std::vector<Graph::Id>& noise, Graph& g,
                                   int64_t n) const {
  require(static_cast<int64_t>(noise.size()) == cfg_.noise_count(),
          "noise map count mismatch: expected " + std::to_string(cfg_.noise_count()) + ", got " +
              std::to_string(noise.size()));
  for (size_t i = 0; i < noise.size(); ++i) {
    int64_t r = cfg_.noise_res(static_cast<int64_t>(i));
    const Tensor& v = g.val(noise[i]);
    require(v.rank() == 4 && v.dim(0) == n && v.dim(1) == 1 && v.dim(2) == r && v.dim(3) == r,
            "noise map " + std::to_string(i) + " must be [N,1," + std::to_string(r) + "," +
                std::to_string(r) + "], got " + shape_str(v.shape()));
  }
}

Graph::Id VasaModel::generator_g(Graph& g, Graph::Id w, const std::vector<Graph::Id>& noise,
                                 bool frozen) {
  require(g.val(w).rank() == 2 && g.val(w).dim(1) == cfg_.d_w,
          "generator: w must be [N," + std::to_string(cfg_.d_w) + "], got " +
              shape_str(g.val(w).shape()));
  int64_t n = g.val(w).dim(0);
  check_noise_shapes(noise, g, n);

  const int64_t C = cfg_.channels;
  Graph::Id x = g.bcast_batch(bind_param(g, const_input_, frozen), n);
  Graph::Id rgb = Graph::kNone;
  size_t ni = 0;
  for (int64_t l = 0; l < cfg_.levels; ++l) {
    if (l > 0) x = g.upsample2x(x);
    for (int k = 0; k < 2; ++k) {
      GenLayer& gl = gen_[l].layer[k];
      // Modulation scales input channels; demodulation rescales output
      // channels by the resulting per-output weight norm.
      Graph::Id s = gl.style.apply(g, w, frozen);  // [N,C]
      Graph::Id xs = g.scale_nc(x, s);
      Graph::Id y = gl.conv.apply_nobias(g, xs, frozen);
      Graph::Id wnode = bind_param(g, gl.conv.W, frozen);
      Graph::Id wsq = g.reshape(g.sum_rows(g.reshape(g.square(wnode), {C * C, 9})), {C, C});
      Graph::Id demod = g.rsqrt(g.linear(g.square(s), wsq), kDemodEps);  // [N,C]
      y = g.scale_nc(y, demod);
      Graph::Id nz = g.bcast_chan(noise[ni++], C);
      y = g.add(y, g.scale_chan(nz, bind_param(g, gl.noise_scale, frozen)));
      y = g.add_chan_bias(y, bind_param(g, gl.bias, frozen));
      x = g.lrelu(y, 0.2);
    }
    Graph::Id level_rgb = gen_[l].to_rgb.apply(g, x, frozen);
    rgb = l == 0 ? level_rgb : g.add(g.upsample2x(rgb), level_rgb);
  }
  return g.tanh_op(rgb);
}

VasaModel::EncoderOut VasaModel::encoder_g(Graph& g, Graph::Id x, bool frozen) {
  const Tensor& vx = g.val(x);
  require(vx.rank() == 4 && vx.dim(1) == cfg_.img_channels && vx.dim(2) == cfg_.resolution() &&
              vx.dim(3) == cfg_.resolution(),
          "encoder: image must be [N," + std::to_string(cfg_.img_channels) + "," +
              std::to_string(cfg_.resolution()) + "," + std::to_string(cfg_.resolution()) +
              "], got " + shape_str(vx.shape()));

  EncoderOut out;
  Graph::Id h = g.lrelu(enc_from_rgb_.apply(g, x, frozen), 0.2);
  std::vector<Graph::Id> w_terms;
  // enc_[0] consumes the finest resolution; level l emits one (mu, sigma).
  for (int64_t l = 0; l < cfg_.levels; ++l) {
    EncLevel& el = enc_[l];
    Graph::Id c1 = el.conv1.apply(g, h, frozen);
    Graph::Id mu = g.mean_hw(c1);
    Graph::Id sigma = g.std_hw(c1, kVarEps);
    int64_t r = g.val(c1).dim(2);
    Graph::Id normed = g.scale_nc(g.sub(c1, g.bcast_hw(mu, r, r)), g.recip(sigma));
    h = g.lrelu(normed, 0.2);
    h = g.lrelu(el.conv2.apply(g, h, frozen), 0.2);
    if (l + 1 < cfg_.levels) h = g.avgpool2x(h);
    out.stats.emplace_back(mu, sigma);
    w_terms.push_back(el.combine.apply(g, g.concat_cols({mu, sigma}), frozen));
  }
  out.w = g.add_n(w_terms);
  return out;
}

Graph::Id VasaModel::discriminator_g(Graph& g, Graph::Id x, Graph::Id w, bool frozen) {
  const Tensor& vx = g.val(x);
  const Tensor& vw = g.val(w);
  require(vx.rank() == 4 && vx.dim(2) == cfg_.resolution(), "discriminator: bad image shape");
  require(vw.rank() == 2 && vw.dim(1) == cfg_.d_w && vw.dim(0) == vx.dim(0),
          "discriminator: latent shape mismatch: " + shape_str(vw.shape()));
  int64_t n = vx.dim(0);
  Graph::Id h = g.lrelu(d_from_rgb_.apply(g, x, frozen), 0.2);
  for (int64_t l = 0; l < cfg_.levels; ++l) {
    h = g.lrelu(d_convs_[l].apply(g, h, frozen), 0.2);
    if (l + 1 < cfg_.levels) h = g.avgpool2x(h);
  }
  Graph::Id flat = g.reshape(h, {n, cfg_.disc_channels * cfg_.base_res * cfg_.base_res});
  Graph::Id cat = g.concat_cols({flat, w});
  Graph::Id f = cat;
  for (size_t i = 0; i < d_fc_.size(); ++i) {
    f = d_fc_[i].apply(g, f, frozen);
    if (i + 1 < d_fc_.size()) f = g.lrelu(f, 0.2);
  }
  return f;  // [N,1]
}

Tensor VasaModel::sample_z(RngStream& rng, int64_t n) const {
  return rng.normal_tensor({n, cfg_.d_z});
}

NoiseMapSet VasaModel::sample_noise(RngStream& rng) const {
  NoiseMapSet s;
  for (int64_t i = 0; i < cfg_.noise_count(); ++i) {
    int64_t r = cfg_.noise_res(i);
    s.maps.push_back(rng.normal_tensor({r, r}));
  }
  return s;
}

std::vector<Tensor> VasaModel::sample_noise_batch(RngStream& rng, int64_t n) const {
  std::vector<Tensor> out;
  for (int64_t i = 0; i < cfg_.noise_count(); ++i) {
    int64_t r = cfg_.noise_res(i);
    out.push_back(rng.normal_tensor({n, 1, r, r}));
  }
  return out;
}

std::vector<Tensor> VasaModel::zero_noise_batch(int64_t n) const {
  std::vector<Tensor> out;
  for (int64_t i = 0; i < cfg_.noise_count(); ++i) {
    int64_t r = cfg_.noise_res(i);
    out.push_back(Tensor({n, 1, r, r}));
  }
  return out;
}

std::vector<Tensor> VasaModel::stack_noise(const std::vector<NoiseMapSet>& sets) {
  require(!sets.empty(), "stack_noise: empty batch");
  size_t m = sets[0].maps.size();
  int64_t n = static_cast<int64_t>(sets.size());
  std::vector<Tensor> out;
  for (size_t i = 0; i < m; ++i) {
    int64_t r = sets[0].maps[i].dim(0);
    Tensor t({n, 1, r, r});
    for (int64_t s = 0; s < n; ++s) {
      require(sets[s].maps[i].shape() == sets[0].maps[i].shape(), "stack_noise: ragged sets");
      std::copy(sets[s].maps[i].data(), sets[s].maps[i].data() + r * r, t.data() + s * r * r);
    }
    out.push_back(std::move(t));
  }
  return out;
}

NoiseMapSet VasaModel::unstack_noise(const std::vector<Tensor>& batch, int64_t index) {
  NoiseMapSet s;
  for (const Tensor& t : batch) {
    int64_t r = t.dim(2);
    Tensor m({r, r});
    std::copy(t.data() + index * r * r, t.data() + (index + 1) * r * r, m.data());
    s.maps.push_back(std::move(m));
  }
  return s;
}

Tensor VasaModel::map_latent(const Tensor& z) {
  Tensor z2 = z.rank() == 1 ? z.reshaped({1, z.dim(0)}) : z;
  Graph g;
  Tensor out = g.val(map_latent_g(g, g.constant(z2), true));
  return z.rank() == 1 ? out.reshaped({out.dim(1)}) : out;
}

Tensor VasaModel::generate(const Tensor& w, const std::vector<Tensor>& noise) {
  Tensor w2 = w.rank() == 1 ? w.reshaped({1, w.dim(0)}) : w;
  Graph g;
  std::vector<Graph::Id> nids;
  nids.reserve(noise.size());
  for (const Tensor& t : noise) nids.push_back(g.constant(t));
  return g.val(generator_g(g, g.constant(w2), nids, true));
}

Tensor VasaModel::generate_one(const Tensor& w, const NoiseMapSet& noise) {
  std::vector<Tensor> batch;
  for (const Tensor& m : noise.maps) batch.push_back(m.reshaped({1, 1, m.dim(0), m.dim(1)}));
  Tensor w2 = w.rank() == 1 ? w.reshaped({1, w.dim(0)}) : w;
  require(w2.dim(0) == 1, "generate_one expects a single latent");
  return generate(w2, batch);
}

Tensor VasaModel::encode(const Tensor& x) {
  Graph g;
  return g.val(encoder_g(g, g.constant(x), true).w);
}

std::vector<std::pair<Tensor, Tensor>> VasaModel::encode_stats(const Tensor& x) {
  Graph g;
  EncoderOut out = encoder_g(g, g.constant(x), true);
  std::vector<std::pair<Tensor, Tensor>> stats;
  for (auto& [mu, sigma] : out.stats) stats.emplace_back(g.val(mu), g.val(sigma));
  return stats;
}

Tensor VasaModel::discriminate(const Tensor& x, const Tensor& w) {
  Graph g;
  return g.val(discriminator_g(g, g.constant(x), g.constant(w), true));
}

std::vector<Param*> VasaModel::params_mapping() {
  std::vector<Param*> out;
  for (Linear& l : mapping_) l.params(out);
  return out;
}

std::vector<Param*> VasaModel::params_generator() {
  std::vector<Param*> out;
  out.push_back(&const_input_);
  for (GenLevel& lv : gen_) {
    for (int k = 0; k < 2; ++k) {
      lv.layer[k].style.params(out);
      lv.layer[k].conv.params(out);
      out.push_back(&lv.layer[k].noise_scale);
      out.push_back(&lv.layer[k].bias);
    }
    lv.to_rgb.params(out);
  }
  return out;
}

std::vector<Param*> VasaModel::params_encoder() {
  std::vector<Param*> out;
  enc_from_rgb_.params(out);
  for (EncLevel& lv : enc_) {
    lv.conv1.params(out);
    lv.conv2.params(out);
    lv.combine.params(out);
  }
  return out;
}

std::vector<Param*> VasaModel::params_discriminator() {
  std::vector<Param*> out;
  d_from_rgb_.params(out);
  for (Conv2d& c : d_convs_) c.params(out);
  for (Linear& l : d_fc_) l.params(out);
  return out;
}

std::vector<Param*> VasaModel::params_all() {
  std::vector<Param*> out = params_mapping();
  for (Param* p : params_generator()) out.push_back(p);
  for (Param* p : params_encoder()) out.push_back(p);
  for (Param* p : params_discriminator()) out.push_back(p);
  return out;
}

void VasaModel::save(Checkpoint& ck) {
  ck.config.merge(cfg_.to_kv());
  export_params(params_all(), ck.tensors);
}

VasaModel VasaModel::load(const Checkpoint& ck) {
  VasaModel m(ModelConfig::from_kv(ck.config));
  import_params(ck.tensors, m.params_all());
  return m;
}

}  // namespace vasa
