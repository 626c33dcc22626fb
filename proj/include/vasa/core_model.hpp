#pragma once

#include <utility>
#include <vector>

#include "vasa/config.hpp"
#include "vasa/nn.hpp"
#include "vasa/serialize.hpp"

namespace vasa {

// Provenance of a latent code as it moves through the pipeline.
enum class WKind { Mapped, Encoded, FineTuned, Shifted };

struct LatentW {
  Tensor w;  // [d_w]
  WKind kind = WKind::Mapped;
};

// Per-sample noise inputs, one map per conv layer, resolution doubling per
// level (two maps at each of 4, 8, 16, 32 for the desk ladder).
struct NoiseMapSet {
  std::vector<Tensor> maps;  // each [r,r]

  // Rescale every map to mean 0 / variance 1 (population variance).
  void renormalize();
};

struct ModelConfig {
  int64_t d_z = 64;
  int64_t d_w = 64;
  int64_t img_channels = 1;
  int64_t base_res = 4;
  int64_t levels = 4;
  int64_t channels = 64;
  int64_t mapping_layers = 8;
  int64_t disc_fc_layers = 3;
  int64_t disc_fc_width = 256;
  int64_t disc_channels = 64;
  uint64_t seed = 1;

  int64_t resolution() const { return base_res << (levels - 1); }
  int64_t level_res(int64_t l) const { return base_res << l; }
  int64_t noise_count() const { return 2 * levels; }
  int64_t noise_res(int64_t idx) const { return level_res(idx / 2); }

  KvConfig to_kv() const;
  static ModelConfig from_kv(const KvConfig& kv);
};

// Classic per-channel re-stylization: y_sc * (x - mu)/sqrt(var + 1e-16) + y_ba.
// The squared epsilon keeps the zero-variance denominator at exactly 1e-8
// while leaving moments of ordinary channels accurate to ~1e-12 relative.
Tensor adain(const Tensor& x, const Tensor& y_scale, const Tensor& y_bias);
Graph::Id adain_g(Graph& g, Graph::Id x, Graph::Id y_scale, Graph::Id y_bias);

// Linear combination of per-level instance statistics:
// w = sum_l C_l [mu_l; sigma_l].
Tensor combine_styles(const std::vector<std::pair<Tensor, Tensor>>& stats,
                      const std::vector<Tensor>& c_mats);

class VasaModel {
 public:
  explicit VasaModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  // ---- graph builders (batched; w is [N,d_w], images are NCHW) ----
  Graph::Id map_latent_g(Graph& g, Graph::Id z, bool frozen = false);
  Graph::Id generator_g(Graph& g, Graph::Id w, const std::vector<Graph::Id>& noise,
                        bool frozen = false);
  struct EncoderOut {
    Graph::Id w = Graph::kNone;
    std::vector<std::pair<Graph::Id, Graph::Id>> stats;  // per level ([N,C],[N,C])
  };
  EncoderOut encoder_g(Graph& g, Graph::Id x, bool frozen = false);
  Graph::Id discriminator_g(Graph& g, Graph::Id x, Graph::Id w, bool frozen = false);

  // ---- eager conveniences ----
  Tensor sample_z(RngStream& rng, int64_t n) const;
  NoiseMapSet sample_noise(RngStream& rng) const;
  std::vector<Tensor> sample_noise_batch(RngStream& rng, int64_t n) const;  // [N,1,r,r] each
  std::vector<Tensor> zero_noise_batch(int64_t n) const;
  // Stacks per-sample sets into [N,1,r,r] batch tensors.
  static std::vector<Tensor> stack_noise(const std::vector<NoiseMapSet>& sets);
  static NoiseMapSet unstack_noise(const std::vector<Tensor>& batch, int64_t index);

  Tensor map_latent(const Tensor& z);                 // [N,d_z] or [d_z]
  Tensor generate(const Tensor& w, const std::vector<Tensor>& noise);
  Tensor generate_one(const Tensor& w, const NoiseMapSet& noise);
  Tensor encode(const Tensor& x);                     // [N,C,H,W] -> [N,d_w]
  std::vector<std::pair<Tensor, Tensor>> encode_stats(const Tensor& x);
  Tensor discriminate(const Tensor& x, const Tensor& w);  // -> [N,1]

  // ---- parameter groups (phase freezing works on these) ----
  std::vector<Param*> params_mapping();
  std::vector<Param*> params_generator();
  std::vector<Param*> params_encoder();
  std::vector<Param*> params_discriminator();
  std::vector<Param*> params_all();

  void save(Checkpoint& ck);
  static VasaModel load(const Checkpoint& ck);

 private:
  void check_noise_shapes(const std::vector<Graph::Id>& noise, Graph& g, int64_t n) const;

  ModelConfig cfg_;

  std::vector<Linear> mapping_;

  struct GenLayer {
    Linear style;       // d_w -> C, bias initialized to 1
    Conv2d conv;        // 3x3, no own bias
    Param noise_scale;  // [C]
    Param bias;         // [C]
  };
  struct GenLevel {
    GenLayer layer[2];
    Conv2d to_rgb;  // 1x1
  };
  Param const_input_;  // [C, base, base]
  std::vector<GenLevel> gen_;

  Conv2d enc_from_rgb_;  // 1x1
  struct EncLevel {
    Conv2d conv1;    // stats extracted after this conv
    Conv2d conv2;
    Linear combine;  // [d_w, 2C], no bias
  };
  std::vector<EncLevel> enc_;

  Conv2d d_from_rgb_;
  std::vector<Conv2d> d_convs_;
  std::vector<Linear> d_fc_;
};

}  // namespace vasa
