#pragma once

#include <map>
#include <string>
#include <vector>

#include "vasa/graph.hpp"
#include "vasa/rng.hpp"

namespace vasa {

// He-style fan-in init; scale 0 gives an exactly-zero layer.
Tensor he_normal(RngStream& rng, Shape shape, int64_t fan_in, double scale = 1.0);

// Binds a parameter either trainably or as a frozen constant; frozen layers
// still pass gradients through to their inputs.
inline Graph::Id bind_param(Graph& g, Param& p, bool frozen) {
  return frozen ? g.constant(p.value) : g.param(p);
}

struct Linear {
  Param W, b;
  bool bias = true;

  Linear() = default;
  Linear(const std::string& name, int64_t in, int64_t out, RngStream& rng, double init_scale = 1.0,
         bool with_bias = true);

  Graph::Id apply(Graph& g, Graph::Id x, bool frozen = false) {
    return g.linear(x, bind_param(g, W, frozen), bias ? bind_param(g, b, frozen) : Graph::kNone);
  }
  void params(std::vector<Param*>& out) {
    out.push_back(&W);
    if (bias) out.push_back(&b);
  }
};

struct Conv2d {
  Param W, b;
  bool bias = true;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t k, RngStream& rng,
         int stride = 1, int pad = 0, double init_scale = 1.0, bool with_bias = true);

  Graph::Id apply(Graph& g, Graph::Id x, bool frozen = false) {
    return g.conv2d(x, bind_param(g, W, frozen), bias ? bind_param(g, b, frozen) : Graph::kNone,
                    stride, pad);
  }
  // Convolution only; the bias is applied by the caller (modulated conv adds
  // it after the demodulation rescale).
  Graph::Id apply_nobias(Graph& g, Graph::Id x, bool frozen = false) {
    return g.conv2d(x, bind_param(g, W, frozen), Graph::kNone, stride, pad);
  }
  void params(std::vector<Param*>& out) {
    out.push_back(&W);
    if (bias) out.push_back(&b);
  }
};

class Adam {
 public:
  Adam(std::vector<Param*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void zero_grad();
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t steps() const { return t_; }

  void export_state(std::map<std::string, Tensor>& out, const std::string& prefix) const;
  void import_state(const std::map<std::string, Tensor>& in, const std::string& prefix);

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

class SgdMomentum {
 public:
  SgdMomentum(std::vector<Param*> params, double lr, double momentum = 0.9,
              double weight_decay = 0.0);

  void zero_grad();
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> vel_;
  double lr_, momentum_, weight_decay_;
};

// Name-addressed parameter IO against a checkpoint tensor table.
void export_params(const std::vector<Param*>& params, std::map<std::string, Tensor>& out);
void import_params(const std::map<std::string, Tensor>& in, const std::vector<Param*>& params);

double grad_norm(const std::vector<Param*>& params);

}  // namespace vasa
