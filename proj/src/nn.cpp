#include "vasa/nn.hpp"

#include <cmath>

namespace vasa {

Tensor he_normal(RngStream& rng, Shape shape, int64_t fan_in, double scale) {
  double stddev = scale * std::sqrt(2.0 / static_cast<double>(fan_in));
  if (scale == 0.0) return Tensor(std::move(shape));
  return rng.normal_tensor(std::move(shape), 0.0, stddev);
}

Linear::Linear(const std::string& name, int64_t in, int64_t out, RngStream& rng,
               double init_scale, bool with_bias)
    : W(name + ".W", he_normal(rng, {out, in}, in, init_scale)),
      b(name + ".b", Tensor({out})),
      bias(with_bias) {}

Conv2d::Conv2d(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t k, RngStream& rng,
               int stride_, int pad_, double init_scale, bool with_bias)
    : W(name + ".W", he_normal(rng, {out_ch, in_ch, k, k}, in_ch * k * k, init_scale)),
      b(name + ".b", Tensor({out_ch})),
      bias(with_bias),
      stride(stride_),
      pad(pad_) {}

Adam::Adam(std::vector<Param*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Param* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    p.ensure_grad();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (int64_t k = 0; k < p.value.numel(); ++k) {
      double g = p.grad[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
      double mh = m[k] / c1;
      double vh = v[k] / c2;
      p.value[k] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

void Adam::export_state(std::map<std::string, Tensor>& out, const std::string& prefix) const {
  out[prefix + ".t"] = Tensor::scalar(static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    out[prefix + ".m." + params_[i]->name] = m_[i];
    out[prefix + ".v." + params_[i]->name] = v_[i];
  }
}

void Adam::import_state(const std::map<std::string, Tensor>& in, const std::string& prefix) {
  auto it = in.find(prefix + ".t");
  require(it != in.end(), "optimizer state missing: " + prefix + ".t");
  t_ = static_cast<int64_t>(it->second[0]);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto mi = in.find(prefix + ".m." + params_[i]->name);
    auto vi = in.find(prefix + ".v." + params_[i]->name);
    require(mi != in.end() && vi != in.end(), "optimizer state missing for " + params_[i]->name);
    require(mi->second.same_shape(m_[i]) && vi->second.same_shape(v_[i]),
            "optimizer state shape mismatch for " + params_[i]->name);
    m_[i] = mi->second;
    v_[i] = vi->second;
  }
}

SgdMomentum::SgdMomentum(std::vector<Param*> params, double lr, double momentum,
                         double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  vel_.reserve(params_.size());
  for (Param* p : params_) vel_.emplace_back(p->value.shape());
}

void SgdMomentum::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

void SgdMomentum::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    p.ensure_grad();
    Tensor& v = vel_[i];
    for (int64_t k = 0; k < p.value.numel(); ++k) {
      double g = p.grad[k] + weight_decay_ * p.value[k];
      v[k] = momentum_ * v[k] + g;
      p.value[k] -= lr_ * v[k];
    }
  }
}

void export_params(const std::vector<Param*>& params, std::map<std::string, Tensor>& out) {
  for (const Param* p : params) {
    require(out.count(p->name) == 0, "duplicate parameter name: " + p->name);
    out[p->name] = p->value;
  }
}

void import_params(const std::map<std::string, Tensor>& in, const std::vector<Param*>& params) {
  for (Param* p : params) {
    auto it = in.find(p->name);
    require(it != in.end(), "checkpoint missing parameter: " + p->name);
    require(it->second.same_shape(p->value), "checkpoint shape mismatch for " + p->name +
                                                 ": " + shape_str(it->second.shape()) + " vs " +
                                                 shape_str(p->value.shape()));
    p->value = it->second;
  }
}

double grad_norm(const std::vector<Param*>& params) {
  double s = 0.0;
  for (Param* p : params) {
    if (p->grad.same_shape(p->value)) s += p->grad.norm2();
  }
  return std::sqrt(s);
}

}  // namespace vasa
