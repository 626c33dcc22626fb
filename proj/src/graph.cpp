#include "vasa/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <memory>

namespace vasa {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

int64_t conv_out(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Scatter/gather between an image plane and the [C*kh*kw, Ho*Wo] column view.
void im2col(const double* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, double* col) {
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        double* row = col + ((ci * kh + ky) * kw + kx) * (ho * wo);
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            for (int64_t ox = 0; ox < wo; ++ox) row[oy * wo + ox] = 0.0;
            continue;
          }
          const double* xrow = x + (ci * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride + kx - pad;
            row[oy * wo + ox] = (ix < 0 || ix >= w) ? 0.0 : xrow[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t ho, int64_t wo, double* x) {
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        const double* row = col + ((ci * kh + ky) * kw + kx) * (ho * wo);
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          double* xrow = x + (ci * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) xrow[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Graph::Id Graph::make(Tensor value, const std::vector<Id>& parents,
                      std::function<void(Graph&, Id)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = any_needs_grad(parents);
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

bool Graph::any_needs_grad(const std::vector<Id>& ids) const {
  for (Id i : ids) {
    if (i != kNone && nodes_[i].needs_grad) return true;
  }
  return false;
}

Tensor& Graph::gbuf(Id id) {
  Node& n = nodes_[id];
  if (!n.grad.same_shape(n.value)) n.grad = Tensor(n.value.shape());
  return n.grad;
}

const Tensor& Graph::grad(Id id) { return gbuf(id); }

Graph::Id Graph::constant(Tensor v) {
  Node n;
  n.value = std::move(v);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Graph::Id Graph::input(Tensor v) {
  Node n;
  n.value = std::move(v);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Graph::Id Graph::param(Param& p) {
  Node n;
  n.value = p.value;
  n.needs_grad = true;
  n.bound = &p;
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

void Graph::backward(Id root) {
  require(!ran_backward_, "backward already ran on this tape");
  require(nodes_[root].value.numel() == 1, "backward root must be scalar");
  ran_backward_ = true;
  gbuf(root)[0] = 1.0;
  for (Id id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.back) n.back(*this, id);
    if (n.bound) {
      n.bound->ensure_grad();
      n.bound->grad.add_(n.grad);
    }
  }
}

void Graph::clear() {
  nodes_.clear();
  ran_backward_ = false;
}

// ---------------- elementwise ----------------

Graph::Id Graph::add(Id a, Id b) {
  require(nodes_[a].value.same_shape(nodes_[b].value), "add shape mismatch");
  Tensor out = nodes_[a].value;
  out.add_(nodes_[b].value);
  return make(std::move(out), {a, b}, [a, b](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) g.gbuf(a).add_(go);
    if (g.nodes_[b].needs_grad) g.gbuf(b).add_(go);
  });
}

Graph::Id Graph::sub(Id a, Id b) {
  require(nodes_[a].value.same_shape(nodes_[b].value), "sub shape mismatch");
  Tensor out = nodes_[a].value;
  out.sub_(nodes_[b].value);
  return make(std::move(out), {a, b}, [a, b](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[a].needs_grad) g.gbuf(a).add_(go);
    if (g.nodes_[b].needs_grad) g.gbuf(b).axpy_(-1.0, go);
  });
}

Graph::Id Graph::mul(Id a, Id b) {
  require(nodes_[a].value.same_shape(nodes_[b].value), "mul shape mismatch");
  const Tensor& va = nodes_[a].value;
  const Tensor& vb = nodes_[b].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] * vb[i];
  return make(std::move(out), {a, b}, [a, b](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[a].value;
    const Tensor& vb = g.nodes_[b].value;
    if (g.nodes_[a].needs_grad) {
      Tensor& ga = g.gbuf(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vb[i];
    }
    if (g.nodes_[b].needs_grad) {
      Tensor& gb = g.gbuf(b);
      for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * va[i];
    }
  });
}

Graph::Id Graph::div(Id a, Id b) {
  require(nodes_[a].value.same_shape(nodes_[b].value), "div shape mismatch");
  const Tensor& va = nodes_[a].value;
  const Tensor& vb = nodes_[b].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] / vb[i];
  return make(std::move(out), {a, b}, [a, b](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[a].value;
    const Tensor& vb = g.nodes_[b].value;
    if (g.nodes_[a].needs_grad) {
      Tensor& ga = g.gbuf(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / vb[i];
    }
    if (g.nodes_[b].needs_grad) {
      Tensor& gb = g.gbuf(b);
      for (int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i] * va[i] / (vb[i] * vb[i]);
    }
  });
}

Graph::Id Graph::recip(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / va[i];
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vo = g.nodes_[self].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] -= go[i] * vo[i] * vo[i];
  });
}

Graph::Id Graph::add_scalar(Id a, double s) {
  Tensor out = nodes_[a].value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
  return make(std::move(out), {a},
              [a](Graph& g, Id self) { g.gbuf(a).add_(g.nodes_[self].grad); });
}

Graph::Id Graph::mul_scalar(Id a, double s) {
  Tensor out = nodes_[a].value;
  out.scale_(s);
  return make(std::move(out), {a},
              [a, s](Graph& g, Id self) { g.gbuf(a).axpy_(s, g.nodes_[self].grad); });
}

Graph::Id Graph::relu(Id a) { return lrelu(a, 0.0); }

Graph::Id Graph::lrelu(Id a, double slope) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] > 0.0 ? va[i] : slope * va[i];
  return make(std::move(out), {a}, [a, slope](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[a].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * (va[i] > 0.0 ? 1.0 : slope);
  });
}

Graph::Id Graph::tanh_op(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(va[i]);
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vo = g.nodes_[self].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * (1.0 - vo[i] * vo[i]);
  });
}

Graph::Id Graph::sigmoid(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(va[i]);
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vo = g.nodes_[self].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vo[i] * (1.0 - vo[i]);
  });
}

Graph::Id Graph::softplus(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double x = va[i];
    out[i] = (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[a].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * stable_sigmoid(va[i]);
  });
}

Graph::Id Graph::exp_op(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(va[i]);
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vo = g.nodes_[self].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vo[i];
  });
}

Graph::Id Graph::log_op(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(va[i]);
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[a].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / va[i];
  });
}

Graph::Id Graph::sqrt_op(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(va[i]);
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vo = g.nodes_[self].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * 0.5 / vo[i];
  });
}

Graph::Id Graph::rsqrt(Id a, double eps) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / std::sqrt(va[i] + eps);
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vo = g.nodes_[self].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] -= go[i] * 0.5 * vo[i] * vo[i] * vo[i];
  });
}

Graph::Id Graph::square(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] * va[i];
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[a].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * 2.0 * va[i];
  });
}

Graph::Id Graph::abs_op(Id a) {
  const Tensor& va = nodes_[a].value;
  Tensor out(va.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(va[i]);
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[a].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i)
      ga[i] += go[i] * (va[i] > 0.0 ? 1.0 : (va[i] < 0.0 ? -1.0 : 0.0));
  });
}

// ---------------- shape ----------------

Graph::Id Graph::reshape(Id a, Shape s) {
  Tensor out = nodes_[a].value.reshaped(std::move(s));
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
  });
}

Graph::Id Graph::concat_cols(const std::vector<Id>& xs) {
  require(!xs.empty(), "concat_cols needs inputs");
  int64_t n = nodes_[xs[0]].value.dim(0);
  int64_t ktot = 0;
  for (Id x : xs) {
    require(nodes_[x].value.rank() == 2 && nodes_[x].value.dim(0) == n,
            "concat_cols expects [N,K] with equal N");
    ktot += nodes_[x].value.dim(1);
  }
  Tensor out({n, ktot});
  int64_t off = 0;
  for (Id x : xs) {
    const Tensor& v = nodes_[x].value;
    int64_t k = v.dim(1);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < k; ++j) out.at(i, off + j) = v.at(i, j);
    off += k;
  }
  std::vector<Id> parents = xs;
  return make(std::move(out), parents, [xs](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    int64_t n = go.dim(0);
    int64_t off = 0;
    for (Id x : xs) {
      int64_t k = g.nodes_[x].value.dim(1);
      if (g.nodes_[x].needs_grad) {
        Tensor& gx = g.gbuf(x);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < k; ++j) gx.at(i, j) += go.at(i, off + j);
      }
      off += k;
    }
  });
}

Graph::Id Graph::bcast_hw(Id s, int64_t h, int64_t w) {
  const Tensor& vs = nodes_[s].value;
  require(vs.rank() == 2, "bcast_hw expects [N,C]");
  int64_t n = vs.dim(0), c = vs.dim(1);
  Tensor out({n, c, h, w});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double v = vs.at(i, j);
      double* p = out.data() + (i * c + j) * h * w;
      for (int64_t k = 0; k < h * w; ++k) p[k] = v;
    }
  return make(std::move(out), {s}, [s, h, w](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gs = g.gbuf(s);
    int64_t n = gs.dim(0), c = gs.dim(1);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) {
        const double* p = go.data() + (i * c + j) * h * w;
        double acc = 0.0;
        for (int64_t k = 0; k < h * w; ++k) acc += p[k];
        gs.at(i, j) += acc;
      }
  });
}

// ---------------- reductions ----------------

Graph::Id Graph::add_n(const std::vector<Id>& xs) {
  require(!xs.empty(), "add_n needs inputs");
  Tensor out = nodes_[xs[0]].value;
  for (size_t i = 1; i < xs.size(); ++i) {
    require(nodes_[xs[i]].value.same_shape(out), "add_n shape mismatch");
    out.add_(nodes_[xs[i]].value);
  }
  return make(std::move(out), xs, [xs](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    for (Id x : xs) {
      if (g.nodes_[x].needs_grad) g.gbuf(x).add_(go);
    }
  });
}

Graph::Id Graph::sum_all(Id a) {
  Tensor out = Tensor::scalar(nodes_[a].value.sum());
  return make(std::move(out), {a}, [a](Graph& g, Id self) {
    double go = g.nodes_[self].grad[0];
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
  });
}

Graph::Id Graph::mean_all(Id a) {
  int64_t n = nodes_[a].value.numel();
  Tensor out = Tensor::scalar(nodes_[a].value.sum() / static_cast<double>(n));
  return make(std::move(out), {a}, [a, n](Graph& g, Id self) {
    double go = g.nodes_[self].grad[0] / static_cast<double>(n);
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
  });
}

Graph::Id Graph::sum_rows(Id a) {
  const Tensor& va = nodes_[a].value;
  require(va.rank() == 2, "sum_rows expects [N,K]");
  int64_t n = va.dim(0), k = va.dim(1);
  Tensor out({n});
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < k; ++j) acc += va.at(i, j);
    out[i] = acc;
  }
  return make(std::move(out), {a}, [a, k](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.gbuf(a);
    int64_t n = go.numel();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < k; ++j) ga.at(i, j) += go[i];
  });
}

Graph::Id Graph::mean_rows(Id a) {
  Id s = sum_rows(a);
  return mul_scalar(s, 1.0 / static_cast<double>(nodes_[a].value.dim(1)));
}

Graph::Id Graph::row_max(Id a) {
  return row_max_excluding(a, std::vector<int64_t>(nodes_[a].value.dim(0), -1));
}

Graph::Id Graph::row_max_excluding(Id a, const std::vector<int64_t>& excl) {
  const Tensor& va = nodes_[a].value;
  require(va.rank() == 2, "row_max expects [N,K]");
  int64_t n = va.dim(0), k = va.dim(1);
  require(static_cast<int64_t>(excl.size()) == n, "row_max_excluding index count");
  Tensor out({n});
  auto argmax = std::make_shared<std::vector<int64_t>>(n);
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = -1;
    double bv = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      if (j == excl[i]) continue;
      double v = va.at(i, j);
      if (best < 0 || v > bv) {
        best = j;
        bv = v;
      }
    }
    require(best >= 0, "row_max_excluding left no columns");
    out[i] = bv;
    (*argmax)[i] = best;
  }
  return make(std::move(out), {a}, [a, argmax](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga.at(i, (*argmax)[i]) += go[i];
  });
}

Graph::Id Graph::pick_cols(Id a, const std::vector<int64_t>& idx) {
  const Tensor& va = nodes_[a].value;
  require(va.rank() == 2, "pick_cols expects [N,K]");
  int64_t n = va.dim(0);
  require(static_cast<int64_t>(idx.size()) == n, "pick_cols index count");
  Tensor out({n});
  for (int64_t i = 0; i < n; ++i) out[i] = va.at(i, idx[i]);
  auto keep = std::make_shared<std::vector<int64_t>>(idx);
  return make(std::move(out), {a}, [a, keep](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga.at(i, (*keep)[i]) += go[i];
  });
}

Graph::Id Graph::mean_hw(Id a) {
  const Tensor& va = nodes_[a].value;
  require(va.rank() == 4, "mean_hw expects NCHW");
  int64_t n = va.dim(0), c = va.dim(1), hw = va.dim(2) * va.dim(3);
  Tensor out({n, c});
  for (int64_t i = 0; i < n * c; ++i) {
    const double* p = va.data() + i * hw;
    double acc = 0.0;
    for (int64_t k = 0; k < hw; ++k) acc += p[k];
    out[i] = acc / static_cast<double>(hw);
  }
  return make(std::move(out), {a}, [a, hw](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) {
      double v = go[i] / static_cast<double>(hw);
      double* p = ga.data() + i * hw;
      for (int64_t k = 0; k < hw; ++k) p[k] += v;
    }
  });
}

Graph::Id Graph::std_hw(Id a, double var_eps) {
  const Tensor& va = nodes_[a].value;
  require(va.rank() == 4, "std_hw expects NCHW");
  int64_t n = va.dim(0), c = va.dim(1), hw = va.dim(2) * va.dim(3);
  Tensor out({n, c});
  Tensor mu({n, c});
  for (int64_t i = 0; i < n * c; ++i) {
    const double* p = va.data() + i * hw;
    double m = 0.0;
    for (int64_t k = 0; k < hw; ++k) m += p[k];
    m /= static_cast<double>(hw);
    double v = 0.0;
    for (int64_t k = 0; k < hw; ++k) {
      double d = p[k] - m;
      v += d * d;
    }
    v /= static_cast<double>(hw);
    mu[i] = m;
    out[i] = std::sqrt(v + var_eps);
  }
  auto mu_keep = std::make_shared<Tensor>(std::move(mu));
  return make(std::move(out), {a}, [a, hw, mu_keep](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vo = g.nodes_[self].value;
    const Tensor& va = g.nodes_[a].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < go.numel(); ++i) {
      double scale = go[i] / (static_cast<double>(hw) * vo[i]);
      double m = (*mu_keep)[i];
      const double* p = va.data() + i * hw;
      double* q = ga.data() + i * hw;
      for (int64_t k = 0; k < hw; ++k) q[k] += scale * (p[k] - m);
    }
  });
}

// ---------------- linear algebra ----------------

Graph::Id Graph::matmul(Id a, Id b) {
  const Tensor& va = nodes_[a].value;
  const Tensor& vb = nodes_[b].value;
  require(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0), "matmul shape mismatch");
  int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor out({m, n});
  CMapMat B(vb.data(), k, n);
  // Row-at-a-time keeps each output row's reduction order independent of M.
  for (int64_t i = 0; i < m; ++i) {
    CMapVec x(va.data() + i * k, k);
    MapVec y(out.data() + i * n, n);
    y.noalias() = B.transpose() * x;
  }
  return make(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& va = g.nodes_[a].value;
    const Tensor& vb = g.nodes_[b].value;
    CMapMat B(vb.data(), k, n);
    if (g.nodes_[a].needs_grad) {
      Tensor& ga = g.gbuf(a);
      for (int64_t i = 0; i < m; ++i) {
        CMapVec gy(go.data() + i * n, n);
        MapVec gx(ga.data() + i * k, k);
        gx.noalias() += B * gy;
      }
    }
    if (g.nodes_[b].needs_grad) {
      Tensor& gb = g.gbuf(b);
      MapMat GB(gb.data(), k, n);
      for (int64_t i = 0; i < m; ++i) {
        CMapVec x(va.data() + i * k, k);
        CMapVec gy(go.data() + i * n, n);
        GB.noalias() += x * gy.transpose();
      }
    }
  });
}

Graph::Id Graph::linear(Id x, Id w, Id b) {
  const Tensor& vx = nodes_[x].value;
  const Tensor& vw = nodes_[w].value;
  require(vx.rank() == 2 && vw.rank() == 2 && vx.dim(1) == vw.dim(1), "linear shape mismatch");
  int64_t n = vx.dim(0), k = vx.dim(1), m = vw.dim(0);
  if (b != kNone)
    require(nodes_[b].value.rank() == 1 && nodes_[b].value.dim(0) == m, "linear bias shape");
  Tensor out({n, m});
  CMapMat W(vw.data(), m, k);
  for (int64_t i = 0; i < n; ++i) {
    CMapVec xi(vx.data() + i * k, k);
    MapVec yi(out.data() + i * m, m);
    yi.noalias() = W * xi;
    if (b != kNone) yi += CMapVec(nodes_[b].value.data(), m);
  }
  return make(std::move(out), {x, w, b}, [x, w, b, n, k, m](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vx = g.nodes_[x].value;
    const Tensor& vw = g.nodes_[w].value;
    CMapMat W(vw.data(), m, k);
    if (g.nodes_[x].needs_grad) {
      Tensor& gx = g.gbuf(x);
      for (int64_t i = 0; i < n; ++i) {
        CMapVec gy(go.data() + i * m, m);
        MapVec gxi(gx.data() + i * k, k);
        gxi.noalias() += W.transpose() * gy;
      }
    }
    if (g.nodes_[w].needs_grad) {
      Tensor& gw = g.gbuf(w);
      MapMat GW(gw.data(), m, k);
      for (int64_t i = 0; i < n; ++i) {
        CMapVec xi(vx.data() + i * k, k);
        CMapVec gy(go.data() + i * m, m);
        GW.noalias() += gy * xi.transpose();
      }
    }
    if (b != kNone && g.nodes_[b].needs_grad) {
      Tensor& gb = g.gbuf(b);
      MapVec GB(gb.data(), m);
      for (int64_t i = 0; i < n; ++i) GB += CMapVec(go.data() + i * m, m);
    }
  });
}

// ---------------- spatial ----------------

Graph::Id Graph::conv2d(Id x, Id w, Id b, int stride, int pad) {
  const Tensor& vx = nodes_[x].value;
  const Tensor& vw = nodes_[w].value;
  require(vx.rank() == 4 && vw.rank() == 4, "conv2d expects NCHW x OCKK");
  require(vx.dim(1) == vw.dim(1), "conv2d channel mismatch");
  int64_t n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), wd = vx.dim(3);
  int64_t o = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
  int64_t ho = conv_out(h, kh, stride, pad), wo = conv_out(wd, kw, stride, pad);
  require(ho > 0 && wo > 0, "conv2d output is empty");
  if (b != kNone)
    require(nodes_[b].value.rank() == 1 && nodes_[b].value.dim(0) == o, "conv2d bias shape");
  int64_t kk = c * kh * kw;
  Tensor out({n, o, ho, wo});
  Tensor col({kk, ho * wo});
  CMapMat W(vw.data(), o, kk);
  for (int64_t i = 0; i < n; ++i) {
    im2col(vx.data() + i * c * h * wd, c, h, wd, kh, kw, stride, pad, ho, wo, col.data());
    CMapMat C(col.data(), kk, ho * wo);
    MapMat Y(out.data() + i * o * ho * wo, o, ho * wo);
    Y.noalias() = W * C;
    if (b != kNone) {
      const Tensor& vb = nodes_[b].value;
      for (int64_t oc = 0; oc < o; ++oc) Y.row(oc).array() += vb[oc];
    }
  }
  auto dims = std::make_shared<std::array<int64_t, 10>>(
      std::array<int64_t, 10>{n, c, h, wd, o, kh, kw, ho, wo, kk});
  return make(std::move(out), {x, w, b},
              [x, w, b, stride, pad, dims](Graph& g, Id self) {
                auto [n, c, h, wd, o, kh, kw, ho, wo, kk] = *dims;
                const Tensor& go = g.nodes_[self].grad;
                const Tensor& vx = g.nodes_[x].value;
                const Tensor& vw = g.nodes_[w].value;
                CMapMat W(vw.data(), o, kk);
                Tensor col({kk, ho * wo});
                bool need_x = g.nodes_[x].needs_grad;
                bool need_w = g.nodes_[w].needs_grad;
                bool need_b = b != Graph::kNone && g.nodes_[b].needs_grad;
                for (int64_t i = 0; i < n; ++i) {
                  CMapMat GY(go.data() + i * o * ho * wo, o, ho * wo);
                  if (need_w || need_x)
                    im2col(vx.data() + i * c * h * wd, c, h, wd, kh, kw, stride, pad, ho, wo,
                           col.data());
                  if (need_w) {
                    MapMat GW(g.gbuf(w).data(), o, kk);
                    CMapMat C(col.data(), kk, ho * wo);
                    GW.noalias() += GY * C.transpose();
                  }
                  if (need_x) {
                    MapMat GC(col.data(), kk, ho * wo);
                    GC.noalias() = W.transpose() * GY;
                    col2im_add(col.data(), c, h, wd, kh, kw, stride, pad, ho, wo,
                               g.gbuf(x).data() + i * c * h * wd);
                  }
                  if (need_b) {
                    Tensor& gb = g.gbuf(b);
                    for (int64_t oc = 0; oc < o; ++oc) gb[oc] += GY.row(oc).sum();
                  }
                }
              });
}

Graph::Id Graph::upsample2x(Id x) {
  const Tensor& vx = nodes_[x].value;
  require(vx.rank() == 4, "upsample2x expects NCHW");
  int64_t n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  Tensor out({n, c, h * 2, w * 2});
  for (int64_t i = 0; i < n * c; ++i) {
    const double* src = vx.data() + i * h * w;
    double* dst = out.data() + i * 4 * h * w;
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + (xx / 2)];
  }
  return make(std::move(out), {x}, [x, h, w](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gx = g.gbuf(x);
    int64_t planes = go.dim(0) * go.dim(1);
    for (int64_t i = 0; i < planes; ++i) {
      const double* src = go.data() + i * 4 * h * w;
      double* dst = gx.data() + i * h * w;
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + (xx / 2)] += src[y * 2 * w + xx];
    }
  });
}

Graph::Id Graph::avgpool2x(Id x) {
  const Tensor& vx = nodes_[x].value;
  require(vx.rank() == 4, "avgpool2x expects NCHW");
  int64_t n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  require(h % 2 == 0 && w % 2 == 0, "avgpool2x needs even spatial dims");
  int64_t ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  for (int64_t i = 0; i < n * c; ++i) {
    const double* src = vx.data() + i * h * w;
    double* dst = out.data() + i * ho * wo;
    for (int64_t y = 0; y < ho; ++y)
      for (int64_t xx = 0; xx < wo; ++xx)
        dst[y * wo + xx] = 0.25 * (src[(2 * y) * w + 2 * xx] + src[(2 * y) * w + 2 * xx + 1] +
                                   src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1]);
  }
  return make(std::move(out), {x}, [x, h, w](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gx = g.gbuf(x);
    int64_t planes = go.dim(0) * go.dim(1);
    int64_t ho = h / 2, wo = w / 2;
    for (int64_t i = 0; i < planes; ++i) {
      const double* src = go.data() + i * ho * wo;
      double* dst = gx.data() + i * h * w;
      for (int64_t y = 0; y < ho; ++y)
        for (int64_t xx = 0; xx < wo; ++xx) {
          double v = 0.25 * src[y * wo + xx];
          dst[(2 * y) * w + 2 * xx] += v;
          dst[(2 * y) * w + 2 * xx + 1] += v;
          dst[(2 * y + 1) * w + 2 * xx] += v;
          dst[(2 * y + 1) * w + 2 * xx + 1] += v;
        }
    }
  });
}

Graph::Id Graph::maxpool2x(Id x) {
  const Tensor& vx = nodes_[x].value;
  require(vx.rank() == 4, "maxpool2x expects NCHW");
  int64_t n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  require(h % 2 == 0 && w % 2 == 0, "maxpool2x needs even spatial dims");
  int64_t ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  auto arg = std::make_shared<std::vector<int32_t>>(n * c * ho * wo);
  for (int64_t i = 0; i < n * c; ++i) {
    const double* src = vx.data() + i * h * w;
    double* dst = out.data() + i * ho * wo;
    int32_t* am = arg->data() + i * ho * wo;
    for (int64_t y = 0; y < ho; ++y)
      for (int64_t xx = 0; xx < wo; ++xx) {
        int64_t idx[4] = {(2 * y) * w + 2 * xx, (2 * y) * w + 2 * xx + 1,
                          (2 * y + 1) * w + 2 * xx, (2 * y + 1) * w + 2 * xx + 1};
        int best = 0;
        for (int t = 1; t < 4; ++t)
          if (src[idx[t]] > src[idx[best]]) best = t;
        dst[y * wo + xx] = src[idx[best]];
        am[y * wo + xx] = static_cast<int32_t>(idx[best]);
      }
  }
  return make(std::move(out), {x}, [x, h, w, arg](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gx = g.gbuf(x);
    int64_t planes = go.dim(0) * go.dim(1);
    int64_t per = go.dim(2) * go.dim(3);
    for (int64_t i = 0; i < planes; ++i) {
      const double* src = go.data() + i * per;
      const int32_t* am = arg->data() + i * per;
      double* dst = gx.data() + i * h * w;
      for (int64_t k = 0; k < per; ++k) dst[am[k]] += src[k];
    }
  });
}

Graph::Id Graph::roll2d(Id x, int64_t dy, int64_t dx) {
  const Tensor& vx = nodes_[x].value;
  require(vx.rank() == 4, "roll2d expects NCHW");
  int64_t n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  auto wrap = [](int64_t v, int64_t m) { return ((v % m) + m) % m; };
  Tensor out(vx.shape());
  for (int64_t i = 0; i < n * c; ++i) {
    const double* src = vx.data() + i * h * w;
    double* dst = out.data() + i * h * w;
    for (int64_t y = 0; y < h; ++y) {
      int64_t sy = wrap(y + dy, h);
      for (int64_t xx = 0; xx < w; ++xx) dst[y * w + xx] = src[sy * w + wrap(xx + dx, w)];
    }
  }
  return make(std::move(out), {x}, [x, dy, dx, h, w](Graph& g, Id self) {
    auto wrap = [](int64_t v, int64_t m) { return ((v % m) + m) % m; };
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gx = g.gbuf(x);
    int64_t planes = go.dim(0) * go.dim(1);
    for (int64_t i = 0; i < planes; ++i) {
      const double* src = go.data() + i * h * w;
      double* dst = gx.data() + i * h * w;
      for (int64_t y = 0; y < h; ++y) {
        int64_t sy = wrap(y + dy, h);
        for (int64_t xx = 0; xx < w; ++xx) dst[sy * w + wrap(xx + dx, w)] += src[y * w + xx];
      }
    }
  });
}

Graph::Id Graph::scale_nc(Id x, Id s) {
  const Tensor& vx = nodes_[x].value;
  const Tensor& vs = nodes_[s].value;
  require(vx.rank() == 4 && vs.rank() == 2 && vx.dim(0) == vs.dim(0) && vx.dim(1) == vs.dim(1),
          "scale_nc expects NCHW and matching [N,C]");
  int64_t nc = vx.dim(0) * vx.dim(1), hw = vx.dim(2) * vx.dim(3);
  Tensor out(vx.shape());
  for (int64_t i = 0; i < nc; ++i) {
    double a = vs[i];
    const double* src = vx.data() + i * hw;
    double* dst = out.data() + i * hw;
    for (int64_t k = 0; k < hw; ++k) dst[k] = a * src[k];
  }
  return make(std::move(out), {x, s}, [x, s, nc, hw](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vx = g.nodes_[x].value;
    const Tensor& vs = g.nodes_[s].value;
    if (g.nodes_[x].needs_grad) {
      Tensor& gx = g.gbuf(x);
      for (int64_t i = 0; i < nc; ++i) {
        double a = vs[i];
        const double* src = go.data() + i * hw;
        double* dst = gx.data() + i * hw;
        for (int64_t k = 0; k < hw; ++k) dst[k] += a * src[k];
      }
    }
    if (g.nodes_[s].needs_grad) {
      Tensor& gs = g.gbuf(s);
      for (int64_t i = 0; i < nc; ++i) {
        const double* a = go.data() + i * hw;
        const double* bx = vx.data() + i * hw;
        double acc = 0.0;
        for (int64_t k = 0; k < hw; ++k) acc += a[k] * bx[k];
        gs[i] += acc;
      }
    }
  });
}

Graph::Id Graph::scale_chan(Id x, Id s) {
  const Tensor& vx = nodes_[x].value;
  const Tensor& vs = nodes_[s].value;
  require(vx.rank() == 4 && vs.rank() == 1 && vs.dim(0) == vx.dim(1),
          "scale_chan expects NCHW and [C]");
  int64_t n = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
  Tensor out(vx.shape());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double a = vs[j];
      const double* src = vx.data() + (i * c + j) * hw;
      double* dst = out.data() + (i * c + j) * hw;
      for (int64_t k = 0; k < hw; ++k) dst[k] = a * src[k];
    }
  return make(std::move(out), {x, s}, [x, s, n, c, hw](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vx = g.nodes_[x].value;
    const Tensor& vs = g.nodes_[s].value;
    if (g.nodes_[x].needs_grad) {
      Tensor& gx = g.gbuf(x);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
          double a = vs[j];
          const double* src = go.data() + (i * c + j) * hw;
          double* dst = gx.data() + (i * c + j) * hw;
          for (int64_t k = 0; k < hw; ++k) dst[k] += a * src[k];
        }
    }
    if (g.nodes_[s].needs_grad) {
      Tensor& gs = g.gbuf(s);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
          const double* a = go.data() + (i * c + j) * hw;
          const double* bx = vx.data() + (i * c + j) * hw;
          double acc = 0.0;
          for (int64_t k = 0; k < hw; ++k) acc += a[k] * bx[k];
          gs[j] += acc;
        }
    }
  });
}

Graph::Id Graph::bcast_batch(Id t, int64_t n) {
  const Tensor& vt = nodes_[t].value;
  require(vt.rank() == 3, "bcast_batch expects [C,H,W]");
  int64_t per = vt.numel();
  Tensor out({n, vt.dim(0), vt.dim(1), vt.dim(2)});
  for (int64_t i = 0; i < n; ++i)
    std::copy(vt.data(), vt.data() + per, out.data() + i * per);
  return make(std::move(out), {t}, [t, n, per](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gt = g.gbuf(t);
    for (int64_t i = 0; i < n; ++i) {
      const double* src = go.data() + i * per;
      for (int64_t k = 0; k < per; ++k) gt[k] += src[k];
    }
  });
}

Graph::Id Graph::bcast_chan(Id x, int64_t c) {
  const Tensor& vx = nodes_[x].value;
  require(vx.rank() == 4 && vx.dim(1) == 1, "bcast_chan expects [N,1,H,W]");
  int64_t n = vx.dim(0), hw = vx.dim(2) * vx.dim(3);
  Tensor out({n, c, vx.dim(2), vx.dim(3)});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j)
      std::copy(vx.data() + i * hw, vx.data() + (i + 1) * hw, out.data() + (i * c + j) * hw);
  return make(std::move(out), {x}, [x, c, hw](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    Tensor& gx = g.gbuf(x);
    int64_t n = gx.dim(0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) {
        const double* src = go.data() + (i * c + j) * hw;
        double* dst = gx.data() + i * hw;
        for (int64_t k = 0; k < hw; ++k) dst[k] += src[k];
      }
  });
}

Graph::Id Graph::add_chan_bias(Id x, Id b) {
  const Tensor& vx = nodes_[x].value;
  const Tensor& vb = nodes_[b].value;
  require(vx.rank() == 4 && vb.rank() == 1 && vb.dim(0) == vx.dim(1),
          "add_chan_bias expects NCHW and [C]");
  int64_t n = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
  Tensor out = vx;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double a = vb[j];
      double* dst = out.data() + (i * c + j) * hw;
      for (int64_t k = 0; k < hw; ++k) dst[k] += a;
    }
  return make(std::move(out), {x, b}, [x, b, n, c, hw](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    if (g.nodes_[x].needs_grad) g.gbuf(x).add_(go);
    if (g.nodes_[b].needs_grad) {
      Tensor& gb = g.gbuf(b);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
          const double* src = go.data() + (i * c + j) * hw;
          double acc = 0.0;
          for (int64_t k = 0; k < hw; ++k) acc += src[k];
          gb[j] += acc;
        }
    }
  });
}

// ---------------- softmax ----------------

Graph::Id Graph::log_softmax_rows(Id a) {
  const Tensor& va = nodes_[a].value;
  require(va.rank() == 2, "log_softmax_rows expects [N,K]");
  int64_t n = va.dim(0), k = va.dim(1);
  Tensor out({n, k});
  for (int64_t i = 0; i < n; ++i) {
    const double* src = va.data() + i * k;
    double mx = src[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, src[j]);
    double lse = 0.0;
    for (int64_t j = 0; j < k; ++j) lse += std::exp(src[j] - mx);
    lse = mx + std::log(lse);
    double* dst = out.data() + i * k;
    for (int64_t j = 0; j < k; ++j) dst[j] = src[j] - lse;
  }
  return make(std::move(out), {a}, [a, n, k](Graph& g, Id self) {
    const Tensor& go = g.nodes_[self].grad;
    const Tensor& vo = g.nodes_[self].value;
    Tensor& ga = g.gbuf(a);
    for (int64_t i = 0; i < n; ++i) {
      const double* gy = go.data() + i * k;
      const double* ls = vo.data() + i * k;
      double* gx = ga.data() + i * k;
      double gsum = 0.0;
      for (int64_t j = 0; j < k; ++j) gsum += gy[j];
      for (int64_t j = 0; j < k; ++j) gx[j] += gy[j] - std::exp(ls[j]) * gsum;
    }
  });
}

double central_difference(const std::function<double(double)>& f_of_coord, double x0,
                          double step) {
  return (f_of_coord(x0 + step) - f_of_coord(x0 - step)) / (2.0 * step);
}

}  // namespace vasa
