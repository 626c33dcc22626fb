#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "vasa/tensor.hpp"

namespace vasa {

// Named trainable tensor. Gradients are accumulated here by Graph::backward,
// mirroring the usual zero_grad / backward / step cycle.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor(value.shape());
  }
  void zero_grad() {
    ensure_grad();
    grad.zero();
  }
};

// Define-by-run reverse-mode tape over Tensor, double precision throughout.
// A fresh tape is built for every optimization step; backward walks it once
// in reverse. Batched ops loop over the leading dimension sample by sample,
// so a given sample produces bitwise-identical values regardless of which
// batch it rides in.
class Graph {
 public:
  using Id = int32_t;
  static constexpr Id kNone = -1;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves ----
  Id constant(Tensor v);        // no gradient tracked
  Id input(Tensor v);           // gradient tracked (e.g. the attacked image)
  Id param(Param& p);           // gradient flows into p.grad after backward

  // ---- elementwise ----
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id div(Id a, Id b);
  Id recip(Id a);
  Id add_scalar(Id a, double s);
  Id mul_scalar(Id a, double s);
  Id neg(Id a) { return mul_scalar(a, -1.0); }
  Id relu(Id a);
  Id lrelu(Id a, double slope = 0.2);
  Id tanh_op(Id a);
  Id sigmoid(Id a);
  Id softplus(Id a);
  Id exp_op(Id a);
  Id log_op(Id a);
  Id sqrt_op(Id a);
  Id rsqrt(Id a, double eps = 0.0);  // 1/sqrt(a + eps)
  Id square(Id a);
  Id abs_op(Id a);

  // ---- shape ----
  Id reshape(Id a, Shape s);
  Id concat_cols(const std::vector<Id>& xs);        // [N,Ki] -> [N, sum Ki]
  Id bcast_hw(Id s, int64_t h, int64_t w);          // [N,C] -> [N,C,H,W]

  // ---- reductions ----
  Id add_n(const std::vector<Id>& xs);              // same-shape sum
  Id sum_all(Id a);                                 // -> [1]
  Id mean_all(Id a);                                // -> [1]
  Id sum_rows(Id a);                                // [N,K] -> [N]
  Id mean_rows(Id a);                               // [N,K] -> [N]
  Id row_max(Id a);                                 // [N,K] -> [N]
  // max over j != excl[i] per row; excl entry < 0 disables the exclusion
  Id row_max_excluding(Id a, const std::vector<int64_t>& excl);
  Id pick_cols(Id a, const std::vector<int64_t>& idx);  // [N,K] -> [N]
  Id mean_hw(Id a);                                 // [N,C,H,W] -> [N,C]
  // sqrt(Var_hw(a) + var_eps), biased variance over HxW
  Id std_hw(Id a, double var_eps);

  // ---- linear algebra ----
  Id matmul(Id a, Id b);                            // [M,K]x[K,N] -> [M,N]
  Id linear(Id x, Id w, Id b = kNone);              // [N,K]x[M,K]^T + [M] -> [N,M]

  // ---- spatial (NCHW) ----
  Id conv2d(Id x, Id w, Id b = kNone, int stride = 1, int pad = 0);
  Id upsample2x(Id x);                              // nearest neighbour
  Id avgpool2x(Id x);
  Id maxpool2x(Id x);
  Id roll2d(Id x, int64_t dy, int64_t dx);          // toroidal shift
  Id scale_nc(Id x, Id s);                          // x[n,c,h,w] * s[n,c]
  Id scale_chan(Id x, Id s);                        // x[n,c,h,w] * s[c]
  Id add_chan_bias(Id x, Id b);                     // + b[c]
  Id bcast_batch(Id t, int64_t n);                  // [C,H,W] -> [N,C,H,W]
  Id bcast_chan(Id x, int64_t c);                   // [N,1,H,W] -> [N,C,H,W]

  // ---- softmax family ----
  Id log_softmax_rows(Id a);                        // [N,K]

  // ---- engine ----
  const Tensor& val(Id id) const { return nodes_[id].value; }
  // Valid after backward(); zero tensor if the leaf was never reached.
  const Tensor& grad(Id id);
  void backward(Id root);
  void clear();
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Graph&, Id)> back;  // nullptr for leaves/constants
    bool needs_grad = false;
    Param* bound = nullptr;
  };

  Id make(Tensor value, const std::vector<Id>& parents, std::function<void(Graph&, Id)> back);
  bool any_needs_grad(const std::vector<Id>& ids) const;
  Tensor& gbuf(Id id);  // grad buffer, allocated zeroed on first touch

  // deque: references handed out by val() stay valid as the tape grows
  std::deque<Node> nodes_;
  bool ran_backward_ = false;
};

// Finite-difference directional check utility used heavily by the gradient
// test suite: rebuilds the scalar loss while perturbing one coordinate.
double central_difference(const std::function<double(double)>& f_of_coord, double x0,
                          double step);

}  // namespace vasa
