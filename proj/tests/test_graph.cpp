#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "vasa/graph.hpp"
#include "vasa/rng.hpp"

using namespace vasa;
using vasa::testing::check_gradients;

namespace {

constexpr double kTol = 1e-6;

// Scalarizes an arbitrary-shape node with fixed random weights so every
// output coordinate influences the loss.
Graph::Id weighted(Graph& g, Graph::Id out, uint64_t seed) {
  RngStream r(seed);
  Tensor w = r.uniform_tensor(g.val(out).shape(), 0.5, 1.5);
  return g.sum_all(g.mul(out, g.constant(std::move(w))));
}

Param rand_param(const std::string& name, Shape s, uint64_t seed, double lo = -1.0,
                 double hi = 1.0) {
  RngStream r(seed);
  return Param(name, r.uniform_tensor(std::move(s), lo, hi));
}

}  // namespace

TEST_CASE("elementwise binary op gradients") {
  Param a = rand_param("a", {3, 4}, 1);
  Param b = rand_param("b", {3, 4}, 2, 0.5, 2.0);  // bounded away from zero for div
  auto run = [&](auto make_op) {
    auto fn = [&](Graph& g) {
      return weighted(g, make_op(g, g.param(a), g.param(b)), 99);
    };
    return check_gradients(fn, {&a, &b}, 7, 1e-4, 12).max_rel_err;
  };
  CHECK(run([](Graph& g, Graph::Id x, Graph::Id y) { return g.add(x, y); }) < kTol);
  CHECK(run([](Graph& g, Graph::Id x, Graph::Id y) { return g.sub(x, y); }) < kTol);
  CHECK(run([](Graph& g, Graph::Id x, Graph::Id y) { return g.mul(x, y); }) < kTol);
  CHECK(run([](Graph& g, Graph::Id x, Graph::Id y) { return g.div(x, y); }) < kTol);
}

TEST_CASE("elementwise unary op gradients") {
  auto run = [](auto make_op, double lo, double hi) {
    Param a = rand_param("a", {2, 5}, 3, lo, hi);
    auto fn = [&](Graph& g) { return weighted(g, make_op(g, g.param(a)), 98); };
    return check_gradients(fn, {&a}, 11, 1e-5, 10).max_rel_err;
  };
  CHECK(run([](Graph& g, Graph::Id x) { return g.recip(x); }, 0.5, 2.0) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.add_scalar(x, 2.5); }, -1, 1) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.mul_scalar(x, -1.7); }, -1, 1) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.relu(x); }, 0.05, 1) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.relu(x); }, -1, -0.05) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.lrelu(x, 0.2); }, -1, 1) < 1e-4);
  CHECK(run([](Graph& g, Graph::Id x) { return g.tanh_op(x); }, -2, 2) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.sigmoid(x); }, -3, 3) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.softplus(x); }, -3, 3) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.exp_op(x); }, -2, 2) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.log_op(x); }, 0.3, 3.0) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.sqrt_op(x); }, 0.3, 3.0) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.rsqrt(x, 0.01); }, 0.3, 3.0) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.square(x); }, -2, 2) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.abs_op(x); }, 0.1, 2.0) < kTol);
  CHECK(run([](Graph& g, Graph::Id x) { return g.abs_op(x); }, -2.0, -0.1) < kTol);
}

TEST_CASE("activation numerical stability") {
  Graph g;
  Graph::Id x = g.constant(Tensor({4}, {800.0, -800.0, 0.0, 35.0}));
  Graph::Id sp = g.softplus(x);
  CHECK(g.val(sp)[0] == doctest::Approx(800.0));
  CHECK(g.val(sp)[1] == doctest::Approx(0.0));
  CHECK(g.val(sp)[2] == doctest::Approx(std::log(2.0)));
  Graph::Id sg = g.sigmoid(x);
  CHECK(g.val(sg)[0] == doctest::Approx(1.0));
  CHECK(g.val(sg)[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(g.val(sp)[3]));
}

TEST_CASE("shape op gradients and values") {
  Param a = rand_param("a", {2, 6}, 4);
  Param b = rand_param("b", {2, 3}, 5);
  Param s = rand_param("s", {2, 4}, 6);

  auto fn_reshape = [&](Graph& g) {
    return weighted(g, g.reshape(g.param(a), {3, 4}), 97);
  };
  CHECK(check_gradients(fn_reshape, {&a}, 13).max_rel_err < kTol);

  auto fn_concat = [&](Graph& g) {
    return weighted(g, g.concat_cols({g.param(a), g.param(b)}), 96);
  };
  CHECK(check_gradients(fn_concat, {&a, &b}, 14).max_rel_err < kTol);

  auto fn_bcast = [&](Graph& g) { return weighted(g, g.bcast_hw(g.param(s), 3, 5), 95); };
  CHECK(check_gradients(fn_bcast, {&s}, 15).max_rel_err < kTol);

  Graph g;
  Graph::Id c = g.concat_cols({g.constant(Tensor({1, 2}, {1, 2})), g.constant(Tensor({1, 1}, {3}))});
  CHECK(g.val(c).shape() == Shape{1, 3});
  CHECK(g.val(c)[2] == 3.0);
  Graph::Id bc = g.bcast_hw(g.constant(Tensor({1, 2}, {4, 7})), 2, 2);
  CHECK(g.val(bc).at(0, 1, 1, 0) == 7.0);
}

TEST_CASE("reduction op gradients") {
  Param a = rand_param("a", {3, 5}, 7);
  Param b = rand_param("b", {3, 5}, 8);
  Param x4 = rand_param("x4", {2, 3, 4, 4}, 9);

  auto chk = [&](auto make, std::vector<Param*> ps, uint64_t seed) {
    auto fn = [&](Graph& g) { return weighted(g, make(g), seed + 1000); };
    return check_gradients(fn, ps, seed).max_rel_err;
  };
  CHECK(chk([&](Graph& g) { return g.add_n({g.param(a), g.param(b), g.param(a)}); }, {&a, &b}, 21) < kTol);
  CHECK(chk([&](Graph& g) { return g.sum_all(g.param(a)); }, {&a}, 22) < kTol);
  CHECK(chk([&](Graph& g) { return g.mean_all(g.param(a)); }, {&a}, 23) < kTol);
  CHECK(chk([&](Graph& g) { return g.sum_rows(g.param(a)); }, {&a}, 24) < kTol);
  CHECK(chk([&](Graph& g) { return g.mean_rows(g.param(a)); }, {&a}, 25) < kTol);
  CHECK(chk([&](Graph& g) { return g.row_max(g.param(a)); }, {&a}, 26) < kTol);
  CHECK(chk([&](Graph& g) { return g.row_max_excluding(g.param(a), {1, 0, 4}); }, {&a}, 27) < kTol);
  CHECK(chk([&](Graph& g) { return g.pick_cols(g.param(a), {2, 0, 4}); }, {&a}, 28) < kTol);
  CHECK(chk([&](Graph& g) { return g.mean_hw(g.param(x4)); }, {&x4}, 29) < kTol);
  CHECK(chk([&](Graph& g) { return g.std_hw(g.param(x4), 1e-8); }, {&x4}, 30) < kTol);
}

TEST_CASE("reduction op values") {
  Graph g;
  Graph::Id a = g.constant(Tensor({2, 3}, {1, 5, 2, -4, 0, -1}));
  CHECK(g.val(g.row_max(a))[0] == 5.0);
  CHECK(g.val(g.row_max(a))[1] == 0.0);
  CHECK(g.val(g.row_max_excluding(a, {1, 1}))[0] == 2.0);
  CHECK(g.val(g.row_max_excluding(a, {1, 1}))[1] == -1.0);
  CHECK(g.val(g.pick_cols(a, {2, 0}))[0] == 2.0);
  CHECK(g.val(g.pick_cols(a, {2, 0}))[1] == -4.0);
  CHECK(g.val(g.sum_rows(a))[0] == 8.0);
  CHECK(g.val(g.mean_rows(a))[1] == doctest::Approx(-5.0 / 3.0));

  // Constant plane: mean is the value, std collapses to sqrt(var_eps).
  Graph::Id flat = g.constant(Tensor::full({1, 1, 4, 4}, 3.25));
  CHECK(g.val(g.mean_hw(flat))[0] == doctest::Approx(3.25));
  CHECK(g.val(g.std_hw(flat, 1e-16))[0] == doctest::Approx(1e-8));
}

TEST_CASE("matmul and linear gradients") {
  Param a = rand_param("a", {3, 4}, 31);
  Param b = rand_param("b", {4, 5}, 32);
  Param w = rand_param("w", {6, 4}, 33);
  Param bias = rand_param("bias", {6}, 34);

  auto fn_mm = [&](Graph& g) { return weighted(g, g.matmul(g.param(a), g.param(b)), 90); };
  CHECK(check_gradients(fn_mm, {&a, &b}, 41, 1e-4, 15).max_rel_err < kTol);

  auto fn_lin = [&](Graph& g) {
    return weighted(g, g.linear(g.param(a), g.param(w), g.param(bias)), 89);
  };
  CHECK(check_gradients(fn_lin, {&a, &w, &bias}, 42, 1e-4, 15).max_rel_err < kTol);

  auto fn_lin_nb = [&](Graph& g) { return weighted(g, g.linear(g.param(a), g.param(w)), 88); };
  CHECK(check_gradients(fn_lin_nb, {&a, &w}, 43).max_rel_err < kTol);
}

TEST_CASE("matmul value against hand loop") {
  RngStream r(55);
  Tensor A = r.normal_tensor({3, 4}), B = r.normal_tensor({4, 2});
  Graph g;
  const Tensor& C = g.val(g.matmul(g.constant(A), g.constant(B)));
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      double s = 0;
      for (int64_t k = 0; k < 4; ++k) s += A.at(i, k) * B.at(k, j);
      CHECK(C.at(i, j) == doctest::Approx(s).epsilon(1e-12));
    }

  // linear == x W^T + b
  Tensor W = r.normal_tensor({2, 4}), bias = r.normal_tensor({2});
  const Tensor& Y = g.val(g.linear(g.constant(A), g.constant(W), g.constant(bias)));
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      double s = bias[j];
      for (int64_t k = 0; k < 4; ++k) s += A.at(i, k) * W.at(j, k);
      CHECK(Y.at(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("conv2d value against direct convolution") {
  RngStream r(66);
  int64_t N = 2, C = 3, H = 5, Wd = 6, O = 4, K = 3;
  Tensor x = r.normal_tensor({N, C, H, Wd});
  Tensor w = r.normal_tensor({O, C, K, K});
  Tensor b = r.normal_tensor({O});
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      Graph g;
      const Tensor& y = g.val(
          g.conv2d(g.constant(x), g.constant(w), g.constant(b), stride, pad));
      int64_t Ho = (H + 2 * pad - K) / stride + 1;
      int64_t Wo = (Wd + 2 * pad - K) / stride + 1;
      REQUIRE(y.shape() == Shape{N, O, Ho, Wo});
      for (int64_t n = 0; n < N; ++n)
        for (int64_t o = 0; o < O; ++o)
          for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
              double s = b[o];
              for (int64_t c = 0; c < C; ++c)
                for (int64_t ky = 0; ky < K; ++ky)
                  for (int64_t kx = 0; kx < K; ++kx) {
                    int64_t iy = oy * stride + ky - pad;
                    int64_t ix = ox * stride + kx - pad;
                    if (iy >= 0 && iy < H && ix >= 0 && ix < Wd)
                      s += x.at(n, c, iy, ix) * w.at(o, c, ky, kx);
                  }
              CHECK(y.at(n, o, oy, ox) == doctest::Approx(s).epsilon(1e-12));
            }
    }
  }
}

TEST_CASE("conv2d gradients") {
  Param x = rand_param("x", {2, 2, 5, 5}, 71);
  Param w = rand_param("w", {3, 2, 3, 3}, 72);
  Param b = rand_param("b", {3}, 73);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      auto fn = [&](Graph& g) {
        return weighted(g, g.conv2d(g.param(x), g.param(w), g.param(b), stride, pad), 87);
      };
      CHECK(check_gradients(fn, {&x, &w, &b}, 44, 1e-4, 12).max_rel_err < kTol);
    }
  }
}

TEST_CASE("pool and upsample gradients") {
  Param x = rand_param("x", {2, 2, 4, 6}, 74);
  auto chk = [&](auto make, uint64_t seed) {
    auto fn = [&](Graph& g) { return weighted(g, make(g, g.param(x)), seed + 500); };
    return check_gradients(fn, {&x}, seed).max_rel_err;
  };
  CHECK(chk([](Graph& g, Graph::Id v) { return g.upsample2x(v); }, 45) < kTol);
  CHECK(chk([](Graph& g, Graph::Id v) { return g.avgpool2x(v); }, 46) < kTol);
  CHECK(chk([](Graph& g, Graph::Id v) { return g.maxpool2x(v); }, 47) < kTol);
  CHECK(chk([](Graph& g, Graph::Id v) { return g.roll2d(v, 3, -2); }, 48) < kTol);
}

TEST_CASE("pool and upsample values") {
  Graph g;
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Graph::Id xi = g.constant(x);
  const Tensor& up = g.val(g.upsample2x(xi));
  CHECK(up.shape() == Shape{1, 1, 4, 4});
  CHECK(up.at(0, 0, 0, 1) == 1.0);
  CHECK(up.at(0, 0, 3, 3) == 4.0);
  CHECK(g.val(g.avgpool2x(xi)).at(0, 0, 0, 0) == doctest::Approx(2.5));
  CHECK(g.val(g.maxpool2x(xi)).at(0, 0, 0, 0) == 4.0);

  // avgpool undoes nearest upsample exactly
  RngStream r(77);
  Tensor y = r.normal_tensor({2, 3, 4, 4});
  Graph::Id yi = g.constant(y);
  const Tensor& round = g.val(g.avgpool2x(g.upsample2x(yi)));
  CHECK(max_abs_diff(round, y) == 0.0);
}

TEST_CASE("toroidal roll identities") {
  RngStream r(78);
  Tensor x = r.normal_tensor({1, 2, 5, 7});
  Graph g;
  Graph::Id xi = g.constant(x);
  CHECK(max_abs_diff(g.val(g.roll2d(xi, 0, 0)), x) == 0.0);
  CHECK(max_abs_diff(g.val(g.roll2d(xi, 5, 7)), x) == 0.0);
  CHECK(max_abs_diff(g.val(g.roll2d(xi, -5, 14)), x) == 0.0);
  const Tensor& once = g.val(g.roll2d(g.roll2d(xi, 2, 3), 1, -1));
  const Tensor& direct = g.val(g.roll2d(xi, 3, 2));
  CHECK(max_abs_diff(once, direct) == 0.0);
  // roll moves content where expected
  const Tensor& s = g.val(g.roll2d(xi, 1, 0));
  CHECK(s.at(0, 0, 0, 0) == x.at(0, 0, 1, 0));
}

TEST_CASE("scale_nc and add_chan_bias") {
  Param x = rand_param("x", {2, 3, 4, 4}, 81);
  Param s = rand_param("s", {2, 3}, 82, 0.5, 1.5);
  Param b = rand_param("b", {3}, 83);
  auto fn = [&](Graph& g) {
    return weighted(g, g.add_chan_bias(g.scale_nc(g.param(x), g.param(s)), g.param(b)), 86);
  };
  CHECK(check_gradients(fn, {&x, &s, &b}, 49, 1e-4, 12).max_rel_err < kTol);

  Graph g;
  Tensor xv = Tensor::full({1, 2, 2, 2}, 2.0);
  Graph::Id y = g.scale_nc(g.constant(xv), g.constant(Tensor({1, 2}, {3.0, -1.0})));
  CHECK(g.val(y).at(0, 0, 1, 1) == 6.0);
  CHECK(g.val(y).at(0, 1, 0, 0) == -2.0);
}

TEST_CASE("log_softmax gradients and normalization") {
  Param a = rand_param("a", {3, 6}, 84, -2, 2);
  auto fn = [&](Graph& g) { return weighted(g, g.log_softmax_rows(g.param(a)), 85); };
  CHECK(check_gradients(fn, {&a}, 50, 1e-4, 15).max_rel_err < kTol);

  Graph g;
  Graph::Id ls = g.log_softmax_rows(g.param(a));
  for (int64_t i = 0; i < 3; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 6; ++j) s += std::exp(g.val(ls).at(i, j));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  // invariant to constant row shifts
  Graph::Id ls2 = g.log_softmax_rows(g.add_scalar(g.param(a), 123.0));
  CHECK(max_abs_diff(g.val(ls), g.val(ls2)) < 1e-9);
}

TEST_CASE("fan-out and repeated parameter binding accumulate") {
  Param a = rand_param("a", {2, 3}, 91);
  auto fn = [&](Graph& g) {
    Graph::Id x = g.param(a);
    Graph::Id t1 = g.sum_all(g.mul(x, x));
    Graph::Id t2 = g.sum_all(g.tanh_op(x));
    Graph::Id t3 = g.sum_all(g.param(a));  // second binding of the same Param
    return g.add_n({t1, t2, t3});
  };
  CHECK(check_gradients(fn, {&a}, 51).max_rel_err < kTol);
}

TEST_CASE("input leaves receive gradients, constants do not") {
  Graph g;
  RngStream r(92);
  Graph::Id x = g.input(r.normal_tensor({2, 2}));
  Graph::Id c = g.constant(r.normal_tensor({2, 2}));
  Graph::Id loss = g.sum_all(g.mul(x, c));
  g.backward(loss);
  CHECK(max_abs_diff(g.grad(x), g.val(c)) == 0.0);
}

TEST_CASE("backward guards") {
  Graph g;
  Graph::Id x = g.input(Tensor({2, 2}));
  Graph::Id y = g.mul(x, x);
  CHECK_THROWS(g.backward(y));  // non-scalar root
  Graph::Id loss = g.sum_all(y);
  g.backward(loss);
  CHECK_THROWS(g.backward(loss));  // tape already consumed
  g.clear();
  CHECK(g.size() == 0);
}
