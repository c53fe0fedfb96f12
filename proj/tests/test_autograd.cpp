#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ghoststereo/ops.hpp"
#include "testutil.hpp"

using namespace gs;
using gs::test::check_gradients;
using gs::test::max_abs_diff;
using gs::test::random_array;

TEST_CASE("broadcast add/mul forward") {
  Tensor a(Array({2, 3}, 1.0));
  Array bv({3});
  bv[0] = 1;
  bv[1] = 2;
  bv[2] = 3;
  Tensor b{bv};
  Tensor c = mul(a, b);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.val()[0] == 1.0);
  CHECK(c.val()[5] == 3.0);

  // [2,1] x [1,3] -> [2,3]
  Array l({2, 1});
  l[0] = 2;
  l[1] = 5;
  Array r({1, 3});
  r[0] = 1;
  r[1] = 10;
  r[2] = 100;
  Tensor p = mul(Tensor{l}, Tensor{r});
  CHECK(p.shape() == Shape{2, 3});
  CHECK(p.val()[1] == 20.0);
  CHECK(p.val()[5] == 500.0);
}

TEST_CASE("broadcast gradients reduce over expanded dims") {
  Rng rng(7);
  Tensor a(random_array({2, 1, 4}, rng), true);
  Tensor b(random_array({3, 1}, rng), true);
  auto f = [](std::vector<Tensor>& ts) { return sum_all(mul(ts[0], ts[1])); };
  auto rep = check_gradients(f, {a, b}, rng, 8);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("elementwise op gradients") {
  Rng rng(11);
  for (auto which : {0, 1, 2, 3}) {
    Tensor x(random_array({4, 5}, rng, -2.0, 2.0), true);
    auto f = [which](std::vector<Tensor>& ts) {
      Tensor y;
      switch (which) {
        case 0: y = relu(ts[0]); break;
        case 1: y = sigmoid(ts[0]); break;
        case 2: y = hard_sigmoid(ts[0]); break;
        default: y = smooth_l1(ts[0]); break;
      }
      return sum_all(mul(y, y));
    };
    auto rep = check_gradients(f, {x}, rng, 10);
    CAPTURE(which);
    CHECK(rep.max_rel_err < 1e-3);
  }
}

TEST_CASE("softmax normalizes and matches shift invariance") {
  Rng rng(3);
  Tensor x(random_array({2, 5, 3}, rng), true);
  Tensor s = softmax(x, 1);
  for (i64 o = 0; o < 2; ++o) {
    for (i64 in = 0; in < 3; ++in) {
      double tot = 0.0;
      for (i64 i = 0; i < 5; ++i) tot += s.val()[(o * 5 + i) * 3 + in];
      CHECK(tot == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  Tensor shifted = softmax(add_scalar(x, 17.5), 1);
  CHECK(max_abs_diff(s.val(), shifted.val()) < 1e-12);

  auto f = [](std::vector<Tensor>& ts) {
    Tensor sm = softmax(ts[0], 1);
    return sum_all(mul(sm, sm));
  };
  auto rep = check_gradients(f, {x}, rng, 10);
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("concat/narrow round trip and grads") {
  Rng rng(5);
  Tensor a(random_array({2, 3, 4}, rng), true);
  Tensor b(random_array({2, 2, 4}, rng), true);
  Tensor c = concat({a, b}, 1);
  CHECK(c.shape() == Shape{2, 5, 4});
  Tensor a2 = narrow(c, 1, 0, 3);
  CHECK(max_abs_diff(a2.val(), a.val()) == 0.0);

  auto f = [](std::vector<Tensor>& ts) {
    Tensor cc = concat({ts[0], ts[1]}, 1);
    return sum_all(mul(cc, cc));
  };
  auto rep = check_gradients(f, {a, b}, rng, 8);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("linear and pooling gradients") {
  Rng rng(13);
  Tensor x(random_array({3, 6}, rng), true);
  Tensor w(random_array({4, 6}, rng), true);
  Tensor b(random_array({4}, rng), true);
  auto f = [](std::vector<Tensor>& ts) {
    Tensor y = linear(ts[0], ts[1], ts[2]);
    return sum_all(mul(y, y));
  };
  auto rep = check_gradients(f, {x, w, b}, rng, 8);
  CHECK(rep.max_rel_err < 1e-3);

  Tensor v(random_array({2, 3, 4, 5}, rng), true);
  auto g = [](std::vector<Tensor>& ts) {
    return sum_all(mul(global_avg_pool(ts[0]), global_avg_pool(ts[0])));
  };
  rep = check_gradients(g, {v}, rng, 8);
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("conv2d matches direct dense computation on a known case") {
  // 1x1 input channel, 3x3 kernel, identity-like checks
  Array x({1, 1, 3, 3});
  for (i64 i = 0; i < 9; ++i) x[i] = static_cast<double>(i + 1);
  Array w({1, 1, 3, 3});
  w.v.assign(9, 0.0);
  w[4] = 1.0;  // delta kernel -> identity with pad 1
  ConvOpts opts;
  opts.stride = {1, 1};
  opts.padding = {1, 1};
  Tensor y = conv_nd(Tensor{x}, Tensor{w}, Tensor(), opts);
  CHECK(max_abs_diff(y.val(), x) == 0.0);
}

TEST_CASE("conv gradient check: dense, strided, grouped, 2d and 3d") {
  Rng rng(17);
  struct Case {
    Shape xs, ws;
    std::vector<i64> stride, pad;
    i64 groups;
  };
  std::vector<Case> cases = {
      {{2, 3, 5, 6}, {4, 3, 3, 3}, {1, 1}, {1, 1}, 1},
      {{1, 4, 6, 6}, {6, 4, 3, 3}, {2, 2}, {1, 1}, 1},
      {{1, 4, 5, 5}, {4, 1, 3, 3}, {1, 1}, {1, 1}, 4},       // depthwise
      {{1, 4, 4, 5, 5}, {4, 1, 3, 3, 3}, {2, 2, 2}, {1, 1, 1}, 4},  // depthwise 3d stride 2
      {{1, 3, 4, 4, 4}, {2, 3, 3, 3, 3}, {1, 1, 1}, {1, 1, 1}, 1},
      {{1, 2, 3, 6, 6}, {2, 2, 1, 5, 5}, {1, 1, 1}, {0, 2, 2}, 1},  // 1x5x5 CVE-style
  };
  for (size_t ci = 0; ci < cases.size(); ++ci) {
    const auto& c = cases[ci];
    Tensor x(random_array(c.xs, rng), true);
    Tensor w(random_array(c.ws, rng, -0.5, 0.5), true);
    Tensor b(random_array({c.ws[0]}, rng, -0.2, 0.2), true);
    ConvOpts opts{c.stride, c.pad, c.groups};
    auto f = [&opts](std::vector<Tensor>& ts) {
      Tensor y = conv_nd(ts[0], ts[1], ts[2], opts);
      return sum_all(mul(y, y));
    };
    auto rep = check_gradients(f, {x, w, b}, rng, 6);
    CAPTURE(ci);
    CHECK(rep.max_rel_err < 1e-3);
  }
}

TEST_CASE("conv_transpose doubles spatial size exactly and passes grad check") {
  Rng rng(19);
  Tensor x(random_array({1, 3, 4, 5}, rng), true);
  Tensor w(random_array({3, 2, 4, 4}, rng, -0.5, 0.5), true);
  Tensor y = conv_transpose_nd(x, w, Tensor(), {2, 2}, {1, 1});
  CHECK(y.shape() == Shape{1, 2, 8, 10});

  auto f = [](std::vector<Tensor>& ts) {
    Tensor yy = conv_transpose_nd(ts[0], ts[1], Tensor(), {2, 2}, {1, 1});
    return sum_all(mul(yy, yy));
  };
  auto rep = check_gradients(f, {x, w}, rng, 8);
  CHECK(rep.max_rel_err < 1e-3);

  Tensor x3(random_array({1, 2, 2, 3, 3}, rng), true);
  Tensor w3(random_array({2, 2, 4, 4, 4}, rng, -0.5, 0.5), true);
  Tensor y3 = conv_transpose_nd(x3, w3, Tensor(), {2, 2, 2}, {1, 1, 1});
  CHECK(y3.shape() == Shape{1, 2, 4, 6, 6});
  auto f3 = [](std::vector<Tensor>& ts) {
    Tensor yy = conv_transpose_nd(ts[0], ts[1], Tensor(), {2, 2, 2}, {1, 1, 1});
    return sum_all(mul(yy, yy));
  };
  rep = check_gradients(f3, {x3, w3}, rng, 8);
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("batch_norm: training stats, eval path, gradient") {
  Rng rng(23);
  Tensor x(random_array({2, 3, 4, 4}, rng, -2.0, 3.0), true);
  Tensor gamma(random_array({3}, rng, 0.5, 1.5), true);
  Tensor beta(random_array({3}, rng, -0.5, 0.5), true);
  Array rm = Array::zeros({3}), rv = Array::full({3}, 1.0);

  Tensor y = batch_norm(x, gamma, beta, rm, rv, /*training=*/true);
  // per-channel batch mean of (y - beta)/gamma is ~0, var ~1
  for (i64 c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (i64 b = 0; b < 2; ++b)
      for (i64 i = 0; i < 16; ++i)
        mean += (y.val()[(b * 3 + c) * 16 + i] - beta.val()[c]) / gamma.val()[c];
    mean /= 32.0;
    CHECK(std::fabs(mean) < 1e-12);
  }

  Array rm2 = rm, rv2 = rv;
  auto f = [&](std::vector<Tensor>& ts) {
    Array m = rm2, v = rv2;  // keep side effects out of the repeated evals
    Tensor yy = batch_norm(ts[0], ts[1], ts[2], m, v, true);
    return sum_all(mul(yy, yy));
  };
  auto rep = check_gradients(f, {x, gamma, beta}, rng, 8);
  CHECK(rep.max_rel_err < 1e-3);

  auto fe = [&](std::vector<Tensor>& ts) {
    Array m = rm2, v = rv2;
    Tensor yy = batch_norm(ts[0], ts[1], ts[2], m, v, false);
    return sum_all(mul(yy, yy));
  };
  rep = check_gradients(fe, {x, gamma, beta}, rng, 8);
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("no-grad guard suppresses graph recording") {
  Tensor x(Array({2, 2}, 1.0), true);
  NoGradGuard guard;
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("gradient accumulates across shared uses (siamese contract)") {
  Rng rng(29);
  Tensor w(random_array({3, 3}, rng), true);
  Tensor a(random_array({2, 3}, rng));
  Tensor b(random_array({2, 3}, rng));
  // same weights applied to two inputs; grad must be the sum of both paths
  Tensor la = linear(a, w, Tensor());
  Tensor lb = linear(b, w, Tensor());
  Tensor loss = add(sum_all(mul(la, la)), sum_all(mul(lb, lb)));
  backward(loss);
  Array both = w.grad();

  w.zero_grad();
  Tensor la2 = linear(a, w, Tensor());
  Tensor only = sum_all(mul(la2, la2));
  backward(only);
  Array first = w.grad();

  w.zero_grad();
  Tensor lb2 = linear(b, w, Tensor());
  backward(sum_all(mul(lb2, lb2)));
  Array second = w.grad();

  for (i64 i = 0; i < both.numel(); ++i)
    CHECK(both[i] == doctest::Approx(first[i] + second[i]).epsilon(1e-12));
}
