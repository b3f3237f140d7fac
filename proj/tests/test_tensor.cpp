// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "shpeft/rng.hpp"
#include "shpeft/tensor.hpp"

using namespace shpeft;

namespace {

DTensor randt(Rng& rng, Shape s, bool req = true) {
  auto t = Tensor<double>::zeros(std::move(s), req);
  for (auto& v : t->data) v = rng.normal();
  return t;
}

// Checks backward_pass against the central-difference oracle on one leaf.
void check_grad(const std::function<DTensor(DTensor)>& graph, DTensor leaf,
                double tol = 1e-4) {
  auto loss = graph(leaf);
  REQUIRE(loss->numel() == 1);
  leaf->zero_grad();
  backward_pass(loss);
  auto f = [&](const std::vector<double>& x) {
    auto copy = Tensor<double>::from(leaf->shape, x, false);
    return graph(copy)->data[0];
  };
  auto fd = finite_difference_gradient<double>(f, leaf->data, 1e-4);
  leaf->ensure_grad();
  for (std::size_t i = 0; i < fd.size(); ++i) {
    double denom = std::max({std::abs(fd[i]), std::abs(leaf->grad[i]), 1.0});
    CHECK(std::abs(fd[i] - leaf->grad[i]) / denom < tol);
  }
}

}  // namespace

TEST_CASE("layer_norm on a symmetric pair") {
  auto x = Tensor<double>::from({1, 2}, {1.0, 3.0});
  auto g = Tensor<double>::from({2}, {1.0, 1.0});
  auto b = Tensor<double>::from({2}, {0.0, 0.0});
  auto y = layer_norm(x, g, b);
  CHECK(y->data[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y->data[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("cross entropy of uniform logits is ln 2") {
  auto x = Tensor<double>::from({2}, {0.0, 0.0});
  auto loss = cross_entropy_with_logits(x, {0});
  CHECK(loss->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("matmul identity") {
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto a = Tensor<double>::from({2, 2}, {3, -1, 2, 7});
  auto c = matmul(eye, a);
  for (int i = 0; i < 4; ++i) CHECK(c->data[i] == a->data[i]);
}

TEST_CASE("softmax cross entropy gradient on symmetric logits") {
  auto x = Tensor<double>::from({2}, {0.0, 0.0}, true);
  auto loss = cross_entropy_with_logits(x, {0});
  backward_pass(loss);
  CHECK(x->grad[0] == doctest::Approx(-0.5).epsilon(1e-9));
  CHECK(x->grad[1] == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("elementwise square gradient") {
  auto w = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto loss = sum_all(multiply(w, w));
  backward_pass(loss);
  CHECK(w->grad[0] == doctest::Approx(2.0));
  CHECK(w->grad[1] == doctest::Approx(4.0));
}

TEST_CASE("leaf off the loss path keeps zero gradient") {
  auto w = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto unused = Tensor<double>::from({2}, {5.0, 5.0}, true);
  unused->zero_grad();
  auto loss = sum_all(w);
  backward_pass(loss);
  CHECK(unused->grad[0] == 0.0);
  CHECK(unused->grad[1] == 0.0);
}

TEST_CASE("finite difference oracle basics") {
  auto f_sum = [](const std::vector<double>& x) {
    double s = 0;
    for (double v : x) s += v;
    return s;
  };
  auto g = finite_difference_gradient<double>(f_sum, {1.0, -2.0, 3.0}, 1e-4);
  for (double v : g) CHECK(v == doctest::Approx(1.0).epsilon(1e-7));

  auto f_halfsq = [](const std::vector<double>& x) { return 0.5 * x[0] * x[0]; };
  auto g2 = finite_difference_gradient<double>(f_halfsq, {3.0}, 1e-4);
  CHECK(std::abs(g2[0] - 3.0) < 1e-6);
}

TEST_CASE("non-deterministic oracle function rejected") {
  int calls = 0;
  auto f = [&calls](const std::vector<double>&) { return static_cast<double>(calls++); };
  CHECK_THROWS_AS(finite_difference_gradient<double>(f, {1.0}, 1e-4), NumericError);
}

TEST_CASE("gradient check covers every primitive") {
  Rng rng(1234);
  for (int trial = 0; trial < 20; ++trial) {
    // add / multiply with broadcasting
    {
      auto a = randt(rng, {3, 4});
      auto b = randt(rng, {4}, false);
      check_grad([&](DTensor t) { return mean_all(multiply(add(t, b), t)); }, a);
    }
    // matmul, 2D weight under a batch
    {
      auto x = randt(rng, {2, 3, 4}, false);
      auto w = randt(rng, {4, 5});
      check_grad([&](DTensor t) { return mean_all(matmul(x, t)); }, w);
    }
    // batched matmul, both sides
    {
      auto a = randt(rng, {2, 3, 4});
      auto b = randt(rng, {2, 4, 3}, false);
      check_grad([&](DTensor t) { return mean_all(matmul(t, b)); }, a);
      auto a2 = randt(rng, {2, 3, 4}, false);
      auto b2 = randt(rng, {2, 4, 3});
      check_grad([&](DTensor t) { return mean_all(matmul(a2, t)); }, b2);
    }
    // scale, relu, gelu
    {
      auto a = randt(rng, {7});
      check_grad([&](DTensor t) { return sum_all(scale(t, 2.5)); }, a);
      check_grad([&](DTensor t) { return sum_all(gelu(t)); }, a);
      // nudge away from the relu kink
      for (auto& v : a->data)
        if (std::abs(v) < 1e-2) v += 0.05;
      check_grad([&](DTensor t) { return sum_all(relu(t)); }, a);
    }
    // softmax
    {
      auto a = randt(rng, {3, 5});
      auto w = randt(rng, {3, 5}, false);
      check_grad([&](DTensor t) { return sum_all(multiply(softmax(t), w)); }, a);
    }
    // layer_norm w.r.t. input, gamma, beta
    {
      auto x = randt(rng, {4, 6});
      auto g = randt(rng, {6});
      auto b = randt(rng, {6});
      auto wrap = [&](DTensor xx, DTensor gg, DTensor bb) {
        auto mixer = Tensor<double>::from({4, 6}, std::vector<double>(24, 0.3), false);
        return mean_all(multiply(layer_norm(xx, gg, bb), mixer));
      };
      check_grad([&](DTensor t) { return wrap(t, g, b); }, x, 5e-4);
      check_grad([&](DTensor t) { return wrap(x, t, b); }, g, 5e-4);
      check_grad([&](DTensor t) { return wrap(x, g, t); }, b, 5e-4);
    }
    // l2_normalize
    {
      auto x = randt(rng, {3, 4});
      auto w = randt(rng, {3, 4}, false);
      check_grad([&](DTensor t) { return sum_all(multiply(l2_normalize(t), w)); }, x);
    }
    // cross_entropy_with_logits
    {
      auto x = randt(rng, {4, 3});
      std::vector<int> y = {0, 2, 1, 2};
      check_grad([&](DTensor t) { return cross_entropy_with_logits(t, y); }, x);
    }
    // reshape, permute, transpose, token ops, mean
    {
      auto x = randt(rng, {2, 3, 4});
      auto w = randt(rng, {4, 3, 2}, false);
      check_grad(
          [&](DTensor t) {
            return mean_all(multiply(permute(reshape(t, {3, 2, 4}), {2, 0, 1}), w));
          },
          x);
      check_grad([&](DTensor t) { return mean_all(transpose(t)); }, x);
      auto cls = randt(rng, {1, 1, 4});
      check_grad(
          [&](DTensor t) { return mean_all(select_token(prepend_token(t, x), 0)); }, cls);
      auto x2 = randt(rng, {2, 3, 4});
      check_grad(
          [&](DTensor t) { return mean_all(select_token(prepend_token(cls, t), 2)); }, x2);
    }
  }
}

TEST_CASE("backward against finite differences on a random 3-layer net") {
  Rng rng(777);
  auto x = randt(rng, {5, 6}, false);
  std::vector<int> y = {0, 1, 2, 1, 0};
  auto w1 = randt(rng, {6, 8});
  auto b1 = randt(rng, {8});
  auto w2 = randt(rng, {8, 8});
  auto b2 = randt(rng, {8});
  auto w3 = randt(rng, {8, 3});
  auto b3 = randt(rng, {3});
  auto net = [&](DTensor w1t) {
    auto h1 = gelu(add(matmul(x, w1t), b1));
    auto h2 = gelu(add(matmul(h1, w2), b2));
    auto logits = add(matmul(h2, w3), b3);
    return cross_entropy_with_logits(logits, y);
  };
  check_grad(net, w1);
}

TEST_CASE("softmax rows sum to one; layer_norm moments") {
  Rng rng(42);
  auto x = randt(rng, {6, 9}, false);
  auto s = softmax(x);
  for (int r = 0; r < 6; ++r) {
    double sum = 0;
    for (int i = 0; i < 9; ++i) sum += s->data[r * 9 + i];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  auto g = Tensor<double>::from({9}, std::vector<double>(9, 1.0));
  auto b = Tensor<double>::from({9}, std::vector<double>(9, 0.0));
  auto ln = layer_norm(x, g, b);
  for (int r = 0; r < 6; ++r) {
    double mu = 0, var = 0;
    for (int i = 0; i < 9; ++i) mu += ln->data[r * 9 + i];
    mu /= 9;
    for (int i = 0; i < 9; ++i) {
      double d = ln->data[r * 9 + i] - mu;
      var += d * d;
    }
    var /= 9;
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("backward accumulation is linear") {
  Rng rng(5);
  auto w = randt(rng, {4});
  auto build = [&](DTensor t) {
    auto l1 = sum_all(multiply(t, t));
    auto l2 = mean_all(gelu(t));
    return std::pair{l1, l2};
  };
  // grad of 2*L1 + 3*L2
  auto [l1, l2] = build(w);
  auto combined = add(scale(l1, 2.0), scale(l2, 3.0));
  w->zero_grad();
  backward_pass(combined);
  auto combined_grad = w->grad;

  auto [l1b, l2b] = build(w);
  w->zero_grad();
  backward_pass(l1b);
  auto g1 = w->grad;
  w->zero_grad();
  backward_pass(l2b);
  auto g2 = w->grad;
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(combined_grad[i] - (2.0 * g1[i] + 3.0 * g2[i])) < 1e-6);
}

TEST_CASE("graph is single use") {
  auto w = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto loss = sum_all(w);
  backward_pass(loss);
  CHECK_THROWS_AS(backward_pass(loss), UsageError);
}

TEST_CASE("shape errors name the op and shapes") {
  auto a = Tensor<double>::from({2, 3}, std::vector<double>(6, 1.0));
  auto b = Tensor<double>::from({4, 2}, std::vector<double>(8, 1.0));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,2)") != std::string::npos);
  }
}

TEST_CASE("strict finite flag rejects non-finite input") {
  strict_finite() = true;
  auto a = Tensor<double>::from({2}, {1.0, std::nan("")});
  auto b = Tensor<double>::from({2}, {1.0, 1.0});
  CHECK_THROWS_AS(add(a, b), NumericError);
  strict_finite() = false;
}

TEST_CASE("apply_primitive dispatch matches direct calls") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  auto c1 = apply_primitive(OpKind::matmul, std::vector<DTensor>{a, b});
  auto c2 = matmul(a, b);
  for (int i = 0; i < 4; ++i) CHECK(c1->data[i] == c2->data[i]);
  CHECK_THROWS_AS(apply_primitive(OpKind::relu, std::vector<DTensor>{a, b}), ShapeError);
}
