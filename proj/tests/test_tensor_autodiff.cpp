#include <catch2/catch_amalgamated.hpp>

#include "emblaunder/gradcheck.hpp"
#include "emblaunder/graph.hpp"
#include "emblaunder/rng.hpp"
#include "emblaunder/tensor.hpp"

using namespace emblaunder;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, float lo = -1.5f, float hi = 1.5f) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.data) v = rng.uniform_f(lo, hi);
  return t;
}

// Keeps samples away from the kinks of relu/clamp so central differences
// with step 1e-3 stay valid.
Tensor random_tensor_kink_safe(Rng& rng, Shape shape, float kink, float margin) {
  Tensor t = random_tensor(rng, std::move(shape));
  for (float& v : t.data)
    if (std::fabs(v - kink) < margin) v = kink + (v >= kink ? margin : -margin);
  return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
  REQUIRE_THROWS_AS(Tensor({2}, {1.0f}), Error);
  REQUIRE_THROWS_AS(Tensor({1}, {std::numeric_limits<float>::quiet_NaN()}), Error);
  REQUIRE_THROWS_AS(Tensor({1}, {std::numeric_limits<float>::infinity()}), Error);
  Tensor ok({2, 2}, {1, 2, 3, 4});
  REQUIRE(ok.size() == 4);
}

TEST_CASE("l2_normalize examples") {
  Graph g;
  int a = g.constant(Tensor::vec({3, 0, 0, 0}));
  const Tensor& out = g.value(g.l2_normalize(a));
  REQUIRE(out.data[0] == Catch::Approx(1.0));
  REQUIRE(out.data[1] == 0.0f);

  int b = g.constant(Tensor::vec({1, 1}));
  const Tensor& ob = g.value(g.l2_normalize(b));
  REQUIRE(ob.data[0] == Catch::Approx(0.70710678).epsilon(1e-6));
  REQUIRE(ob.data[1] == Catch::Approx(0.70710678).epsilon(1e-6));

  int z = g.constant(Tensor::vec({0, 0}));
  try {
    g.l2_normalize(z);
    FAIL("expected ZeroNorm");
  } catch (const Error& e) {
    REQUIRE(e.code() == "ZeroNorm");
  }
}

TEST_CASE("cosine_similarity examples and properties") {
  Graph g;
  int e1 = g.constant(Tensor::vec({1, 0}));
  int e2 = g.constant(Tensor::vec({0, 1}));
  int d11 = g.constant(Tensor::vec({1, 1}));
  REQUIRE(g.scalar_value(g.cosine_similarity(e1, e1)) == Catch::Approx(1.0));
  REQUIRE(g.scalar_value(g.cosine_similarity(e1, e2)) == Catch::Approx(0.0).margin(1e-7));
  REQUIRE(g.scalar_value(g.cosine_similarity(d11, e1)) == Catch::Approx(0.70710678).epsilon(1e-6));

  // symmetry is exact, |value| bounded
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Graph gg;
    Tensor u = random_tensor(rng, {8});
    Tensor v = random_tensor(rng, {8});
    if (vec_norm(u) == 0.0f || vec_norm(v) == 0.0f) continue;
    int a = gg.constant(u);
    int b = gg.constant(v);
    const float c1 = gg.scalar_value(gg.cosine_similarity(a, b));
    const float c2 = gg.scalar_value(gg.cosine_similarity(b, a));
    REQUIRE(c1 == c2);
    REQUIRE(std::fabs(c1) <= 1.0f + 1e-6f);
  }

  Graph mismatched;
  int a3 = mismatched.constant(Tensor::vec({1, 2, 3}));
  int a2 = mismatched.constant(Tensor::vec({1, 2}));
  REQUIRE_THROWS_AS(mismatched.cosine_similarity(a3, a2), Error);
}

TEST_CASE("backward trivial examples") {
  // loss = sum(x*x) -> grad 2x
  Graph g;
  int x = g.input(Tensor::vec({1, 2, 3}), true);
  g.backward(g.sum_all(g.mul(x, x)));
  const Tensor& gx = g.grad(x);
  REQUIRE(gx.data[0] == Catch::Approx(2.0));
  REQUIRE(gx.data[1] == Catch::Approx(4.0));
  REQUIRE(gx.data[2] == Catch::Approx(6.0));

  // cosine(x, x) is constant 1 -> zero gradient
  Graph g2;
  int y = g2.input(Tensor::vec({0.5f, -1.25f, 2.0f}), true);
  g2.backward(g2.cosine_similarity(y, y));
  for (float v : g2.grad(y).data) REQUIRE(v == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("backward rejects non-scalar and detached outputs") {
  Graph g;
  int x = g.input(Tensor::vec({1, 2}), true);
  int y = g.add(x, x);
  REQUIRE_THROWS_AS(g.backward(y), Error);

  Graph g2;
  int c = g2.constant(Tensor::vec({1, 2}));
  int s = g2.sum_all(c);
  try {
    g2.backward(s);
    FAIL("expected DetachedGraph");
  } catch (const Error& e) {
    REQUIRE(e.code() == "DetachedGraph");
  }
}

TEST_CASE("backward linearity: grad of sum of losses equals sum of grads") {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor xv = random_tensor(rng, {6});
    Tensor wv = random_tensor(rng, {6});

    Graph g;
    int x = g.input(xv, true);
    int w = g.constant(wv);
    int la = g.sum_all(g.mul(x, w));
    int lb = g.mean_all(g.mul(x, x));
    g.backward(g.add(la, lb));
    Tensor combined = g.grad(x);

    Graph ga;
    int xa = ga.input(xv, true);
    ga.backward(ga.sum_all(ga.mul(xa, ga.constant(wv))));
    Tensor grad_a = ga.grad(xa);

    Graph gb;
    int xb = gb.input(xv, true);
    gb.backward(gb.mean_all(gb.mul(xb, xb)));
    Tensor grad_b = gb.grad(xb);

    for (int64_t i = 0; i < combined.size(); ++i)
      REQUIRE(combined.data[i] ==
              Catch::Approx(grad_a.data[i] + grad_b.data[i]).margin(1e-6));
  }
}

TEST_CASE("deterministic forward: identical graph, identical bits") {
  Rng rng(31);
  Tensor xv = random_tensor(rng, {4, 4});
  Tensor wv = random_tensor(rng, {4, 4});
  auto run = [&]() {
    Graph g;
    int x = g.constant(xv);
    int w = g.constant(wv);
    return g.value(g.softmax_rows(g.gelu(g.matmul(x, w)))).data;
  };
  REQUIRE(run() == run());
}

TEST_CASE("finite-difference gradients across the op set") {
  Rng rng(41);
  const double tol = 1e-3;
  const int instances = 21;

  SECTION("add/sub/mul") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}),
                                 random_tensor(rng, {3, 4})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.mul(g.sub(g.add(id[0], id[1]), id[2]), id[0]));
          },
          ins, tol);
      INFO(rep.detail);
      REQUIRE(rep.pass);
    }
  }

  SECTION("scalar-broadcast mul") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {5}), random_tensor(rng, {1})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            return g.sum_all(g.mul(id[0], id[1]));
          },
          ins, tol);
      REQUIRE(rep.pass);
    }
  }

  SECTION("matmul all transpose combinations") {
    for (int t = 0; t < instances; ++t) {
      const bool ta = t % 2 == 1, tb = (t / 2) % 2 == 1;
      std::vector<Tensor> ins = {random_tensor(rng, ta ? Shape{4, 3} : Shape{3, 4}),
                                 random_tensor(rng, tb ? Shape{5, 4} : Shape{4, 5})};
      auto rep = grad_check(
          [ta, tb](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.matmul(id[0], id[1], ta, tb));
          },
          ins, tol);
      INFO(rep.detail);
      REQUIRE(rep.pass);
    }
  }

  SECTION("vector-matrix matmul") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {4}), random_tensor(rng, {4, 3})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            return g.sum_all(g.matmul(id[0], id[1]));
          },
          ins, tol);
      REQUIRE(rep.pass);
    }
  }

  SECTION("patch embedding") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {3, 4, 4}),
                                 random_tensor(rng, {12, 5})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.patch_embed(id[0], id[1], 2));
          },
          ins, tol);
      INFO(rep.detail);
      REQUIRE(rep.pass);
    }
  }

  SECTION("conv2d stride 1 and 2") {
    for (int t = 0; t < instances; ++t) {
      const int stride = t % 2 == 0 ? 1 : 2;
      std::vector<Tensor> ins = {random_tensor(rng, {2, 6, 6}),
                                 random_tensor(rng, {3, 2, 3, 3}),
                                 random_tensor(rng, {3})};
      auto rep = grad_check(
          [stride](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.conv2d(id[0], id[1], id[2], stride, 1));
          },
          ins, tol);
      INFO(rep.detail);
      REQUIRE(rep.pass);
    }
  }

  SECTION("bias add") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {3, 5}), random_tensor(rng, {5})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.bias_add(id[0], id[1]));
          },
          ins, tol);
      REQUIRE(rep.pass);
    }
  }

  SECTION("relu away from the kink") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor_kink_safe(rng, {4, 4}, 0.0f, 5e-3f)};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) { return g.mean_all(g.relu(id[0])); },
          ins, tol);
      REQUIRE(rep.pass);
    }
  }

  SECTION("gelu") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {4, 4})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) { return g.mean_all(g.gelu(id[0])); },
          ins, tol);
      REQUIRE(rep.pass);
    }
  }

  SECTION("layer norm") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {3, 8}), random_tensor(rng, {8}),
                                 random_tensor(rng, {8})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.layer_norm(id[0], id[1], id[2]));
          },
          ins, tol);
      INFO(rep.detail);
      REQUIRE(rep.pass);
    }
  }

  SECTION("softmax rows") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {3, 6}),
                                 random_tensor(rng, {3, 6})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.mul(g.softmax_rows(id[0]), id[1]));
          },
          ins, tol);
      REQUIRE(rep.pass);
    }
  }

  SECTION("reductions") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {3, 4})};
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            int mr = g.mean_rows(id[0]);
            return g.add(g.sum_all(g.mul(mr, mr)), g.mean_all(id[0]));
          },
          ins, tol);
      REQUIRE(rep.pass);
      std::vector<Tensor> ins3 = {random_tensor(rng, {2, 3, 3})};
      auto rep3 = grad_check(
          [](auto& g, const std::vector<int>& id) {
            int mh = g.mean_hw(id[0]);
            return g.sum_all(g.mul(mh, mh));
          },
          ins3, tol);
      REQUIRE(rep3.pass);
    }
  }

  SECTION("bilinear resize with crop rects") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor(rng, {2, 6, 6})};
      const float y0 = rng.uniform_f(0.0f, 1.5f);
      const float x0 = rng.uniform_f(0.0f, 1.5f);
      const float y1 = rng.uniform_f(3.5f, 5.0f);
      const float x1 = rng.uniform_f(3.5f, 5.0f);
      auto rep = grad_check(
          [=](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.resize_bilinear(id[0], y0, x0, y1, x1, 4, 5));
          },
          ins, tol);
      INFO(rep.detail);
      REQUIRE(rep.pass);
    }
  }

  SECTION("l2_normalize and cosine") {
    for (int t = 0; t < instances; ++t) {
      Tensor u = random_tensor(rng, {6});
      Tensor v = random_tensor(rng, {6});
      if (vec_norm(u) < 0.3f || vec_norm(v) < 0.3f) continue;
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            int nu = g.l2_normalize(id[0]);
            return g.cosine_similarity(nu, id[1]);
          },
          {u, v}, tol);
      INFO(rep.detail);
      REQUIRE(rep.pass);
    }
  }

  SECTION("clamp straight-through away from bounds") {
    for (int t = 0; t < instances; ++t) {
      std::vector<Tensor> ins = {random_tensor_kink_safe(rng, {10}, 1.0f, 5e-3f)};
      for (float& v : ins[0].data)
        if (std::fabs(v + 1.0f) < 5e-3f) v = -1.0f + (v >= -1.0f ? 5e-3f : -5e-3f);
      auto rep = grad_check(
          [](auto& g, const std::vector<int>& id) {
            return g.mean_all(g.clamp(id[0], -1.0f, 1.0f));
          },
          ins, tol);
      REQUIRE(rep.pass);
    }
  }
}

TEST_CASE("clamp gradient is zero at and beyond the bounds") {
  Graph g;
  int x = g.input(Tensor::vec({-2.0f, 0.0f, 0.5f, 1.0f, 3.0f}), true);
  g.backward(g.sum_all(g.clamp(x, 0.0f, 1.0f)));
  const Tensor& gx = g.grad(x);
  REQUIRE(gx.data[0] == 0.0f);  // below
  REQUIRE(gx.data[1] == 0.0f);  // at lower bound
  REQUIRE(gx.data[2] == 1.0f);  // inside
  REQUIRE(gx.data[3] == 0.0f);  // at upper bound
  REQUIRE(gx.data[4] == 0.0f);  // above
}

TEST_CASE("grad_check oracle: random composite graph") {
  Rng rng(55);
  for (int t = 0; t < 5; ++t) {
    std::vector<Tensor> ins = {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 4}),
                               random_tensor(rng, {4})};
    auto rep = grad_check(
        [](auto& g, const std::vector<int>& id) {
          int h = g.gelu(g.bias_add(g.matmul(id[0], id[1]), id[2]));
          int s = g.softmax_rows(h);
          return g.mean_all(g.mul(s, h));
        },
        ins, 1e-3);
    INFO(rep.detail);
    REQUIRE(rep.pass);
  }
}

TEST_CASE("grad_check report: identity map and planted bug") {
  // identity: loss = sum(x), gradient exactly 1 everywhere
  auto rep = grad_check(
      [](auto& g, const std::vector<int>& id) { return g.sum_all(id[0]); },
      {Tensor::vec({0.3f, -0.7f, 1.1f})}, 1e-3);
  REQUIRE(rep.pass);
  REQUIRE(rep.max_rel_err == Catch::Approx(0.0).margin(1e-9));

  // deliberately corrupted gradient (off by 2x) must be flagged
  Graph g;
  int x = g.input(Tensor::vec({0.4f, -0.9f, 1.3f}), true);
  g.backward(g.sum_all(g.mul(x, x)));
  Tensor corrupted = g.grad(x);
  for (float& v : corrupted.data) v *= 2.0f;
  TensorD reference = g.grad(x).cast<double>();
  REQUIRE(max_rel_err(corrupted, reference) > 1e-3);
  REQUIRE(max_rel_err(g.grad(x), reference) <= 1e-3);
}

TEST_CASE("gradient map covers every grad-requiring leaf after backward") {
  Graph g;
  int x = g.input(Tensor::vec({1, 2}), true);
  int w = g.input(Tensor::vec({3, 4}), true);
  int frozen = g.constant(Tensor::vec({5, 6}));
  g.backward(g.sum_all(g.mul(g.add(x, frozen), w)));
  auto gm = g.gradient_map();
  REQUIRE(gm.count(x) == 1);
  REQUIRE(gm.count(w) == 1);
  REQUIRE(gm.count(frozen) == 0);
  REQUIRE(gm[x].shape == Shape{2});
}

TEST_CASE("non-finite values are rejected after ops") {
  Graph g;
  int big = g.constant(Tensor::vec({3e38f, 3e38f}));
  REQUIRE_THROWS_AS(g.add(big, big), Error);  // overflows to inf
}
