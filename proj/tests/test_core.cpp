#include <doctest.h>

#include <cmath>

#include "sparling/graph.hpp"
#include "sparling/layers.hpp"
#include "sparling/optim.hpp"
#include "sparling/tensor.hpp"

using namespace sparling;

TEST_SUITE("tensor") {
  TEST_CASE("construction and shape bookkeeping") {
    Tensor t({2, 3}, 1.5f);
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.dim(-1) == 3);
    CHECK(t.channels() == 3);
    CHECK(Tensor::scalar(4.0f).item() == 4.0f);
    CHECK_THROWS_AS(t.item(), ShapeError);
    CHECK_THROWS_AS(t.dim(2), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    CHECK(shape_str({2, 3}) == "[2,3]");
  }

  TEST_CASE("reshape keeps data and checks element count") {
    Tensor t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    const Tensor r = t.reshaped({3, 2});
    CHECK(r.shape() == Shape{3, 2});
    CHECK(r[5] == 6.0f);
    CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
  }

  TEST_CASE("copies are deep") {
    Tensor a({2}, 1.0f);
    Tensor b = a;
    b[0] = 5.0f;
    CHECK(a[0] == 1.0f);
  }

  TEST_CASE("all_finite") {
    Tensor t({3}, 0.0f);
    CHECK(all_finite(t));
    t[1] = std::nanf("");
    CHECK_FALSE(all_finite(t));
  }
}

TEST_SUITE("graph") {
  TEST_CASE("linear function has constant derivative") {
    Graph g;
    const NodeId x = g.variable(Tensor::scalar(3.0f));
    const NodeId y = ops::scale(g, x, 2.0f);
    g.backward(y);
    CHECK(g.value(y).item() == 6.0f);
    CHECK(g.grad(x).item() == 2.0f);
  }

  TEST_CASE("fan-out accumulates gradient") {
    Graph g;
    const NodeId x = g.variable(Tensor({2}, std::vector<float>{1, -2}));
    const NodeId y = ops::sum_all(g, ops::add(g, x, ops::scale(g, x, 3.0f)));
    g.backward(y);
    CHECK(g.grad(x) == Tensor({2}, 4.0f));
  }

  TEST_CASE("constants receive exactly zero gradient") {
    Graph g;
    const NodeId c = g.constant(Tensor({2}, 1.0f));
    const NodeId x = g.variable(Tensor({2}, 2.0f));
    g.backward(ops::sum_all(g, ops::add(g, x, c)));
    CHECK(g.grad(c) == Tensor({2}, 0.0f));
    CHECK_FALSE(g.requires_grad(c));
  }

  TEST_CASE("non-scalar loss is rejected") {
    Graph g;
    const NodeId x = g.variable(Tensor({2}, 1.0f));
    CHECK_THROWS_AS(g.backward(x), ShapeError);
  }

  TEST_CASE("parameters accumulate across backward passes; frozen ones are constants") {
    Parameter p{"w", Tensor({1}, 2.0f), {}, false};
    Parameter f{"f", Tensor({1}, 5.0f), {}, true};
    for (int i = 0; i < 2; ++i) {
      Graph g;
      const NodeId w = g.parameter(p);
      const NodeId fr = g.parameter(f);
      g.backward(ops::sum_all(g, ops::add(g, ops::scale(g, w, 3.0f), fr)));
    }
    CHECK(p.grad[0] == 6.0f);
    CHECK(f.grad.empty());
  }

  TEST_CASE("grad disabled graphs record no backward") {
    Graph g(false);
    const NodeId x = g.variable(Tensor({1}, 1.0f));
    CHECK_FALSE(g.requires_grad(ops::relu(g, x)));
  }
}

TEST_SUITE("optim") {
  TEST_CASE("zero gradient leaves parameters unchanged") {
    Parameter p{"w", Tensor({3}, std::vector<float>{1, -2, 3}), Tensor({3}), false};
    std::vector<Parameter*> ps{&p};
    OptimizerState st;
    st.learning_rate = 0.1;
    for (int i = 0; i < 3; ++i) adam_step(ps, st);
    CHECK(p.value == Tensor({3}, std::vector<float>{1, -2, 3}));
  }

  TEST_CASE("bias-corrected first step moves by the learning rate") {
    Parameter p{"w", Tensor({1}, 0.0f), Tensor({1}, 1.0f), false};
    std::vector<Parameter*> ps{&p};
    OptimizerState st;
    st.learning_rate = 0.1;
    adam_step(ps, st);
    // m̂ = 1, v̂ = 1, so the step is lr · 1 / (1 + ε).
    CHECK(p.value[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-6));
    CHECK(st.step == 1);
  }

  TEST_CASE("frozen parameters are skipped and shape mismatches rejected") {
    Parameter p{"w", Tensor({1}, 1.0f), Tensor({1}, 1.0f), true};
    std::vector<Parameter*> ps{&p};
    OptimizerState st;
    adam_step(ps, st);
    CHECK(p.value[0] == 1.0f);
    Parameter q{"q", Tensor({2}), Tensor({2}), false};
    std::vector<Parameter*> two{&p, &q};
    CHECK_THROWS_AS(adam_step(two, st), ShapeError);
  }
}
