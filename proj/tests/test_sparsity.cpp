#include <doctest.h>

#include <algorithm>

#include "reference.hpp"
#include "sparling/sparsity.hpp"

using namespace sparling;

namespace {

// Sort-and-interpolate oracle.
double sorted_quantile(std::vector<float> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - static_cast<double>(lo)) * (static_cast<double>(v[lo + 1]) - v[lo]);
}

}  // namespace

TEST_SUITE("sparsity") {
  TEST_CASE("sparse_forward subtracts the threshold and clips") {
    SparsityState st(1, 0.5);
    st.thresholds[0] = 1.0f;
    Graph g;
    const NodeId z = g.variable(Tensor({3, 1}, std::vector<float>{0.5f, -0.2f, 1.5f}));
    const NodeId y = sparse_forward(g, z, st, Mode::Eval);
    CHECK(g.value(y) == Tensor({3, 1}, std::vector<float>{0.0f, 0.0f, 0.5f}));
    CHECK(st.buffered() == 0);
  }

  TEST_CASE("zero threshold is relu") {
    ref::Rng rng(3);
    const Tensor z = rng.normal_tensor({2, 3, 3, 4});
    SparsityState st(4, 0.1);
    Graph g;
    const NodeId a = sparse_forward(g, g.variable(z), st, Mode::Train);
    const NodeId b = ops::relu(g, g.variable(z));
    CHECK(g.value(a) == g.value(b));
    CHECK(st.buffered() == z.size());
  }

  TEST_CASE("threshold node receives exactly zero gradient") {
    ref::Rng rng(4);
    SparsityState st(3, 0.2);
    st.thresholds = Tensor({3}, std::vector<float>{0.1f, -0.3f, 0.5f});
    Graph g;
    const NodeId z = g.variable(rng.normal_tensor({2, 4, 3}));
    const NodeId y = sparse_forward(g, z, st, Mode::Train);
    const NodeId t = g.inputs(y).at(1);
    g.backward(ops::sum_all(g, ops::scale(g, y, 2.5f)));
    CHECK_FALSE(g.requires_grad(t));
    for (float v : g.grad(t).data()) CHECK(v == 0.0f);
    for (std::size_t i = 0; i < g.value(y).size(); ++i) CHECK(g.grad(z)[i] == (g.value(y)[i] > 0 ? 2.5f : 0.0f));
  }

  TEST_CASE("channel mismatch is rejected") {
    SparsityState st(2, 0.1);
    CHECK_THROWS_AS(sparse_apply(Tensor({3, 3}), st), ShapeError);
    CHECK_THROWS(SparsityState(0, 0.1));
    CHECK_THROWS(SparsityState(2, 0.0));
  }

  TEST_CASE("quantile uses linear interpolation") {
    CHECK(quantile({1, 2, 3, 4}, 0.75) == 3.25);
    CHECK(quantile({4, 1, 3, 2}, 1.0) == 4.0);
    CHECK(quantile({4, 1, 3, 2}, 0.0) == 1.0);
    CHECK_THROWS(quantile({}, 0.5));
    CHECK_THROWS(quantile({1.0f}, 1.5));
    ref::Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<float> v(static_cast<std::size_t>(rng.integer(1, 40)));
      for (float& x : v) x = static_cast<float>(rng.normal());
      const double p = rng.uniform(0, 1);
      CHECK(quantile(v, p) == doctest::Approx(sorted_quantile(v, p)).epsilon(1e-12));
    }
  }

  TEST_CASE("per-channel quantile at p=1 is the channel maximum") {
    const Tensor z({3, 2}, std::vector<float>{1, 9, 5, 2, 3, 4});
    CHECK(quantile_per_channel(z, 1.0) == Tensor({2}, std::vector<float>{5, 9}));
    CHECK(quantile_per_channel(Tensor({4, 1}, std::vector<float>{1, 2, 3, 4}), 0.75)[0] == 3.25f);
    CHECK_THROWS(quantile_per_channel(Tensor(), 0.5));
  }

  TEST_CASE("single threshold over a skewed pair of channels") {
    // channels [0,0,0,10] and [0,0,0,0]
    const Tensor z({4, 2}, std::vector<float>{0, 0, 0, 0, 0, 0, 10, 0});
    const Tensor t = quantile_per_channel(z, 0.875, ThresholdVariant::SingleThreshold);
    REQUIRE(t.size() == 1);
    CHECK(t[0] == static_cast<float>(sorted_quantile({0, 0, 0, 10, 0, 0, 0, 0}, 0.875)));
    CHECK(t[0] == 1.25f);
    SparsityState st(2, 0.125, ThresholdVariant::SingleThreshold);
    st.thresholds[0] = t[0];
    const Tensor y = sparse_apply(z, st);
    int ch0 = 0, ch1 = 0;
    for (int r = 0; r < 4; ++r) {
      ch0 += y[r * 2] > 0;
      ch1 += y[r * 2 + 1] > 0;
    }
    CHECK(ch0 == 1);
    CHECK(ch1 == 0);
    CHECK((ch0 + ch1) / 8.0 == 0.125);
  }

  TEST_CASE("EMA step") {
    SparsityState st(1, 0.5);
    st.thresholds[0] = 1.0f;
    st.buffer.assign(20, 2.0f);
    CHECK(threshold_update(st));
    CHECK(st.thresholds[0] == static_cast<float>(1.1));
    CHECK(st.buffered() == 0);
  }

  TEST_CASE("accumulation gate fires at 10·C/δ buffered elements") {
    SparsityState st(4, 0.005);
    CHECK(st.flush_bound() == 8000.0);
    st.buffer.assign(7996, 1.0f);
    CHECK_FALSE(threshold_update(st));
    CHECK(st.buffered() == 7996);
    st.buffer.assign(8000, 1.0f);
    CHECK(threshold_update(st));
  }

  TEST_CASE("extract_motifs") {
    CHECK(extract_motifs(Tensor({1, 5, 5, 3}))[0].entries.empty());
    Tensor a({1, 5, 5, 3});
    a[(3 * 5 + 4) * 3 + 2] = 0.7f;
    const auto maps = extract_motifs(a);
    REQUIRE(maps[0].entries.size() == 1);
    CHECK(maps[0].entries[0] == Motif{3, 4, 2, 0.7f});
    CHECK(maps[0].density() == doctest::Approx(1.0 / 75));
    CHECK(nonzero_fraction(a) == doctest::Approx(1.0 / 75));
    CHECK_THROWS_AS(extract_motifs(Tensor({5, 5, 3})), ShapeError);
  }
}
