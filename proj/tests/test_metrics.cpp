#include <doctest.h>

#include <cmath>

#include "reference.hpp"
#include "sparling/metrics.hpp"

using namespace sparling;

namespace {

MotifMap map_of(int h, int w, int c, std::vector<Motif> entries) { return MotifMap{h, w, c, std::move(entries)}; }

Footprint square(int r) { return Footprint{-r, r, -r, r}; }

MotifTally tally_of(const std::vector<MotifMap>& preds, const std::vector<MotifMap>& truths, const FootprintTable& fps,
                    int pc, int tc) {
  MotifTally t(pc, tc);
  for (std::size_t i = 0; i < preds.size(); ++i) t.add(preds[i], truths[i], fps);
  return t;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("prediction far from every footprint is a false positive") {
    const auto truth = map_of(8, 8, 1, {{1, 1, 0, 1.0f}});
    const auto pred = map_of(8, 8, 1, {{6, 6, 0, 0.9f}});
    const auto c = classify_predictions(pred, truth, {square(1)});
    CHECK(c.classes[0] == MotifClass::FalsePositive);
    CHECK(c.matched[0] == -1);
    CHECK_FALSE(c.truth_covered[0]);
  }

  TEST_CASE("larger activation in a footprint is maximal") {
    const auto truth = map_of(8, 8, 1, {{3, 3, 0, 1.0f}});
    const auto pred = map_of(8, 8, 1, {{3, 3, 0, 0.9f}, {3, 4, 0, 0.4f}});
    const auto c = classify_predictions(pred, truth, {square(1)});
    CHECK(c.classes[0] == MotifClass::Maximal);
    CHECK(c.classes[1] == MotifClass::NonMaximal);
  }

  TEST_CASE("worked 4x4 instance") {
    const auto truth = map_of(4, 4, 1, {{1, 1, 0, 1.0f}});
    const auto pred = map_of(4, 4, 2, {{1, 2, 1, 0.5f}, {3, 3, 0, 0.2f}});
    const auto c = classify_predictions(pred, truth, {square(1)});
    CHECK(c.classes == std::vector<MotifClass>{MotifClass::Maximal, MotifClass::FalsePositive});
    CHECK(c.count(MotifClass::Maximal) == 1);
  }

  TEST_CASE("ties go to the lexicographically smallest prediction") {
    const auto truth = map_of(8, 8, 1, {{3, 3, 0, 1.0f}});
    const auto pred = map_of(8, 8, 2, {{3, 4, 0, 0.5f}, {3, 3, 1, 0.5f}});
    const auto c = classify_predictions(pred, truth, {square(1)});
    CHECK(c.classes == std::vector<MotifClass>{MotifClass::NonMaximal, MotifClass::Maximal});
  }

  TEST_CASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(classify_predictions(map_of(4, 4, 1, {}), map_of(5, 4, 1, {}), {square(1)}), ShapeError);
  }

  TEST_CASE("perfect and empty predictors") {
    const auto truth = map_of(8, 8, 2, {{2, 2, 0, 1.0f}, {5, 5, 1, 1.0f}});
    const FootprintTable fps{square(1), square(1)};
    const MotifTally perfect = tally_of({truth}, {truth}, fps, 2, 2);
    CHECK(*fpe(perfect) == 0.0);
    CHECK(*fne(perfect) == 0.0);
    CHECK(*ce(perfect).ce == 0.0);
    const MotifTally empty = tally_of({map_of(8, 8, 2, {})}, {truth}, fps, 2, 2);
    CHECK_FALSE(fpe(empty).has_value());
    CHECK(*fne(empty) == 1.0);
    CHECK_FALSE(ce(empty).ce.has_value());
  }

  TEST_CASE("consistent channel swap has zero confusion") {
    const auto truth = map_of(8, 8, 2, {{2, 2, 0, 1.0f}, {5, 5, 1, 1.0f}});
    const auto pred = map_of(8, 8, 2, {{2, 2, 1, 1.0f}, {5, 5, 0, 1.0f}});
    const auto r = ce(tally_of({pred}, {truth}, {square(1), square(1)}, 2, 2));
    CHECK(*r.ce == 0.0);
    CHECK(r.sigma == std::vector<int>{1, 0});
  }

  TEST_CASE("one channel shared by two glyph types") {
    MotifTally t(3, 3);
    // pred 0 sees true 0 and 1 (10 each); pred 1 sees true 2; pred 2 sees true 1
    t.match_counts = {{10, 10, 0}, {0, 0, 10}, {0, 10, 0}};
    t.maximal = 40;
    CHECK(*ce(t).ce == 0.25);
  }

  TEST_CASE("assignment agrees with permutation enumeration") {
    ref::Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
      const int n = rng.integer(1, 6);
      std::vector<std::vector<std::int64_t>> w(n, std::vector<std::int64_t>(n));
      for (auto& row : w)
        for (auto& v : row) v = rng.integer(0, 20);
      const auto a = max_weight_assignment(w);
      std::int64_t got = 0;
      for (int i = 0; i < n; ++i) got += w[i][a[i]];
      std::vector<int> p(n);
      std::iota(p.begin(), p.end(), 0);
      std::int64_t best = 0;
      do {
        std::int64_t s = 0;
        for (int i = 0; i < n; ++i) s += w[i][p[i]];
        best = std::max(best, s);
      } while (std::next_permutation(p.begin(), p.end()));
      CHECK(got == best);
    }
  }

  TEST_CASE("FPE, FNE and CE match the brute-force set oracle") {
    ref::Rng rng(31337);
    for (int trial = 0; trial < 200; ++trial) {
      const ref::MetricInstance inst = ref::random_instance(rng);
      const MotifTally t = tally_of(inst.preds, inst.truths, inst.footprints, inst.pred_channels, inst.true_channels);
      const ref::BruteMetrics want = ref::brute_metrics(inst.preds, inst.truths, inst.footprints, inst.pred_channels, inst.true_channels);
      CAPTURE(trial);
      CHECK(fpe(t) == want.fpe);
      CHECK(fne(t) == want.fne);
      CHECK(ce(t).ce == want.ce);
      for (std::size_t s = 0; s < inst.preds.size(); ++s) {
        const auto c = classify_predictions(inst.preds[s], inst.truths[s], inst.footprints);
        const auto b = ref::brute_classify(inst.preds[s], inst.truths[s], inst.footprints);
        for (std::size_t i = 0; i < c.classes.size(); ++i) CHECK(static_cast<int>(c.classes[i]) == b.cls[i]);
        CHECK(c.matched == b.chosen);
        CHECK(c.truth_covered == b.covered);
      }
    }
  }

  TEST_CASE("confusion matrix layout") {
    const auto truth = map_of(8, 8, 2, {{2, 2, 0, 1.0f}, {5, 5, 1, 1.0f}});
    const auto pred = map_of(8, 8, 2, {{2, 2, 1, 1.0f}, {0, 7, 0, 1.0f}});
    const MotifTally t = tally_of({pred}, {truth}, {square(1), square(1)}, 2, 2);
    const auto r = ce(t);
    const auto m = confusion_matrix(t, r.sigma);
    // true 0 matched by pred 1 -> sigma; true 1 uncovered; one false positive from pred 0
    CHECK(m[0][r.sigma[1]] == 1);
    CHECK(m[1][2] == 1);
    CHECK(m[2][r.sigma[0]] == 1);
  }

  TEST_CASE("edit distance and E2EE") {
    const std::vector<int> a{0, 7, 2, 6, 3, 4}, b{0, 7, 2, 6, 3};
    CHECK(e2ee({a}, {a}) == 0.0);
    CHECK(e2ee({a}, {b}) == 1.0 / 6.0);
    CHECK(e2ee({{0, 1, 2}}, {{}}) == 1.0);
    CHECK(e2ee({{}}, {{}}) == 0.0);
    CHECK_THROWS(e2ee({a}, {}));
    ref::Rng rng(8);
    std::vector<std::vector<int>> ts, ps;
    for (int i = 0; i < 300; ++i) {
      std::vector<int> t(static_cast<std::size_t>(rng.integer(0, 7))), p(static_cast<std::size_t>(rng.integer(0, 7)));
      for (int& v : t) v = rng.integer(0, 3);
      for (int& v : p) v = rng.integer(0, 3);
      CHECK(edit_distance(t, p) == ref::edit_distance(t, p));
      ts.push_back(t);
      ps.push_back(p);
    }
    CHECK(e2ee(ts, ps) == ref::e2ee(ts, ps));
  }

  TEST_CASE("entropy bound") {
    CHECK(entropy_bound({1e4, 10, 1e-300, 4}) < 1e-290);
    const double want = 1e5 * (binary_entropy_bits(5e-5) + 2e-4);
    CHECK(entropy_bound({1e4, 10, 5e-5, 4}) == doctest::Approx(want).epsilon(1e-14));
    for (double d : {1e-6, 1e-4, 1e-2, 0.3, 0.5, 0.9}) {
      const long double r = ref::entropy_bound(1024, 4, d, 6);
      CHECK(std::abs((entropy_bound({1024, 4, d, 6}) - static_cast<double>(r)) / static_cast<double>(r)) < 1e-12);
    }
    CHECK_THROWS(entropy_bound({1, 1, 0.0, 1}));
    CHECK_THROWS(entropy_bound({1, 1, 1.0, 1}));
  }

  TEST_CASE("activation binning") {
    std::vector<float> v;
    for (int i = 1; i <= 100; ++i) v.push_back(static_cast<float>(i));
    const auto b0 = ActivationBinning::fit(v, 0);
    CHECK(b0.edges.empty());
    CHECK(b0.apply(7.0f) == 50.5f);
    CHECK(b0.apply(0.0f) == 0.0f);
    const auto b1 = ActivationBinning::fit(v, 1);
    CHECK(b1.apply(10.0f) == 25.5f);
    CHECK(b1.apply(90.0f) == 75.5f);
    const auto b10 = ActivationBinning::fit(v, 10);
    for (float x : v) CHECK(b10.apply(x) == x);
    CHECK_THROWS(ActivationBinning::fit({}, 2));
  }

  TEST_CASE("binning sweep on an identity decoder") {
    // decode: sequence of indices of positive entries whose value exceeds 2
    std::vector<Tensor> acts{Tensor({1, 1, 1, 4}, std::vector<float>{1, 3, 0, 2.5f})};
    SequenceDecoder decode = [](const Tensor& t) {
      std::vector<int> s;
      for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] > 2.0f) s.push_back(static_cast<int>(i));
      return std::vector<std::vector<int>>{s};
    };
    const auto r = binning_sweep(acts, decode, {{1, 3}}, {0, 1, 2, 10});
    CHECK(r.baseline_e2ee == 0.0);
    REQUIRE(r.eta.has_value());
    CHECK(r.rows.back().increase == 0.0);
    CHECK(r.rows.front().k == 0);
    std::vector<Tensor> none{Tensor({1, 1, 1, 2})};
    CHECK_THROWS(binning_sweep(none, decode, {{}}, {0}));
  }

  TEST_CASE("report JSON round trip keeps undefined metrics distinct from zero") {
    MetricsReport r;
    r.fpe = 0.0;
    r.ce = 0.25;
    r.e2ee = 0.5;
    r.sigma = {1, 0};
    const MetricsReport back = MetricsReport::from_json(nlohmann::json::parse(r.to_json().dump()));
    CHECK(back.fpe == std::optional<double>(0.0));
    CHECK_FALSE(back.fne.has_value());
    CHECK(back.ce == std::optional<double>(0.25));
    CHECK(back.sigma == r.sigma);
  }
}
