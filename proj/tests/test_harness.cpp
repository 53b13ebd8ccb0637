#include <doctest.h>

#include <filesystem>
#include <algorithm>
#include <cmath>
#include <fstream>

#include "sparling/checkpoint.hpp"
#include "sparling/harness.hpp"

using namespace sparling;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sparling_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny() {
  RunConfig c = desk_config();
  c.name = "tiny";
  c.model.width = 8;
  c.train.budget = 400;
  c.train.validation_size = 20;
  c.train.test_size = 20;
  c.train.curve_every = 100;
  c.anneal.eval_every = 100;
  c.anneal.initial_target = 0.0;
  return c;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("config JSON is strict and round trips") {
    const RunConfig c = desk_config();
    const RunConfig back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
    CHECK(back.to_json() == c.to_json());

    nlohmann::json j = c.to_json();
    j["train"]["learning_rte"] = 0.1;
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j), doctest::Contains("learning_rte"), ConfigError);
    j = c.to_json();
    j["extra"] = 1;
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/config.json"), ConfigError);
  }

  TEST_CASE("validation catches inconsistent settings") {
    RunConfig c = desk_config();
    CHECK_NOTHROW(c.validate());
    c.train.seed = c.train.test_seed;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = desk_config();
    c.train.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = desk_config();
    c.train.budget = 15;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = desk_config();
    c.model.alphabet = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = desk_config();
    c.anneal.delta_update = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = desk_config();
    CHECK(c.delta_floor() == doctest::Approx(1.1 * min_density(c.domain)));
  }

  TEST_CASE("a short run writes its artifacts and can be swept") {
    const fs::path dir = scratch("run");
    const RunConfig c = tiny();
    std::vector<std::string> lines;
    const TrainResult r = train_run(c, dir, [&](const std::string& s) { lines.push_back(s); });
    CHECK(r.examples == 400);
    CHECK(r.events.size() == 4);
    CHECK(lines.size() == 4);
    const auto reductions = static_cast<int>(std::count_if(r.events.begin(), r.events.end(), [&](const AnnealEvent& e) {
      return e.delta < c.model.initial_density * 0.999;
    }));
    // The first validation always clears a zero target.
    CHECK(r.events[0].delta == doctest::Approx(0.75 * c.model.initial_density));
    const double reduced = r.events.back().delta;
    const int plateaus = static_cast<int>(std::lround(std::log(reduced / c.model.initial_density) / std::log(0.75)));
    CHECK(reductions >= 1);
    CHECK(r.final_delta == doctest::Approx(reduced));
    REQUIRE(r.plateau_checkpoints.size() == static_cast<std::size_t>(plateaus + 1));
    for (const auto& p : r.plateau_checkpoints) CHECK(fs::exists(p));
    for (const char* f : {"config.json", "events.jsonl", "curve.csv", "final.sprl"}) CHECK(fs::exists(dir / f));
    const std::string curve = read_file(dir / "curve.csv");
    CHECK(curve.rfind("examples,loss,delta,density,target,validation_accuracy\n100,", 0) == 0);
    CHECK(curve.find("\n400,") != std::string::npos);

    const Checkpoint ck = read_checkpoint((dir / "plateau_00.sprl").string());
    const auto validation = generate(c.domain, c.train.validation_seed, c.train.validation_size);
    for (const auto& p : {dir / "plateau_00.sprl", r.final_checkpoint}) {
      const Checkpoint saved = read_checkpoint(p.string());
      Model reloaded = Model::from_checkpoint(saved);
      CHECK(sequence_accuracy(reloaded, validation) ==
            doctest::Approx(saved.meta["validation_accuracy"].get<double>()).epsilon(1e-6));
    }
    CHECK(read_checkpoint(r.final_checkpoint.string()).meta.contains("validation_accuracy"));
    CHECK(checkpoint_domain(ck) == c.domain);
    CHECK(get_sparsity(ck).density == doctest::Approx(c.model.initial_density));

    fs::remove(dir / "plateau_00.sprl");
    std::vector<std::string> warnings;
    const auto rows = sweep_run(dir, &warnings);
    CHECK(rows.size() == static_cast<std::size_t>(plateaus));
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("plateau_00") != std::string::npos);
    CHECK(sweep_csv(rows).find("delta") != std::string::npos);
    CHECK_THROWS_AS(sweep_run(scratch("empty")), ConfigError);

    Model m = Model::from_checkpoint(read_checkpoint(r.final_checkpoint.string()));
    const auto test = generate(c.domain, c.train.test_seed, c.train.test_size);
    EvalOptions opt;
    opt.binning_ks = {0, 1};
    const Evaluation ev = evaluate(m, test, c.domain, opt);
    CHECK(ev.report.e2ee >= 0.0);
    CHECK(ev.report.e2ee <= 1.0);
    CHECK(ev.binning.has_value());
    const fs::path out = scratch("eval");
    write_evaluation(ev, out);
    CHECK(fs::exists(out / "report.json"));
    CHECK(fs::exists(out / "confusion.csv"));
  }

  TEST_CASE("same seed gives byte-identical artifacts") {
    RunConfig c = tiny();
    c.train.budget = 200;
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    train_run(c, a);
    train_run(c, b);
    for (const char* f : {"events.jsonl", "curve.csv", "final.sprl", "plateau_00.sprl"})
      CHECK(read_file(a / f) == read_file(b / f));
  }

  TEST_CASE("retrain rejects unusable checkpoints") {
    RunConfig c = tiny();
    c.train.budget = 100;
    const fs::path dir = scratch("retrain");
    train_run(c, dir);
    CHECK_THROWS_AS(retrain_head(dir / "final.sprl", c, 15, scratch("retrain_out")), ConfigError);
    RunConfig other = c;
    other.domain.post_noise = c.domain.post_noise + 0.01;
    CHECK_THROWS_AS(retrain_head(dir / "final.sprl", other, 100, scratch("retrain_out")), ConfigError);
    const fs::path out = scratch("retrain_ok");
    Model m = retrain_head(dir / "final.sprl", c, 20, out);
    CHECK(m.config().kind == BottleneckKind::None);
    CHECK(fs::exists(out / "retrained.sprl"));
    CHECK(fs::exists(out / "retrain_curve.csv"));
  }

  TEST_CASE("bootstrap mean and spearman") {
    const MetricSummary s = bootstrap_mean("x", {1.0, 2.0, 3.0, 4.0}, 2000, 7);
    CHECK(s.mean == 2.5);
    CHECK(s.count == 4);
    CHECK(s.ci_low <= 2.5);
    CHECK(s.ci_high >= 2.5);
    CHECK(s.ci_low >= 1.0);
    CHECK(s.ci_high <= 4.0);
    const MetricSummary one = bootstrap_mean("y", {0.3});
    CHECK(one.ci_low == 0.3);
    CHECK(one.ci_high == 0.3);
    CHECK_THROWS(bootstrap_mean("z", {}));

    CHECK(*spearman({1, 2, 3}, {10, 20, 30}) == doctest::Approx(1.0));
    CHECK(*spearman({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0));
    // Average ranks: a = {1, 2.5, 2.5, 4}, b = {1, 2, 3, 4}.
    CHECK(*spearman({1, 2, 2, 3}, {1, 2, 3, 4}) == doctest::Approx(0.9486832980505138));
    CHECK_FALSE(spearman({1, 1, 1}, {1, 2, 3}).has_value());
    CHECK_FALSE(spearman({1}, {1}).has_value());
    CHECK_THROWS(spearman({1, 2}, {1}));
  }

  TEST_CASE("aggregate requires matching configurations") {
    RunConfig c = tiny();
    auto fake_run = [&](const std::string& name, const RunConfig& cfg, double e2ee) {
      const fs::path dir = scratch(name);
      write_file(dir / "config.json", cfg.to_json().dump(2));
      MetricsReport r;
      r.e2ee = e2ee;
      r.ce = e2ee / 2;
      r.fpe = 0.5;
      r.fne = 0.2;
      r.density = 0.001;
      write_file(dir / "report.json", r.to_json().dump(2));
      return dir;
    };
    const fs::path a = fake_run("agg_a", c, 0.1);
    c.train.seed = 2;
    const fs::path b = fake_run("agg_b", c, 0.2);
    c.train.seed = 3;
    const fs::path d = fake_run("agg_c", c, 0.3);
    const Aggregate agg = aggregate_runs({a, b, d});
    CHECK(agg.runs.size() == 3);
    CHECK(agg.spearman_e2ee_ce.has_value());
    CHECK(*agg.spearman_e2ee_ce == doctest::Approx(1.0));
    CHECK_FALSE(agg.spearman_e2ee_fpe.has_value());
    CHECK(scatter_csv(agg).find('\n') != std::string::npos);

    c.train.learning_rate = 0.5;
    const fs::path bad = fake_run("agg_bad", c, 0.3);
    CHECK_THROWS_AS(aggregate_runs({a, bad}), ConfigError);
    CHECK_THROWS_AS(aggregate_runs({a}), ConfigError);
  }
}
