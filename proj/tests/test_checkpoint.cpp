#include <doctest.h>

#include <sstream>

#include "sparling/binio.hpp"
#include "sparling/checkpoint.hpp"

using namespace sparling;

TEST_SUITE("checkpoint") {
  TEST_CASE("records and metadata round trip") {
    Checkpoint c;
    c.meta["note"] = "x";
    c.put("a", Tensor({2, 3}, 1.5f));
    c.put("b", Tensor::scalar(-2.0f));
    c.put("a", Tensor({1}, 4.0f));
    std::stringstream ss;
    write_checkpoint(ss, c);
    const Checkpoint r = read_checkpoint(ss);
    CHECK(r.meta["note"] == "x");
    CHECK(r.get("a") == Tensor({1}, 4.0f));
    CHECK(r.get("b").item() == -2.0f);
    CHECK(r.records.size() == 2);
    CHECK_FALSE(r.has("c"));
    CHECK_THROWS_AS(r.get("c"), binio::FormatError);
  }

  TEST_CASE("bad magic, version and truncation are rejected") {
    Checkpoint c;
    c.put("a", Tensor({4}, 1.0f));
    std::stringstream ss;
    write_checkpoint(ss, c);
    const std::string bytes = ss.str();
    std::string magic = bytes;
    magic[0] = 'X';
    std::stringstream m(magic);
    CHECK_THROWS_AS(read_checkpoint(m), binio::FormatError);
    std::string version = bytes;
    version[4] = 9;
    std::stringstream v(version);
    CHECK_THROWS_WITH_AS(read_checkpoint(v), doctest::Contains("version"), binio::FormatError);
    std::stringstream t(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_checkpoint(t), binio::FormatError);
    CHECK_THROWS_AS(read_checkpoint("/nonexistent/file.sprl"), binio::FormatError);
  }

  TEST_CASE("sparsity state round trip") {
    SparsityState s(3, 0.0123, ThresholdVariant::SingleThreshold, 0.8);
    s.thresholds[0] = 0.7f;
    Checkpoint c;
    put_sparsity(c, s);
    const SparsityState r = get_sparsity(c);
    CHECK(r.variant == ThresholdVariant::SingleThreshold);
    CHECK(r.channels == 3);
    CHECK(r.density == 0.0123);
    CHECK(r.momentum == 0.8);
    CHECK(r.thresholds == s.thresholds);
    CHECK_THROWS_AS(get_sparsity(Checkpoint{}), binio::FormatError);
  }

  TEST_CASE("optimizer state round trip") {
    OptimizerState o;
    o.learning_rate = 1e-3;
    o.step = 17;
    o.first_moment = {Tensor({2}, 0.5f), Tensor({1}, -1.0f)};
    o.second_moment = {Tensor({2}, 0.25f), Tensor({1}, 2.0f)};
    Checkpoint c;
    put_optimizer(c, o, {"w", "b"});
    std::stringstream ss;
    write_checkpoint(ss, c);
    const OptimizerState r = get_optimizer(read_checkpoint(ss), {"w", "b"});
    CHECK(r.step == 17);
    CHECK(r.learning_rate == 1e-3);
    CHECK(r.first_moment == o.first_moment);
    CHECK(r.second_moment == o.second_moment);
    CHECK_THROWS(get_optimizer(c, {"w", "missing"}));
  }
}
