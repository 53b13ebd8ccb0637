#include <doctest.h>

#include <cmath>
#include <sstream>

#include "reference.hpp"
#include "sparling/binio.hpp"
#include "sparling/checkpoint.hpp"
#include "sparling/datagen.hpp"
#include "sparling/models.hpp"

using namespace sparling;

namespace {

Tensor batch_of(const std::vector<Sample>& samples, std::size_t begin, std::size_t end) {
  std::vector<const Tensor*> imgs;
  for (std::size_t i = begin; i < end; ++i) imgs.push_back(&samples[i].image);
  return stack_images(imgs);
}

Parameter& param(Model& m, const std::string& name) {
  for (Parameter* p : m.parameters())
    if (p->name == name) return *p;
  throw std::runtime_error("no parameter " + name);
}

ModelConfig small(BottleneckKind kind) {
  ModelConfig c;
  c.kind = kind;
  c.width = 8;
  return c;
}

}  // namespace

TEST_SUITE("models") {
  TEST_CASE("no bottleneck gives dense activations") {
    Model m(small(BottleneckKind::None), 1);
    const auto data = generate(DomainSpec{}, 5, 20);
    Graph g(false);
    const auto out = m.forward(g, batch_of(data, 0, 20), Mode::Train);
    const double d = nonzero_fraction(g.value(out.motifs));
    CHECK(d > 0.35);
    CHECK(d < 0.65);
    CHECK_FALSE(out.aux_loss.has_value());
  }

  TEST_CASE("sparling-MT reaches its target density once thresholds settle") {
    ModelConfig c = small(BottleneckKind::SparlingMT);
    c.initial_density = 0.001;
    Model m(c, 2);
    const DomainSpec spec;
    const auto warm = generate(spec, 6, 1500);
    for (std::size_t i = 0; i < warm.size(); i += 10) {
      Graph g(false);
      m.forward(g, batch_of(warm, i, i + 10), Mode::Train);
    }
    const auto test = generate(spec, 7, 1000);
    double nonzero = 0.0;
    for (std::size_t i = 0; i < test.size(); i += 50) nonzero += nonzero_fraction(m.encode_eval(batch_of(test, i, i + 50)));
    const double realized = nonzero / 20.0;
    CHECK(realized > 0.0008);
    CHECK(realized < 0.0012);
  }

  TEST_CASE("encoder is translation equivariant away from the border") {
    Model m(small(BottleneckKind::None), 3);
    ref::Rng rng(1);
    Tensor a({1, 32, 32, 1}), b({1, 32, 32, 1});
    for (int r = 10; r < 20; ++r)
      for (int c = 10; c < 20; ++c) {
        const float v = rng.coin(0.4) ? 1.0f : 0.0f;
        a[r * 32 + c] = v;
        b[(r + 2) * 32 + (c + 2)] = v;
      }
    Graph g(false);
    const NodeId za = m.encode(g, g.constant(a), Mode::Eval, nullptr, nullptr);
    const NodeId zb = m.encode(g, g.constant(b), Mode::Eval, nullptr, nullptr);
    const int C = m.config().bottleneck_channels;
    double worst = 0.0;
    for (int r = 6; r < 24; ++r)
      for (int c = 6; c < 24; ++c)
        for (int k = 0; k < C; ++k) {
          const float va = g.value(za)[(r * 32 + c) * C + k];
          const float vb = g.value(zb)[((r + 2) * 32 + c + 2) * C + k];
          worst = std::max(worst, static_cast<double>(std::abs(va - vb)));
        }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("decoder is total on an all-zero motif map") {
    Model m(small(BottleneckKind::SparlingMT), 4);
    const Tensor logits = m.decode_eval(Tensor({3, 32, 32, 4}));
    CHECK(logits.shape() == Shape{3, 4, 5});
    CHECK(all_finite(logits));
    CHECK(greedy_decode(logits, 4).size() == 3);
    CHECK_THROWS_AS(m.decode_eval(Tensor({1, 32, 32, 3})), ShapeError);
    CHECK_THROWS_AS(m.encode_eval(Tensor({1, 16, 16, 1})), ShapeError);
  }

  TEST_CASE("greedy decode drops blanks") {
    Tensor logits({1, 4, 5}, 0.0f);
    logits[0 * 5 + 3] = 1.0f;
    logits[1 * 5 + 1] = 1.0f;
    logits[2 * 5 + 4] = 1.0f;
    logits[3 * 5 + 4] = 1.0f;
    CHECK(greedy_decode(logits, 4) == std::vector<std::vector<int>>{{3, 1}});
    CHECK(slot_targets({{2}, {0, 1, 3}}, 4, 4) == std::vector<int>{2, 4, 4, 4, 0, 1, 3, 4});
    CHECK_THROWS(slot_targets({{0, 1, 2, 3, 0}}, 4, 4));
  }

  TEST_CASE("L1 with zero weight is the plain bottleneck") {
    ModelConfig l1 = small(BottleneckKind::L1);
    l1.l1_lambda = 0.0;
    Model a(l1, 9), b(small(BottleneckKind::None), 9);
    const auto data = generate(DomainSpec{}, 2, 4);
    const Tensor x = batch_of(data, 0, 4);
    Graph g(false);
    const auto oa = a.forward(g, x, Mode::Train);
    const auto ob = b.forward(g, x, Mode::Train);
    CHECK(g.value(oa.motifs) == g.value(ob.motifs));
    CHECK_FALSE(oa.aux_loss.has_value());
    l1.l1_lambda = 2.0;
    Model c(l1, 9);
    const auto oc = c.forward(g, x, Mode::Train);
    REQUIRE(oc.aux_loss.has_value());
    double mean = 0.0;
    for (float v : g.value(oc.motifs).data()) mean += v;
    mean /= static_cast<double>(g.value(oc.motifs).size());
    CHECK(g.value(*oc.aux_loss).item() == doctest::Approx(2.0 * mean).epsilon(1e-5));
  }

  TEST_CASE("KL bottleneck below the half point is silent") {
    ModelConfig k = small(BottleneckKind::KL);
    k.kl_lambda = 1.0;
    Model m(k, 5);
    Tensor& beta = param(m, "enc/bottleneck_bn/beta").value;
    for (std::size_t i = 0; i < beta.size(); ++i) beta[i] = -100.0f;
    const auto data = generate(DomainSpec{}, 2, 4);
    Graph g(false);
    const auto out = m.forward(g, batch_of(data, 0, 4), Mode::Train);
    CHECK(nonzero_fraction(g.value(out.motifs)) == 0.0);
    REQUIRE(out.aux_loss.has_value());
    CHECK(std::isfinite(g.value(*out.aux_loss).item()));
  }

  TEST_CASE("config validation and names") {
    ModelConfig c;
    c.pool = 5;
    CHECK_THROWS(c.validate());
    c = ModelConfig{};
    c.residual_units = 0;
    CHECK_THROWS(c.validate());
    c = ModelConfig{};
    c.residual_units = 2;
    CHECK(c.receptive_field() == 9);
    CHECK(parse_bottleneck("sparling") == BottleneckKind::SparlingMT);
    CHECK(parse_bottleneck(to_string(BottleneckKind::KL)) == BottleneckKind::KL);
    CHECK_THROWS(parse_bottleneck("dropout"));
    c.kind = BottleneckKind::SparlingST;
    c.kl_rho = 0.01;
    const ModelConfig back = ModelConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
    CHECK(back.kind == BottleneckKind::SparlingST);
    CHECK(back.kl_rho == 0.01);
  }

  TEST_CASE("checkpoint round trip reproduces outputs") {
    Model m(small(BottleneckKind::SparlingMT), 8);
    const auto data = generate(DomainSpec{}, 4, 30);
    for (std::size_t i = 0; i < 30; i += 10) {
      Graph g(false);
      m.forward(g, batch_of(data, i, i + 10), Mode::Train);
    }
    m.sparsity().thresholds[1] = 0.25f;
    m.add_trained_examples(30);
    std::stringstream ss;
    write_checkpoint(ss, m.to_checkpoint());
    Model r = Model::from_checkpoint(read_checkpoint(ss));
    const Tensor x = batch_of(data, 0, 5);
    CHECK(r.encode_eval(x) == m.encode_eval(x));
    CHECK(r.decode_eval(m.encode_eval(x)) == m.decode_eval(m.encode_eval(x)));
    CHECK(r.trained_examples() == 30);
    CHECK(r.sparsity().thresholds == m.sparsity().thresholds);
    CHECK(r.sparsity().density == m.sparsity().density);

    Checkpoint wrong = m.to_checkpoint();
    ModelConfig wider = small(BottleneckKind::SparlingMT);
    wider.width = 16;
    wrong.meta["model"] = wider.to_json();
    CHECK_THROWS_AS(Model::from_checkpoint(wrong), binio::FormatError);
  }

  TEST_CASE("removing the bottleneck freezes exactly the encoder") {
    Model m(small(BottleneckKind::SparlingMT), 6);
    m.remove_bottleneck_and_freeze_encoder();
    CHECK(m.config().kind == BottleneckKind::None);
    const auto enc = m.encoder_parameters();
    for (Parameter* p : m.parameters()) {
      const bool in_encoder = std::find(enc.begin(), enc.end(), p) != enc.end();
      CHECK(p->frozen == in_encoder);
    }
    const Model back = Model::from_checkpoint(m.to_checkpoint());
    CHECK(back.config().kind == BottleneckKind::None);
  }
}
