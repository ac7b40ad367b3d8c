#include <catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "nttlab/error.hpp"
#include "nttlab/model.hpp"

using namespace nttlab;
using namespace nttlab::model;

namespace {

/// Slot of packet i under a scheme, derived from the group layout alone.
std::size_t slot_of(std::size_t i, const AggregationScheme& s) {
  const std::size_t l2_packets = s.level2_groups * s.factor * s.factor;
  const std::size_t l1_packets = s.level1_groups * s.factor;
  if (i < l2_packets) return i / (s.factor * s.factor);
  if (i < l2_packets + l1_packets) return s.level2_groups + (i - l2_packets) / s.factor;
  return s.level2_groups + s.level1_groups + (i - l2_packets - l1_packets);
}

Tensor random_features(const NTTConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({c.window_length(), c.schema.width()});
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols() - 1; ++j) t.at(i, j) = rng.normal();
  }
  return t;
}

void jitter(NTTParams& p, std::uint64_t seed, double scale = 0.1) {
  Rng rng(seed);
  for (auto* param : p.all_parameters()) {
    for (auto& v : param->value.values()) v += scale * rng.normal();
  }
}

double predict_newest(const Tensor& features, NTTParams& p, const NTTConfig& c) {
  nn::Graph g(false);
  return g.value(predict_delay(g, forward_encoder(g, features, p, c), p)).at(0, 0);
}

/// A one-run trace long enough for one window of `length`.
trace::TraceDataset window_records(std::size_t length, std::uint64_t seed) {
  auto ds = testutil::random_dataset(seed, 1, static_cast<int>(length));
  return ds;
}

/// Closed form of the EWMA recursion started at x0.
double ewma_oracle(const std::vector<double>& xs, double alpha) {
  const std::size_t n = xs.size();
  double s = std::pow(1.0 - alpha, static_cast<double>(n - 1)) * xs[0];
  for (std::size_t k = 1; k < n; ++k) s += alpha * std::pow(1.0 - alpha, static_cast<double>(n - 1 - k)) * xs[k];
  return s;
}

}  // namespace

TEST_CASE("feature schema widths") {
  FeatureSchema full;
  CHECK(full.width() == 7);
  FeatureSchema no_delay{true, false, 3};
  FeatureSchema no_size{false, true, 3};
  CHECK(no_delay.width() == full.width() - 1);
  CHECK(no_size.width() == full.width() - 1);
  CHECK(no_size.col_receiver(0) == 1);
  CHECK(full.col_delay() == 5);
  CHECK(full.col_mask() == 6);
}

TEST_CASE("featurize_window") {
  const auto ds = window_records(32, 1);
  const FeatureSchema schema;
  SECTION("identity normalizer gives raw values") {
    const auto w = featurize_window(ds.records, 32, schema, Normalizer::identity());
    CHECK(w.features.at(31, schema.col_dt()) == 0.0);
    CHECK(w.target_delay == ds.records.back().delay);
    for (std::size_t i = 0; i < 32; ++i) {
      const auto& r = ds.records[i];
      CHECK(w.features.at(i, schema.col_dt()) == r.send_time - ds.records.back().send_time);
      CHECK(w.features.at(i, schema.col_dt()) <= 0.0);
      CHECK(w.features.at(i, schema.col_size()) == static_cast<double>(r.size));
      CHECK(w.features.at(i, schema.col_delay()) == r.delay);
      CHECK(w.features.at(i, schema.col_mask()) == 0.0);
      double hot = 0.0;
      for (std::size_t k = 0; k < 3; ++k) hot += w.features.at(i, schema.col_receiver(k));
      CHECK(hot == 1.0);
      CHECK(w.features.at(i, schema.col_receiver(static_cast<std::size_t>(r.receiver_id))) == 1.0);
    }
  }
  SECTION("identical timestamps give zero offsets") {
    auto same = ds;
    for (auto& r : same.records) r.send_time = 1.0;
    const auto w = featurize_window(same.records, 32, schema, Normalizer::identity());
    for (std::size_t i = 0; i < 32; ++i) CHECK(w.features.at(i, schema.col_dt()) == 0.0);
  }
  SECTION("z-normalization") {
    Normalizer n;
    n.size_mean = 100;
    n.size_std = 2;
    n.delay_mean = 0.1;
    n.delay_std = 0.5;
    const auto w = featurize_window(ds.records, 32, schema, n);
    CHECK(w.features.at(3, schema.col_size()) == Catch::Approx((ds.records[3].size - 100.0) / 2).epsilon(1e-15));
    CHECK(w.features.at(3, schema.col_delay()) == Catch::Approx((ds.records[3].delay - 0.1) / 0.5).epsilon(1e-15));
  }
  SECTION("errors") {
    CHECK_THROWS_AS(featurize_window(std::span(ds.records).first(31), 32, schema, Normalizer::identity()),
                    ValidationError);
    auto mixed = ds;
    mixed.records[0].sim_id = 5;
    CHECK_THROWS_WITH(featurize_window(mixed.records, 32, schema, Normalizer::identity()),
                      Catch::Matchers::ContainsSubstring("spans runs"));
  }
  SECTION("ablated columns are absent") {
    const FeatureSchema ns{false, true, 3};
    const auto w = featurize_window(ds.records, 32, ns, Normalizer::identity());
    CHECK(w.features.cols() == 6);
    CHECK(w.features.at(5, ns.col_delay()) == ds.records[5].delay);
  }
}

TEST_CASE("mask_last_delay") {
  const auto ds = window_records(32, 2);
  const FeatureSchema schema;
  const auto w = featurize_window(ds.records, 32, schema, Normalizer::identity());
  const auto m = mask_last_delay(w, schema);
  CHECK(m.features.at(31, schema.col_delay()) == 0.0);
  CHECK(m.features.at(31, schema.col_mask()) == 1.0);
  CHECK(m.target_delay == w.target_delay);
  for (std::size_t i = 0; i < 31; ++i) {
    CHECK(m.features.at(i, schema.col_mask()) == 0.0);
    for (std::size_t j = 0; j < schema.width(); ++j) REQUIRE(m.features.at(i, j) == w.features.at(i, j));
  }

  auto other = ds;
  other.records.back().delay *= 3.0;
  const auto m2 = mask_last_delay(featurize_window(other.records, 32, schema, Normalizer::identity()), schema);
  CHECK(m2.features == m.features);
  CHECK(m2.target_delay != m.target_delay);

  const FeatureSchema nd{true, false, 3};
  const auto skipped = mask_last_delay(featurize_window(ds.records, 32, nd, Normalizer::identity()), nd);
  CHECK(skipped.mask_skipped);
  CHECK(skipped.features.at(31, nd.col_mask()) == 0.0);
}

TEST_CASE("masking invariance of the model output") {
  for (auto v : kAllVariants) {
    INFO(to_string(v));
    auto [c, p] = build_variant(v, 4);
    jitter(p, 5);
    const std::size_t L = c.window_length();
    const auto ds = window_records(L, 6);
    auto other = ds;
    other.records.back().delay = 1e3;
    const auto a = mask_last_delay(featurize_window(ds.records, L, c.schema, Normalizer::identity()), c.schema);
    const auto b = mask_last_delay(featurize_window(other.records, L, c.schema, Normalizer::identity()), c.schema);
    CHECK(predict_newest(a.features, p, c) == predict_newest(b.features, p, c));
  }
}

TEST_CASE("embed") {
  auto c = tiny_config(3);
  auto p = init_params(c);
  jitter(p, 1);
  const auto x = random_features(c, 2);
  SECTION("per-packet locality") {
    nn::Graph g(false);
    const auto e = g.value(embed(g, g.constant(x), p, c));
    auto x2 = x;
    x2.at(7, 0) += 1.0;
    x2.at(7, 1) -= 2.0;
    nn::Graph h(false);
    const auto e2 = h.value(embed(h, h.constant(x2), p, c));
    for (std::size_t r = 0; r < e.rows(); ++r) {
      bool same = true;
      for (std::size_t j = 0; j < e.cols(); ++j) same = same && e.at(r, j) == e2.at(r, j);
      CHECK(same == (r != 7));
    }
  }
  SECTION("zero weights give the output bias on every row") {
    for (auto* w : {&p.embed1.W, &p.embed2.W}) w->value.fill(0.0);
    nn::Graph g(false);
    const auto e = g.value(embed(g, g.constant(x), p, c));
    for (std::size_t r = 0; r < e.rows(); ++r) {
      for (std::size_t j = 0; j < e.cols(); ++j) REQUIRE(e.at(r, j) == p.embed2.b.value.at(0, j));
    }
  }
  SECTION("width mismatch") {
    nn::Graph g(false);
    CHECK_THROWS_AS(embed(g, g.constant(Tensor({32, 6})), p, c), ShapeError);
  }
  SECTION("gradcheck") {
    Tensor target;
    {
      nn::Graph g(false);
      target = g.value(embed(g, g.constant(x), p, c));
      Rng rng(9);
      for (auto& v : target.values()) v += 1e-3 * rng.normal();
    }
    auto params = p.embed1.parameters();
    for (auto* q : p.embed2.parameters()) params.push_back(q);
    const auto report =
        nn::gradcheck([&](nn::Graph& g) { return g.mse(embed(g, g.constant(x), p, c), g.constant(target)); }, params);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("aggregation arithmetic") {
  const auto m = AggregationScheme::multiscale();
  CHECK(16 + 22 * 9 + 10 * 81 == 1024);
  CHECK(m.window_length() == 1024);
  CHECK(m.slots() == 48);
  CHECK(AggregationScheme::none().window_length() == 48);
  CHECK(AggregationScheme::none().slots() == 48);
  CHECK(AggregationScheme::fixed().window_length() == 1008);
  CHECK(AggregationScheme::fixed().slots() == 48);
  CHECK(tiny_config(0).window_length() == 32);
  CHECK(tiny_config(0).scheme.slots() == 13);
}

TEST_CASE("aggregate_multiscale") {
  auto [c, p] = build_variant(Variant::FULL, 8);
  jitter(p, 9);
  Rng rng(10);
  Tensor E({1024, 64});
  for (auto& v : E.values()) v = rng.normal();
  nn::Graph g(false);
  const auto S = g.value(aggregate_multiscale(g, g.constant(E), p, c, false));
  REQUIRE(S.rows() == 48);
  REQUIRE(S.cols() == 64);

  SECTION("raw slots pass through") {
    for (std::size_t k = 0; k < 16; ++k) {
      for (std::size_t j = 0; j < 64; ++j) REQUIRE(S.at(32 + k, j) == E.at(1008 + k, j));
    }
  }
  SECTION("positional embedding is added after aggregation") {
    for (auto& v : p.positional.value.values()) v = rng.normal();
    nn::Graph h(false);
    const auto P = h.value(aggregate_multiscale(h, h.constant(E), p, c, true));
    for (std::size_t r = 0; r < 48; ++r) {
      for (std::size_t j = 0; j < 64; ++j) REQUIRE(P.at(r, j) == S.at(r, j) + p.positional.value.at(r, j));
    }
  }
  SECTION("every packet feeds exactly its own slot") {
    std::size_t checked = 0;
    for (std::size_t i = 0; i < 1024; ++i) {
      auto E2 = E;
      for (std::size_t j = 0; j < 64; ++j) E2.at(i, j) += 1.0;
      nn::Graph h(false);
      const auto S2 = h.value(aggregate_multiscale(h, h.constant(E2), p, c, false));
      const std::size_t expect = slot_of(i, c.scheme);
      for (std::size_t r = 0; r < 48; ++r) {
        bool same = true;
        for (std::size_t j = 0; j < 64; ++j) same = same && S.at(r, j) == S2.at(r, j);
        if (same == (r == expect)) {
          FAIL("packet " << i << " slot " << r << " expected slot " << expect);
        }
      }
      ++checked;
    }
    CHECK(checked == 1024);
    CHECK(slot_of(0, c.scheme) == 0);
    CHECK(slot_of(1023, c.scheme) == 47);
  }
  SECTION("wrong length") {
    nn::Graph h(false);
    CHECK_THROWS_AS(aggregate_multiscale(h, h.constant(Tensor({1000, 64})), p, c), ShapeError);
  }
}

TEST_CASE("packet features change exactly one slot before the encoder") {
  auto [c, p] = build_variant(Variant::FULL, 11);
  jitter(p, 12);
  const auto x = random_features(c, 13);
  nn::Graph g(false);
  const auto S = g.value(aggregate_multiscale(g, embed(g, g.constant(x), p, c), p, c));
  for (std::size_t i : {0ul, 80ul, 81ul, 809ul, 810ul, 1007ul, 1008ul, 1023ul}) {
    auto x2 = x;
    for (std::size_t j = 0; j + 1 < x.cols(); ++j) x2.at(i, j) += 0.5;
    nn::Graph h(false);
    const auto S2 = h.value(aggregate_multiscale(h, embed(h, h.constant(x2), p, c), p, c));
    std::size_t changed = 0, where = 0;
    for (std::size_t r = 0; r < 48; ++r) {
      bool same = true;
      for (std::size_t j = 0; j < 64; ++j) same = same && S.at(r, j) == S2.at(r, j);
      if (!same) {
        ++changed;
        where = r;
      }
    }
    INFO("packet " << i);
    CHECK(changed == 1);
    CHECK(where == slot_of(i, c.scheme));
  }
}

TEST_CASE("encode") {
  auto c = tiny_config(14);
  auto p = init_params(c);
  jitter(p, 15);
  Rng rng(16);
  Tensor S({13, 8});
  for (auto& v : S.values()) v = rng.normal();
  SECTION("shape") {
    nn::Graph g(false);
    const auto C = g.value(encode(g, g.constant(S), p, c));
    CHECK(C.rows() == 13);
    CHECK(C.cols() == 8);
  }
  SECTION("no layers is the identity") {
    auto c0 = c;
    c0.n_layers = 0;
    auto p0 = init_params(c0);
    nn::Graph g(false);
    CHECK(g.value(encode(g, g.constant(S), p0, c0)) == S);
  }
  SECTION("gradcheck") {
    Tensor target;
    {
      nn::Graph g(false);
      target = g.value(encode(g, g.constant(S), p, c));
      for (auto& v : target.values()) v += 1e-3 * rng.normal();
    }
    const auto report = nn::gradcheck(
        [&](nn::Graph& g) { return g.mse(encode(g, g.constant(S), p, c), g.constant(target)); }, p.body_parameters());
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("decoder heads") {
  auto c = tiny_config(17);
  auto p = init_params(c);
  p.mct_head = make_mct_head(c);
  jitter(p, 18);
  Rng rng(19);
  Tensor C({13, 8});
  for (auto& v : C.values()) v = rng.normal();
  const Normalizer norm;

  SECTION("delay head reads only the newest slot") {
    nn::Graph g(false);
    const double a = g.value(predict_delay(g, g.constant(C), p)).at(0, 0);
    auto C2 = C;
    for (std::size_t r = 0; r < 12; ++r) C2.at(r, 0) += 5.0;
    nn::Graph h(false);
    CHECK(h.value(predict_delay(h, h.constant(C2), p)).at(0, 0) == a);
    auto C3 = C;
    C3.at(12, 0) += 5.0;
    nn::Graph k(false);
    CHECK(k.value(predict_delay(k, k.constant(C3), p)).at(0, 0) != a);
  }
  SECTION("zero weights give the output bias") {
    p.delay_head.hidden.W.value.fill(0.0);
    p.delay_head.out.W.value.fill(0.0);
    p.mct_head->hidden.W.value.fill(0.0);
    p.mct_head->out.W.value.fill(0.0);
    nn::Graph g(false);
    CHECK(g.value(predict_delay(g, g.constant(C), p)).at(0, 0) == p.delay_head.out.b.value.at(0, 0));
    CHECK(g.value(predict_log_mct(g, g.constant(C), 1500, norm, p)).at(0, 0) == p.mct_head->out.b.value.at(0, 0));
  }
  SECTION("log-MCT head depends on the message size") {
    nn::Graph g(false);
    const double a = g.value(predict_log_mct(g, g.constant(C), 1500, norm, p)).at(0, 0);
    const double b = g.value(predict_log_mct(g, g.constant(C), 150000, norm, p)).at(0, 0);
    CHECK(a != b);
  }
  SECTION("non-positive message size") {
    nn::Graph g(false);
    CHECK_THROWS_AS(predict_log_mct(g, g.constant(C), 0, norm, p), ValidationError);
    CHECK_THROWS_AS(predict_log_mct(g, g.constant(C), -5, norm, p), ValidationError);
  }
  SECTION("missing log-MCT head") {
    p.mct_head.reset();
    nn::Graph g(false);
    CHECK_THROWS_AS(predict_log_mct(g, g.constant(C), 100, norm, p), StateError);
  }
  SECTION("gradcheck of both heads") {
    double td = 0.0, tm = 0.0;
    {
      nn::Graph g(false);
      td = g.value(predict_delay(g, g.constant(C), p)).at(0, 0) + 1e-3;
      tm = g.value(predict_log_mct(g, g.constant(C), 4000, norm, p)).at(0, 0) - 1e-3;
    }
    auto params = p.delay_head_parameters();
    for (auto* q : p.mct_head_parameters()) params.push_back(q);
    const auto report = nn::gradcheck(
        [&](nn::Graph& g) {
          const auto d = g.mse(predict_delay(g, g.constant(C), p), g.constant(Tensor::scalar(td)));
          const auto m = g.mse(predict_log_mct(g, g.constant(C), 4000, norm, p), g.constant(Tensor::scalar(tm)));
          return g.add(d, m);
        },
        params);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("build_variant") {
  CHECK(build_variant(Variant::FULL, 1).first.window_length() == 1024);
  CHECK(build_variant(Variant::NO_AGG, 1).first.window_length() == 48);
  CHECK(build_variant(Variant::FIXED_AGG, 1).first.window_length() == 1008);
  CHECK(build_variant(Variant::NO_DELAY, 1).first.schema.width() == 6);
  CHECK(build_variant(Variant::NO_SIZE, 1).first.schema.width() == 6);
  CHECK(build_variant(Variant::NO_DELAY, 1).first.window_length() == 1024);
  CHECK(build_variant(Variant::NO_AGG, 1).second.level1.W.value.size() == 0);
  CHECK(build_variant(Variant::FIXED_AGG, 1).second.level2.W.value.size() == 0);
  CHECK(build_variant(Variant::FIXED_AGG, 1).second.level1.W.value.rows() == 21 * 64);
  for (auto v : kAllVariants) {
    auto [c1, p1] = build_variant(v, 7);
    auto [c2, p2] = build_variant(v, 7);
    auto [c3, p3] = build_variant(v, 8);
    CHECK(c1 == c2);
    const auto a = p1.all_parameters(), b = p2.all_parameters(), d = p3.all_parameters();
    REQUIRE(a.size() == b.size());
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      same = same && a[i]->value == b[i]->value;
      differs = differs || a[i]->value != d[i]->value;
    }
    CHECK(same);
    CHECK(differs);
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_variant("HALF"), ConfigError);
}

TEST_CASE("initialization") {
  auto [c, p] = build_variant(Variant::FULL, 3);
  for (auto* q : p.all_parameters()) {
    INFO(q->name);
    if (q->name == "positional" || q->name.ends_with(".b") || q->name.ends_with(".bias")) {
      for (double v : q->value.values()) REQUIRE(v == 0.0);
    } else if (q->name.ends_with(".gain")) {
      for (double v : q->value.values()) REQUIRE(v == 1.0);
    } else {
      const double bound = std::sqrt(1.0 / static_cast<double>(q->value.rows()));
      for (double v : q->value.values()) REQUIRE(std::abs(v) <= bound);
    }
  }
}

TEST_CASE("validate rejects inconsistent configs") {
  NTTConfig c;
  c.n_heads = 5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  NTTConfig none;
  none.aggregation = AggregationKind::NONE;
  CHECK_THROWS_AS(validate(none), ConfigError);
}

TEST_CASE("tiny model gradcheck") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto report = gradcheck_tiny_ntt(seed);
    INFO("seed " << seed << " worst " << report.worst_parameter);
    CHECK(report.passed());
    CHECK(report.coordinates_checked > 100);
  }
}

TEST_CASE("checkpoint round trip") {
  auto [c, p] = build_variant(Variant::NO_SIZE, 21);
  p.mct_head = make_mct_head(c);
  jitter(p, 22);
  Normalizer n;
  n.delay_mean = 0.03;
  n.log_mct_std = 1.7;
  const auto bytes = nn::encode_checkpoint(to_checkpoint(p, c, n, {{"stage", "test"}}));
  auto back = from_checkpoint(nn::decode_checkpoint(bytes));
  CHECK(back.config == c);
  CHECK(back.normalizer == n);
  CHECK(back.meta.at("stage") == "test");
  REQUIRE(back.params.mct_head.has_value());
  const auto a = p.all_parameters(), b = back.params.all_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->value == b[i]->value);
  }
  const auto x = random_features(c, 23);
  CHECK(predict_newest(x, p, c) == predict_newest(x, back.params, back.config));
  CHECK(nn::encode_checkpoint(to_checkpoint(back.params, back.config, back.normalizer, {{"stage", "test"}})) == bytes);

  SECTION("shape mismatch names both shapes") {
    auto ckpt = to_checkpoint(p, c, n);
    for (auto& arr : ckpt.arrays) {
      if (arr.name == "embed.0.W") arr.value = Tensor({7, 64});
    }
    CHECK_THROWS_WITH(from_checkpoint(ckpt), Catch::Matchers::ContainsSubstring("[7x64]") &&
                                                 Catch::Matchers::ContainsSubstring("[6x64]"));
  }
  SECTION("missing meta") {
    auto ckpt = to_checkpoint(p, c, n);
    ckpt.meta.erase("config");
    CHECK_THROWS_AS(from_checkpoint(ckpt), ValidationError);
  }
}

TEST_CASE("baseline_predict") {
  const std::vector<double> h = {1, 2, 3};
  CHECK(baseline_predict(BaselineKind::LAST_OBSERVED, h) == 3.0);
  CHECK(baseline_predict(BaselineKind::EWMA, std::vector<double>{5, 5, 5}) == 5.0);
  CHECK(baseline_predict(BaselineKind::EWMA, std::vector<double>{0, 1}) == Catch::Approx(0.01).epsilon(1e-15));
  CHECK(baseline_predict(BaselineKind::EWMA, std::vector<double>{4}) == 4.0);
  CHECK_THROWS_AS(baseline_predict(BaselineKind::EWMA, std::vector<double>{}), ValidationError);
  CHECK_THROWS_AS(baseline_predict(BaselineKind::LAST_OBSERVED, std::vector<double>{}), ValidationError);

  Rng rng(30);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> xs(1 + rng.below(200));
    for (auto& x : xs) x = rng.uniform(-5, 5);
    CHECK(baseline_predict(BaselineKind::LAST_OBSERVED, xs) == xs.back());
    const double oracle = ewma_oracle(xs, kEwmaAlpha);
    REQUIRE(std::abs(baseline_predict(BaselineKind::EWMA, xs) - oracle) <= 1e-12 * (1.0 + std::abs(oracle)));
  }
}
