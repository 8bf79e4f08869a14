#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "oracles.hpp"
#include "raptor/model.hpp"
#include "raptor/rng.hpp"

using namespace raptor;

namespace {

LayerStack random_stack(std::size_t L, std::size_t T, std::size_t D, std::uint64_t seed,
                        double scale = 1.0) {
  LayerStack s(L, T, D);
  s.utt_id = "u" + std::to_string(seed);
  s.dataset_id = "test";
  s.label = Label::Spoof;
  Rng rng(seed);
  for (double& x : s.features) x = scale * rng.normal();
  return s;
}

LayerStack jittered(const LayerStack& s, std::uint64_t seed, double scale) {
  LayerStack out = s;
  out.view_id = 1;
  Rng rng(seed);
  for (double& x : out.features) x += scale * rng.normal();
  return out;
}

std::vector<std::size_t> gate_counts(const ModelTopology& t) {
  std::vector<std::size_t> out;
  for (const auto& l : t.levels) out.push_back(l.gates.size());
  return out;
}

}  // namespace

TEST_CASE("build_topology") {
  SUBCASE("L=12 halves 12 -> 6 -> 3 -> 2 -> 1") {
    const auto t = build_topology(12, 4);
    CHECK(gate_counts(t) == std::vector<std::size_t>{6, 3, 1, 1});
    CHECK(t.num_gates() == 11);
    REQUIRE(t.levels.size() == 4);
    CHECK(t.levels[0].pass_through.empty());
    CHECK(t.levels[1].pass_through.empty());
    CHECK(t.levels[2].pass_through.size() == 1);
    CHECK(t.levels[3].pass_through.empty());
    // level 0 pairs (1,2), (3,4), ... in 1-based terms
    for (std::size_t p = 0; p < 6; ++p) {
      CHECK(t.gates[p].in_a == 2 * p);
      CHECK(t.gates[p].in_b == 2 * p + 1);
    }
    CHECK(t.final_slot == 12 + 10);
  }
  SUBCASE("L=2 base case") {
    const auto t = build_topology(2, 1);
    CHECK(gate_counts(t) == std::vector<std::size_t>{1});
    CHECK(t.num_gates() == 1);
  }
  SUBCASE("L=3 has one pass-through at level 0") {
    const auto t = build_topology(3, 1);
    CHECK(gate_counts(t) == std::vector<std::size_t>{1, 1});
    CHECK(t.levels[0].pass_through == std::vector<std::size_t>{2});
    CHECK(t.num_gates() == 2);
    CHECK(t.gates[1].in_a == 3);
    CHECK(t.gates[1].in_b == 2);
  }
  SUBCASE("M = L - 1 for any L") {
    for (std::size_t L = 2; L < 40; ++L) CHECK(build_topology(L, 1).num_gates() == L - 1);
  }
  CHECK_THROWS_AS(build_topology(1, 4), InvalidArgument);
  CHECK_THROWS_AS(build_topology(0, 4), InvalidArgument);
}

TEST_CASE("init_params") {
  const auto topo = build_topology(4, 3);
  const auto a = init_params(topo, 1);
  const auto b = init_params(topo, 1);
  const auto c = init_params(topo, 2);
  CHECK(a == b);
  CHECK(a.values != c.values);

  const auto big = init_params(build_topology(12, 768), 0);
  CHECK(big.values.size() == 11u * 3074u + 768u * 768u + 2u * 768u + 768u + 1u);
  CHECK(big.values.size() == 625943u);

  // biases zero, weights within the Xavier bound
  const ParamLayout lay(topo);
  const double gate_bound = std::sqrt(6.0 / (2.0 * 3 + 2.0));
  for (std::size_t g = 0; g < topo.num_gates(); ++g) {
    CHECK(a.values[lay.gate_bias(g)] == 0.0);
    CHECK(a.values[lay.gate_bias(g) + 1] == 0.0);
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(a.values[lay.gate_weight(g) + i]) <= gate_bound);
  }
  CHECK(a.values[lay.cls_bias()] == 0.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.values[lay.attn_bias() + i] == 0.0);
}

TEST_CASE("forward: identical gate rows give an even split and a plain average") {
  const auto topo = build_topology(4, 3);
  auto params = init_params(topo, 5);
  const ParamLayout lay(topo);
  // gate 0: copy row 0 into row 1, equal biases
  for (std::size_t i = 0; i < 6; ++i) params.values[lay.gate_weight(0) + 6 + i] = params.values[lay.gate_weight(0) + i];
  const auto s = random_stack(4, 7, 3, 9);
  const auto tr = forward(s, params, true);
  for (std::size_t t = 0; t < 7; ++t) {
    CHECK(tr.gates[0][t].p1 == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(tr.gates[0][t].p2 == doctest::Approx(0.5).epsilon(1e-15));
    for (std::size_t d = 0; d < 3; ++d)
      CHECK(tr.fused[0](t, d) == doctest::Approx(0.5 * (s.frame(0, t)[d] + s.frame(1, t)[d])).epsilon(1e-14));
  }
}

TEST_CASE("forward: zero classifier gives posterior 0.5") {
  const auto topo = build_topology(6, 4);
  auto params = init_params(topo, 3);
  const ParamLayout lay(topo);
  std::fill(params.values.begin() + static_cast<long>(lay.cls_weight()), params.values.end(), 0.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto tr = forward(random_stack(6, 5, 4, seed, 10.0), params);
    CHECK(tr.logit == 0.0);
    CHECK(tr.posterior == 0.5);
  }
}

TEST_CASE("forward matches the scalar single-gate oracle") {
  const auto params = init_params(build_topology(2, 2), 42);
  LayerStack s(2, 1, 2);
  std::fill(s.features.begin(), s.features.end(), 1.0);
  const auto tr = forward(s, params);
  const double ref = oracle::single_gate_logit(params.values, s.features, 1, 2);
  CHECK(std::abs(tr.logit - ref) < 1e-14);

  // and on a less degenerate instance
  const auto p2 = init_params(build_topology(2, 5), 7);
  const auto s2 = random_stack(2, 9, 5, 77);
  CHECK(std::abs(forward(s2, p2).logit - oracle::single_gate_logit(p2.values, s2.features, 9, 5)) < 1e-12);
}

TEST_CASE("forward errors") {
  const auto params = init_params(build_topology(4, 3), 1);
  CHECK_THROWS_AS(forward(random_stack(4, 5, 2, 1), params), InvalidArgument);
  CHECK_THROWS_AS(forward(random_stack(3, 5, 3, 1), params), InvalidArgument);
  auto bad = random_stack(4, 5, 3, 1);
  bad.features[5] = INFINITY;
  try {
    forward(bad, params);
    FAIL("expected NumericFault");
  } catch (const NumericFault& e) {
    const std::string msg = e.what();
    CHECK(msg.find("level 0, index 0") != std::string::npos);
    CHECK(msg.find("frame 1") != std::string::npos);
  }
}

TEST_CASE("forward invariants: simplex rows, convex fusion, per-utterance independence") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t L = 2 + rng.below(9), T = 1 + rng.below(8), D = 1 + rng.below(5);
    const auto params = init_params(build_topology(L, D), trial);
    const auto s = random_stack(L, T, D, 1000 + trial, 3.0);
    const auto tr = forward(s, params, true);
    for (const auto& g : tr.gates)
      for (const auto& a : g) {
        REQUIRE(a.p1 >= 0.0);
        REQUIRE(a.p2 >= 0.0);
        REQUIRE(std::abs(a.p1 + a.p2 - 1.0) <= 1e-9);
      }
    double sum = 0.0;
    for (double a : tr.attention) sum += a;
    REQUIRE(std::abs(sum - 1.0) <= 1e-9);
    REQUIRE(tr.posterior == doctest::Approx(1.0 / (1.0 + std::exp(-tr.logit))));

    const auto& topo = params.topology;
    auto slot = [&](std::size_t id, std::size_t t) {
      return id < L ? s.frame(id, t) : tr.fused[id - L].row(t);
    };
    for (std::size_t g = 0; g < topo.num_gates(); ++g) {
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) {
          const double a = slot(topo.gates[g].in_a, t)[d], b = slot(topo.gates[g].in_b, t)[d];
          const double v = tr.fused[g](t, d);
          REQUIRE(v >= std::min(a, b) - 1e-12);
          REQUIRE(v <= std::max(a, b) + 1e-12);
        }
    }
  }

  // Scoring a batch in any order leaves each trace unchanged.
  const auto params = init_params(build_topology(5, 3), 8);
  std::vector<LayerStack> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_stack(5, 6, 3, 50 + i));
  std::vector<double> forward_order, reverse_order(4);
  for (const auto& s : batch) forward_order.push_back(forward(s, params).logit);
  for (int i = 3; i >= 0; --i) reverse_order[i] = forward(batch[i], params).logit;
  CHECK(forward_order == reverse_order);
}

TEST_CASE("positive scaling of one gate's logits keeps its routing decision") {
  const auto topo = build_topology(4, 3);
  const auto params = init_params(topo, 12);
  const auto s = random_stack(4, 10, 3, 12, 2.0);
  const auto base = forward(s, params);
  const ParamLayout lay(topo);
  for (double c : {0.1, 0.5, 3.0, 40.0}) {
    auto scaled = params;
    for (std::size_t i = 0; i < 4 * 3 + 2; ++i) scaled.values[lay.gate_weight(0) + i] *= c;
    const auto tr = forward(s, scaled);
    for (std::size_t t = 0; t < 10; ++t) {
      const bool before = base.gates[0][t].p1 >= base.gates[0][t].p2;
      const bool after = tr.gates[0][t].p1 >= tr.gates[0][t].p2;
      CHECK(before == after);
    }
  }
  // post-hoc: argmax of softmax(c z) == argmax z
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double z1 = rng.uniform(-5, 5), z2 = rng.uniform(-5, 5), c = rng.uniform(1e-3, 1e3);
    const auto a = softmax2(z1, z2), b = softmax2(c * z1, c * z2);
    CHECK((a.p1 > a.p2) == (b.p1 > b.p2));
  }
}

TEST_CASE("loss examples") {
  const auto params = init_params(build_topology(4, 3), 1);
  const auto s = random_stack(4, 6, 3, 1);
  const auto tc = forward(s, params);
  const auto ta = forward(jittered(s, 2, 0.5), params);
  const ClassWeights w{1.3, 0.7};

  SUBCASE("identical views have zero consistency term") {
    const auto lb = loss(tc, tc, Label::Spoof, 0.25, w);
    CHECK(lb.cons == 0.0);
    CHECK(lb.total == lb.cls);
  }
  SUBCASE("lambda zero gives total = cls") {
    const auto lb = loss(tc, ta, Label::BonaFide, 0.0, w);
    CHECK(lb.total == lb.cls);
    CHECK(lb.cons > 0.0);
  }
  SUBCASE("posterior 0.5 on both views, label 1, weight 1, lambda 0") {
    FusionTrace half = tc;
    half.logit = 0.0;
    half.posterior = 0.5;
    const auto lb = loss(half, half, Label::Spoof, 0.0, {});
    CHECK(std::abs(lb.total - std::numbers::ln2) < 1e-15);
  }
  SUBCASE("breakdown invariant") {
    const auto lb = loss(tc, ta, Label::Spoof, 0.25, w);
    CHECK(std::abs(lb.total - (lb.cls + 0.25 * lb.cons)) <= 1e-12);
    CHECK(lb.cons >= 0.0);
    CHECK(lb.lambda == 0.25);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(loss(tc, ta, Label::Unlabeled, 0.25, w), InvalidArgument);
    const auto other = forward(random_stack(4, 5, 3, 1), params);
    CHECK_THROWS_AS(loss(tc, other, Label::Spoof, 0.25, w), InvalidArgument);
    const auto other_topo = forward(random_stack(6, 6, 3, 1), init_params(build_topology(6, 3), 1));
    CHECK_THROWS_AS(loss(tc, other_topo, Label::Spoof, 0.25, w), InvalidArgument);
  }
}

TEST_CASE("consistency term vanishes for clean vs clean on random inputs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto params = init_params(build_topology(5, 4), seed);
    const auto s = random_stack(5, 4, 4, seed + 100, 5.0);
    const auto tr = forward(s, params);
    CHECK(loss(tr, tr, Label::BonaFide, 1.0, {}).cons == 0.0);
  }
}

TEST_CASE("loss_and_grad matches central finite differences") {
  const auto params = init_params(build_topology(4, 8), 31);
  const auto clean = random_stack(4, 5, 8, 31);
  const auto aug = jittered(clean, 32, 0.7);
  const ClassWeights w{0.8, 1.25};
  const auto [lb, grad] = loss_and_grad(clean, aug, Label::Spoof, params, 0.25, w);
  CHECK(lb.total == doctest::Approx(loss(forward(clean, params), forward(aug, params), Label::Spoof, 0.25, w).total));

  auto f = [&](const std::vector<double>& v) {
    ModelParams p = params;
    p.values = v;
    return loss(forward(clean, p), forward(aug, p), Label::Spoof, 0.25, w).total;
  };
  const auto numeric = oracle::central_differences(f, params.values, 1e-5);
  CHECK(oracle::max_relative_error(grad, numeric) < 1e-4);

  // bona fide label, larger lambda, odd L with a pass-through
  const auto p3 = init_params(build_topology(5, 3), 8);
  const auto c3 = random_stack(5, 4, 3, 8, 2.0);
  const auto a3 = jittered(c3, 9, 1.0);
  const auto g3 = loss_and_grad(c3, a3, Label::BonaFide, p3, 2.0, {}).second;
  auto f3 = [&](const std::vector<double>& v) {
    ModelParams p = p3;
    p.values = v;
    return loss(forward(c3, p), forward(a3, p), Label::BonaFide, 2.0, {}).total;
  };
  CHECK(oracle::max_relative_error(g3, oracle::central_differences(f3, p3.values, 1e-5)) < 1e-4);
}

TEST_CASE("loss_and_grad: classifier bias gradient at zero logit") {
  const auto topo = build_topology(4, 3);
  auto params = init_params(topo, 2);
  const ParamLayout lay(topo);
  std::fill(params.values.begin() + static_cast<long>(lay.cls_weight()), params.values.end(), 0.0);
  const auto clean = random_stack(4, 5, 3, 1);
  const auto aug = jittered(clean, 2, 0.3);
  for (Label y : {Label::BonaFide, Label::Spoof}) {
    const double target = y == Label::Spoof ? 1.0 : 0.0;
    const auto g = loss_and_grad(clean, aug, y, params, 0.0, ClassWeights{1.5, 1.5}).second;
    CHECK(std::abs(g[lay.cls_bias()] - 1.5 * (0.5 - target)) < 1e-15);
  }
}

TEST_CASE("loss_and_grad is deterministic and validates inputs") {
  const auto params = init_params(build_topology(4, 3), 2);
  const auto clean = random_stack(4, 5, 3, 1);
  const auto aug = jittered(clean, 2, 0.3);
  const auto a = loss_and_grad(clean, aug, Label::Spoof, params, 0.25, {});
  const auto b = loss_and_grad(clean, aug, Label::Spoof, params, 0.25, {});
  CHECK(a.second == b.second);
  CHECK(a.first.total == b.first.total);
  CHECK_THROWS_AS(loss_and_grad(clean, random_stack(4, 6, 3, 1), Label::Spoof, params, 0.25, {}), InvalidArgument);
  CHECK_THROWS_AS(loss_and_grad(clean, aug, Label::Unlabeled, params, 0.25, {}), InvalidArgument);
}

TEST_CASE("gate map export") {
  SUBCASE("uniform gates export 0.5 everywhere") {
    const auto topo = build_topology(6, 2);
    auto params = init_params(topo, 1);
    const ParamLayout lay(topo);
    std::fill(params.values.begin(), params.values.begin() + static_cast<long>(lay.attn_proj()), 0.0);
    const auto rows = export_gate_maps(forward(random_stack(6, 4, 2, 3), params));
    CHECK(rows.size() == 5 * 4);
    for (const auto& r : rows) CHECK(r.alpha1 == 0.5);
  }
  SUBCASE("L=12, T=200 gives 2200 rows") {
    const auto params = init_params(build_topology(12, 2), 1);
    const auto rows = export_gate_maps(forward(random_stack(12, 200, 2, 3), params));
    CHECK(rows.size() == 2200);
    for (const auto& r : rows) {
      CHECK(r.alpha1 >= 0.0);
      CHECK(r.alpha1 <= 1.0);
    }
    CHECK(rows.front().level == 0);
    CHECK(rows.back().level == 3);
  }
  SUBCASE("CSV round-trip at 9 significant digits") {
    const auto params = init_params(build_topology(5, 3), 4);
    const auto rows = export_gate_maps(forward(random_stack(5, 30, 3, 3, 4.0), params));
    const auto path = std::filesystem::temp_directory_path() / "raptor_gatemap_test.csv";
    write_gate_map_csv(rows, path);
    const auto back = read_gate_map_csv(path);
    REQUIRE(back.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(back[i].level == rows[i].level);
      CHECK(back[i].gate == rows[i].gate);
      CHECK(back[i].frame == rows[i].frame);
      CHECK(std::abs(back[i].alpha1 - rows[i].alpha1) <= 5e-10);
    }
    std::filesystem::remove(path);
  }
}
