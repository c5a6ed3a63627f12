#include <gtest/gtest.h>

#include <jitswt/analysis.hpp>

#include "support/reference.hpp"

using namespace jitswt;

namespace {

NetworkModel linear_model(Mat W, Vec b) {
  NetworkModel m;
  m.input_shape = {W[0].size()};
  m.layers.push_back(oracle::dense_layer(std::move(W), std::move(b)));
  return oracle::finish(m);
}

// max_x a·F(x) + c over [lo,hi]^2 by vertex enumeration of the pattern cells
double exact_max(const oracle::ShallowNet& net, const Vec& a, double c, double lo, double hi) {
  double best = -HUGE_VAL;
  for (const auto& cell : oracle::feasible_patterns_2d(net, lo, hi, 0.0))
    for (const auto& p : cell.poly) best = std::max(best, oracle::dotp(a, net.forward({p.x, p.y})) + c);
  return best;
}

Mat pattern_jacobian(const oracle::ShallowNet& net, const std::vector<int>& act) {
  Mat J(net.V.size(), Vec(net.W[0].size(), 0.0));
  for (size_t k = 0; k < net.V.size(); ++k)
    for (size_t i = 0; i < net.W.size(); ++i)
      if (act[i])
        for (size_t c = 0; c < J[k].size(); ++c) J[k][c] += net.V[k][i] * net.W[i][c];
  return J;
}

}  // namespace

TEST(Regions, AbsHasTwoFragments) {
  NetworkModel m;
  m.input_shape = {1};
  m.layers.push_back(oracle::act_layer(LayerKind::abs));
  auto g = compile(oracle::finish(m));
  RegionTable T = extract_regions(g, InputDomain::box({-1}, {1}));
  ASSERT_TRUE(T.complete);
  ASSERT_EQ(T.fragments.size(), 2u);
  std::set<double> slopes;
  for (const auto& f : T.fragments) {
    slopes.insert(f.J[0][0]);
    EXPECT_EQ(f.b[0], 0);
  }
  EXPECT_EQ(slopes, (std::set<double>{-1, 1}));
  EXPECT_DOUBLE_EQ((*T.eval({-0.25}))[0], 0.25);
  EXPECT_DOUBLE_EQ((*T.eval({0.75}))[0], 0.75);
}

TEST(Regions, ReluOnPositiveBoxIsOneFragment) {
  NetworkModel m;
  m.input_shape = {1};
  m.layers.push_back(oracle::act_layer(LayerKind::relu));
  auto g = compile(oracle::finish(m));
  RegionTable T = extract_regions(g, InputDomain::box({0.5}, {1}));
  ASSERT_EQ(T.fragments.size(), 1u);
  EXPECT_EQ(T.fragments[0].J[0][0], 1);
}

TEST(Regions, CountMatchesPatternEnumeration) {
  oracle::Rng rng(31);
  for (int trial = 0; trial < 12; ++trial) {
    auto model = oracle::random_ffn({2, 6, 1}, rng, 0.5);
    auto net = oracle::shallow_of(model);
    RegionTable T = extract_regions(compile(model), InputDomain::box({-1, -1}, {1, 1}));
    ASSERT_TRUE(T.complete);
    size_t fat = oracle::feasible_patterns_2d(net, -1, 1, 1e-8).size();
    size_t any = oracle::feasible_patterns_2d(net, -1, 1, 0.0).size();
    EXPECT_GE(T.fragments.size(), fat) << trial;
    EXPECT_LE(T.fragments.size(), any) << trial;
    for (int s = 0; s < 200; ++s) {
      Vec x = rng.uniform_vec(2, -1, 1);
      auto y = T.eval(x);
      ASSERT_TRUE(y);
      EXPECT_NEAR((*y)[0], net.forward(x)[0], 1e-9);
    }
  }
}

TEST(Regions, JsonAndCsv) {
  oracle::Rng rng(2);
  auto model = oracle::random_ffn({2, 3, 2}, rng);
  RegionTable T = extract_regions(compile(model), InputDomain::box({-1, -1}, {1, 1}));
  auto j = T.to_json();
  EXPECT_EQ(j["coverage"], "complete");
  EXPECT_EQ(j["fragments"].size(), T.fragments.size());
  EXPECT_EQ(j["fragments"][0]["J"].size(), 2u);
  std::string csv = T.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(1 + 2 * T.fragments.size()));
}

TEST(Regions, PartialUnderBudget) {
  oracle::Rng rng(3);
  auto model = oracle::random_ffn({2, 8, 8, 1}, rng);
  Budget b;
  b.max_splits = 1;
  RegionTable T = extract_regions(compile(model), InputDomain::box({-1, -1}, {1, 1}), b);
  EXPECT_FALSE(T.complete);
  EXPECT_EQ(T.to_json()["coverage"], "partial");
}

TEST(Reconstruct, LatticeFormMatchesTable) {
  oracle::Rng rng(41);
  for (int trial = 0; trial < 4; ++trial) {
    auto model = oracle::random_ffn({2, 5, 2}, rng, 0.5);
    RegionTable T = extract_regions(compile(model), InputDomain::box({-1, -1}, {1, 1}));
    ExprStore st(2);
    auto roots = reconstruct(T, st);
    ASSERT_EQ(roots.size(), 2u);
    for (int s = 0; s < 300; ++s) {
      Vec x = rng.uniform_vec(2, -1, 1);
      Vec y = oracle::reference_forward(model, x);
      for (size_t r = 0; r < 2; ++r) EXPECT_NEAR(st.eval(roots[r], x), y[r], 1e-9);
    }
  }
}

TEST(Jacobian, ReluAtOne) {
  NetworkModel m;
  m.input_shape = {1};
  m.layers.push_back(oracle::act_layer(LayerKind::relu));
  auto g = compile(oracle::finish(m));
  auto r = jacobian_at(g, {1.0}, InputDomain::box({-2}, {2}));
  EXPECT_TRUE(r.interior);
  EXPECT_EQ(r.J[0][0], 1);
}

TEST(Jacobian, AbsAtKinkIsZero) {
  NetworkModel m;
  m.input_shape = {1};
  m.layers.push_back(oracle::act_layer(LayerKind::abs));
  auto g = compile(oracle::finish(m));
  auto r = jacobian_at(g, {0.0}, InputDomain::box({-1}, {1}));
  EXPECT_FALSE(r.interior);
  EXPECT_EQ(r.gradients.size(), 2u);
  EXPECT_NEAR(r.J[0][0], 0, 1e-9);
  EXPECT_EQ(r.to_json()["kind"], "boundary");
}

TEST(Jacobian, OutsideDomainThrows) {
  NetworkModel m;
  m.input_shape = {1};
  m.layers.push_back(oracle::act_layer(LayerKind::relu));
  auto g = compile(oracle::finish(m));
  EXPECT_THROW(jacobian_at(g, {3.0}, InputDomain::box({-1}, {1})), DomainError);
}

TEST(Jacobian, MatchesFiniteDifferences) {
  oracle::Rng rng(5);
  auto model = oracle::random_ffn({3, 5, 2}, rng);
  auto g = compile(model);
  InputDomain D = InputDomain::box({-1, -1, -1}, {1, 1, 1});
  JitEngine E(g, D);
  int interior = 0;
  for (int s = 0; s < 100; ++s) {
    Vec x = rng.uniform_vec(3, -0.9, 0.9);
    auto r = jacobian_at(E, x);
    if (!r.interior) continue;
    ++interior;
    const double h = 1e-7;
    for (size_t c = 0; c < 3; ++c) {
      Vec xp = x, xm = x;
      xp[c] += h;
      xm[c] -= h;
      Vec yp = oracle::reference_forward(model, xp), ym = oracle::reference_forward(model, xm);
      for (size_t k = 0; k < 2; ++k) EXPECT_NEAR(r.J[k][c], (yp[k] - ym[k]) / (2 * h), 1e-6);
    }
  }
  EXPECT_GE(interior, 99);
}

TEST(Jacobian, RandomPointsAreInterior) {
  oracle::Rng rng(6);
  auto model = oracle::random_ffn({2, 6, 6, 1}, rng);
  JitEngine E(compile(model), InputDomain::box({-1, -1}, {1, 1}));
  const int N = 4000;
  int interior = 0;
  for (int s = 0; s < N; ++s) interior += jacobian_at(E, rng.uniform_vec(2, -1, 1)).interior;
  EXPECT_GE(double(interior) / N, 0.999);
}

TEST(Extremum, AbsExamples) {
  NetworkModel m;
  m.input_shape = {1};
  m.layers.push_back(oracle::act_layer(LayerKind::abs));
  auto g = compile(oracle::finish(m));
  auto mx = extremum(g, 0, InputDomain::box({-1}, {2}), Sense::max);
  EXPECT_TRUE(mx.exact);
  EXPECT_DOUBLE_EQ(mx.value, 2);
  EXPECT_DOUBLE_EQ(mx.point[0], 2);
  auto mn = extremum(g, 0, InputDomain::box({-1}, {2}), Sense::min);
  EXPECT_TRUE(mn.exact);
  EXPECT_NEAR(mn.value, 0, 1e-12);
  EXPECT_NEAR(mn.point[0], 0, 1e-12);
  EXPECT_THROW(extremum(g, 1, InputDomain::box({-1}, {2}), Sense::max), IndexError);
}

TEST(Extremum, MatchesVertexOracle) {
  oracle::Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto model = oracle::random_ffn({2, 6, 1}, rng, 0.5);
    auto net = oracle::shallow_of(model);
    auto g = compile(model);
    InputDomain D = InputDomain::box({-1, -1}, {1, 1});
    auto mx = extremum(g, 0, D, Sense::max);
    auto mn = extremum(g, 0, D, Sense::min);
    ASSERT_TRUE(mx.exact && mn.exact);
    EXPECT_NEAR(mx.value, exact_max(net, {1}, 0, -1, 1), 1e-9);
    EXPECT_NEAR(mn.value, -exact_max(net, {-1}, 0, -1, 1), 1e-9);
    EXPECT_NEAR(net.forward(mx.point)[0], mx.value, 1e-9);
    EXPECT_NEAR(net.forward(mn.point)[0], mn.value, 1e-9);
  }
}

TEST(Extremum, BudgetGivesBracket) {
  oracle::Rng rng(9);
  auto model = oracle::random_ffn({2, 10, 10, 1}, rng);
  auto g = compile(model);
  InputDomain D = InputDomain::box({-1, -1}, {1, 1});
  auto truth = extremum(g, 0, D, Sense::max);
  ASSERT_TRUE(truth.exact);
  Budget b;
  b.max_splits = 3;
  auto r = extremum(g, 0, D, Sense::max, b);
  EXPECT_LE(r.lb, truth.value + 1e-9);
  EXPECT_GE(r.ub, truth.value - 1e-9);
}

TEST(OperatorNorm, ClosedForms) {
  Mat A{{1, -2}, {3, 4}};
  EXPECT_DOUBLE_EQ(operator_norm(A, 1, 1), 6);
  EXPECT_DOUBLE_EQ(operator_norm(A, HUGE_VAL, HUGE_VAL), 7);
  EXPECT_DOUBLE_EQ(operator_norm(A, 1, HUGE_VAL), 4);
  EXPECT_NEAR(operator_norm(A, 2, 2), oracle::spectral_norm(A), 1e-9);
  EXPECT_NEAR(operator_norm(A, 2, HUGE_VAL), 5, 1e-12);
  EXPECT_NEAR(operator_norm(A, 1, 2), std::sqrt(20.0), 1e-12);
  EXPECT_THROW(operator_norm(A, HUGE_VAL, 1), UnsupportedNormPair);
  EXPECT_THROW(operator_norm(A, 2, 1), UnsupportedNormPair);
  auto [lo, hi] = operator_norm_bracket(A, HUGE_VAL, 1);
  EXPECT_DOUBLE_EQ(lo, 8);
  EXPECT_DOUBLE_EQ(hi, 10);
}

TEST(Lipschitz, ReluIsOne) {
  NetworkModel m;
  m.input_shape = {1};
  m.layers.push_back(oracle::act_layer(LayerKind::relu));
  auto g = compile(oracle::finish(m));
  auto r = lipschitz(g, InputDomain::box({-1}, {1}), 2, 2);
  EXPECT_TRUE(r.exact);
  EXPECT_DOUBLE_EQ(r.value, 1);
}

TEST(Lipschitz, LinearOneToOne) {
  auto g = compile(linear_model({{1, -2}, {3, 4}}, {0, 0}));
  auto r = lipschitz(g, InputDomain::box({-1, -1}, {1, 1}), 1, 1);
  EXPECT_TRUE(r.exact);
  EXPECT_DOUBLE_EQ(r.value, 6);
  EXPECT_THROW(lipschitz(g, InputDomain::box({-1, -1}, {1, 1}), HUGE_VAL, 1), UnsupportedNormPair);
  auto a = lipschitz(g, InputDomain::box({-1, -1}, {1, 1}), HUGE_VAL, 1, {}, LipschitzMode::anytime);
  EXPECT_FALSE(a.exact);
  EXPECT_DOUBLE_EQ(a.lo, 8);
}

TEST(Lipschitz, MatchesPatternSpectralNorms) {
  oracle::Rng rng(10);
  for (int trial = 0; trial < 8; ++trial) {
    auto model = oracle::random_ffn({2, 6, 2}, rng, 0.5);
    auto net = oracle::shallow_of(model);
    double truth = 0;
    for (const auto& cell : oracle::feasible_patterns_2d(net, -1, 1, 1e-10))
      truth = std::max(truth, oracle::spectral_norm(pattern_jacobian(net, cell.active)));
    auto r = lipschitz(compile(model), InputDomain::box({-1, -1}, {1, 1}), 2, 2);
    EXPECT_TRUE(r.exact);
    EXPECT_NEAR(r.value, truth, 1e-7) << trial;
  }
}

TEST(Lipschitz, ScalarUsesDualNorm) {
  auto g = compile(linear_model({{3, -4}}, {0}));
  InputDomain D = InputDomain::box({-1, -1}, {1, 1});
  EXPECT_DOUBLE_EQ(lipschitz(g, D, HUGE_VAL, 1).value, 7);
  EXPECT_DOUBLE_EQ(lipschitz(g, D, 1, 1).value, 4);
  EXPECT_NEAR(lipschitz(g, D, 2, 2).value, 5, 1e-12);
}

TEST(Lipschitz, AnytimeBracketTightensWithBudget) {
  oracle::Rng rng(12);
  auto model = oracle::random_ffn({2, 8, 8, 2}, rng);
  auto g = compile(model);
  InputDomain D = InputDomain::box({-1, -1}, {1, 1});
  auto exact = lipschitz(g, D, 2, 2);
  ASSERT_TRUE(exact.exact);
  double prev_lo = 0, prev_hi = HUGE_VAL;
  for (size_t s : {0, 1, 2, 4, 8, 16, 32}) {
    Budget b;
    b.max_splits = s;
    auto r = lipschitz(g, D, 2, 2, b, LipschitzMode::anytime);
    EXPECT_LE(r.lo, exact.value + 1e-9) << s;
    EXPECT_GE(r.hi, exact.value - 1e-9) << s;
    EXPECT_GE(r.lo, prev_lo - 1e-12) << s;
    EXPECT_LE(r.hi, prev_hi + 1e-12) << s;
    prev_lo = r.lo;
    prev_hi = r.hi;
  }
}

TEST(Boundary, LinearExample) {
  auto g = compile(linear_model({{1, 0}, {0, 1}}, {0, 0}));
  RegionTable T = extract_regions(g, InputDomain::box({-1, -1}, {1, 1}));
  auto pieces = decision_boundary(T, 0, 1);
  ASSERT_EQ(pieces.size(), 1u);
  EXPECT_EQ(pieces[0].w, (Vec{1, -1}));
  ASSERT_EQ(pieces[0].vertices.size(), 2u);
  std::set<std::pair<double, double>> v;
  for (const auto& p : pieces[0].vertices) v.insert({p[0], p[1]});
  EXPECT_EQ(v, (std::set<std::pair<double, double>>{{-1, -1}, {1, 1}}));
  EXPECT_THROW(decision_boundary(T, 0, 2), IndexError);
  EXPECT_DOUBLE_EQ(boundary_distance({3, 4}, 0, {1, 1}), 7.0 / 5.0);
}

TEST(Boundary, VerticesHaveZeroMargin) {
  oracle::Rng rng(14);
  int pieces = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto model = oracle::random_ffn({2, 6, 2}, rng, 0.5);
    RegionTable T = extract_regions(compile(model), InputDomain::box({-1, -1}, {1, 1}));
    for (const auto& pc : decision_boundary(T, 0, 1)) {
      ++pieces;
      for (const auto& v : pc.vertices) {
        Vec y = oracle::reference_forward(model, v);
        EXPECT_LE(std::fabs(y[0] - y[1]), 1e-7);
      }
    }
  }
  EXPECT_GT(pieces, 0);
}
