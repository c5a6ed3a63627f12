#include <gtest/gtest.h>

#include <jitswt/expr_graph.hpp>

#include "support/oracles.hpp"

using namespace jitswt;

namespace {

// Mirror of a random DAG kept outside the store, evaluated by plain recursion.
struct TNode {
  NodeKind kind;
  Vec w;
  double c = 0;
  std::vector<size_t> kids;
};

double walk(const std::vector<TNode>& t, size_t i, const Vec& x) {
  const TNode& n = t[i];
  switch (n.kind) {
    case NodeKind::affine: return oracle::dotp(n.w, x) + n.c;
    case NodeKind::sum: {
      double s = 0;
      for (size_t k : n.kids) s += walk(t, k, x);
      return s;
    }
    case NodeKind::max: {
      double m = -HUGE_VAL;
      for (size_t k : n.kids) m = std::max(m, walk(t, k, x));
      return m;
    }
    case NodeKind::scale: return n.c * walk(t, n.kids[0], x);
    case NodeKind::bias: return n.c + walk(t, n.kids[0], x);
  }
  return 0;
}

struct RandomDag {
  std::vector<TNode> mirror;
  std::vector<NodeId> ids;
  size_t root = 0;
};

RandomDag random_dag(ExprStore& st, oracle::Rng& rng, int layers) {
  RandomDag g;
  auto add = [&](TNode t, NodeId id) {
    g.mirror.push_back(std::move(t));
    g.ids.push_back(id);
    return g.mirror.size() - 1;
  };
  std::vector<size_t> frontier;
  for (int i = 0; i < 4; ++i) {
    Vec w = rng.normal_vec(st.dim());
    double b = rng.normal() * 0.3;
    frontier.push_back(add({NodeKind::affine, w, b, {}}, st.affine(w, b)));
  }
  for (int layer = 0; layer < layers; ++layer) {
    std::vector<size_t> next;
    for (int k = 0; k < 3; ++k) {
      size_t a = frontier[static_cast<size_t>(rng.integer(0, int(frontier.size()) - 1))];
      size_t b = frontier[static_cast<size_t>(rng.integer(0, int(frontier.size()) - 1))];
      switch (rng.integer(0, 3)) {
        case 0: next.push_back(add({NodeKind::max, {}, 0, {a, b}}, st.max({g.ids[a], g.ids[b]}))); break;
        case 1: next.push_back(add({NodeKind::sum, {}, 0, {a, b}}, st.sum({g.ids[a], g.ids[b]}))); break;
        case 2: {
          double c = rng.uniform(-1.5, 1.5);
          next.push_back(add({NodeKind::scale, {}, c, {a}}, st.scale(c, g.ids[a])));
          break;
        }
        default: {
          double c = rng.normal();
          next.push_back(add({NodeKind::bias, {}, c, {a}}, st.bias(c, g.ids[a])));
        }
      }
    }
    frontier = next;
  }
  std::vector<NodeId> top;
  std::vector<size_t> kids;
  for (size_t i : frontier) {
    top.push_back(g.ids[i]);
    kids.push_back(i);
  }
  g.root = add({NodeKind::max, {}, 0, kids}, st.max(top));
  return g;
}

}  // namespace

TEST(Eval, AbsViaMax) {
  ExprStore st(1);
  NodeId m = st.max({st.affine({1}, 0), st.affine({-1}, 0)});
  EXPECT_DOUBLE_EQ(st.eval(m, {0.3}), 0.3);
  EXPECT_DOUBLE_EQ(st.eval(m, {-0.7}), 0.7);
}

TEST(Eval, ScaleBias) {
  ExprStore st(1);
  NodeId e = st.scale(-2, st.bias(1, st.affine({1}, 0)));
  EXPECT_DOUBLE_EQ(st.eval(e, {2}), -6);
}

TEST(Eval, DimensionMismatch) {
  ExprStore st(2);
  NodeId a = st.affine({1, 1}, 0);
  EXPECT_THROW(st.eval(a, {1}), DimensionMismatch);
  EXPECT_THROW(st.affine({1}, 0), DimensionMismatch);
}

TEST(Eval, RandomDagMatchesTreeWalk) {
  oracle::Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    ExprStore st(3);
    auto g = random_dag(st, rng, 5);
    for (int k = 0; k < 100; ++k) {
      Vec x = rng.uniform_vec(3, -2, 2);
      EXPECT_EQ(st.eval(g.ids[g.root], x), walk(g.mirror, g.root, x));
    }
  }
}

TEST(Interning, SameExpressionSameId) {
  ExprStore st(2);
  NodeId a = st.max({st.affine({1, 0}, 0), st.affine({0, 1}, 1)});
  size_t n = st.size();
  NodeId b = st.max({st.affine({0, 1}, 1), st.affine({1, 0}, 0)});
  EXPECT_EQ(a, b);
  EXPECT_EQ(st.size(), n);
  EXPECT_EQ(st.affine({1 + 1e-10, 0}, -1e-11), st.affine({1, 0}, 0));
  EXPECT_NE(st.affine({1 + 1e-6, 0}, 0), st.affine({1, 0}, 0));
  EXPECT_EQ(st.max({a, a}), st.max({a}));
}

TEST(Interning, SharedAtomStoredOnce) {
  ExprStore st(4);
  NodeId a0 = st.affine({1, 1, 1, 1}, 0);
  std::vector<NodeId> terms;
  for (size_t i = 0; i < 4; ++i) terms.push_back(st.max({st.input(i), st.affine({1, 1, 1, 1}, 0)}));
  NodeId root = st.sum(terms);
  size_t count = 0;
  for (NodeId id : st.reachable({root}))
    if (st.node(id).kind == NodeKind::affine && st.weights(id) == Vec{1, 1, 1, 1}) ++count;
  EXPECT_EQ(count, 1u);
  for (NodeId t : terms) EXPECT_TRUE(std::find(st.node(t).children.begin(), st.node(t).children.end(), a0) != st.node(t).children.end());
}

TEST(Structure, ChildrenPrecedeParentsAndAcyclic) {
  oracle::Rng rng(2);
  ExprStore st(2);
  for (int t = 0; t < 5; ++t) random_dag(st, rng, 4);
  for (NodeId id = 0; id < st.size(); ++id)
    for (NodeId c : st.node(id).children) EXPECT_LT(c, id);
  EXPECT_TRUE(st.acyclic());
  auto j = st.dump();
  EXPECT_EQ(j["nodes"].size(), st.size());
}

TEST(Bounds, CoordinateRange) {
  ExprStore st(2);
  GuardLibrary lib(2);
  auto D = InputDomain::box({0, 0}, {1, 1});
  auto bi = bounds(st, st.affine({1, 0}, 0), {}, lib, D);
  EXPECT_DOUBLE_EQ(bi.lb, 0);
  EXPECT_DOUBLE_EQ(bi.ub, 1);
  ASSERT_TRUE(bi.exact_affine.has_value());
}

TEST(Bounds, MaxRuleSoundNotTight) {
  ExprStore st(2);
  GuardLibrary lib(2);
  auto D = InputDomain::box({-1, -1}, {1, 1});
  auto bi = bounds(st, st.max({st.affine({1, 0}, 0), st.affine({-1, 0}, 0)}), {}, lib, D);
  EXPECT_DOUBLE_EQ(bi.lb, -1);
  EXPECT_DOUBLE_EQ(bi.ub, 1);
  EXPECT_FALSE(bi.exact_affine.has_value());
}

TEST(Bounds, ScaleSignRule) {
  ExprStore st(1);
  GuardLibrary lib(1);
  auto D = InputDomain::box({1}, {2});
  NodeId m = st.max({st.input(0), st.constant(1.5)});  // [1.5, 2]
  auto a = bounds(st, st.scale(-3, m), {}, lib, D);
  EXPECT_DOUBLE_EQ(a.lb, -6);
  EXPECT_DOUBLE_EQ(a.ub, -4.5);
  auto b = bounds(st, st.bias(1, st.scale(2, m)), {}, lib, D);
  EXPECT_DOUBLE_EQ(b.lb, 4);
  EXPECT_DOUBLE_EQ(b.ub, 5);
}

TEST(Bounds, ContainsGridRangeOnRandomCells) {
  oracle::Rng rng(50);
  for (int t = 0; t < 50; ++t) {
    ExprStore st(2);
    GuardLibrary lib(2);
    auto g = random_dag(st, rng, 3);
    Vec lo = rng.uniform_vec(2, -2, 0), hi = add(lo, rng.uniform_vec(2, 0.2, 2));
    auto D = InputDomain::box(lo, hi);
    auto bi = bounds(st, g.ids[g.root], {}, lib, D);
    double mn = HUGE_VAL, mx = -HUGE_VAL;
    for (int i = 0; i < 40; ++i)
      for (int j = 0; j < 40; ++j) {
        Vec x{lo[0] + (hi[0] - lo[0]) * i / 39.0, lo[1] + (hi[1] - lo[1]) * j / 39.0};
        double v = walk(g.mirror, g.root, x);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
    EXPECT_LE(bi.lb, mn + 1e-9) << "trial " << t;
    EXPECT_GE(bi.ub, mx - 1e-9) << "trial " << t;
  }
}

TEST(Bounds, SoundAndMonotoneUnderRestriction) {
  oracle::Rng rng(77);
  for (int t = 0; t < 20; ++t) {
    ExprStore st(2);
    GuardLibrary lib(2);
    auto g = random_dag(st, rng, 3);
    auto D = InputDomain::box({-1, -1}, {1, 1});
    GuardSet S({lib.register_halfspace(rng.normal_vec(2), rng.uniform(0.2, 0.8)).first});
    GuardSet S2 = S.with(lib.register_halfspace(rng.normal_vec(2), rng.uniform(0.2, 0.8)).first);
    if (!lib.check_feasible(S2, D).feasible()) continue;
    for (size_t k = 0; k < g.ids.size(); ++k) {
      NodeId id = g.ids[k];
      auto a = bounds(st, id, S, lib, D);
      auto b = bounds(st, id, S2, lib, D);
      EXPECT_GE(b.lb, a.lb - 1e-9);
      EXPECT_LE(b.ub, a.ub + 1e-9);
    }
    auto bi = bounds(st, g.ids[g.root], S2, lib, D);
    int seen = 0;
    while (seen < 1000) {
      Vec x = rng.uniform_vec(2, -1, 1);
      if (!lib.contains(S2, x, 0)) continue;
      ++seen;
      double v = st.eval(g.ids[g.root], x);
      EXPECT_LE(bi.lb, v + 1e-9);
      EXPECT_GE(bi.ub, v - 1e-9);
    }
  }
}

TEST(Bounds, CancellationOfOppositeTerms) {
  ExprStore st(1);
  GuardLibrary lib(1);
  auto D = InputDomain::box({-1}, {1});
  NodeId m = st.abs(st.input(0));
  NodeId zero = st.diff(m, m);
  auto bi = bounds(st, zero, {}, lib, D);
  EXPECT_DOUBLE_EQ(bi.lb, 0);
  EXPECT_DOUBLE_EQ(bi.ub, 0);
}

TEST(Collapse, CommittedWinner) {
  ExprStore st(2);
  GuardLibrary lib(2);
  auto D = InputDomain::box({0, 0}, {1, 1});
  NodeId a1 = st.affine({1, 2}, 3), a2 = st.affine({-1, 0}, 0);
  NodeId m = st.max({a1, a2});
  DecisionMap dm;
  EXPECT_FALSE(try_collapse_affine(st, m, {}, lib, D, dm).has_value());
  size_t idx = st.node(m).children[0] == a1 ? 0 : 1;
  dm[m].winner = static_cast<int>(idx);
  auto law = try_collapse_affine(st, m, {}, lib, D, dm);
  ASSERT_TRUE(law.has_value());
  EXPECT_EQ(law->first, (Vec{1, 2}));
  EXPECT_EQ(law->second, 3);
}

TEST(Collapse, AffineSum) {
  ExprStore st(2);
  GuardLibrary lib(2);
  auto D = InputDomain::box({0, 0}, {1, 1});
  auto law = try_collapse_affine(st, st.sum({st.affine({1, 2}, 3), st.affine({4, 5}, 6)}), {}, lib, D, {});
  ASSERT_TRUE(law.has_value());
  EXPECT_EQ(law->first, (Vec{5, 7}));
  EXPECT_EQ(law->second, 9);
}

// Commit every Max to its winner at an anchor point, fence the winners with
// comparator faces, then the collapsed law must agree with eval on the cell.
TEST(Collapse, DeepDagOnWinnerCell) {
  oracle::Rng rng(123);
  int tested = 0;
  for (int t = 0; t < 20; ++t) {
    ExprStore st(2);
    GuardLibrary lib(2);
    auto g = random_dag(st, rng, 5);
    NodeId root = g.ids[g.root];
    auto D = InputDomain::box({-1, -1}, {1, 1});
    Vec x0 = rng.uniform_vec(2, -0.5, 0.5);
    DecisionMap dm;
    std::vector<GuardId> faces;
    // resolve bottom-up so every Max child has a known law at x0
    BoundsContext probe(st, lib, D, {}, &dm);
    bool ok = true;
    for (NodeId id : st.reachable({root})) {
      const ExprNode& n = st.node(id);
      if (n.kind != NodeKind::max || n.children.size() < 2) continue;
      probe.clear();
      std::vector<std::pair<Vec, double>> laws;
      size_t best = 0;
      for (size_t i = 0; i < n.children.size(); ++i) {
        auto l = probe.try_collapse_affine(n.children[i]);
        ASSERT_TRUE(l.has_value());
        laws.push_back(*l);
        if (dot(l->first, x0) + l->second > dot(laws[best].first, x0) + laws[best].second) best = i;
      }
      for (size_t i = 0; i < laws.size(); ++i) {
        if (i == best) continue;
        Vec w = sub(laws[i].first, laws[best].first);
        double d = laws[best].second - laws[i].second;
        if (norm2(w) < 1e-9) continue;
        if (dot(w, x0) - d > -1e-6) ok = false;
        faces.push_back(lib.register_halfspace(w, d).first);
      }
      dm[id].winner = static_cast<int>(best);
    }
    if (!ok) continue;
    GuardSet S(faces);
    auto law = try_collapse_affine(st, root, S, lib, D, dm);
    ASSERT_TRUE(law.has_value());
    int seen = 0;
    for (int k = 0; k < 20000 && seen < 20; ++k) {
      Vec x = add(x0, rng.uniform_vec(2, -0.3, 0.3));
      if (!lib.contains(S, x, 0) || !D.contains(x)) continue;
      ++seen;
      EXPECT_NEAR(dot(law->first, x) + law->second, st.eval(root, x), 1e-9);
    }
    EXPECT_GE(seen, 1);
    ++tested;
  }
  EXPECT_GE(tested, 10);
}
