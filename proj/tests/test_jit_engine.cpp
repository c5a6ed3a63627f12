#include <gtest/gtest.h>

#include <jitswt/jit_engine.hpp>
#include <sstream>

#include "support/reference.hpp"

using namespace jitswt;

namespace {

GateSite relu_site(ExprStore& st, NodeId pre, NodeId* out) {
  NodeId zero = st.constant(0);
  NodeId m = st.max({pre, zero});
  GateSite gs;
  gs.max_node = m;
  gs.pre = pre;
  gs.pos_child = st.node(m).children[0] == pre ? 0 : 1;
  *out = m;
  return gs;
}

InputDomain random_box(oracle::Rng& rng, size_t n, double half) {
  Vec c = rng.uniform_vec(n, -1, 1), lo(n), hi(n);
  for (size_t i = 0; i < n; ++i) {
    double r = rng.uniform(0.2, half);
    lo[i] = c[i] - r;
    hi[i] = c[i] + r;
  }
  return InputDomain::box(lo, hi);
}

Vec sample_in(const InputDomain& D, oracle::Rng& rng) {
  Vec u(D.dim());
  for (double& v : u) v = rng.uniform(0, 1);
  return D.from_unit(u);
}

// envelope snapshot for all roots at all probes
std::vector<std::pair<double, double>> snapshot(JitEngine& E, const std::vector<Vec>& xs) {
  std::vector<std::pair<double, double>> out;
  for (NodeId r : E.roots())
    for (const Vec& x : xs) out.push_back(E.envelope(r, x));
  return out;
}

}  // namespace

TEST(EnsureSign, NegativeCommit) {
  auto st = std::make_shared<ExprStore>(1);
  NodeId m;
  GateSite gs = relu_site(*st, st->affine({1}, -5), &m);
  JitEngine E(st, {m}, InputDomain::box({0}, {1}));
  StepResult r = E.ensure_sign(0, gs);
  EXPECT_EQ(r.kind, StepKind::committed);
  EXPECT_EQ(r.winner, 1 - gs.pos_child);
  EXPECT_EQ(E.library().size(), 0u);
  auto law = E.law(0, m);
  ASSERT_TRUE(law);
  EXPECT_EQ(law->first, Vec{0});
}

TEST(EnsureSign, StraddleSplits) {
  auto st = std::make_shared<ExprStore>(1);
  NodeId m;
  GateSite gs = relu_site(*st, st->input(0), &m);
  JitEngine E(st, {m}, InputDomain::box({-1}, {1}));
  StepResult r = E.ensure_sign(0, gs);
  ASSERT_EQ(r.kind, StepKind::split);
  ASSERT_EQ(r.children.size(), 2u);
  EXPECT_EQ(E.library().plane_count(), 1u);
  EXPECT_EQ(E.leaf(0).status, LeafStatus::retired);
  for (size_t c : r.children) {
    EXPECT_TRUE(E.library().contains(E.leaf(c).guards, E.leaf(c).witness));
    const Halfspace& h = E.library()[E.leaf(c).guards.ids()[0]];
    EXPECT_DOUBLE_EQ(std::fabs(h.normal[0]), 1.0);
    EXPECT_DOUBLE_EQ(h.offset, 0.0);
  }
  // the child on x <= 0 commits the zero branch
  for (size_t c : r.children) {
    int w = E.leaf(c).commits->at(m).winner;
    bool neg_side = E.library()[E.leaf(c).guards.ids()[0]].normal[0] > 0;
    EXPECT_EQ(w, neg_side ? 1 - gs.pos_child : gs.pos_child);
  }
}

TEST(EnsureSign, MatchesGridSign) {
  oracle::Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = oracle::random_ffn({3, 4, 2}, rng, 1.0);
    auto g = compile(m);
    InputDomain D = random_box(rng, 3, 0.6);
    JitEngine E(g, D);
    const GateSite& gs = g.gates[0];
    bool pos = false, neg = false;
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b)
        for (int c = 0; c < 4; ++c) {
          Vec x = D.from_unit({a / 4.0, b / 4.0, c / 3.0});
          double z = oracle::dotp(m.layers[0].W[gs.unit], x) + m.layers[0].b[gs.unit];
          (z > 0 ? pos : neg) = true;
        }
    StepResult r = E.ensure_sign(0, gs);
    if (pos && neg) {
      EXPECT_EQ(r.kind, StepKind::split) << trial;
    } else {
      // a commit must agree with the grid; a split means the grid missed the hinge
      if (r.kind == StepKind::committed) {
        EXPECT_EQ(r.winner == gs.pos_child, pos) << trial;
      }
    }
  }
}

TEST(EnsureWinner, SeparatedIntervals) {
  auto st = std::make_shared<ExprStore>(1);
  NodeId a = st->affine({1}, 5), b = st->affine({1}, 1);
  NodeId m = st->max({a, b});
  JitEngine E(st, {m}, InputDomain::box({0}, {1}));
  StepResult r = E.ensure_winner(0, m);
  ASSERT_EQ(r.kind, StepKind::committed);
  EXPECT_EQ(st->node(m).children[static_cast<size_t>(r.winner)], a);
}

TEST(EnsureWinner, PruneThenSplit) {
  auto st = std::make_shared<ExprStore>(1);
  NodeId x = st->input(0);
  NodeId m = st->max({x, st->neg(x), st->constant(-5)});
  EngineOptions opt;
  opt.exact_dominance = false;
  opt.keep_trace = true;
  JitEngine E(st, {m}, InputDomain::box({-1}, {1}), {}, opt);
  StepResult r = E.ensure_winner(0, m);
  ASSERT_EQ(r.kind, StepKind::split);
  ASSERT_EQ(r.children.size(), 2u);
  EXPECT_EQ(E.trace()[0]["action"], "prune");
  for (size_t c : r.children) {
    const MaxDecision& d = E.leaf(c).commits->at(m);
    size_t alive = 0;
    for (size_t i = 0; i < 3; ++i) alive += d.is_alive(i);
    EXPECT_EQ(alive, 1u);
    EXPECT_EQ(E.advance(c).kind, StepKind::refined);
    auto law = E.law(c, m);
    ASSERT_TRUE(law);
    EXPECT_DOUBLE_EQ(std::fabs(law->first[0]), 1.0);
  }
}

TEST(EnsureWinner, MaxpoolWinnerIsPointwiseArgmax) {
  oracle::Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    auto st = std::make_shared<ExprStore>(2);
    std::vector<NodeId> cand;
    for (int k = 0; k < 4; ++k) cand.push_back(st->affine(rng.normal_vec(2), 0.3 * rng.normal()));
    NodeId m = st->max(cand);
    InputDomain D = random_box(rng, 2, 1.0);
    JitEngine E(st, {m}, D);
    auto out = E.refine_to_full(0);
    ASSERT_FALSE(out.exhausted);
    for (size_t l : out.leaves) {
      ASSERT_EQ(E.leaf(l).status, LeafStatus::fully_refined);
      int w = E.context(l).resolved_child(m);
      ASSERT_GE(w, 0);
      NodeId win = st->node(m).children[static_cast<size_t>(w)];
      int hits = 0;
      for (int s = 0; s < 20000 && hits < 50; ++s) {
        Vec x = sample_in(D, rng);
        if (!E.library().contains(E.leaf(l).guards, x, 0)) continue;
        ++hits;
        double best = -HUGE_VAL;
        for (NodeId c : cand) best = std::max(best, st->eval(c, x));
        EXPECT_NEAR(st->eval(win, x), best, 1e-9);
      }
    }
  }
}

TEST(CommonRefine, EmptyDifferenceIsNoop) {
  auto st = std::make_shared<ExprStore>(2);
  JitEngine E(st, {st->input(0)}, InputDomain::box({-1, -1}, {1, 1}));
  auto out = E.ensure_common_refine(0, {});
  EXPECT_EQ(out.leaves, std::vector<size_t>{0});
  EXPECT_EQ(E.leaf_count(), 1u);
}

TEST(CommonRefine, OneAndTwoFaces) {
  auto st = std::make_shared<ExprStore>(2);
  InputDomain D = InputDomain::box({-1, -1}, {1, 1});
  {
    JitEngine E(st, {st->input(0)}, D);
    GuardId f = E.library().register_halfspace({1, 1}, 0.2).first;
    auto out = E.ensure_common_refine(0, {f});
    EXPECT_EQ(out.leaves.size(), 2u);
  }
  JitEngine E(st, {st->input(0)}, D);
  GuardId f1 = E.library().register_halfspace({1, 0.3}, 0.1).first;
  GuardId f2 = E.library().register_halfspace({-0.2, 1}, -0.3).first;
  GuardId far = E.library().register_halfspace({1, 0}, 5).first;  // misses the box
  auto out = E.ensure_common_refine(0, {f1, f2, far});
  EXPECT_LE(out.leaves.size(), 4u);
  EXPECT_GE(out.leaves.size(), 2u);
  oracle::Rng rng(3);
  size_t covered = 0;
  for (int s = 0; s < 4000; ++s) {
    Vec x = sample_in(D, rng);
    int strict = 0, closed = 0;
    for (size_t l : out.leaves) {
      if (E.library().contains(E.leaf(l).guards, x, -1e-9)) ++strict;
      if (E.library().contains(E.leaf(l).guards, x, 1e-12)) ++closed;
    }
    EXPECT_LE(strict, 1);
    covered += closed >= 1;
  }
  EXPECT_EQ(covered, 4000u);
  for (size_t l : out.leaves) {
    const GuardSet& S = E.leaf(l).guards;
    EXPECT_TRUE(S.contains(f1) || S.contains(f1 + 1));
    EXPECT_TRUE(S.contains(f2) || S.contains(f2 + 1));
  }
}

TEST(RefineToFull, AbsHasTwoLeaves) {
  auto g = compile(load_model_file(oracle::fixture("abs1d.json")));
  JitEngine E(g, InputDomain::box({-1}, {1}));
  auto out = E.refine_to_full(0);
  ASSERT_EQ(out.leaves.size(), 2u);
  std::set<double> slopes;
  for (size_t l : out.leaves) {
    auto f = E.law(l, g.outputs[0]);
    ASSERT_TRUE(f);
    slopes.insert(f->first[0]);
    EXPECT_NEAR(f->second, 0, 1e-15);
  }
  EXPECT_EQ(slopes, (std::set<double>{-1, 1}));
}

TEST(RefineToFull, CoverAndValues) {
  oracle::Rng rng(8);
  auto m = oracle::random_ffn({2, 4, 2}, rng);
  auto g = compile(m);
  InputDomain D = InputDomain::box({-0.8, -0.6}, {0.5, 0.9});
  JitEngine E(g, D);
  auto out = E.refine_to_full(0);
  ASSERT_FALSE(out.exhausted);
  for (int i = 0; i <= 40; ++i)
    for (int j = 0; j <= 40; ++j) {
      Vec x = D.from_unit({i / 40.0, j / 40.0});
      Vec y = oracle::reference_forward(m, x);
      bool in = false;
      for (size_t l : out.leaves) {
        if (!E.library().contains(E.leaf(l).guards, x, 1e-12)) continue;
        in = true;
        for (size_t o = 0; o < 2; ++o) {
          auto f = E.law(l, g.outputs[o]);
          ASSERT_TRUE(f);
          EXPECT_NEAR(dot(f->first, x) + f->second, y[o], 1e-9);
        }
      }
      EXPECT_TRUE(in);
    }
}

TEST(RefineToFull, ZeroSplitBudget) {
  auto st = std::make_shared<ExprStore>(1);
  NodeId m;
  GateSite gs = relu_site(*st, st->input(0), &m);
  Budget B;
  B.max_splits = 0;
  JitEngine E(st, {m}, InputDomain::box({-1}, {1}), B);
  E.set_gates({gs});
  auto out = E.refine_to_full(0);
  EXPECT_TRUE(out.exhausted);
  EXPECT_EQ(out.leaves, std::vector<size_t>{0});
  EXPECT_EQ(E.exhausted_reason(), "max_splits");
  auto iv = E.interval(0, m);
  EXPECT_LE(iv.first, 0.0);
  EXPECT_GE(iv.second, 1.0);
}

TEST(RefineToFull, EveryLayerKindCollapsesToForward) {
  // abs, leaky, prelu with alpha > 1, maxpool and max_pointwise all go
  // through ensure_sign / ensure_winner
  oracle::Rng rng(41);
  NetworkModel m;
  m.input_shape = {1, 2, 2};
  LayerSpec conv;
  conv.kind = LayerKind::conv2d;
  conv.kernel = Kernel(2, std::vector<Mat>(1, rng.normal_mat(2, 2)));
  conv.b = rng.normal_vec(2);
  conv.sy = conv.sx = 1;
  conv.py = conv.px = 1;
  m.layers.push_back(conv);  // [2,3,3]
  LayerSpec pr = oracle::act_layer(LayerKind::prelu);
  pr.alphas = {0.3, 1.6};
  m.layers.push_back(pr);
  LayerSpec mp;
  mp.kind = LayerKind::maxpool2d;
  mp.ky = mp.kx = 2;
  mp.sy = mp.sx = 1;
  m.layers.push_back(mp);  // [2,2,2]
  m.layers.push_back(oracle::act_layer(LayerKind::leaky_relu, 0.2));
  m.layers.push_back(oracle::dense_layer(rng.normal_mat(4, 8), rng.normal_vec(4)));
  m.layers.push_back(oracle::act_layer(LayerKind::abs));
  LayerSpec mx;
  mx.kind = LayerKind::max_pointwise;
  mx.arity = 2;
  m.layers.push_back(mx);
  m = oracle::finish(m);
  auto g = compile(m);
  InputDomain D = InputDomain::box(Vec(4, -0.3), Vec(4, 0.3));
  JitEngine E(g, D);
  auto out = E.refine_to_full(0);
  ASSERT_FALSE(out.exhausted);
  for (int s = 0; s < 300; ++s) {
    Vec x = sample_in(D, rng);
    Vec y = oracle::reference_forward(m, x);
    for (size_t o = 0; o < y.size(); ++o) {
      auto env = E.envelope(g.outputs[o], x);
      EXPECT_NEAR(env.first, y[o], 1e-9);
      EXPECT_NEAR(env.second, y[o], 1e-9);
    }
  }
}

TEST(Envelope, SoundAndMonotoneAcrossSteps) {
  oracle::Rng rng(2024);
  for (int net = 0; net < 6; ++net) {
    auto m = oracle::random_ffn({3, 6, 5, 2}, rng, 0.5);
    auto g = compile(m);
    InputDomain D = random_box(rng, 3, 0.8);
    JitEngine E(g, D);
    std::vector<Vec> xs;
    for (int k = 0; k < 60; ++k) xs.push_back(sample_in(D, rng));
    auto prev = snapshot(E, xs);
    for (int it = 0; it < 400; ++it) {
      auto act = E.active_leaves();
      size_t open = SIZE_MAX;
      for (size_t l : act)
        if (E.leaf(l).status == LeafStatus::active) {
          open = l;
          break;
        }
      if (open == SIZE_MAX) break;
      E.step(open);
      auto cur = snapshot(E, xs);
      for (size_t k = 0; k < cur.size(); ++k) {
        size_t r = k / xs.size();
        double y = oracle::reference_forward(m, xs[k % xs.size()])[r];
        ASSERT_LE(cur[k].first, y + 1e-9) << "net " << net << " step " << it;
        ASSERT_GE(cur[k].second, y - 1e-9);
        ASSERT_GE(cur[k].first, prev[k].first - 1e-12);
        ASSERT_LE(cur[k].second, prev[k].second + 1e-12);
      }
      prev = cur;
    }
  }
}

TEST(Accounting, CounterRelations) {
  oracle::Rng rng(5);
  for (int net = 0; net < 5; ++net) {
    auto m = oracle::random_ffn({4, 8, 6, 3}, rng, 0.5);
    auto g = compile(m);
    JitEngine E(g, random_box(rng, 4, 0.7));
    E.refine_all();
    Budget b = E.budget();
    size_t leaves = E.leaf_count();
    EXPECT_LE(E.active_leaves().size(), 1 + b.splits);
    EXPECT_LE(E.library().plane_count(), E.initial_planes() + b.new_guards);
    double c = double(b.lp_calls) / double(b.splits + b.new_guards + leaves);
    EXPECT_LE(c, 64.0);
  }
}

TEST(Budget, CountersNeverExceedMaxima) {
  oracle::Rng rng(6);
  auto g = compile(oracle::random_ffn({3, 10, 2}, rng, 0.5));
  for (size_t cap : {0, 1, 3, 7}) {
    Budget B;
    B.max_splits = cap;
    B.max_new_guards = cap + 1;
    B.max_lp_calls = 40 * (cap + 1);
    JitEngine E(g, InputDomain::box({-1, -1, -1}, {1, 1, 1}), B);
    E.refine_all();
    Budget b = E.budget();
    EXPECT_LE(b.splits, B.max_splits);
    EXPECT_LE(b.new_guards, B.max_new_guards);
    EXPECT_LE(b.lp_calls, B.max_lp_calls);
    EXPECT_LE(E.active_leaves().size(), 1 + b.splits);
  }
}

TEST(Trace, JsonLines) {
  auto g = compile(load_model_file(oracle::fixture("abs1d.json")));
  std::ostringstream os;
  EngineOptions opt;
  opt.trace_sink = &os;
  JitEngine E(g, InputDomain::box({-1}, {1}), {}, opt);
  E.refine_to_full(0);
  std::istringstream in(os.str());
  std::string line;
  std::vector<std::string> actions;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    ASSERT_TRUE(j.contains("leaf") && j.contains("face") && j.contains("counters"));
    actions.push_back(j["action"]);
  }
  ASSERT_GE(actions.size(), 3u);
  EXPECT_EQ(actions[0], "ensure_sign");
  EXPECT_EQ(std::count(actions.begin(), actions.end(), "refined"), 2);
}

TEST(Engine, RejectsDimensionMismatch) {
  auto st = std::make_shared<ExprStore>(2);
  EXPECT_THROW(JitEngine(st, {st->input(0)}, InputDomain::box({0}, {1})), DimensionMismatch);
}
