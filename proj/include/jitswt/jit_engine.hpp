#pragma once

#include <deque>
#include <iosfwd>
#include <limits>
#include <memory>
#include <ostream>

#include "expr_graph.hpp"
#include "net_compiler.hpp"

namespace jitswt {

enum class LeafStatus { active, fully_refined, retired };

inline const char* to_string(LeafStatus s) {
  switch (s) {
    case LeafStatus::active: return "active";
    case LeafStatus::fully_refined: return "fully_refined";
    case LeafStatus::retired: return "retired";
  }
  return "?";
}

using IntervalMap = std::unordered_map<NodeId, std::pair<double, double>>;

struct Leaf {
  size_t id = 0;
  long parent = -1;
  size_t depth = 0;
  GuardSet guards;
  std::shared_ptr<const DecisionMap> commits;
  LeafStatus status = LeafStatus::active;
  Vec witness;  // a point of the cell, from the feasibility LP

  // Intervals inherited from ancestors (intersected into every new bound) and
  // the ones computed on this leaf since the last commit.
  std::shared_ptr<const IntervalMap> prior;
  IntervalMap own;
  std::shared_ptr<BoundsContext> ctx;
  std::optional<std::pair<Vec, Vec>> box;

  bool live() const { return status != LeafStatus::retired; }
};

constexpr size_t kUnlimited = std::numeric_limits<size_t>::max();

struct Budget {
  size_t max_splits = kUnlimited;
  size_t max_new_guards = kUnlimited;
  size_t max_lp_calls = kUnlimited;
  size_t splits = 0;
  size_t new_guards = 0;
  size_t lp_calls = 0;
  size_t closed_form_calls = 0;
};

enum class PairHeuristic { gap, overlap };

struct EngineOptions {
  PairHeuristic pair = PairHeuristic::gap;
  bool exact_dominance = true;  // LP test of c_j - c_best <= 0 before splitting
  bool keep_trace = false;
  std::ostream* trace_sink = nullptr;  // JSON lines
};

enum class StepKind { committed, split, refined, budget };

inline const char* to_string(StepKind k) {
  switch (k) {
    case StepKind::committed: return "committed";
    case StepKind::split: return "split";
    case StepKind::refined: return "refined";
    case StepKind::budget: return "budget";
  }
  return "?";
}

struct StepResult {
  StepKind kind = StepKind::refined;
  NodeId node = 0;
  int winner = -1;             // committed child index, when committed
  std::vector<size_t> children;  // new leaves, when split
  std::optional<GuardId> face;
};

struct RefineOutcome {
  std::vector<size_t> leaves;  // live leaves produced (fully refined unless exhausted)
  bool exhausted = false;
};

// Lazily refined cover of the domain by guarded leaves, each carrying a
// commit map for the Max nodes below the roots.
class JitEngine {
 public:
  JitEngine(std::shared_ptr<const ExprStore> store, std::vector<NodeId> roots, const InputDomain& domain,
            Budget budget = {}, EngineOptions opt = {}, const GuardLibrary* initial = nullptr)
      : store_(std::move(store)), roots_(std::move(roots)), core_(std::make_unique<Core>()), opt_(opt) {
    if (domain.dim() != store_->dim())
      throw DimensionMismatch("engine: domain dimension " + std::to_string(domain.dim()) + " != graph input " +
                              std::to_string(store_->dim()));
    core_->domain = domain;
    core_->lib = initial ? GuardLibrary(*initial) : GuardLibrary(store_->dim());
    core_->budget = budget;
    initial_planes_ = core_->lib.plane_count();
    Leaf root;
    root.commits = std::make_shared<DecisionMap>();
    if (domain.kind() == DomainKind::polytope || domain.has_extra()) {
      root.witness = core_->lib.check_feasible(GuardSet{}, domain, &core_->stats.lp_calls).witness;
    } else {
      root.witness = domain.from_unit(Vec(domain.dim(), 0.5));
    }
    leaves_.push_back(std::move(root));
  }

  JitEngine(const SwtGraph& g, const InputDomain& domain, Budget budget = {}, EngineOptions opt = {})
      : JitEngine(g.store, g.outputs, domain, budget, opt) {
    set_gates(g.gates);
  }

  void set_gates(const std::vector<GateSite>& gates) {
    for (const GateSite& gs : gates)
      if (gs.two_way()) gates_[gs.max_node] = gs;
  }

  const ExprStore& store() const { return *store_; }
  std::shared_ptr<const ExprStore> store_ptr() const { return store_; }
  const std::vector<NodeId>& roots() const { return roots_; }
  const std::unordered_map<NodeId, GateSite>& gates() const { return gates_; }
  const InputDomain& domain() const { return core_->domain; }
  const GuardLibrary& library() const { return core_->lib; }
  GuardLibrary& library() { return core_->lib; }
  size_t initial_planes() const { return initial_planes_; }
  const Leaf& leaf(size_t id) const { return leaves_.at(id); }
  size_t leaf_count() const { return leaves_.size(); }
  bool exhausted() const { return exhausted_; }
  const std::string& exhausted_reason() const { return exhausted_reason_; }
  const std::vector<nlohmann::json>& trace() const { return trace_; }

  std::vector<size_t> active_leaves() const {
    std::vector<size_t> out;
    for (const Leaf& L : leaves_)
      if (L.live()) out.push_back(L.id);
    return out;
  }

  Budget budget() const {
    Budget b = core_->budget;
    b.lp_calls = core_->stats.lp_calls;
    b.closed_form_calls = core_->stats.closed_form_calls;
    return b;
  }

  nlohmann::json counters() const {
    Budget b = budget();
    return {{"splits", b.splits},
            {"new_guards", b.new_guards},
            {"lp_calls", b.lp_calls},
            {"closed_form_calls", b.closed_form_calls},
            {"leaves", leaves_.size()},
            {"active", active_leaves().size()}};
  }

  BoundsContext& context(size_t id) {
    Leaf& L = leaves_.at(id);
    if (!L.ctx) {
      BoundsOptions o;
      o.cache = &core_->cache;
      o.stats = &core_->stats;
      Core* c = core_.get();
      o.lp_allowed = [c] { return c->stats.lp_calls < c->budget.max_lp_calls; };
      L.ctx = std::make_shared<BoundsContext>(*store_, core_->lib, core_->domain, L.guards, L.commits.get(), o);
    }
    return *L.ctx;
  }

  // Bounds of a node on a leaf, intersected with everything known from ancestors.
  std::pair<double, double> interval(size_t id, NodeId n) {
    Leaf& L = leaves_.at(id);
    if (auto it = L.own.find(n); it != L.own.end()) return it->second;
    BoundsInterval bi = context(id).bounds(n);
    double lo = bi.lb, hi = bi.ub;
    if (L.prior)
      if (auto it = L.prior->find(n); it != L.prior->end()) {
        lo = std::max(lo, it->second.first);
        hi = std::min(hi, it->second.second);
      }
    if (lo > hi) hi = lo;
    L.own[n] = {lo, hi};
    return {lo, hi};
  }

  std::optional<std::pair<Vec, double>> law(size_t id, NodeId n) { return context(id).try_collapse_affine(n); }

  // Anytime envelope at x: sup of lower / inf of upper over live leaves whose
  // closed cell holds x. Fully refined leaves contribute their exact law.
  std::pair<double, double> envelope(NodeId n, const Vec& x) {
    double lo = -HUGE_VAL, hi = HUGE_VAL;
    for (double slack : {0.0, 1e-9}) {
      bool any = false;
      for (Leaf& L : leaves_) {
        if (!L.live() || !core_->lib.contains(L.guards, x, slack)) continue;
        any = true;
        std::pair<double, double> iv;
        std::optional<std::pair<Vec, double>> f;
        if (L.status == LeafStatus::fully_refined && (f = law(L.id, n))) {
          double v = dot(f->first, x) + f->second;
          iv = {v, v};
        } else {
          iv = interval(L.id, n);
        }
        lo = std::max(lo, iv.first);
        hi = std::min(hi, iv.second);
      }
      if (any) break;
    }
    return {lo, hi};
  }

  // ---- refiners ----

  StepResult ensure_sign(size_t id, const GateSite& gs) {
    require_active(id);
    if (auto blocked = blocker(id, {gs.pre})) return dispatch(id, *blocked);
    BoundsContext& ctx = context(id);
    int pos = gs.pos_child, neg = 1 - gs.pos_child;
    if (const MaxDecision* d = ctx.decision(gs.max_node); d && d->decided()) return committed_result(gs.max_node, d->winner);
    auto z = ctx.try_collapse_affine(gs.pre);
    auto [lb, ub] = interval(id, gs.pre);
    if (ub <= tol::decision) return commit(id, gs.max_node, neg);
    if (lb >= -tol::decision) return commit(id, gs.max_node, pos);
    const Vec& w = z->first;
    double b = z->second;
    if (norm2(w) < tol::zero_normal) return commit(id, gs.max_node, b >= 0 ? pos : neg);
    // active: (-w)x <= b, inactive: w x <= -b
    std::optional<GuardId> inactive = core_->lib.find(w, -b);
    if (inactive) {
      GuardId active = core_->lib[*inactive].reverse_id;
      if (leaves_[id].guards.contains(active)) return commit(id, gs.max_node, pos);
      if (leaves_[id].guards.contains(*inactive)) return commit(id, gs.max_node, neg);
    }
    return split(id, w, -b, gs.max_node, {neg, pos}, "ensure_sign");
  }

  StepResult ensure_winner(size_t id, NodeId m) {
    require_active(id);
    const ExprNode& n = store_->node(m);
    if (n.kind != NodeKind::max) throw DimensionMismatch("ensure_winner: node " + std::to_string(m) + " is not a Max");
    BoundsContext& ctx0 = context(id);
    MaxDecision dec = ctx0.decision(m) ? *ctx0.decision(m) : MaxDecision{};
    if (dec.decided()) return committed_result(m, dec.winner);
    if (int r = ctx0.resolved_child(m); r >= 0) return commit(id, m, r);
    std::vector<size_t> alive;
    std::vector<NodeId> kids;
    for (size_t i = 0; i < n.children.size(); ++i)
      if (dec.is_alive(i)) {
        alive.push_back(i);
        kids.push_back(n.children[i]);
      }
    if (auto blocked = blocker(id, kids)) return dispatch(id, *blocked);

    BoundsContext& ctx = context(id);
    std::vector<std::pair<double, double>> iv;
    for (size_t i : alive) iv.push_back(interval(id, n.children[i]));
    size_t best = 0;
    for (size_t k = 1; k < alive.size(); ++k)
      if (iv[k].first > iv[best].first) best = k;
    double L = iv[best].first;
    std::vector<uint8_t> keep(alive.size(), 1);
    for (size_t k = 0; k < alive.size(); ++k)
      if (k != best && iv[k].second <= L + tol::decision) keep[k] = 0;
    if (opt_.exact_dominance) {
      auto fb = ctx.try_collapse_affine(n.children[alive[best]]);
      for (size_t k = 0; k < alive.size(); ++k) {
        if (k == best || !keep[k]) continue;
        auto fk = ctx.try_collapse_affine(n.children[alive[k]]);
        Vec w = sub(fk->first, fb->first);
        double b = fk->second - fb->second;
        if (norm_inf(w) == 0) {
          if (b <= 0) keep[k] = 0;
          continue;
        }
        bool relaxed = false;
        if (ctx.affine_range(w, b, Sense::max, &relaxed).value <= tol::decision) keep[k] = 0;
      }
    }
    std::vector<size_t> left;
    for (size_t k = 0; k < alive.size(); ++k)
      if (keep[k]) left.push_back(k);
    if (left.size() == 1) return commit(id, m, static_cast<int>(alive[best]));
    if (left.size() < alive.size()) {
      MaxDecision nd;
      nd.alive.assign(n.children.size(), 0);
      for (size_t k : left) nd.alive[alive[k]] = 1;
      set_decision(id, m, nd);
      emit("prune", id, std::nullopt, {{"node", m}, {"alive", left.size()}});
      dec = nd;
    }

    // comparator pair
    size_t p = left[0], q = left[1];
    double score = -HUGE_VAL;
    for (size_t a : left)
      for (size_t c : left) {
        if (a == c) continue;
        double s = opt_.pair == PairHeuristic::gap
                       ? (iv[a].second - iv[c].second) - (iv[a].first - iv[c].first)
                       : std::min(iv[a].second, iv[c].second) - std::max(iv[a].first, iv[c].first);
        if (s > score) {
          score = s;
          p = a;
          q = c;
        }
      }
    BoundsContext& ctx2 = context(id);
    auto fp = ctx2.try_collapse_affine(n.children[alive[p]]);
    auto fq = ctx2.try_collapse_affine(n.children[alive[q]]);
    // c_p >= c_q  <=>  (w_q - w_p) x <= b_p - b_q
    Vec w = sub(fq->first, fp->first);
    double b = fp->second - fq->second;
    auto kill = [&](size_t loser) {
      MaxDecision d = dec;
      if (d.alive.empty()) d.alive.assign(n.children.size(), 1);
      d.alive[alive[loser]] = 0;
      return d;
    };
    if (norm2(w) < tol::zero_normal) {
      // parallel laws: the one with the smaller offset never wins alone
      return apply_decision(id, m, kill(b >= 0 ? q : p));
    }
    if (auto g = core_->lib.find(w, b)) {
      GuardId r = core_->lib[*g].reverse_id;
      if (leaves_[id].guards.contains(*g)) return apply_decision(id, m, kill(q));
      if (leaves_[id].guards.contains(r)) return apply_decision(id, m, kill(p));
    }
    return split_decisions(id, w, b, m, {kill(q), kill(p)}, "ensure_winner");
  }

  // Split on the listed planes (oriented or not) that the leaf does not yet
  // carry, most central plane first. Returns the resulting live leaves.
  RefineOutcome ensure_common_refine(size_t id, const std::vector<GuardId>& faces) {
    RefineOutcome out;
    std::vector<size_t> work{id};
    while (!work.empty()) {
      size_t l = work.back();
      work.pop_back();
      std::vector<GuardId> todo;
      for (GuardId f : faces) {
        GuardId c = f - f % 2;
        if (!leaves_[l].guards.contains(c) && !leaves_[l].guards.contains(c + 1)) todo.push_back(c);
      }
      if (todo.empty()) {
        out.leaves.push_back(l);
        continue;
      }
      auto [lo, hi] = leaf_box(l);
      Vec mid(lo.size());
      for (size_t i = 0; i < mid.size(); ++i) mid[i] = 0.5 * (lo[i] + hi[i]);
      GuardId pick = todo[0];
      double best = HUGE_VAL;
      for (GuardId c : todo) {
        double s = std::fabs(core_->lib[c].slack(mid));
        if (s < best) {
          best = s;
          pick = c;
        }
      }
      const Halfspace& h = core_->lib[pick];
      StepResult r = split(l, h.normal, h.offset, std::nullopt, {}, "common_refine");
      if (r.kind == StepKind::budget) {
        out.leaves.push_back(l);
        out.exhausted = true;
        continue;
      }
      for (auto it = r.children.rbegin(); it != r.children.rend(); ++it) work.push_back(*it);
    }
    std::sort(out.leaves.begin(), out.leaves.end());
    return out;
  }

  // One refiner action on the smallest undecided Max reachable from the roots.
  StepResult step(size_t id) {
    Leaf& L = leaves_.at(id);
    if (L.status != LeafStatus::active) return {StepKind::refined, 0, -1, {}, std::nullopt};
    auto frontier = context(id).undecided_frontier(roots_);
    if (frontier.empty()) {
      leaves_[id].status = LeafStatus::fully_refined;
      emit("refined", id, std::nullopt, {});
      return {StepKind::refined, 0, -1, {}, std::nullopt};
    }
    return dispatch(id, frontier.front());
  }

  // Commits until the leaf splits, is fully refined, or the budget trips.
  StepResult advance(size_t id) {
    for (;;) {
      StepResult r = step(id);
      if (r.kind != StepKind::committed) return r;
    }
  }

  RefineOutcome refine_to_full(size_t id) {
    RefineOutcome out;
    std::vector<size_t> work{id};
    while (!work.empty()) {
      size_t l = work.back();
      work.pop_back();
      StepResult r = advance(l);
      if (r.kind == StepKind::split) {
        for (auto it = r.children.rbegin(); it != r.children.rend(); ++it) work.push_back(*it);
      } else {
        if (r.kind == StepKind::budget) out.exhausted = true;
        if (leaves_[l].live()) out.leaves.push_back(l);
      }
    }
    std::sort(out.leaves.begin(), out.leaves.end());
    return out;
  }

  RefineOutcome refine_all() {
    RefineOutcome out;
    for (size_t id : active_leaves()) {
      RefineOutcome r = refine_to_full(id);
      out.exhausted = out.exhausted || r.exhausted;
      out.leaves.insert(out.leaves.end(), r.leaves.begin(), r.leaves.end());
    }
    std::sort(out.leaves.begin(), out.leaves.end());
    return out;
  }

  // Bounding box of the leaf cell (2n LPs, cached).
  const std::pair<Vec, Vec>& leaf_box(size_t id) {
    Leaf& L = leaves_.at(id);
    if (!L.box) {
      size_t n = store_->dim();
      Vec lo(n), hi(n);
      BoundsContext& ctx = context(id);
      for (size_t i = 0; i < n; ++i) {
        Vec e = unit_vector(n, i);
        lo[i] = ctx.affine_range(e, 0, Sense::min).value;
        hi[i] = ctx.affine_range(e, 0, Sense::max).value;
      }
      leaves_[id].box = std::make_pair(lo, hi);
    }
    return *leaves_[id].box;
  }

  nlohmann::json leaf_json(size_t id) const {
    const Leaf& L = leaves_.at(id);
    return {{"id", L.id}, {"parent", L.parent}, {"depth", L.depth}, {"guards", L.guards.ids()}, {"status", to_string(L.status)}};
  }

 private:
  struct Core {
    InputDomain domain;
    GuardLibrary lib;
    Budget budget;
    OracleStats stats;
    AffineRangeCache cache;
  };

  void require_active(size_t id) const {
    if (leaves_.at(id).status == LeafStatus::retired) throw IndexError("leaf " + std::to_string(id) + " is retired");
  }

  StepResult dispatch(size_t id, NodeId m) {
    auto it = gates_.find(m);
    if (it != gates_.end()) return ensure_sign(id, it->second);
    return ensure_winner(id, m);
  }

  // Smallest undecided Max under the given nodes, if any.
  std::optional<NodeId> blocker(size_t id, const std::vector<NodeId>& nodes) {
    auto f = context(id).undecided_frontier(nodes);
    if (f.empty()) return std::nullopt;
    return f.front();
  }

  static StepResult committed_result(NodeId m, int winner) { return {StepKind::committed, m, winner, {}, std::nullopt}; }

  void set_decision(size_t id, NodeId m, const MaxDecision& d) {
    Leaf& L = leaves_[id];
    auto next = std::make_shared<DecisionMap>(*L.commits);
    (*next)[m] = d;
    L.commits = std::move(next);
    L.prior = merged_prior(L);
    L.own.clear();
    L.ctx.reset();
  }

  StepResult commit(size_t id, NodeId m, int winner) {
    MaxDecision d;
    d.winner = winner;
    set_decision(id, m, d);
    emit("commit", id, std::nullopt, {{"node", m}, {"winner", winner}});
    return committed_result(m, winner);
  }

  StepResult apply_decision(size_t id, NodeId m, MaxDecision d) {
    size_t left = 0;
    int only = -1;
    for (size_t i = 0; i < d.alive.size(); ++i)
      if (d.alive[i]) {
        ++left;
        only = static_cast<int>(i);
      }
    if (left == 1) return commit(id, m, only);
    set_decision(id, m, d);
    emit("prune", id, std::nullopt, {{"node", m}, {"alive", left}});
    return committed_result(m, -1);
  }

  static std::shared_ptr<const IntervalMap> merged_prior(const Leaf& L) {
    if (L.own.empty()) return L.prior;
    auto m = L.prior ? std::make_shared<IntervalMap>(*L.prior) : std::make_shared<IntervalMap>();
    for (const auto& [k, v] : L.own) (*m)[k] = v;
    return m;
  }

  bool trip(const std::string& why, size_t id) {
    exhausted_ = true;
    if (exhausted_reason_.empty()) exhausted_reason_ = why;
    emit("budget", id, std::nullopt, {{"reason", why}});
    return true;
  }

  StepResult split(size_t id, const Vec& w, double b, std::optional<NodeId> m, std::vector<int> winners,
                   const char* action) {
    std::vector<MaxDecision> ds;
    for (int k : winners) {
      MaxDecision d;
      d.winner = k;
      ds.push_back(d);
    }
    return split_decisions(id, w, b, m, ds, action);
  }

  // Children: S + {w x <= b} and S + {-w x <= -b}, with decision ds[0] / ds[1] on m.
  StepResult split_decisions(size_t id, const Vec& w, double b, std::optional<NodeId> m,
                             const std::vector<MaxDecision>& ds, const char* action) {
    Budget& B = core_->budget;
    bool fresh = !core_->lib.find(w, b).has_value();
    StepResult r;
    r.kind = StepKind::budget;
    r.node = m.value_or(0);
    if (B.splits >= B.max_splits) {
      trip("max_splits", id);
      return r;
    }
    if (fresh && B.new_guards >= B.max_new_guards) {
      trip("max_new_guards", id);
      return r;
    }
    if (B.max_lp_calls != kUnlimited && core_->stats.lp_calls + 2 > B.max_lp_calls) {
      trip("max_lp_calls", id);
      return r;
    }
    auto [g0, g1] = core_->lib.register_halfspace(w, b);
    if (fresh) ++B.new_guards;
    ++B.splits;
    const Leaf& P = leaves_[id];
    GuardSet sets[2] = {P.guards.with(g0), P.guards.with(g1)};
    FeasibilityResult fr[2];
    for (int k = 0; k < 2; ++k) fr[k] = core_->lib.check_feasible(sets[k], core_->domain, &core_->stats.lp_calls);
    if (!fr[0].feasible() && !fr[1].feasible())
      throw InfeasibleLeaf("leaf " + std::to_string(id) + ": both sides of guard " + std::to_string(g0) + " are empty");
    auto prior = merged_prior(P);
    r.kind = StepKind::split;
    r.face = g0;
    for (int k = 0; k < 2; ++k) {
      if (!fr[k].feasible()) {
        emit("drop", id, k == 0 ? g0 : g1, {});
        continue;
      }
      Leaf c;
      c.id = leaves_.size();
      c.parent = static_cast<long>(id);
      c.depth = leaves_[id].depth + 1;
      c.guards = sets[k];
      c.witness = fr[k].witness;
      c.prior = prior;
      if (m && !ds.empty()) {
        auto next = std::make_shared<DecisionMap>(*leaves_[id].commits);
        (*next)[*m] = ds[static_cast<size_t>(k)];
        c.commits = std::move(next);
      } else {
        c.commits = leaves_[id].commits;
      }
      r.children.push_back(c.id);
      leaves_.push_back(std::move(c));
    }
    Leaf& Pm = leaves_[id];
    Pm.status = LeafStatus::retired;
    Pm.ctx.reset();
    Pm.own.clear();
    Pm.prior.reset();
    emit(action, id, g0, {{"children", r.children}});
    return r;
  }

  void emit(const char* action, size_t id, std::optional<GuardId> face, nlohmann::json extra) {
    if (!opt_.keep_trace && !opt_.trace_sink) return;
    nlohmann::json j{{"action", action}, {"leaf", id}, {"face", face ? nlohmann::json(*face) : nlohmann::json()},
                     {"counters", counters()}};
    for (auto& [k, v] : extra.items()) j[k] = v;
    if (opt_.keep_trace) trace_.push_back(j);
    if (opt_.trace_sink) *opt_.trace_sink << j.dump() << "\n";
  }

  std::shared_ptr<const ExprStore> store_;
  std::vector<NodeId> roots_;
  std::unique_ptr<Core> core_;
  EngineOptions opt_;
  std::unordered_map<NodeId, GateSite> gates_;
  std::deque<Leaf> leaves_;
  size_t initial_planes_ = 0;
  bool exhausted_ = false;
  std::string exhausted_reason_;
  std::vector<nlohmann::json> trace_;
};

}  // namespace jitswt
