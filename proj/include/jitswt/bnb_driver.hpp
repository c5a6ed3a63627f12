#pragma once

#include "jit_engine.hpp"

namespace jitswt {

enum class Verdict { proof, counterexample, unknown };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::proof: return "Proof";
    case Verdict::counterexample: return "Counterexample";
    case Verdict::unknown: return "Unknown";
  }
  return "?";
}

struct SafeLeaf {
  GuardSet guards;
  double lb = 0;
};

struct Certificate {
  Verdict verdict = Verdict::unknown;
  std::vector<SafeLeaf> leaves;  // the safe archive; covers the domain on Proof
  std::optional<Vec> witness;
  double witness_g = 0;
  long leaf = -1;  // witness leaf, or the open leaf with the smallest lb on Unknown
  // bracket of min g over the domain
  double lb = -HUGE_VAL;
  double ub = HUGE_VAL;
  size_t splits = 0, new_guards = 0, lp_calls = 0;
  std::string reason;
  std::vector<std::pair<double, double>> history;  // bracket after every iteration

  nlohmann::json to_json(bool with_leaves = true) const {
    nlohmann::json j;
    j["verdict"] = to_string(verdict);
    nlohmann::json ls = nlohmann::json::array();
    if (with_leaves)
      for (const SafeLeaf& s : leaves) ls.push_back({{"guards", s.guards.ids()}, {"lb", s.lb}});
    j["leaves"] = ls;
    if (witness)
      j["witness"] = {{"x", *witness}, {"g", witness_g}};
    else
      j["witness"] = nullptr;
    j["counters"] = {{"splits", splits}, {"new_guards", new_guards}, {"lp_calls", lp_calls}};
    j["bracket"] = {{"lb", std::isfinite(lb) ? nlohmann::json(lb) : nlohmann::json(nullptr)},
                    {"ub", std::isfinite(ub) ? nlohmann::json(ub) : nlohmann::json(nullptr)}};
    if (leaf >= 0) j["leaf"] = leaf;
    if (!reason.empty()) j["reason"] = reason;
    return j;
  }
};

struct BnbOptions {
  Budget budget;
  EngineOptions engine;
  std::vector<GateSite> gates;
  const GuardLibrary* initial = nullptr;
  bool keep_history = false;
  bool probe_witnesses = true;  // evaluate g at each popped leaf's feasible point
};

// Exact minimum of the collapsed law of g on a fully refined leaf.
inline std::pair<double, Vec> minimize_on_leaf(JitEngine& E, size_t leaf, NodeId g) {
  auto f = E.law(leaf, g);
  if (!f) throw NotRefined("leaf " + std::to_string(leaf) + " does not collapse node " + std::to_string(g));
  if (norm_inf(f->first) == 0) return {f->second, E.leaf(leaf).witness};
  Extremum e = E.context(leaf).affine_range(f->first, f->second, Sense::min);
  return {e.value, e.point};
}

namespace detail {

class Bnb {
 public:
  Bnb(std::shared_ptr<const ExprStore> store, NodeId g, const InputDomain& D, const BnbOptions& opt)
      : E_(store, {g}, D, opt.budget, opt.engine, opt.initial), g_(g), opt_(opt) {
    E_.set_gates(opt.gates);
  }

  Certificate run() {
    enqueue(0);
    bool tripped = false;
    while (!open_.empty()) {
      size_t pick = select();
      size_t l = open_[pick].id;
      open_.erase(open_.begin() + static_cast<long>(pick));
      auto [lb, ub] = E_.interval(l, g_);
      if (lb >= -tol::decision) {
        cert_.leaves.push_back({E_.leaf(l).guards, lb});
        note();
        continue;
      }
      if (ub < 0 || E_.leaf(l).status == LeafStatus::fully_refined) {
        if (try_witness(l)) return finish(Verdict::counterexample);
        continue;
      }
      if (opt_.probe_witnesses && accept(E_.leaf(l).witness)) {
        inspected_lb_ = std::min(inspected_lb_, lb);
        cert_.leaf = static_cast<long>(l);
        return finish(Verdict::counterexample);
      }
      if (tripped) {
        unresolved_.push_back({l, lb, ub});
        note();
        continue;
      }
      StepResult r = E_.advance(l);
      if (r.kind == StepKind::split) {
        for (size_t c : r.children) enqueue(c);
      } else if (r.kind == StepKind::refined) {
        enqueue(l);
      } else {
        tripped = true;
        unresolved_.push_back({l, lb, ub});
      }
      note();
    }
    if (unresolved_.empty()) return finish(Verdict::proof);
    return finish(Verdict::unknown);
  }

  JitEngine& engine() { return E_; }

 private:
  struct Entry {
    size_t id;
    double lb, ub;
  };

  void enqueue(size_t l) {
    auto [lb, ub] = E_.interval(l, g_);
    open_.push_back({l, lb, ub});
  }

  // max gap, ties to the earliest leaf
  size_t select() const {
    size_t best = 0;
    for (size_t k = 1; k < open_.size(); ++k) {
      double gk = open_[k].ub - open_[k].lb, gb = open_[best].ub - open_[best].lb;
      if (gk > gb || (gk == gb && open_[k].id < open_[best].id)) best = k;
    }
    return best;
  }

  bool accept(const Vec& x) {
    if (!E_.domain().contains(x)) return false;
    double v = E_.store().eval(g_, x);
    if (!(v < 0)) return false;
    if (!cert_.witness || v < cert_.witness_g) {
      cert_.witness = x;
      cert_.witness_g = v;
    }
    return true;
  }

  bool try_witness(size_t l) {
    bool found = false;
    RefineOutcome out = E_.refine_to_full(l);
    for (size_t c : out.leaves) {
      inspected_lb_ = std::min(inspected_lb_, E_.interval(c, g_).first);
      if (E_.leaf(c).status == LeafStatus::fully_refined) {
        auto [v, x] = minimize_on_leaf(E_, c, g_);
        if (v < 0 && accept(x)) {
          found = true;
          cert_.leaf = static_cast<long>(c);
        }
      }
      if (!found && accept(E_.leaf(c).witness)) {
        found = true;
        cert_.leaf = static_cast<long>(c);
      }
    }
    if (!found) {
      // only reachable under the l2 relaxation: the pieces stay unresolved
      for (size_t c : out.leaves) {
        auto [lb, ub] = E_.interval(c, g_);
        unresolved_.push_back({c, lb, ub});
      }
      note();
    }
    return found;
  }

  void note() {
    if (!opt_.keep_history) return;
    auto [lo, hi] = bracket();
    cert_.history.emplace_back(lo, hi);
  }

  std::pair<double, double> bracket() const {
    double lo = inspected_lb_, hi = HUGE_VAL;
    for (const auto& s : cert_.leaves) lo = std::min(lo, s.lb);
    for (const auto& e : open_) {
      lo = std::min(lo, e.lb);
      hi = std::min(hi, e.ub);
    }
    for (const auto& e : unresolved_) {
      lo = std::min(lo, e.lb);
      hi = std::min(hi, e.ub);
    }
    if (cert_.witness) hi = std::min(hi, cert_.witness_g);
    return {lo, hi};
  }

  Certificate finish(Verdict v) {
    cert_.verdict = v;
    auto [lo, hi] = bracket();
    cert_.lb = lo;
    cert_.ub = hi;
    if (v == Verdict::counterexample) cert_.ub = std::min(cert_.ub, cert_.witness_g);
    if (opt_.keep_history) cert_.history.emplace_back(cert_.lb, cert_.ub);
    if (v == Verdict::unknown) {
      const Entry* worst = nullptr;
      for (const auto& e : unresolved_)
        if (!worst || e.lb < worst->lb) worst = &e;
      for (const auto& e : open_)
        if (!worst || e.lb < worst->lb) worst = &e;
      if (worst) cert_.leaf = static_cast<long>(worst->id);
      cert_.reason = E_.exhausted() ? E_.exhausted_reason() : "relaxation";
    }
    if (v != Verdict::proof) cert_.leaves.clear();
    Budget b = E_.budget();
    cert_.splits = b.splits;
    cert_.new_guards = b.new_guards;
    cert_.lp_calls = b.lp_calls;
    return cert_;
  }

  JitEngine E_;
  NodeId g_;
  BnbOptions opt_;
  std::vector<Entry> open_, unresolved_;
  double inspected_lb_ = HUGE_VAL;  // leaves examined for a witness
  Certificate cert_;
};

}  // namespace detail

// Anytime branch and bound for min g >= 0 over the domain.
inline Certificate run_bnb(std::shared_ptr<const ExprStore> store, NodeId g, const InputDomain& D,
                           const BnbOptions& opt = {}) {
  detail::Bnb b(std::move(store), g, D, opt);
  return b.run();
}

inline Certificate run_bnb(const SwtGraph& graph, NodeId g, const InputDomain& D, BnbOptions opt = {}) {
  opt.gates.insert(opt.gates.end(), graph.gates.begin(), graph.gates.end());
  return run_bnb(graph.store, g, D, opt);
}

}  // namespace jitswt
