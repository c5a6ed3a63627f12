#pragma once

#include <functional>
#include <json.hpp>
#include <map>
#include <mutex>
#include <optional>
#include <unordered_map>

#include "common.hpp"
#include "guard_library.hpp"
#include "input_domain.hpp"
#include "linear_oracle.hpp"

namespace jitswt {

using NodeId = uint32_t;

enum class NodeKind : uint8_t { affine, sum, max, scale, bias };

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::affine: return "Affine";
    case NodeKind::sum: return "Sum";
    case NodeKind::max: return "Max";
    case NodeKind::scale: return "Scale";
    case NodeKind::bias: return "Bias";
  }
  return "?";
}

struct ExprNode {
  NodeKind kind = NodeKind::affine;
  double coef = 0;         // Affine: b, Scale: c, Bias: b
  uint32_t slot = 0;       // Affine: index into weight table
  std::vector<NodeId> children;
};

// Hash-consed CPWL expression store. Children always have smaller ids than
// their parents, so id order is a topological order.
class ExprStore {
 public:
  explicit ExprStore(size_t dim) : dim_(dim) {
    proj_.resize(dim);
    uint64_t s = 0x2545F4914F6CDD1DULL;
    for (double& r : proj_) {
      s ^= s << 13;
      s ^= s >> 7;
      s ^= s << 17;
      r = 0.5 + 0.5 * static_cast<double>(s % 1000003) / 1000003.0;
    }
  }

  size_t dim() const { return dim_; }
  size_t size() const { return nodes_.size(); }
  const ExprNode& node(NodeId id) const { return nodes_.at(id); }
  const Vec& weights(NodeId id) const { return weights_.at(nodes_.at(id).slot); }

  NodeId affine(Vec w, double b) {
    if (w.size() != dim_) throw DimensionMismatch("Affine: weight dimension " + std::to_string(w.size()) + " != " + std::to_string(dim_));
    for (double& v : w)
      if (v == 0) v = 0;
    double s = b;
    for (size_t i = 0; i < dim_; ++i) s += proj_[i] * w[i];
    uint64_t base = hash_mix(static_cast<uint64_t>(NodeKind::affine), dim_);
    int64_t q = quantize(s);
    for (int64_t k = q - 1; k <= q + 1; ++k) {
      auto it = index_.find(hash_mix(base, static_cast<uint64_t>(k)));
      if (it == index_.end()) continue;
      for (NodeId id : it->second) {
        const ExprNode& n = nodes_[id];
        if (n.kind != NodeKind::affine || std::fabs(n.coef - b) > tol::intern) continue;
        const Vec& u = weights_[n.slot];
        bool same = true;
        for (size_t i = 0; i < dim_ && same; ++i) same = std::fabs(u[i] - w[i]) <= tol::intern;
        if (same) return id;
      }
    }
    ExprNode n;
    n.kind = NodeKind::affine;
    n.coef = b == 0 ? 0 : b;
    n.slot = static_cast<uint32_t>(weights_.size());
    weights_.push_back(std::move(w));
    return push(std::move(n), hash_mix(base, static_cast<uint64_t>(q)));
  }

  NodeId constant(double b) { return affine(Vec(dim_, 0.0), b); }
  NodeId input(size_t i) { return affine(unit_vector(dim_, i), 0.0); }

  NodeId sum(std::vector<NodeId> children) {
    if (children.empty()) throw DimensionMismatch("Sum needs at least one child");
    std::sort(children.begin(), children.end());
    return interned(NodeKind::sum, 0, std::move(children));
  }

  NodeId max(std::vector<NodeId> children) {
    if (children.empty()) throw DimensionMismatch("Max needs at least one child");
    std::sort(children.begin(), children.end());
    children.erase(std::unique(children.begin(), children.end()), children.end());
    return interned(NodeKind::max, 0, std::move(children));
  }

  NodeId scale(double c, NodeId child) { return interned(NodeKind::scale, c, {child}); }
  NodeId bias(double b, NodeId child) { return interned(NodeKind::bias, b, {child}); }

  // Convenience constructors built from the five kinds.
  NodeId neg(NodeId e) { return scale(-1.0, e); }
  NodeId min(const std::vector<NodeId>& es) {
    std::vector<NodeId> negs;
    for (NodeId e : es) negs.push_back(neg(e));
    return neg(max(std::move(negs)));
  }
  NodeId abs(NodeId e) { return max({e, neg(e)}); }
  NodeId diff(NodeId a, NodeId b) { return sum({a, neg(b)}); }

  // Re-create a node of the given shape over new children (used by substitution).
  NodeId rebuild(const ExprNode& like, std::vector<NodeId> children) {
    switch (like.kind) {
      case NodeKind::affine: return affine(weights_.at(like.slot), like.coef);
      case NodeKind::sum: return sum(std::move(children));
      case NodeKind::max: return max(std::move(children));
      case NodeKind::scale: return scale(like.coef, children.at(0));
      case NodeKind::bias: return bias(like.coef, children.at(0));
    }
    throw SubstitutionError("unknown node kind");
  }

  double eval(NodeId root, const Vec& x) const {
    std::vector<double> memo;
    std::vector<uint8_t> done;
    return eval_memo(root, x, memo, done);
  }

  Vec eval(const std::vector<NodeId>& roots, const Vec& x) const {
    std::vector<double> memo;
    std::vector<uint8_t> done;
    Vec out;
    for (NodeId r : roots) out.push_back(eval_memo(r, x, memo, done));
    return out;
  }

  // Nodes reachable from roots, ascending id (a topological order).
  std::vector<NodeId> reachable(const std::vector<NodeId>& roots) const {
    std::vector<uint8_t> seen(nodes_.size(), 0);
    std::vector<NodeId> stack(roots.begin(), roots.end()), out;
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      if (seen[id]) continue;
      seen[id] = 1;
      out.push_back(id);
      for (NodeId c : nodes_[id].children) stack.push_back(c);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  // Kahn's algorithm over the whole store.
  bool acyclic() const {
    std::vector<size_t> indeg(nodes_.size(), 0);
    std::vector<std::vector<NodeId>> parents(nodes_.size());
    for (NodeId id = 0; id < nodes_.size(); ++id)
      for (NodeId c : nodes_[id].children) {
        if (c >= nodes_.size()) return false;
        parents[c].push_back(id);
        ++indeg[id];
      }
    std::vector<NodeId> q;
    for (NodeId id = 0; id < nodes_.size(); ++id)
      if (!indeg[id]) q.push_back(id);
    size_t seen = 0;
    while (!q.empty()) {
      NodeId id = q.back();
      q.pop_back();
      ++seen;
      for (NodeId p : parents[id])
        if (--indeg[p] == 0) q.push_back(p);
    }
    return seen == nodes_.size();
  }

  nlohmann::json dump(const std::vector<NodeId>& roots = {}) const {
    std::vector<NodeId> ids;
    if (roots.empty()) {
      for (NodeId i = 0; i < nodes_.size(); ++i) ids.push_back(i);
    } else {
      ids = reachable(roots);
    }
    nlohmann::json arr = nlohmann::json::array();
    for (NodeId id : ids) {
      const ExprNode& n = nodes_[id];
      nlohmann::json j{{"id", id}, {"kind", to_string(n.kind)}};
      switch (n.kind) {
        case NodeKind::affine:
          j["w"] = weights_[n.slot];
          j["b"] = n.coef;
          break;
        case NodeKind::scale: j["c"] = n.coef; break;
        case NodeKind::bias: j["b"] = n.coef; break;
        default: break;
      }
      if (!n.children.empty()) j["children"] = n.children;
      arr.push_back(std::move(j));
    }
    return nlohmann::json{{"dim", dim_}, {"roots", roots}, {"nodes", arr}};
  }

 private:
  static int64_t quantize(double s) { return static_cast<int64_t>(std::floor(s * 1e4)); }

  NodeId push(ExprNode n, uint64_t key) {
    NodeId id = static_cast<NodeId>(nodes_.size());
    for (NodeId c : n.children)
      if (c >= id) throw DimensionMismatch("child id out of range");
    nodes_.push_back(std::move(n));
    index_[key].push_back(id);
    return id;
  }

  NodeId interned(NodeKind kind, double coef, std::vector<NodeId> children) {
    for (NodeId c : children)
      if (c >= nodes_.size()) throw DimensionMismatch("unknown child id " + std::to_string(c));
    if (coef == 0) coef = 0;
    uint64_t base = hash_mix(static_cast<uint64_t>(kind) + 17, children.size());
    for (NodeId c : children) base = hash_mix(base, c);
    int64_t q = quantize(coef);
    for (int64_t k = q - 1; k <= q + 1; ++k) {
      auto it = index_.find(hash_mix(base, static_cast<uint64_t>(k)));
      if (it == index_.end()) continue;
      for (NodeId id : it->second) {
        const ExprNode& n = nodes_[id];
        if (n.kind == kind && n.children == children && std::fabs(n.coef - coef) <= tol::intern) return id;
      }
    }
    ExprNode n;
    n.kind = kind;
    n.coef = coef;
    n.children = std::move(children);
    return push(std::move(n), hash_mix(base, static_cast<uint64_t>(q)));
  }

  double eval_memo(NodeId id, const Vec& x, std::vector<double>& memo, std::vector<uint8_t>& done) const {
    if (x.size() != dim_) throw DimensionMismatch("eval: x has dimension " + std::to_string(x.size()) + ", expected " + std::to_string(dim_));
    if (memo.size() < nodes_.size()) {
      memo.resize(nodes_.size());
      done.resize(nodes_.size(), 0);
    }
    if (done[id]) return memo[id];
    const ExprNode& n = nodes_.at(id);
    double v = 0;
    switch (n.kind) {
      case NodeKind::affine: v = dot(weights_[n.slot], x) + n.coef; break;
      case NodeKind::sum:
        for (NodeId c : n.children) v += eval_memo(c, x, memo, done);
        break;
      case NodeKind::max:
        v = -HUGE_VAL;
        for (NodeId c : n.children) v = std::max(v, eval_memo(c, x, memo, done));
        break;
      case NodeKind::scale: v = n.coef * eval_memo(n.children[0], x, memo, done); break;
      case NodeKind::bias: v = n.coef + eval_memo(n.children[0], x, memo, done); break;
    }
    memo[id] = v;
    done[id] = 1;
    return v;
  }

  size_t dim_;
  Vec proj_;
  std::vector<ExprNode> nodes_;
  std::vector<Vec> weights_;
  std::unordered_map<uint64_t, std::vector<NodeId>> index_;
};

// ---------------------------------------------------------------------------
// Decisions, linear forms and bounds

// Per-Max commit state on a leaf: a winner child index, or the surviving
// (unpruned) candidates.
struct MaxDecision {
  int winner = -1;
  std::vector<uint8_t> alive;  // empty = all alive

  bool decided() const { return winner >= 0; }
  bool is_alive(size_t i) const { return winner >= 0 ? static_cast<size_t>(winner) == i : (alive.empty() || alive[i]); }
};

using DecisionMap = std::map<NodeId, MaxDecision>;

// Σ terms[i].second · node(terms[i].first) + w·x + b, where every term is an
// undecided Max node. Empty terms means the expression is affine on the cell.
struct LinearForm {
  Vec w;
  double b = 0;
  std::vector<std::pair<NodeId, double>> terms;
  bool is_affine() const { return terms.empty(); }
};

struct BoundsInterval {
  double lb = -HUGE_VAL;
  double ub = HUGE_VAL;
  std::optional<std::pair<Vec, double>> exact_affine;
  bool relaxed = false;  // computed with an outer relaxation somewhere
};

// Memo of LP extrema of affine laws, keyed by (domain, S, w, b, sense).
class AffineRangeCache {
 public:
  std::optional<Extremum> get(uint64_t dom, const GuardSet& S, const Vec& w, double b, Sense s) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = map_.find(Key{dom, S, w, b, s});
    if (it == map_.end()) return std::nullopt;
    ++hits_;
    return it->second;
  }
  void put(uint64_t dom, const GuardSet& S, const Vec& w, double b, Sense s, const Extremum& e) {
    std::lock_guard<std::mutex> lock(mu_);
    map_.emplace(Key{dom, S, w, b, s}, e);
  }
  size_t size() const { return map_.size(); }
  size_t hits() const { return hits_; }

 private:
  struct Key {
    uint64_t dom;
    GuardSet S;
    Vec w;
    double b;
    Sense s;
    bool operator==(const Key& o) const { return dom == o.dom && s == o.s && b == o.b && w == o.w && S == o.S; }
  };
  struct KeyHash {
    size_t operator()(const Key& k) const {
      uint64_t h = hash_mix(k.dom, k.S.hash());
      h = hash_double(hash_vec(h, k.w), k.b);
      return static_cast<size_t>(hash_mix(h, static_cast<uint64_t>(k.s)));
    }
  };
  std::unordered_map<Key, Extremum, KeyHash> map_;
  mutable size_t hits_ = 0;
  mutable std::mutex mu_;
};

struct BoundsOptions {
  AffineRangeCache* cache = nullptr;
  OracleStats* stats = nullptr;
  const LpBackend* backend = nullptr;
  std::function<bool()> lp_allowed;  // false => bounding-box fallback (sound)
};

// Bounds/collapse evaluation on one cell C(S) ∩ domain under a commit map.
//
// Affine parts are bounded exactly by LP. Undecided Max nodes contribute the
// structural interval [max_i LB_i, max_i UB_i] over their alive candidates.
// Sum/Scale/Bias are flattened into one linear form first, so equal Max
// terms with opposite coefficients cancel and all affine pieces are merged
// into a single LP objective.
class BoundsContext {
 public:
  using Options = BoundsOptions;

  BoundsContext(const ExprStore& store, const GuardLibrary& lib, const InputDomain& domain, GuardSet S,
                const DecisionMap* decisions = nullptr, Options opt = {})
      : store_(store), lib_(lib), domain_(domain), S_(std::move(S)), decisions_(decisions), opt_(std::move(opt)) {}

  const GuardSet& guardset() const { return S_; }
  const DecisionMap* decisions() const { return decisions_; }

  const MaxDecision* decision(NodeId id) const {
    if (!decisions_) return nullptr;
    auto it = decisions_->find(id);
    return it == decisions_->end() ? nullptr : &it->second;
  }

  // Effective child for a Max: decided winner or sole survivor, else -1.
  int resolved_child(NodeId id) const {
    const ExprNode& n = store_.node(id);
    if (n.children.size() == 1) return 0;
    const MaxDecision* d = decision(id);
    if (!d) return -1;
    if (d->winner >= 0) return d->winner;
    int only = -1;
    for (size_t i = 0; i < n.children.size(); ++i) {
      if (!d->is_alive(i)) continue;
      if (only >= 0) return -1;
      only = static_cast<int>(i);
    }
    return only;
  }

  const LinearForm& form(NodeId id) {
    auto it = forms_.find(id);
    if (it != forms_.end()) return it->second;
    const ExprNode& n = store_.node(id);
    LinearForm f;
    switch (n.kind) {
      case NodeKind::affine:
        f.w = store_.weights(id);
        f.b = n.coef;
        break;
      case NodeKind::scale: {
        f = form(n.children[0]);
        for (double& v : f.w) v *= n.coef;
        f.b *= n.coef;
        for (auto& t : f.terms) t.second *= n.coef;
        prune(f);
        break;
      }
      case NodeKind::bias:
        f = form(n.children[0]);
        f.b += n.coef;
        break;
      case NodeKind::sum: {
        f.w.assign(store_.dim(), 0.0);
        std::map<NodeId, double> acc;
        for (NodeId c : n.children) {
          const LinearForm& g = form(c);
          axpy(1.0, g.w, f.w);
          f.b += g.b;
          for (const auto& t : g.terms) acc[t.first] += t.second;
        }
        for (const auto& [k, v] : acc) f.terms.emplace_back(k, v);
        prune(f);
        break;
      }
      case NodeKind::max: {
        int r = resolved_child(id);
        if (r >= 0) {
          f = form(n.children[static_cast<size_t>(r)]);
        } else {
          f.w.assign(store_.dim(), 0.0);
          f.terms.emplace_back(id, 1.0);
        }
        break;
      }
    }
    return forms_.emplace(id, std::move(f)).first->second;
  }

  std::optional<std::pair<Vec, double>> try_collapse_affine(NodeId id) {
    const LinearForm& f = form(id);
    if (!f.is_affine()) return std::nullopt;
    return std::make_pair(f.w, f.b);
  }

  // Exact extremum of an affine law on the cell (LP or closed form, cached).
  Extremum affine_range(const Vec& w, double b, Sense sense, bool* relaxed = nullptr) {
    if (S_.empty() && !domain_.has_extra()) {
      if (auto cf = closed_form_extremum(w, b, domain_, sense)) {
        if (opt_.stats) ++opt_.stats->closed_form_calls;
        return *cf;
      }
    }
    if (opt_.cache)
      if (auto hit = opt_.cache->get(domain_.hash(), S_, w, b, sense)) {
        if (relaxed && domain_.kind() == DomainKind::l2_ball) *relaxed = true;
        return *hit;
      }
    if (opt_.lp_allowed && !opt_.lp_allowed()) {
      // Out of LP budget: bounding box of the domain, S ignored. Sound, not cached.
      if (relaxed) *relaxed = true;
      if (opt_.stats) ++opt_.stats->closed_form_calls;
      return *closed_form_extremum(w, b, InputDomain::box(domain_.lower(), domain_.upper()), sense);
    }
    Extremum e;
    if (domain_.kind() == DomainKind::l2_ball) {
      // Polytope ∩ l2 is not solved exactly; the bounding box gives an outer bound.
      if (relaxed) *relaxed = true;
      e = run_affine_lp(w, b, S_, lib_, InputDomain::box(domain_.lower(), domain_.upper()), sense, opt_.stats, backend());
    } else {
      e = run_affine_lp(w, b, S_, lib_, domain_, sense, opt_.stats, backend());
    }
    if (opt_.cache) opt_.cache->put(domain_.hash(), S_, w, b, sense, e);
    return e;
  }

  BoundsInterval bounds(NodeId id) {
    auto it = intervals_.find(id);
    if (it != intervals_.end()) return it->second;
    const ExprNode& n = store_.node(id);
    BoundsInterval bi;
    if (n.kind == NodeKind::max && resolved_child(id) < 0) {
      bi = max_interval(id);
    } else {
      bi = form_interval(form(id));
    }
    intervals_.emplace(id, bi);
    return bi;
  }

  BoundsInterval form_interval(const LinearForm& f) {
    BoundsInterval bi;
    bool relaxed = false;
    if (norm_inf(f.w) == 0) {
      bi.lb = bi.ub = f.b;
    } else {
      bi.lb = affine_range(f.w, f.b, Sense::min, &relaxed).value;
      bi.ub = affine_range(f.w, f.b, Sense::max, &relaxed).value;
    }
    for (const auto& [mid, c] : f.terms) {
      BoundsInterval t = bounds(mid);
      relaxed = relaxed || t.relaxed;
      if (c >= 0) {
        bi.lb += c * t.lb;
        bi.ub += c * t.ub;
      } else {
        bi.lb += c * t.ub;
        bi.ub += c * t.lb;
      }
    }
    if (f.is_affine()) bi.exact_affine = std::make_pair(f.w, f.b);
    if (bi.lb > bi.ub) bi.lb = bi.ub = 0.5 * (bi.lb + bi.ub);
    bi.relaxed = relaxed;
    return bi;
  }

  // Undecided Max nodes reachable from roots through forms and alive
  // candidates, ascending id.
  std::vector<NodeId> undecided_frontier(const std::vector<NodeId>& roots) {
    std::vector<NodeId> stack, out;
    std::unordered_map<NodeId, bool> seen;
    for (NodeId r : roots)
      for (const auto& t : form(r).terms) stack.push_back(t.first);
    while (!stack.empty()) {
      NodeId m = stack.back();
      stack.pop_back();
      if (seen[m]) continue;
      seen[m] = true;
      out.push_back(m);
      const ExprNode& n = store_.node(m);
      const MaxDecision* d = decision(m);
      for (size_t i = 0; i < n.children.size(); ++i) {
        if (d && !d->is_alive(i)) continue;
        for (const auto& t : form(n.children[i]).terms) stack.push_back(t.first);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  void clear() {
    forms_.clear();
    intervals_.clear();
  }

 private:
  const LpBackend& backend() const { return opt_.backend ? *opt_.backend : default_backend(); }

  static void prune(LinearForm& f) {
    double scale = 0;
    for (const auto& t : f.terms) scale = std::max(scale, std::fabs(t.second));
    f.terms.erase(std::remove_if(f.terms.begin(), f.terms.end(),
                                 [&](const auto& t) { return std::fabs(t.second) <= 1e-14 * scale || t.second == 0; }),
                  f.terms.end());
  }

  BoundsInterval max_interval(NodeId id) {
    const ExprNode& n = store_.node(id);
    const MaxDecision* d = decision(id);
    BoundsInterval bi;
    bool relaxed = false;
    for (size_t i = 0; i < n.children.size(); ++i) {
      if (d && !d->is_alive(i)) continue;
      BoundsInterval c = bounds(n.children[i]);
      bi.lb = std::max(bi.lb, c.lb);
      bi.ub = bi.ub == HUGE_VAL ? c.ub : std::max(bi.ub, c.ub);
      relaxed = relaxed || c.relaxed;
    }
    bi.relaxed = relaxed;
    return bi;
  }

  const ExprStore& store_;
  const GuardLibrary& lib_;
  const InputDomain& domain_;
  GuardSet S_;
  const DecisionMap* decisions_;
  Options opt_;
  std::unordered_map<NodeId, LinearForm> forms_;
  std::unordered_map<NodeId, BoundsInterval> intervals_;
};

// One-shot structural bounds of a node on a cell (no commits).
inline BoundsInterval bounds(const ExprStore& store, NodeId node, const GuardSet& S, const GuardLibrary& lib,
                             const InputDomain& domain, AffineRangeCache* cache = nullptr, OracleStats* stats = nullptr) {
  BoundsContext::Options opt;
  opt.cache = cache;
  opt.stats = stats;
  BoundsContext ctx(store, lib, domain, S, nullptr, opt);
  return ctx.bounds(node);
}

inline std::optional<std::pair<Vec, double>> try_collapse_affine(const ExprStore& store, NodeId node, const GuardSet& S,
                                                                 const GuardLibrary& lib, const InputDomain& domain,
                                                                 const DecisionMap& decisions) {
  BoundsContext ctx(store, lib, domain, S, &decisions);
  return ctx.try_collapse_affine(node);
}

}  // namespace jitswt
