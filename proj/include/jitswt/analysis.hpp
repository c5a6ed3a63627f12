#pragma once

#include <random>
#include <sstream>

#include "bnb_driver.hpp"
#include "jit_engine.hpp"

namespace jitswt {

// ---------------------------------------------------------------------------
// Region tables

struct AffineFragment {
  size_t id = 0;
  size_t leaf = 0;
  GuardSet guards;
  Mat J;  // one row per output
  Vec b;
  Vec witness;

  Vec eval(const Vec& x) const {
    Vec y(b);
    for (size_t r = 0; r < J.size(); ++r) y[r] += dot(J[r], x);
    return y;
  }
};

struct RegionTable {
  std::vector<AffineFragment> fragments;
  bool complete = false;
  InputDomain domain;
  std::shared_ptr<const GuardLibrary> library;
  size_t outputs = 0;

  std::optional<size_t> locate(const Vec& x, double slack = 1e-9) const {
    for (const auto& f : fragments)
      if (library->contains(f.guards, x, 0)) return f.id;
    for (const auto& f : fragments)
      if (library->contains(f.guards, x, slack)) return f.id;
    return std::nullopt;
  }

  std::optional<Vec> eval(const Vec& x) const {
    auto k = locate(x);
    if (!k) return std::nullopt;
    return fragments[*k].eval(x);
  }

  nlohmann::json to_json() const {
    nlohmann::json fr = nlohmann::json::array();
    for (const auto& f : fragments)
      fr.push_back({{"id", f.id}, {"guards", f.guards.ids()}, {"J", f.J}, {"b", f.b}});
    return {{"coverage", complete ? "complete" : "partial"},
            {"domain", domain.to_json()},
            {"outputs", outputs},
            {"library", library->dump()},
            {"fragments", fr}};
  }

  // fragment,guards,output,w,b with space separated vectors
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "fragment,guards,output,w,b\n";
    for (const auto& f : fragments)
      for (size_t r = 0; r < f.J.size(); ++r) {
        os << f.id << ",";
        for (size_t k = 0; k < f.guards.size(); ++k) os << (k ? " " : "") << f.guards.ids()[k];
        os << "," << r << ",";
        for (size_t k = 0; k < f.J[r].size(); ++k) os << (k ? " " : "") << f.J[r][k];
        os << "," << f.b[r] << "\n";
      }
    return os.str();
  }
};

inline Mat leaf_jacobian(JitEngine& E, size_t leaf, Vec* offset = nullptr) {
  Mat J;
  if (offset) offset->clear();
  for (NodeId r : E.roots()) {
    auto f = E.law(leaf, r);
    if (!f) throw NotRefined("leaf " + std::to_string(leaf) + " does not collapse root " + std::to_string(r));
    J.push_back(f->first);
    if (offset) offset->push_back(f->second);
  }
  return J;
}

inline RegionTable extract_regions(JitEngine& E) {
  RefineOutcome out = E.refine_all();
  RegionTable T;
  T.domain = E.domain();
  T.outputs = E.roots().size();
  bool all = true;
  for (size_t l : E.active_leaves()) {
    if (E.leaf(l).status != LeafStatus::fully_refined) {
      all = false;
      continue;
    }
    AffineFragment f;
    f.id = T.fragments.size();
    f.leaf = l;
    f.guards = E.leaf(l).guards;
    f.J = leaf_jacobian(E, l, &f.b);
    f.witness = E.leaf(l).witness;
    T.fragments.push_back(std::move(f));
  }
  T.complete = all && !out.exhausted;
  T.library = std::make_shared<GuardLibrary>(E.library());
  return T;
}

inline RegionTable extract_regions(const SwtGraph& g, const InputDomain& D, Budget budget = {}) {
  JitEngine E(g, D, budget);
  return extract_regions(E);
}

// Continuous CPWL rebuilt from a complete table in max-min form: per output,
// F = max_i min { l_j : l_j >= l_i on cell i }.
inline std::vector<NodeId> reconstruct(const RegionTable& T, ExprStore& store) {
  if (!T.complete) throw NotRefined("reconstruct: region table is partial");
  std::vector<NodeId> roots;
  for (size_t r = 0; r < T.outputs; ++r) {
    std::vector<NodeId> mins;
    for (const auto& fi : T.fragments) {
      std::vector<NodeId> above;
      for (const auto& fj : T.fragments) {
        Vec w = sub(fj.J[r], fi.J[r]);
        double b = fj.b[r] - fi.b[r];
        double lo = norm_inf(w) == 0 ? b : affine_extremum(w, b, fi.guards, *T.library, T.domain, Sense::min).value;
        if (lo >= -1e-9) above.push_back(store.affine(fj.J[r], fj.b[r]));
      }
      mins.push_back(store.min(above));
    }
    roots.push_back(store.max(mins));
  }
  return roots;
}

// ---------------------------------------------------------------------------
// Point location and Jacobians

// Refines along the leaves that hold x until one is fully refined.
inline size_t refine_at(JitEngine& E, const Vec& x) {
  auto holds = [&](size_t l, double slack) { return E.library().contains(E.leaf(l).guards, x, slack); };
  std::optional<size_t> cur;
  for (double slack : {0.0, 1e-9})
    if (!cur)
      for (size_t l : E.active_leaves())
        if (holds(l, slack)) {
          cur = l;
          break;
        }
  if (!cur) throw DomainError("refine_at: no leaf holds the point");
  size_t l = *cur;
  for (;;) {
    StepResult r = E.advance(l);
    if (r.kind == StepKind::refined) return l;
    if (r.kind == StepKind::budget) throw NotRefined("refine_at: budget exhausted");
    std::optional<size_t> next;
    for (double slack : {0.0, 1e-9})
      if (!next)
        for (size_t c : r.children)
          if (holds(c, slack)) {
            next = c;
            break;
          }
    l = next ? *next : r.children.front();
  }
}

struct JacobianResult {
  bool interior = true;
  Mat J;  // exact Jacobian, or the min-norm hull representative at a boundary
  std::vector<Mat> gradients;  // contributing fragment Jacobians (boundary only)
  size_t leaf = 0;

  nlohmann::json to_json() const {
    return {{"kind", interior ? "interior" : "boundary"}, {"J", J}, {"gradients", gradients}, {"leaf", leaf}};
  }
};

namespace detail {

inline Vec flatten(const Mat& M) {
  Vec v;
  for (const auto& r : M) v.insert(v.end(), r.begin(), r.end());
  return v;
}

inline Mat unflatten(const Vec& v, size_t rows) {
  Mat M(rows);
  size_t c = rows ? v.size() / rows : 0;
  for (size_t r = 0; r < rows; ++r) M[r].assign(v.begin() + static_cast<long>(r * c), v.begin() + static_cast<long>((r + 1) * c));
  return M;
}

// Normals of hinges that pass within tau of x on the leaf.
inline std::vector<Vec> near_hinges(JitEngine& E, size_t leaf, const Vec& x, double tau) {
  std::vector<Vec> out;
  const ExprStore& st = E.store();
  for (const auto& [m, d] : *E.leaf(leaf).commits) {
    auto git = E.gates().find(m);
    if (git != E.gates().end()) {
      auto z = E.law(leaf, git->second.pre);
      if (!z || std::fabs(dot(z->first, x) + z->second) > tau) continue;
      if (norm2(z->first) > 0) out.push_back(z->first);
      continue;
    }
    int w = d.winner >= 0 ? d.winner : E.context(leaf).resolved_child(m);
    if (w < 0) continue;
    const ExprNode& n = st.node(m);
    auto fw = E.law(leaf, n.children[static_cast<size_t>(w)]);
    if (!fw) continue;
    for (size_t i = 0; i < n.children.size(); ++i) {
      if (static_cast<int>(i) == w) continue;
      auto fi = E.law(leaf, n.children[i]);
      if (!fi) continue;
      Vec dw = sub(fw->first, fi->first);
      double gap = dot(dw, x) + fw->second - fi->second;
      if (std::fabs(gap) <= tau && norm2(dw) > 0) out.push_back(dw);
    }
  }
  return out;
}

}  // namespace detail

inline constexpr double kInteriorTau = 1e-7;
inline constexpr double kProbeDelta = 1e-6;

inline JacobianResult jacobian_at(JitEngine& E, const Vec& x) {
  if (!E.domain().contains(x)) throw DomainError("jacobian_at: x outside the domain");
  JacobianResult res;
  res.leaf = refine_at(E, x);
  res.J = leaf_jacobian(E, res.leaf);
  auto normals = detail::near_hinges(E, res.leaf, x, kInteriorTau);
  if (normals.empty()) return res;
  res.interior = false;
  res.gradients.push_back(res.J);
  auto add = [&](const Mat& J) {
    Vec f = detail::flatten(J);
    for (const Mat& G : res.gradients)
      if (norm_inf(sub(detail::flatten(G), f)) <= 1e-12) return;
    res.gradients.push_back(J);
  };
  for (const Vec& nrm : normals) {
    Vec u = scaled(nrm, 1.0 / norm2(nrm));
    for (double s : {1.0, -1.0}) {
      Vec p = x;
      axpy(s * kProbeDelta, u, p);
      if (!E.domain().contains(p, 0)) continue;
      size_t l = refine_at(E, p);
      add(leaf_jacobian(E, l));
    }
  }
  std::vector<Vec> pts;
  for (const Mat& G : res.gradients) pts.push_back(detail::flatten(G));
  res.J = detail::unflatten(min_norm_in_hull(pts), res.J.size());
  return res;
}

inline JacobianResult jacobian_at(const SwtGraph& g, const Vec& x, const InputDomain& D) {
  JitEngine E(g, D);
  return jacobian_at(E, x);
}

// ---------------------------------------------------------------------------
// Extrema

struct ExtremumResult {
  bool exact = false;
  double value = 0;  // best certified value (attained at point)
  Vec point;
  double lb = -HUGE_VAL, ub = HUGE_VAL;  // bracket of the true extremum

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", exact ? "exact" : "bracket"}, {"value", value}, {"point", point}};
    j["lb"] = std::isfinite(lb) ? nlohmann::json(lb) : nlohmann::json(nullptr);
    j["ub"] = std::isfinite(ub) ? nlohmann::json(ub) : nlohmann::json(nullptr);
    return j;
  }
};

// Best-first search of sup (or inf) of a root over the domain.
inline ExtremumResult extremum(JitEngine& E, NodeId root, Sense sense) {
  const double sg = sense == Sense::max ? 1.0 : -1.0;
  struct Item {
    size_t id;
    double up;  // upper bound of sg * root on the leaf
  };
  std::vector<Item> open;
  double inc = -HUGE_VAL;
  Vec inc_pt;
  auto offer = [&](const Vec& x) {
    if (!E.domain().contains(x)) return;
    double v = sg * E.store().eval(root, x);
    if (v > inc) {
      inc = v;
      inc_pt = x;
    }
  };
  auto push = [&](size_t l) {
    auto [lo, hi] = E.interval(l, root);
    open.push_back({l, sg > 0 ? hi : -lo});
    offer(E.leaf(l).witness);
  };
  for (size_t l : E.active_leaves()) push(l);
  double settled = -HUGE_VAL;  // leaves whose exact optimum was not attainable (l2 relaxation)
  bool stopped = false;
  while (!open.empty()) {
    size_t k = 0;
    for (size_t i = 1; i < open.size(); ++i)
      if (open[i].up > open[k].up || (open[i].up == open[k].up && open[i].id < open[k].id)) k = i;
    Item it = open[k];
    if (it.up <= inc + 1e-12 * (1 + std::fabs(inc))) break;
    open.erase(open.begin() + static_cast<long>(k));
    if (E.leaf(it.id).status == LeafStatus::fully_refined) {
      auto f = E.law(it.id, root);
      Vec w = scaled(f->first, sg);
      Extremum ex = norm_inf(w) == 0 ? Extremum{sg * f->second, E.leaf(it.id).witness}
                                     : E.context(it.id).affine_range(w, sg * f->second, Sense::max);
      offer(ex.point);
      if (ex.value > inc + 1e-12 * (1 + std::fabs(inc))) settled = std::max(settled, ex.value);
      continue;
    }
    StepResult r = E.advance(it.id);
    if (r.kind == StepKind::split) {
      for (size_t c : r.children) push(c);
    } else if (r.kind == StepKind::refined) {
      push(it.id);
    } else {
      open.push_back(it);
      stopped = true;
      break;
    }
  }
  double up = std::max(inc, settled);
  for (const Item& it : open) up = std::max(up, it.up);
  ExtremumResult res;
  res.exact = !stopped && settled == -HUGE_VAL;
  res.value = sg * inc;
  res.point = inc_pt;
  if (!res.exact) up = std::max(up, inc);
  if (res.exact) up = inc;
  if (sg > 0) {
    res.lb = inc;
    res.ub = up;
  } else {
    res.lb = -up;
    res.ub = -inc;
  }
  return res;
}

inline ExtremumResult extremum(const SwtGraph& g, size_t output, const InputDomain& D, Sense sense, Budget budget = {}) {
  if (output >= g.outputs.size()) throw IndexError("extremum: output " + std::to_string(output) + " out of range");
  JitEngine E(g.store, {g.outputs[output]}, D, budget);
  E.set_gates(g.gates);
  return extremum(E, g.outputs[output], sense);
}

// ---------------------------------------------------------------------------
// Operator norms and Lipschitz constants

inline double spectral_norm_power(const Mat& J, unsigned seed = 7) {
  if (J.empty() || J[0].empty()) return 0;
  const size_t n = J[0].size();
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0, 1);
  Mat Jt = transpose(J);
  double best = 0;
  for (int restart = 0; restart < 2; ++restart) {
    Vec v(n);
    for (double& t : v) t = nd(gen);
    double nv = norm2(v);
    if (nv == 0) continue;
    v = scaled(v, 1.0 / nv);
    double sigma = 0;
    for (int it = 0; it < 200; ++it) {
      Vec w = matvec(Jt, matvec(J, v));
      double nw = norm2(w);
      if (nw == 0) break;
      v = scaled(w, 1.0 / nw);
      double s = norm2(matvec(J, v));
      bool done = std::fabs(s - sigma) <= 1e-12 * std::max(1.0, s);
      sigma = s;
      if (done) break;
    }
    best = std::max(best, sigma);
  }
  return best;
}

inline bool norm_pair_is_hard(double p, double r) {
  return (std::isinf(p) && (r == 1 || r == 2)) || (p == 2 && r == 1);
}

// ‖J‖_{p->r} for the closed-form family.
inline double operator_norm(const Mat& J, double p, double r) {
  auto check = [](double v) { return v == 1 || v == 2 || std::isinf(v); };
  if (!check(p) || !check(r)) throw UnsupportedNormPair("norms must be 1, 2 or inf");
  if (norm_pair_is_hard(p, r)) throw UnsupportedNormPair("exact ‖J‖ for this (p, r) pair is NP-hard");
  if (J.empty()) return 0;
  const size_t m = J.size(), n = J[0].size();
  double v = 0;
  if (p == 1) {
    // max column r-norm
    for (size_t c = 0; c < n; ++c) {
      Vec col(m);
      for (size_t k = 0; k < m; ++k) col[k] = J[k][c];
      v = std::max(v, norm_p(col, r));
    }
    return v;
  }
  if (std::isinf(r)) {
    // max row p*-norm
    for (const auto& row : J) v = std::max(v, norm_p(row, dual_exponent(p)));
    return v;
  }
  return spectral_norm_power(J);  // p = r = 2
}

// Lower (sign vectors) and upper (dual norms) for the hard pairs.
inline std::pair<double, double> operator_norm_bracket(const Mat& J, double p, double r) {
  if (!norm_pair_is_hard(p, r)) {
    double v = operator_norm(J, p, r);
    return {v, v};
  }
  if (J.empty()) return {0, 0};
  // ‖J‖_{2->1} = ‖J^T‖_{inf->2}
  Mat A = p == 2 ? transpose(J) : J;
  double rr = p == 2 ? 2.0 : r;
  const size_t n = A[0].size();
  double lo = 0;
  auto try_sign = [&](const Vec& s) { lo = std::max(lo, norm_p(matvec(A, s), rr)); };
  if (n <= 16) {
    for (size_t mask = 0; mask < (size_t(1) << n); ++mask) {
      Vec s(n);
      for (size_t i = 0; i < n; ++i) s[i] = (mask >> i) & 1 ? 1.0 : -1.0;
      try_sign(s);
    }
  } else {
    std::mt19937_64 gen(11);
    for (int t = 0; t < 4096; ++t) {
      Vec s(n);
      for (double& v : s) v = gen() & 1 ? 1.0 : -1.0;
      try_sign(s);
    }
  }
  double hi = 0;
  if (rr == 1) {
    for (const auto& row : A) hi += norm1(row);
  } else {
    for (const auto& row : A) hi += norm1(row) * norm1(row);
    hi = std::sqrt(hi);
  }
  return {lo, hi};
}

// Upper bound of the norm over every matrix dominated entrywise by M >= 0.
inline double dominated_norm_bound(const Mat& M, double p, double r) {
  if (norm_pair_is_hard(p, r)) return operator_norm_bracket(M, p, r).second;
  if (p == 2 && r == 2) {
    double fro = 0, c1 = 0, ri = 0;
    for (const auto& row : M) {
      fro += dot(row, row);
      ri = std::max(ri, norm1(row));
    }
    for (size_t c = 0; c < (M.empty() ? 0 : M[0].size()); ++c) {
      double s = 0;
      for (const auto& row : M) s += std::fabs(row[c]);
      c1 = std::max(c1, s);
    }
    return std::min(std::sqrt(fro), std::sqrt(c1 * ri));
  }
  return operator_norm(M, p, r);
}

namespace detail {

// Interval hull of the gradients a root can take on the leaf.
class GradientHull {
 public:
  GradientHull(JitEngine& E, size_t leaf) : E_(E), ctx_(E.context(leaf)) {}

  std::pair<Vec, Vec> of(NodeId id) {
    auto it = memo_.find(id);
    if (it != memo_.end()) return it->second;
    const ExprNode& n = E_.store().node(id);
    std::pair<Vec, Vec> g;
    const size_t d = E_.store().dim();
    switch (n.kind) {
      case NodeKind::affine: g = {E_.store().weights(id), E_.store().weights(id)}; break;
      case NodeKind::bias: g = of(n.children[0]); break;
      case NodeKind::scale: {
        auto c = of(n.children[0]);
        g = {scaled(c.first, n.coef), scaled(c.second, n.coef)};
        if (n.coef < 0) std::swap(g.first, g.second);
        break;
      }
      case NodeKind::sum:
        g = {Vec(d, 0.0), Vec(d, 0.0)};
        for (NodeId c : n.children) {
          auto h = of(c);
          axpy(1.0, h.first, g.first);
          axpy(1.0, h.second, g.second);
        }
        break;
      case NodeKind::max: {
        int r = ctx_.resolved_child(id);
        if (r >= 0) {
          g = of(n.children[static_cast<size_t>(r)]);
          break;
        }
        const MaxDecision* dec = ctx_.decision(id);
        g = {Vec(d, HUGE_VAL), Vec(d, -HUGE_VAL)};
        for (size_t i = 0; i < n.children.size(); ++i) {
          if (dec && !dec->is_alive(i)) continue;
          auto h = of(n.children[i]);
          for (size_t k = 0; k < d; ++k) {
            g.first[k] = std::min(g.first[k], h.first[k]);
            g.second[k] = std::max(g.second[k], h.second[k]);
          }
        }
        break;
      }
    }
    return memo_.emplace(id, g).first->second;
  }

 private:
  JitEngine& E_;
  BoundsContext& ctx_;
  std::unordered_map<NodeId, std::pair<Vec, Vec>> memo_;
};

}  // namespace detail

enum class LipschitzMode { exact, anytime };

struct LipschitzResult {
  bool exact = false;
  double value = 0;  // exact value, or the lower end of the bracket
  double lo = 0, hi = HUGE_VAL;
  long fragment = -1;  // leaf attaining the lower end
  size_t refined = 0, unresolved = 0;

  nlohmann::json to_json() const {
    return {{"kind", exact ? "exact" : "bracket"}, {"value", value}, {"lo", lo},
            {"hi", std::isfinite(hi) ? nlohmann::json(hi) : nlohmann::json(nullptr)},
            {"leaf", fragment}, {"refined_leaves", refined}, {"unresolved_leaves", unresolved}};
  }
};

// Scalar roots use the dual norm of the gradient; vector roots ‖J‖_{p->r}.
inline LipschitzResult lipschitz(JitEngine& E, double p, double r, LipschitzMode mode = LipschitzMode::exact) {
  const bool scalar = E.roots().size() == 1;
  const bool hard = !scalar && norm_pair_is_hard(p, r);
  if (hard && mode == LipschitzMode::exact)
    throw UnsupportedNormPair("exact Lipschitz constant for this (p, r) pair; use anytime mode");
  auto leaf_norm = [&](const Mat& J) -> std::pair<double, double> {
    if (scalar) {
      double v = norm_p(J[0], dual_exponent(p));
      return {v, v};
    }
    return operator_norm_bracket(J, p, r);
  };
  RefineOutcome out = E.refine_all();
  (void)out;
  LipschitzResult res;
  bool all_exact = !hard;
  for (size_t l : E.active_leaves()) {
    if (E.leaf(l).status == LeafStatus::fully_refined) {
      ++res.refined;
      auto [lo, hi] = leaf_norm(leaf_jacobian(E, l));
      if (lo > res.lo || res.fragment < 0) {
        if (lo >= res.lo) res.fragment = static_cast<long>(l);
        res.lo = std::max(res.lo, lo);
      }
      res.hi = res.hi == HUGE_VAL ? hi : std::max(res.hi, hi);
      if (lo != hi) all_exact = false;
      continue;
    }
    ++res.unresolved;
    all_exact = false;
    detail::GradientHull gh(E, l);
    Mat M;
    for (NodeId root : E.roots()) {
      auto [glo, ghi] = gh.of(root);
      Vec row(glo.size());
      for (size_t k = 0; k < row.size(); ++k) row[k] = std::max(std::fabs(glo[k]), std::fabs(ghi[k]));
      M.push_back(row);
    }
    double hi = scalar ? norm_p(M[0], dual_exponent(p)) : dominated_norm_bound(M, p, r);
    res.hi = res.hi == HUGE_VAL ? hi : std::max(res.hi, hi);
  }
  res.hi = std::max(res.hi, res.lo);
  res.exact = all_exact;
  if (res.exact) res.hi = res.lo;
  res.value = res.lo;
  return res;
}

inline LipschitzResult lipschitz(const SwtGraph& g, const InputDomain& D, double p, double r, Budget budget = {},
                                 LipschitzMode mode = LipschitzMode::exact) {
  JitEngine E(g, D, budget);
  return lipschitz(E, p, r, mode);
}

// ---------------------------------------------------------------------------
// Decision boundaries

struct BoundaryPiece {
  size_t fragment = 0;
  Vec w;
  double b = 0;
  bool whole_cell = false;      // F_i == F_j on the entire fragment
  std::vector<Vec> vertices;    // clipped segment in 2-D box domains

  nlohmann::json to_json() const {
    return {{"fragment", fragment}, {"w", w}, {"b", b}, {"whole_cell", whole_cell}, {"vertices", vertices}};
  }
};

inline double boundary_distance(const Vec& w, double b, const Vec& x) { return std::fabs(dot(w, x) + b) / norm2(w); }

namespace detail {

// Sutherland-Hodgman clip of a convex polygon by a.x <= d.
inline std::vector<Vec> clip_polygon(const std::vector<Vec>& poly, const Vec& a, double d) {
  std::vector<Vec> out;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec& P = poly[i];
    const Vec& Q = poly[(i + 1) % n];
    double fp = dot(a, P) - d, fq = dot(a, Q) - d;
    if (fp <= 0) out.push_back(P);
    if ((fp < 0 && fq > 0) || (fp > 0 && fq < 0)) {
      double t = fp / (fp - fq);
      out.push_back({P[0] + t * (Q[0] - P[0]), P[1] + t * (Q[1] - P[1])});
    }
  }
  return out;
}

inline std::vector<Vec> line_in_polygon(const std::vector<Vec>& poly, const Vec& w, double b) {
  std::vector<Vec> pts;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec& P = poly[i];
    const Vec& Q = poly[(i + 1) % n];
    double fp = dot(w, P) + b, fq = dot(w, Q) + b;
    if (fp == 0) pts.push_back(P);
    if ((fp < 0 && fq > 0) || (fp > 0 && fq < 0)) {
      double t = fp / (fp - fq);
      pts.push_back({P[0] + t * (Q[0] - P[0]), P[1] + t * (Q[1] - P[1])});
    }
  }
  // keep the two extreme points along the line direction
  if (pts.size() > 2) {
    Vec dir{-w[1], w[0]};
    auto key = [&](const Vec& v) { return dot(dir, v); };
    auto [mn, mx] = std::minmax_element(pts.begin(), pts.end(), [&](const Vec& a, const Vec& c) { return key(a) < key(c); });
    pts = {*mn, *mx};
  }
  return pts;
}

}  // namespace detail

inline std::vector<BoundaryPiece> decision_boundary(const RegionTable& T, size_t i, size_t j) {
  if (i >= T.outputs || j >= T.outputs) throw IndexError("decision_boundary: output index out of range");
  if (i == j) throw IndexError("decision_boundary: i == j");
  std::vector<BoundaryPiece> out;
  const InputDomain relaxed = InputDomain::box(T.domain.lower(), T.domain.upper());
  const bool planar = T.domain.dim() == 2 && !T.domain.has_extra() &&
                      (T.domain.kind() == DomainKind::box || T.domain.kind() == DomainKind::linf_ball);
  for (const auto& f : T.fragments) {
    BoundaryPiece pc;
    pc.fragment = f.id;
    pc.w = sub(f.J[i], f.J[j]);
    pc.b = f.b[i] - f.b[j];
    if (norm_inf(pc.w) == 0) {
      if (pc.b == 0) {
        pc.whole_cell = true;
        out.push_back(pc);
      }
      continue;
    }
    // l2 cells are relaxed to their bounding box here, as in the feasibility check
    const InputDomain& R = T.domain.kind() == DomainKind::l2_ball && !f.guards.empty() ? relaxed : T.domain;
    double lo = affine_extremum(pc.w, pc.b, f.guards, *T.library, R, Sense::min).value;
    double hi = affine_extremum(pc.w, pc.b, f.guards, *T.library, R, Sense::max).value;
    if (lo > 0 || hi < 0) continue;
    if (planar) {
      const Vec& L = T.domain.lower();
      const Vec& U = T.domain.upper();
      std::vector<Vec> poly{{L[0], L[1]}, {U[0], L[1]}, {U[0], U[1]}, {L[0], U[1]}};
      for (GuardId g : f.guards) poly = detail::clip_polygon(poly, (*T.library)[g].normal, (*T.library)[g].offset);
      if (poly.size() >= 2) pc.vertices = detail::line_in_polygon(poly, pc.w, pc.b);
      if (pc.vertices.empty()) continue;
    }
    out.push_back(pc);
  }
  return out;
}

}  // namespace jitswt
