#pragma once

#include "common.hpp"
#include "guard_library.hpp"
#include "input_domain.hpp"
#include "simplex.hpp"

namespace jitswt {

// Swappable LP backend. The dense simplex is the only one shipped.
class LpBackend {
 public:
  virtual ~LpBackend() = default;
  virtual LpResult solve(const LinearProgram& lp) const = 0;
  virtual const char* name() const = 0;
};

class DenseSimplexBackend : public LpBackend {
 public:
  explicit DenseSimplexBackend(LpOptions opt = {}) : opt_(opt) {}
  LpResult solve(const LinearProgram& lp) const override { return solve_lp(lp, opt_); }
  const char* name() const override { return "dense-simplex"; }

 private:
  LpOptions opt_;
};

inline const LpBackend& default_backend() {
  static const DenseSimplexBackend b;
  return b;
}

struct OracleStats {
  size_t lp_calls = 0;
  size_t closed_form_calls = 0;
};

struct Extremum {
  double value = 0;
  Vec point;
};

// Builds the LP for w·x + b over C(S) ∩ domain. For l2 balls the encoding is the
// bounding box, so the result is an outer relaxation.
inline LinearProgram build_affine_lp(const Vec& w, double b, const GuardSet& S, const GuardLibrary& lib,
                                     const InputDomain& D, Sense sense) {
  const DomainEncoding& enc = D.encoding();
  LinearProgram lp;
  lp.objective.assign(enc.num_vars, 0.0);
  std::copy(w.begin(), w.end(), lp.objective.begin());
  lp.constant = b;
  lp.sense = sense;
  lp.A = enc.A;
  lp.d = enc.d;
  lp.lower = enc.lower;
  lib.append_rows(S, enc.num_vars, lp.A, lp.d);
  return lp;
}

inline Extremum run_affine_lp(const Vec& w, double b, const GuardSet& S, const GuardLibrary& lib, const InputDomain& D,
                              Sense sense, OracleStats* stats, const LpBackend& backend) {
  LinearProgram lp = build_affine_lp(w, b, S, lib, D, sense);
  LpResult r;
  try {
    r = backend.solve(lp);
  } catch (const NumericalFailure& e) {
    throw OracleError(e.what());
  }
  if (stats) ++stats->lp_calls;
  if (r.status == LpStatus::infeasible) throw Infeasible("affine_extremum: C(S) ∩ domain is empty");
  if (r.status == LpStatus::unbounded) throw Unbounded("affine_extremum: unbounded objective");
  Extremum e;
  e.point.assign(r.point.begin(), r.point.begin() + static_cast<long>(D.dim()));
  e.value = dot(w, e.point) + b;
  return e;
}

// Closed forms on an undivided ball/box (S empty, no extra rows).
inline std::optional<Extremum> closed_form_extremum(const Vec& w, double b, const InputDomain& D, Sense sense) {
  if (D.has_extra()) return std::nullopt;
  const double sg = sense == Sense::max ? 1.0 : -1.0;
  const size_t n = D.dim();
  Extremum e;
  switch (D.kind()) {
    case DomainKind::box:
    case DomainKind::linf_ball: {
      e.point.resize(n);
      e.value = b;
      for (size_t i = 0; i < n; ++i) {
        bool up = sg * w[i] > 0;
        e.point[i] = up ? D.upper()[i] : D.lower()[i];
        e.value += w[i] * e.point[i];
      }
      return e;
    }
    case DomainKind::l1_ball: {
      e.point = D.center();
      size_t k = 0;
      for (size_t i = 1; i < n; ++i)
        if (std::fabs(w[i]) > std::fabs(w[k])) k = i;
      if (w[k] != 0) e.point[k] += sg * (w[k] > 0 ? 1.0 : -1.0) * D.radius();
      e.value = dot(w, D.center()) + b + sg * D.radius() * norm_inf(w);
      return e;
    }
    case DomainKind::l2_ball: {
      e.point = D.center();
      double nw = norm2(w);
      if (nw > 0) axpy(sg * D.radius() / nw, w, e.point);
      e.value = dot(w, D.center()) + b + sg * D.radius() * nw;
      return e;
    }
    case DomainKind::polytope: return std::nullopt;
  }
  return std::nullopt;
}

// Exact optimum of w·x + b over C(S) ∩ domain.
inline Extremum affine_extremum(const Vec& w, double b, const GuardSet& S, const GuardLibrary& lib,
                                const InputDomain& D, Sense sense, OracleStats* stats = nullptr,
                                const LpBackend& backend = default_backend(), bool force_lp = false) {
  if (w.size() != D.dim()) throw DimensionMismatch("affine_extremum: w has dimension " + std::to_string(w.size()));
  if (S.empty() && !force_lp) {
    if (auto cf = closed_form_extremum(w, b, D, sense)) {
      if (stats) ++stats->closed_form_calls;
      return *cf;
    }
  }
  if (D.kind() == DomainKind::l2_ball) throw Unsupported("affine_extremum: l2 ball intersected with halfspaces");
  return run_affine_lp(w, b, S, lib, D, sense, stats, backend);
}

// Minimum-norm element of conv(points): Frank-Wolfe with away steps,
// capped at max_iter, stopping when the duality gap drops below gap_tol.
inline Vec min_norm_in_hull(const std::vector<Vec>& points, size_t max_iter = 500, double gap_tol = 1e-10) {
  if (points.empty()) throw DimensionMismatch("min_norm_in_hull: empty point list");
  const size_t k = points.size();
  size_t start = 0;
  for (size_t i = 1; i < k; ++i)
    if (norm2(points[i]) < norm2(points[start])) start = i;
  Vec lambda(k, 0.0);
  lambda[start] = 1;
  Vec x = points[start];
  for (size_t it = 0; it < max_iter; ++it) {
    size_t s = 0, a = k;
    double gs = dot(x, points[0]), ga = -HUGE_VAL;
    for (size_t i = 0; i < k; ++i) {
      double g = dot(x, points[i]);
      if (g < gs) {
        gs = g;
        s = i;
      }
      if (lambda[i] > 0 && g > ga) {
        ga = g;
        a = i;
      }
    }
    double xx = dot(x, x);
    double gap_fw = xx - gs;
    double gap_away = ga - xx;
    if (gap_fw <= gap_tol) break;
    Vec dir;
    double gmax;
    bool away = gap_away > gap_fw && a < k && lambda[a] < 1;
    if (!away) {
      dir = sub(points[s], x);
      gmax = 1;
    } else {
      dir = sub(x, points[a]);
      gmax = lambda[a] / (1 - lambda[a]);
    }
    double dd = dot(dir, dir);
    if (dd <= 0) break;
    double gamma = std::clamp(-dot(x, dir) / dd, 0.0, gmax);
    if (gamma <= 0) break;
    axpy(gamma, dir, x);
    if (!away) {
      for (double& l : lambda) l *= 1 - gamma;
      lambda[s] += gamma;
    } else {
      for (double& l : lambda) l *= 1 + gamma;
      lambda[a] -= gamma;
      if (lambda[a] < 1e-15) lambda[a] = 0;
    }
  }
  return x;
}

}  // namespace jitswt
