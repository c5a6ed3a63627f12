#pragma once

#include <json.hpp>
#include <limits>
#include <optional>

#include "common.hpp"

namespace jitswt {

enum class Sense { min, max };

inline const char* to_string(Sense s) { return s == Sense::min ? "min" : "max"; }

// optimize objective·x + constant  s.t.  A x <= d  (and x >= lower when given,
// otherwise x is free).
struct LinearProgram {
  Vec objective;
  double constant = 0;
  Mat A;
  Vec d;
  Sense sense = Sense::max;
  std::optional<Vec> lower;

  size_t num_vars() const { return objective.size(); }
};

enum class LpStatus { optimal, infeasible, unbounded };

inline const char* to_string(LpStatus s) {
  switch (s) {
    case LpStatus::optimal: return "optimal";
    case LpStatus::infeasible: return "infeasible";
    case LpStatus::unbounded: return "unbounded";
  }
  return "?";
}

struct LpResult {
  LpStatus status = LpStatus::infeasible;
  double value = 0;
  Vec point;
  size_t pivots = 0;
};

struct LpOptions {
  double eps = tol::pivot;
  // 0 means the default 10·(m+n).
  size_t pivot_limit = 0;
  // Consecutive degenerate pivots under Dantzig pricing before switching to Bland.
  size_t degenerate_streak = 64;
};

namespace detail {

// Tableau simplex on  max c·y  s.t.  A y <= b, y >= 0.
// Phase 1 uses one artificial column. Pricing is Dantzig; a run of degenerate
// pivots switches to Bland's rule until the objective moves again.
class DenseTableau {
 public:
  DenseTableau(const Mat& A, const Vec& b, const Vec& c, const LpOptions& opt)
      : m_(static_cast<int>(b.size())), n_(static_cast<int>(c.size())), opt_(opt),
        B_(m_), N_(n_ + 1), D_(m_ + 2, Vec(n_ + 2, 0.0)) {
    for (int i = 0; i < m_; ++i)
      for (int j = 0; j < n_; ++j) D_[i][j] = A[i][j];
    for (int i = 0; i < m_; ++i) {
      B_[i] = n_ + i;
      D_[i][n_] = -1;
      D_[i][n_ + 1] = b[i];
    }
    for (int j = 0; j < n_; ++j) {
      N_[j] = j;
      D_[m_][j] = -c[j];
    }
    N_[n_] = -1;
    D_[m_ + 1][n_] = 1;
    limit_ = opt.pivot_limit ? opt.pivot_limit : 10 * static_cast<size_t>(m_ + n_) + 10;
  }

  LpResult solve() {
    LpResult res;
    if (m_ > 0) {
      int r = 0;
      for (int i = 1; i < m_; ++i)
        if (D_[i][n_ + 1] < D_[r][n_ + 1]) r = i;
      if (D_[r][n_ + 1] < -opt_.eps) {
        pivot(r, n_);
        if (!run(2) || D_[m_ + 1][n_ + 1] < -opt_.eps) {
          res.status = LpStatus::infeasible;
          res.pivots = pivots_;
          return res;
        }
        for (int i = 0; i < m_; ++i) {
          if (B_[i] != -1) continue;
          int s = -1;
          for (int j = 0; j <= n_; ++j)
            if (N_[j] != -1 && (s == -1 || std::fabs(D_[i][j]) > std::fabs(D_[i][s]))) s = j;
          if (s != -1 && std::fabs(D_[i][s]) > opt_.eps) pivot(i, s);
        }
      }
    }
    bool bounded = run(1);
    res.pivots = pivots_;
    if (!bounded) {
      res.status = LpStatus::unbounded;
      return res;
    }
    res.status = LpStatus::optimal;
    res.point.assign(n_, 0.0);
    for (int i = 0; i < m_; ++i)
      if (B_[i] >= 0 && B_[i] < n_) res.point[B_[i]] = std::max(0.0, D_[i][n_ + 1]);
    res.value = D_[m_][n_ + 1];
    return res;
  }

 private:
  void pivot(int r, int s) {
    if (++pivots_ > limit_) throw NumericalFailure("simplex pivot limit exceeded (" + std::to_string(limit_) + ")");
    Vec& a = D_[r];
    double inv = 1.0 / a[s];
    for (int i = 0; i < m_ + 2; ++i) {
      if (i == r || std::fabs(D_[i][s]) <= opt_.eps * 1e-3) continue;
      Vec& row = D_[i];
      double f = row[s] * inv;
      for (int j = 0; j < n_ + 2; ++j) row[j] -= a[j] * f;
      row[s] = a[s] * f;
    }
    for (int j = 0; j < n_ + 2; ++j)
      if (j != s) a[j] *= inv;
    for (int i = 0; i < m_ + 2; ++i)
      if (i != r) D_[i][s] *= -inv;
    a[s] = inv;
    std::swap(B_[r], N_[s]);
  }

  // phase 2 = feasibility (row m+1), phase 1 = objective (row m).
  bool run(int phase) {
    const int x = m_ + phase - 1;
    size_t degenerate = 0;
    for (;;) {
      int s = -1;
      for (int j = 0; j <= n_; ++j) {
        if (N_[j] == -phase) continue;
        double v = D_[x][j];
        if (bland_) {
          if (v < -opt_.eps && (s == -1 || N_[j] < N_[s])) s = j;
        } else if (s == -1 || v < D_[x][s] || (v == D_[x][s] && N_[j] < N_[s])) {
          s = j;
        }
      }
      if (s == -1 || D_[x][s] >= -opt_.eps) return true;
      int r = -1;
      double best = 0;
      for (int i = 0; i < m_; ++i) {
        if (D_[i][s] <= opt_.eps) continue;
        // rounding can leave degenerate rows at -1e-17; they tie at zero
        double ratio = std::max(0.0, D_[i][n_ + 1]) / D_[i][s];
        if (r == -1 || ratio < best - kTie) {
          r = i;
          best = ratio;
        } else if (ratio <= best + kTie && (bland_ ? B_[i] < B_[r] : D_[i][s] > D_[r][s])) {
          r = i;
        }
      }
      if (r == -1) return false;
      if (std::fabs(best) <= opt_.eps) {
        if (++degenerate >= opt_.degenerate_streak) bland_ = true;
      } else {
        degenerate = 0;
        bland_ = false;
      }
      pivot(r, s);
    }
  }

  static constexpr double kTie = 1e-12;

  int m_, n_;
  LpOptions opt_;
  std::vector<int> B_, N_;
  Mat D_;
  size_t pivots_ = 0, limit_ = 0;
  bool bland_ = false;
};

}  // namespace detail

inline double max_violation(const LinearProgram& lp, const Vec& x) {
  double v = 0;
  for (size_t i = 0; i < lp.A.size(); ++i) v = std::max(v, dot(lp.A[i], x) - lp.d[i]);
  if (lp.lower)
    for (size_t j = 0; j < x.size(); ++j) v = std::max(v, (*lp.lower)[j] - x[j]);
  return v;
}

// Exact (up to floating point) LP solve with the embedded dense simplex.
inline LpResult solve_lp(const LinearProgram& lp, const LpOptions& opt = {}) {
  const size_t n = lp.num_vars(), m = lp.A.size();
  if (lp.d.size() != m) throw DimensionMismatch("solve_lp: rhs size");
  for (const auto& row : lp.A)
    if (row.size() != n) throw DimensionMismatch("solve_lp: row size");
  for (double v : lp.objective)
    if (!std::isfinite(v)) throw NumericalFailure("solve_lp: non-finite objective");

  const double sgn = lp.sense == Sense::max ? 1.0 : -1.0;
  const bool shifted = lp.lower.has_value();
  const size_t cols = shifted ? n : 2 * n;
  Mat A(m, Vec(cols, 0.0));
  Vec b(lp.d), c(cols, 0.0);
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      A[i][j] = lp.A[i][j];
      if (!shifted) A[i][n + j] = -lp.A[i][j];
    }
    if (shifted) b[i] -= dot(lp.A[i], *lp.lower);
  }
  for (size_t j = 0; j < n; ++j) {
    c[j] = sgn * lp.objective[j];
    if (!shifted) c[n + j] = -sgn * lp.objective[j];
  }
  detail::DenseTableau tab(A, b, c, opt);
  LpResult raw = tab.solve();
  LpResult res;
  res.status = raw.status;
  res.pivots = raw.pivots;
  if (raw.status != LpStatus::optimal) return res;
  res.point.assign(n, 0.0);
  for (size_t j = 0; j < n; ++j)
    res.point[j] = shifted ? raw.point[j] + (*lp.lower)[j] : raw.point[j] - raw.point[n + j];
  res.value = dot(lp.objective, res.point) + lp.constant;
  double viol = max_violation(lp, res.point);
  double scale = 1.0;
  for (double v : lp.d) scale = std::max(scale, std::fabs(v));
  if (viol > 1e-6 * scale) throw NumericalFailure("solve_lp: returned point violates constraints by " + std::to_string(viol));
  return res;
}

inline nlohmann::json to_json(const LinearProgram& lp) {
  nlohmann::json j;
  j["sense"] = to_string(lp.sense);
  j["objective"] = lp.objective;
  j["constant"] = lp.constant;
  j["A"] = lp.A;
  j["d"] = lp.d;
  if (lp.lower) j["lower"] = *lp.lower;
  return j;
}

inline LinearProgram lp_from_json(const nlohmann::json& j) {
  LinearProgram lp;
  lp.sense = j.at("sense").get<std::string>() == "min" ? Sense::min : Sense::max;
  lp.objective = j.at("objective").get<Vec>();
  lp.constant = j.value("constant", 0.0);
  lp.A = j.at("A").get<Mat>();
  lp.d = j.at("d").get<Vec>();
  if (j.contains("lower")) lp.lower = j.at("lower").get<Vec>();
  return lp;
}

}  // namespace jitswt
