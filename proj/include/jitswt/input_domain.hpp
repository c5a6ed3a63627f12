#pragma once

#include <json.hpp>

#include "common.hpp"
#include "simplex.hpp"

namespace jitswt {

enum class DomainKind { box, polytope, linf_ball, l1_ball, l2_ball };

inline const char* to_string(DomainKind k) {
  switch (k) {
    case DomainKind::box: return "box";
    case DomainKind::polytope: return "polytope";
    case DomainKind::linf_ball: return "linf_ball";
    case DomainKind::l1_ball: return "l1_ball";
    case DomainKind::l2_ball: return "l2_ball";
  }
  return "?";
}

struct LinearRow {
  Vec a;
  double d = 0;
};

// LP encoding of a domain. The first dim() variables are x; l1 balls append
// one epigraph variable t_i per coordinate.
struct DomainEncoding {
  size_t num_vars = 0;
  Mat A;
  Vec d;
  Vec lower;
};

class InputDomain {
 public:
  InputDomain() = default;

  static InputDomain box(Vec lower, Vec upper) {
    if (lower.size() != upper.size()) throw DimensionMismatch("box: bound sizes differ");
    if (lower.empty()) throw DomainError("box: empty dimension");
    for (size_t i = 0; i < lower.size(); ++i) {
      if (!std::isfinite(lower[i]) || !std::isfinite(upper[i])) throw DomainError("box: non-finite bound");
      if (lower[i] > upper[i]) throw DomainError("box: lower > upper at coordinate " + std::to_string(i));
    }
    InputDomain D;
    D.kind_ = DomainKind::box;
    D.lo_ = std::move(lower);
    D.hi_ = std::move(upper);
    D.finish();
    return D;
  }

  static InputDomain polytope(std::vector<LinearRow> rows) {
    if (rows.empty()) throw DomainError("polytope: no constraints");
    InputDomain D;
    D.kind_ = DomainKind::polytope;
    D.rows_ = std::move(rows);
    size_t n = D.rows_[0].a.size();
    for (const auto& r : D.rows_)
      if (r.a.size() != n) throw DimensionMismatch("polytope: row sizes differ");
    D.lo_.assign(n, 0.0);
    D.hi_.assign(n, 0.0);
    D.certify_bounded();
    D.finish();
    return D;
  }

  static InputDomain linf_ball(Vec center, double radius) { return ball(DomainKind::linf_ball, std::move(center), radius); }
  static InputDomain l1_ball(Vec center, double radius) { return ball(DomainKind::l1_ball, std::move(center), radius); }
  static InputDomain l2_ball(Vec center, double radius) { return ball(DomainKind::l2_ball, std::move(center), radius); }

  // Intersection with additional halfspaces a·x <= d.
  InputDomain intersect(const std::vector<LinearRow>& rows) const {
    InputDomain D(*this);
    for (const auto& r : rows) {
      if (r.a.size() != dim()) throw DimensionMismatch("intersect: row size");
      D.extra_.push_back(r);
    }
    if (D.kind_ == DomainKind::polytope) {
      D.rows_.insert(D.rows_.end(), D.extra_.begin(), D.extra_.end());
      D.extra_.clear();
      D.certify_bounded();
    } else if (D.kind_ != DomainKind::l2_ball) {
      D.check_nonempty();
    }
    D.finish();
    return D;
  }

  // Intersection with a box; a box or linf ball stays a box.
  InputDomain intersect_box(const Vec& lower, const Vec& upper) const {
    if (lower.size() != dim() || upper.size() != dim()) throw DimensionMismatch("intersect_box");
    if (kind_ == DomainKind::box || kind_ == DomainKind::linf_ball) {
      Vec lo(dim()), hi(dim());
      for (size_t i = 0; i < dim(); ++i) {
        lo[i] = std::max(lo_[i], lower[i]);
        hi[i] = std::min(hi_[i], upper[i]);
        if (lo[i] > hi[i]) throw DomainError("intersect_box: empty intersection");
      }
      InputDomain D = box(lo, hi);
      if (!extra_.empty()) D = D.intersect(extra_);
      return D;
    }
    std::vector<LinearRow> rows;
    for (size_t i = 0; i < dim(); ++i) {
      rows.push_back({unit_vector(dim(), i), upper[i]});
      rows.push_back({scaled(unit_vector(dim(), i), -1.0), -lower[i]});
    }
    return intersect(rows);
  }

  DomainKind kind() const { return kind_; }
  size_t dim() const { return lo_.size(); }
  const Vec& center() const { return center_; }
  double radius() const { return radius_; }
  // Bounding box: exact for boxes and balls, LP-certified for polytopes.
  const Vec& lower() const { return lo_; }
  const Vec& upper() const { return hi_; }
  const std::vector<LinearRow>& rows() const { return rows_; }
  const std::vector<LinearRow>& extra() const { return extra_; }
  bool has_extra() const { return !extra_.empty(); }
  uint64_t hash() const { return hash_; }

  bool contains(const Vec& x, double slack = tol::feasibility) const {
    if (x.size() != dim()) throw DimensionMismatch("contains");
    for (const auto& r : extra_)
      if (dot(r.a, x) > r.d + slack) return false;
    switch (kind_) {
      case DomainKind::box:
        for (size_t i = 0; i < dim(); ++i)
          if (x[i] < lo_[i] - slack || x[i] > hi_[i] + slack) return false;
        return true;
      case DomainKind::polytope:
        for (const auto& r : rows_)
          if (dot(r.a, x) > r.d + slack) return false;
        return true;
      case DomainKind::linf_ball: return norm_inf(sub(x, center_)) <= radius_ + slack;
      case DomainKind::l1_ball: return norm1(sub(x, center_)) <= radius_ + slack;
      case DomainKind::l2_ball: return norm2(sub(x, center_)) <= radius_ + slack;
    }
    return false;
  }

  // Map a point of the unit cube [0,1]^n into the domain's bounding box.
  Vec from_unit(const Vec& u) const {
    Vec x(dim());
    for (size_t i = 0; i < dim(); ++i) x[i] = lo_[i] + u[i] * (hi_[i] - lo_[i]);
    return x;
  }

  // LP rows for kinds that are polyhedral. l2 balls are relaxed to their
  // bounding box; callers that need exactness check kind() first.
  const DomainEncoding& encoding() const { return enc_; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = to_string(kind_);
    nlohmann::json p;
    switch (kind_) {
      case DomainKind::box:
        p["lower"] = lo_;
        p["upper"] = hi_;
        break;
      case DomainKind::polytope: {
        nlohmann::json hs = nlohmann::json::array();
        for (const auto& r : rows_) hs.push_back({{"normal", r.a}, {"offset", r.d}});
        p["halfspaces"] = hs;
        break;
      }
      default:
        p["center"] = center_;
        p["radius"] = radius_;
    }
    if (!extra_.empty()) {
      nlohmann::json hs = nlohmann::json::array();
      for (const auto& r : extra_) hs.push_back({{"normal", r.a}, {"offset", r.d}});
      p["extra"] = hs;
    }
    j["params"] = p;
    return j;
  }

  static InputDomain from_json(const nlohmann::json& j) {
    std::string kind = j.at("kind").get<std::string>();
    const nlohmann::json& p = j.contains("params") ? j.at("params") : j;
    auto read_rows = [](const nlohmann::json& arr) {
      std::vector<LinearRow> rows;
      for (const auto& h : arr) rows.push_back({h.at("normal").get<Vec>(), h.at("offset").get<double>()});
      return rows;
    };
    InputDomain D;
    if (kind == "box") {
      D = box(p.at("lower").get<Vec>(), p.at("upper").get<Vec>());
    } else if (kind == "polytope") {
      D = polytope(read_rows(p.at("halfspaces")));
    } else if (kind == "linf_ball") {
      D = linf_ball(p.at("center").get<Vec>(), p.at("radius").get<double>());
    } else if (kind == "l1_ball") {
      D = l1_ball(p.at("center").get<Vec>(), p.at("radius").get<double>());
    } else if (kind == "l2_ball") {
      D = l2_ball(p.at("center").get<Vec>(), p.at("radius").get<double>());
    } else {
      throw DomainError("unknown domain kind '" + kind + "'");
    }
    if (p.contains("extra")) D = D.intersect(read_rows(p.at("extra")));
    return D;
  }

 private:
  static InputDomain ball(DomainKind k, Vec center, double radius) {
    if (center.empty()) throw DomainError("ball: empty center");
    if (!(radius > 0) || !std::isfinite(radius)) throw DomainError("ball: radius must be positive");
    InputDomain D;
    D.kind_ = k;
    D.center_ = std::move(center);
    D.radius_ = radius;
    D.lo_ = D.center_;
    D.hi_ = D.center_;
    for (size_t i = 0; i < D.dim(); ++i) {
      D.lo_[i] -= radius;
      D.hi_[i] += radius;
    }
    D.finish();
    return D;
  }

  void certify_bounded() {
    size_t n = rows_[0].a.size();
    LinearProgram lp;
    for (const auto& r : rows_) {
      lp.A.push_back(r.a);
      lp.d.push_back(r.d);
    }
    for (size_t i = 0; i < n; ++i) {
      lp.objective = unit_vector(n, i);
      for (Sense s : {Sense::min, Sense::max}) {
        lp.sense = s;
        LpResult res = solve_lp(lp);
        if (res.status == LpStatus::infeasible) throw DomainError("polytope: empty");
        if (res.status == LpStatus::unbounded) throw DomainError("polytope: unbounded along coordinate " + std::to_string(i));
        (s == Sense::min ? lo_ : hi_)[i] = res.value;
      }
    }
  }

  void check_nonempty() const {
    LinearProgram lp;
    lp.objective.assign(enc_.num_vars, 0.0);
    lp.A = enc_.A;
    lp.d = enc_.d;
    lp.lower = enc_.lower;
    for (const auto& r : extra_) {
      Vec row(enc_.num_vars, 0.0);
      std::copy(r.a.begin(), r.a.end(), row.begin());
      lp.A.push_back(row);
      lp.d.push_back(r.d);
    }
    if (solve_lp(lp).status != LpStatus::optimal) throw DomainError("intersection is empty");
  }

  void finish() {
    const size_t n = dim();
    enc_ = DomainEncoding{};
    auto push = [&](Vec a, double d) {
      enc_.A.push_back(std::move(a));
      enc_.d.push_back(d);
    };
    switch (kind_) {
      case DomainKind::box:
      case DomainKind::linf_ball:
      case DomainKind::l2_ball:
        enc_.num_vars = n;
        enc_.lower = lo_;
        for (size_t i = 0; i < n; ++i) push(unit_vector(n, i), hi_[i]);
        break;
      case DomainKind::polytope:
        enc_.num_vars = n;
        enc_.lower = lo_;
        for (const auto& r : rows_) push(r.a, r.d);
        for (size_t i = 0; i < n; ++i) push(unit_vector(n, i), hi_[i]);
        break;
      case DomainKind::l1_ball: {
        // x - t <= c, -x - t <= -c, sum t <= r, x >= c - r, t >= 0.
        enc_.num_vars = 2 * n;
        enc_.lower.assign(2 * n, 0.0);
        for (size_t i = 0; i < n; ++i) enc_.lower[i] = lo_[i];
        for (size_t i = 0; i < n; ++i) {
          Vec a(2 * n, 0.0);
          a[i] = 1;
          a[n + i] = -1;
          push(a, center_[i]);
          a[i] = -1;
          push(a, -center_[i]);
        }
        Vec s(2 * n, 0.0);
        for (size_t i = 0; i < n; ++i) s[n + i] = 1;
        push(s, radius_);
        break;
      }
    }
    for (const auto& r : extra_) {
      Vec a(enc_.num_vars, 0.0);
      std::copy(r.a.begin(), r.a.end(), a.begin());
      push(a, r.d);
    }
    uint64_t h = hash_mix(0x51ed27, static_cast<uint64_t>(kind_));
    h = hash_vec(h, lo_);
    h = hash_vec(h, hi_);
    h = hash_vec(h, center_);
    h = hash_double(h, radius_);
    for (const auto& r : rows_) h = hash_double(hash_vec(h, r.a), r.d);
    for (const auto& r : extra_) h = hash_double(hash_vec(h, r.a), r.d);
    hash_ = h;
  }

  DomainKind kind_ = DomainKind::box;
  Vec lo_, hi_, center_;
  double radius_ = 0;
  std::vector<LinearRow> rows_, extra_;
  DomainEncoding enc_;
  uint64_t hash_ = 0;
};

}  // namespace jitswt
