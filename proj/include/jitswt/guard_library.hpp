#pragma once

#include <json.hpp>
#include <map>
#include <mutex>
#include <optional>
#include <unordered_map>

#include "common.hpp"
#include "input_domain.hpp"
#include "simplex.hpp"

namespace jitswt {

using GuardId = uint32_t;

struct CanonicalHalfspace {
  Vec normal;
  double offset = 0;
  bool flipped = false;
};

// Unit normal with nonnegative first nonzero entry. When the input has to be
// negated to get there, flipped is set and (normal, offset) describes the
// reverse orientation.
inline CanonicalHalfspace canonicalize_halfspace(const Vec& normal, double offset) {
  double nrm = norm2(normal);
  if (!(nrm >= tol::zero_normal)) throw ZeroNormal("halfspace normal has norm " + std::to_string(nrm));
  CanonicalHalfspace c;
  c.normal = scaled(normal, 1.0 / nrm);
  c.offset = offset / nrm;
  for (double v : c.normal) {
    if (v == 0) continue;
    if (v < 0) {
      for (double& u : c.normal) u = -u;
      c.offset = -c.offset;
      c.flipped = true;
    }
    break;
  }
  for (double& u : c.normal)
    if (u == 0) u = 0;
  return c;
}

struct Halfspace {
  Vec normal;
  double offset = 0;
  GuardId id = 0;
  GuardId reverse_id = 0;
  bool canonical = true;

  double slack(const Vec& x) const { return offset - dot(normal, x); }
  bool contains(const Vec& x, double tolerance = 0) const { return dot(normal, x) <= offset + tolerance; }
};

// Immutable sorted id set.
class GuardSet {
 public:
  GuardSet() = default;
  explicit GuardSet(std::vector<GuardId> ids) : ids_(std::move(ids)) {
    std::sort(ids_.begin(), ids_.end());
    ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
  }

  GuardSet with(GuardId id) const {
    GuardSet s;
    s.ids_.reserve(ids_.size() + 1);
    auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
    s.ids_.assign(ids_.begin(), it);
    if (it == ids_.end() || *it != id) s.ids_.push_back(id);
    s.ids_.insert(s.ids_.end(), it, ids_.end());
    return s;
  }

  bool contains(GuardId id) const { return std::binary_search(ids_.begin(), ids_.end(), id); }
  bool subset_of(const GuardSet& o) const { return std::includes(o.ids_.begin(), o.ids_.end(), ids_.begin(), ids_.end()); }
  size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::vector<GuardId>& ids() const { return ids_; }
  auto begin() const { return ids_.begin(); }
  auto end() const { return ids_.end(); }
  bool operator==(const GuardSet& o) const { return ids_ == o.ids_; }
  bool operator<(const GuardSet& o) const { return ids_ < o.ids_; }

  uint64_t hash() const {
    uint64_t h = 0x6a09e667f3bcc908ULL;
    for (GuardId i : ids_) h = hash_mix(h, i);
    return hash_mix(h, ids_.size());
  }

 private:
  std::vector<GuardId> ids_;
};

struct GuardSetHash {
  size_t operator()(const GuardSet& s) const { return static_cast<size_t>(s.hash()); }
};

enum class Feasibility { unknown, infeasible, feasible };

struct FeasibilityResult {
  Feasibility status = Feasibility::unknown;
  Vec witness;
  bool feasible() const { return status == Feasibility::feasible; }
};

class GuardLibrary {
 public:
  explicit GuardLibrary(size_t dim = 0) : dim_(dim) {}

  GuardLibrary(const GuardLibrary& o) : dim_(o.dim_), entries_(o.entries_), buckets_(o.buckets_), feas_(o.feas_) {}
  GuardLibrary& operator=(const GuardLibrary& o) {
    if (this != &o) {
      dim_ = o.dim_;
      entries_ = o.entries_;
      buckets_ = o.buckets_;
      feas_ = o.feas_;
    }
    return *this;
  }

  size_t dim() const { return dim_; }
  size_t oriented_count() const { return entries_.size(); }
  size_t plane_count() const { return entries_.size() / 2; }
  size_t size() const { return entries_.size(); }
  const Halfspace& at(GuardId id) const { return entries_.at(id); }
  const Halfspace& operator[](GuardId id) const { return entries_[id]; }

  // Returns (id of the given orientation, id of its reverse). Idempotent.
  std::pair<GuardId, GuardId> register_halfspace(const Vec& normal, double offset) {
    if (dim_ == 0) dim_ = normal.size();
    if (normal.size() != dim_) throw DimensionMismatch("register: normal has dimension " + std::to_string(normal.size()));
    CanonicalHalfspace c = canonicalize_halfspace(normal, offset);
    std::lock_guard<std::mutex> lock(mu_);
    GuardId canon;
    if (auto hit = find_canonical(c.normal, c.offset)) {
      canon = *hit;
    } else {
      canon = static_cast<GuardId>(entries_.size());
      Halfspace h{c.normal, c.offset, canon, canon + 1, true};
      Halfspace r{scaled(c.normal, -1.0), -c.offset, canon + 1, canon, false};
      for (double& u : r.normal)
        if (u == 0) u = 0;
      entries_.push_back(std::move(h));
      entries_.push_back(std::move(r));
      buckets_[bucket_key(c.normal)].push_back(canon);
    }
    GuardId rev = entries_[canon].reverse_id;
    return c.flipped ? std::make_pair(rev, canon) : std::make_pair(canon, rev);
  }

  std::optional<GuardId> find(const Vec& normal, double offset) const {
    CanonicalHalfspace c = canonicalize_halfspace(normal, offset);
    std::lock_guard<std::mutex> lock(mu_);
    auto hit = find_canonical(c.normal, c.offset);
    if (!hit) return std::nullopt;
    return c.flipped ? entries_[*hit].reverse_id : *hit;
  }

  bool contains(const GuardSet& S, const Vec& x, double tolerance = tol::feasibility) const {
    for (GuardId id : S)
      if (!entries_.at(id).contains(x, tolerance)) return false;
    return true;
  }

  // Constraint rows of C(S) lifted to the domain's LP variable layout.
  void append_rows(const GuardSet& S, size_t num_vars, Mat& A, Vec& d) const {
    for (GuardId id : S) {
      const Halfspace& h = entries_.at(id);
      Vec row(num_vars, 0.0);
      std::copy(h.normal.begin(), h.normal.end(), row.begin());
      A.push_back(std::move(row));
      d.push_back(h.offset);
    }
  }

  // Single LP feasibility test of C(S) ∩ domain; cached per (domain, S).
  // l2 balls are tested on their bounding box when S is nonempty (outer relaxation).
  FeasibilityResult check_feasible(const GuardSet& S, const InputDomain& domain, size_t* lp_counter = nullptr) {
    auto key = std::make_pair(domain.hash(), S);
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = feas_.find(key);
      if (it != feas_.end()) return it->second;
    }
    FeasibilityResult res;
    if (S.empty() && domain.kind() == DomainKind::l2_ball && !domain.has_extra()) {
      res.status = Feasibility::feasible;
      res.witness = domain.center();
    } else {
      const DomainEncoding& enc = domain.encoding();
      LinearProgram lp;
      lp.objective.assign(enc.num_vars, 0.0);
      lp.A = enc.A;
      lp.d = enc.d;
      lp.lower = enc.lower;
      append_rows(S, enc.num_vars, lp.A, lp.d);
      LpResult r;
      try {
        r = solve_lp(lp);
      } catch (const NumericalFailure& e) {
        throw OracleError(e.what());
      }
      if (lp_counter) ++*lp_counter;
      if (r.status == LpStatus::optimal) {
        res.status = Feasibility::feasible;
        res.witness.assign(r.point.begin(), r.point.begin() + static_cast<long>(domain.dim()));
      } else {
        res.status = Feasibility::infeasible;
      }
    }
    record_feasibility(S, domain, res);
    return res;
  }

  void record_feasibility(const GuardSet& S, const InputDomain& domain, const FeasibilityResult& r) {
    std::lock_guard<std::mutex> lock(mu_);
    feas_[std::make_pair(domain.hash(), S)] = r;
  }

  Feasibility cached_feasibility(const GuardSet& S, const InputDomain& domain) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = feas_.find(std::make_pair(domain.hash(), S));
    return it == feas_.end() ? Feasibility::unknown : it->second.status;
  }

  nlohmann::json dump() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& h : entries_) arr.push_back({{"normal", h.normal}, {"offset", h.offset}});
    return arr;
  }

  static GuardLibrary load(const nlohmann::json& arr) {
    GuardLibrary lib;
    for (size_t i = 0; i < arr.size(); ++i) {
      auto ids = lib.register_halfspace(arr[i].at("normal").get<Vec>(), arr[i].at("offset").get<double>());
      if (ids.first != i) throw SchemaError("/" + std::to_string(i), "library entry does not land at its array position");
    }
    // keep the stored bits so that dump(load(j)) == j
    for (size_t i = 0; i < arr.size(); ++i) {
      lib.entries_[i].normal = arr[i].at("normal").get<Vec>();
      lib.entries_[i].offset = arr[i].at("offset").get<double>();
    }
    return lib;
  }

 private:
  static int64_t bucket_key(const Vec& n) { return static_cast<int64_t>(std::floor(n.empty() ? 0 : n[0] * 1e4)); }

  std::optional<GuardId> find_canonical(const Vec& normal, double offset) const {
    int64_t k = bucket_key(normal);
    for (int64_t kk = k - 1; kk <= k + 1; ++kk) {
      auto it = buckets_.find(kk);
      if (it == buckets_.end()) continue;
      for (GuardId id : it->second) {
        const Halfspace& h = entries_[id];
        if (std::fabs(h.offset - offset) > tol::intern) continue;
        bool same = true;
        for (size_t i = 0; i < normal.size() && same; ++i) same = std::fabs(h.normal[i] - normal[i]) <= tol::intern;
        if (same) return id;
      }
    }
    return std::nullopt;
  }

  size_t dim_;
  std::vector<Halfspace> entries_;
  std::unordered_map<int64_t, std::vector<GuardId>> buckets_;
  std::map<std::pair<uint64_t, GuardSet>, FeasibilityResult> feas_;
  mutable std::mutex mu_;
};

}  // namespace jitswt
