#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace jitswt {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, rows are Vec

namespace tol {
inline constexpr double intern = 1e-9;     // halfspace / affine interning
inline constexpr double zero_normal = 1e-12;
inline constexpr double feasibility = 1e-8;
inline constexpr double optimality = 1e-7;
inline constexpr double tie = 1e-7;        // hinge straddle band
inline constexpr double pivot = 1e-9;
inline constexpr double decision = 1e-12;  // LB >= -decision counts as safe
}  // namespace tol

// Error hierarchy. kind() is the stable name used in JSON and CLI output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define JITSWT_ERROR(Name)                                              \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(#Name, what) {}      \
  };

JITSWT_ERROR(ZeroNormal)
JITSWT_ERROR(DimensionMismatch)
JITSWT_ERROR(Infeasible)
JITSWT_ERROR(Unbounded)
JITSWT_ERROR(Unsupported)
JITSWT_ERROR(NumericalFailure)
JITSWT_ERROR(OracleError)
JITSWT_ERROR(DomainError)
JITSWT_ERROR(ShapeError)
JITSWT_ERROR(UnsupportedLayer)
JITSWT_ERROR(InfeasibleLeaf)
JITSWT_ERROR(NotRefined)
JITSWT_ERROR(UnsupportedNormPair)
JITSWT_ERROR(WrongLabel)
JITSWT_ERROR(ArityMismatch)
JITSWT_ERROR(GeometryError)
JITSWT_ERROR(SubstitutionError)
JITSWT_ERROR(IndexError)
#undef JITSWT_ERROR

class SchemaError : public Error {
 public:
  SchemaError(std::string path, std::string reason)
      : Error("SchemaError", path + ": " + reason), path_(std::move(path)), reason_(std::move(reason)) {}
  const std::string& path() const { return path_; }
  const std::string& reason() const { return reason_; }

 private:
  std::string path_, reason_;
};

// ---- small dense helpers ----

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw DimensionMismatch("dot: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vec& a) {
  double s = 0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

inline double norm1(const Vec& a) {
  double s = 0;
  for (double v : a) s += std::fabs(v);
  return s;
}

inline double norm_inf(const Vec& a) {
  double s = 0;
  for (double v : a) s = std::max(s, std::fabs(v));
  return s;
}

// ‖a‖_p for p in {1, 2, inf}; p encoded as double, inf = HUGE_VAL.
inline double norm_p(const Vec& a, double p) {
  if (p == 1) return norm1(a);
  if (p == 2) return norm2(a);
  if (std::isinf(p)) return norm_inf(a);
  double s = 0;
  for (double v : a) s += std::pow(std::fabs(v), p);
  return std::pow(s, 1.0 / p);
}

inline double dual_exponent(double p) {
  if (p == 1) return HUGE_VAL;
  if (std::isinf(p)) return 1;
  return p / (p - 1);
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
  for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec scaled(const Vec& x, double c) {
  Vec r(x);
  for (double& v : r) v *= c;
  return r;
}

inline Vec sub(const Vec& a, const Vec& b) {
  Vec r(a);
  for (size_t i = 0; i < r.size(); ++i) r[i] -= b[i];
  return r;
}

inline Vec add(const Vec& a, const Vec& b) {
  Vec r(a);
  for (size_t i = 0; i < r.size(); ++i) r[i] += b[i];
  return r;
}

inline Vec matvec(const Mat& m, const Vec& x) {
  Vec r(m.size());
  for (size_t i = 0; i < m.size(); ++i) r[i] = dot(m[i], x);
  return r;
}

inline Mat transpose(const Mat& m) {
  if (m.empty()) return {};
  Mat t(m[0].size(), Vec(m.size()));
  for (size_t i = 0; i < m.size(); ++i)
    for (size_t j = 0; j < m[i].size(); ++j) t[j][i] = m[i][j];
  return t;
}

inline Vec unit_vector(size_t n, size_t k) {
  Vec e(n, 0.0);
  e[k] = 1.0;
  return e;
}

// hash_combine-style mixing for doubles and ids.
inline uint64_t hash_mix(uint64_t h, uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

inline uint64_t hash_double(uint64_t h, double v) {
  if (v == 0) v = 0;  // fold -0.0
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(v));
  return hash_mix(h, bits);
}

inline uint64_t hash_vec(uint64_t h, const Vec& v) {
  h = hash_mix(h, v.size());
  for (double x : v) h = hash_double(h, x);
  return h;
}

}  // namespace jitswt
