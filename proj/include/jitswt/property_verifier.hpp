#pragma once

#include <variant>

#include "analysis.hpp"
#include "bnb_driver.hpp"
#include "net_compiler.hpp"

namespace jitswt {

// ---------------------------------------------------------------------------
// Moving graphs between stores

// Copies the DAG under g into dst and remaps the gate table.
inline SwtGraph import_graph(const std::shared_ptr<ExprStore>& dst, const SwtGraph& g) {
  if (dst == g.store) return g;
  if (dst->dim() != g.store->dim()) throw DimensionMismatch("import_graph: input dimensions differ");
  const ExprStore& src = *g.store;
  std::unordered_map<NodeId, NodeId> map;
  for (NodeId id : src.reachable(g.outputs)) {
    const ExprNode& n = src.node(id);
    if (n.kind == NodeKind::affine) {
      map[id] = dst->affine(src.weights(id), n.coef);
      continue;
    }
    std::vector<NodeId> kids;
    for (NodeId c : n.children) kids.push_back(map.at(c));
    map[id] = dst->rebuild(n, std::move(kids));
  }
  SwtGraph out = g;
  out.store = dst;
  for (NodeId& r : out.outputs) r = map.at(r);
  out.gates.clear();
  out.gate_of.clear();
  for (const GateSite& s : g.gates) {
    auto it = map.find(s.max_node);
    if (it == map.end()) continue;
    GateSite t = s;
    t.max_node = it->second;
    if (s.two_way()) {
      t.pre = map.at(s.pre);
      NodeId pos = map.at(src.node(s.max_node).children[static_cast<size_t>(s.pos_child)]);
      const auto& kids = dst->node(t.max_node).children;
      auto k = std::find(kids.begin(), kids.end(), pos);
      if (k == kids.end() || kids.size() != 2) continue;  // collapsed on import
      t.pos_child = static_cast<int>(k - kids.begin());
    }
    out.gate_of[t.max_node] = out.gates.size();
    out.gates.push_back(t);
  }
  return out;
}

namespace detail {

inline NodeId linf_of(ExprStore& st, const std::vector<NodeId>& d) {
  if (d.empty()) throw DimensionMismatch("linf_of: empty list");
  std::vector<NodeId> a;
  for (NodeId e : d) a.push_back(st.abs(e));
  return a.size() == 1 ? a[0] : st.max(a);
}

inline NodeId linear_combination(ExprStore& st, const Vec& coef, const std::vector<NodeId>& nodes, double b = 0) {
  std::vector<NodeId> terms;
  for (size_t k = 0; k < coef.size(); ++k) {
    if (coef[k] == 0) continue;
    terms.push_back(coef[k] == 1 ? nodes[k] : st.scale(coef[k], nodes[k]));
  }
  if (terms.empty()) return st.constant(b);
  NodeId s = terms.size() == 1 ? terms[0] : st.sum(terms);
  return b == 0 ? s : st.bias(b, s);
}

inline void check_index(size_t i, size_t n, const std::string& what) {
  if (i >= n) throw IndexError(what + ": output index " + std::to_string(i) + " out of range (arity " + std::to_string(n) + ")");
}

// g = min_k g_k as -Max{-g_k}
inline NodeId conjunction(ExprStore& st, const std::vector<NodeId>& gs) {
  if (gs.size() == 1) return gs[0];
  return st.min(gs);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Property language

struct LowerThreshold {
  size_t i;
  double l;
};
struct UpperThreshold {
  size_t i;
  double u;
};
struct MarginAtom {
  size_t y;
  double gamma = 0;
};
struct Relational {
  std::shared_ptr<const NetworkModel> other;  // compiled into the same store
  double eps;
};
struct LinearOutput {
  Vec a;
  double b;
};

using Atom = std::variant<LowerThreshold, UpperThreshold, MarginAtom, Relational, LinearOutput>;

struct PropertySpec {
  InputDomain domain;
  std::vector<Atom> atoms;

  // {domain:{kind, params}, atoms:[{type, args}]}; relational args name a model
  // file, resolved against base_dir.
  static PropertySpec from_json(const nlohmann::json& j, const std::string& base_dir = ".") {
    PropertySpec s;
    s.domain = InputDomain::from_json(j.at("domain"));
    const auto& atoms = j.at("atoms");
    for (size_t k = 0; k < atoms.size(); ++k) {
      const auto& a = atoms[k];
      std::string path = "/atoms/" + std::to_string(k);
      std::string type = a.at("type").get<std::string>();
      const auto& g = a.contains("args") ? a.at("args") : a;
      if (type == "lower_threshold") {
        s.atoms.push_back(LowerThreshold{g.at("i").get<size_t>(), g.at("l").get<double>()});
      } else if (type == "upper_threshold") {
        s.atoms.push_back(UpperThreshold{g.at("i").get<size_t>(), g.at("u").get<double>()});
      } else if (type == "margin") {
        s.atoms.push_back(MarginAtom{g.at("y").get<size_t>(), g.value("gamma", 0.0)});
      } else if (type == "relational") {
        std::string file = g.at("model").get<std::string>();
        if (!file.empty() && file[0] != '/') file = base_dir + "/" + file;
        s.atoms.push_back(Relational{std::make_shared<NetworkModel>(load_model_file(file)), g.at("eps").get<double>()});
      } else if (type == "linear_output") {
        s.atoms.push_back(LinearOutput{g.at("a").get<Vec>(), g.at("b").get<double>()});
      } else {
        throw SchemaError(path + "/type", "unknown atom type '" + type + "'");
      }
    }
    if (s.atoms.empty()) throw SchemaError("/atoms", "at least one atom is required");
    return s;
  }
};

struct Objective {
  NodeId g = 0;
  std::vector<NodeId> atoms;
  std::vector<GateSite> gates;  // gates of every graph the objective reads
};

inline Objective compile_objective(const PropertySpec& spec, const SwtGraph& graph) {
  ExprStore& st = *graph.store;
  const size_t m = graph.outputs.size();
  const auto& F = graph.outputs;
  Objective obj;
  obj.gates = graph.gates;
  for (const Atom& atom : spec.atoms) {
    NodeId g = std::visit(
        [&](const auto& a) -> NodeId {
          using A = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<A, LowerThreshold>) {
            detail::check_index(a.i, m, "lower_threshold");
            return st.bias(-a.l, F[a.i]);
          } else if constexpr (std::is_same_v<A, UpperThreshold>) {
            detail::check_index(a.i, m, "upper_threshold");
            return st.bias(a.u, st.neg(F[a.i]));
          } else if constexpr (std::is_same_v<A, MarginAtom>) {
            detail::check_index(a.y, m, "margin");
            if (m < 2) throw IndexError("margin: needs at least two outputs");
            std::vector<NodeId> others;
            for (size_t j = 0; j < m; ++j)
              if (j != a.y) others.push_back(F[j]);
            NodeId rival = others.size() == 1 ? others[0] : st.max(others);
            NodeId d = st.diff(F[a.y], rival);
            return a.gamma == 0 ? d : st.bias(-a.gamma, d);
          } else if constexpr (std::is_same_v<A, Relational>) {
            CompileOptions co;
            co.store = graph.store;
            SwtGraph other = compile(*a.other, co);
            if (other.outputs.size() != m) throw ArityMismatch("relational: output arities differ");
            obj.gates.insert(obj.gates.end(), other.gates.begin(), other.gates.end());
            std::vector<NodeId> d;
            for (size_t r = 0; r < m; ++r) d.push_back(st.diff(F[r], other.outputs[r]));
            return st.bias(a.eps, st.neg(detail::linf_of(st, d)));
          } else {
            if (a.a.size() != m) throw IndexError("linear_output: coefficient vector has the wrong length");
            return detail::linear_combination(st, a.a, F, -a.b);
          }
        },
        atom);
    obj.atoms.push_back(g);
  }
  obj.g = detail::conjunction(st, obj.atoms);
  return obj;
}

inline Certificate verify(const PropertySpec& spec, const SwtGraph& graph, Budget budget = {}, EngineOptions eo = {}) {
  Objective obj = compile_objective(spec, graph);
  BnbOptions opt;
  opt.budget = budget;
  opt.engine = eo;
  opt.gates = obj.gates;
  return run_bnb(graph.store, obj.g, spec.domain, opt);
}

// ---------------------------------------------------------------------------
// Robustness

inline size_t argmax(const Vec& y) {
  return static_cast<size_t>(std::max_element(y.begin(), y.end()) - y.begin());
}

// Margin F_y - max_{j != y} F_j - gamma over B_p(x0, eps), optionally
// intersected with a box.
inline Certificate certify_robustness(const SwtGraph& graph, const Vec& x0, size_t y, double eps, double p,
                                      double gamma = 0, Budget budget = {},
                                      const std::optional<std::pair<Vec, Vec>>& clip = std::nullopt,
                                      EngineOptions eo = {}) {
  if (x0.size() != graph.input_dim()) throw DimensionMismatch("certify_robustness: x0 has the wrong dimension");
  detail::check_index(y, graph.outputs.size(), "certify_robustness");
  Vec f0 = graph.eval(x0);
  if (argmax(f0) != y)
    throw WrongLabel("prediction at x0 is " + std::to_string(argmax(f0)) + ", not " + std::to_string(y));
  InputDomain D;
  if (std::isinf(p))
    D = InputDomain::linf_ball(x0, eps);
  else if (p == 1)
    D = InputDomain::l1_ball(x0, eps);
  else if (p == 2)
    D = InputDomain::l2_ball(x0, eps);
  else
    throw Unsupported("certify_robustness: p must be 1, 2 or inf");
  if (clip) D = D.intersect_box(clip->first, clip->second);
  PropertySpec spec{D, {MarginAtom{y, gamma}}};
  return verify(spec, graph, budget, eo);
}

// ---------------------------------------------------------------------------
// Equivalence

inline Certificate check_equivalence(const SwtGraph& a, const SwtGraph& b, const InputDomain& D, double eps,
                                     Budget budget = {}, EngineOptions eo = {}) {
  if (a.outputs.size() != b.outputs.size())
    throw ArityMismatch("check_equivalence: " + std::to_string(a.outputs.size()) + " vs " +
                        std::to_string(b.outputs.size()) + " outputs");
  if (a.input_dim() != b.input_dim()) throw ArityMismatch("check_equivalence: input dimensions differ");
  SwtGraph bb = import_graph(a.store, b);
  ExprStore& st = *a.store;
  std::vector<NodeId> d;
  for (size_t r = 0; r < a.outputs.size(); ++r) d.push_back(st.diff(a.outputs[r], bb.outputs[r]));
  NodeId g = st.bias(eps, st.neg(detail::linf_of(st, d)));
  BnbOptions opt;
  opt.budget = budget;
  opt.engine = eo;
  opt.gates = a.gates;
  opt.gates.insert(opt.gates.end(), bb.gates.begin(), bb.gates.end());
  return run_bnb(a.store, g, D, opt);
}

// ---------------------------------------------------------------------------
// Equivariance

// Compare F'(T x) against T' F(x) on the output units listed in window.
struct EquivarianceProblem {
  Mat T_in;
  Mat T_out;
  std::vector<size_t> window;
  std::optional<NetworkModel> transformed;  // F'; F itself when empty
  long margin = 0;                          // crop margin from the kernel/padding formula (shifts)

  nlohmann::json to_json() const {
    return {{"window", window}, {"margin", margin}, {"outputs", T_out.size()}};
  }
};

enum class WindowPolicy { exact, margin, full };

namespace detail {

inline Mat permutation_matrix(const std::vector<size_t>& src_of, size_t n) {
  Mat T(n, Vec(n, 0.0));
  for (size_t r = 0; r < n; ++r)
    if (src_of[r] != SIZE_MAX) T[r][src_of[r]] = 1;
  return T;
}

// Marks units whose value may depend on zero padding or on tainted inputs.
inline std::vector<char> propagate_taint(const NetworkModel& m, std::vector<char> cur) {
  std::vector<std::vector<char>> history;
  const std::vector<char> input = cur;
  Shape shape = m.input_shape;
  for (size_t li = 0; li < m.layers.size(); ++li) {
    const LayerSpec& L = m.layers[li];
    const Shape& out = m.shapes[li];
    std::vector<char> next(shape_size(out), 0);
    switch (L.kind) {
      case LayerKind::dense: {
        bool any = std::find(cur.begin(), cur.end(), 1) != cur.end();
        std::fill(next.begin(), next.end(), any);
        break;
      }
      case LayerKind::relu:
      case LayerKind::leaky_relu:
      case LayerKind::prelu:
      case LayerKind::abs:
      case LayerKind::batchnorm_inference: next = cur; break;
      case LayerKind::max_pointwise:
        for (size_t v = 0; v < next.size(); ++v)
          for (size_t k = 0; k < L.arity; ++k) next[v] = next[v] || cur[v * L.arity + k];
        break;
      case LayerKind::residual_add: {
        const auto& src = L.source < 0 ? input : history[static_cast<size_t>(L.source)];
        for (size_t u = 0; u < next.size(); ++u) next[u] = cur[u] || src[u];
        break;
      }
      case LayerKind::maxpool2d:
      case LayerKind::avgpool2d:
      case LayerKind::conv2d: {
        const size_t Ci = shape[0], H = shape[1], W = shape[2];
        const size_t Co = out[0], Ho = out[1], Wo = out[2];
        const size_t ky = L.kind == LayerKind::conv2d ? L.kernel[0][0].size() : L.ky;
        const size_t kx = L.kind == LayerKind::conv2d ? L.kernel[0][0][0].size() : L.kx;
        for (size_t co = 0; co < Co; ++co)
          for (size_t oy = 0; oy < Ho; ++oy)
            for (size_t ox = 0; ox < Wo; ++ox) {
              bool t = false;
              for (size_t a = 0; a < ky && !t; ++a)
                for (size_t b = 0; b < kx && !t; ++b) {
                  long iy = static_cast<long>(oy * L.sy + a) - static_cast<long>(L.py);
                  long ix = static_cast<long>(ox * L.sx + b) - static_cast<long>(L.px);
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) {
                    t = true;
                    break;
                  }
                  if (L.kind == LayerKind::conv2d) {
                    for (size_t ci = 0; ci < Ci; ++ci)
                      t = t || cur[(ci * H + static_cast<size_t>(iy)) * W + static_cast<size_t>(ix)];
                  } else {
                    t = cur[(co * H + static_cast<size_t>(iy)) * W + static_cast<size_t>(ix)];
                  }
                }
              next[(co * Ho + oy) * Wo + ox] = t;
            }
        break;
      }
      case LayerKind::gcn: {
        const size_t N = shape[0], F = shape[1], Fo = out[1];
        std::vector<char> node(N, 0);
        for (size_t v = 0; v < N; ++v)
          for (size_t f = 0; f < F; ++f) node[v] = node[v] || cur[v * F + f];
        for (size_t k = 0; k < L.adjacency.rows.size(); ++k)
          if (node[L.adjacency.cols[k]])
            for (size_t o = 0; o < Fo; ++o) next[L.adjacency.rows[k] * Fo + o] = 1;
        break;
      }
    }
    history.push_back(next);
    cur = std::move(next);
    shape = out;
  }
  return cur;
}

}  // namespace detail

// Margin max|shift| + sum_l max(0, floor((k_l - 1)/2) - p_l) over conv/pool layers.
inline long crop_margin(const NetworkModel& m, long dy, long dx) {
  long M = std::max(std::labs(dy), std::labs(dx));
  for (const auto& L : m.layers) {
    if (L.kind != LayerKind::conv2d && L.kind != LayerKind::maxpool2d && L.kind != LayerKind::avgpool2d) continue;
    long k = static_cast<long>(L.kind == LayerKind::conv2d ? std::max(L.kernel[0][0].size(), L.kernel[0][0][0].size())
                                                           : std::max(L.ky, L.kx));
    long p = static_cast<long>(std::min(L.py, L.px));
    M += std::max(0L, (k - 1) / 2 - p);
  }
  return M;
}

// Translation by (dy, dx) input pixels on a [C,H,W] model.
inline EquivarianceProblem conv_shift(const NetworkModel& m, long dy, long dx, WindowPolicy policy = WindowPolicy::exact) {
  if (m.input_shape.size() != 3) throw GeometryError("conv_shift: model input must be [C,H,W]");
  const Shape& os = m.output_shape();
  if (os.size() != 3) throw GeometryError("conv_shift: model output must be [C,H,W]");
  size_t sy = 1, sx = 1;
  for (const auto& L : m.layers) {
    if (L.kind == LayerKind::dense || L.kind == LayerKind::gcn)
      throw GeometryError(std::string("conv_shift: layer kind ") + to_string(L.kind) + " is not translation covariant");
    if (L.kind == LayerKind::conv2d || L.kind == LayerKind::maxpool2d || L.kind == LayerKind::avgpool2d) {
      sy *= L.sy;
      sx *= L.sx;
    }
  }
  if (dy % static_cast<long>(sy) != 0 || dx % static_cast<long>(sx) != 0)
    throw GeometryError("conv_shift: shift (" + std::to_string(dy) + ", " + std::to_string(dx) +
                        ") is not a multiple of the total stride (" + std::to_string(sy) + ", " + std::to_string(sx) + ")");
  const long oy_shift = dy / static_cast<long>(sy), ox_shift = dx / static_cast<long>(sx);
  const size_t C = m.input_shape[0], H = m.input_shape[1], W = m.input_shape[2];
  const size_t n = C * H * W;
  std::vector<size_t> src(n, SIZE_MAX);
  std::vector<char> filled(n, 0);
  for (size_t c = 0; c < C; ++c)
    for (size_t y = 0; y < H; ++y)
      for (size_t x = 0; x < W; ++x) {
        long sy0 = static_cast<long>(y) - dy, sx0 = static_cast<long>(x) - dx;
        size_t r = (c * H + y) * W + x;
        if (sy0 < 0 || sx0 < 0 || sy0 >= static_cast<long>(H) || sx0 >= static_cast<long>(W))
          filled[r] = 1;
        else
          src[r] = (c * H + static_cast<size_t>(sy0)) * W + static_cast<size_t>(sx0);
      }
  EquivarianceProblem P;
  P.T_in = detail::permutation_matrix(src, n);
  P.margin = crop_margin(m, dy, dx);
  const size_t Co = os[0], Ho = os[1], Wo = os[2];
  const size_t no = Co * Ho * Wo;
  std::vector<size_t> osrc(no, SIZE_MAX);
  for (size_t c = 0; c < Co; ++c)
    for (size_t y = 0; y < Ho; ++y)
      for (size_t x = 0; x < Wo; ++x) {
        long py = static_cast<long>(y) - oy_shift, px = static_cast<long>(x) - ox_shift;
        if (py < 0 || px < 0 || py >= static_cast<long>(Ho) || px >= static_cast<long>(Wo)) continue;
        osrc[(c * Ho + y) * Wo + x] = (c * Ho + static_cast<size_t>(py)) * Wo + static_cast<size_t>(px);
      }
  P.T_out = detail::permutation_matrix(osrc, no);
  std::vector<char> shifted = detail::propagate_taint(m, filled);
  std::vector<char> plain = detail::propagate_taint(m, std::vector<char>(n, 0));
  auto inside = [&](size_t r, long M) {
    size_t y = (r / Wo) % Ho, x = r % Wo;
    auto ok = [&](long v, size_t len) { return v >= M && v + M < static_cast<long>(len); };
    return ok(static_cast<long>(y), Ho) && ok(static_cast<long>(x), Wo);
  };
  for (size_t r = 0; r < no; ++r) {
    if (osrc[r] == SIZE_MAX) continue;
    bool keep = true;
    if (policy == WindowPolicy::exact) keep = !shifted[r] && !plain[osrc[r]];
    if (policy == WindowPolicy::margin) keep = inside(r, P.margin) && inside(osrc[r], P.margin);
    if (keep) P.window.push_back(r);
  }
  return P;
}

// Node relabelling perm[i] on a GCN with node layout; the transformed model
// carries the permuted adjacency.
inline EquivarianceProblem gcn_permutation(const NetworkModel& m, const std::vector<size_t>& perm) {
  if (m.input_shape.size() != 2) throw GeometryError("gcn_permutation: model input must be [N,F]");
  const size_t N = m.input_shape[0];
  if (perm.size() != N) throw GeometryError("gcn_permutation: permutation length != node count");
  {
    std::vector<char> seen(N, 0);
    for (size_t p : perm) {
      if (p >= N || seen[p]) throw GeometryError("gcn_permutation: not a permutation");
      seen[p] = 1;
    }
  }
  NetworkModel t = m;
  for (auto& L : t.layers) {
    if (L.kind == LayerKind::dense || L.kind == LayerKind::conv2d || L.kind == LayerKind::maxpool2d ||
        L.kind == LayerKind::avgpool2d)
      throw GeometryError(std::string("gcn_permutation: layer kind ") + to_string(L.kind) + " mixes nodes");
    if (L.kind != LayerKind::gcn) continue;
    // keep each row's entry order so the accumulations match term by term
    SparseMatrix A;
    A.n = L.adjacency.n;
    std::vector<std::vector<size_t>> by_row(N);
    for (size_t k = 0; k < L.adjacency.rows.size(); ++k) by_row[L.adjacency.rows[k]].push_back(k);
    std::vector<size_t> inv(N);
    for (size_t i = 0; i < N; ++i) inv[perm[i]] = i;
    for (size_t r = 0; r < N; ++r)
      for (size_t k : by_row[inv[r]]) {
        A.rows.push_back(r);
        A.cols.push_back(perm[L.adjacency.cols[k]]);
        A.vals.push_back(L.adjacency.vals[k]);
      }
    L.adjacency = A;
  }
  validate_model(t);
  auto node_map = [&](size_t F) {
    std::vector<size_t> src(N * F);
    for (size_t i = 0; i < N; ++i)
      for (size_t f = 0; f < F; ++f) src[perm[i] * F + f] = i * F + f;
    return detail::permutation_matrix(src, N * F);
  };
  EquivarianceProblem P;
  P.T_in = node_map(m.input_shape[1]);
  const Shape& os = m.output_shape();
  if (os.size() != 2) throw GeometryError("gcn_permutation: model output must be [N,F]");
  P.T_out = node_map(os[1]);
  for (size_t r = 0; r < shape_size(os); ++r) P.window.push_back(r);
  P.transformed = std::move(t);
  return P;
}

struct EquivarianceGraphs {
  SwtGraph base;         // F(x)
  SwtGraph transformed;  // F'(T x), same store
  std::vector<NodeId> residuals;  // F'(Tx)_r - (T'F(x))_r over the window
};

inline EquivarianceGraphs equivariance_graphs(const NetworkModel& m, const EquivarianceProblem& P) {
  EquivarianceGraphs eg;
  eg.base = compile(m);
  if (P.T_in.size() != m.input_size()) throw GeometryError("equivariance: T_in has the wrong size");
  CompileOptions co;
  co.store = eg.base.store;
  co.input_map = P.T_in;
  eg.transformed = compile(P.transformed ? *P.transformed : m, co);
  const size_t no = eg.base.outputs.size();
  if (P.T_out.size() != no || eg.transformed.outputs.size() != no) throw GeometryError("equivariance: T_out has the wrong size");
  ExprStore& st = *eg.base.store;
  for (size_t r : P.window) {
    if (r >= no) throw IndexError("equivariance: window index out of range");
    NodeId rhs = detail::linear_combination(st, P.T_out[r], eg.base.outputs);
    eg.residuals.push_back(st.diff(eg.transformed.outputs[r], rhs));
  }
  return eg;
}

// Proof when max_{r in window} |F'(Tx)_r - (T'F(x))_r| <= eps on D.
inline Certificate check_equivariance(const NetworkModel& m, const EquivarianceProblem& P, const InputDomain& D,
                                      double eps, Budget budget = {}, EngineOptions eo = {}) {
  if (P.window.empty()) throw GeometryError("equivariance: empty comparison window");
  EquivarianceGraphs eg = equivariance_graphs(m, P);
  ExprStore& st = *eg.base.store;
  NodeId g = st.bias(eps, st.neg(detail::linf_of(st, eg.residuals)));
  BnbOptions opt;
  opt.budget = budget;
  opt.engine = eo;
  opt.gates = eg.base.gates;
  opt.gates.insert(opt.gates.end(), eg.transformed.gates.begin(), eg.transformed.gates.end());
  return run_bnb(eg.base.store, g, D, opt);
}

// ---------------------------------------------------------------------------
// Causal influence

struct Intervention {
  LayerOverride at;

  // {target:{layer, channel}, policy:{kind:"zero"|"affine", W, b}}
  static Intervention from_json(const nlohmann::json& j) {
    Intervention iv;
    const auto& t = j.at("target");
    iv.at.layer = t.at("layer").get<int>();
    iv.at.channel = t.at("channel").get<size_t>();
    const auto& p = j.at("policy");
    iv.at.policy = p.at("kind").get<std::string>();
    if (iv.at.policy == "affine") {
      iv.at.W = p.at("W").get<Mat>();
      iv.at.b = p.at("b").get<Vec>();
    } else if (iv.at.policy != "zero") {
      throw SchemaError("/policy/kind", "expected \"zero\" or \"affine\"");
    }
    return iv;
  }
  nlohmann::json to_json() const {
    nlohmann::json p{{"kind", at.policy}};
    if (at.policy == "affine") {
      p["W"] = at.W;
      p["b"] = at.b;
    }
    return {{"target", {{"layer", at.layer}, {"channel", at.channel}}}, {"policy", p}};
  }
};

struct ImaxResult {
  bool exact = false;
  double value = 0;  // exact Imax, or the certified lower end
  Vec witness;
  double lo = 0, hi = HUGE_VAL;
  size_t splits = 0, lp_calls = 0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", exact ? "exact" : "bracket"}, {"value", value}, {"witness", witness}, {"lo", lo}};
    j["hi"] = std::isfinite(hi) ? nlohmann::json(hi) : nlohmann::json(nullptr);
    j["counters"] = {{"splits", splits}, {"lp_calls", lp_calls}};
    return j;
  }
};

// sup_x max_r |F_r(x) - F_C,r(x)| over D for an explicit replacement node.
inline ImaxResult imax_nodes(const std::shared_ptr<ExprStore>& store, const std::vector<NodeId>& F,
                             const std::vector<NodeId>& FC, const std::vector<GateSite>& gates, const InputDomain& D,
                             Budget budget = {}, EngineOptions eo = {}) {
  if (F.size() != FC.size()) throw SubstitutionError("imax: output arity changed under the intervention");
  std::vector<NodeId> d;
  for (size_t r = 0; r < F.size(); ++r) d.push_back(store->diff(F[r], FC[r]));
  NodeId obj = detail::linf_of(*store, d);
  JitEngine E(store, {obj}, D, budget, eo);
  E.set_gates(gates);
  ExtremumResult ex = extremum(E, obj, Sense::max);
  ImaxResult r;
  r.exact = ex.exact;
  r.value = ex.value;
  r.witness = ex.point;
  r.lo = std::max(0.0, ex.lb);
  r.hi = std::max(r.lo, ex.ub);
  if (r.exact) r.hi = r.lo = r.value;
  r.splits = E.budget().splits;
  r.lp_calls = E.budget().lp_calls;
  return r;
}

// Substitution form: target node replaced by a CPWL policy node in the same store.
inline ImaxResult imax(const SwtGraph& g, NodeId target, NodeId policy, const InputDomain& D, Budget budget = {}) {
  auto FC = substitute(*g.store, g.outputs, target, policy);
  std::vector<GateSite> gates;
  for (const GateSite& s : g.gates)
    if (s.max_node != target) gates.push_back(s);
  return imax_nodes(g.store, g.outputs, FC, gates, D, budget);
}

// Layer/channel form.
inline ImaxResult imax(const NetworkModel& m, const Intervention& iv, const InputDomain& D, Budget budget = {},
                       EngineOptions eo = {}) {
  if (iv.at.layer < 0 || static_cast<size_t>(iv.at.layer) >= m.layers.size())
    throw SubstitutionError("imax: layer " + std::to_string(iv.at.layer) + " out of range");
  SwtGraph F = compile(m, D);
  CompileOptions co;
  co.store = F.store;
  co.override_ = iv.at;
  SwtGraph FC = compile(m, D, co);
  std::vector<GateSite> gates = F.gates;
  gates.insert(gates.end(), FC.gates.begin(), FC.gates.end());
  return imax_nodes(F.store, F.outputs, FC.outputs, gates, D, budget, eo);
}

}  // namespace jitswt
