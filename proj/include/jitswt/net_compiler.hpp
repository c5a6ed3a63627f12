#pragma once

#include <fstream>
#include <json.hpp>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "common.hpp"
#include "expr_graph.hpp"

namespace jitswt {

enum class LayerKind {
  dense,
  relu,
  leaky_relu,
  prelu,
  abs,
  max_pointwise,
  maxpool2d,
  avgpool2d,
  conv2d,
  batchnorm_inference,
  residual_add,
  gcn
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::prelu: return "prelu";
    case LayerKind::abs: return "abs";
    case LayerKind::max_pointwise: return "max_pointwise";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm_inference: return "batchnorm_inference";
    case LayerKind::residual_add: return "residual_add";
    case LayerKind::gcn: return "gcn";
  }
  return "?";
}

inline std::optional<LayerKind> layer_kind_from(const std::string& s) {
  static const std::map<std::string, LayerKind> m{
      {"dense", LayerKind::dense},         {"relu", LayerKind::relu},
      {"leaky_relu", LayerKind::leaky_relu}, {"prelu", LayerKind::prelu},
      {"abs", LayerKind::abs},             {"max_pointwise", LayerKind::max_pointwise},
      {"maxpool2d", LayerKind::maxpool2d}, {"avgpool2d", LayerKind::avgpool2d},
      {"conv2d", LayerKind::conv2d},       {"batchnorm_inference", LayerKind::batchnorm_inference},
      {"residual_add", LayerKind::residual_add}, {"gcn", LayerKind::gcn}};
  auto it = m.find(s);
  if (it == m.end()) return std::nullopt;
  return it->second;
}

using Shape = std::vector<size_t>;

inline size_t shape_size(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

struct SparseMatrix {
  size_t n = 0;
  std::vector<size_t> rows, cols;
  Vec vals;
};

using Kernel = std::vector<std::vector<Mat>>;  // [c_out][c_in][ky][kx]

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  Mat W;
  Vec b;
  double alpha = 0;
  Vec alphas;
  size_t arity = 0;
  Kernel kernel;
  size_t ky = 0, kx = 0;  // pooling window
  size_t sy = 1, sx = 1;
  size_t py = 0, px = 0;
  Vec mu, sigma, gamma, beta;
  int source = -1;  // residual: -1 is the model input
  SparseMatrix adjacency;
};

struct NetworkModel {
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::string name, version;
  std::vector<Shape> shapes;  // shapes[i] = output shape of layer i

  size_t input_size() const { return shape_size(input_shape); }
  const Shape& output_shape() const { return layers.empty() ? input_shape : shapes.back(); }
  size_t output_size() const { return shape_size(output_shape()); }
  const Shape& shape_after(int layer) const { return layer < 0 ? input_shape : shapes.at(static_cast<size_t>(layer)); }
};

// Channel of a flat unit index. [C,H,W] and [C] use the leading axis; the
// node-feature layout [N,F] produced by gcn layers uses the trailing axis.
inline size_t channel_of(const Shape& s, bool node_layout, size_t unit) {
  if (s.size() <= 1) return unit;
  if (node_layout) return unit % s.back();
  return unit / (shape_size(s) / s[0]);
}

inline size_t channel_count(const Shape& s, bool node_layout) {
  if (s.empty()) return 0;
  if (s.size() == 1) return s[0];
  return node_layout ? s.back() : s[0];
}

// ---------------------------------------------------------------------------
// Loading and validation

namespace detail {

inline std::string at_path(const std::string& base, size_t i) { return base + "/" + std::to_string(i); }

inline double finite_number(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number()) throw SchemaError(path, "expected a number");
  double v = j.get<double>();
  if (!std::isfinite(v)) throw SchemaError(path, "non-finite value");
  return v;
}

inline Vec read_vec(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw SchemaError(path, "expected an array");
  Vec v;
  for (size_t i = 0; i < j.size(); ++i) v.push_back(finite_number(j[i], at_path(path, i)));
  return v;
}

inline Mat read_mat(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw SchemaError(path, "expected a nonempty 2-D array");
  Mat m;
  for (size_t i = 0; i < j.size(); ++i) {
    m.push_back(read_vec(j[i], at_path(path, i)));
    if (m.back().size() != m.front().size()) throw SchemaError(at_path(path, i), "ragged matrix row");
  }
  if (m.front().empty()) throw SchemaError(path, "empty matrix row");
  return m;
}

inline size_t read_size(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number_integer() || j.get<long long>() < 0) throw SchemaError(path, "expected a nonnegative integer");
  return j.get<size_t>();
}

inline std::pair<size_t, size_t> read_pair(const nlohmann::json& parent, const char* key, const std::string& path,
                                           size_t dflt) {
  if (!parent.contains(key)) return {dflt, dflt};
  const auto& j = parent.at(key);
  std::string p = path + "/" + key;
  if (j.is_number_integer()) {
    size_t v = read_size(j, p);
    return {v, v};
  }
  if (!j.is_array() || j.size() != 2) throw SchemaError(p, "expected an integer or a pair");
  return {read_size(j[0], p + "/0"), read_size(j[1], p + "/1")};
}

inline const nlohmann::json& field(const nlohmann::json& j, const char* key, const std::string& path) {
  if (!j.contains(key)) throw SchemaError(path + "/" + key, "missing field");
  return j.at(key);
}

inline Shape conv_out(const Shape& in, size_t cout, size_t ky, size_t kx, size_t sy, size_t sx, size_t py, size_t px,
                      const std::string& path) {
  if (in.size() != 3) throw ShapeError(path + ": expects a [C,H,W] input, got rank " + std::to_string(in.size()));
  long h = (static_cast<long>(in[1]) + 2 * static_cast<long>(py) - static_cast<long>(ky));
  long w = (static_cast<long>(in[2]) + 2 * static_cast<long>(px) - static_cast<long>(kx));
  if (sy == 0 || sx == 0) throw SchemaError(path + "/stride", "stride must be positive");
  if (h < 0 || w < 0) throw ShapeError(path + ": window larger than padded input");
  return {cout, static_cast<size_t>(h) / sy + 1, static_cast<size_t>(w) / sx + 1};
}

}  // namespace detail

// Infers and checks the per-layer output shapes; fills model.shapes.
inline void validate_model(NetworkModel& m) {
  using namespace detail;
  if (m.input_shape.empty()) throw SchemaError("/input_shape", "empty shape");
  for (size_t d : m.input_shape)
    if (d == 0) throw SchemaError("/input_shape", "zero dimension");
  m.shapes.clear();
  Shape cur = m.input_shape;
  for (size_t li = 0; li < m.layers.size(); ++li) {
    LayerSpec& L = m.layers[li];
    std::string path = "/layers/" + std::to_string(li);
    size_t n = shape_size(cur);
    switch (L.kind) {
      case LayerKind::dense: {
        if (L.W.empty() || L.W[0].size() != n)
          throw ShapeError(path + ": dense expects " + std::to_string(n) + " inputs, W has " +
                           std::to_string(L.W.empty() ? 0 : L.W[0].size()));
        if (L.b.empty()) L.b.assign(L.W.size(), 0.0);
        if (L.b.size() != L.W.size()) throw ShapeError(path + ": bias length does not match W rows");
        cur = {L.W.size()};
        break;
      }
      case LayerKind::relu:
      case LayerKind::abs: break;
      case LayerKind::leaky_relu:
        if (!(L.alpha >= 0 && L.alpha <= 1)) throw SchemaError(path + "/alpha", "leaky_relu alpha must lie in [0,1]");
        break;
      case LayerKind::prelu: {
        size_t C = channel_count(cur, cur.size() == 2);
        if (L.alphas.size() == 1 && C != 1) L.alphas.assign(C, L.alphas[0]);
        if (L.alphas.size() != C) throw ShapeError(path + ": prelu needs one alpha per channel");
        for (double a : L.alphas)
          if (a < 0) throw SchemaError(path + "/alpha", "prelu alpha must be nonnegative");
        break;
      }
      case LayerKind::max_pointwise:
        if (L.arity < 1 || n % L.arity) throw ShapeError(path + ": arity must divide the unit count");
        cur = {n / L.arity};
        break;
      case LayerKind::maxpool2d:
      case LayerKind::avgpool2d: {
        if (L.ky == 0 || L.kx == 0) throw SchemaError(path + "/k", "window must be positive");
        cur = conv_out(cur, cur.size() == 3 ? cur[0] : 0, L.ky, L.kx, L.sy, L.sx, L.py, L.px, path);
        break;
      }
      case LayerKind::conv2d: {
        if (cur.size() != 3) throw ShapeError(path + ": conv2d expects a [C,H,W] input");
        if (L.kernel.empty() || L.kernel[0].size() != cur[0])
          throw ShapeError(path + ": kernel input channels do not match " + std::to_string(cur[0]));
        L.ky = L.kernel[0][0].size();
        L.kx = L.kernel[0][0].empty() ? 0 : L.kernel[0][0][0].size();
        if (L.ky == 0 || L.kx == 0) throw SchemaError(path + "/kernel", "empty kernel window");
        for (const auto& per_out : L.kernel) {
          if (per_out.size() != cur[0]) throw ShapeError(path + ": ragged kernel");
          for (const auto& win : per_out) {
            if (win.size() != L.ky) throw ShapeError(path + ": ragged kernel");
            for (const auto& row : win)
              if (row.size() != L.kx) throw ShapeError(path + ": ragged kernel");
          }
        }
        if (L.b.empty()) L.b.assign(L.kernel.size(), 0.0);
        if (L.b.size() != L.kernel.size()) throw ShapeError(path + ": conv bias length does not match output channels");
        cur = conv_out(cur, L.kernel.size(), L.ky, L.kx, L.sy, L.sx, L.py, L.px, path);
        if (cur[1] == 0 || cur[2] == 0) throw ShapeError(path + ": empty output");
        break;
      }
      case LayerKind::batchnorm_inference: {
        size_t C = channel_count(cur, cur.size() == 2);
        for (const Vec* v : {&L.mu, &L.sigma, &L.gamma, &L.beta})
          if (v->size() != C) throw ShapeError(path + ": batchnorm vectors need " + std::to_string(C) + " entries");
        for (size_t i = 0; i < C; ++i)
          if (!(L.sigma[i] > 0)) throw SchemaError(path + "/sigma/" + std::to_string(i), "sigma must be positive");
        break;
      }
      case LayerKind::residual_add: {
        if (L.source >= static_cast<int>(li) || L.source < -1)
          throw SchemaError(path + "/source", "residual source must be an earlier layer (or -1 for the input)");
        const Shape& src = m.shape_after(L.source);
        if (shape_size(src) != n) throw ShapeError(path + ": residual source size does not match");
        break;
      }
      case LayerKind::gcn: {
        if (cur.size() != 2) throw ShapeError(path + ": gcn expects an [N,F] input");
        size_t N = cur[0], F = cur[1];
        if (L.adjacency.n != N) throw ShapeError(path + ": adjacency order does not match node count");
        if (L.W.size() != F) throw ShapeError(path + ": gcn W rows must equal input features");
        size_t Fo = L.W[0].size();
        if (L.b.empty()) L.b.assign(Fo, 0.0);
        if (L.b.size() != Fo) throw ShapeError(path + ": gcn bias length mismatch");
        for (size_t k = 0; k < L.adjacency.rows.size(); ++k)
          if (L.adjacency.rows[k] >= N || L.adjacency.cols[k] >= N)
            throw SchemaError(path + "/adjacency", "index out of range");
        cur = {N, Fo};
        break;
      }
    }
    m.shapes.push_back(cur);
  }
}

inline LayerSpec parse_layer(const nlohmann::json& j, const std::string& path) {
  using namespace detail;
  if (!j.is_object()) throw SchemaError(path, "layer must be an object");
  const auto& kj = field(j, "kind", path);
  if (!kj.is_string()) throw SchemaError(path + "/kind", "expected a string");
  auto kind = layer_kind_from(kj.get<std::string>());
  if (!kind) throw UnsupportedLayer(path + ": unknown layer kind '" + kj.get<std::string>() + "'");
  LayerSpec L;
  L.kind = *kind;
  switch (L.kind) {
    case LayerKind::dense:
      L.W = read_mat(field(j, "W", path), path + "/W");
      if (j.contains("b")) L.b = read_vec(j["b"], path + "/b");
      break;
    case LayerKind::relu:
    case LayerKind::abs: break;
    case LayerKind::leaky_relu: L.alpha = finite_number(field(j, "alpha", path), path + "/alpha"); break;
    case LayerKind::prelu: {
      const auto& a = field(j, "alpha", path);
      L.alphas = a.is_array() ? read_vec(a, path + "/alpha") : Vec{finite_number(a, path + "/alpha")};
      break;
    }
    case LayerKind::max_pointwise: L.arity = read_size(field(j, "arity", path), path + "/arity"); break;
    case LayerKind::maxpool2d:
    case LayerKind::avgpool2d: {
      auto k = read_pair(j, "k", path, 0);
      if (!j.contains("k")) throw SchemaError(path + "/k", "missing field");
      L.ky = k.first;
      L.kx = k.second;
      auto s = read_pair(j, "stride", path, 0);
      if (!j.contains("stride")) s = k;
      L.sy = s.first;
      L.sx = s.second;
      auto p = read_pair(j, "padding", path, 0);
      L.py = p.first;
      L.px = p.second;
      if (L.kind == LayerKind::maxpool2d && (L.py || L.px))
        throw SchemaError(path + "/padding", "maxpool2d padding is not supported");
      break;
    }
    case LayerKind::conv2d: {
      const auto& kj2 = field(j, "kernel", path);
      std::string kp = path + "/kernel";
      if (!kj2.is_array() || kj2.empty()) throw SchemaError(kp, "expected [c_out][c_in][ky][kx]");
      for (size_t o = 0; o < kj2.size(); ++o) {
        if (!kj2[o].is_array()) throw SchemaError(at_path(kp, o), "expected an array");
        std::vector<Mat> per;
        for (size_t c = 0; c < kj2[o].size(); ++c) per.push_back(read_mat(kj2[o][c], at_path(at_path(kp, o), c)));
        L.kernel.push_back(std::move(per));
      }
      if (j.contains("b")) L.b = read_vec(j["b"], path + "/b");
      auto s = read_pair(j, "stride", path, 1);
      L.sy = s.first;
      L.sx = s.second;
      auto p = read_pair(j, "padding", path, 0);
      L.py = p.first;
      L.px = p.second;
      break;
    }
    case LayerKind::batchnorm_inference:
      L.mu = read_vec(field(j, "mu", path), path + "/mu");
      L.sigma = read_vec(field(j, "sigma", path), path + "/sigma");
      L.gamma = read_vec(field(j, "gamma", path), path + "/gamma");
      L.beta = read_vec(field(j, "beta", path), path + "/beta");
      break;
    case LayerKind::residual_add: {
      const auto& s = field(j, "source", path);
      if (!s.is_number_integer()) throw SchemaError(path + "/source", "expected an integer");
      L.source = s.get<int>();
      break;
    }
    case LayerKind::gcn: {
      const auto& a = field(j, "adjacency", path);
      std::string ap = path + "/adjacency";
      L.adjacency.n = read_size(field(a, "n", ap), ap + "/n");
      const auto& r = field(a, "rows", ap);
      const auto& c = field(a, "cols", ap);
      L.adjacency.vals = read_vec(field(a, "vals", ap), ap + "/vals");
      if (!r.is_array() || !c.is_array() || r.size() != c.size() || r.size() != L.adjacency.vals.size())
        throw SchemaError(ap, "rows, cols and vals must have equal length");
      for (size_t k = 0; k < r.size(); ++k) {
        L.adjacency.rows.push_back(read_size(r[k], at_path(ap + "/rows", k)));
        L.adjacency.cols.push_back(read_size(c[k], at_path(ap + "/cols", k)));
      }
      L.W = read_mat(field(j, "W", path), path + "/W");
      if (j.contains("b")) L.b = read_vec(j["b"], path + "/b");
      break;
    }
  }
  return L;
}

inline NetworkModel model_from_json(const nlohmann::json& j) {
  using namespace detail;
  if (!j.is_object()) throw SchemaError("", "model must be a JSON object");
  NetworkModel m;
  const auto& s = field(j, "input_shape", "");
  if (!s.is_array()) throw SchemaError("/input_shape", "expected an array");
  for (size_t i = 0; i < s.size(); ++i) m.input_shape.push_back(read_size(s[i], at_path("/input_shape", i)));
  const auto& layers = field(j, "layers", "");
  if (!layers.is_array()) throw SchemaError("/layers", "expected an array");
  for (size_t i = 0; i < layers.size(); ++i) m.layers.push_back(parse_layer(layers[i], at_path("/layers", i)));
  if (j.contains("name") && j["name"].is_string()) m.name = j["name"];
  if (j.contains("version") && j["version"].is_string()) m.version = j["version"];
  if (j.contains("metadata") && j["metadata"].is_object()) {
    const auto& md = j["metadata"];
    if (md.contains("name") && md["name"].is_string()) m.name = md["name"];
    if (md.contains("version") && md["version"].is_string()) m.version = md["version"];
  }
  validate_model(m);
  return m;
}

inline NetworkModel load_model(const std::string& bytes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("", std::string("invalid JSON: ") + e.what());
  }
  return model_from_json(j);
}

inline NetworkModel load_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError(path, "cannot open file");
  std::stringstream ss;
  ss << in.rdbuf();
  return load_model(ss.str());
}

inline nlohmann::json to_json(const NetworkModel& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& L : m.layers) {
    nlohmann::json j{{"kind", to_string(L.kind)}};
    switch (L.kind) {
      case LayerKind::dense: j["W"] = L.W; j["b"] = L.b; break;
      case LayerKind::leaky_relu: j["alpha"] = L.alpha; break;
      case LayerKind::prelu: j["alpha"] = L.alphas; break;
      case LayerKind::max_pointwise: j["arity"] = L.arity; break;
      case LayerKind::maxpool2d:
      case LayerKind::avgpool2d:
        j["k"] = {L.ky, L.kx};
        j["stride"] = {L.sy, L.sx};
        j["padding"] = {L.py, L.px};
        break;
      case LayerKind::conv2d:
        j["kernel"] = L.kernel;
        j["b"] = L.b;
        j["stride"] = {L.sy, L.sx};
        j["padding"] = {L.py, L.px};
        break;
      case LayerKind::batchnorm_inference:
        j["mu"] = L.mu; j["sigma"] = L.sigma; j["gamma"] = L.gamma; j["beta"] = L.beta;
        break;
      case LayerKind::residual_add: j["source"] = L.source; break;
      case LayerKind::gcn:
        j["adjacency"] = {{"n", L.adjacency.n}, {"rows", L.adjacency.rows}, {"cols", L.adjacency.cols}, {"vals", L.adjacency.vals}};
        j["W"] = L.W;
        j["b"] = L.b;
        break;
      default: break;
    }
    layers.push_back(std::move(j));
  }
  return {{"input_shape", m.input_shape}, {"layers", layers}, {"name", m.name}, {"version", m.version}};
}

// ---------------------------------------------------------------------------
// Compiled graph

enum class GateKind { relu, leaky, prelu, abs, max_pointwise, maxpool };

inline const char* to_string(GateKind k) {
  switch (k) {
    case GateKind::relu: return "relu";
    case GateKind::leaky: return "leaky_relu";
    case GateKind::prelu: return "prelu";
    case GateKind::abs: return "abs";
    case GateKind::max_pointwise: return "max_pointwise";
    case GateKind::maxpool: return "maxpool";
  }
  return "?";
}

// A scalar two-way gate or a Max site. For two-way gates `pre` is the
// pre-activation z and `pos_child` the Max child that wins when z >= 0.
struct GateSite {
  NodeId max_node = 0;
  GateKind kind = GateKind::relu;
  NodeId pre = 0;
  int pos_child = -1;
  double alpha = 0;
  size_t layer = 0;
  size_t unit = 0;
  bool two_way() const { return kind != GateKind::max_pointwise && kind != GateKind::maxpool; }
};

struct StructuralCounts {
  size_t n_aff = 0, n_gate2 = 0, t_conv = 0, t_gnn = 0;
  size_t v_max = 0, k_max = 0, gamma_max = 0;
  size_t residual_fanin = 0;
  size_t states = 0, edges = 0;

  size_t state_bound() const { return 1 + n_aff + t_conv + t_gnn + v_max + n_gate2; }
  size_t edge_bound() const { return n_aff + t_conv + t_gnn + residual_fanin + 2 * n_gate2 + k_max; }
  size_t plane_bound() const { return n_gate2 + gamma_max; }
  size_t oriented_bound() const { return 2 * n_gate2 + 2 * gamma_max; }
  bool bounds_hold() const { return states <= state_bound() && edges <= edge_bound(); }

  nlohmann::json to_json() const {
    return {{"N_aff", n_aff},         {"N_gate2", n_gate2},         {"T_conv", t_conv},
            {"T_gnn", t_gnn},         {"V_max", v_max},             {"K_max", k_max},
            {"Gamma_max", gamma_max}, {"residual_fanin", residual_fanin},
            {"states", states},       {"edges", edges},             {"state_bound", state_bound()},
            {"edge_bound", edge_bound()}, {"plane_bound", plane_bound()}, {"oriented_bound", oriented_bound()},
            {"bounds_hold", bounds_hold()}};
  }
};

struct SwtGraph {
  std::shared_ptr<ExprStore> store;
  Shape input_shape, output_shape;
  bool output_node_layout = false;
  std::vector<NodeId> outputs;
  std::vector<GateSite> gates;
  std::unordered_map<NodeId, size_t> gate_of;  // Max node -> gates index
  StructuralCounts counts;

  size_t input_dim() const { return store->dim(); }
  Vec eval(const Vec& x) const { return store->eval(outputs, x); }
  const GateSite* gate(NodeId max_node) const {
    auto it = gate_of.find(max_node);
    return it == gate_of.end() ? nullptr : &gates[it->second];
  }
};

// Replace the units of one channel at the output of a layer.
struct LayerOverride {
  int layer = 0;
  size_t channel = 0;
  std::string policy = "zero";  // "zero" | "affine"
  Mat W;                        // rows over the model input; one row broadcasts
  Vec b;
};

struct CompileOptions {
  std::shared_ptr<ExprStore> store;    // share a DAG with other graphs
  std::optional<Mat> input_map;        // compile F(T x): unit i starts as row i of T
  std::optional<LayerOverride> override_;
};

namespace detail {

using Unit = LinearForm;

inline Unit scaled_unit(const Unit& u, double c) {
  Unit r;
  r.w = scaled(u.w, c);
  r.b = u.b * c;
  for (const auto& t : u.terms)
    if (t.second * c != 0) r.terms.emplace_back(t.first, t.second * c);
  return r;
}

// Σ_k c_k u_k, with Max terms merged by node id.
class UnitAccumulator {
 public:
  explicit UnitAccumulator(size_t dim) { out_.w.assign(dim, 0.0); }
  void add(double c, const Unit& u) {
    if (c == 0) return;
    axpy(c, u.w, out_.w);
    out_.b += c * u.b;
    for (const auto& t : u.terms) terms_[t.first] += c * t.second;
  }
  void add_bias(double b) { out_.b += b; }
  Unit take() {
    for (const auto& [k, v] : terms_)
      if (v != 0) out_.terms.emplace_back(k, v);
    return std::move(out_);
  }

 private:
  Unit out_;
  std::map<NodeId, double> terms_;
};

class Compiler {
 public:
  Compiler(const NetworkModel& m, CompileOptions opt) : m_(m), opt_(std::move(opt)) {
    const size_t n = m.input_size();
    if (opt_.input_map) {
      const Mat& T = *opt_.input_map;
      if (T.size() != n) throw DimensionMismatch("input map rows must equal the input size");
      dim_ = T.front().size();
    } else {
      dim_ = n;
    }
    g_.store = opt_.store ? opt_.store : std::make_shared<ExprStore>(dim_);
    if (g_.store->dim() != dim_) throw DimensionMismatch("shared store has a different input dimension");
    st_ = g_.store.get();
  }

  SwtGraph run() {
    const size_t n = m_.input_size();
    std::vector<Unit> cur(n);
    for (size_t i = 0; i < n; ++i) {
      cur[i].w = opt_.input_map ? (*opt_.input_map)[i] : unit_vector(dim_, i);
    }
    Shape shape = m_.input_shape;
    bool node_layout = shape.size() == 2;  // [N, F] node features
    std::vector<std::vector<Unit>> history;
    history.reserve(m_.layers.size());
    const std::vector<Unit> input_units = cur;
    auto& c = g_.counts;
    for (size_t li = 0; li < m_.layers.size(); ++li) {
      const LayerSpec& L = m_.layers[li];
      const Shape& out_shape = m_.shapes[li];
      std::vector<Unit> next;
      switch (L.kind) {
        case LayerKind::dense: {
          for (size_t r = 0; r < L.W.size(); ++r) {
            UnitAccumulator acc(dim_);
            for (size_t k = 0; k < cur.size(); ++k) acc.add(L.W[r][k], cur[k]);
            acc.add_bias(L.b[r]);
            next.push_back(acc.take());
          }
          c.n_aff += next.size();
          break;
        }
        case LayerKind::relu:
        case LayerKind::leaky_relu:
        case LayerKind::prelu:
        case LayerKind::abs: {
          for (size_t u = 0; u < cur.size(); ++u) {
            double alpha = 0;
            GateKind gk = GateKind::relu;
            if (L.kind == LayerKind::leaky_relu) {
              alpha = L.alpha;
              gk = GateKind::leaky;
            } else if (L.kind == LayerKind::prelu) {
              alpha = L.alphas[channel_of(shape, node_layout, u)];
              gk = GateKind::prelu;
            } else if (L.kind == LayerKind::abs) {
              alpha = -1;
              gk = GateKind::abs;
            }
            next.push_back(gate(cur[u], alpha, gk, li, u));
          }
          c.n_gate2 += cur.size();
          break;
        }
        case LayerKind::max_pointwise: {
          for (size_t v = 0; v < cur.size() / L.arity; ++v) {
            std::vector<const Unit*> cands;
            for (size_t k = 0; k < L.arity; ++k) cands.push_back(&cur[v * L.arity + k]);
            next.push_back(max_site(cands, GateKind::max_pointwise, li, v));
          }
          break;
        }
        case LayerKind::maxpool2d:
        case LayerKind::avgpool2d: {
          const size_t C = shape[0], H = shape[1], W = shape[2];
          const size_t Ho = out_shape[1], Wo = out_shape[2];
          for (size_t ch = 0; ch < C; ++ch)
            for (size_t oy = 0; oy < Ho; ++oy)
              for (size_t ox = 0; ox < Wo; ++ox) {
                std::vector<const Unit*> win;
                for (size_t a = 0; a < L.ky; ++a)
                  for (size_t b = 0; b < L.kx; ++b) {
                    long iy = static_cast<long>(oy * L.sy + a) - static_cast<long>(L.py);
                    long ix = static_cast<long>(ox * L.sx + b) - static_cast<long>(L.px);
                    if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) {
                      win.push_back(nullptr);  // zero padding
                      continue;
                    }
                    win.push_back(&cur[(ch * H + static_cast<size_t>(iy)) * W + static_cast<size_t>(ix)]);
                  }
                if (L.kind == LayerKind::maxpool2d) {
                  next.push_back(max_site(win, GateKind::maxpool, li, next.size()));
                } else {
                  UnitAccumulator acc(dim_);
                  double inv = 1.0 / static_cast<double>(win.size());
                  for (const Unit* u : win)
                    if (u) acc.add(inv, *u);
                  next.push_back(acc.take());
                }
              }
          if (L.kind == LayerKind::avgpool2d) c.n_aff += next.size();
          break;
        }
        case LayerKind::conv2d: {
          const size_t Ci = shape[0], H = shape[1], W = shape[2];
          const size_t Co = out_shape[0], Ho = out_shape[1], Wo = out_shape[2];
          for (size_t co = 0; co < Co; ++co)
            for (size_t oy = 0; oy < Ho; ++oy)
              for (size_t ox = 0; ox < Wo; ++ox) {
                // one im2col row: the receptive field of (co, oy, ox)
                UnitAccumulator acc(dim_);
                for (size_t ci = 0; ci < Ci; ++ci)
                  for (size_t a = 0; a < L.ky; ++a)
                    for (size_t b = 0; b < L.kx; ++b) {
                      long iy = static_cast<long>(oy * L.sy + a) - static_cast<long>(L.py);
                      long ix = static_cast<long>(ox * L.sx + b) - static_cast<long>(L.px);
                      if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                      acc.add(L.kernel[co][ci][a][b], cur[(ci * H + static_cast<size_t>(iy)) * W + static_cast<size_t>(ix)]);
                    }
                acc.add_bias(L.b[co]);
                next.push_back(acc.take());
              }
          c.t_conv += next.size();
          break;
        }
        case LayerKind::batchnorm_inference: {
          for (size_t u = 0; u < cur.size(); ++u) {
            size_t ch = channel_of(shape, node_layout, u);
            double s = L.gamma[ch] / L.sigma[ch];
            UnitAccumulator acc(dim_);
            acc.add(s, cur[u]);
            acc.add_bias(L.beta[ch] - s * L.mu[ch]);
            next.push_back(acc.take());
          }
          c.n_aff += next.size();
          break;
        }
        case LayerKind::residual_add: {
          const std::vector<Unit>& src = L.source < 0 ? input_units : history[static_cast<size_t>(L.source)];
          for (size_t u = 0; u < cur.size(); ++u) {
            UnitAccumulator acc(dim_);
            acc.add(1.0, cur[u]);
            acc.add(1.0, src[u]);
            next.push_back(acc.take());
          }
          c.n_aff += next.size();
          c.residual_fanin += 2 * next.size();
          break;
        }
        case LayerKind::gcn: {
          // X' = Â X W + b on the node-feature layout [N, F]
          const size_t N = shape[0], F = shape[1], Fo = L.W[0].size();
          std::vector<std::vector<std::pair<size_t, double>>> nbr(N);
          for (size_t k = 0; k < L.adjacency.rows.size(); ++k)
            nbr[L.adjacency.rows[k]].emplace_back(L.adjacency.cols[k], L.adjacency.vals[k]);
          std::vector<Unit> xw(N * Fo);
          for (size_t v = 0; v < N; ++v)
            for (size_t o = 0; o < Fo; ++o) {
              UnitAccumulator acc(dim_);
              for (size_t f = 0; f < F; ++f) acc.add(L.W[f][o], cur[v * F + f]);
              xw[v * Fo + o] = acc.take();
            }
          for (size_t v = 0; v < N; ++v)
            for (size_t o = 0; o < Fo; ++o) {
              UnitAccumulator acc(dim_);
              for (const auto& [u, a] : nbr[v]) acc.add(a, xw[u * Fo + o]);
              acc.add_bias(L.b[o]);
              next.push_back(acc.take());
            }
          c.t_gnn += next.size();
          break;
        }
      }
      shape = out_shape;
      node_layout = shape.size() == 2;
      if (opt_.override_ && opt_.override_->layer == static_cast<int>(li)) apply_override(next, shape, node_layout);
      history.push_back(next);
      cur = std::move(next);
    }
    for (const Unit& u : cur) g_.outputs.push_back(materialize(u));
    g_.input_shape = m_.input_shape;
    g_.output_shape = m_.output_shape();
    g_.output_node_layout = node_layout;
    c.states = 1 + c.n_aff + c.t_conv + c.t_gnn + c.v_max + c.n_gate2;
    c.edges = c.n_aff - c.residual_fanin / 2 + c.residual_fanin + c.t_conv + c.t_gnn + 2 * c.n_gate2 + c.k_max;
    return std::move(g_);
  }

 private:
  NodeId materialize(const Unit& u) {
    std::vector<NodeId> parts;
    bool affine_part = !u.terms.empty() ? (norm_inf(u.w) != 0 || u.b != 0) : true;
    if (affine_part) parts.push_back(st_->affine(u.w, u.b));
    for (const auto& [node, coef] : u.terms) parts.push_back(coef == 1 ? node : st_->scale(coef, node));
    return parts.size() == 1 ? parts[0] : st_->sum(parts);
  }

  static Unit term_unit(size_t dim, NodeId node, double coef) {
    Unit r;
    r.w.assign(dim, 0.0);
    r.terms.emplace_back(node, coef);
    return r;
  }

  // alpha >= 0: max{z, alpha z} (alpha <= 1) or min{z, alpha z} (alpha > 1).
  // alpha == -1 encodes Abs.
  Unit gate(const Unit& u, double alpha, GateKind kind, size_t layer, size_t unit) {
    NodeId z = materialize(u);
    bool flip = alpha > 1;
    NodeId pos = flip ? materialize(scaled_unit(u, -1)) : z;
    NodeId neg = materialize(scaled_unit(u, flip ? -alpha : alpha));
    NodeId m = st_->max({pos, neg});
    const ExprNode& mn = st_->node(m);
    if (mn.children.size() == 1) return flip ? scaled_unit(u, 1) : u;  // z identical to its negative branch
    if (!g_.gate_of.count(m)) {
      GateSite gs;
      gs.max_node = m;
      gs.kind = kind;
      gs.pre = z;
      gs.pos_child = mn.children[0] == pos ? 0 : 1;
      gs.alpha = alpha;
      gs.layer = layer;
      gs.unit = unit;
      g_.gate_of[m] = g_.gates.size();
      g_.gates.push_back(gs);
    }
    return term_unit(dim_, m, flip ? -1.0 : 1.0);
  }

  Unit max_site(const std::vector<const Unit*>& cands, GateKind kind, size_t layer, size_t unit) {
    std::vector<NodeId> ids;
    for (const Unit* u : cands) ids.push_back(u ? materialize(*u) : st_->constant(0));
    NodeId m = st_->max(ids);
    auto& c = g_.counts;
    c.v_max += 1;
    c.k_max += cands.size();
    c.gamma_max += cands.size() * (cands.size() - 1) / 2;
    if (st_->node(m).children.size() == 1) {
      for (size_t i = 0; i < cands.size(); ++i)
        if (ids[i] == st_->node(m).children[0] && cands[i]) return *cands[i];
    }
    if (!g_.gate_of.count(m)) {
      GateSite gs;
      gs.max_node = m;
      gs.kind = kind;
      gs.layer = layer;
      gs.unit = unit;
      g_.gate_of[m] = g_.gates.size();
      g_.gates.push_back(gs);
    }
    return term_unit(dim_, m, 1.0);
  }

  void apply_override(std::vector<Unit>& units, const Shape& shape, bool node_layout) {
    const LayerOverride& o = *opt_.override_;
    if (o.channel >= channel_count(shape, node_layout))
      throw SubstitutionError("channel " + std::to_string(o.channel) + " out of range");
    size_t k = 0;
    for (size_t u = 0; u < units.size(); ++u) {
      if (channel_of(shape, node_layout, u) != o.channel) continue;
      Unit r;
      r.w.assign(dim_, 0.0);
      if (o.policy == "affine") {
        const Vec& row = o.W.size() == 1 ? o.W[0] : o.W.at(k);
        if (row.size() != m_.input_size()) throw SubstitutionError("policy row has the wrong input arity");
        if (opt_.input_map) {
          for (size_t i = 0; i < row.size(); ++i) axpy(row[i], (*opt_.input_map)[i], r.w);
        } else {
          r.w = row;
        }
        r.b = o.b.empty() ? 0.0 : (o.b.size() == 1 ? o.b[0] : o.b.at(k));
      } else if (o.policy != "zero") {
        throw SubstitutionError("unknown policy '" + o.policy + "'");
      }
      units[u] = std::move(r);
      ++k;
    }
  }

  const NetworkModel& m_;
  CompileOptions opt_;
  size_t dim_ = 0;
  SwtGraph g_;
  ExprStore* st_ = nullptr;
};

}  // namespace detail

inline SwtGraph compile(const NetworkModel& model, CompileOptions opt = {}) {
  return detail::Compiler(model, std::move(opt)).run();
}

// Compiles against a domain; only checks that the dimensions agree.
inline SwtGraph compile(const NetworkModel& model, const InputDomain& domain, CompileOptions opt = {}) {
  if (domain.dim() != (opt.input_map ? opt.input_map->front().size() : model.input_size()))
    throw DimensionMismatch("domain dimension " + std::to_string(domain.dim()) + " != model input size " +
                            std::to_string(model.input_size()));
  return compile(model, std::move(opt));
}

inline StructuralCounts structural_counts(const SwtGraph& g) { return g.counts; }

// Rebuild the DAG under roots with `target` replaced by `replacement`.
inline std::vector<NodeId> substitute(ExprStore& store, const std::vector<NodeId>& roots, NodeId target,
                                      NodeId replacement) {
  if (target >= store.size() || replacement >= store.size()) throw SubstitutionError("unknown node id");
  std::unordered_map<NodeId, NodeId> map;
  map[target] = replacement;
  for (NodeId id : store.reachable(roots)) {
    if (id == target) continue;
    ExprNode n = store.node(id);
    bool changed = false;
    std::vector<NodeId> kids;
    for (NodeId c : n.children) {
      auto it = map.find(c);
      NodeId nc = it == map.end() ? c : it->second;
      changed = changed || nc != c;
      kids.push_back(nc);
    }
    if (changed) map[id] = store.rebuild(n, std::move(kids));
  }
  std::vector<NodeId> out;
  for (NodeId r : roots) {
    auto it = map.find(r);
    out.push_back(it == map.end() ? r : it->second);
  }
  return out;
}

}  // namespace jitswt
