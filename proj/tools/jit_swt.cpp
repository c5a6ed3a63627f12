#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <jitswt/jitswt.hpp>
#include <random>
#include <thread>

using namespace jitswt;

namespace {

enum Exit { kOk = 0, kCounterexample = 1, kUnknown = 2, kUsage = 10, kIo = 11, kModel = 12, kInternal = 13 };

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Config {
  std::string model, domain_file, out, trace, pair = "gap";
  std::vector<double> box;
  size_t max_splits = kUnlimited, max_new_guards = kUnlimited, max_lp_calls = kUnlimited;
  unsigned long seed = 2025;
  unsigned threads = 1;
  int log = 1;  // JITSWT_LOG: 0 quiet, 1 summary, 2 trace on stderr
};

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path, std::string("not valid JSON: ") + e.what());
  }
}

std::string dir_of(const std::string& path) {
  auto k = path.find_last_of('/');
  return k == std::string::npos ? "." : path.substr(0, k);
}

double parse_norm(const std::string& s) {
  if (s == "inf" || s == "Inf" || s == "INF") return HUGE_VAL;
  if (s == "1") return 1;
  if (s == "2") return 2;
  throw CLI::ValidationError("norm", "expected 1, 2 or inf, got '" + s + "'");
}

class Runner {
 public:
  explicit Runner(Config& c) : c_(c) {
    if (const char* e = std::getenv("JITSWT_LOG")) c_.log = std::atoi(e);
  }

  NetworkModel model() const {
    std::ifstream probe(c_.model);
    if (!probe) throw IoError("cannot open model '" + c_.model + "'");
    return load_model_file(c_.model);
  }

  InputDomain domain(size_t dim) const {
    if (!c_.domain_file.empty()) {
      InputDomain D = InputDomain::from_json(read_json(c_.domain_file));
      if (D.dim() != dim) throw DimensionMismatch("domain dimension " + std::to_string(D.dim()) + " != model input " + std::to_string(dim));
      return D;
    }
    if (c_.box.empty()) return InputDomain::box(Vec(dim, -1), Vec(dim, 1));
    if (c_.box.size() == 2) return InputDomain::box(Vec(dim, c_.box[0]), Vec(dim, c_.box[1]));
    if (c_.box.size() == 2 * dim) {
      Vec lo(dim), hi(dim);
      for (size_t i = 0; i < dim; ++i) {
        lo[i] = c_.box[2 * i];
        hi[i] = c_.box[2 * i + 1];
      }
      return InputDomain::box(lo, hi);
    }
    throw CLI::ValidationError("--box", "expects 2 or 2*dim numbers");
  }

  Budget budget() const {
    Budget b;
    b.max_splits = c_.max_splits;
    b.max_new_guards = c_.max_new_guards;
    b.max_lp_calls = c_.max_lp_calls;
    return b;
  }

  EngineOptions engine() {
    EngineOptions eo;
    if (c_.pair == "overlap") eo.pair = PairHeuristic::overlap;
    else if (c_.pair != "gap") throw CLI::ValidationError("--pair", "expected gap or overlap");
    if (!c_.trace.empty()) {
      trace_.open(c_.trace);
      if (!trace_) throw IoError("cannot write trace '" + c_.trace + "'");
      eo.trace_sink = &trace_;
    } else if (c_.log >= 2) {
      eo.trace_sink = &std::cerr;
    }
    return eo;
  }

  void emit(const nlohmann::json& payload) const {
    std::string s = payload.dump(2) + "\n";
    if (c_.out.empty()) {
      std::cout << s;
      return;
    }
    std::ofstream o(c_.out);
    if (!o) throw IoError("cannot write '" + c_.out + "'");
    o << s;
  }

  void emit_text(const std::string& s) const {
    if (c_.out.empty()) {
      std::cout << s;
      return;
    }
    std::ofstream o(c_.out);
    if (!o) throw IoError("cannot write '" + c_.out + "'");
    o << s;
  }

  void say(const std::string& s) const {
    if (c_.log >= 1) std::cerr << s << "\n";
  }

  void note_threads() const {
    if (c_.threads > 1) say("note: --threads " + std::to_string(c_.threads) + " accepted; leaves are processed sequentially");
  }

  int certificate(const Certificate& c, nlohmann::json extra = {}) const {
    nlohmann::json j = c.to_json();
    for (auto& [k, v] : extra.items()) j[k] = v;
    emit(j);
    std::string msg = std::string(to_string(c.verdict)) + "  splits=" + std::to_string(c.splits) +
                      " new_guards=" + std::to_string(c.new_guards) + " lp_calls=" + std::to_string(c.lp_calls);
    if (c.verdict == Verdict::counterexample) msg += "  g(witness)=" + std::to_string(c.witness_g);
    if (c.verdict == Verdict::unknown) msg += "  reason=" + c.reason;
    say(msg);
    switch (c.verdict) {
      case Verdict::proof: return kOk;
      case Verdict::counterexample: return kCounterexample;
      case Verdict::unknown: return kUnknown;
    }
    return kInternal;
  }

  Config& c_;
  std::ofstream trace_;
};

Vec read_point(const std::string& file, size_t probe, const std::vector<double>& inline_values) {
  if (!inline_values.empty()) return inline_values;
  if (file.empty()) throw CLI::ValidationError("point", "give --x0 FILE or --point v1 v2 ...");
  nlohmann::json j = read_json(file);
  if (j.is_array() && !j.empty() && j[0].is_object()) j = j.at(probe);
  if (j.is_object()) j = j.at("x");
  return j.get<Vec>();
}

// Random relu nets for the accounting replay.
NetworkModel random_net(const std::vector<size_t>& widths, std::mt19937_64& gen) {
  std::normal_distribution<double> nd(0, 1);
  NetworkModel m;
  m.input_shape = {widths[0]};
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    LayerSpec L;
    L.kind = LayerKind::dense;
    L.W.assign(widths[i + 1], Vec(widths[i]));
    for (auto& r : L.W)
      for (double& v : r) v = nd(gen) / std::sqrt(double(widths[i]));
    L.b.resize(widths[i + 1]);
    for (double& v : L.b) v = 0.3 * nd(gen);
    m.layers.push_back(L);
    if (i + 2 < widths.size()) {
      LayerSpec A;
      A.kind = LayerKind::relu;
      m.layers.push_back(A);
    }
  }
  validate_model(m);
  return m;
}

nlohmann::json engine_counters(JitEngine& E) {
  nlohmann::json j = E.counters();
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  Config cfg;
  CLI::App app{"jit-swt: compile ReLU-type networks to guarded CPWL transducers and verify them"};
  app.require_subcommand(1);

  auto common = [&](CLI::App* s, bool needs_model = true) {
    auto* m = s->add_option("--model", cfg.model, "model JSON file");
    if (needs_model) m->required();
    s->add_option("--box", cfg.box, "domain box: LO HI for every coordinate, or LO0 HI0 LO1 HI1 ...")->expected(2, -1);
    s->add_option("--domain", cfg.domain_file, "domain JSON {kind, params}");
    s->add_option("--max-splits", cfg.max_splits, "split budget");
    s->add_option("--max-new-guards", cfg.max_new_guards, "new guard budget");
    s->add_option("--max-lp-calls", cfg.max_lp_calls, "LP call budget");
    s->add_option("--out", cfg.out, "write the JSON payload here instead of stdout");
    s->add_option("--trace", cfg.trace, "write the refinement trace (JSON lines)");
    s->add_option("--pair", cfg.pair, "pair heuristic for comparator splits: gap | overlap");
    s->add_option("--seed", cfg.seed, "seed for sampling and generated nets");
    s->add_option("--threads", cfg.threads, "worker threads (accepted; runs sequentially)")->check(CLI::PositiveNumber);
    s->get_option("--domain")->excludes(s->get_option("--box"));
  };

  auto* compile_cmd = app.add_subcommand("compile", "compile a model and report structural counts");
  common(compile_cmd);
  std::string dump_path;
  compile_cmd->add_option("--dump", dump_path, "write the expression DAG as JSON");

  auto* regions_cmd = app.add_subcommand("regions", "enumerate affine fragments over the domain");
  common(regions_cmd);
  bool csv = false;
  regions_cmd->add_flag("--csv", csv, "emit the table as CSV");

  auto* jac_cmd = app.add_subcommand("jacobian", "Jacobian (or min-norm Clarke element) at a point");
  common(jac_cmd);
  std::string x0_file;
  std::vector<double> point;
  size_t probe = 0;
  jac_cmd->add_option("--x0", x0_file, "point file: array, {x}, or probes list");
  jac_cmd->add_option("--point", point, "point coordinates");
  jac_cmd->add_option("--probe", probe, "probe index when --x0 is a probes list");

  auto* ext_cmd = app.add_subcommand("extremum", "exact sup or inf of one output");
  common(ext_cmd);
  size_t output = 0;
  std::string sense = "max";
  ext_cmd->add_option("--output", output, "output index");
  ext_cmd->add_option("--sense", sense, "max | min")->check(CLI::IsMember({"max", "min"}));

  auto* lip_cmd = app.add_subcommand("lipschitz", "exact or bracketed Lipschitz constant");
  common(lip_cmd);
  std::string p_str = "2", r_str;
  bool anytime = false;
  lip_cmd->add_option("--p", p_str, "input norm: 1, 2, inf");
  lip_cmd->add_option("--r", r_str, "output norm (default: same as --p)");
  lip_cmd->add_flag("--anytime", anytime, "bracket mode; allowed for every norm pair");

  auto* verify_cmd = app.add_subcommand("verify", "check a property specification");
  common(verify_cmd);
  std::string spec_file;
  verify_cmd->add_option("--spec", spec_file, "property JSON {domain, atoms}")->required();

  auto* robust_cmd = app.add_subcommand("robust", "local robustness certificate");
  common(robust_cmd);
  double eps = 0.1, gamma = 0;
  std::string robust_p = "inf";
  long label = -1;
  robust_cmd->add_option("--x0", x0_file, "center point file: array, {x}, or probes list");
  robust_cmd->add_option("--point", point, "center coordinates");
  robust_cmd->add_option("--probe", probe, "probe index when --x0 is a probes list");
  robust_cmd->add_option("--eps", eps, "radius")->check(CLI::NonNegativeNumber);
  robust_cmd->add_option("--p", robust_p, "ball norm: 1, 2, inf");
  robust_cmd->add_option("--label", label, "expected label (default: prediction at x0)");
  robust_cmd->add_option("--gamma", gamma, "required margin");

  auto* equiv_cmd = app.add_subcommand("equiv", "epsilon-equivalence of two models");
  common(equiv_cmd);
  std::string other;
  equiv_cmd->add_option("--other", other, "second model JSON")->required();
  equiv_cmd->add_option("--eps", eps, "tolerance");

  auto* eqv_cmd = app.add_subcommand("equivariance", "translation or node-permutation equivariance");
  common(eqv_cmd);
  std::vector<long> shift;
  std::vector<size_t> perm;
  std::string window = "exact";
  eqv_cmd->add_option("--shift", shift, "DY DX input shift for [C,H,W] models")->expected(2);
  eqv_cmd->add_option("--perm", perm, "node permutation for GCN models");
  eqv_cmd->add_option("--window", window, "exact | margin | full")->check(CLI::IsMember({"exact", "margin", "full"}));
  eqv_cmd->add_option("--eps", eps, "tolerance");

  auto* imax_cmd = app.add_subcommand("imax", "maximal causal influence of an intervention");
  common(imax_cmd);
  std::string iv_file;
  int layer = -1;
  size_t channel = 0;
  imax_cmd->add_option("--intervention", iv_file, "intervention JSON {target, policy}");
  imax_cmd->add_option("--layer", layer, "layer index (zero policy)");
  imax_cmd->add_option("--channel", channel, "channel index (zero policy)");

  auto* bench_cmd = app.add_subcommand("bench", "replay accounting counters on generated relu nets");
  common(bench_cmd, false);
  size_t nets = 5;
  std::vector<size_t> widths{2, 8, 8, 1};
  bench_cmd->add_option("--nets", nets, "nets per family");
  bench_cmd->add_option("--widths", widths, "layer widths")->expected(2, -1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n(run with --help for the flag list)\n";
    return kUsage;
  }

  Runner run(cfg);
  try {
    run.note_threads();
    if (*compile_cmd) {
      NetworkModel m = run.model();
      SwtGraph g = compile(m);
      nlohmann::json j{{"model", m.name},
                       {"input_shape", g.input_shape},
                       {"output_shape", g.output_shape},
                       {"nodes", g.store->size()},
                       {"gates", g.gates.size()},
                       {"counts", g.counts.to_json()}};
      if (!dump_path.empty()) {
        std::ofstream d(dump_path);
        if (!d) throw IoError("cannot write '" + dump_path + "'");
        d << nlohmann::json{{"store", g.store->dump()}, {"outputs", g.outputs}}.dump() << "\n";
      }
      run.emit(j);
      run.say("compiled: " + std::to_string(g.store->size()) + " nodes, " + std::to_string(g.gates.size()) + " gates");
      return kOk;
    }
    if (*regions_cmd) {
      NetworkModel m = run.model();
      SwtGraph g = compile(m);
      InputDomain D = run.domain(m.input_size());
      JitEngine E(g, D, run.budget(), run.engine());
      RegionTable T = extract_regions(E);
      if (csv)
        run.emit_text(T.to_csv());
      else {
        nlohmann::json j = T.to_json();
        j["counters"] = engine_counters(E);
        run.emit(j);
      }
      run.say(std::to_string(T.fragments.size()) + " fragments, coverage " + (T.complete ? "complete" : "partial"));
      return T.complete ? kOk : kUnknown;
    }
    if (*jac_cmd) {
      NetworkModel m = run.model();
      SwtGraph g = compile(m);
      InputDomain D = run.domain(m.input_size());
      JitEngine E(g, D, run.budget(), run.engine());
      Vec x = read_point(x0_file, probe, point);
      if (x.size() != m.input_size()) throw DimensionMismatch("point has the wrong dimension");
      JacobianResult r = jacobian_at(E, x);
      nlohmann::json j = r.to_json();
      j["counters"] = engine_counters(E);
      run.emit(j);
      run.say(std::string("jacobian: ") + (r.interior ? "interior point" : "boundary point, min-norm hull element"));
      return kOk;
    }
    if (*ext_cmd) {
      NetworkModel m = run.model();
      SwtGraph g = compile(m);
      InputDomain D = run.domain(m.input_size());
      if (output >= g.outputs.size()) throw IndexError("--output " + std::to_string(output) + " out of range");
      JitEngine E(g.store, {g.outputs[output]}, D, run.budget(), run.engine());
      E.set_gates(g.gates);
      ExtremumResult r = extremum(E, g.outputs[output], sense == "max" ? Sense::max : Sense::min);
      nlohmann::json j = r.to_json();
      j["counters"] = engine_counters(E);
      run.emit(j);
      run.say(sense + " = " + std::to_string(r.value) + (r.exact ? " (exact)" : " (bracket)"));
      return r.exact ? kOk : kUnknown;
    }
    if (*lip_cmd) {
      NetworkModel m = run.model();
      SwtGraph g = compile(m);
      InputDomain D = run.domain(m.input_size());
      double p = parse_norm(p_str), r = parse_norm(r_str.empty() ? p_str : r_str);
      JitEngine E(g, D, run.budget(), run.engine());
      LipschitzResult L = lipschitz(E, p, r, anytime ? LipschitzMode::anytime : LipschitzMode::exact);
      nlohmann::json j = L.to_json();
      j["p"] = p_str;
      j["r"] = r_str.empty() ? p_str : r_str;
      j["counters"] = engine_counters(E);
      run.emit(j);
      run.say("L = " + std::to_string(L.value) + (L.exact ? " (exact)" : " (bracket up to " + std::to_string(L.hi) + ")"));
      return L.exact ? kOk : kUnknown;
    }
    if (*verify_cmd) {
      NetworkModel m = run.model();
      SwtGraph g = compile(m);
      PropertySpec spec = PropertySpec::from_json(read_json(spec_file), dir_of(spec_file));
      if (spec.domain.dim() != m.input_size()) throw DimensionMismatch("spec domain dimension != model input");
      return run.certificate(verify(spec, g, run.budget(), run.engine()));
    }
    if (*robust_cmd) {
      NetworkModel m = run.model();
      SwtGraph g = compile(m);
      Vec x0 = read_point(x0_file, probe, point);
      if (x0.size() != m.input_size()) throw DimensionMismatch("x0 has the wrong dimension");
      size_t y = label < 0 ? argmax(g.eval(x0)) : static_cast<size_t>(label);
      std::optional<std::pair<Vec, Vec>> clip;
      if (!cfg.box.empty() || !cfg.domain_file.empty()) {
        InputDomain D = run.domain(m.input_size());
        clip = std::make_pair(D.lower(), D.upper());
      }
      Certificate c = certify_robustness(g, x0, y, eps, parse_norm(robust_p), gamma, run.budget(), clip, run.engine());
      return run.certificate(c, {{"label", y}, {"eps", eps}, {"p", robust_p}});
    }
    if (*equiv_cmd) {
      NetworkModel a = run.model();
      std::ifstream probe_other(other);
      if (!probe_other) throw IoError("cannot open model '" + other + "'");
      NetworkModel b = load_model_file(other);
      SwtGraph ga = compile(a), gb = compile(b);
      InputDomain D = run.domain(a.input_size());
      return run.certificate(check_equivalence(ga, gb, D, eps, run.budget(), run.engine()));
    }
    if (*eqv_cmd) {
      NetworkModel m = run.model();
      InputDomain D = run.domain(m.input_size());
      EquivarianceProblem P;
      if (!shift.empty() == !perm.empty()) throw CLI::ValidationError("equivariance", "give exactly one of --shift or --perm");
      if (!shift.empty()) {
        WindowPolicy w = window == "exact" ? WindowPolicy::exact : window == "margin" ? WindowPolicy::margin : WindowPolicy::full;
        P = conv_shift(m, shift[0], shift[1], w);
      } else {
        P = gcn_permutation(m, perm);
      }
      return run.certificate(check_equivariance(m, P, D, eps, run.budget(), run.engine()), {{"problem", P.to_json()}});
    }
    if (*imax_cmd) {
      NetworkModel m = run.model();
      InputDomain D = run.domain(m.input_size());
      Intervention iv;
      if (!iv_file.empty()) {
        iv = Intervention::from_json(read_json(iv_file));
      } else {
        if (layer < 0) throw CLI::ValidationError("imax", "give --intervention FILE or --layer L --channel C");
        iv.at.layer = layer;
        iv.at.channel = channel;
      }
      ImaxResult r = imax(m, iv, D, run.budget(), run.engine());
      nlohmann::json j = r.to_json();
      j["intervention"] = iv.to_json();
      run.emit(j);
      run.say("Imax = " + std::to_string(r.value) + (r.exact ? " (exact)" : " (bracket up to " + std::to_string(r.hi) + ")"));
      return r.exact ? kOk : kUnknown;
    }
    if (*bench_cmd) {
      if (widths.size() < 2) throw CLI::ValidationError("--widths", "need at least two widths");
      std::mt19937_64 gen(cfg.seed);
      nlohmann::json rows = nlohmann::json::array();
      bool all_exhausted = false;
      for (size_t k = 0; k < nets; ++k) {
        NetworkModel m = random_net(widths, gen);
        SwtGraph g = compile(m);
        InputDomain D = run.domain(m.input_size());
        JitEngine E(g, D, run.budget(), run.engine());
        RefineOutcome o = E.refine_all();
        all_exhausted = all_exhausted || o.exhausted;
        Budget b = E.budget();
        size_t leaves = E.active_leaves().size();
        size_t denom = b.splits + b.new_guards + leaves;
        nlohmann::json row{{"net", k},
                           {"gates", g.gates.size()},
                           {"leaves", leaves},
                           {"splits", b.splits},
                           {"new_guards", b.new_guards},
                           {"lp_calls", b.lp_calls},
                           {"closed_form_calls", b.closed_form_calls},
                           {"library_planes", E.library().plane_count()},
                           {"initial_planes", E.initial_planes()},
                           {"exhausted", o.exhausted},
                           {"leaves_le_1_plus_splits", leaves <= 1 + b.splits},
                           {"library_le_initial_plus_new", E.library().plane_count() <= E.initial_planes() + b.new_guards},
                           {"c", denom ? double(b.lp_calls) / double(denom) : 0.0}};
        rows.push_back(row);
        run.say("net " + std::to_string(k) + ": leaves=" + std::to_string(leaves) + " splits=" + std::to_string(b.splits) +
                " lp_calls=" + std::to_string(b.lp_calls));
      }
      run.emit({{"widths", widths}, {"seed", cfg.seed}, {"runs", rows}});
      return all_exhausted ? kUnknown : kOk;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const SchemaError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModel;
  } catch (const ShapeError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModel;
  } catch (const UnsupportedLayer& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModel;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModel;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
