#include "avo/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "avo/io.hpp"
#include "avo/noise_model.hpp"
#include "avo/train.hpp"

namespace avo::cli {

namespace fs = std::filesystem;

namespace {

struct KeySpec {
  std::string name;
  std::string fallback;
  std::string help;
};

const std::vector<KeySpec>& fit_keys() {
  static const std::vector<KeySpec> keys{
      {"T", "10", "number of transition layers"},
      {"hidden", "32", "hidden width of each transition network"},
      {"steps", "2000", "optimisation steps"},
      {"batch", "64", "samples per step"},
      {"lr", "0.001", "Adam learning rate"},
      {"beta0", "0.01", "initial beta of the warm-up"},
      {"a", "0.5", "AVO probability in lc-avo mode"},
      {"checkpoint_every", "200", "steps between checkpoint evaluations"},
      {"checkpoint_n", "200", "outer samples per checkpoint estimate"},
      {"checkpoint_k", "20", "inner samples per checkpoint estimate"},
      {"final_n", "10000", "outer samples of the final estimate"},
      {"final_k", "2000", "inner samples of the final estimate"},
      {"mode_radius", "0.6", "radius used for mode coverage"},
      {"log_z", "", "known log normaliser (empty: estimate with AIS)"},
  };
  return keys;
}

std::vector<KeySpec> command_keys(const std::string& command) {
  std::vector<KeySpec> k;
  auto append = [&](const std::vector<KeySpec>& more) {
    k.insert(k.end(), more.begin(), more.end());
  };
  if (command == "fit-energy") {
    k = {{"target", "d", "a, b, c, d, e, f, four-mode or gaussian"},
         {"mode", "avo", "elbo, avo or lc-avo"},
         {"rho", "0", "fraction of training spent warming beta up"},
         {"seed", "0", "random seed"}};
    append(fit_keys());
    append({{"eval_threads", "1", "threads for the final estimate"},
            {"grid_n", "100", "density grid resolution"},
            {"grid_samples", "20000", "chain draws for the sample histogram"},
            {"out", "runs/fit-energy", "output directory"}});
  } else if (command == "sweep") {
    k = {{"targets", "a,b,c,d,e,f", "comma-separated targets"},
         {"modes", "elbo,avo", "comma-separated modes"},
         {"rho", "0,0.2,0.4,0.6,0.8", "comma-separated warm-up fractions"},
         {"trials", "10", "trials per cell"},
         {"seed_base", "0", "seed of cell 0; cell i uses seed_base + i"},
         {"threads", "0", "worker threads (0: AVO_THREADS or all cores)"}};
    append(fit_keys());
    append({{"out", "runs/sweep", "output directory"}});
  } else if (command == "fit-noise-model") {
    k = {{"variant", "iwae", "iwae, vae or avo"},
         {"n_data", "10000", "training points"},
         {"steps", "5000", "optimisation steps"},
         {"batch", "128", "data points per step"},
         {"lr", "0.001", "Adam learning rate"},
         {"seed", "0", "random seed"},
         {"noise_std", "0.1", "observation noise of the generating process"},
         {"decoder_hidden", "16", "hidden width of the decoder scale network"},
         {"encoder_hidden", "32", "hidden width of the VAE encoder"},
         {"T", "10", "transition layers of the AVO chain"},
         {"chain_hidden", "32", "hidden width of the AVO chain"},
         {"a", "0.5", "AVO probability of the loss-calibrated objective"},
         {"iwae_samples", "500", "importance samples per data point"},
         {"checkpoint_every", "500", "steps between objective records"},
         {"eval_samples", "10000", "posterior draws at x = (0, -1)"},
         {"reference_samples", "100000", "draws for the data histogram"},
         {"grid_n", "40", "density grid resolution"},
         {"out", "runs/noise-model", "output directory"}};
  } else if (command == "render") {
    k = {{"input", "", "grid CSV or metrics.csv"},
         {"kind", "grid", "grid (CSV to PGM) or curve (sweep mean/std vs rho)"},
         {"out", "", "output file (default: next to the input)"}};
  } else if (command == "eval") {
    k = {{"checkpoint", "", "chain checkpoint file"},
         {"target", "d", "target the chain was trained on"},
         {"n", "10000", "outer samples"},
         {"k", "2000", "inner samples"},
         {"seed", "0", "random seed"},
         {"threads", "1", "estimator threads"},
         {"log_z", "", "known log normaliser (empty: estimate with AIS)"},
         {"mode_radius", "0.6", "radius used for mode coverage"},
         {"out", "runs/eval", "output directory"}};
  } else {
    throw Error("unknown subcommand '" + command + "'");
  }
  return k;
}

const std::vector<std::string> kCommands{"fit-energy", "sweep", "fit-noise-model",
                                         "render", "eval"};

std::string command_help(const std::string& name) {
  if (name == "fit-energy") return "train a chain on one 2D energy";
  if (name == "sweep") return "beta warm-up sweep over energies, modes and rho";
  if (name == "fit-noise-model") return "fit the 1D-latent noise model with iwae, vae or avo";
  if (name == "render") return "grid CSV to PGM, or sweep metrics to curves.csv";
  return "evaluate a saved chain checkpoint";
}

// Typed access to the resolved key/value map.
class Resolved {
 public:
  explicit Resolved(KeyValues kv) : kv_(std::move(kv)) {}

  const std::string& str(const std::string& key) const { return kv_.at(key); }
  double num(const std::string& key) const {
    try {
      return parse_double(str(key));
    } catch (const Error&) {
      throw Error("--" + key + ": expected a number, got '" + str(key) + "'");
    }
  }
  std::size_t count(const std::string& key) const {
    long long v = 0;
    try {
      v = parse_int(str(key));
    } catch (const Error&) {
      throw Error("--" + key + ": expected an integer, got '" + str(key) + "'");
    }
    if (v < 0) throw Error(key + " must be >= 0");
    return static_cast<std::size_t>(v);
  }
  std::uint64_t seed(const std::string& key) const {
    return static_cast<std::uint64_t>(count(key));
  }
  std::optional<double> maybe(const std::string& key) const {
    if (trim(str(key)).empty()) return std::nullopt;
    return num(key);
  }
  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& s : split(str(key), ',')) {
      const auto t = trim(s);
      if (!t.empty()) out.emplace_back(t);
    }
    if (out.empty()) throw Error("--" + key + ": empty list");
    return out;
  }

 private:
  KeyValues kv_;
};

fs::path prepare_dir(const std::string& dir) {
  if (dir.empty()) throw Error("--out: empty output directory");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw Error("cannot create output directory '" + dir + "'");
  }
  return fs::path(dir);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  return os;
}

void write_resolved(const fs::path& dir, const std::string& command,
                    const std::vector<KeySpec>& keys, const KeyValues& kv) {
  auto os = open_out(dir / "config.resolved");
  os << "# avo " << command << "\n";
  for (const auto& k : keys) os << k.name << "=" << kv.at(k.name) << "\n";
}

template <class G>
void write_grid(const fs::path& dir, const std::string& stem, const G& g) {
  auto os = open_out(dir / (stem + ".csv"));
  write_csv(g, os);
  if constexpr (std::is_same_v<G, Grid2D>) {
    auto pgm = open_out(dir / (stem + ".pgm"));
    write_pgm(g, pgm);
  }
}

FitConfig fit_config(const Resolved& r) {
  FitConfig c;
  c.T = r.count("T");
  c.hidden = r.count("hidden");
  c.steps = r.count("steps");
  c.batch = r.count("batch");
  c.lr = r.num("lr");
  c.beta0 = r.num("beta0");
  c.a = r.num("a");
  c.checkpoint_every = r.count("checkpoint_every");
  c.checkpoint_n = r.count("checkpoint_n");
  c.checkpoint_k = r.count("checkpoint_k");
  c.final_n = r.count("final_n");
  c.final_k = r.count("final_k");
  c.mode_radius = r.num("mode_radius");
  c.log_z = r.maybe("log_z");
  return c;
}

int cmd_fit_energy(const Resolved& r, std::ostream& out) {
  FitConfig c = fit_config(r);
  c.mode = parse_loss_mode(r.str("mode"));
  c.rho = r.num("rho");
  c.seed = r.seed("seed");
  c.eval_threads = std::max<std::size_t>(1, r.count("eval_threads"));
  const std::size_t grid_n = r.count("grid_n");
  const std::size_t grid_samples = r.count("grid_samples");
  if (grid_n < 2) throw Error("grid_n must be >= 2");
  if (grid_samples < 1) throw Error("grid_samples must be >= 1");
  const EnergySpec target = EnergySpec::from_name(r.str("target"));
  c.validate();
  const fs::path dir = prepare_dir(r.str("out"));

  ExperimentResult res = fit_energy(target, c);
  {
    auto os = open_out(dir / "metrics.csv");
    write_metrics_header(os);
    write_metrics_rows(os, r.str("target"), loss_mode_name(c.mode), c.rho, 0, res.series);
  }
  {
    auto os = open_out(dir / "summary.csv");
    write_summary_csv(os, {{r.str("target"), c.mode, c.rho, 1, res.final.negative_kl, 0.0}});
  }
  {
    auto os = open_out(dir / "checkpoint.txt");
    save_checkpoint(res.chain, os);
  }
  if (target.dim() == 2) {
    const Bounds2D b;
    write_grid(dir, "target_density", density_grid(target, b, grid_n, grid_n));
    Rng grid_rng = Rng(c.seed).split(5);
    write_grid(dir, "chain_density",
               density_grid(res.chain, b, grid_n, grid_n, grid_samples, grid_rng));
  }
  out << "final_neg_kl=" << format_double(res.final.negative_kl)
      << " log_z=" << format_double(res.final.log_z) << "\n";
  return kExitOk;
}

int cmd_sweep(const Resolved& r, std::ostream& out) {
  SweepConfig s;
  s.fit = fit_config(r);
  s.targets = r.list("targets");
  s.modes.clear();
  for (const auto& m : r.list("modes")) {
    const LossMode mode = parse_loss_mode(m);
    if (mode != LossMode::Elbo && mode != LossMode::Avo && mode != LossMode::LossCalibrated) {
      throw Error("sweep: modes must be elbo, avo or lc-avo");
    }
    s.modes.push_back(mode);
  }
  s.rhos.clear();
  for (const auto& v : r.list("rho")) s.rhos.push_back(parse_double(v));
  s.trials = r.count("trials");
  s.seed_base = r.seed("seed_base");
  s.threads = r.count("threads");
  s.validate();
  const fs::path dir = prepare_dir(r.str("out"));

  std::size_t done = 0;
  const SweepResult res = robustness_sweep(s, [&](const SweepCell& c) {
    ++done;
    out << "[" << done << "] " << c.target << " " << loss_mode_name(c.mode) << " rho="
        << format_double(c.rho) << " trial=" << c.trial
        << (c.ok ? " neg_kl=" + format_double(c.final.negative_kl) : " failed: " + c.error)
        << "\n";
  });
  {
    auto os = open_out(dir / "metrics.csv");
    write_metrics_header(os);
    for (const auto& c : res.cells) {
      if (c.ok) {
        write_metrics_rows(os, c.target, loss_mode_name(c.mode), c.rho, c.trial, c.series);
      }
    }
  }
  {
    auto os = open_out(dir / "summary.csv");
    write_summary_csv(os, res.summary);
  }
  {
    auto os = open_out(dir / "log_z.csv");
    os << "target,log_z\n";
    for (const auto& [t, lz] : res.log_z) os << t << ',' << format_double(lz) << '\n';
  }
  return kExitOk;
}

int cmd_fit_noise_model(const Resolved& r, std::ostream& out) {
  NoiseModelConfig c;
  c.variant = parse_noise_variant(r.str("variant"));
  c.n_data = r.count("n_data");
  c.steps = r.count("steps");
  c.batch = r.count("batch");
  c.lr = r.num("lr");
  c.seed = r.seed("seed");
  c.noise_std = r.num("noise_std");
  c.decoder_hidden = r.count("decoder_hidden");
  c.encoder_hidden = r.count("encoder_hidden");
  c.T = r.count("T");
  c.chain_hidden = r.count("chain_hidden");
  c.a = r.num("a");
  c.iwae_samples = r.count("iwae_samples");
  c.checkpoint_every = r.count("checkpoint_every");
  c.eval_samples = r.count("eval_samples");
  c.reference_samples = r.count("reference_samples");
  c.grid_n = r.count("grid_n");
  c.validate();
  const fs::path dir = prepare_dir(r.str("out"));

  const NoiseModelResult res = fit_noise_model(c);
  const std::string variant = noise_variant_name(c.variant);
  {
    auto os = open_out(dir / "metrics.csv");
    write_metrics_header(os);
    write_metrics_rows(os, "noise-model", variant, 0.0, 0, res.series);
    write_metrics_rows(os, "noise-model", variant, 0.0, 0, res.final);
  }
  {
    auto os = open_out(dir / "summary.csv");
    os << "variant,metric,value\n";
    for (const auto& m : res.final) {
      os << variant << ',' << m.metric << ',' << format_double(m.value) << '\n';
    }
  }
  write_grid(dir, "data_histogram", res.data_histogram);
  write_grid(dir, "learned_density", res.learned_density);
  write_grid(dir, "true_posterior", res.true_posterior);
  write_grid(dir, "model_posterior", res.model_posterior);
  write_grid(dir, "q_posterior", res.q_posterior);
  out << "tv_to_data=" << format_double(res.metric("tv_to_data"))
      << " q_tail_low=" << format_double(res.metric("q_tail_low"))
      << " q_tail_high=" << format_double(res.metric("q_tail_high")) << "\n";
  return kExitOk;
}

struct CurveRow {
  std::string target, mode, rho;
  std::vector<double> values;
};

int cmd_render(const Resolved& r, std::ostream& out) {
  const std::string input = r.str("input");
  if (input.empty()) throw Error("--input is required");
  std::ifstream is(input);
  if (!is) throw Error("cannot read '" + input + "'");
  const std::string kind = r.str("kind");
  if (kind == "grid") {
    const Grid2D g = read_grid_csv(is);
    fs::path dest = r.str("out").empty() ? fs::path(input).replace_extension(".pgm")
                                         : fs::path(r.str("out"));
    auto os = open_out(dest);
    write_pgm(g, os);
    out << "wrote " << dest.string() << "\n";
    return kExitOk;
  }
  if (kind != "curve") throw Error("--kind must be grid or curve");

  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) throw Error(input + ": empty metrics file");
  ++lineno;
  if (trim(line) != "target,mode,rho,trial,step,metric,value") {
    throw Error(input + ":1: unexpected header");
  }
  std::vector<CurveRow> rows;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 7) {
      throw Error(input + ":" + std::to_string(lineno) + ": expected 7 fields");
    }
    double value = 0.0;
    try {
      parse_double(f[2]);
      parse_int(f[3]);
      parse_int(f[4]);
      value = parse_double(f[6]);
    } catch (const Error& e) {
      throw Error(input + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (f[5] != "final_neg_kl") continue;
    auto it = std::find_if(rows.begin(), rows.end(), [&](const CurveRow& c) {
      return c.target == f[0] && c.mode == f[1] && c.rho == f[2];
    });
    if (it == rows.end()) {
      rows.push_back({f[0], f[1], f[2], {}});
      it = rows.end() - 1;
    }
    it->values.push_back(value);
  }
  if (rows.empty()) throw Error(input + ": no final_neg_kl rows");
  fs::path dest = r.str("out").empty() ? fs::path(input).parent_path() / "curves.csv"
                                       : fs::path(r.str("out"));
  auto os = open_out(dest);
  os << "target,mode,rho,n,mean_neg_kl,std_neg_kl\n";
  for (const auto& c : rows) {
    const double n = static_cast<double>(c.values.size());
    double mean = 0.0;
    for (double v : c.values) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : c.values) ss += (v - mean) * (v - mean);
    const double sd = c.values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    os << c.target << ',' << c.mode << ',' << c.rho << ',' << c.values.size() << ','
       << format_double(mean) << ',' << format_double(sd) << '\n';
  }
  out << "wrote " << dest.string() << " (" << rows.size() << " rows)\n";
  return kExitOk;
}

int cmd_eval(const Resolved& r, std::ostream& out) {
  const std::string path = r.str("checkpoint");
  if (path.empty()) throw Error("--checkpoint is required");
  std::ifstream is(path);
  if (!is) throw Error("cannot read '" + path + "'");
  const HierarchicalChain chain = load_checkpoint(is);
  const EnergySpec target = EnergySpec::from_name(r.str("target"));
  if (chain.config().amortized || chain.config().latent_dim != target.dim()) {
    throw Error("checkpoint does not match target '" + r.str("target") + "'");
  }
  FitConfig c;
  c.final_n = r.count("n");
  c.final_k = r.count("k");
  c.eval_threads = std::max<std::size_t>(1, r.count("threads"));
  c.log_z = r.maybe("log_z");
  c.mode_radius = r.num("mode_radius");
  c.seed = r.seed("seed");
  c.validate();
  const fs::path dir = prepare_dir(r.str("out"));
  Rng rng = Rng(c.seed).split(2);
  const EvalReport rep = evaluate_chain(chain, target, c, rng);
  auto os = open_out(dir / "metrics.csv");
  write_metrics_header(os);
  write_metrics_rows(os, r.str("target"), "eval", 0.0, 0, report_metrics(rep, 0));
  out << "final_neg_kl=" << format_double(rep.negative_kl)
      << " se=" << format_double(rep.negative_kl_std_error) << "\n";
  return kExitOk;
}

}  // namespace

KeyValues parse_config(std::istream& is) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw Error("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key(trim(t.substr(0, eq)));
    if (key.empty()) throw Error("config line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, std::string(trim(t.substr(eq + 1)))).second) {
      throw Error("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return kv;
}

std::vector<std::string> known_keys(const std::string& command) {
  std::vector<std::string> out;
  for (const auto& k : command_keys(command)) out.push_back(k.name);
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Annealed variational objectives: experiments and evaluation", "avo"};
  app.require_subcommand(1);
  struct Sub {
    CLI::App* app;
    std::vector<KeySpec> keys;
    std::map<std::string, std::string> flags;
    std::string config;
  };
  std::vector<Sub> subs;
  subs.reserve(kCommands.size());
  for (const auto& name : kCommands) {
    subs.push_back({app.add_subcommand(name, command_help(name)), command_keys(name), {}, {}});
  }
  for (auto& s : subs) {
    for (const auto& k : s.keys) {
      std::string help = k.help;
      if (!k.fallback.empty()) help += " [" + k.fallback + "]";
      s.app->add_option("--" + k.name, s.flags[k.name], help);
    }
    s.app->add_option("--config", s.config, "flat key=value file; flags override it");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitInvalid;
  }

  for (auto& s : subs) {
    if (!s.app->parsed()) continue;
    const std::string command = s.app->get_name();
    try {
      KeyValues kv;
      for (const auto& k : s.keys) kv[k.name] = k.fallback;
      if (!s.config.empty()) {
        std::ifstream is(s.config);
        if (!is) throw Error("cannot read config file '" + s.config + "'");
        for (const auto& [key, value] : parse_config(is)) {
          if (!kv.count(key)) {
            throw Error("unknown key '" + key + "' in " + s.config + " for " + command);
          }
          kv[key] = value;
        }
      }
      for (const auto& k : s.keys) {
        if (s.app->count("--" + k.name) > 0) kv[k.name] = s.flags[k.name];
      }
      const Resolved r(kv);
      int code = kExitOk;
      if (command == "fit-energy") {
        code = cmd_fit_energy(r, out);
      } else if (command == "sweep") {
        code = cmd_sweep(r, out);
      } else if (command == "fit-noise-model") {
        code = cmd_fit_noise_model(r, out);
      } else if (command == "render") {
        return cmd_render(r, out);
      } else {
        code = cmd_eval(r, out);
      }
      write_resolved(fs::path(kv.at("out")), command, s.keys, kv);
      return code;
    } catch (const DivergenceError& e) {
      err << "divergence: " << e.what() << "\n";
      return kExitDivergence;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitInvalid;
    }
  }
  return kExitInvalid;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace avo::cli
