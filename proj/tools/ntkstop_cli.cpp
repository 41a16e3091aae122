#include "ntkstop/experiments.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace ntkstop;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitGate = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out;
  bool gate = false;
};

struct PointOptions {
  std::optional<Index> n;
  std::string kernel = "ntk";
};

ExperimentSpec load(const Globals& g, std::optional<Mode> mode) {
  json j = json::object();
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw ConfigError("cannot open config '" + g.config + "'");
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
  }
  if (mode) {
    if (j.contains("mode") && j["mode"] != to_string(*mode)) {
      throw ConfigError("config mode '" + j["mode"].dump() + "' does not match the subcommand");
    }
    j["mode"] = to_string(*mode);
  }
  if (g.seed) j["seed"] = *g.seed;
  return parse_spec(j);
}

std::ostream& open_output(const Globals& g, const std::string& name, std::ofstream& file) {
  if (g.out.empty()) return std::cout;
  fs::create_directories(g.out);
  file.open(fs::path(g.out) / name);
  if (!file) throw Error("cannot write '" + (fs::path(g.out) / name).string() + "'");
  return file;
}

void emit_summary(const Globals& g, const json& s) {
  std::ofstream file;
  open_output(g, "summary.json", file) << s.dump(2) << '\n';
}

PointSet training_points(const ExperimentSpec& spec, Index n) {
  return sample_sphere(n, spec.d, derive_seed(cell_seed(spec, n, 0), Stream::Data));
}

Gram point_gram(const ExperimentSpec& spec, const PointSet& x, const std::string& kernel) {
  if (kernel == "ntk") return gram(x, NtkKernel{});
  if (kernel == "kint") {
    return gram(x, IntegratedKernel(QuadratureSample::draw(spec.quadrature_size(x.size()), spec.d,
                                                           derive_seed(spec.seed, Stream::Quadrature))));
  }
  throw ConfigError("kernel must be 'ntk' or 'kint'");
}

int finish(const Globals& g, bool passed) {
  if (!passed) std::cerr << "one or more gates failed\n";
  return g.gate && !passed ? kExitGate : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Early-stopped GD and PGD for two-layer ReLU networks in the NTK regime"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--threads", g.threads, "Worker threads for grid cells")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--gate", g.gate, "Exit with status 3 when an acceptance gate fails");

  PointOptions pts;
  auto add_point_options = [&](CLI::App* cmd) {
    cmd->add_option("--n", pts.n, "Number of training points (default: first n_grid entry)");
    cmd->add_option("--kernel", pts.kernel, "ntk or kint")->check(CLI::IsMember({"ntk", "kint"}));
  };

  auto* kernel_gram = app.add_subcommand("kernel-gram", "Raw gram matrix of sampled points as CSV");
  add_point_options(kernel_gram);
  auto* spectrum_cmd = app.add_subcommand("spectrum", "Eigenvalues of the scaled gram");
  add_point_options(spectrum_cmd);
  std::vector<double> eps_values;
  auto* complexity_cmd = app.add_subcommand("complexity", "Kernel complexity and critical radius");
  add_point_options(complexity_cmd);
  complexity_cmd->add_option("--eps", eps_values, "Radii at which to evaluate R(eps)");
  std::optional<double> eta_opt;
  auto* stopping_cmd = app.add_subcommand("stopping-time", "Early-stopping time for sampled points");
  add_point_options(stopping_cmd);
  stopping_cmd->add_option("--eta", eta_opt, "Step size (default from eta_policy)");
  std::string train_opt = "GD";
  std::optional<std::int64_t> train_steps;
  auto* train_cmd = app.add_subcommand("train", "Train one network and print its residual trace");
  train_cmd->add_option("--n", pts.n, "Number of training points");
  train_cmd->add_option("--optimizer", train_opt, "GD or PGD")->check(CLI::IsMember({"GD", "PGD"}));
  train_cmd->add_option("--steps", train_steps, "Steps (default: the stopping time)");
  auto* sweep_cmd = app.add_subcommand("sweep-rates", "Risk-versus-n sweep with slope gates");
  auto* uniform_cmd = app.add_subcommand("check-uniform", "Uniform convergence of h-hat and v-hat in m");
  auto* dynamics_cmd = app.add_subcommand("check-dynamics", "Network versus kernel-oracle training dynamics");
  auto* spectrum_check_cmd = app.add_subcommand("check-spectrum", "Eigen-decay and integrated-kernel spectra");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*sweep_cmd) {
      const ExperimentSpec spec = load(g, Mode::RateSweep);
      fs::path partial;
      std::ofstream stream;
      if (!g.out.empty()) {
        fs::create_directories(g.out);
        partial = fs::path(g.out) / "results.csv.partial";
        stream.open(partial);
        stream << kCsvHeader << '\n';
      }
      const SweepReport report = run_rate_sweep(spec, g.threads, [&](const ResultRow& row) {
        std::cerr << row.optimizer << " n=" << row.n << " seed=" << row.seed << " risk=" << row.risk
                  << " " << row.status << '\n';
        if (stream.is_open()) stream << row.csv() << '\n' << std::flush;
      });
      if (!g.out.empty()) {
        stream.close();
        write_csv((fs::path(g.out) / "results.csv").string(), report.rows);
        fs::remove(partial);
      } else if (spec.output.empty()) {
        std::cout << kCsvHeader << '\n';
        for (const ResultRow& r : report.rows) std::cout << r.csv() << '\n';
      }
      if (!spec.output.empty()) write_csv(spec.output, report.rows);
      emit_summary(g, summary(spec, report));
      return finish(g, report.passed());
    }
    if (*uniform_cmd) {
      const ExperimentSpec spec = load(g, Mode::UniformConv);
      const UniformReport report = run_uniform_conv(spec, g.threads);
      if (!g.out.empty()) {
        std::ofstream file;
        std::ostream& os = open_output(g, "uniform.csv", file);
        os << "m,h_error,v_error,output_at_init\n";
        for (const UniformRow& r : report.rows) {
          os << r.m << ',' << format_double(r.h_error) << ',' << format_double(r.v_error) << ','
             << format_double(r.output_at_init) << '\n';
        }
      }
      emit_summary(g, summary(spec, report));
      return finish(g, report.passed());
    }
    if (*dynamics_cmd) {
      const ExperimentSpec spec = load(g, Mode::DynamicsCheck);
      const DynamicsReport report = run_dynamics_check(spec, g.threads);
      emit_summary(g, summary(spec, report));
      return finish(g, report.passed());
    }
    if (*spectrum_check_cmd) {
      const ExperimentSpec spec = load(g, Mode::SpectrumCheck);
      const SpectrumReport report = run_spectrum_check(spec);
      emit_summary(g, summary(spec, report));
      return finish(g, report.passed());
    }

    const ExperimentSpec spec = load(g, std::nullopt);
    const Index n = pts.n.value_or(spec.n_grid.front());
    if (n < 1) throw ConfigError("--n must be >= 1");
    const PointSet x = training_points(spec, n);

    if (*kernel_gram) {
      const Gram k = point_gram(spec, x, pts.kernel);
      std::ofstream file;
      std::ostream& os = open_output(g, "gram.csv", file);
      for (Index i = 0; i < k.size(); ++i) {
        for (Index j = 0; j < k.size(); ++j) os << (j ? "," : "") << format_double(k.matrix(i, j));
        os << '\n';
      }
      return kExitOk;
    }
    if (*spectrum_cmd) {
      const Spectrum s = eigen(point_gram(spec, x, pts.kernel));
      std::ofstream file;
      std::ostream& os = open_output(g, "spectrum.csv", file);
      os << "j,lambda\n";
      for (Index j = 0; j < s.size(); ++j) os << j + 1 << ',' << format_double(s[j]) << '\n';
      return kExitOk;
    }
    if (*complexity_cmd) {
      const ComplexityProfile profile(eigen(point_gram(spec, x, pts.kernel)), n, spec.sigma);
      json out{{"n", n}, {"sigma", spec.sigma}, {"kernel", pts.kernel}};
      json values = json::array();
      for (double e : eps_values) values.push_back({{"eps", e}, {"R", kernel_complexity(profile, e)}});
      out["complexity"] = values;
      out["critical_radius_squared"] = critical_radius(profile);
      emit_summary(g, out);
      return kExitOk;
    }
    if (*stopping_cmd) {
      const Spectrum s = eigen(point_gram(spec, x, pts.kernel));
      const ComplexityProfile profile(s, n, spec.sigma);
      const double eta = eta_opt.value_or(spec.eta_policy.kind == EtaPolicy::Kind::Fixed
                                              ? spec.eta_policy.value
                                              : spec.eta_policy.value / s.top());
      const StoppingTime st = stopping_time(profile, eta);
      emit_summary(g, json{{"n", n}, {"sigma", spec.sigma}, {"kernel", pts.kernel}, {"eta", eta},
                           {"T_hat", st.steps}, {"capped", st.capped},
                           {"critical_radius_squared", critical_radius(profile)}});
      return kExitOk;
    }
    if (*train_cmd) {
      const Arm arm{train_opt == "PGD" ? Method::Pgd : Method::Gd,
                    spec.target_space.value_or(train_opt == "PGD" ? TargetSpace::Integrated : TargetSpace::Ntk)};
      const std::uint64_t cell = cell_seed(spec, n, 0);
      std::shared_ptr<const QuadratureSample> fixed_q;
      if (arm.target == TargetSpace::Integrated) {
        fixed_q = std::make_shared<const QuadratureSample>(
            QuadratureSample::draw(spec.N_fix, spec.d, derive_seed(spec.seed, Stream::Quadrature)));
      }
      const TargetFunction target = make_target(arm.target, spec.k, spec.f0, spec.d, target_seed(spec, 0), fixed_q);
      const Dataset data = make_dataset(target, n, spec.sigma, cell);
      const NetworkState init = init_network(spec.m, spec.d, spec.kappa, derive_seed(cell, Stream::Init));
      std::optional<Preconditioner> pre;
      Gram k;
      if (arm.method == Method::Pgd) {
        const QuadratureSample q = QuadratureSample::draw(spec.quadrature_size(n), spec.d,
                                                          derive_seed(cell, Stream::Quadrature));
        pre.emplace(init, q);
        k = gram(data.x, IntegratedKernel(q));
      } else {
        k = gram(data.x, NtkKernel{});
      }
      const Spectrum s = eigen(k);
      TrainConfig cfg;
      cfg.optimizer = arm.method == Method::Pgd ? OptimizerKind::Preconditioned : OptimizerKind::GradientDescent;
      cfg.eta = spec.eta_policy.kind == EtaPolicy::Kind::Fixed ? spec.eta_policy.value
                                                               : spec.eta_policy.value / s.top();
      const StoppingTime st = stopping_time(ComplexityProfile(s, n, spec.sigma), cfg.eta);
      cfg.steps = train_steps.value_or(std::min(st.steps, spec.max_steps));
      cfg.stopping_time = st.steps;
      const TrainResult run = train(init, data.x, data.y, cfg, pre ? &*pre : nullptr);
      const RiskEstimate r = risk([&](const PointSet& t) { return forward(run.state, t); }, target,
                                  spec.n_test, derive_seed(cell, Stream::Test));
      {
        std::ofstream file;
        std::ostream& os = open_output(g, "trace.csv", file);
        os << "t,residual_norm\n";
        for (std::size_t t = 0; t < run.trace.residual_norms.size(); ++t) {
          os << t << ',' << format_double(run.trace.residual_norms[t]) << '\n';
        }
      }
      if (!g.out.empty()) {
        emit_summary(g, json{{"optimizer", arm.label()}, {"n", n}, {"m", spec.m}, {"eta", cfg.eta},
                             {"T_hat", st.steps}, {"T_used", run.trace.used_steps},
                             {"risk", r.risk}, {"risk_se", r.standard_error}});
      } else {
        std::cerr << arm.label() << " T_hat=" << st.steps << " T_used=" << run.trace.used_steps
                  << " risk=" << format_double(r.risk) << '\n';
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitOk;
}
