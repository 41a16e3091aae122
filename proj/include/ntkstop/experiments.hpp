#pragma once

// Batch experiments: rate sweeps over n, uniform convergence in m, training
// dynamics against the kernel oracle, and gram spectrum checks.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ntkstop/data.hpp"
#include "ntkstop/errors.hpp"
#include "ntkstop/kernel.hpp"
#include "ntkstop/network.hpp"
#include "ntkstop/optimizers.hpp"
#include "ntkstop/rng.hpp"
#include "ntkstop/spectral.hpp"

namespace ntkstop {

using json = nlohmann::json;

enum class Mode { RateSweep, UniformConv, DynamicsCheck, SpectrumCheck };

inline std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::RateSweep: return "rate_sweep";
    case Mode::UniformConv: return "uniform_conv";
    case Mode::DynamicsCheck: return "dynamics_check";
    case Mode::SpectrumCheck: return "spectrum_check";
  }
  return "?";
}

enum class Method { Oracle, Gd, Pgd };

inline std::string to_string(Method method) {
  switch (method) {
    case Method::Oracle: return "oracle";
    case Method::Gd: return "GD";
    case Method::Pgd: return "PGD";
  }
  return "?";
}

/// One series of a rate sweep: a learner paired with a target space.
struct Arm {
  Method method = Method::Oracle;
  TargetSpace target = TargetSpace::Ntk;

  std::string label() const { return to_string(method) + "/" + to_string(target); }
  friend bool operator==(const Arm&, const Arm&) = default;
};

struct EtaPolicy {
  enum class Kind { Fraction, Fixed };
  Kind kind = Kind::Fraction;  // Fraction: eta = value / lambda_1
  double value = 0.9;
};

struct ExperimentSpec {
  Mode mode = Mode::RateSweep;
  Index d = 3;
  std::vector<Index> n_grid{64, 128, 256, 512, 1024, 2048};
  Index m = Index{1} << 14;
  Index N = 0;  // PGD quadrature size; 0 means 10 n
  Index N_fix = 4096;
  double sigma = 0.25;
  double f0 = 2.0;
  Index k = 20;
  double kappa = 1.0;
  std::optional<TargetSpace> target_space;  // empty: per-method default
  std::vector<Method> optimizer{Method::Gd, Method::Pgd};
  int seeds = 5;
  EtaPolicy eta_policy;
  Index n_test = 2000;
  bool window = false;
  std::int64_t max_steps = 100000;
  std::vector<Index> m_grid{1024, 2048, 4096, 8192, 16384, 32768, 65536};
  Index grid_points = 200;
  double band_radius = 0.01;
  std::uint64_t seed = 0;
  std::string output;

  Index quadrature_size(Index n) const { return N > 0 ? N : 10 * n; }
};

namespace detail {

inline const std::set<std::string>& spec_keys() {
  static const std::set<std::string> keys{
      "mode", "d", "n_grid", "m", "N", "N_fix", "sigma", "f0", "k", "kappa",
      "target_space", "optimizer", "seeds", "eta_policy", "n_test", "window", "max_steps",
      "m_grid", "grid_points", "band_radius", "seed", "output"};
  return keys;
}

inline Mode parse_mode(const std::string& s) {
  if (s == "rate_sweep") return Mode::RateSweep;
  if (s == "uniform_conv") return Mode::UniformConv;
  if (s == "dynamics_check") return Mode::DynamicsCheck;
  if (s == "spectrum_check") return Mode::SpectrumCheck;
  throw ConfigError("unknown mode '" + s + "'");
}

inline std::optional<TargetSpace> parse_target(const std::string& s) {
  if (s == "auto") return std::nullopt;
  if (s == "H_K") return TargetSpace::Ntk;
  if (s == "H_Kint") return TargetSpace::Integrated;
  throw ConfigError("unknown target_space '" + s + "'");
}

inline Method parse_method(const std::string& s) {
  if (s == "oracle") return Method::Oracle;
  if (s == "GD") return Method::Gd;
  if (s == "PGD") return Method::Pgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

template <class T>
T get(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

/// Defaults that differ by mode, applied before user keys.
inline ExperimentSpec default_spec(Mode mode) {
  ExperimentSpec spec;
  spec.mode = mode;
  switch (mode) {
    case Mode::RateSweep:
      break;
    case Mode::UniformConv:
      spec.seeds = 1;
      break;
    case Mode::DynamicsCheck:
      spec.n_grid = {128};
      spec.m = Index{1} << 15;
      spec.seeds = 1;
      break;
    case Mode::SpectrumCheck:
      spec.n_grid = {128, 512, 2000};
      spec.seeds = 1;
      break;
  }
  return spec;
}

inline void validate(const ExperimentSpec& s) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (s.d < 2) fail("d must be >= 2");
  if (s.n_grid.empty()) fail("n_grid must be nonempty");
  for (std::size_t i = 0; i < s.n_grid.size(); ++i) {
    if (s.n_grid[i] < 1) fail("n_grid entries must be >= 1");
    if (i > 0 && s.n_grid[i] <= s.n_grid[i - 1]) fail("n_grid must be strictly increasing");
  }
  if (s.m < 2 || s.m % 2 != 0) fail("m must be a positive even integer");
  if (s.N < 0) fail("N must be >= 0");
  if (s.N_fix < 1) fail("N_fix must be >= 1");
  if (!(s.sigma >= 0.0)) fail("sigma must be >= 0");
  if (!(s.f0 > 0.0)) fail("f0 must be > 0");
  if (s.k < 1) fail("k must be >= 1");
  if (!(s.kappa > 0.0 && s.kappa <= 1.0)) fail("kappa must lie in (0, 1]");
  if (s.optimizer.empty()) fail("optimizer list must be nonempty");
  if (s.seeds < 1) fail("seeds must be >= 1");
  if (s.mode == Mode::RateSweep && s.seeds < 3) fail("rate sweeps need seeds >= 3");
  if (!(s.eta_policy.value > 0.0)) fail("eta_policy value must be > 0");
  if (s.n_test < 1) fail("n_test must be >= 1");
  if (s.max_steps < 0) fail("max_steps must be >= 0");
  if (s.m_grid.empty()) fail("m_grid must be nonempty");
  for (std::size_t i = 0; i < s.m_grid.size(); ++i) {
    if (s.m_grid[i] < 2 || s.m_grid[i] % 2 != 0) fail("m_grid entries must be even");
    if (i > 0 && s.m_grid[i] <= s.m_grid[i - 1]) fail("m_grid must be strictly increasing");
  }
  if (s.grid_points < 2) fail("grid_points must be >= 2");
  if (!(s.band_radius >= 0.0)) fail("band_radius must be >= 0");
}

/// Parses a config object. Unknown keys are rejected.
inline ExperimentSpec parse_spec(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& item : j.items()) {
    if (!detail::spec_keys().count(item.key())) throw ConfigError("unknown key '" + item.key() + "'");
  }
  using detail::get;
  ExperimentSpec s = default_spec(
      j.contains("mode") ? detail::parse_mode(get<std::string>(j, "mode")) : Mode::RateSweep);
  if (j.contains("d")) s.d = get<Index>(j, "d");
  if (j.contains("n_grid")) s.n_grid = get<std::vector<Index>>(j, "n_grid");
  if (j.contains("m")) s.m = get<Index>(j, "m");
  if (j.contains("N")) s.N = get<Index>(j, "N");
  if (j.contains("N_fix")) s.N_fix = get<Index>(j, "N_fix");
  if (j.contains("sigma")) s.sigma = get<double>(j, "sigma");
  if (j.contains("f0")) s.f0 = get<double>(j, "f0");
  if (j.contains("k")) s.k = get<Index>(j, "k");
  if (j.contains("kappa")) s.kappa = get<double>(j, "kappa");
  if (j.contains("target_space")) s.target_space = detail::parse_target(get<std::string>(j, "target_space"));
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    s.optimizer.clear();
    if (o.is_string()) {
      s.optimizer.push_back(detail::parse_method(o.get<std::string>()));
    } else if (o.is_array()) {
      for (const auto& e : o) {
        if (!e.is_string()) throw ConfigError("optimizer entries must be strings");
        s.optimizer.push_back(detail::parse_method(e.get<std::string>()));
      }
    } else {
      throw ConfigError("optimizer must be a string or an array");
    }
  }
  if (j.contains("seeds")) s.seeds = get<int>(j, "seeds");
  if (j.contains("eta_policy")) {
    const json& e = j.at("eta_policy");
    if (e.is_string() && e.get<std::string>() == "auto") {
      s.eta_policy = EtaPolicy{};
    } else if (e.is_object() && e.size() == 1 && e.contains("fraction")) {
      s.eta_policy = EtaPolicy{EtaPolicy::Kind::Fraction, get<double>(e, "fraction")};
    } else if (e.is_object() && e.size() == 1 && e.contains("fixed")) {
      s.eta_policy = EtaPolicy{EtaPolicy::Kind::Fixed, get<double>(e, "fixed")};
    } else {
      throw ConfigError("eta_policy must be \"auto\", {\"fraction\": x} or {\"fixed\": x}");
    }
  }
  if (j.contains("n_test")) s.n_test = get<Index>(j, "n_test");
  if (j.contains("window")) s.window = get<bool>(j, "window");
  if (j.contains("max_steps")) s.max_steps = get<std::int64_t>(j, "max_steps");
  if (j.contains("m_grid")) s.m_grid = get<std::vector<Index>>(j, "m_grid");
  if (j.contains("grid_points")) s.grid_points = get<Index>(j, "grid_points");
  if (j.contains("band_radius")) s.band_radius = get<double>(j, "band_radius");
  if (j.contains("seed")) s.seed = get<std::uint64_t>(j, "seed");
  if (j.contains("output")) s.output = get<std::string>(j, "output");
  validate(s);
  return s;
}

inline ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_spec(j);
}

inline json to_json(const ExperimentSpec& s) {
  json j;
  j["mode"] = to_string(s.mode);
  j["d"] = s.d;
  j["n_grid"] = s.n_grid;
  j["m"] = s.m;
  j["N"] = s.N;
  j["N_fix"] = s.N_fix;
  j["sigma"] = s.sigma;
  j["f0"] = s.f0;
  j["k"] = s.k;
  j["kappa"] = s.kappa;
  j["target_space"] = s.target_space ? to_string(*s.target_space) : "auto";
  json opt = json::array();
  for (Method m : s.optimizer) opt.push_back(to_string(m));
  j["optimizer"] = opt;
  j["seeds"] = s.seeds;
  if (s.eta_policy.kind == EtaPolicy::Kind::Fraction) {
    j["eta_policy"] = {{"fraction", s.eta_policy.value}};
  } else {
    j["eta_policy"] = {{"fixed", s.eta_policy.value}};
  }
  j["n_test"] = s.n_test;
  j["window"] = s.window;
  j["max_steps"] = s.max_steps;
  j["m_grid"] = s.m_grid;
  j["grid_points"] = s.grid_points;
  j["band_radius"] = s.band_radius;
  j["seed"] = s.seed;
  return j;
}

/// FNV-1a over the canonical JSON of the spec (output path excluded).
inline std::string spec_hash(const ExperimentSpec& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : to_json(s).dump()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Series run by a rate sweep. Without an explicit target space, GD and the
/// oracle run on H_K, PGD on H_Kint, and GD also on H_Kint when PGD is
/// present so the two learners can be compared on the same target.
inline std::vector<Arm> sweep_arms(const ExperimentSpec& s) {
  std::vector<Arm> arms;
  auto add = [&](Arm a) {
    if (std::find(arms.begin(), arms.end(), a) == arms.end()) arms.push_back(a);
  };
  const bool has_pgd = std::count(s.optimizer.begin(), s.optimizer.end(), Method::Pgd) > 0;
  for (Method m : s.optimizer) {
    if (s.target_space) {
      add({m, *s.target_space});
      continue;
    }
    switch (m) {
      case Method::Oracle:
        add({m, TargetSpace::Ntk});
        add({m, TargetSpace::Integrated});
        break;
      case Method::Gd:
        add({m, TargetSpace::Ntk});
        if (has_pgd) add({m, TargetSpace::Integrated});
        break;
      case Method::Pgd:
        add({m, TargetSpace::Integrated});
        break;
    }
  }
  return arms;
}

/// Minimax exponent for early stopping with kernel K (H_K) or K^int
/// (H_Kint) when lambda_j ~ j^{-d/(d-1)}.
inline double rate_exponent(TargetSpace space, Index d) {
  const double two_alpha = static_cast<double>(d) / static_cast<double>(d - 1);
  const double a = space == TargetSpace::Ntk ? two_alpha : 2.0 * two_alpha;
  return a / (a + 1.0);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kCsvHeader =
    "mode,n,seed,optimizer,T_hat,T_used,eta,risk,risk_se,wall_ms,status";

struct ResultRow {
  std::string mode;
  Index n = 0;
  int seed = 0;
  std::string optimizer;
  std::int64_t t_hat = -1;
  std::int64_t t_used = -1;
  double eta = std::numeric_limits<double>::quiet_NaN();
  double risk = std::numeric_limits<double>::quiet_NaN();
  double risk_se = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
  std::string status = "ok";

  bool ok() const { return status == "ok" || status == "capped"; }

  std::string csv() const {
    std::ostringstream o;
    o << mode << ',' << n << ',' << seed << ',' << optimizer << ',' << t_hat << ',' << t_used
      << ',' << format_double(eta) << ',' << format_double(risk) << ',' << format_double(risk_se)
      << ',' << format_double(wall_ms) << ',' << status;
    return o.str();
  }
};

namespace detail {

inline std::string error_status(const std::exception& e) {
  std::string name = "Error";
  if (dynamic_cast<const NonFiniteResidual*>(&e)) name = "NonFiniteResidual";
  else if (dynamic_cast<const StepSizeTooLarge*>(&e)) name = "StepSizeTooLarge";
  else if (dynamic_cast<const BracketFailure*>(&e)) name = "BracketFailure";
  else if (dynamic_cast<const NotPSD*>(&e)) name = "NotPSD";
  else if (dynamic_cast<const DuplicatePoints*>(&e)) name = "DuplicatePoints";
  else if (dynamic_cast<const SingularGram*>(&e)) name = "SingularGram";
  else if (!dynamic_cast<const Error*>(&e)) name = "Exception";
  return "error:" + name;
}

inline double step_size(const EtaPolicy& policy, double top_eigenvalue) {
  return policy.kind == EtaPolicy::Kind::Fixed ? policy.value : policy.value / top_eigenvalue;
}

inline std::shared_ptr<const QuadratureSample> fixed_quadrature(const ExperimentSpec& s) {
  return std::make_shared<const QuadratureSample>(
      QuadratureSample::draw(s.N_fix, s.d, derive_seed(s.seed, Stream::Quadrature)));
}

/// Runs fn(i) for i in [0, count) on `threads` workers.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  }
}

}  // namespace detail

inline std::uint64_t cell_seed(const ExperimentSpec& s, Index n, int seed_index) {
  return derive_seed(s.seed, {static_cast<std::uint64_t>(Stream::Grid), static_cast<std::uint64_t>(n),
                              static_cast<std::uint64_t>(seed_index)});
}

inline std::uint64_t target_seed(const ExperimentSpec& s, int seed_index) {
  return derive_seed(s.seed, Stream::Target, static_cast<std::uint64_t>(seed_index));
}

struct CellResult {
  ResultRow row;
  std::optional<double> window_min_risk;  // min risk over [T_used/2, T_used]
};

/// One (arm, n, seed) cell of a rate sweep. Depends only on its arguments.
inline CellResult run_cell(const ExperimentSpec& s, const Arm& arm, Index n, int seed_index,
                           std::shared_ptr<const QuadratureSample> fixed_q = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  CellResult out;
  ResultRow& row = out.row;
  row.mode = to_string(Mode::RateSweep);
  row.n = n;
  row.seed = seed_index;
  row.optimizer = arm.label();
  try {
    if (!fixed_q) fixed_q = detail::fixed_quadrature(s);
    const std::uint64_t cell = cell_seed(s, n, seed_index);
    const TargetFunction target = make_target(arm.target, s.k, s.f0, s.d, target_seed(s, seed_index),
                                              arm.target == TargetSpace::Integrated ? fixed_q : nullptr);
    const Dataset data = make_dataset(target, n, s.sigma, cell);
    const std::uint64_t test_seed = derive_seed(cell, Stream::Test);

    // Learner kernel: K for GD, K-hat-int over a fresh Q for PGD, the target's
    // own kernel for the oracle.
    std::optional<QuadratureSample> pgd_q;
    Gram g;
    if (arm.method == Method::Pgd) {
      pgd_q = QuadratureSample::draw(s.quadrature_size(n), s.d, derive_seed(cell, Stream::Quadrature));
      g = gram(data.x, IntegratedKernel(*pgd_q));
    } else if (arm.method == Method::Oracle && arm.target == TargetSpace::Integrated) {
      g = gram(data.x, IntegratedKernel(fixed_q));
    } else {
      g = gram(data.x, NtkKernel{});
    }
    const Spectrum spectrum = eigen(g);
    const ComplexityProfile profile(spectrum, n, s.sigma);
    row.eta = detail::step_size(s.eta_policy, spectrum.top());
    const StoppingTime st = stopping_time(profile, row.eta);
    row.t_hat = st.steps;
    row.t_used = std::min(st.steps, s.max_steps);
    const bool capped = st.capped || st.steps > s.max_steps;
    const std::int64_t window_from = (row.t_used + 1) / 2;

    RiskEstimate r;
    if (arm.method == Method::Oracle) {
      if (row.eta * spectrum.top() >= 1.0) {
        throw StepSizeTooLarge("eta * lambda_1 = " + format_double(row.eta * spectrum.top()));
      }
      const PointSet test = sample_sphere(s.n_test, s.d, derive_seed(test_seed, Stream::Test));
      Eigen::MatrixXd test_cross;
      if (arm.target == TargetSpace::Integrated) {
        const IntegratedKernel kint(fixed_q);
        test_cross = kint.feature_map(test) * kint.feature_map(data.x).transpose();
      } else {
        test_cross = ntk_cross(test, data.x);
      }
      const Eigen::VectorXd truth = target(test);
      auto risk_of = [&](const Eigen::VectorXd& coef) {
        const Eigen::ArrayXd sq = (test_cross * coef - truth).array().square();
        RiskEstimate e;
        e.samples = s.n_test;
        e.risk = sq.mean();
        if (s.n_test > 1) {
          e.standard_error = std::sqrt((sq - e.risk).square().sum() / double(s.n_test - 1) / double(s.n_test));
        }
        return e;
      };
      std::optional<double> best;
      const KernelGdFit fit = kernel_gd_fit(g, data.y, row.eta, row.t_used,
                                            [&](std::int64_t t, const KernelGdFit& f) {
                                              if (!s.window || t < window_from || t == row.t_used) return;
                                              const double v = risk_of(f.coefficients).risk;
                                              best = best ? std::min(*best, v) : v;
                                            });
      if (!fit.fitted.allFinite()) throw NonFiniteResidual(row.t_used);
      r = risk_of(fit.coefficients);
      if (s.window) out.window_min_risk = best ? std::min(*best, r.risk) : r.risk;
    } else {
      const NetworkState init = init_network(s.m, s.d, s.kappa, derive_seed(cell, Stream::Init));
      std::optional<Preconditioner> pre;
      if (arm.method == Method::Pgd) pre.emplace(init, *pgd_q);
      TrainConfig cfg;
      cfg.optimizer = arm.method == Method::Pgd ? OptimizerKind::Preconditioned : OptimizerKind::GradientDescent;
      cfg.eta = row.eta;
      cfg.steps = row.t_used;
      if (s.window) {
        for (std::int64_t t = window_from; t < row.t_used; ++t) cfg.snapshot_steps.push_back(t);
      }
      const TrainResult run = train(init, data.x, data.y, cfg, pre ? &*pre : nullptr);
      r = risk([&](const PointSet& x) { return forward(run.state, x); }, target, s.n_test, test_seed);
      if (s.window) {
        double best = r.risk;
        for (const Snapshot& snap : run.trace.snapshots) {
          const NetworkState at(snap.weights, init.signs(), init.kappa());
          best = std::min(best, risk([&](const PointSet& x) { return forward(at, x); }, target,
                                     s.n_test, test_seed).risk);
        }
        out.window_min_risk = best;
      }
    }
    row.risk = r.risk;
    row.risk_se = r.standard_error;
    row.status = capped ? "capped" : "ok";
  } catch (const std::exception& e) {
    row.status = detail::error_status(e);
  }
  row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// Least-squares line through (x, y) with the slope's standard error.
struct SlopeFit {
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  double standard_error = std::numeric_limits<double>::quiet_NaN();
  std::size_t points = 0;
};

inline SlopeFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  SlopeFit f;
  f.points = x.size();
  if (x.size() != y.size() || x.size() < 2) return f;
  const double k = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= k;
  my /= k;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  if (x.size() > 2) {
    double ssr = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = y[i] - f.intercept - f.slope * x[i];
      ssr += e * e;
    }
    f.standard_error = std::sqrt(ssr / (k - 2.0) / sxx);
  }
  return f;
}

inline SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 0.0) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  return fit_line(lx, ly);
}

struct Gate {
  std::string name;
  double value = 0.0;
  double target = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

inline json to_json(const Gate& g) {
  return json{{"name", g.name}, {"value", g.value}, {"target", g.target},
              {"tolerance", g.tolerance}, {"pass", g.pass}, {"detail", g.detail}};
}

inline json to_json(const SlopeFit& f) {
  return json{{"slope", f.slope}, {"standard_error", f.standard_error},
              {"intercept", f.intercept}, {"points", f.points}};
}

/// Slope gate: within the absolute tolerance and the 2-SE band around the
/// fit overlaps the target.
inline Gate slope_gate(const std::string& name, const SlopeFit& fit, double target, double tol) {
  Gate g{name, fit.slope, target, tol, false, ""};
  const bool within = std::abs(fit.slope - target) <= tol;
  const bool overlap = std::abs(fit.slope - target) <= 2.0 * fit.standard_error;
  g.pass = std::isfinite(fit.slope) && within && overlap;
  g.detail = "se=" + format_double(fit.standard_error) + (within ? "" : " outside tolerance") +
             (overlap ? "" : " 2se band misses target");
  return g;
}

struct Series {
  Arm arm;
  std::vector<Index> n;
  std::vector<double> mean_risk;
  std::vector<double> window_mean_risk;
  std::vector<int> cells_ok;
  SlopeFit fit;
};

inline json to_json(const Series& s) {
  json j{{"label", s.arm.label()}, {"n", s.n}, {"mean_risk", s.mean_risk},
         {"cells_ok", s.cells_ok}, {"fit", to_json(s.fit)}};
  if (!s.window_mean_risk.empty()) j["window_mean_risk"] = s.window_mean_risk;
  return j;
}

struct SweepReport {
  std::vector<ResultRow> rows;
  std::vector<Series> series;
  std::vector<Gate> gates;

  bool passed() const {
    return std::all_of(gates.begin(), gates.end(), [](const Gate& g) { return g.pass; });
  }

  const Series* find(const Arm& arm) const {
    for (const Series& s : series) {
      if (s.arm == arm) return &s;
    }
    return nullptr;
  }
};

inline json summary(const ExperimentSpec& spec, const SweepReport& r) {
  json series = json::array();
  for (const Series& s : r.series) series.push_back(to_json(s));
  json gates = json::array();
  for (const Gate& g : r.gates) gates.push_back(to_json(g));
  return json{{"mode", to_string(spec.mode)}, {"spec", to_json(spec)}, {"spec_hash", spec_hash(spec)},
              {"series", series}, {"gates", gates}, {"pass", r.passed()}};
}

/// Absolute slope tolerance for the gate on an arm.
inline double slope_tolerance(const Arm& arm) { return arm.method == Method::Oracle ? 0.08 : 0.15; }

using RowCallback = std::function<void(const ResultRow&)>;

/// All cells of a rate sweep, then per-arm log-log slopes and gates.
/// `on_row` is called once per finished cell, serialized.
inline SweepReport run_rate_sweep(const ExperimentSpec& spec, int threads = 1,
                                  const RowCallback& on_row = nullptr) {
  validate(spec);
  const std::vector<Arm> arms = sweep_arms(spec);
  struct Task {
    std::size_t arm;
    Index n;
    int seed;
  };
  std::vector<Task> tasks;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    for (Index n : spec.n_grid) {
      for (int s = 0; s < spec.seeds; ++s) tasks.push_back({a, n, s});
    }
  }
  const auto fixed_q = detail::fixed_quadrature(spec);
  std::vector<CellResult> cells(tasks.size());
  std::mutex collector;
  detail::parallel_for(tasks.size(), threads, [&](std::size_t i) {
    CellResult c = run_cell(spec, arms[tasks[i].arm], tasks[i].n, tasks[i].seed, fixed_q);
    std::lock_guard lock(collector);
    if (on_row) on_row(c.row);
    cells[i] = std::move(c);
  });

  SweepReport report;
  for (const CellResult& c : cells) report.rows.push_back(c.row);
  for (std::size_t a = 0; a < arms.size(); ++a) {
    Series s;
    s.arm = arms[a];
    for (Index n : spec.n_grid) {
      double sum = 0.0, wsum = 0.0;
      int ok = 0;
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i].arm != a || tasks[i].n != n || !cells[i].row.ok()) continue;
        sum += cells[i].row.risk;
        if (cells[i].window_min_risk) wsum += *cells[i].window_min_risk;
        ++ok;
      }
      if (ok == 0) continue;
      s.n.push_back(n);
      s.mean_risk.push_back(sum / ok);
      if (spec.window) s.window_mean_risk.push_back(wsum / ok);
      s.cells_ok.push_back(ok);
    }
    std::vector<double> xs(s.n.begin(), s.n.end());
    s.fit = fit_loglog(xs, s.mean_risk);
    report.series.push_back(std::move(s));
  }

  for (const Series& s : report.series) {
    const bool gated = s.arm.method == Method::Oracle ||
                       (s.arm.method == Method::Gd && s.arm.target == TargetSpace::Ntk) ||
                       (s.arm.method == Method::Pgd && s.arm.target == TargetSpace::Integrated);
    if (!gated) continue;
    report.gates.push_back(slope_gate("slope " + s.arm.label(), s.fit,
                                      -rate_exponent(s.arm.target, spec.d), slope_tolerance(s.arm)));
  }
  const Series* pgd = report.find({Method::Pgd, TargetSpace::Integrated});
  const Series* gd = report.find({Method::Gd, TargetSpace::Integrated});
  if (pgd && gd && !pgd->n.empty() && !gd->n.empty() && pgd->n.back() == gd->n.back()) {
    Gate g{"PGD below GD on H_Kint at n=" + std::to_string(pgd->n.back()), pgd->mean_risk.back(),
           gd->mean_risk.back(), 0.0, pgd->mean_risk.back() < gd->mean_risk.back(), ""};
    g.detail = "target column holds the GD mean risk";
    report.gates.push_back(g);
  }
  return report;
}

struct UniformRow {
  Index m = 0;
  double h_error = 0.0;     // sup over grid pairs of |h-hat - K|
  double v_error = 0.0;     // sup over grid of |v-hat_R - 2R/(sqrt(2 pi) kappa)|
  double output_at_init = 0.0;  // sup over grid of |f(W(0), x)|
};

struct UniformReport {
  std::vector<UniformRow> rows;
  SlopeFit h_fit;
  SlopeFit v_fit;
  std::vector<Gate> gates;

  bool passed() const {
    return std::all_of(gates.begin(), gates.end(), [](const Gate& g) { return g.pass; });
  }
};

inline UniformReport run_uniform_conv(const ExperimentSpec& spec, int threads = 1) {
  validate(spec);
  const PointSet grid = sample_sphere(spec.grid_points, spec.d, derive_seed(spec.seed, Stream::Grid));
  const Eigen::MatrixXd k = ntk_cross(grid, grid);
  const double limit = v_hat_limit(spec.band_radius, spec.kappa);
  UniformReport report;
  report.rows.resize(spec.m_grid.size());
  detail::parallel_for(spec.m_grid.size(), threads, [&](std::size_t i) {
    const Index m = spec.m_grid[i];
    const NetworkState state =
        init_network(m, spec.d, spec.kappa, derive_seed(spec.seed, Stream::Init, static_cast<std::uint64_t>(m)));
    UniformRow& row = report.rows[i];
    row.m = m;
    row.h_error = (h_hat_gram(state, grid) - k).cwiseAbs().maxCoeff();
    for (Index p = 0; p < grid.size(); ++p) {
      row.v_error = std::max(row.v_error, std::abs(v_hat(state, grid.point(p), spec.band_radius) - limit));
    }
    row.output_at_init = forward(state, grid).cwiseAbs().maxCoeff();
  });
  std::vector<double> ms, hs, vs;
  double worst_output = 0.0;
  for (const UniformRow& r : report.rows) {
    ms.push_back(static_cast<double>(r.m));
    hs.push_back(r.h_error);
    vs.push_back(r.v_error);
    worst_output = std::max(worst_output, r.output_at_init);
  }
  report.h_fit = fit_loglog(ms, hs);
  report.v_fit = fit_loglog(ms, vs);
  report.gates.push_back({"output at init", worst_output, 0.0, 1e-12, worst_output <= 1e-12, ""});
  report.gates.push_back({"h-hat error exponent", report.h_fit.slope, -0.5, 0.15,
                          report.h_fit.slope >= -0.65 && report.h_fit.slope <= -0.35,
                          "se=" + format_double(report.h_fit.standard_error)});
  report.gates.push_back({"v-hat error exponent", report.v_fit.slope, -0.25, 0.0,
                          report.v_fit.slope <= -0.2, "pass when <= -0.2"});
  const UniformRow& widest = report.rows.back();
  report.gates.push_back({"v-hat error at m=" + std::to_string(widest.m), widest.v_error, 0.0, 0.02,
                          widest.v_error <= 0.02, ""});
  return report;
}

inline json summary(const ExperimentSpec& spec, const UniformReport& r) {
  json rows = json::array();
  for (const UniformRow& u : r.rows) {
    rows.push_back({{"m", u.m}, {"h_error", u.h_error}, {"v_error", u.v_error},
                    {"output_at_init", u.output_at_init}});
  }
  json gates = json::array();
  for (const Gate& g : r.gates) gates.push_back(to_json(g));
  return json{{"mode", to_string(spec.mode)}, {"spec", to_json(spec)}, {"spec_hash", spec_hash(spec)},
              {"rows", rows}, {"h_fit", to_json(r.h_fit)}, {"v_fit", to_json(r.v_fit)},
              {"gates", gates}, {"pass", r.passed()}};
}

struct DynamicsRow {
  int seed = 0;
  std::string optimizer;
  std::int64_t steps = 0;
  double eta = 0.0;
  double max_deviation = 0.0;     // max_t ||y-hat_NN(t) - y-hat_oracle(t)|| / sqrt(n)
  double recursion_defect = 0.0;  // max_t ||u(t+1) - (I - eta G0) u(t)|| / sqrt(n)
  std::string status = "ok";
};

struct DynamicsReport {
  Index n = 0;
  std::vector<DynamicsRow> rows;
  std::vector<Gate> gates;

  bool passed() const {
    return std::all_of(gates.begin(), gates.end(), [](const Gate& g) { return g.pass; });
  }
};

namespace detail {

inline void trace_against_oracle(DynamicsRow& row, const TrainTrace& trace, const Eigen::VectorXd& y,
                                 const KernelGdOracle& oracle, const Eigen::MatrixXd& g0) {
  const Index n = y.size();
  const double root_n = std::sqrt(static_cast<double>(n));
  const Eigen::MatrixXd step = Eigen::MatrixXd::Identity(n, n) - row.eta * g0;
  for (std::size_t t = 0; t < trace.predictions.size(); ++t) {
    const Eigen::VectorXd& yhat = trace.predictions[t];
    const double dev = (yhat - oracle.predictions(y, static_cast<std::int64_t>(t))).norm() / root_n;
    row.max_deviation = std::max(row.max_deviation, dev);
    if (t + 1 < trace.predictions.size()) {
      const Eigen::VectorXd u = yhat - y;
      const Eigen::VectorXd next = trace.predictions[t + 1] - y;
      row.recursion_defect = std::max(row.recursion_defect, (next - step * u).norm() / root_n);
    }
  }
}

}  // namespace detail

/// Trains GD and PGD networks next to the matching kernel oracles on the same
/// data (n = first entry of n_grid) and reports how far they drift apart.
inline DynamicsReport run_dynamics_check(const ExperimentSpec& spec, int threads = 1) {
  validate(spec);
  const Index n = spec.n_grid.front();
  const TargetSpace space = spec.target_space.value_or(TargetSpace::Ntk);
  const auto fixed_q = detail::fixed_quadrature(spec);
  DynamicsReport report;
  report.n = n;
  std::vector<Method> methods;
  for (Method m : spec.optimizer) {
    if (m != Method::Oracle && std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
  }
  struct Task {
    int seed;
    Method method;
  };
  std::vector<Task> tasks;
  for (int s = 0; s < spec.seeds; ++s) {
    for (Method m : methods) tasks.push_back({s, m});
  }
  report.rows.resize(tasks.size());
  detail::parallel_for(tasks.size(), threads, [&](std::size_t i) {
    DynamicsRow& row = report.rows[i];
    row.seed = tasks[i].seed;
    row.optimizer = to_string(tasks[i].method);
    try {
      const std::uint64_t cell = cell_seed(spec, n, row.seed);
      const TargetFunction target = make_target(space, spec.k, spec.f0, spec.d, target_seed(spec, row.seed),
                                                space == TargetSpace::Integrated ? fixed_q : nullptr);
      const Dataset data = make_dataset(target, n, spec.sigma, cell);
      const NetworkState init = init_network(spec.m, spec.d, spec.kappa, derive_seed(cell, Stream::Init));
      const FeatureMatrix zs = features(init, data.x);
      TrainConfig cfg;
      cfg.record_predictions = true;
      Gram g;
      Eigen::MatrixXd g0;
      std::optional<Preconditioner> pre;
      if (tasks[i].method == Method::Gd) {
        g = gram(data.x, NtkKernel{});
        g0 = zs.inner_gram() / static_cast<double>(n);
      } else {
        const QuadratureSample q = QuadratureSample::draw(spec.quadrature_size(n), spec.d,
                                                          derive_seed(cell, Stream::Quadrature));
        g = gram(data.x, IntegratedKernel(q));
        pre.emplace(init, q);
        const Eigen::MatrixXd h = zs.cross_inner(pre->features());
        g0 = h * h.transpose() / static_cast<double>(n * q.size());
        cfg.optimizer = OptimizerKind::Preconditioned;
      }
      const Spectrum spectrum = eigen(g);
      row.eta = detail::step_size(spec.eta_policy, spectrum.top());
      row.steps = std::min(stopping_time(ComplexityProfile(spectrum, n, spec.sigma), row.eta).steps, spec.max_steps);
      cfg.eta = row.eta;
      cfg.steps = row.steps;
      const KernelGdOracle oracle(g, row.eta);
      const TrainResult run = train(init, data.x, data.y, cfg, pre ? &*pre : nullptr);
      detail::trace_against_oracle(row, run.trace, data.y, oracle, g0);
    } catch (const std::exception& e) {
      row.status = detail::error_status(e);
    }
  });
  for (const DynamicsRow& r : report.rows) {
    Gate g{"closeness " + r.optimizer + " seed " + std::to_string(r.seed), r.max_deviation, 0.0, 0.1,
           r.status == "ok" && r.max_deviation <= 0.1, r.status};
    report.gates.push_back(g);
  }
  return report;
}

inline json summary(const ExperimentSpec& spec, const DynamicsReport& r) {
  json rows = json::array();
  for (const DynamicsRow& d : r.rows) {
    rows.push_back({{"seed", d.seed}, {"optimizer", d.optimizer}, {"steps", d.steps}, {"eta", d.eta},
                    {"max_deviation", d.max_deviation}, {"recursion_defect", d.recursion_defect},
                    {"status", d.status}});
  }
  json gates = json::array();
  for (const Gate& g : r.gates) gates.push_back(to_json(g));
  return json{{"mode", to_string(spec.mode)}, {"spec", to_json(spec)}, {"spec_hash", spec_hash(spec)},
              {"n", r.n}, {"rows", rows}, {"gates", gates}, {"pass", r.passed()}};
}

struct SpectrumReport {
  Index decay_n = 0;
  SlopeFit decay_fit;                  // log lambda_j vs log j over j in [5, 50]
  double squared_identity_error = 0.0;  // max over n <= 512 in n_grid
  Index independent_n = 0;
  double independent_q_error = std::numeric_limits<double>::quiet_NaN();
  std::vector<Gate> gates;

  bool passed() const {
    return std::all_of(gates.begin(), gates.end(), [](const Gate& g) { return g.pass; });
  }
};

inline constexpr Index kIdentityMaxN = 512;

/// Decay slope on the largest n; Q = S identity and the independent-Q
/// comparison on every n <= 512 (the latter reported for the largest such n).
/// The independent-Q spectrum is compared with a 10x larger quadrature.
inline SpectrumReport run_spectrum_check(const ExperimentSpec& spec) {
  validate(spec);
  SpectrumReport report;
  auto points = [&](Index n) { return sample_sphere(n, spec.d, cell_seed(spec, n, 0)); };

  report.decay_n = spec.n_grid.back();
  {
    const Spectrum s = eigen(gram(points(report.decay_n), NtkKernel{}));
    std::vector<double> lj, ll;
    for (Index j = 5; j <= std::min<Index>(50, s.size()); ++j) {
      if (s[j - 1] <= 0.0) continue;
      lj.push_back(std::log(static_cast<double>(j)));
      ll.push_back(std::log(s[j - 1]));
    }
    report.decay_fit = fit_line(lj, ll);
  }
  const double decay_target = -static_cast<double>(spec.d) / static_cast<double>(spec.d - 1);
  report.gates.push_back({"eigen-decay slope at n=" + std::to_string(report.decay_n), report.decay_fit.slope,
                          decay_target, 0.2, std::abs(report.decay_fit.slope - decay_target) <= 0.2,
                          "se=" + format_double(report.decay_fit.standard_error)});

  bool any_small = false;
  for (Index n : spec.n_grid) {
    if (n > kIdentityMaxN) continue;
    any_small = true;
    const PointSet x = points(n);
    const Eigen::VectorXd lambda = eigen(gram(x, NtkKernel{})).values();
    const Eigen::VectorXd squared = lambda.array().square();
    const Eigen::VectorXd same_q = eigen(gram(x, IntegratedKernel(QuadratureSample(x, 0)))).values();
    report.squared_identity_error =
        std::max(report.squared_identity_error, (same_q - squared).cwiseAbs().maxCoeff());

    // Reference: an independent quadrature ten times larger.
    const std::uint64_t qseed = derive_seed(cell_seed(spec, n, 0), Stream::Quadrature);
    const Index qn = spec.quadrature_size(n);
    const QuadratureSample q = QuadratureSample::draw(qn, spec.d, derive_seed(qseed, {0}));
    const QuadratureSample ref_q = QuadratureSample::draw(10 * qn, spec.d, derive_seed(qseed, {1}));
    const Eigen::VectorXd indep = eigen(gram(x, IntegratedKernel(q))).values();
    const Eigen::VectorXd ref = eigen(gram(x, IntegratedKernel(ref_q))).values();
    const Index top = std::min<Index>(20, n);
    report.independent_q_error =
        ((indep.head(top) - ref.head(top)).array().abs() / ref.head(top).array()).maxCoeff();
    report.independent_n = n;
  }
  if (any_small) {
    report.gates.push_back({"Q=S squared-spectrum identity", report.squared_identity_error, 0.0, 1e-10,
                            report.squared_identity_error <= 1e-10, ""});
    report.gates.push_back({"independent Q top-20 relative error at n=" + std::to_string(report.independent_n),
                            report.independent_q_error, 0.0, 0.1, report.independent_q_error <= 0.1, ""});
  }
  return report;
}

inline json summary(const ExperimentSpec& spec, const SpectrumReport& r) {
  json gates = json::array();
  for (const Gate& g : r.gates) gates.push_back(to_json(g));
  return json{{"mode", to_string(spec.mode)}, {"spec", to_json(spec)}, {"spec_hash", spec_hash(spec)},
              {"decay_n", r.decay_n}, {"decay_fit", to_json(r.decay_fit)},
              {"squared_identity_error", r.squared_identity_error},
              {"independent_n", r.independent_n}, {"independent_q_error", r.independent_q_error},
              {"gates", gates}, {"pass", r.passed()}};
}

/// Writes the header and rows in sweep order.
inline void write_csv(const std::string& path, const std::vector<ResultRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << kCsvHeader << '\n';
  for (const ResultRow& r : rows) out << r.csv() << '\n';
}

}  // namespace ntkstop
