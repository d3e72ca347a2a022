// Acceptance run: one PASS/FAIL line per criterion. `acceptance --criterion N` runs one.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>
#include <string>

#include <CLI11.hpp>
#include <gsl/gsl_integration.h>

#include "fixtures.hpp"
#include "rotor_tomo/rotor_tomo.hpp"

using namespace rotor_tomo;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path workdir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "rotor_tomo_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json simulate_preset(const std::string& name, const fs::path& dir) {
  write_simulation(parse_scenario(find_preset(name).simulate, ConfigUse::simulate), dir);
  return read_json(dir / (name + "_truth.json"));
}

ReconstructionRun reconstruct(const json& doc, const fs::path& dir, const json& truth) {
  return run_reconstruction(parse_scenario(doc, ConfigUse::reconstruct, dir), dir, truth);
}

double metric(const ReconstructionRun& r, std::initializer_list<const char*> path) {
  const json* j = &r.bundle.at("metrics");
  for (const char* k : path) j = &j->at(k);
  return j->get<double>();
}

// --- 1: gradients -----------------------------------------------------------------------------

Verdict gradients() {
  using fixtures::Kind;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  int instances = 0, checks = 0;
  for (Kind kind : {Kind::amplitudes, Kind::populations, Kind::rpwf, Kind::temperature}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto inst = fixtures::random_instance(kind, 1000 * static_cast<std::uint64_t>(kind) + seed);
      const Evaluator ev(inst.problem);
      const GradientBundle g = ev.evaluate(inst.x);
      for (auto blk : {ParameterBlock::a, ParameterBlock::b, ParameterBlock::p, ParameterBlock::P, ParameterBlock::I, ParameterBlock::T}) {
        if (!inst.x.active[blk]) continue;
        const auto fd = finite_difference_oracle(ev, inst.x, blk, default_fd_step(blk, inst.x), default_fd_order(blk));
        worst = std::max(worst, fixtures::relative_error(g.block(blk), fd.gradient));
        ++checks;
      }
      ++instances;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < 1e-6 && instances >= 20 && secs < 60.0,
          std::to_string(instances) + " instances, " + std::to_string(checks) + " block checks (a,b,p,P,I,T,RPWF-p), max rel err " +
              fmt("%.2e", worst) + " (< 1e-6), " + fmt("%.1f", secs) + " s (< 60 s)"};
}

// --- 2: pure state, single kick -----------------------------------------------------------------

Verdict pure_state() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = workdir("fig1");
  const json truth = simulate_preset("fig1", dir);
  json clean = find_preset("fig1").reconstruct;
  clean["observables"][0]["file"] = "fig1_cos2_theta.csv";
  const auto a = reconstruct(clean, dir, truth);
  const double norm_err = a.bundle.at("metrics").at("amplitudes").at(0).at("norm_max_error").get<double>();
  const double phase_err = a.bundle.at("metrics").at("amplitudes").at(0).at("phase_max_error_rad").get<double>();

  const auto& recs = a.result.trace.records;
  double best50 = recs.front().target_error;
  for (const auto& r : recs) {
    if (r.iteration <= 50) best50 = std::min(best50, r.target_error);
  }
  const double drop = recs.front().target_error / best50;

  const auto b = reconstruct(find_preset("fig1").reconstruct, dir, truth);
  const double noisy_err = b.bundle.at("metrics").at("amplitudes").at(0).at("norm_max_error").get<double>();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const bool ok = norm_err < 1e-3 && phase_err < 1e-2 && noisy_err < 5e-2 && drop >= 1e3 && secs < 120.0;
  return {ok, "noiseless norm err " + fmt("%.2e", norm_err) + " (< 1e-3), phase err " + fmt("%.2e", phase_err) +
                  " rad (< 1e-2, |c| >= 1e-2), " + std::to_string(recs.back().iteration) + " it; 3% noise norm err " + fmt("%.2e", noisy_err) +
                  " (< 5e-2); target error drop in 50 it " + fmt("%.1f", drop) + "x (>= 1e3x, start " +
                  fmt("%.2e", recs.front().target_error) + ", best " + fmt("%.2e", best50) + "); " + fmt("%.1f", secs) + " s (< 120 s)"};
}

// --- 3: many populations with RPWF --------------------------------------------------------------

Verdict rpwf_populations() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = workdir("fig2a");
  const json truth = simulate_preset("fig2a", dir);
  const auto r = reconstruct(find_preset("fig2a").reconstruct, dir, truth);
  const double l1 = metric(r, {"populations", "l1_error"});
  const double l1_j = metric(r, {"populations", "l1_error_J_summed"});
  const double l1_m = metric(r, {"populations", "l1_error_abs_M_summed"});
  const double start = r.result.trace.records.front().parameter_error;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {l1 < 0.05 && secs < 1800.0,
          "per-state L1 " + fmt("%.3f", l1) + " (< 0.05; start " + fmt("%.3f", start) + "), J-summed L1 " + fmt("%.3f", l1_j) +
              ", |M|-summed L1 " + fmt("%.3f", l1_m) + ", " + std::to_string(r.result.trace.records.back().iteration) + " it, " +
              std::string(to_string(r.result.trace.status)) + ", " + fmt("%.0f", secs) + " s (< 1800 s)"};
}

// --- 4: temperature ----------------------------------------------------------------------------

Verdict temperature() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = workdir("fig3");
  const json truth = simulate_preset("fig3", dir);
  const auto r = reconstruct(find_preset("fig3").reconstruct, dir, truth);
  const double rel = metric(r, {"temperature", "relative_error"});
  const double dEdT = r.result.final.block(ParameterBlock::T)[0];
  const auto& recs = r.result.trace.records;
  const double T_final = r.result.x.T, E_final = recs.back().E;
  const auto T_of = [](const IterationRecord& rec) {
    for (const auto& [k, v] : rec.scalars) {
      if (k == "T") return v;
    }
    return std::nan("");
  };
  // first iteration within 1e-3 of the start-to-final distance, for E and for T
  const double E_tol = 1e-3 * std::abs(recs.front().E - E_final), T_tol = 1e-3 * std::abs(T_of(recs.front()) - T_final);
  int it_E = -1, it_T = -1;
  for (const auto& rec : recs) {
    if (it_E < 0 && std::abs(rec.E - E_final) <= E_tol) it_E = rec.iteration;
    if (it_T < 0 && std::abs(T_of(rec) - T_final) <= T_tol) it_T = rec.iteration;
  }
  // dE/dT on the scale of the bracket, against the starting objective
  const double stationarity = std::abs(dEdT) * T_final / recs.front().E;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {rel < 0.02 && stationarity < 1e-6 && it_E >= 0 && it_T >= 0 && it_E < it_T,
          "T = " + fmt("%.6f", T_final) + " K, rel err " + fmt("%.2e", rel) + " (< 2e-2); |dE/dT| " + fmt("%.2e", std::abs(dEdT)) +
              ", |dE/dT| T / E0 " + fmt("%.2e", stationarity) + " (< 1e-6); E settles at it " + std::to_string(it_E) + ", T at it " +
              std::to_string(it_T) + " (E strictly first); " + fmt("%.1f", secs) + " s"};
}

// --- 5: two cross-polarized pulses --------------------------------------------------------------

Verdict cross_polarized() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = workdir("fig4");
  const json truth = simulate_preset("fig4", dir);
  const auto all = reconstruct(find_preset("fig4").reconstruct, dir, truth);
  const double norm_err = all.bundle.at("metrics").at("amplitudes").at(0).at("norm_max_error").get<double>();

  json single = find_preset("fig4").reconstruct;
  single["observables"] = json::array({single["observables"][0]});
  std::vector<Eigen::VectorXcd> solutions;
  std::string energies;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    single["optimizer"]["seed"] = seed;
    single["name"] = "fig4_single_seed" + std::to_string(seed);
    const auto r = reconstruct(single, dir, truth);
    energies += (energies.empty() ? "" : ", ") + fmt("%.1e", r.result.final.E);
    if (r.result.final.E < 1e-10) solutions.push_back(r.result.x.psi(0, r.problem.dim()));
  }
  double spread = 0.0, modulus_spread = 0.0;
  for (std::size_t i = 0; i < solutions.size(); ++i) {
    for (std::size_t j = i + 1; j < solutions.size(); ++j) {
      spread = std::max(spread, (solutions[i] - solutions[j]).cwiseAbs().maxCoeff());
      modulus_spread = std::max(modulus_spread, (solutions[i].cwiseAbs() - solutions[j].cwiseAbs()).cwiseAbs().maxCoeff());
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {norm_err < 1e-2 && solutions.size() >= 2 && spread > 1e-2,
          "three observables norm err " + fmt("%.2e", norm_err) + " (< 1e-2, E " + fmt("%.1e", all.result.final.E) + ", " +
              std::to_string(all.result.trace.records.back().iteration) + " it); cos2_theta alone: " + std::to_string(solutions.size()) +
              "/4 starts reach E < 1e-10 (E = " + energies + "), max gauge-fixed coefficient difference " + fmt("%.3f", spread) +
              " (> 1e-2), modulus difference " + fmt("%.3f", modulus_spread) + "; " + fmt("%.1f", secs) + " s"};
}

// --- 6: kick strength, moment of inertia, populations ------------------------------------------

Verdict strength_inertia() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = workdir("fig5");
  const json truth = simulate_preset("fig5", dir);
  const auto r = reconstruct(find_preset("fig5").reconstruct, dir, truth);
  const double dP = r.bundle.at("metrics").at("strengths").at(0).at("relative_error").get<double>();
  const double dI = metric(r, {"inertia", "relative_error"});
  const double dp = metric(r, {"populations", "max_relative_error"});

  // share of the prepared ensemble with J <= 10
  ReconstructionProblem truth_pr = r.problem;
  truth_pr.populations_free = false;
  truth_pr.inertia.free = false;
  truth_pr.inertia.value = 539010.0;
  truth_pr.pulses[0].strength = {5.174, false, 0.0, 0.0};
  truth_pr.populations = Eigen::VectorXd(6);
  truth_pr.populations << 0.5, 0.1, 0.1, 0.1, 0.1, 0.1;
  const Evaluator ev(truth_pr);
  const auto& prep = ev.preparation(Eigen::VectorXd::Constant(1, 5.174), 539010.0);
  double inside = 0.0;
  for (std::size_t k = 0; k < truth_pr.sources.size(); ++k) {
    const Eigen::VectorXcd col = block_column(prep.total, truth_pr.sources[k]);
    for (Eigen::Index n = 0; n < col.size(); ++n) {
      if (truth_pr.basis.state(static_cast<std::size_t>(n)).J <= 10) inside += truth_pr.populations[static_cast<Eigen::Index>(k)] * std::norm(col[n]);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {dP < 5e-3 && dI < 5e-3 && dp < 5e-3 && inside > 0.99 && secs < 300.0,
          "P rel err " + fmt("%.2e", dP) + ", I rel err " + fmt("%.2e", dI) + ", population max rel err " + fmt("%.2e", dp) +
              " (each < 5e-3); packet weight in J <= 10 " + fmt("%.5f", inside) + " (> 0.99); " +
              std::to_string(r.result.trace.records.back().iteration) + " it, " + fmt("%.1f", secs) + " s (< 300 s)"};
}

// --- 7: operator layer -------------------------------------------------------------------------

std::complex<double> ylm(int l, int m, double theta, double phi) {
  const int am = std::abs(m);
  const double v = std::sph_legendre(static_cast<unsigned>(l), static_cast<unsigned>(am), theta);
  std::complex<double> y = v * std::polar(1.0, am * phi);
  if (m < 0) y = ((am % 2) ? -1.0 : 1.0) * std::conj(y);
  return y;
}

Eigen::MatrixXcd quadrature_oracle(const RotorBasis& basis, const AngularFunction& f) {
  const int n_theta = 64, n_phi = 128;
  gsl_integration_glfixed_table* table = gsl_integration_glfixed_table_alloc(n_theta);
  const auto d = static_cast<Eigen::Index>(basis.size());
  Eigen::MatrixXcd out = Eigen::MatrixXcd::Zero(d, d);
  Eigen::VectorXcd y(d);
  for (int i = 0; i < n_theta; ++i) {
    double x = 0.0, w = 0.0;
    gsl_integration_glfixed_point(-1.0, 1.0, static_cast<std::size_t>(i), &x, &w, table);
    for (int k = 0; k < n_phi; ++k) {
      const double phi = 2.0 * std::numbers::pi * k / n_phi;
      for (Eigen::Index n = 0; n < d; ++n) y[n] = ylm(basis.state(static_cast<std::size_t>(n)).J, basis.state(static_cast<std::size_t>(n)).M, std::acos(x), phi);
      out.noalias() += (w * (2.0 * std::numbers::pi / n_phi) * f(x, phi)) * y.conjugate() * y.transpose();
    }
  }
  gsl_integration_glfixed_table_free(table);
  return out;
}

Verdict operators() {
  const auto b = build_basis(6, ParityFilter::all_J);
  double elem = 0.0;
  const Eigen::Vector3d tilted = Eigen::Vector3d(0.3, -0.5, 0.8).normalized();
  for (const Eigen::Vector3d& n : {Eigen::Vector3d(0, 0, 1), Eigen::Vector3d(1, 0, 0), Polarization::xy45().direction(), tilted}) {
    const auto f = [n](double c, double phi) {
      const double s = std::sqrt(1.0 - c * c);
      const double p = n.x() * s * std::cos(phi) + n.y() * s * std::sin(phi) + n.z() * c;
      return p * p;
    };
    elem = std::max(elem, (cos2_operator(b, Polarization(n)).dense() - quadrature_oracle(b, f)).cwiseAbs().maxCoeff());
  }
  elem = std::max(elem, (observable_operator(b, ObservableKind::cos2_phi).dense() -
                         quadrature_oracle(b, [](double, double phi) { return std::cos(phi) * std::cos(phi); }))
                            .cwiseAbs()
                            .maxCoeff());
  elem = std::max(elem, (observable_operator(b, ObservableKind::sin2theta_sin2phi).dense() -
                         quadrature_oracle(b, [](double c, double phi) { return (1 - c * c) * std::sin(2 * phi); }))
                            .cwiseAbs()
                            .maxCoeff());

  double unitarity = 0.0;
  for (const auto& [P, pol] : {std::pair{8.278, Polarization::z()}, std::pair{2.5, Polarization::x()}, std::pair{2.5, Polarization::xy45()}}) {
    const auto kb = build_basis(30, ParityFilter::all_J);
    const auto k = build_kick(kb, P, pol, 4);
    const Eigen::MatrixXcd v = k.V.dense();
    std::vector<Eigen::Index> inner;
    for (std::size_t n = 0; n < kb.size(); ++n) {
      if (kb.state(n).J <= 4) inner.push_back(static_cast<Eigen::Index>(n));
    }
    for (auto i : inner) {
      for (auto j : inner) unitarity = std::max(unitarity, std::abs(v.col(i).dot(v.col(j)) - (i == j ? 1.0 : 0.0)));
    }
  }

  double completeness = 0.0;
  for (auto parity : {ParityFilter::all_J, ParityFilter::even_J_only}) {
    const auto cb = build_basis(10, parity);
    const Eigen::MatrixXcd sum =
        cos2_operator(cb, Polarization::x()).dense() + cos2_operator(cb, Polarization::y()).dense() + cos2_operator(cb, Polarization::z()).dense();
    completeness = std::max(completeness, (sum - Eigen::MatrixXcd::Identity(sum.rows(), sum.cols())).cwiseAbs().maxCoeff());
  }
  return {elem < 1e-10 && unitarity < 1e-10 && completeness < 1e-12,
          "matrix elements vs quadrature " + fmt("%.2e", elem) + " (< 1e-10), kick unitarity " + fmt("%.2e", unitarity) +
              " (< 1e-10), three-axis completeness " + fmt("%.2e", completeness) + " (< 1e-12)"};
}

// --- 8: RPWF convergence -----------------------------------------------------------------------

Verdict rpwf_convergence() {
  const double I = 539010.0;
  const auto b = build_basis(30, ParityFilter::even_J_only);
  const auto src = build_basis(10, ParityFilter::even_J_only);
  const auto s = build_spectrum(b, I);
  const auto k = build_kick(b, 5.0, Polarization::z(), 10);
  const auto O = cos2_operator(b, Polarization::z());
  const auto t = uniform_time_grid(100, revival_period(I));
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd p(static_cast<Eigen::Index>(src.size()));
  for (auto& v : p) v = u(gen);
  p /= p.sum();
  Ensemble e;
  for (std::size_t n = 0; n < src.size(); ++n) {
    Eigen::VectorXcd chi = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(b.size()));
    chi[static_cast<Eigen::Index>(n)] = 1.0;
    e.members.push_back({b, k.V.apply(chi).normalized(), true});
    e.probabilities.push_back(p[static_cast<Eigen::Index>(n)]);
  }
  const Eigen::VectorXd exact = ensemble_signal(e, s, O, t);
  const auto rms = [&](int N) {
    double acc = 0.0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) acc += (rpwf_signal(p, k.V, s, O, t, N, seed) - exact).squaredNorm();
    return std::sqrt(acc / (50.0 * static_cast<double>(t.size())));
  };
  const double r10 = rms(10), r1000 = rms(1000);
  return {r1000 / r10 < 0.2, "RMS deviation N=10 " + fmt("%.3e", r10) + ", N=1000 " + fmt("%.3e", r1000) + ", ratio " +
                                 fmt("%.3f", r1000 / r10) + " (< 0.2) over 50 seeds, " + std::to_string(src.size()) + " states"};
}

// --- 9: projections ----------------------------------------------------------------------------

/// Nearest simplex point by enumerating every support set.
Eigen::VectorXd simplex_by_enumeration(const Eigen::VectorXd& y) {
  const auto n = y.size();
  Eigen::VectorXd best;
  double best_d = INFINITY;
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    double sum = 0.0;
    int count = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (mask & (1u << i)) sum += y[i], ++count;
    }
    const double shift = (sum - 1.0) / count;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    bool feasible = true;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(mask & (1u << i))) continue;
      x[i] = y[i] - shift;
      feasible = feasible && x[i] >= 0.0;
    }
    if (feasible && (x - y).squaredNorm() < best_d) best_d = (x - y).squaredNorm(), best = x;
  }
  return best;
}

Verdict projections() {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> dim(2, 8);
  double brute = 0.0, idem = 0.0, feas = 0.0;
  for (int k = 0; k < 1000; ++k) {
    Eigen::VectorXd y(dim(gen));
    for (auto& v : y) v = normal(gen);
    const Eigen::VectorXd x = project_simplex(y);
    brute = std::max(brute, (x - simplex_by_enumeration(y)).cwiseAbs().maxCoeff());
    idem = std::max(idem, (project_simplex(x) - x).cwiseAbs().maxCoeff());
    feas = std::max({feas, std::abs(x.sum() - 1.0), std::max(0.0, -x.minCoeff())});
  }
  // masked sphere and box: same properties
  for (int k = 0; k < 200; ++k) {
    Eigen::VectorXcd v(6);
    for (auto& c : v) c = cd(normal(gen), normal(gen));
    Eigen::VectorXd mask = Eigen::VectorXd::Ones(6);
    mask[k % 6] = 0.0;
    const Eigen::VectorXcd x = project_masked_sphere(v, mask);
    idem = std::max(idem, (project_masked_sphere(x, mask) - x).cwiseAbs().maxCoeff());
    feas = std::max({feas, std::abs(x.norm() - 1.0), std::abs(x[k % 6])});
    const double z = 3.0 * normal(gen), bz = project_box(z, -1.0, 1.0);
    idem = std::max(idem, std::abs(project_box(bz, -1.0, 1.0) - bz));
    feas = std::max(feas, std::max(0.0, std::abs(bz) - 1.0));
  }
  return {brute < 1e-12 && idem < 1e-14 && feas < 1e-12,
          "1000 random points (d = 2..8): max deviation from support enumeration " + fmt("%.2e", brute) + " (< 1e-12), idempotence " +
              fmt("%.2e", idem) + " (< 1e-14), feasibility " + fmt("%.2e", feas) + " (< 1e-12)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::function<Verdict()>> all = {gradients,       pure_state,       rpwf_populations, temperature, cross_polarized,
                                                     strength_inertia, operators,        rpwf_convergence, projections};
  bool ok = true;
  for (int c = 1; c <= 9; ++c) {
    if (only != 0 && c != only) continue;
    Verdict v;
    try {
      v = all[static_cast<std::size_t>(c - 1)]();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d: %s  %s\n", c, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    ok = ok && v.pass;
  }
  return ok ? 0 : 1;
}
