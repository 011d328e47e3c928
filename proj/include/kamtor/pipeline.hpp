//==============================================================================
// pipeline.hpp
// Run orchestration: dispatch a configured run, collect a JSON report and CSV
// plot series, map outcomes to exit codes.
// Features:
//   • Subcommands solve / reduce / measure / stability.
//   • Exit codes: 0 success, 2 mathematical exclusion (diophantine or Melnikov
//     witness — the frequency is outside the admissible set), 1 operational
//     error.  Every report embeds the effective config and a schema version.
//   • solve supports an eps sweep emitting torus-size scaling data.
//   • All outputs are deterministic under a fixed config and seed.
//==============================================================================
#pragma once

#include <filesystem>

#include "config.hpp"

namespace kamtor {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitExcluded = 2;

struct PipelineOutcome {
    int status = kExitError;
    json report;
    // name -> CSV body (first line is the header).
    std::vector<std::pair<std::string, std::string>> series;
};

// Target frequency failed the diophantine screen (carries the witness).
struct FrequencyExcluded : DiophantineViolation {
    std::vector<int> witness;
    double margin = 0;
    FrequencyExcluded(const std::string& msg, std::vector<int> w, double m)
        : DiophantineViolation(msg), witness(std::move(w)), margin(m) {}
};

namespace detail {

inline json witness_json(const std::vector<int>& ell, int j, int k, int sign,
                         double min_eig, double threshold) {
    return json{{"ell", ell}, {"j", j},           {"k", k},
                {"sign", sign}, {"min_eig", min_eig}, {"threshold", threshold}};
}

// Run the body with the documented exception-to-exit-code mapping.
template <typename F>
inline void guarded(PipelineOutcome& out, F&& body) {
    try {
        body();
        out.status = kExitOk;
    } catch (const MelnikovViolation& e) {
        out.status = kExitExcluded;
        out.report["exclusion"] = {{"type", "melnikov"},
                                   {"witness", witness_json(e.ell, e.j, e.k, e.sign,
                                                            e.min_eig, e.threshold)},
                                   {"message", e.what()}};
    } catch (const FirstMelnikovViolation& e) {
        out.status = kExitExcluded;
        out.report["exclusion"] = {{"type", "melnikov_first"},
                                   {"witness", witness_json(e.ell, e.j, e.j, 0,
                                                            e.min_eig, e.threshold)},
                                   {"message", e.what()}};
    } catch (const FrequencyExcluded& e) {
        out.status = kExitExcluded;
        out.report["exclusion"] = {{"type", "diophantine"},
                                   {"witness", {{"ell", e.witness}, {"margin", e.margin}}},
                                   {"message", e.what()}};
    } catch (const DiophantineViolation& e) {
        out.status = kExitExcluded;
        out.report["exclusion"] = {{"type", "diophantine"}, {"message", e.what()}};
    } catch (const std::exception& e) {
        out.status = kExitError;
        out.report["error"] = e.what();
    }
}

// Model whose actions reproduce the requested frequency (identity when absent).
inline Model model_for_omega(const SolverConfig& cfg, const std::optional<Vec>& omega,
                             double eps_override = -1.0) {
    if (!omega) return make_model(cfg, eps_override);
    Model base = make_model(cfg, eps_override);
    Vec xi = base.xi_of_omega(*omega);
    std::vector<double> xv(xi.data(), xi.data() + xi.size());
    return make_model(cfg, eps_override, &xv);
}

// Admissibility screen of the target frequency at the base level 4 gamma.
inline void screen_frequency(const Model& mdl, const Vec& om, const SolverConfig& cfg) {
    const double tau = cfg.tau_effective();
    DiophantineVerdict dio =
        diophantine_test(om, 4.0 * cfg.gamma, tau, mdl.lat.d * cfg.L_angle);
    if (!dio.ok) {
        std::string msg = "frequency outside the diophantine set at level 4 gamma: l=(";
        for (size_t i = 0; i < dio.witness.size(); ++i)
            msg += (i ? "," : "") + std::to_string(dio.witness[i]);
        msg += "), margin " + std::to_string(dio.min_margin);
        throw FrequencyExcluded(msg, dio.witness, dio.min_margin);
    }
}

inline std::string csv_line(std::initializer_list<double> vals) {
    std::ostringstream os;
    os.precision(17);
    bool first = true;
    for (double v : vals) {
        if (!first) os << ',';
        os << v;
        first = false;
    }
    os << '\n';
    return os.str();
}

inline json size_json(const TorusSize& sz) {
    return json{{"theta_norm", sz.theta_norm}, {"y_norm", sz.y_norm}, {"z_norm", sz.z_norm}};
}

}  // namespace detail

//------------------------------------------------------------------------------
// Subcommand bodies.
//------------------------------------------------------------------------------
inline void run_solve(const SolverConfig& cfg, const std::optional<Vec>& omega,
                      PipelineOutcome& out) {
    std::vector<double> sweep = cfg.eps_sweep;
    const bool sweeping = !sweep.empty();
    if (!sweeping) sweep = {cfg.eps};

    NashMoserConfig nm = make_nm_config(cfg);
    std::string resid_csv = "n,gamma_n,N_n,resid,zeta_abs,step_norm\n";
    std::string size_csv = "eps,theta_norm,y_norm,z_norm\n";
    std::vector<double> ys, zs, eps_fit;

    for (double eps : sweep) {
        Model mdl = detail::model_for_omega(cfg, omega, eps);
        Vec om = omega ? *omega : mdl.omega_tangential(mdl.xi);
        detail::screen_frequency(mdl, om, cfg);
        NashMoserResult res = nash_moser_solve(mdl, om, nm);
        TorusSize sz = torus_size_audit(mdl, res.iota, cfg.sigma);

        if (!sweeping) {
            for (const OuterRecord& r : res.report.log)
                resid_csv += detail::csv_line({static_cast<double>(r.n), r.gamma_n, r.N_n,
                                               r.resid_low, r.zeta_abs, r.step_norm});
            out.report["solve"] = {{"converged", res.report.converged},
                                   {"iters", res.report.iters},
                                   {"final_resid", res.report.final_resid},
                                   {"zeta_norm", res.zeta.norm()},
                                   {"decay_fit", res.report.decay_fit},
                                   {"c_fit", res.report.c_fit},
                                   {"lam_minus", res.report.lam_minus},
                                   {"lam_plus", res.report.lam_plus},
                                   {"size", detail::size_json(sz)}};
            out.series.emplace_back("residuals", resid_csv);
            return;
        }
        size_csv += detail::csv_line({eps, sz.theta_norm, sz.y_norm, sz.z_norm});
        if (sz.y_norm > 0 && sz.z_norm > 0) {
            eps_fit.push_back(eps);
            ys.push_back(sz.y_norm);
            zs.push_back(sz.z_norm);
        }
    }
    json sj = {{"eps", sweep}};
    if (eps_fit.size() >= 2) {
        sj["y_slope"] = loglog_slope(eps_fit, ys);
        sj["z_slope"] = loglog_slope(eps_fit, zs);
    }
    out.report["solve_sweep"] = sj;
    out.series.emplace_back("sizes", size_csv);
}

inline void run_reduce(const SolverConfig& cfg, const std::optional<Vec>& omega,
                       PipelineOutcome& out) {
    Model mdl = detail::model_for_omega(cfg, omega);
    Vec om = omega ? *omega : mdl.omega_tangential(mdl.xi);
    detail::screen_frequency(mdl, om, cfg);

    const double tau = cfg.tau_effective();
    MelnikovParams prm = MelnikovParams::make(2.0 * cfg.gamma, tau);
    TorusEmbedding iota(mdl.lat, mdl.idx);
    Vec zeta = Vec::Zero(mdl.nt());
    ResidualTriple E = mdl.residual_F(iota, zeta, om);
    IsotropicEmbedding iso = isotropize(mdl, iota, E, om, 2.0 * cfg.gamma, tau);
    RightInverseBundle B = build_right_inverse(mdl, iso, zeta, om, prm, make_nm_config(cfg).ropt);

    const ReductionResult& red = B.reduction;
    out.report["reduce"] = {{"steps", red.steps},
                            {"gate_ok", red.gate_ok},
                            {"audit", red.audit},
                            {"c_fit", red.c_fit},
                            {"rho_max", red.rho_max},
                            {"ks", red.ks},
                            {"lam_minus", red.lam_minus},
                            {"lam_plus", red.lam_plus}};
    std::string csv = "nu,N_prev,rn_s0,rn_beta,resid_rel\n";
    for (const LadderRecord& r : red.trace)
        csv += detail::csv_line({static_cast<double>(r.nu), r.N_prev, r.rn_s0, r.rn_beta,
                                 r.resid_rel});
    out.series.emplace_back("ladder", csv);
}

inline void run_measure(const SolverConfig& cfg, PipelineOutcome& out) {
    Model mdl = make_model(cfg);
    Vec lo = cfg.box_lo * mdl.xi, hi = cfg.box_hi * mdl.xi;
    FrequencyBox box(mdl, lo, hi);
    MeasureReport rep = measure_estimate(mdl, box, make_measure_params(cfg));

    json rows = json::array();
    std::string csv =
        "gamma,gamma_star,dio_frac,dio_lo,dio_hi,mel_frac,mel_lo,mel_hi,"
        "total_frac,total_lo,total_hi\n";
    for (const GammaRow& r : rep.rows) {
        rows.push_back({{"gamma", r.gamma},
                        {"gamma_star", r.gamma_star},
                        {"dio_frac", r.dio_frac},
                        {"mel_frac", r.mel_frac},
                        {"total_frac", r.total_frac}});
        csv += detail::csv_line({r.gamma, r.gamma_star, r.dio_frac, r.dio_lo, r.dio_hi,
                                 r.mel_frac, r.mel_lo, r.mel_hi, r.total_frac, r.total_lo,
                                 r.total_hi});
    }
    out.report["measure"] = {{"n_samples", rep.n_samples},
                             {"seed", rep.seed},
                             {"tau", rep.tau},
                             {"tau_star", rep.tau_star},
                             {"dio_slope", rep.dio_slope},
                             {"rows", rows}};
    out.series.emplace_back("fractions", csv);
}

inline void run_stability(const SolverConfig& cfg, const std::optional<Vec>& omega,
                          PipelineOutcome& out) {
    Model mdl = detail::model_for_omega(cfg, omega);
    Vec om = omega ? *omega : mdl.omega_tangential(mdl.xi);
    detail::screen_frequency(mdl, om, cfg);
    NashMoserResult res = nash_moser_solve(mdl, om, make_nm_config(cfg));
    StabilityReport rep = stability_check(*res.bundle, cfg.horizon, cfg.stab_samples,
                                          cfg.stab_times, static_cast<unsigned>(cfg.seed));
    out.report["stability"] = {{"horizon", cfg.horizon},
                               {"sup_ratio", rep.sup_ratio},
                               {"frame_cond", rep.frame_cond},
                               {"ups_drift", rep.ups_drift},
                               {"block_defect", rep.block_defect}};
    std::string csv = "sample,sup_ratio\n";
    for (size_t i = 0; i < rep.sup_per_sample.size(); ++i)
        csv += detail::csv_line({static_cast<double>(i), rep.sup_per_sample[i]});
    out.series.emplace_back("sup_per_sample", csv);
}

//------------------------------------------------------------------------------
// Dispatch + persistence.  Writes <out_dir>/<sub>_report.json and one
// <out_dir>/<sub>_<series>.csv per emitted series (out_dir empty: no files).
//------------------------------------------------------------------------------
inline PipelineOutcome run_pipeline(const SolverConfig& cfg, const std::string& sub,
                                    const std::optional<Vec>& omega = std::nullopt) {
    PipelineOutcome out;
    out.report = json{{"schema", 1}, {"subcommand", sub}, {"config", config_to_json(cfg)}};
    if (omega) {
        std::vector<double> ov(omega->data(), omega->data() + omega->size());
        out.report["omega"] = ov;
    }
    detail::guarded(out, [&] {
        validate_config(cfg);
        if (sub == "solve")
            run_solve(cfg, omega, out);
        else if (sub == "reduce")
            run_reduce(cfg, omega, out);
        else if (sub == "measure")
            run_measure(cfg, out);
        else if (sub == "stability")
            run_stability(cfg, omega, out);
        else
            throw ValidationError("unknown subcommand: " + sub);
    });
    out.report["status"] = out.status;
    return out;
}

inline void write_outcome(const PipelineOutcome& out, const std::string& sub,
                          const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream f(fs::path(out_dir) / (sub + "_report.json"));
        if (!f) throw ValidationError("cannot write report in " + out_dir);
        f << out.report.dump(2) << "\n";
    }
    for (const auto& [name, body] : out.series) {
        std::ofstream f(fs::path(out_dir) / (sub + "_" + name + ".csv"));
        if (!f) throw ValidationError("cannot write series " + name + " in " + out_dir);
        f << body;
    }
}

}  // namespace kamtor
