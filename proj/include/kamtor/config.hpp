//==============================================================================
// config.hpp
// Solver configuration: schema, validation, JSON round trip.
// Features:
//   • SolverConfig: every knob of the solver with explicit defaults; loading
//     resolves all defaults so the emitted effective config is complete.
//   • load_config / save_config: JSON file round trip; ParseError carries the
//     parser's line/column message, ValidationError lists every violated
//     invariant in one throw.
//   • Factories: index sets, model (with the optional 1/k frequency
//     correction), Nash-Moser and measure parameter blocks.
//==============================================================================
#pragma once

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "measure.hpp"
#include "nashmoser.hpp"

namespace kamtor {

using nlohmann::json;

// Configuration file failed to parse (message carries position info).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

//------------------------------------------------------------------------------
// SolverConfig: all defaults explicit.  load_config resolves the derived
// defaults (tau, actions, sweeps) into the struct, so dump(load(x)) is stable.
//------------------------------------------------------------------------------
struct SolverConfig {
    // Index sets and truncations.
    std::vector<int> sites = {-1, 0, 1};  // tangential sites S (must contain 0)
    int K_normal = 8;
    int L_angle = 6;
    int grid_size = 0;  // x collocation points; 0 = model default

    // Frequency model.
    std::vector<double> xi;    // tangential actions; empty = 1 + i/10 ladder
    double corr_scale = 0.0;   // optional correction r_k(I) = corr_scale * sum I

    // Perturbation.
    double eps = 0.0;  // required in files
    std::vector<PerturbTerm> terms = {{1.0, 1, 4, 0}, {0.5, 0, 2, 2}};

    // Small divisors and the outer loop.
    double gamma = 1e-2;
    double tau = 0.0;  // 0 = default 2|S| + 1
    double N0 = 4.0;
    double chi = 1.5;
    int max_outer = 10;
    int mu1 = 1;
    double delta2 = 1e-2;

    // Tolerances.
    double tol_NM = 1e-10;
    double tol_reduction = 1e-10;
    double sigma = 2.0;

    // Inner reduction ladder.
    int red_N0 = 4;
    int red_max_steps = 12;
    double red_slack = 4.0;

    // Reproducibility and threading.
    unsigned long long seed = 1;
    int threads = 0;  // 0 = library default

    // Sweeps (measure / solve) and the action box of the frequency sampler.
    std::vector<double> eps_sweep;    // empty = single run at eps
    std::vector<double> gamma_sweep;  // empty = one-decade default grid
    int n_samples = 4096;
    int L_max_measure = 6;
    double box_lo = 0.8, box_hi = 1.2;  // action box as multipliers of xi

    // Stability probe.
    double horizon = 1e3;
    int stab_samples = 3;
    int stab_times = 96;

    //--------------------------------------------------------------------------
    double tau_effective() const {
        return (tau > 0) ? tau : 2.0 * static_cast<double>(sites.size()) + 1.0;
    }
    std::vector<double> xi_effective() const {
        if (!xi.empty()) return xi;
        std::vector<double> v(sites.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i);
        return v;
    }
    std::vector<double> gamma_sweep_effective() const {
        if (!gamma_sweep.empty()) return gamma_sweep;
        return {1e-3, 2.15e-3, 4.64e-3, 1e-2, 2.15e-2, 4.64e-2, 1e-1};
    }

    // Resolve every derived default in place (what load_config emits).
    void resolve() {
        tau = tau_effective();
        xi = xi_effective();
        gamma_sweep = gamma_sweep_effective();
    }

    bool operator==(const SolverConfig&) const = default;
};

inline bool operator==(const PerturbTerm& a, const PerturbTerm& b) {
    return a.coeff == b.coeff && a.harmonic == b.harmonic && a.p1 == b.p1 && a.p2 == b.p2;
}

//------------------------------------------------------------------------------
// Validation: collect every violation, throw once.
//------------------------------------------------------------------------------
inline std::vector<std::string> config_violations(const SolverConfig& c) {
    std::vector<std::string> v;
    if (c.sites.empty() || std::find(c.sites.begin(), c.sites.end(), 0) == c.sites.end())
        v.push_back("sites must be nonempty and contain 0");
    for (int s : c.sites)
        if (std::find(c.sites.begin(), c.sites.end(), -s) == c.sites.end())
            v.push_back("sites must be symmetric: missing " + std::to_string(-s));
    int maxS = 0;
    for (int s : c.sites) maxS = std::max(maxS, std::abs(s));
    if (c.K_normal <= maxS) v.push_back("K_normal must exceed max |site|");
    if (c.L_angle < 1) v.push_back("L_angle must be >= 1");
    if (!(c.eps >= 0)) v.push_back("eps must be >= 0");
    if (!(c.gamma > 0 && c.gamma < 0.25)) v.push_back("gamma must lie in (0, 1/4)");
    if (c.tau < 0) v.push_back("tau must be >= 0 (0 selects the default)");
    if (!(c.N0 > 1)) v.push_back("N0 must be > 1");
    if (!(c.chi > 1)) v.push_back("chi must be > 1");
    if (c.max_outer < 1) v.push_back("max_outer must be >= 1");
    if (!(c.tol_NM > 0)) v.push_back("tol_NM must be > 0");
    if (!(c.sigma >= 2)) v.push_back("sigma must be >= 2");
    if (!c.xi.empty() && c.xi.size() != c.sites.size())
        v.push_back("xi must have one action per site");
    for (double x : c.xi)
        if (!(x > 0)) v.push_back("xi entries must be positive");
    if (c.n_samples < 1) v.push_back("n_samples must be >= 1");
    if (!(0 < c.box_lo && c.box_lo < c.box_hi))
        v.push_back("action box multipliers need 0 < box_lo < box_hi");
    for (double g : c.gamma_sweep)
        if (!(g > 0)) v.push_back("gamma_sweep entries must be positive");
    for (double e : c.eps_sweep)
        if (!(e > 0)) v.push_back("eps_sweep entries must be positive");
    if (!(c.horizon > 0)) v.push_back("horizon must be positive");
    return v;
}

inline void validate_config(const SolverConfig& c) {
    auto v = config_violations(c);
    if (v.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw ValidationError(msg);
}

//------------------------------------------------------------------------------
// JSON round trip.  Every key is optional except eps; unknown keys are
// reported so typos cannot silently fall back to defaults.
//------------------------------------------------------------------------------
inline json config_to_json(const SolverConfig& c) {
    json jt = json::array();
    for (const auto& t : c.terms)
        jt.push_back({{"coeff", t.coeff}, {"harmonic", t.harmonic}, {"p1", t.p1}, {"p2", t.p2}});
    return json{{"schema", 1},
                {"sites", c.sites},
                {"K_normal", c.K_normal},
                {"L_angle", c.L_angle},
                {"grid_size", c.grid_size},
                {"xi", c.xi_effective()},
                {"corr_scale", c.corr_scale},
                {"eps", c.eps},
                {"terms", jt},
                {"gamma", c.gamma},
                {"tau", c.tau_effective()},
                {"N0", c.N0},
                {"chi", c.chi},
                {"max_outer", c.max_outer},
                {"mu1", c.mu1},
                {"delta2", c.delta2},
                {"tol_NM", c.tol_NM},
                {"tol_reduction", c.tol_reduction},
                {"sigma", c.sigma},
                {"red_N0", c.red_N0},
                {"red_max_steps", c.red_max_steps},
                {"red_slack", c.red_slack},
                {"seed", c.seed},
                {"threads", c.threads},
                {"eps_sweep", c.eps_sweep},
                {"gamma_sweep", c.gamma_sweep_effective()},
                {"n_samples", c.n_samples},
                {"L_max_measure", c.L_max_measure},
                {"box_lo", c.box_lo},
                {"box_hi", c.box_hi},
                {"horizon", c.horizon},
                {"stab_samples", c.stab_samples},
                {"stab_times", c.stab_times}};
}

inline SolverConfig config_from_json(const json& j) {
    SolverConfig c;
    std::vector<std::string> problems;
    std::set<std::string> seen;
    auto get = [&](const char* key, auto& slot) {
        seen.insert(key);
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(slot);
        } catch (const json::exception& e) {
            problems.push_back(std::string(key) + ": " + e.what());
        }
    };
    seen.insert("schema");
    seen.insert("terms");
    get("sites", c.sites);
    get("K_normal", c.K_normal);
    get("L_angle", c.L_angle);
    get("grid_size", c.grid_size);
    get("xi", c.xi);
    get("corr_scale", c.corr_scale);
    if (j.contains("eps"))
        get("eps", c.eps);
    else
        problems.push_back("eps: required key is missing");
    if (j.contains("terms")) {
        c.terms.clear();
        for (const auto& t : j.at("terms")) {
            PerturbTerm p;
            p.coeff = t.value("coeff", 0.0);
            p.harmonic = t.value("harmonic", 0);
            p.p1 = t.value("p1", 0);
            p.p2 = t.value("p2", 0);
            c.terms.push_back(p);
        }
    }
    get("gamma", c.gamma);
    get("tau", c.tau);
    get("N0", c.N0);
    get("chi", c.chi);
    get("max_outer", c.max_outer);
    get("mu1", c.mu1);
    get("delta2", c.delta2);
    get("tol_NM", c.tol_NM);
    get("tol_reduction", c.tol_reduction);
    get("sigma", c.sigma);
    get("red_N0", c.red_N0);
    get("red_max_steps", c.red_max_steps);
    get("red_slack", c.red_slack);
    get("seed", c.seed);
    get("threads", c.threads);
    get("eps_sweep", c.eps_sweep);
    get("gamma_sweep", c.gamma_sweep);
    get("n_samples", c.n_samples);
    get("L_max_measure", c.L_max_measure);
    get("box_lo", c.box_lo);
    get("box_hi", c.box_hi);
    get("horizon", c.horizon);
    get("stab_samples", c.stab_samples);
    get("stab_times", c.stab_times);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!seen.count(it.key())) problems.push_back(it.key() + ": unknown key");
    for (const auto& p : config_violations(c)) problems.push_back(p);
    if (!problems.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& s : problems) msg += "\n  - " + s;
        throw ValidationError(msg);
    }
    c.resolve();
    return c;
}

inline SolverConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("config parse error: ") + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const SolverConfig& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write config file: " + path);
    out << config_to_json(c).dump(2) << "\n";
}

//------------------------------------------------------------------------------
// Factories.
//------------------------------------------------------------------------------
inline IndexSets make_index_sets(const SolverConfig& c) {
    return IndexSets::make(c.sites, c.K_normal, c.L_angle);
}

inline Model make_model(const SolverConfig& c, double eps_override = -1.0,
                        const std::vector<double>* xi_override = nullptr) {
    IndexSets idx = make_index_sets(c);
    std::vector<double> xv = xi_override ? *xi_override : c.xi_effective();
    Vec xi = Eigen::Map<const Vec>(xv.data(), static_cast<int>(xv.size()));
    CorrectionHook corr = nullptr;
    if (c.corr_scale != 0.0) {
        const double s = c.corr_scale;
        corr = [s](int, const ActionVector& I) { return s * I.sum(); };
    }
    Model mdl(idx, xi, (eps_override >= 0) ? eps_override : c.eps, c.terms, corr);
    // Never drop below the model's anti-aliasing minimum.
    if (c.grid_size > 0) mdl.Gx = std::max(mdl.Gx, c.grid_size);
    return mdl;
}

inline NashMoserConfig make_nm_config(const SolverConfig& c) {
    NashMoserConfig n;
    n.gamma = c.gamma;
    n.tau = c.tau_effective();
    n.N0 = c.N0;
    n.chi = c.chi;
    n.max_outer = c.max_outer;
    n.tol_NM = c.tol_NM;
    n.sigma = c.sigma;
    n.mu1 = c.mu1;
    n.delta2 = c.delta2;
    n.ropt.N0 = c.red_N0;
    n.ropt.max_steps = c.red_max_steps;
    n.ropt.target_rel = c.tol_reduction;
    n.ropt.sigma = c.sigma;
    n.ropt.slack = c.red_slack;
    return n;
}

inline MeasureParams make_measure_params(const SolverConfig& c) {
    MeasureParams m;
    m.tau = c.tau_effective();
    m.tau_star = static_cast<double>(c.sites.size()) + 1.0;
    m.L_max = c.L_max_measure;
    m.n_samples = c.n_samples;
    m.seed = c.seed;
    m.gammas = c.gamma_sweep_effective();
    return m;
}

}  // namespace kamtor
