//==============================================================================
// kamtor.cpp
// Command-line front end of the torus solver.
// Features:
//   • Subcommands: solve, reduce, measure, stability.
//   • Flags: --config --out --omega --sweep --seed --threads; the environment
//     variable KAMTOR_MAX_THREADS caps the thread count.
//   • Exit codes: 0 success, 2 frequency excluded (diophantine / Melnikov
//     witness in the report), 1 operational error.
//==============================================================================
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "kamtor/kamtor.hpp"

namespace {

int thread_cap(int requested) {
    int cap = 0;
    if (const char* env = std::getenv("KAMTOR_MAX_THREADS")) cap = std::atoi(env);
    if (requested <= 0) return cap;
    return (cap > 0) ? std::min(requested, cap) : requested;
}

void print_summary(const kamtor::PipelineOutcome& out, const std::string& sub) {
    using kamtor::json;
    if (out.status == kamtor::kExitExcluded) {
        std::cerr << "excluded: " << out.report.at("exclusion").at("message").get<std::string>()
                  << "\n";
        return;
    }
    if (out.status != kamtor::kExitOk) {
        std::cerr << "error: " << out.report.value("error", std::string("unknown")) << "\n";
        return;
    }
    if (out.report.contains("solve")) {
        const json& s = out.report.at("solve");
        std::cout << "converged in " << s.at("iters") << " iterations, residual "
                  << s.at("final_resid").get<double>() << "\n";
    } else if (out.report.contains("solve_sweep")) {
        const json& s = out.report.at("solve_sweep");
        std::cout << "eps sweep done";
        if (s.contains("y_slope"))
            std::cout << ": y slope " << s.at("y_slope").get<double>() << ", z slope "
                      << s.at("z_slope").get<double>();
        std::cout << "\n";
    } else if (out.report.contains("reduce")) {
        const json& r = out.report.at("reduce");
        std::cout << "reduction finished in " << r.at("steps") << " steps, audit "
                  << r.at("audit").get<double>() << "\n";
    } else if (out.report.contains("measure")) {
        std::cout << "measure sweep done, diophantine slope "
                  << out.report.at("measure").at("dio_slope").get<double>() << "\n";
    } else if (out.report.contains("stability")) {
        std::cout << "stability sup ratio "
                  << out.report.at("stability").at("sup_ratio").get<double>() << "\n";
    }
    (void)sub;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quasi-periodic invariant torus solver"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    std::vector<double> omega_flag, sweep_flag;
    long long seed_flag = -1;
    int threads_flag = 0;

    app.add_option("--config", config_path, "JSON configuration file")->required();
    app.add_option("--out", out_dir, "output directory for reports and CSV series");
    app.add_option("--omega", omega_flag,
                   "target frequency vector (defaults to the configured actions)");
    app.add_option("--sweep", sweep_flag,
                   "sweep values: eps list for solve, gamma list for measure");
    app.add_option("--seed", seed_flag, "override the configured RNG seed");
    app.add_option("--threads", threads_flag, "thread cap (0 = library default)");

    for (const char* name : {"solve", "reduce", "measure", "stability"})
        app.add_subcommand(name)->fallthrough();  // accept global flags after the verb

    CLI11_PARSE(app, argc, argv);
    const std::string sub = app.get_subcommands().front()->get_name();

    try {
        kamtor::SolverConfig cfg = kamtor::load_config(config_path);
        if (seed_flag >= 0) cfg.seed = static_cast<unsigned long long>(seed_flag);
        cfg.threads = thread_cap(threads_flag > 0 ? threads_flag : cfg.threads);
        if (cfg.threads > 0) Eigen::setNbThreads(cfg.threads);
        if (!sweep_flag.empty()) {
            if (sub == "measure")
                cfg.gamma_sweep = sweep_flag;
            else
                cfg.eps_sweep = sweep_flag;
        }
        std::optional<kamtor::Vec> omega;
        if (!omega_flag.empty())
            omega = Eigen::Map<const kamtor::Vec>(omega_flag.data(),
                                                  static_cast<int>(omega_flag.size()));

        kamtor::PipelineOutcome out = kamtor::run_pipeline(cfg, sub, omega);
        kamtor::write_outcome(out, sub, out_dir);
        print_summary(out, sub);
        return out.status;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kamtor::kExitError;
    }
}
