// twinforge: infer an adjoint-enabled twin model from a gray-box 1-D
// conservation-law solution, then estimate objective gradients at a cost
// independent of the control dimension.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "json.hpp"

#include "twinforge/config.hpp"
#include "twinforge/oracle.hpp"
#include "twinforge/parallel.hpp"

namespace tf = twinforge;
using nlohmann::ordered_json;

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_json(const std::filesystem::path& path, const ordered_json& doc) {
    std::ofstream out(path);
    if (!out) throw tf::error(tf::errc::io, "cannot open " + path.string());
    out << doc.dump(2) << "\n";
}

ordered_json train_report_json(const tf::TrainReport& rep) {
    ordered_json steps = ordered_json::array();
    for (const auto& st : rep.steps) {
        ordered_json s;
        s["kind"] = st.kind == tf::TrainStep::Kind::forward ? "forward" : "backward";
        s["j"] = st.basis.j;
        s["eta"] = st.basis.eta;
        s["significance"] = st.significance;
        s["validation_error"] = st.validation_error;
        s["accepted"] = st.accepted;
        s["skipped"] = st.skipped;
        s["dictionary_size"] = st.dictionary_size;
        steps.push_back(std::move(s));
    }
    ordered_json doc;
    doc["metric"] = rep.metric == tf::TrainMetric::mismatch ? "mismatch" : "truncation";
    doc["steps"] = std::move(steps);
    doc["accepted_validation_errors"] = rep.accepted_validation_errors;
    doc["final_inner_objective"] = rep.final_inner_objective;
    doc["final_validation_error"] = rep.final_validation_error;
    doc["dictionary_size"] = rep.dictionary.size();
    doc["reached_outer_limit"] = rep.reached_outer_limit;
    doc["twin_solves"] = rep.twin_solves;
    return doc;
}

struct Paths {
    std::filesystem::path dir;
    std::filesystem::path gray() const { return dir / "gray_solution.field"; }
    std::filesystem::path gray_meta() const { return dir / "simulate_meta.json"; }
    std::filesystem::path dictionary() const { return dir / "dictionary.json"; }
    std::filesystem::path train_report() const { return dir / "train_report.json"; }
    std::filesystem::path gradcheck_csv() const { return dir / "gradcheck.csv"; }
    std::filesystem::path gradient_report() const { return dir / "gradient_report.json"; }
    std::filesystem::path twin_grad() const { return dir / "twin_gradient.field"; }
    std::filesystem::path gray_grad() const { return dir / "gray_gradient.field"; }
};

int cmd_simulate(const tf::ExperimentConfig& cfg) {
    Paths paths{cfg.output_dir};
    std::filesystem::create_directories(paths.dir);
    tf::GraySolveStats stats;
    const tf::ControlField control = cfg.make_control();
    const tf::SpaceTimeField gray = tf::graybox_solve(cfg.gray_case, control, &stats);
    tf::write_field(paths.gray(), gray);
    ordered_json meta;
    meta["scheme"] = "rusanov_forward_euler";
    meta["substeps"] = stats.substeps;
    meta["conservation_drift"] = stats.conservation_drift;
    meta["objective"] = tf::graybox_objective(gray);
    write_json(paths.gray_meta(), meta);
    std::cout << "wrote " << paths.gray().string() << " (" << stats.substeps << " substeps)\n";
    return 0;
}

int cmd_train(const tf::ExperimentConfig& cfg, const std::string& metric_mode,
              const std::string& basis_mode) {
    Paths paths{cfg.output_dir};
    if (!std::filesystem::exists(paths.gray()))
        throw tf::error(tf::errc::config, "missing gray solution " + paths.gray().string() +
                                              " (run simulate first)");
    const tf::SpaceTimeField gray = tf::read_field(paths.gray());
    const tf::ControlField control = cfg.make_control();
    const auto weights = tf::QuadratureWeights::trapezoid(cfg.gray_case.grid);
    tf::TwinModel twin = cfg.make_twin_prototype();

    const bool pretrain = metric_mode == "pretrain+finetune";
    if (!pretrain && metric_mode != "mismatch")
        throw tf::error(tf::errc::config, "--metric must be mismatch or pretrain+finetune");

    ordered_json doc;
    doc["metric_mode"] = metric_mode;
    doc["basis_mode"] = basis_mode;

    if (basis_mode == "adaptive") {
        tf::TrainReport rep;
        if (pretrain) {
            tf::reset_twin_solve_count();
            rep = tf::adaptive_train(twin, gray, control, weights, cfg.train,
                                     tf::TrainMetric::truncation);
            doc["pretrain_twin_solves"] = tf::twin_solve_count();
            doc["pretrain_report"] = train_report_json(rep);
            twin.dict = rep.dictionary;
            auto fine = tf::minimize_inner(twin, gray, control, weights, nullptr,
                                           tf::TrainMetric::mismatch, cfg.train);
            twin.dict.set_alphas(fine.alpha);
            doc["final_mismatch"] = fine.objective;
            rep.dictionary = twin.dict;
        } else {
            rep = tf::adaptive_train(twin, gray, control, weights, cfg.train,
                                     tf::TrainMetric::mismatch);
            twin.dict = rep.dictionary;
            doc["final_mismatch"] = rep.final_inner_objective;
        }
        doc["report"] = train_report_json(rep);
        tf::save_dictionary(paths.dictionary(), twin.dict);
    } else if (basis_mode.rfind("adhoc:", 0) == 0) {
        // fixed dictionary: train coefficients only, no dictionary edits
        twin.dict = tf::load_dictionary(basis_mode.substr(6));
        if (pretrain) {
            tf::reset_twin_solve_count();
            auto sgd = tf::sgd_pretrain(twin, gray, control, weights, cfg.train);
            twin.dict.set_alphas(sgd.alpha);
            doc["pretrain_twin_solves"] = tf::twin_solve_count();
            doc["pretrain_initial_truncation"] = sgd.initial_error;
            doc["pretrain_final_truncation"] = sgd.final_error;
            if (sgd.diverged)
                throw tf::error(tf::errc::numeric, "sgd_pretrain diverged; reduce train.sgd.step");
        } else {
            // seed from the truncation-error minimizer (same recipe as the
            // adaptive pipeline): it starts the mismatch fit in the physical
            // flux basin
            auto seed = tf::minimize_inner(twin, gray, control, weights, nullptr,
                                           tf::TrainMetric::truncation, cfg.train);
            twin.dict.set_alphas(seed.alpha);
        }
        auto fit = tf::minimize_inner(twin, gray, control, weights, nullptr,
                                      tf::TrainMetric::mismatch, cfg.train);
        twin.dict.set_alphas(fit.alpha);
        doc["final_mismatch"] = fit.objective;
        doc["line_search_failed"] = fit.line_search_failed;
        tf::save_dictionary(paths.dictionary(), twin.dict);
    } else {
        throw tf::error(tf::errc::config, "--basis must be adaptive or adhoc:<file>");
    }
    write_json(paths.train_report(), doc);
    std::cout << "wrote " << paths.dictionary().string() << "\n";
    return 0;
}

int cmd_gradcheck(const tf::ExperimentConfig& cfg, int components, double fd_step) {
    Paths paths{cfg.output_dir};
    std::vector<std::string> missing;
    for (const auto& p : {paths.gray(), paths.dictionary()})
        if (!std::filesystem::exists(p)) missing.push_back(p.string());
    if (!missing.empty()) {
        std::string msg = "missing inputs:";
        for (const auto& m : missing) msg += " " + m;
        throw tf::error(tf::errc::config, msg);
    }

    const tf::SpaceTimeField gray = tf::read_field(paths.gray());
    tf::TwinModel twin = cfg.make_twin_prototype();
    twin.dict = tf::load_dictionary(paths.dictionary());
    const tf::ControlField control = cfg.make_control();
    const tf::Objective objective = cfg.make_objective();
    const tf::Grid& grid = cfg.gray_case.grid;
    const auto weights = tf::QuadratureWeights::trapezoid(grid);

    // twin adjoint gradient: one solve for the whole control
    tf::reset_twin_solve_count();
    const auto adjoint = tf::grad_objective_control(twin, objective, control);
    const long adjoint_solves = tf::twin_solve_count();

    const std::vector<double> flat = tf::flatten_control(control, grid);
    auto twin_eval = [&](std::span<const double> c) {
        return tf::grad_objective_control(twin, objective, tf::control_like(control, grid, c))
            .objective;
        // (value-only path shares the taped solver, so FD sees the same arithmetic)
    };
    auto adjoint_at = [&](long idx) {
        if (adjoint.scalar) return adjoint.scalar_grad;
        return (*adjoint.grad)(static_cast<int>(idx / grid.space_nodes()),
                               static_cast<int>(idx % grid.space_nodes()));
    };

    // sampled twin-FD components: the adjoint must reproduce them
    std::vector<long> sample;
    if (control.is_scalar()) {
        sample.push_back(0);
    } else {
        std::mt19937_64 eng(cfg.seed ^ 0xfd5a7ull);
        const int n_active_rows = grid.time_nodes() - 1;
        const int n_active_cols = grid.space_nodes() - 1;
        for (int c = 0; c < components; ++c) {
            const int i = 1 + static_cast<int>(eng() % n_active_rows);
            const int j = static_cast<int>(eng() % n_active_cols);
            sample.push_back(static_cast<long>(i) * grid.space_nodes() + j);
        }
    }

    std::ofstream csv(paths.gradcheck_csv());
    csv << "component,adjoint,fd,rel_err\n";
    double max_rel = 0.0;
    int fd_zero_denominator = 0;
    std::vector<double> c_work(flat);
    for (long idx : sample) {
        const double saved = c_work[idx];
        c_work[idx] = saved + fd_step;
        const double plus = twin_eval(c_work);
        c_work[idx] = saved - fd_step;
        const double minus = twin_eval(c_work);
        c_work[idx] = saved;
        const double fd = (plus - minus) / (2.0 * fd_step);
        const double adj = adjoint_at(idx);
        double rel;
        if (fd == 0.0) {
            rel = std::abs(adj - fd); // absolute error when the FD slope vanishes
            ++fd_zero_denominator;
        } else {
            rel = std::abs(adj - fd) / std::abs(fd);
        }
        max_rel = std::max(max_rel, rel);
        csv << idx << ',' << fmt17(adj) << ',' << fmt17(fd) << ',' << fmt17(rel) << "\n";
    }
    csv.close();

    // gray-box truth by central differences over the full control grid
    auto gray_eval = [&](std::span<const double> c) {
        return tf::graybox_objective(
            tf::graybox_solve(cfg.gray_case, tf::control_like(control, grid, c)));
    };
    tf::reset_graybox_solve_count();
    const std::vector<double> gray_grad = tf::fd_gradient(gray_eval, flat, fd_step);
    const long gray_solves = tf::graybox_solve_count();

    // quadrature integral of |adjoint - truth| over the control grid (the
    // squared form is reported alongside)
    double integrated_error = 0.0;
    double integrated_error_sq = 0.0;
    if (control.is_scalar()) {
        const double d = adjoint.scalar_grad - gray_grad[0];
        integrated_error = std::abs(d);
        integrated_error_sq = d * d;
    } else {
        tf::SpaceTimeField tw_g(grid, 1), gr_g(grid, 1);
        for (int i = 0; i < grid.time_nodes(); ++i)
            for (int j = 0; j < grid.space_nodes(); ++j) {
                const long idx = static_cast<long>(i) * grid.space_nodes() + j;
                tw_g.at(i, j) = adjoint_at(idx);
                gr_g.at(i, j) = gray_grad[idx];
                const double d = tw_g(i, j) - gr_g(i, j);
                integrated_error += weights(i, j) * std::abs(d);
                integrated_error_sq += weights(i, j) * d * d;
            }
        tf::write_field(paths.twin_grad(), tw_g);
        tf::write_field(paths.gray_grad(), gr_g);
    }

    ordered_json doc;
    doc["fd_step"] = fd_step;
    doc["components"] = static_cast<int>(sample.size());
    doc["max_rel_err_adjoint_vs_fd"] = max_rel;
    doc["fd_zero_denominator_components"] = fd_zero_denominator;
    doc["integrated_gradient_error"] = integrated_error;
    doc["integrated_gradient_error_sq"] = integrated_error_sq;
    doc["objective"] = adjoint.objective;
    doc["twin_solves_adjoint"] = adjoint_solves;
    doc["gray_solves_fd"] = gray_solves;
    if (control.is_scalar()) {
        doc["adjoint_gradient"] = adjoint.scalar_grad;
        doc["gray_fd_gradient"] = gray_grad[0];
    }
    write_json(paths.gradient_report(), doc);
    std::cout << "max adjoint-vs-FD rel err " << max_rel << ", integrated gradient error "
              << integrated_error << "\n";
    return 0;
}

int cmd_report(const tf::ExperimentConfig& cfg) {
    Paths paths{cfg.output_dir};
    std::vector<std::string> missing;
    for (const auto& p :
         {paths.gray(), paths.dictionary(), paths.train_report(), paths.gradient_report()})
        if (!std::filesystem::exists(p)) missing.push_back(p.string());
    if (!missing.empty()) {
        std::string msg = "missing inputs:";
        for (const auto& m : missing) msg += " " + m;
        throw tf::error(tf::errc::config, msg);
    }

    const tf::SpaceTimeField gray = tf::read_field(paths.gray());
    tf::TwinModel twin = cfg.make_twin_prototype();
    twin.dict = tf::load_dictionary(paths.dictionary());
    const tf::ControlField control = cfg.make_control();

    double u_min = gray(0, 0), u_max = u_min;
    for (int i = 0; i < gray.grid().time_nodes(); ++i)
        for (int j = 0; j < gray.grid().space_nodes(); ++j) {
            u_min = std::min(u_min, gray(i, j));
            u_max = std::max(u_max, gray(i, j));
        }

    // flux curves vs the oracle (verification path)
    {
        std::ofstream csv(paths.dir / "flux_compare.csv");
        csv << "u,F_true,F_twin,dF_true,dF_twin,in_range\n";
        const double pad = 0.25 * (u_max - u_min);
        const double lo = u_min - pad, hi = u_max + pad;
        for (int s = 0; s <= 200; ++s) {
            const double u = lo + (hi - lo) * s / 200;
            const auto tr = tf::oracle::true_flux(cfg.gray_case.flux_kind, u,
                                                  cfg.gray_case.advection_speed);
            const auto tw = twin.dict.eval1(u);
            csv << fmt17(u) << ',' << fmt17(tr.f) << ',' << fmt17(tw.value) << ',' << fmt17(tr.df)
                << ',' << fmt17(tw.derivative) << ',' << (u >= u_min && u <= u_max ? 1 : 0)
                << "\n";
        }
    }

    // validation-error history from the train report
    ordered_json train_doc;
    {
        std::ifstream in(paths.train_report());
        in >> train_doc;
        std::ofstream csv(paths.dir / "mismatch_history.csv");
        csv << "step,kind,accepted,validation_error,dictionary_size\n";
        const ordered_json* rep = train_doc.contains("report") ? &train_doc["report"] : nullptr;
        if (rep && rep->contains("steps")) {
            int n = 0;
            for (const auto& st : (*rep)["steps"]) {
                csv << n++ << ',' << st["kind"].get<std::string>() << ','
                    << (st["accepted"].get<bool>() ? 1 : 0) << ','
                    << fmt17(st["validation_error"].get<double>()) << ','
                    << st["dictionary_size"].get<int>() << "\n";
            }
        }
    }

    // gradient overlay (grid controls write full fields during gradcheck)
    if (std::filesystem::exists(paths.twin_grad()) && std::filesystem::exists(paths.gray_grad())) {
        const tf::SpaceTimeField tw = tf::read_field(paths.twin_grad());
        const tf::SpaceTimeField gr = tf::read_field(paths.gray_grad());
        std::ofstream csv(paths.dir / "gradient_overlay.csv");
        csv << "t,x,twin_grad,gray_grad,abs_err\n";
        const tf::Grid& g = tw.grid();
        for (int i = 0; i < g.time_nodes(); ++i)
            for (int j = 0; j < g.space_nodes(); ++j)
                csv << fmt17(g.t(i)) << ',' << fmt17(g.x(j)) << ',' << fmt17(tw(i, j)) << ','
                    << fmt17(gr(i, j)) << ',' << fmt17(std::abs(tw(i, j) - gr(i, j))) << "\n";
    }

    const auto weights = tf::QuadratureWeights::trapezoid(cfg.gray_case.grid);
    const double final_mismatch = tf::mismatch(tf::twin_solve(twin, control), gray, weights);
    auto oracle_fn = [&](double u) {
        const auto fe =
            tf::oracle::true_flux(cfg.gray_case.flux_kind, u, cfg.gray_case.advection_speed);
        return std::pair<double, double>(fe.f, fe.df);
    };
    const auto recovery = tf::flux_recovery_report(twin, oracle_fn, gray, control);

    ordered_json grad_doc;
    {
        std::ifstream in(paths.gradient_report());
        in >> grad_doc;
    }
    ordered_json summary;
    summary["dictionary_size"] = twin.dict.size();
    summary["final_mismatch"] = final_mismatch;
    summary["u_range"] = {u_min, u_max};
    summary["flux_derivative_rel_l2_in_range"] = recovery.derivative_rel_l2;
    summary["flux_value_offset"] = recovery.mean_value_offset;
    summary["integrated_gradient_error"] = grad_doc["integrated_gradient_error"];
    summary["max_rel_err_adjoint_vs_fd"] = grad_doc["max_rel_err_adjoint_vs_fd"];
    write_json(paths.dir / "summary.json", summary);
    std::cout << "wrote " << (paths.dir / "summary.json").string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"twinforge: adjoint gradients for gray-box 1-D conservation laws"};
    app.require_subcommand(1);

    std::string config_path;
    std::string metric_mode = "mismatch";
    std::string basis_mode = "adaptive";
    int components = 5;
    double fd_step = 1e-5;
    int jobs = 0;
    app.add_option("--jobs", jobs, "worker threads for folds and FD columns");

    auto* sim = app.add_subcommand("simulate", "run the gray box and store its solution");
    sim->add_option("config", config_path)->required();
    auto* train = app.add_subcommand("train", "train a twin model on the stored solution");
    train->add_option("config", config_path)->required();
    train->add_option("--metric", metric_mode, "mismatch | pretrain+finetune");
    train->add_option("--basis", basis_mode, "adaptive | adhoc:<file>");
    auto* grad = app.add_subcommand("gradcheck", "compare adjoint gradients with the FD oracle");
    grad->add_option("config", config_path)->required();
    grad->add_option("--components", components, "sampled control components");
    grad->add_option("--fd-step", fd_step, "central difference step");
    auto* rep = app.add_subcommand("report", "emit plot-ready CSVs and a summary");
    rep->add_option("config", config_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        tf::ExperimentConfig cfg = tf::load_experiment_config(config_path);
        if (jobs > 0) {
            cfg.jobs = jobs;
            cfg.train.jobs = jobs;
        } else if (const char* env = std::getenv("TWINFORGE_JOBS")) {
            cfg.jobs = std::max(1, std::atoi(env));
            cfg.train.jobs = cfg.jobs;
        }
        if (sim->parsed()) return cmd_simulate(cfg);
        if (train->parsed()) return cmd_train(cfg, metric_mode, basis_mode);
        if (grad->parsed()) return cmd_gradcheck(cfg, components, fd_step);
        if (rep->parsed()) return cmd_report(cfg);
    } catch (const tf::error& e) {
        nlohmann::ordered_json payload;
        payload["error"]["kind"] = e.kind() == tf::errc::config  ? "config"
                                   : e.kind() == tf::errc::io    ? "io"
                                                                 : "numeric";
        payload["error"]["message"] = e.what();
        std::cerr << payload.dump() << "\n";
        return e.kind() == tf::errc::config ? 2 : 3;
    } catch (const std::exception& e) {
        nlohmann::ordered_json payload;
        payload["error"]["kind"] = "internal";
        payload["error"]["message"] = e.what();
        std::cerr << payload.dump() << "\n";
        return 3;
    }
    return 0;
}
