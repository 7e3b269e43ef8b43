#include "twinforge/config.hpp"

#include <fstream>

#include "json.hpp"

namespace twinforge {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& field, const std::string& what) {
    throw error(errc::config, "config." + field + ": " + what);
}

template <typename T>
T require(const json& obj, const std::string& field, const char* context) {
    if (!obj.contains(field)) fail(std::string(context) + field, "missing");
    try {
        return obj.at(field).get<T>();
    } catch (const json::exception&) {
        fail(std::string(context) + field, "wrong type");
    }
}

template <typename T>
T optional(const json& obj, const std::string& field, T fallback) {
    if (!obj.contains(field)) return fallback;
    try {
        return obj.at(field).get<T>();
    } catch (const json::exception&) {
        throw error(errc::config, "config." + field + ": wrong type");
    }
}

InitialCondition parse_ic(const json& ic) {
    const auto kind = require<std::string>(ic, "kind", "case.ic.");
    if (kind == "sine")
        return InitialCondition::sine(require<double>(ic, "amplitude", "case.ic."),
                                      require<double>(ic, "offset", "case.ic."));
    if (kind == "gaussian")
        return InitialCondition::gaussian(require<double>(ic, "center", "case.ic."),
                                          require<double>(ic, "width", "case.ic."),
                                          require<double>(ic, "height", "case.ic."));
    if (kind == "step")
        return InitialCondition::step(require<double>(ic, "left", "case.ic."),
                                      require<double>(ic, "right", "case.ic."),
                                      require<double>(ic, "jump_pos", "case.ic."));
    fail("case.ic.kind", "unknown kind '" + kind + "'");
}

} // namespace

ControlField ExperimentConfig::make_control() const {
    if (control_scalar) return ControlField::constant(control_value);
    SpaceTimeField f(gray_case.grid, 1, control_value);
    return ControlField::grid(std::move(f));
}

Objective ExperimentConfig::make_objective() const {
    if (objective_kind == Objective::Kind::terminal_quadratic)
        return Objective::terminal_quadratic(objective_target);
    return Objective::spacetime_quadratic(objective_target,
                                          QuadratureWeights::trapezoid(gray_case.grid));
}

TwinModel ExperimentConfig::make_twin_prototype() const {
    TwinModel twin;
    twin.grid = gray_case.grid;
    twin.ic = gray_case.ic;
    twin.cfl = gray_case.cfl;
    twin.scheme = TwinScheme::rusanov_forward_euler;
    return twin;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw error(errc::config, "config: cannot open " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw error(errc::config, std::string("config: parse failure: ") + e.what());
    }

    ExperimentConfig cfg;
    cfg.schema = require<int>(doc, "schema", "");
    if (cfg.schema != 1) fail("schema", "unsupported version " + std::to_string(cfg.schema));
    cfg.seed = require<std::uint64_t>(doc, "seed", "");
    cfg.output_dir = require<std::string>(doc, "output_dir", "");
    cfg.jobs = optional<int>(doc, "jobs", 1);
    if (cfg.jobs < 1) fail("jobs", "must be >= 1");

    if (!doc.contains("case")) fail("case", "missing");
    const json& cs = doc.at("case");
    const auto flux = require<std::string>(cs, "flux", "case.");
    if (flux == "buckley_leverett") cfg.gray_case.flux_kind = FluxKind::buckley_leverett;
    else if (flux == "linear_advection") cfg.gray_case.flux_kind = FluxKind::linear_advection;
    else if (flux == "burgers") cfg.gray_case.flux_kind = FluxKind::burgers;
    else fail("case.flux", "unknown flux '" + flux + "'");
    cfg.gray_case.advection_speed = optional<double>(cs, "advection_speed", 1.0);
    if (!cs.contains("ic")) fail("case.ic", "missing");
    cfg.gray_case.ic = parse_ic(cs.at("ic"));
    if (!cs.contains("grid")) fail("case.grid", "missing");
    const json& gr = cs.at("grid");
    cfg.gray_case.grid = Grid::uniform(
        require<int>(gr, "M", "case.grid."), require<int>(gr, "N", "case.grid."),
        require<double>(gr, "T", "case.grid."),
        {require<double>(gr, "x_lo", "case.grid."), require<double>(gr, "x_hi", "case.grid.")});
    cfg.gray_case.cfl = require<double>(cs, "cfl", "case.");
    cfg.gray_case.validate();

    if (doc.contains("control")) {
        const json& ct = doc.at("control");
        const auto kind = require<std::string>(ct, "kind", "control.");
        if (kind == "scalar") cfg.control_scalar = true;
        else if (kind == "grid") cfg.control_scalar = false;
        else fail("control.kind", "unknown kind '" + kind + "'");
        cfg.control_value = optional<double>(ct, "value", 0.0);
    }

    if (doc.contains("objective")) {
        const json& ob = doc.at("objective");
        const auto kind = require<std::string>(ob, "kind", "objective.");
        if (kind == "terminal_quadratic") cfg.objective_kind = Objective::Kind::terminal_quadratic;
        else if (kind == "spacetime_quadratic") cfg.objective_kind = Objective::Kind::spacetime_quadratic;
        else fail("objective.kind", "unknown kind '" + kind + "'");
        cfg.objective_target = optional<double>(ob, "target", 0.5);
    }

    cfg.train.seed = cfg.seed;
    cfg.train.jobs = cfg.jobs;
    if (doc.contains("train")) {
        const json& tr = doc.at("train");
        cfg.train.k_folds = optional<int>(tr, "k_folds", 2);
        if (cfg.train.k_folds < 2) fail("train.k_folds", "must be >= 2");
        cfg.train.l1_weight = optional<double>(tr, "l1_weight", 0.0);
        if (cfg.train.l1_weight < 0.0) fail("train.l1_weight", "must be >= 0");
        cfg.train.max_outer_iters = optional<int>(tr, "max_outer_iters", 64);
        if (tr.contains("bfgs")) {
            const json& bf = tr.at("bfgs");
            cfg.train.bfgs.grad_tol = optional<double>(bf, "grad_tol", cfg.train.bfgs.grad_tol);
            cfg.train.bfgs.max_iters = optional<int>(bf, "max_iters", cfg.train.bfgs.max_iters);
            if (!(cfg.train.bfgs.grad_tol > 0.0)) fail("train.bfgs.grad_tol", "must be positive");
        }
        if (tr.contains("sgd")) {
            const json& sg = tr.at("sgd");
            cfg.train.sgd.step = optional<double>(sg, "step", cfg.train.sgd.step);
            cfg.train.sgd.batch = optional<int>(sg, "batch", cfg.train.sgd.batch);
            cfg.train.sgd.epochs = optional<int>(sg, "epochs", cfg.train.sgd.epochs);
            cfg.train.sgd.tol = optional<double>(sg, "tol", cfg.train.sgd.tol);
            if (!(cfg.train.sgd.tol > 0.0)) fail("train.sgd.tol", "must be positive");
        }
    }
    return cfg;
}

} // namespace twinforge
