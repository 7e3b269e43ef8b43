#include "twinforge/twin.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>

namespace twinforge {

namespace {

std::atomic<long> g_twin_solves{0};
// Far beyond any sane twin configuration; wild trial coefficients during a
// line search fail here before a huge tape gets recorded.
constexpr long k_substep_cap = 1'000;

long pick_substeps(double dt_out, double amax, double cfl, double h, int interval) {
    long n_sub = 1;
    if (amax > 0.0) {
        // 1.25 headroom: wave speeds may grow within the interval
        n_sub = std::max<long>(1, static_cast<long>(std::ceil(dt_out * amax * 1.25 / (cfl * h))));
    }
    if (n_sub > k_substep_cap)
        throw error(errc::numeric, "twin_solve: CFL violation, interval " + std::to_string(interval) +
                                       " requires " + std::to_string(n_sub) + " substeps");
    return n_sub;
}

/// Substep count for one output interval: fixed from the speed cap when set
/// (alpha-independent, so training objectives stay smooth), otherwise from
/// the state's wave speeds.
long substeps_for(const TwinModel& twin, double dt_out, double state_amax, int interval) {
    if (twin.speed_cap > 0.0) {
        if (state_amax > twin.speed_cap)
            throw error(errc::numeric,
                        "twin_solve: wave speed " + std::to_string(state_amax) +
                            " exceeds the training speed cap at interval " + std::to_string(interval));
        return pick_substeps(dt_out, twin.speed_cap, twin.cfl, twin.grid.dx(), interval);
    }
    return pick_substeps(dt_out, state_amax, twin.cfl, twin.grid.dx(), interval);
}

double smooth_abs(double x, double eps) { return std::sqrt(x * x + eps * eps) - eps; }

double smooth_max(double a, double b, double eps) {
    const double d = a - b;
    return 0.5 * (a + b + (std::sqrt(d * d + eps * eps) - eps));
}

/// Plain-double dictionary flux mirroring TapedFlux's arithmetic order so a
/// taped solve and an untaped row advance produce bit-identical values.
struct PlainFlux {
    const Dictionary* dict;

    void eval(double u, double& value, double& deriv) const {
        value = 0.0;
        deriv = 0.0;
        for (int i = 0; i < dict->size(); ++i) {
            const BasisId& id = dict->id(i);
            const double scale = std::ldexp(1.0, id.j[0]);
            const double s = scale * u - static_cast<double>(id.eta[0]);
            const double phi = 1.0 / (1.0 + std::exp(-s));
            value = value + dict->alpha(i) * phi;
            const double dphi = phi * (1.0 - phi);
            deriv = deriv + scale * (dict->alpha(i) * dphi);
        }
    }

    double max_speed(std::span<const double> u) const {
        double amax = 0.0;
        for (double v : u) {
            double f, df;
            eval(v, f, df);
            amax = std::max(amax, std::abs(df));
        }
        return amax;
    }
};

/// One forward-Euler Rusanov substep on the periodic ring of unique cells.
void plain_substep(const PlainFlux& flux, double eps, std::vector<double>& u,
                   std::vector<double>& next, std::vector<double>& fv, std::vector<double>& fd,
                   std::vector<double>& fhat, double dt, double h,
                   const std::function<double(int)>& control_at) {
    const int nc = static_cast<int>(u.size());
    for (int j = 0; j < nc; ++j) {
        flux.eval(u[j], fv[j], fd[j]);
        fd[j] = smooth_abs(fd[j], eps);
    }
    for (int j = 0; j < nc; ++j) {
        const int r = j + 1 == nc ? 0 : j + 1;
        const double a = smooth_max(fd[j], fd[r], eps);
        fhat[j] = 0.5 * (fv[j] + fv[r]) - 0.5 * (a * (u[r] - u[j]));
    }
    const double coef = dt / h;
    for (int j = 0; j < nc; ++j) {
        const int l = j == 0 ? nc - 1 : j - 1;
        double t = u[j] - coef * (fhat[j] - fhat[l]);
        t = t + dt * control_at(j);
        next[j] = t;
    }
    u.swap(next);
}

struct TapedSolve {
    Tape tape;
    std::vector<int> alpha_nodes;
    int scalar_control_node = -1;
    std::vector<int> grid_control_nodes;        // i * N + j, zeros when scalar
    std::vector<std::vector<int>> state;        // M rows x nc
    SpaceTimeField solution;

    TapedSolve(const TwinModel& twin) : tape(twin.smooth_eps), solution(twin.grid, 1) {}

    int control_node(int i, int j) const {
        if (scalar_control_node >= 0) return scalar_control_node;
        return grid_control_nodes[static_cast<size_t>(i) * solution.grid().space_nodes() + j];
    }
};

/// Records the full explicit solve on a tape: dictionary coefficients and all
/// control degrees of freedom enter as tape inputs.
TapedSolve taped_solve_explicit(const TwinModel& twin, const ControlField& control) {
    const Grid& g = twin.grid;
    const int nc = g.space_nodes() - 1;
    TapedSolve rec(twin);
    Tape& tape = rec.tape;

    TapedFlux flux(tape, twin.dict);
    rec.alpha_nodes = flux.alpha_nodes();
    if (control.is_scalar()) {
        rec.scalar_control_node = tape.input(control.scalar_value());
    } else {
        rec.grid_control_nodes.resize(g.node_count());
        for (int i = 0; i < g.time_nodes(); ++i)
            for (int j = 0; j < g.space_nodes(); ++j)
                rec.grid_control_nodes[static_cast<size_t>(i) * g.space_nodes() + j] =
                    tape.input(control.values()(i, j));
    }

    std::vector<int> state(nc), next(nc), fv(nc), fd(nc), fhat(nc);
    for (int j = 0; j < nc; ++j) state[j] = tape.constant(twin.ic.eval(g.x(j)));
    rec.state.push_back(state);

    PlainFlux pf{&twin.dict};
    std::vector<double> uval(nc);
    const double h = g.dx();

    for (int i = 1; i < g.time_nodes(); ++i) {
        const double dt_out = g.t(i) - g.t(i - 1);
        for (int j = 0; j < nc; ++j) uval[j] = tape.value(state[j]);
        const long n_sub = substeps_for(twin, dt_out, pf.max_speed(uval), i);
        const double dt = dt_out / n_sub;
        const int dt_node = tape.constant(dt);
        const int coef_node = tape.constant(dt / h);
        const int half = tape.constant(0.5);
        try {
            for (long s = 0; s < n_sub; ++s) {
                for (int j = 0; j < nc; ++j) {
                    auto [f, df] = flux.record_value_and_derivative(tape, state[j]);
                    fv[j] = f;
                    fd[j] = tape.abs_smooth(df);
                }
                for (int j = 0; j < nc; ++j) {
                    const int r = j + 1 == nc ? 0 : j + 1;
                    const int a = tape.max_smooth(fd[j], fd[r]);
                    const int favg = tape.mul(half, tape.add(fv[j], fv[r]));
                    const int diss = tape.mul(half, tape.mul(a, tape.sub(state[r], state[j])));
                    fhat[j] = tape.sub(favg, diss);
                }
                for (int j = 0; j < nc; ++j) {
                    const int l = j == 0 ? nc - 1 : j - 1;
                    int t = tape.sub(state[j], tape.mul(coef_node, tape.sub(fhat[j], fhat[l])));
                    t = tape.add(t, tape.mul(dt_node, rec.control_node(i, j)));
                    next[j] = t;
                }
                state.swap(next);
            }
        } catch (const error& e) {
            if (e.kind() != errc::numeric) throw;
            throw error(errc::numeric, "twin_solve: non-finite state (blow-up) at output step " +
                                           std::to_string(i) + " (" + e.what() + ")");
        }
        rec.state.push_back(state);
    }

    for (int i = 0; i < g.time_nodes(); ++i) {
        for (int j = 0; j < nc; ++j) rec.solution.at(i, j) = tape.value(rec.state[i][j]);
        rec.solution.at(i, g.space_nodes() - 1) = rec.solution(i, 0);
    }
    return rec;
}

/// Sum over masked nodes of w_ij (utwin_ij - gray_ij)^2 recorded on the tape.
int record_mismatch(TapedSolve& rec, const SpaceTimeField& gray, const QuadratureWeights& weights,
                    const NodeMask* mask) {
    Tape& tape = rec.tape;
    const Grid& g = rec.solution.grid();
    const int nc = g.space_nodes() - 1;
    int acc = tape.constant(0.0);
    for (int i = 0; i < g.time_nodes(); ++i)
        for (int j = 0; j < g.space_nodes(); ++j) {
            if (mask && !mask->contains(i, j)) continue;
            const int unode = rec.state[i][j == nc ? 0 : j];
            const int d = tape.sub(unode, tape.constant(gray(i, j)));
            acc = tape.add(acc, tape.mul(tape.constant(weights(i, j)), tape.mul(d, d)));
        }
    return acc;
}

int record_objective(TapedSolve& rec, const Objective& objective) {
    Tape& tape = rec.tape;
    const Grid& g = rec.solution.grid();
    const int nc = g.space_nodes() - 1;
    int acc = tape.constant(0.0);
    if (objective.kind == Objective::Kind::terminal_quadratic) {
        const int last = g.time_nodes() - 1;
        for (int j = 0; j < g.space_nodes(); ++j) {
            const double w = (j == 0 || j == g.space_nodes() - 1) ? 0.5 * g.dx() : g.dx();
            const int unode = rec.state[last][j == nc ? 0 : j];
            const int d = tape.sub(unode, tape.constant(objective.target));
            acc = tape.add(acc, tape.mul(tape.constant(w), tape.mul(d, d)));
        }
    } else {
        const QuadratureWeights& w = *objective.weights;
        for (int i = 0; i < g.time_nodes(); ++i)
            for (int j = 0; j < g.space_nodes(); ++j) {
                const int unode = rec.state[i][j == nc ? 0 : j];
                const int d = tape.sub(unode, tape.constant(objective.target));
                acc = tape.add(acc, tape.mul(tape.constant(w(i, j)), tape.mul(d, d)));
            }
    }
    return acc;
}

// ---- implicit upwind variant -----------------------------------------------

struct ImplicitOps {
    int n;      // unknowns: nodes 1..N-1
    double nu;  // advection_speed * dt / h
    double bc;  // pinned inflow value at node 0

    void step(std::vector<double>& u, double dt, int row, const ControlField& control) const {
        // (1+nu) u_j - nu u_{j-1} = u_prev_j + dt c_j, forward substitution
        double prev_left = bc;
        for (int p = 0; p < n; ++p) {
            const double rhs = u[p] + dt * control.at(row, p + 1);
            u[p] = (rhs + nu * prev_left) / (1.0 + nu);
            prev_left = u[p];
        }
    }
};

ImplicitOps make_implicit_ops(const TwinModel& twin) {
    const Grid& g = twin.grid;
    ImplicitOps ops;
    ops.n = g.space_nodes() - 1;
    ops.nu = twin.advection_speed * g.dt() / g.dx();
    ops.bc = twin.ic.eval(g.domain().lo);
    return ops;
}

SpaceTimeField implicit_solve(const TwinModel& twin, const ControlField& control) {
    const Grid& g = twin.grid;
    ImplicitOps ops = make_implicit_ops(twin);
    SpaceTimeField out(g, 1);
    std::vector<double> u(ops.n);
    for (int p = 0; p < ops.n; ++p) u[p] = twin.ic.eval(g.x(p + 1));
    out.at(0, 0) = ops.bc;
    for (int p = 0; p < ops.n; ++p) out.at(0, p + 1) = u[p];
    for (int i = 1; i < g.time_nodes(); ++i) {
        ops.step(u, g.dt(), i, control);
        out.at(i, 0) = ops.bc;
        for (int p = 0; p < ops.n; ++p) {
            if (!std::isfinite(u[p]))
                throw error(errc::numeric,
                            "twin_solve: non-finite state (blow-up) at output step " + std::to_string(i));
            out.at(i, p + 1) = u[p];
        }
    }
    return out;
}

ControlGradient implicit_control_gradient(const TwinModel& twin, const Objective& objective,
                                          const ControlField& control) {
    const Grid& g = twin.grid;
    ImplicitOps ops = make_implicit_ops(twin);
    const int n = ops.n;
    const int steps = g.time_nodes() - 1;
    SpaceTimeField sol = implicit_solve(twin, control);

    const bool scalar = control.is_scalar();
    const int ctrl_dim = scalar ? 1 : n;
    std::vector<StepPartials> parts(steps);
    for (int t = 0; t < steps; ++t) {
        StepPartials& sp = parts[t];
        sp.n = n;
        sp.ctrl_dim = ctrl_dim;
        sp.d_cur.assign(static_cast<size_t>(n) * n, 0.0);
        sp.d_prev.assign(static_cast<size_t>(n) * n, 0.0);
        sp.d_ctrl.assign(static_cast<size_t>(n) * ctrl_dim, 0.0);
        for (int p = 0; p < n; ++p) {
            sp.d_cur[static_cast<size_t>(p) * n + p] = 1.0 + ops.nu;
            if (p > 0) sp.d_cur[static_cast<size_t>(p) * n + p - 1] = -ops.nu;
            sp.d_prev[static_cast<size_t>(p) * n + p] = -1.0;
            sp.d_ctrl[static_cast<size_t>(p) * ctrl_dim + (scalar ? 0 : p)] = -g.dt();
        }
    }

    std::vector<std::vector<double>> dxi_dx(steps, std::vector<double>(n, 0.0));
    if (objective.kind == Objective::Kind::terminal_quadratic) {
        for (int p = 0; p < n; ++p) {
            const int j = p + 1;
            const double w = (j == g.space_nodes() - 1) ? 0.5 * g.dx() : g.dx();
            dxi_dx[steps - 1][p] = 2.0 * w * (sol(g.time_nodes() - 1, j) - objective.target);
        }
    } else {
        const QuadratureWeights& w = *objective.weights;
        for (int t = 0; t < steps; ++t)
            for (int p = 0; p < n; ++p)
                dxi_dx[t][p] = 2.0 * w(t + 1, p + 1) * (sol(t + 1, p + 1) - objective.target);
    }

    auto adj = timestep_adjoint(parts, dxi_dx, {});

    ControlGradient out;
    out.objective = objective.eval(sol);
    out.scalar = scalar;
    if (scalar) {
        double s = 0.0;
        for (int t = 0; t < steps; ++t) s += adj.dxi_dc[t][0];
        out.scalar_grad = s;
    } else {
        SpaceTimeField gf(g, 1);
        for (int t = 0; t < steps; ++t)
            for (int p = 0; p < n; ++p) gf.at(t + 1, p + 1) = adj.dxi_dc[t][p];
        out.grad = std::move(gf);
    }
    return out;
}

void check_control(const TwinModel& twin, const ControlField& control) {
    if (!control.is_scalar() && !(control.values().grid() == twin.grid))
        throw error(errc::config, "twin: control grid does not match the twin grid");
}

} // namespace

void TwinModel::validate() const {
    if (!(cfl > 0.0 && cfl <= 0.5))
        throw error(errc::config, "twin.cfl must be in (0, 0.5], got " + std::to_string(cfl));
    if (scheme == TwinScheme::rusanov_forward_euler) {
        if (boundary != TwinBoundary::periodic)
            throw error(errc::config, "explicit twin scheme requires a periodic boundary");
        if (!dict.empty() && dict.dims() != 1)
            throw error(errc::config, "explicit twin scheme requires a univariate dictionary");
    } else {
        if (boundary != TwinBoundary::inflow)
            throw error(errc::config,
                        "implicit upwind variant requires the inflow boundary (periodic steps "
                        "preserve constants and cannot contract)");
        if (!(advection_speed > 0.0))
            throw error(errc::config, "implicit upwind variant requires advection_speed > 0");
    }
}

Objective Objective::terminal_quadratic(double target) {
    Objective o;
    o.kind = Kind::terminal_quadratic;
    o.target = target;
    return o;
}

Objective Objective::spacetime_quadratic(double target, QuadratureWeights weights) {
    Objective o;
    o.kind = Kind::spacetime_quadratic;
    o.target = target;
    o.weights = std::move(weights);
    return o;
}

double Objective::eval(const SpaceTimeField& solution) const {
    const Grid& g = solution.grid();
    double s = 0.0;
    if (kind == Kind::terminal_quadratic) {
        const int last = g.time_nodes() - 1;
        for (int j = 0; j < g.space_nodes(); ++j) {
            const double w = (j == 0 || j == g.space_nodes() - 1) ? 0.5 * g.dx() : g.dx();
            const double d = solution(last, j) - target;
            s += w * d * d;
        }
    } else {
        for (int i = 0; i < g.time_nodes(); ++i)
            for (int j = 0; j < g.space_nodes(); ++j) {
                const double d = solution(i, j) - target;
                s += (*weights)(i, j) * d * d;
            }
    }
    return s;
}

SpaceTimeField twin_solve(const TwinModel& twin, const ControlField& control) {
    twin.validate();
    check_control(twin, control);
    g_twin_solves.fetch_add(1);
    if (twin.scheme == TwinScheme::implicit_upwind_linear) return implicit_solve(twin, control);
    return taped_solve_explicit(twin, control).solution;
}

SpaceTimeField residual_field(const TwinModel& twin, const SpaceTimeField& gray,
                              const ControlField& control) {
    twin.validate();
    check_control(twin, control);
    if (!(gray.grid() == twin.grid))
        throw error(errc::config, "residual_field: gray field is not on the twin grid");
    const Grid& g = twin.grid;
    SpaceTimeField tau(g, 1);

    if (twin.scheme == TwinScheme::implicit_upwind_linear) {
        ImplicitOps ops = make_implicit_ops(twin);
        std::vector<double> u(ops.n);
        for (int i = 1; i < g.time_nodes(); ++i) {
            for (int p = 0; p < ops.n; ++p) u[p] = gray(i - 1, p + 1);
            ops.step(u, g.dt(), i, control);
            tau.at(i, 0) = gray(i, 0) - ops.bc;
            for (int p = 0; p < ops.n; ++p) tau.at(i, p + 1) = gray(i, p + 1) - u[p];
        }
        return tau;
    }

    const int nc = g.space_nodes() - 1;
    PlainFlux pf{&twin.dict};
    std::vector<double> u(nc), next(nc), fv(nc), fd(nc), fhat(nc);
    for (int i = 1; i < g.time_nodes(); ++i) {
        for (int j = 0; j < nc; ++j) u[j] = gray(i - 1, j);
        const double dt_out = g.t(i) - g.t(i - 1);
        const long n_sub = substeps_for(twin, dt_out, pf.max_speed(u), i);
        const double dt = dt_out / n_sub;
        auto ctrl = [&](int j) { return control.at(i, j); };
        for (long s = 0; s < n_sub; ++s)
            plain_substep(pf, twin.smooth_eps, u, next, fv, fd, fhat, dt, g.dx(), ctrl);
        for (int j = 0; j < nc; ++j) tau.at(i, j) = gray(i, j) - u[j];
        tau.at(i, g.space_nodes() - 1) = tau(i, 0);
    }
    return tau;
}

AlphaGradient grad_mismatch_alpha(const TwinModel& twin, const SpaceTimeField& gray,
                                  const ControlField& control, const QuadratureWeights& weights,
                                  const NodeMask* mask) {
    twin.validate();
    check_control(twin, control);
    if (twin.scheme != TwinScheme::rusanov_forward_euler)
        throw error(errc::config, "grad_mismatch_alpha: explicit twin scheme required");
    if (!(gray.grid() == twin.grid))
        throw error(errc::config, "grad_mismatch_alpha: gray field is not on the twin grid");
    g_twin_solves.fetch_add(1);
    TapedSolve rec = taped_solve_explicit(twin, control);
    const int m_node = record_mismatch(rec, gray, weights, mask);
    auto back = rec.tape.backward(m_node);
    AlphaGradient out;
    out.value = rec.tape.value(m_node);
    out.grad.reserve(rec.alpha_nodes.size());
    for (int id : rec.alpha_nodes) out.grad.push_back(back.adjoint[id]);
    return out;
}

ControlGradient grad_objective_control(const TwinModel& twin, const Objective& objective,
                                       const ControlField& control) {
    twin.validate();
    check_control(twin, control);
    if (objective.kind == Objective::Kind::spacetime_quadratic) {
        const auto& w = *objective.weights;
        if (w.time_nodes() != twin.grid.time_nodes() || w.space_nodes() != twin.grid.space_nodes())
            throw error(errc::config, "objective weights do not match the twin grid");
    }
    g_twin_solves.fetch_add(1);
    if (twin.scheme == TwinScheme::implicit_upwind_linear)
        return implicit_control_gradient(twin, objective, control);

    TapedSolve rec = taped_solve_explicit(twin, control);
    const int obj_node = record_objective(rec, objective);
    auto back = rec.tape.backward(obj_node);
    ControlGradient out;
    out.objective = rec.tape.value(obj_node);
    out.scalar = control.is_scalar();
    if (out.scalar) {
        out.scalar_grad = back.adjoint[rec.scalar_control_node];
    } else {
        const Grid& g = twin.grid;
        SpaceTimeField gf(g, 1);
        for (int i = 0; i < g.time_nodes(); ++i)
            for (int j = 0; j < g.space_nodes(); ++j)
                gf.at(i, j) =
                    back.adjoint[rec.grid_control_nodes[static_cast<size_t>(i) * g.space_nodes() + j]];
        out.grad = std::move(gf);
    }
    return out;
}

std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& eval,
                                std::span<const double> control0, double step) {
    if (!(step > 0.0)) throw error(errc::config, "fd_gradient: step must be positive");
    std::vector<double> c(control0.begin(), control0.end());
    std::vector<double> grad(c.size());
    for (size_t i = 0; i < c.size(); ++i) {
        const double saved = c[i];
        c[i] = saved + step;
        const double plus = eval(c);
        c[i] = saved - step;
        const double minus = eval(c);
        c[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    return grad;
}

std::vector<double> flatten_control(const ControlField& control, const Grid& grid) {
    if (control.is_scalar()) return {control.scalar_value()};
    std::vector<double> out(grid.node_count());
    for (int i = 0; i < grid.time_nodes(); ++i)
        for (int j = 0; j < grid.space_nodes(); ++j)
            out[static_cast<size_t>(i) * grid.space_nodes() + j] = control.values()(i, j);
    return out;
}

ControlField control_like(const ControlField& shape, const Grid& grid,
                          std::span<const double> flat) {
    if (shape.is_scalar()) {
        if (flat.size() != 1) throw error(errc::config, "control_like: expected one component");
        return ControlField::constant(flat[0]);
    }
    if (static_cast<long>(flat.size()) != grid.node_count())
        throw error(errc::config, "control_like: component count mismatch");
    SpaceTimeField f(grid, 1);
    for (int i = 0; i < grid.time_nodes(); ++i)
        for (int j = 0; j < grid.space_nodes(); ++j)
            f.at(i, j) = flat[static_cast<size_t>(i) * grid.space_nodes() + j];
    return ControlField::grid(std::move(f));
}

ResidualBatchGrad residual_batch_grad(const TwinModel& twin, const SpaceTimeField& gray,
                                      const ControlField& control, const QuadratureWeights& weights,
                                      std::span<const std::pair<int, int>> nodes) {
    twin.validate();
    if (twin.scheme != TwinScheme::rusanov_forward_euler)
        throw error(errc::config, "residual_batch_grad: explicit twin scheme required");
    if (!(gray.grid() == twin.grid))
        throw error(errc::config, "residual_batch_grad: gray field is not on the twin grid");
    const Grid& g = twin.grid;
    const int nc = g.space_nodes() - 1;

    std::map<int, std::vector<int>> by_row;
    for (auto [i, j] : nodes) {
        if (i < 0 || i >= g.time_nodes() || j < 0 || j >= g.space_nodes())
            throw error(errc::config, "residual_batch_grad: node outside the grid");
        if (i == 0) continue; // row 0 has no predecessor; its residual is zero
        by_row[i].push_back(j);
    }

    ResidualBatchGrad out;
    out.grad.assign(twin.dict.size(), 0.0);
    PlainFlux pf{&twin.dict};
    std::vector<double> uval(nc);

    for (auto& [row, cols] : by_row) {
        Tape tape(twin.smooth_eps);
        TapedFlux flux(tape, twin.dict);
        std::vector<int> state(nc), next(nc), fv(nc), fd(nc), fhat(nc);
        for (int j = 0; j < nc; ++j) {
            state[j] = tape.constant(gray(row - 1, j));
            uval[j] = gray(row - 1, j);
        }
        const double dt_out = g.t(row) - g.t(row - 1);
        const long n_sub = substeps_for(twin, dt_out, pf.max_speed(uval), row);
        const double dt = dt_out / n_sub;
        const int dt_node = tape.constant(dt);
        const int coef_node = tape.constant(dt / g.dx());
        const int half = tape.constant(0.5);
        for (long s = 0; s < n_sub; ++s) {
            for (int j = 0; j < nc; ++j) {
                auto [f, df] = flux.record_value_and_derivative(tape, state[j]);
                fv[j] = f;
                fd[j] = tape.abs_smooth(df);
            }
            for (int j = 0; j < nc; ++j) {
                const int r = j + 1 == nc ? 0 : j + 1;
                const int a = tape.max_smooth(fd[j], fd[r]);
                const int favg = tape.mul(half, tape.add(fv[j], fv[r]));
                const int diss = tape.mul(half, tape.mul(a, tape.sub(state[r], state[j])));
                fhat[j] = tape.sub(favg, diss);
            }
            for (int j = 0; j < nc; ++j) {
                const int l = j == 0 ? nc - 1 : j - 1;
                int t = tape.sub(state[j], tape.mul(coef_node, tape.sub(fhat[j], fhat[l])));
                t = tape.add(t, tape.mul(dt_node, tape.constant(control.at(row, j))));
                next[j] = t;
            }
            state.swap(next);
        }
        int acc = tape.constant(0.0);
        for (int j : cols) {
            const int tau = tape.sub(tape.constant(gray(row, j)), state[j == nc ? 0 : j]);
            acc = tape.add(acc, tape.mul(tape.constant(weights(row, j)), tape.mul(tau, tau)));
        }
        auto back = tape.backward(acc);
        out.value += tape.value(acc);
        const auto& alpha_nodes = flux.alpha_nodes();
        for (size_t b = 0; b < alpha_nodes.size(); ++b) out.grad[b] += back.adjoint[alpha_nodes[b]];
    }
    return out;
}

std::vector<double> implicit_step_diff(const TwinModel& twin, std::span<const double> v) {
    ImplicitOps ops = make_implicit_ops(twin);
    std::vector<double> y(v.size());
    double left = 0.0;
    for (size_t p = 0; p < v.size(); ++p) {
        y[p] = (v[p] + ops.nu * left) / (1.0 + ops.nu);
        left = y[p];
    }
    return y;
}

std::vector<double> implicit_step_diff_transposed(const TwinModel& twin, std::span<const double> v) {
    ImplicitOps ops = make_implicit_ops(twin);
    std::vector<double> y(v.size());
    double right = 0.0;
    for (int p = static_cast<int>(v.size()) - 1; p >= 0; --p) {
        y[p] = (v[p] + ops.nu * right) / (1.0 + ops.nu);
        right = y[p];
    }
    return y;
}

double estimate_wave_speed_cap(const SpaceTimeField& gray, double factor) {
    const Grid& g = gray.grid();
    const int nc = g.space_nodes() - 1;
    std::vector<double> ux(static_cast<size_t>(g.time_nodes()) * nc, 0.0);
    double ux_max = 0.0;
    for (int i = 0; i < g.time_nodes(); ++i)
        for (int j = 0; j < nc; ++j) {
            const int l = j == 0 ? nc - 1 : j - 1;
            const int r = j + 1 == nc ? 0 : j + 1;
            const double d = (gray(i, r) - gray(i, l)) / (2.0 * g.dx());
            ux[static_cast<size_t>(i) * nc + j] = d;
            ux_max = std::max(ux_max, std::abs(d));
        }
    const double threshold = 0.05 * ux_max;
    double speed = 0.0;
    for (int i = 1; i + 1 < g.time_nodes(); ++i)
        for (int j = 0; j < nc; ++j) {
            const double d = ux[static_cast<size_t>(i) * nc + j];
            if (std::abs(d) <= threshold) continue;
            const double ut = (gray(i + 1, j) - gray(i - 1, j)) / (g.t(i + 1) - g.t(i - 1));
            speed = std::max(speed, std::abs(ut / d));
        }
    if (!(speed > 0.0)) speed = g.dx() / g.dt(); // featureless data
    return factor * speed;
}

long twin_solve_count() { return g_twin_solves.load(); }
void reset_twin_solve_count() { g_twin_solves.store(0); }

} // namespace twinforge
