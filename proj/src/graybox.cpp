#include "twinforge/graybox.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

#include "flux_detail.hpp"

namespace twinforge {

namespace {
std::atomic<long> g_gray_solves{0};
constexpr long k_substep_cap = 2'000'000;
} // namespace

long graybox_solve_count() { return g_gray_solves.load(); }
void reset_graybox_solve_count() { g_gray_solves.store(0); }

InitialCondition InitialCondition::sine(double amplitude, double offset) {
    return {Kind::sine, amplitude, offset, 0.0};
}

InitialCondition InitialCondition::gaussian(double center, double width, double height) {
    return {Kind::gaussian, center, width, height};
}

InitialCondition InitialCondition::step(double left, double right, double jump_pos) {
    return {Kind::step, left, right, jump_pos};
}

double InitialCondition::eval(double x) const {
    switch (kind) {
        case Kind::sine:
            return p1 + p0 * std::sin(2.0 * std::numbers::pi * x);
        case Kind::gaussian: {
            const double z = (x - p0) / p1;
            return p2 * std::exp(-z * z);
        }
        case Kind::step:
            return x < p2 ? p0 : p1;
    }
    return 0.0;
}

std::pair<double, double> InitialCondition::value_range(Interval domain, int samples) const {
    double lo = eval(domain.lo), hi = lo;
    for (int s = 1; s <= samples; ++s) {
        const double x = domain.lo + domain.length() * s / samples;
        const double v = eval(x);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return {lo, hi};
}

void GrayBoxCase::validate() const {
    if (!(cfl > 0.0 && cfl <= 0.5))
        throw error(errc::config, "case.cfl must be in (0, 0.5], got " + std::to_string(cfl));
    if (flux_kind == FluxKind::buckley_leverett) {
        auto [lo, hi] = ic.value_range(grid.domain());
        if (lo < 0.0 || hi > 1.0)
            throw error(errc::config,
                        "case.ic: Buckley-Leverett saturation must lie in [0, 1], initial "
                        "condition spans [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
}

namespace {

/// Shared explicit marching for the gray box. The periodic grid includes both
/// endpoints; node N-1 duplicates node 0, so the ring has N-1 unique cells of
/// width dx.
class RusanovMarch {
public:
    RusanovMarch(const GrayBoxCase& cs) : cs_(cs), nc_(cs.grid.space_nodes() - 1) {}

    SpaceTimeField run(const ControlField& control, GraySolveStats* stats) {
        const Grid& g = cs_.grid;
        SpaceTimeField out(g, 1);
        std::vector<double> u(nc_), next(nc_), flux(nc_), speed(nc_), fhat(nc_);
        for (int j = 0; j < nc_; ++j) u[j] = cs_.ic.eval(g.x(j));
        store_row(out, 0, u);
        const double h = g.dx();
        const double mass0 = mass(u) * h;
        double drift = 0.0;
        long total_substeps = 0;

        for (int i = 1; i < g.time_nodes(); ++i) {
            const double dt_out = g.t(i) - g.t(i - 1);
            double amax = 0.0;
            for (int j = 0; j < nc_; ++j)
                amax = std::max(amax, std::abs(detail::flux_eval(cs_.flux_kind, cs_.advection_speed, u[j]).df));
            long n_sub = 1;
            if (amax > 0.0) {
                // 1.25 headroom: speeds may grow within the interval
                n_sub = static_cast<long>(std::ceil(dt_out * amax * 1.25 / (cs_.cfl * h)));
                n_sub = std::max<long>(n_sub, 1);
            }
            if (n_sub > k_substep_cap)
                throw error(errc::numeric,
                            "graybox_solve: CFL violation at the requested grid, interval " +
                                std::to_string(i) + " requires " + std::to_string(n_sub) + " substeps");
            const double dt = dt_out / n_sub;
            for (long s = 0; s < n_sub; ++s) {
                for (int j = 0; j < nc_; ++j) {
                    auto fe = detail::flux_eval(cs_.flux_kind, cs_.advection_speed, u[j]);
                    flux[j] = fe.f;
                    speed[j] = std::abs(fe.df);
                }
                for (int j = 0; j < nc_; ++j) {
                    const int r = j + 1 == nc_ ? 0 : j + 1;
                    const double a = std::max(speed[j], speed[r]);
                    fhat[j] = 0.5 * (flux[j] + flux[r]) - 0.5 * a * (u[r] - u[j]);
                }
                for (int j = 0; j < nc_; ++j) {
                    const int l = j == 0 ? nc_ - 1 : j - 1;
                    next[j] = u[j] - dt / h * (fhat[j] - fhat[l]) + dt * control.at(i, j);
                    if (!std::isfinite(next[j]))
                        throw error(errc::numeric,
                                    "graybox_solve: non-finite state (blow-up) at output step " +
                                        std::to_string(i) + ", substep " + std::to_string(s));
                }
                u.swap(next);
            }
            total_substeps += n_sub;
            store_row(out, i, u);
            if (control.is_scalar() && control.scalar_value() == 0.0 && mass0 != 0.0)
                drift = std::max(drift, std::abs(mass(u) * h - mass0) / std::abs(mass0));
        }
        if (stats) {
            stats->substeps = total_substeps;
            stats->conservation_drift = drift;
        }
        return out;
    }

private:
    double mass(const std::vector<double>& u) const {
        double s = 0.0;
        for (double v : u) s += v;
        return s;
    }

    void store_row(SpaceTimeField& out, int i, const std::vector<double>& u) const {
        for (int j = 0; j < nc_; ++j) out.at(i, j) = u[j];
        out.at(i, cs_.grid.space_nodes() - 1) = u[0];
    }

    const GrayBoxCase& cs_;
    int nc_;
};

} // namespace

SpaceTimeField graybox_solve(const GrayBoxCase& cs, const ControlField& control,
                             GraySolveStats* stats) {
    cs.validate();
    if (!control.is_scalar() && !(control.values().grid() == cs.grid))
        throw error(errc::config, "graybox_solve: control grid does not match the case grid");
    g_gray_solves.fetch_add(1);
    return RusanovMarch(cs).run(control, stats);
}

double graybox_objective(const SpaceTimeField& solution) {
    const Grid& g = solution.grid();
    const int last = g.time_nodes() - 1;
    double s = 0.0;
    for (int j = 0; j < g.space_nodes(); ++j) {
        const double w = (j == 0 || j == g.space_nodes() - 1) ? 0.5 * g.dx() : g.dx();
        const double d = solution(last, j) - 0.5;
        s += w * d * d;
    }
    return s;
}

} // namespace twinforge
