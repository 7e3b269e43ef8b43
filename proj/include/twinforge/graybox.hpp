#pragma once

#include "twinforge/field.hpp"

namespace twinforge {

enum class FluxKind { buckley_leverett, linear_advection, burgers };

struct InitialCondition {
    enum class Kind { sine, gaussian, step };
    Kind kind = Kind::sine;
    double p0 = 0.0, p1 = 0.0, p2 = 0.0;

    static InitialCondition sine(double amplitude, double offset);
    static InitialCondition gaussian(double center, double width, double height);
    static InitialCondition step(double left, double right, double jump_pos);

    double eval(double x) const;
    /// Sampled extrema over the interval (the in-scope families are smooth or
    /// piecewise constant, so dense sampling is adequate).
    std::pair<double, double> value_range(Interval domain, int samples = 4096) const;
};

/// A reference simulator treated as a gray box: the training code sees only
/// the space-time field the solver emits.
struct GrayBoxCase {
    FluxKind flux_kind = FluxKind::buckley_leverett;
    double advection_speed = 1.0; // linear_advection only
    InitialCondition ic;
    Grid grid = Grid::uniform(2, 2, 1.0, {0.0, 1.0});
    double cfl = 0.5;

    void validate() const;
};

struct GraySolveStats {
    long substeps = 0;
    double conservation_drift = 0.0; // max relative drift of sum(u) dx over time
};

/// First-order finite-volume solve (Rusanov flux, forward-Euler substeps
/// honoring the CFL bound), periodic boundary, subsampled onto the case grid.
SpaceTimeField graybox_solve(const GrayBoxCase& cs, const ControlField& control,
                             GraySolveStats* stats = nullptr);

/// Terminal objective from the paper's 1-D study: trapezoid-in-space integral
/// of (u(T, x) - 1/2)^2.
double graybox_objective(const SpaceTimeField& solution);

long graybox_solve_count();
void reset_graybox_solve_count();

} // namespace twinforge
