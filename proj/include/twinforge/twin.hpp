#pragma once

#include <functional>
#include <optional>

#include "twinforge/basis.hpp"
#include "twinforge/field.hpp"
#include "twinforge/graybox.hpp"
#include "twinforge/tape.hpp"

namespace twinforge {

enum class TwinScheme { rusanov_forward_euler, implicit_upwind_linear };
enum class TwinBoundary { periodic, inflow };

/// Open-box simulator on the gray box's grid and scheme, with the flux
/// replaced by the dictionary expansion. The implicit upwind variant exists
/// for the contraction diagnostic; it advects linearly at advection_speed and
/// uses an inflow boundary (a periodic step operator preserves constants, so
/// it can never contract).
struct TwinModel {
    Dictionary dict;
    Grid grid = Grid::uniform(2, 2, 1.0, {0.0, 1.0});
    InitialCondition ic;
    double cfl = 0.5;
    TwinScheme scheme = TwinScheme::rusanov_forward_euler;
    TwinBoundary boundary = TwinBoundary::periodic;
    double advection_speed = 1.0; // implicit variant only
    double smooth_eps = 1e-8;     // sharpness of the smoothed |.| and max

    /// 0: substep counts follow the state's wave speeds (an honest solve).
    /// > 0: substep counts are fixed from this bound, and states whose speeds
    /// exceed it are rejected as numeric failures. Training sets this to keep
    /// the objective smooth in alpha (no substep-count flips inside a line
    /// search) and to fence off nonphysical high-speed coefficient regions.
    double speed_cap = 0.0;

    void validate() const;
};

/// Wave-speed bound inferred from the data: max |u_t| / |u_x| where the
/// spatial variation is significant, times `factor`.
double estimate_wave_speed_cap(const SpaceTimeField& gray, double factor = 1.5);

struct Objective {
    enum class Kind { terminal_quadratic, spacetime_quadratic };
    Kind kind = Kind::terminal_quadratic;
    double target = 0.5;
    std::optional<QuadratureWeights> weights; // spacetime form

    static Objective terminal_quadratic(double target);
    static Objective spacetime_quadratic(double target, QuadratureWeights weights);

    double eval(const SpaceTimeField& solution) const;
};

SpaceTimeField twin_solve(const TwinModel& twin, const ControlField& control);

/// Per-node one-step defect: gray states advanced one output interval by the
/// twin's step operator, subtracted from the next gray row. Row 0 is zero; no
/// PDE solve is performed.
SpaceTimeField residual_field(const TwinModel& twin, const SpaceTimeField& gray,
                              const ControlField& control);

struct AlphaGradient {
    double value = 0.0;            // the (masked) mismatch
    std::vector<double> grad;      // d value / d alpha_i
};

/// Exact discrete gradient of the masked mismatch w.r.t. every dictionary
/// coefficient, by one taped solve plus one backward sweep.
AlphaGradient grad_mismatch_alpha(const TwinModel& twin, const SpaceTimeField& gray,
                                  const ControlField& control, const QuadratureWeights& weights,
                                  const NodeMask* mask = nullptr);

struct ControlGradient {
    double objective = 0.0;
    bool scalar = true;
    double scalar_grad = 0.0;
    std::optional<SpaceTimeField> grad; // M x N when the control is a grid
};

/// dxi/dc over the full control in one backward sweep (one twin solve,
/// regardless of the control dimension).
ControlGradient grad_objective_control(const TwinModel& twin, const Objective& objective,
                                       const ControlField& control);

/// Central finite differences of an arbitrary evaluation closure; 2 d
/// evaluations for d control components.
std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& eval,
                                std::span<const double> control0, double step);

std::vector<double> flatten_control(const ControlField& control, const Grid& grid);
ControlField control_like(const ControlField& shape, const Grid& grid,
                          std::span<const double> flat);

/// Weighted squared residual sum over a set of nodes plus its alpha-gradient,
/// computed from per-row residual tapes (never a full twin solve).
struct ResidualBatchGrad {
    double value = 0.0;
    std::vector<double> grad;
};
ResidualBatchGrad residual_batch_grad(const TwinModel& twin, const SpaceTimeField& gray,
                                      const ControlField& control, const QuadratureWeights& weights,
                                      std::span<const std::pair<int, int>> nodes);

/// One-step map difference of the implicit upwind variant: y = G a - G b for
/// a - b = v (the affine parts cancel). Used by the contraction diagnostic.
std::vector<double> implicit_step_diff(const TwinModel& twin, std::span<const double> v);
std::vector<double> implicit_step_diff_transposed(const TwinModel& twin, std::span<const double> v);

long twin_solve_count();
void reset_twin_solve_count();

} // namespace twinforge
