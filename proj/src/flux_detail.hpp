#pragma once

// Internal flux formulas shared by the gray-box solver and the verification
// oracle. Not installed: training code never sees these.

#include <cmath>

#include "twinforge/graybox.hpp"

namespace twinforge::detail {

struct FluxPoint {
    double f = 0.0;
    double df = 0.0;
};

inline FluxPoint flux_eval(FluxKind kind, double advection_speed, double u) {
    switch (kind) {
        case FluxKind::linear_advection:
            return {advection_speed * u, advection_speed};
        case FluxKind::burgers:
            return {0.5 * u * u, u};
        case FluxKind::buckley_leverett: {
            const double w = 1.0 - u;
            const double den = 1.0 + 2.0 * w * w;
            const double f = u * u / den;
            const double df = (2.0 * u * den + u * u * 4.0 * w) / (den * den);
            return {f, df};
        }
    }
    return {};
}

} // namespace twinforge::detail
