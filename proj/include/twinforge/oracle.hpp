#pragma once

// Verification-only access to the exact flux behind the gray box. Linked as a
// separate library so the training stack has no compile-time path to it.

#include "twinforge/graybox.hpp"

namespace twinforge::oracle {

struct FluxValue {
    double f = 0.0;
    double df = 0.0;
};

FluxValue true_flux(FluxKind kind, double u, double advection_speed = 1.0);

} // namespace twinforge::oracle
