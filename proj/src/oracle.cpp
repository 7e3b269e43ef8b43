#include "twinforge/oracle.hpp"

#include "flux_detail.hpp"

namespace twinforge::oracle {

FluxValue true_flux(FluxKind kind, double u, double advection_speed) {
    auto fe = detail::flux_eval(kind, advection_speed, u);
    return {fe.f, fe.df};
}

} // namespace twinforge::oracle
