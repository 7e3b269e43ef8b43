#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "twinforge/train.hpp"
#include "twinforge/twin.hpp"

using namespace twinforge;

namespace {

double uniform(std::mt19937_64& eng, double lo, double hi) {
    return lo + (hi - lo) * ((eng() >> 11) * 0x1.0p-53);
}

GrayBoxCase bl_case(int m, int n, double amplitude = 0.45, double offset = 0.5) {
    GrayBoxCase cs;
    cs.flux_kind = FluxKind::buckley_leverett;
    cs.ic = InitialCondition::sine(amplitude, offset);
    cs.grid = Grid::uniform(m, n, 1.0, {0.0, 1.0});
    cs.cfl = 0.5;
    return cs;
}

TwinModel twin_for(const GrayBoxCase& cs, Dictionary dict) {
    TwinModel twin;
    twin.grid = cs.grid;
    twin.ic = cs.ic;
    twin.cfl = cs.cfl;
    twin.dict = std::move(dict);
    return twin;
}

Dictionary small_dict() {
    Dictionary d;
    d.add(make_basis1(1, 1), 0.5);
    d.add(make_basis1(2, 1), 0.3);
    d.add(make_basis1(0, 0), -0.2);
    return d;
}

} // namespace

TEST_CASE("empty dictionary and zero control freeze the initial condition") {
    GrayBoxCase cs = bl_case(9, 12);
    TwinModel twin = twin_for(cs, Dictionary{});
    SpaceTimeField sol = twin_solve(twin, ControlField::constant(0.0));
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 12; ++j)
            CHECK(sol(i, j) == doctest::Approx(sol(0, j)).epsilon(1e-15));
}

TEST_CASE("twin solves are bit-deterministic") {
    GrayBoxCase cs = bl_case(11, 16);
    TwinModel twin = twin_for(cs, small_dict());
    SpaceTimeField a = twin_solve(twin, ControlField::constant(0.02));
    SpaceTimeField b = twin_solve(twin, ControlField::constant(0.02));
    CHECK(a == b);
}

TEST_CASE("residual of the twin's own solution vanishes") {
    GrayBoxCase cs = bl_case(11, 16);
    TwinModel twin = twin_for(cs, small_dict());
    const ControlField control = ControlField::constant(0.05);
    SpaceTimeField self = twin_solve(twin, control);
    SpaceTimeField tau = residual_field(twin, self, control);
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 16; ++j) CHECK(std::abs(tau(i, j)) <= 1e-10);
}

TEST_CASE("residual is additive in the coefficients when one wave side dominates") {
    // both dictionaries keep dF/du positive and increasing on the data range,
    // so the Rusanov speed picks the same interface side for a, b, and a+b;
    // the grid is chosen so each output interval takes a single substep
    GrayBoxCase cs;
    cs.flux_kind = FluxKind::burgers;
    cs.ic = InitialCondition::sine(0.2, 0.3); // range [0.1, 0.5]
    cs.grid = Grid::uniform(11, 16, 1.0, {0.0, 1.0});
    SpaceTimeField gray = graybox_solve(cs, ControlField::constant(0.0));

    Dictionary da, db, dc;
    da.add(make_basis1(1, 2), 0.4);
    db.add(make_basis1(2, 6), 0.3);
    dc.add(make_basis1(1, 2), 0.4);
    dc.add(make_basis1(2, 6), 0.3);

    const ControlField zero = ControlField::constant(0.0);
    SpaceTimeField t0 = residual_field(twin_for(cs, Dictionary{}), gray, zero);
    SpaceTimeField ta = residual_field(twin_for(cs, da), gray, zero);
    SpaceTimeField tb = residual_field(twin_for(cs, db), gray, zero);
    SpaceTimeField tc = residual_field(twin_for(cs, dc), gray, zero);
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 16; ++j) {
            const double lhs = tc(i, j) - t0(i, j);
            const double rhs = (ta(i, j) - t0(i, j)) + (tb(i, j) - t0(i, j));
            CHECK(lhs == doctest::Approx(rhs).epsilon(1e-7));
        }
}

TEST_CASE("truncation error is an exact quadratic along the coefficient ray") {
    GrayBoxCase cs = bl_case(11, 16, 0.3, 0.5);
    SpaceTimeField gray = graybox_solve(cs, ControlField::constant(0.0));
    auto weights = QuadratureWeights::trapezoid(cs.grid);
    Dictionary base;
    base.add(make_basis1(1, 1), 0.04);
    base.add(make_basis1(2, 3), -0.03);
    const ControlField zero = ControlField::constant(0.0);

    auto t_at = [&](double s) {
        Dictionary d = base;
        for (int b = 0; b < d.size(); ++b) d.set_alpha(b, base.alpha(b) * s);
        TwinModel twin = twin_for(cs, d);
        return weighted_sq_norm(residual_field(twin, gray, zero), weights);
    };
    const double t1 = t_at(1.0), t2 = t_at(2.0), t3 = t_at(3.0);
    // parabola through (1, t1), (2, t2), (3, t3)
    const double a = 0.5 * (t3 - 2 * t2 + t1);
    const double b = t2 - t1 - 3.0 * a;
    const double c = t1 - a - b;
    const double predicted = a * 1.5 * 1.5 + b * 1.5 + c;
    CHECK(t_at(1.5) == doctest::Approx(predicted).epsilon(1e-9));
}

TEST_CASE("mismatch gradient w.r.t. coefficients matches finite differences") {
    GrayBoxCase cs = bl_case(11, 16);
    SpaceTimeField gray = graybox_solve(cs, ControlField::constant(0.0));
    auto weights = QuadratureWeights::trapezoid(cs.grid);
    const ControlField zero = ControlField::constant(0.0);

    std::mt19937_64 eng(99);
    Dictionary dict;
    dict.add(make_basis1(1, 1), uniform(eng, -0.3, 0.3));
    dict.add(make_basis1(2, 1), uniform(eng, -0.3, 0.3));
    dict.add(make_basis1(2, 3), uniform(eng, -0.3, 0.3));
    dict.add(make_basis1(0, 0), uniform(eng, -0.3, 0.3));
    TwinModel twin = twin_for(cs, dict);

    auto ag = grad_mismatch_alpha(twin, gray, zero, weights);
    const double fd_step = 1e-6;
    for (int b = 0; b < dict.size(); ++b) {
        auto eval = [&](double a) {
            TwinModel t2 = twin;
            t2.dict.set_alpha(b, a);
            return mismatch(twin_solve(t2, zero), gray, weights);
        };
        const double fd =
            (eval(dict.alpha(b) + fd_step) - eval(dict.alpha(b) - fd_step)) / (2 * fd_step);
        CHECK(std::abs(ag.grad[b] - fd) / std::max(std::abs(fd), 1e-12) <= 1e-5);
    }
}

TEST_CASE("mismatch gradient vanishes when the gray field is the twin's own") {
    GrayBoxCase cs = bl_case(9, 12);
    TwinModel twin = twin_for(cs, small_dict());
    const ControlField zero = ControlField::constant(0.0);
    SpaceTimeField self = twin_solve(twin, zero);
    auto weights = QuadratureWeights::trapezoid(cs.grid);
    auto ag = grad_mismatch_alpha(twin, self, zero, weights);
    CHECK(ag.value <= 1e-20);
    for (double g : ag.grad) CHECK(std::abs(g) <= 1e-12);
}

TEST_CASE("scalar control gradient matches finite differences") {
    GrayBoxCase cs = bl_case(11, 16);
    TwinModel twin = twin_for(cs, small_dict());
    const Objective obj = Objective::terminal_quadratic(0.5);
    const ControlField c0 = ControlField::constant(0.03);
    auto res = grad_objective_control(twin, obj, c0);
    REQUIRE(res.scalar);
    auto eval = [&](std::span<const double> c) {
        return grad_objective_control(twin, obj, ControlField::constant(c[0])).objective;
    };
    const double flat[1] = {0.03};
    auto fd = fd_gradient(eval, flat, 1e-5);
    CHECK(std::abs(res.scalar_grad - fd[0]) / std::max(std::abs(fd[0]), 1e-12) <= 1e-6);
}

TEST_CASE("grid control gradient matches finite differences on sampled components") {
    GrayBoxCase cs = bl_case(21, 32);
    TwinModel twin = twin_for(cs, small_dict());
    const Objective obj = Objective::terminal_quadratic(0.5);
    const Grid& g = cs.grid;
    const ControlField c0 = ControlField::grid(SpaceTimeField(g, 1, 0.0));
    auto res = grad_objective_control(twin, obj, c0);
    REQUIRE(!res.scalar);

    std::mt19937_64 eng(777);
    std::vector<double> flat = flatten_control(c0, g);
    for (int k = 0; k < 5; ++k) {
        const int i = 1 + static_cast<int>(eng() % (g.time_nodes() - 1));
        const int j = static_cast<int>(eng() % (g.space_nodes() - 1));
        const long idx = static_cast<long>(i) * g.space_nodes() + j;
        const double delta = 1e-5;
        flat[idx] += delta;
        const double plus =
            grad_objective_control(twin, obj, control_like(c0, g, flat)).objective;
        flat[idx] -= 2 * delta;
        const double minus =
            grad_objective_control(twin, obj, control_like(c0, g, flat)).objective;
        flat[idx] += delta;
        const double fd = (plus - minus) / (2 * delta);
        const double adj = (*res.grad)(i, j);
        CHECK(std::abs(adj - fd) / std::max(std::abs(fd), 1e-12) <= 1e-4);
    }
    // the duplicated endpoint column and the initial row carry no control
    CHECK((*res.grad)(0, 3) == 0.0);
    CHECK((*res.grad)(5, g.space_nodes() - 1) == 0.0);
}

TEST_CASE("spacetime objective control gradient matches finite differences") {
    GrayBoxCase cs = bl_case(9, 12);
    TwinModel twin = twin_for(cs, small_dict());
    auto weights = QuadratureWeights::trapezoid(cs.grid);
    const Objective obj = Objective::spacetime_quadratic(0.4, weights);
    const ControlField c0 = ControlField::constant(0.0);
    auto res = grad_objective_control(twin, obj, c0);
    auto eval = [&](std::span<const double> c) {
        return grad_objective_control(twin, obj, ControlField::constant(c[0])).objective;
    };
    const double flat[1] = {0.0};
    auto fd = fd_gradient(eval, flat, 1e-5);
    CHECK(std::abs(res.scalar_grad - fd[0]) / std::max(std::abs(fd[0]), 1e-12) <= 1e-5);
}

TEST_CASE("fd_gradient basics and agreement with the tape on the worked example") {
    auto linear = [](std::span<const double> c) { return 3.0 * c[0] - 2.0 * c[1]; };
    const double c0[2] = {0.4, -1.2};
    auto g = fd_gradient(linear, c0, 0.125);
    CHECK(g[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(-2.0).epsilon(1e-12));

    auto quad = [](std::span<const double> c) { return c[0] * c[0]; };
    const double c1[1] = {1.0};
    CHECK(fd_gradient(quad, c1, 1e-4)[0] == doctest::Approx(2.0).epsilon(1e-7));

    // f = c1 c2 + sin(c1): tape backward vs central differences
    auto f = [](std::span<const double> c) { return c[0] * c[1] + std::sin(c[0]); };
    const double at[2] = {0.3, -0.7};
    auto fd = fd_gradient(f, at, 1e-5);
    Tape tape;
    const int i1 = tape.input(0.3), i2 = tape.input(-0.7);
    const int xi = tape.add(tape.mul(i1, i2), tape.sin(i1));
    auto back = tape.backward(xi);
    CHECK(std::abs(back.adjoint[i1] - fd[0]) / std::abs(fd[0]) <= 1e-9);
    CHECK(std::abs(back.adjoint[i2] - fd[1]) / std::abs(fd[1]) <= 1e-9);
}

TEST_CASE("adjoint costs one twin solve; the FD oracle costs 2 M N") {
    GrayBoxCase cs = bl_case(5, 6);
    TwinModel twin = twin_for(cs, small_dict());
    const Objective obj = Objective::terminal_quadratic(0.5);
    const ControlField c0 = ControlField::grid(SpaceTimeField(cs.grid, 1, 0.0));

    reset_twin_solve_count();
    auto res = grad_objective_control(twin, obj, c0);
    CHECK(twin_solve_count() == 1);
    CHECK(!res.scalar);

    reset_twin_solve_count();
    auto eval = [&](std::span<const double> c) {
        return grad_objective_control(twin, obj, control_like(c0, cs.grid, c)).objective;
    };
    auto flat = flatten_control(c0, cs.grid);
    fd_gradient(eval, flat, 1e-5);
    CHECK(twin_solve_count() == 2L * 5 * 6);
}

TEST_CASE("a constant flux offset leaves the mismatch unchanged") {
    GrayBoxCase cs = bl_case(11, 16);
    SpaceTimeField gray = graybox_solve(cs, ControlField::constant(0.0));
    auto weights = QuadratureWeights::trapezoid(cs.grid);
    const ControlField zero = ControlField::constant(0.0);

    TwinModel twin = twin_for(cs, small_dict());
    TwinModel shifted = twin;
    shifted.dict.add(make_basis1(0, -60), 0.8); // saturated: a pure constant on the range

    const double m1 = mismatch(twin_solve(twin, zero), gray, weights);
    const double m2 = mismatch(twin_solve(shifted, zero), gray, weights);
    CHECK(std::abs(m2 - m1) <= 1e-10 * std::max(m1, 1e-30));

    // and the fields themselves agree: equal flux derivatives mean equal solutions
    SpaceTimeField sa = twin_solve(twin, zero);
    SpaceTimeField sb = twin_solve(shifted, zero);
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 16; ++j) CHECK(std::abs(sa(i, j) - sb(i, j)) <= 1e-8);
}

TEST_CASE("twin conserves the cell sum under periodic source-free marching") {
    GrayBoxCase cs = bl_case(13, 20, 0.35, 0.5);
    TwinModel twin = twin_for(cs, small_dict());
    SpaceTimeField sol = twin_solve(twin, ControlField::constant(0.0));
    const int nc = 19;
    double mass0 = 0.0;
    for (int j = 0; j < nc; ++j) mass0 += sol(0, j);
    for (int i = 1; i < 13; ++i) {
        double mass = 0.0;
        for (int j = 0; j < nc; ++j) mass += sol(i, j);
        CHECK(mass == doctest::Approx(mass0).epsilon(1e-12));
    }
}

TEST_CASE("implicit upwind variant: solve and control gradient vs FD") {
    TwinModel twin;
    twin.scheme = TwinScheme::implicit_upwind_linear;
    twin.boundary = TwinBoundary::inflow;
    twin.grid = Grid::uniform(17, 17, 1.0, {0.0, 1.0}); // nu = 1
    twin.ic = InitialCondition::gaussian(0.4, 0.12, 0.6);
    twin.advection_speed = 1.0;

    const Objective obj = Objective::terminal_quadratic(0.2);
    const ControlField c0 = ControlField::grid(SpaceTimeField(twin.grid, 1, 0.0));
    auto res = grad_objective_control(twin, obj, c0);
    REQUIRE(!res.scalar);

    std::vector<double> flat = flatten_control(c0, twin.grid);
    std::mt19937_64 eng(4242);
    for (int k = 0; k < 5; ++k) {
        const int i = 1 + static_cast<int>(eng() % 16);
        const int j = 1 + static_cast<int>(eng() % 16);
        const long idx = static_cast<long>(i) * 17 + j;
        const double delta = 1e-5;
        flat[idx] += delta;
        const double plus =
            grad_objective_control(twin, obj, control_like(c0, twin.grid, flat)).objective;
        flat[idx] -= 2 * delta;
        const double minus =
            grad_objective_control(twin, obj, control_like(c0, twin.grid, flat)).objective;
        flat[idx] += delta;
        const double fd = (plus - minus) / (2 * delta);
        CHECK(std::abs((*res.grad)(i, j) - fd) / std::max(std::abs(fd), 1e-12) <= 1e-6);
    }

    // scheme/boundary combinations are validated
    TwinModel bad = twin;
    bad.boundary = TwinBoundary::periodic;
    CHECK_THROWS_AS(twin_solve(bad, c0), error);
}

TEST_CASE("runaway wave speeds are reported as a CFL/substep failure") {
    GrayBoxCase cs = bl_case(5, 8);
    Dictionary big;
    big.add(make_basis1(0, 0), 1e9);
    TwinModel twin = twin_for(cs, big);
    CHECK_THROWS_WITH_AS(twin_solve(twin, ControlField::constant(0.0)),
                         doctest::Contains("substeps"), error);
}

TEST_CASE("implicit one-step difference maps satisfy their bidiagonal systems") {
    TwinModel twin;
    twin.scheme = TwinScheme::implicit_upwind_linear;
    twin.boundary = TwinBoundary::inflow;
    twin.grid = Grid::uniform(9, 9, 1.0, {0.0, 1.0});
    twin.ic = InitialCondition::gaussian(0.4, 0.1, 0.5);
    twin.advection_speed = 0.7;
    const int n = 8;
    const double nu = 0.7 * twin.grid.dt() / twin.grid.dx();

    std::mt19937_64 eng(11);
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(eng, -1, 1);
    auto y = implicit_step_diff(twin, v);
    for (int p = 0; p < n; ++p) {
        const double left = p > 0 ? y[p - 1] : 0.0;
        CHECK((1 + nu) * y[p] - nu * left == doctest::Approx(v[p]).epsilon(1e-12));
    }
    auto yt = implicit_step_diff_transposed(twin, v);
    for (int p = 0; p < n; ++p) {
        const double right = p + 1 < n ? yt[p + 1] : 0.0;
        CHECK((1 + nu) * yt[p] - nu * right == doctest::Approx(v[p]).epsilon(1e-12));
    }
}
