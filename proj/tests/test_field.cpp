#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "twinforge/field.hpp"

using namespace twinforge;

namespace {
std::filesystem::path temp_file(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "twinforge_field_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}
} // namespace

TEST_CASE("uniform grid endpoints and spacing") {
    Grid g = Grid::uniform(2, 2, 1.0, {0.0, 1.0});
    CHECK(g.t(0) == 0.0);
    CHECK(g.t(1) == 1.0);
    CHECK(g.x(0) == 0.0);
    CHECK(g.x(1) == 1.0);

    Grid g2 = Grid::uniform(101, 100, 1.0, {0.0, 1.0});
    CHECK(g2.dt() == doctest::Approx(0.01));
    CHECK(g2.dx() == doctest::Approx(1.0 / 99.0));
    CHECK(g2.t(100) == 1.0);
    CHECK(g2.x(99) == 1.0);
    // strictly ascending nodes
    for (int i = 1; i < g2.time_nodes(); ++i) CHECK(g2.t(i) > g2.t(i - 1));
    for (int j = 1; j < g2.space_nodes(); ++j) CHECK(g2.x(j) > g2.x(j - 1));
}

TEST_CASE("grid rejects bad extents") {
    CHECK_THROWS_AS(Grid::uniform(1, 5, 1.0, {0.0, 1.0}), error);
    CHECK_THROWS_AS(Grid::uniform(5, 1, 1.0, {0.0, 1.0}), error);
    CHECK_THROWS_AS(Grid::uniform(5, 5, 0.0, {0.0, 1.0}), error);
    CHECK_THROWS_AS(Grid::uniform(5, 5, 1.0, {1.0, 0.0}), error);
}

TEST_CASE("trapezoid weights on tiny grids") {
    Grid g2 = Grid::uniform(2, 2, 1.0, {0.0, 1.0});
    auto w2 = QuadratureWeights::trapezoid(g2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) CHECK(w2(i, j) == doctest::Approx(0.25));

    Grid g3 = Grid::uniform(3, 3, 1.0, {0.0, 1.0});
    auto w3 = QuadratureWeights::trapezoid(g3);
    CHECK(w3(1, 1) == doctest::Approx(0.25));
    CHECK(w3(0, 0) == doctest::Approx(0.0625));
    CHECK(w3(2, 2) == doctest::Approx(0.0625));
}

TEST_CASE("quadrature exactness for the constant field") {
    std::mt19937_64 eng(11);
    for (int trial = 0; trial < 12; ++trial) {
        const int m = 2 + static_cast<int>(eng() % 40);
        const int n = 2 + static_cast<int>(eng() % 40);
        const double T = 0.25 + (eng() % 100) / 25.0;
        const double lo = -1.0 + (eng() % 7) * 0.3;
        const double hi = lo + 0.5 + (eng() % 5) * 0.7;
        Grid g = Grid::uniform(m, n, T, {lo, hi});
        auto w = QuadratureWeights::trapezoid(g);
        CHECK(w.sum() == doctest::Approx(T * (hi - lo)).epsilon(1e-12));
        auto wu = QuadratureWeights::uniform_time_trapezoid_space(g);
        CHECK(wu.sum() == doctest::Approx(T * (hi - lo)).epsilon(1e-12));
        CHECK(wu.time_independent());
    }
}

TEST_CASE("weighted_sq_norm basics") {
    Grid g = Grid::uniform(2, 2, 1.0, {0.0, 1.0});
    auto w = QuadratureWeights::trapezoid(g);

    SpaceTimeField zero(g, 1, 0.0);
    CHECK(weighted_sq_norm(zero, w) == 0.0);

    SpaceTimeField ones(g, 1, 1.0);
    CHECK(weighted_sq_norm(ones, w) == doctest::Approx(1.0)); // sum w = T |domain| = 1

    // two-node hand evaluation: values {1, -1}, weights {0.5, 0.5}
    SpaceTimeField pm(g, 1, 0.0);
    pm.at(0, 0) = 1.0;
    pm.at(0, 1) = -1.0;
    NodeMask first_row(2, 2, false);
    first_row.set(0, 0, true);
    first_row.set(0, 1, true);
    // the 2x2 trapezoid weights are all 0.25; double the field so each term is 0.5
    SpaceTimeField pm2(g, 1, 0.0);
    pm2.at(0, 0) = std::sqrt(2.0);
    pm2.at(0, 1) = -std::sqrt(2.0);
    CHECK(weighted_sq_norm(pm2, w, &first_row) == doctest::Approx(1.0));
}

TEST_CASE("weighted_sq_norm is zero iff the masked field vanishes") {
    Grid g = Grid::uniform(5, 7, 2.0, {0.0, 3.0});
    auto w = QuadratureWeights::trapezoid(g);
    SpaceTimeField f(g, 1, 0.0);
    CHECK(weighted_sq_norm(f, w) == 0.0);
    f.at(3, 4) = 1e-8;
    CHECK(weighted_sq_norm(f, w) > 0.0);
}

TEST_CASE("mask additivity over disjoint masks") {
    std::mt19937_64 eng(42);
    Grid g = Grid::uniform(6, 9, 1.5, {-1.0, 2.0});
    auto w = QuadratureWeights::trapezoid(g);
    SpaceTimeField f(g, 2, 0.0);
    for (int v = 0; v < 2; ++v)
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 9; ++j) f.at(v, i, j) = (eng() % 1000) / 500.0 - 1.0;
    NodeMask a(6, 9, false);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 9; ++j)
            if (eng() % 2) a.set(i, j, true);
    NodeMask b = a.complement();
    const double total = weighted_sq_norm(f, w);
    CHECK(weighted_sq_norm(f, w, &a) + weighted_sq_norm(f, w, &b) ==
          doctest::Approx(total).epsilon(1e-13));
}

TEST_CASE("field file round-trip is bit-stable") {
    Grid g = Grid::uniform(4, 5, 0.7, {-0.25, 1.75});
    SpaceTimeField f(g, 2);
    std::mt19937_64 eng(7);
    for (int v = 0; v < 2; ++v)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 5; ++j) {
                const double mant = (eng() % 2000000) / 999983.0 - 1.0;
                const int expo = static_cast<int>(eng() % 60) - 30;
                f.at(v, i, j) = std::ldexp(mant, expo);
            }
    auto path = temp_file("roundtrip.field");
    write_field(path, f);
    SpaceTimeField back = read_field(path);
    CHECK(back == f);
}

TEST_CASE("field file rejects NaN and short files") {
    Grid g = Grid::uniform(2, 2, 1.0, {0.0, 1.0});
    SpaceTimeField f(g, 1, 0.5);
    auto path = temp_file("bad.field");
    write_field(path, f);

    // inject a NaN value
    {
        std::ifstream in(path);
        std::string all((std::istreambuf_iterator<char>(in)), {});
        auto pos = all.rfind("0.5");
        all.replace(pos, 3, "nan");
        std::ofstream out(path);
        out << all;
    }
    CHECK_THROWS_AS(read_field(path), error);

    // drop the last row: M*N-1 rows is a shape error
    write_field(path, f);
    {
        std::ifstream in(path);
        std::string all((std::istreambuf_iterator<char>(in)), {});
        auto pos = all.rfind('\n', all.size() - 2);
        all.erase(pos + 1);
        std::ofstream out(path);
        out << all;
    }
    CHECK_THROWS_AS(read_field(path), error);
}

TEST_CASE("control field shapes") {
    Grid g = Grid::uniform(3, 4, 1.0, {0.0, 1.0});
    auto c = ControlField::constant(0.25);
    CHECK(c.is_scalar());
    CHECK(c.at(2, 3) == 0.25);
    CHECK(c.dof(g) == 1);

    SpaceTimeField f(g, 1, 0.0);
    f.at(1, 2) = 3.0;
    auto cg = ControlField::grid(std::move(f));
    CHECK(!cg.is_scalar());
    CHECK(cg.at(1, 2) == 3.0);
    CHECK(cg.dof(g) == 12);
}
