#include "twinforge/field.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "json.hpp"

namespace twinforge {

Grid Grid::uniform(int time_nodes, int space_nodes, double t_final, Interval domain) {
    if (time_nodes < 2)
        throw error(errc::config, "grid: time node count must be >= 2, got " + std::to_string(time_nodes));
    if (space_nodes < 2)
        throw error(errc::config, "grid: space node count must be >= 2, got " + std::to_string(space_nodes));
    if (!(t_final > 0.0))
        throw error(errc::config, "grid: final time must be positive");
    if (!(domain.hi > domain.lo))
        throw error(errc::config, "grid: domain must satisfy x_hi > x_lo");
    Grid g;
    g.m_ = time_nodes;
    g.n_ = space_nodes;
    g.t_final_ = t_final;
    g.domain_ = domain;
    return g;
}

bool Grid::operator==(const Grid& other) const {
    return m_ == other.m_ && n_ == other.n_ && t_final_ == other.t_final_ &&
           domain_.lo == other.domain_.lo && domain_.hi == other.domain_.hi;
}

NodeMask NodeMask::complement() const {
    NodeMask out(m_, n_, false);
    for (size_t p = 0; p < bits_.size(); ++p) out.bits_[p] = bits_[p] ? 0 : 1;
    return out;
}

long NodeMask::count() const {
    long c = 0;
    for (auto b : bits_) c += b;
    return c;
}

QuadratureWeights::QuadratureWeights(int m, int n, std::vector<double> w)
    : m_(m), n_(n), w_(std::move(w)) {
    for (double v : w_)
        if (!(v > 0.0)) throw error(errc::config, "quadrature weights must be positive");
}

namespace {
std::vector<double> trapezoid_1d(int nodes, double spacing) {
    std::vector<double> w(nodes, spacing);
    w.front() = 0.5 * spacing;
    w.back() = 0.5 * spacing;
    return w;
}
} // namespace

QuadratureWeights QuadratureWeights::trapezoid(const Grid& grid) {
    auto wt = trapezoid_1d(grid.time_nodes(), grid.dt());
    auto wx = trapezoid_1d(grid.space_nodes(), grid.dx());
    std::vector<double> w(grid.node_count());
    for (int i = 0; i < grid.time_nodes(); ++i)
        for (int j = 0; j < grid.space_nodes(); ++j)
            w[static_cast<size_t>(i) * grid.space_nodes() + j] = wt[i] * wx[j];
    return QuadratureWeights(grid.time_nodes(), grid.space_nodes(), std::move(w));
}

QuadratureWeights QuadratureWeights::uniform_time_trapezoid_space(const Grid& grid) {
    const double wt = grid.t_final() / grid.time_nodes();
    auto wx = trapezoid_1d(grid.space_nodes(), grid.dx());
    std::vector<double> w(grid.node_count());
    for (int i = 0; i < grid.time_nodes(); ++i)
        for (int j = 0; j < grid.space_nodes(); ++j)
            w[static_cast<size_t>(i) * grid.space_nodes() + j] = wt * wx[j];
    return QuadratureWeights(grid.time_nodes(), grid.space_nodes(), std::move(w));
}

double QuadratureWeights::sum() const {
    double s = 0.0;
    for (double v : w_) s += v;
    return s;
}

bool QuadratureWeights::time_independent() const {
    for (int i = 1; i < m_; ++i)
        for (int j = 0; j < n_; ++j)
            if ((*this)(i, j) != (*this)(0, j)) return false;
    return true;
}

SpaceTimeField::SpaceTimeField(Grid grid, int vars, double init)
    : grid_(grid), k_(vars),
      v_(static_cast<size_t>(vars) * grid.node_count(), init) {
    if (vars < 1) throw error(errc::config, "field: variable count must be >= 1");
}

std::span<double> SpaceTimeField::row(int var, int i) {
    return {v_.data() + idx(var, i, 0), static_cast<size_t>(grid_.space_nodes())};
}

std::span<const double> SpaceTimeField::row(int var, int i) const {
    return {v_.data() + idx(var, i, 0), static_cast<size_t>(grid_.space_nodes())};
}

bool SpaceTimeField::all_finite() const {
    for (double v : v_)
        if (!std::isfinite(v)) return false;
    return true;
}

bool SpaceTimeField::operator==(const SpaceTimeField& other) const {
    return grid_ == other.grid_ && k_ == other.k_ && v_ == other.v_;
}

ControlField ControlField::constant(double value) {
    ControlField c;
    c.scalar_ = true;
    c.value_ = value;
    return c;
}

ControlField ControlField::grid(SpaceTimeField values) {
    if (values.vars() != 1)
        throw error(errc::config, "control grid must have a single variable");
    ControlField c;
    c.scalar_ = false;
    c.field_ = std::make_shared<SpaceTimeField>(std::move(values));
    return c;
}

const SpaceTimeField& ControlField::values() const {
    if (scalar_) throw error(errc::config, "scalar control has no grid values");
    return *field_;
}

double weighted_sq_norm(const SpaceTimeField& field, const QuadratureWeights& weights,
                        const NodeMask* mask) {
    const Grid& g = field.grid();
    if (weights.time_nodes() != g.time_nodes() || weights.space_nodes() != g.space_nodes())
        throw error(errc::config, "weighted_sq_norm: weights shape mismatch");
    if (mask && (mask->time_nodes() != g.time_nodes() || mask->space_nodes() != g.space_nodes()))
        throw error(errc::config, "weighted_sq_norm: mask shape mismatch");
    double s = 0.0;
    for (int i = 0; i < g.time_nodes(); ++i)
        for (int j = 0; j < g.space_nodes(); ++j) {
            if (mask && !mask->contains(i, j)) continue;
            double q = 0.0;
            for (int v = 0; v < field.vars(); ++v) {
                double x = field(v, i, j);
                q += x * x;
            }
            s += weights(i, j) * q;
        }
    return s;
}

namespace {
void format_double(char* buf, size_t cap, double v) { std::snprintf(buf, cap, "%.17g", v); }
} // namespace

void write_field(const std::filesystem::path& path, const SpaceTimeField& field) {
    if (!field.all_finite())
        throw error(errc::numeric, "write_field: field contains non-finite values");
    std::ofstream out(path);
    if (!out) throw error(errc::io, "write_field: cannot open " + path.string());
    const Grid& g = field.grid();
    nlohmann::ordered_json header;
    header["k"] = field.vars();
    header["M"] = g.time_nodes();
    header["N"] = g.space_nodes();
    header["T"] = g.t_final();
    header["x_lo"] = g.domain().lo;
    header["x_hi"] = g.domain().hi;
    out << "# " << header.dump() << "\n";
    char buf[40];
    for (int i = 0; i < g.time_nodes(); ++i)
        for (int j = 0; j < g.space_nodes(); ++j) {
            format_double(buf, sizeof buf, g.t(i));
            out << buf << ',';
            format_double(buf, sizeof buf, g.x(j));
            out << buf;
            for (int v = 0; v < field.vars(); ++v) {
                format_double(buf, sizeof buf, field(v, i, j));
                out << ',' << buf;
            }
            out << '\n';
        }
    if (!out) throw error(errc::io, "write_field: write failed for " + path.string());
}

SpaceTimeField read_field(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw error(errc::io, "read_field: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.size() < 2 || line[0] != '#')
        throw error(errc::io, "read_field: missing header line in " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line.substr(1));
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::io, std::string("read_field: malformed header: ") + e.what());
    }
    int k, m, n;
    double t_final, x_lo, x_hi;
    try {
        k = header.at("k").get<int>();
        m = header.at("M").get<int>();
        n = header.at("N").get<int>();
        t_final = header.at("T").get<double>();
        x_lo = header.at("x_lo").get<double>();
        x_hi = header.at("x_hi").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::io, std::string("read_field: incomplete header: ") + e.what());
    }
    Grid g = Grid::uniform(m, n, t_final, {x_lo, x_hi});
    SpaceTimeField field(g, k);
    long rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (rows >= g.node_count())
            throw error(errc::io, "read_field: too many data rows, expected " +
                                      std::to_string(g.node_count()));
        const int i = static_cast<int>(rows / n);
        const int j = static_cast<int>(rows % n);
        const char* p = line.c_str();
        char* end = nullptr;
        // skip the t and x columns
        for (int skip = 0; skip < 2; ++skip) {
            std::strtod(p, &end);
            if (end == p || *end != ',')
                throw error(errc::io, "read_field: malformed row " + std::to_string(rows + 1));
            p = end + 1;
        }
        for (int v = 0; v < k; ++v) {
            double val = std::strtod(p, &end);
            if (end == p)
                throw error(errc::io, "read_field: malformed row " + std::to_string(rows + 1));
            if (!std::isfinite(val))
                throw error(errc::numeric, "read_field: non-finite value at row " +
                                               std::to_string(rows + 1));
            field.at(v, i, j) = val;
            p = (*end == ',') ? end + 1 : end;
        }
        ++rows;
    }
    if (rows != g.node_count())
        throw error(errc::io, "read_field: expected " + std::to_string(g.node_count()) +
                                  " data rows, found " + std::to_string(rows));
    return field;
}

} // namespace twinforge
