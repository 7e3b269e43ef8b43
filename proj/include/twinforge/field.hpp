#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "twinforge/error.hpp"

namespace twinforge {

struct Interval {
    double lo = 0.0;
    double hi = 1.0;
    double length() const { return hi - lo; }
};

/// Uniform space-time grid. Both endpoints are included in the node sets:
/// t_i = i * T/(M-1), x_j = x_lo + j * (x_hi-x_lo)/(N-1).
class Grid {
public:
    static Grid uniform(int time_nodes, int space_nodes, double t_final, Interval domain);

    int time_nodes() const { return m_; }
    int space_nodes() const { return n_; }
    double t_final() const { return t_final_; }
    Interval domain() const { return domain_; }

    double dt() const { return t_final_ / (m_ - 1); }
    double dx() const { return domain_.length() / (n_ - 1); }
    double t(int i) const { return i == m_ - 1 ? t_final_ : i * dt(); }
    double x(int j) const { return j == n_ - 1 ? domain_.hi : domain_.lo + j * dx(); }

    long node_count() const { return static_cast<long>(m_) * n_; }
    bool operator==(const Grid& other) const;

private:
    Grid() = default;
    int m_ = 0, n_ = 0;
    double t_final_ = 0.0;
    Interval domain_;
};

/// Subset of space-time grid nodes; used for cross-validation folds and
/// masked mismatch sums.
class NodeMask {
public:
    NodeMask(int time_nodes, int space_nodes, bool initially = true)
        : m_(time_nodes), n_(space_nodes),
          bits_(static_cast<size_t>(time_nodes) * space_nodes, initially ? 1 : 0) {}

    bool contains(int i, int j) const { return bits_[idx(i, j)] != 0; }
    void set(int i, int j, bool on) { bits_[idx(i, j)] = on ? 1 : 0; }

    NodeMask complement() const;
    long count() const;

    int time_nodes() const { return m_; }
    int space_nodes() const { return n_; }

private:
    size_t idx(int i, int j) const { return static_cast<size_t>(i) * n_ + j; }
    int m_, n_;
    std::vector<std::uint8_t> bits_;
};

/// Space-time quadrature weights w_ij > 0 with sum T * |domain|.
class QuadratureWeights {
public:
    /// Tensor-product trapezoid rule on the grid's nodes.
    static QuadratureWeights trapezoid(const Grid& grid);

    /// Time-independent variant (w_ij = w_j for all i): trapezoid in space,
    /// constant T/M per time row. Used by the contraction diagnostic.
    static QuadratureWeights uniform_time_trapezoid_space(const Grid& grid);

    double operator()(int i, int j) const { return w_[static_cast<size_t>(i) * n_ + j]; }
    double sum() const;
    int time_nodes() const { return m_; }
    int space_nodes() const { return n_; }
    bool time_independent() const;

private:
    QuadratureWeights(int m, int n, std::vector<double> w);
    int m_, n_;
    std::vector<double> w_;
};

/// Discretized k-variable solution on an M x N space-time grid.
class SpaceTimeField {
public:
    explicit SpaceTimeField(Grid grid, int vars = 1, double init = 0.0);

    double operator()(int var, int i, int j) const { return v_[idx(var, i, j)]; }
    double& at(int var, int i, int j) { return v_[idx(var, i, j)]; }

    // k = 1 shortcuts
    double operator()(int i, int j) const { return v_[idx(0, i, j)]; }
    double& at(int i, int j) { return v_[idx(0, i, j)]; }

    int vars() const { return k_; }
    const Grid& grid() const { return grid_; }

    std::span<double> row(int var, int i);
    std::span<const double> row(int var, int i) const;

    bool all_finite() const;
    bool operator==(const SpaceTimeField& other) const;

private:
    size_t idx(int var, int i, int j) const {
        return (static_cast<size_t>(var) * grid_.time_nodes() + i) * grid_.space_nodes() + j;
    }
    Grid grid_;
    int k_;
    std::vector<double> v_;
};

/// Source-term control: a scalar constant or a full M x N grid of values.
class ControlField {
public:
    static ControlField constant(double value);
    static ControlField grid(SpaceTimeField values);

    bool is_scalar() const { return scalar_; }
    double scalar_value() const { return value_; }
    const SpaceTimeField& values() const;
    double at(int i, int j) const { return scalar_ ? value_ : (*field_)(i, j); }

    /// Number of gradient degrees of freedom (1 or M*N).
    long dof(const Grid& grid) const { return scalar_ ? 1 : grid.node_count(); }

private:
    ControlField() = default;
    bool scalar_ = true;
    double value_ = 0.0;
    std::shared_ptr<const SpaceTimeField> field_;
};

/// Sum over masked nodes of w_ij * sum_vars value^2. Full grid when mask is null.
double weighted_sq_norm(const SpaceTimeField& field, const QuadratureWeights& weights,
                        const NodeMask* mask = nullptr);

SpaceTimeField read_field(const std::filesystem::path& path);
void write_field(const std::filesystem::path& path, const SpaceTimeField& field);

} // namespace twinforge
