#pragma once

#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

#include "twinforge/error.hpp"
#include "twinforge/tape.hpp"

namespace twinforge {

/// Tensor-product sigmoid basis identifier: per input dimension a resolution
/// j_d and an integer shift eta_d. The univariate factor in dimension d is
/// logistic(2^{j_d} u_d - eta_d), centered at eta_d / 2^{j_d}.
struct BasisId {
    std::vector<int> j;
    std::vector<int> eta;

    int dims() const { return static_cast<int>(j.size()); }
    double center(int d) const { return std::ldexp(static_cast<double>(eta[d]), -j[d]); }
    int resolution_sum() const;

    bool operator==(const BasisId& other) const { return j == other.j && eta == other.eta; }

    /// Deterministic order for significance ties: lower sum of resolutions
    /// first, then lexicographic on (j, eta).
    static bool tie_less(const BasisId& a, const BasisId& b);
};

BasisId make_basis1(int j, int eta);

double mother_sigmoid(double u);

struct BasisEval {
    double value = 0.0;
    std::vector<double> gradient; // d value / d u_d
};

BasisEval eval_basis(const BasisId& id, std::span<const double> u);

struct ScalarFluxEval {
    double value = 0.0;
    double derivative = 0.0;
};

/// Ordered basis dictionary (the active set) with one coefficient per basis.
class Dictionary {
public:
    Dictionary() = default;

    int size() const { return static_cast<int>(ids_.size()); }
    bool empty() const { return ids_.empty(); }
    int dims() const { return ids_.empty() ? 0 : ids_.front().dims(); }

    const std::vector<BasisId>& ids() const { return ids_; }
    const BasisId& id(int i) const { return ids_[i]; }
    const std::vector<double>& alphas() const { return alphas_; }
    double alpha(int i) const { return alphas_[i]; }

    void add(BasisId id, double alpha = 0.0);
    void insert(int index, BasisId id, double alpha);
    void remove(int index);
    int find(const BasisId& id) const; // -1 if absent
    void set_alpha(int i, double a) { alphas_[i] = a; }
    void set_alphas(std::span<const double> a);

    /// F(u) = sum alpha_i phi_i(u) and its gradient w.r.t. u.
    BasisEval eval(std::span<const double> u) const;

    /// Univariate fast path: value and d/du.
    ScalarFluxEval eval1(double u) const;

private:
    std::vector<BasisId> ids_;
    std::vector<double> alphas_;
};

/// Neighborhood of a basis set: per member and per dimension, one resolution
/// increment keeping the center (j+1, 2*eta) and two center shifts (j, eta+-1),
/// union over members with duplicates removed (first-seen order).
std::vector<BasisId> neighborhood(std::span<const BasisId> ids);

/// Dictionary expansion recorded on a tape, with the coefficients as tape
/// inputs so one backward sweep yields d/dalpha for everything downstream.
class TapedFlux {
public:
    TapedFlux(Tape& tape, const Dictionary& dict);

    const std::vector<int>& alpha_nodes() const { return alpha_nodes_; }

    /// Record F(u_node) and dF/du(u_node); shares the per-basis logistic
    /// subexpressions between the two outputs. Univariate dictionaries only.
    std::pair<int, int> record_value_and_derivative(Tape& tape, int u_node) const;

private:
    const Dictionary* dict_;
    std::vector<int> alpha_nodes_;
};

void save_dictionary(const std::filesystem::path& path, const Dictionary& dict);
Dictionary load_dictionary(const std::filesystem::path& path);

} // namespace twinforge
