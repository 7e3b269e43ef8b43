#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>

#include "twinforge/twin.hpp"

namespace twinforge {

/// Random disjoint partition of the grid nodes into k folds whose sizes
/// differ by at most one.
class FoldSplit {
public:
    static FoldSplit random(int time_nodes, int space_nodes, int k_folds, std::uint64_t seed);

    int k_folds() const { return k_; }
    int fold_of(int i, int j) const { return assignment_[static_cast<size_t>(i) * n_ + j]; }
    NodeMask fold_mask(int fold) const;
    NodeMask training_mask(int fold) const; // complement of the fold
    std::uint64_t seed() const { return seed_; }

private:
    FoldSplit() = default;
    int k_ = 0, m_ = 0, n_ = 0;
    std::uint64_t seed_ = 0;
    std::vector<int> assignment_;
};

struct BfgsOptions {
    double grad_tol = 1e-8; // infinity norm
    int max_iters = 200;
    double armijo_c1 = 1e-4;
    double backtrack = 0.5;
    int max_backtracks = 30;
    // stop after two consecutive steps whose relative decrease is below this
    // (the round-off floor of the taped objective)
    double stall_rel_decrease = 1e-10;
};

struct SgdOptions {
    double step = 1.0;   // lambda
    int batch = 32;
    int epochs = 50;
    double tol = 1e-6;   // relative change of the truncation error per epoch
};

struct TrainConfig {
    int k_folds = 2;
    double l1_weight = 0.0; // smoothed L1 on alpha; 0 disables
    BfgsOptions bfgs;
    SgdOptions sgd;
    int max_outer_iters = 64;
    std::uint64_t seed = 0;
    int jobs = 1;
};

enum class TrainMetric { mismatch, truncation };

/// Sum over masked nodes of w_ij (twin_ij - gray_ij)^2.
double mismatch(const SpaceTimeField& twin_solution, const SpaceTimeField& gray,
                const QuadratureWeights& weights, const NodeMask* mask = nullptr);

/// Sum over masked nodes of w_ij tau_ij^2 with tau from residual_field; never
/// solves the twin PDE.
double truncation_error(const TwinModel& twin, const SpaceTimeField& gray,
                        const ControlField& control, const QuadratureWeights& weights,
                        const NodeMask* mask = nullptr);

struct InnerResult {
    std::vector<double> alpha;
    double objective = 0.0;
    int iterations = 0; // accepted BFGS steps
    bool line_search_failed = false;
    bool converged = false;
};

/// BFGS with Armijo backtracking on the chosen metric, warm-started from the
/// dictionary's current coefficients.
InnerResult minimize_inner(const TwinModel& twin, const SpaceTimeField& gray,
                           const ControlField& control, const QuadratureWeights& weights,
                           const NodeMask* mask, TrainMetric metric, const TrainConfig& config);

/// Generic BFGS entry (exposed for its own tests): fn evaluates the objective
/// and writes the gradient.
InnerResult bfgs_minimize(const std::function<double(std::span<const double>, std::span<double>)>& fn,
                          std::vector<double> x0, const BfgsOptions& options);

struct SgdResult {
    std::vector<double> alpha;
    double initial_error = 0.0;
    double final_error = 0.0;
    int epochs_run = 0;
    bool diverged = false;
};

/// Algorithm: stochastic gradient descent on the integrated truncation error
/// over shuffled mini-batches of grid nodes. Zero twin PDE solves.
SgdResult sgd_pretrain(const TwinModel& twin, const SpaceTimeField& gray,
                       const ControlField& control, const QuadratureWeights& weights,
                       const TrainConfig& config);

/// |d metric / d alpha_candidate| at alpha_candidate = 0 with the dictionary
/// held at its current coefficients; one value per candidate.
std::vector<double> candidate_significances(const TwinModel& twin,
                                            std::span<const BasisId> candidates,
                                            const SpaceTimeField& gray, const ControlField& control,
                                            const QuadratureWeights& weights, const NodeMask* mask,
                                            TrainMetric metric);

double significance(const TwinModel& twin, const BasisId& candidate, const SpaceTimeField& gray,
                    const ControlField& control, const QuadratureWeights& weights,
                    const NodeMask* mask, TrainMetric metric);

/// Significance of each dictionary member: the metric gradient w.r.t. its
/// coefficient evaluated with that coefficient zeroed (the optimum itself is
/// stationary, so the zeroed-coefficient point is what ranks members).
std::vector<double> member_significances(const TwinModel& twin, const SpaceTimeField& gray,
                                         const ControlField& control,
                                         const QuadratureWeights& weights, const NodeMask* mask,
                                         TrainMetric metric);

/// Mean held-out validation error over the folds; each fold's twin is trained
/// on the complement, warm-started from the supplied coefficients.
double cross_validate(const TwinModel& twin, const SpaceTimeField& gray,
                      const ControlField& control, const QuadratureWeights& weights,
                      const FoldSplit& split, TrainMetric metric, const TrainConfig& config);

struct TrainStep {
    enum class Kind { forward, backward };
    Kind kind = Kind::forward;
    BasisId basis;
    double significance = 0.0;
    double validation_error = 0.0;
    bool accepted = false;
    bool skipped = false; // backward candidate equal to the just-added basis
    double inner_objective = 0.0;
    int dictionary_size = 0;
};

struct TrainReport {
    std::vector<TrainStep> steps;
    std::vector<double> accepted_validation_errors;
    Dictionary dictionary;
    double final_inner_objective = 0.0;
    double final_validation_error = 0.0;
    TrainMetric metric = TrainMetric::mismatch;
    bool reached_outer_limit = false;
    long twin_solves = 0;
    double wall_seconds = 0.0;
};

/// Adaptive basis construction: forward steps add the most significant
/// neighborhood candidate while cross-validation improves, backward steps
/// drop the least significant member; exits on the first rejected forward
/// step. Starts from one low-resolution basis centered on the solution range.
TrainReport adaptive_train(const TwinModel& prototype, const SpaceTimeField& gray,
                           const ControlField& control, const QuadratureWeights& weights,
                           const TrainConfig& config, TrainMetric metric);

Dictionary initial_dictionary(const SpaceTimeField& gray);

struct ContractionReport {
    /// W-norm Lipschitz factor of the one-step map, |G a - G b|_W / |a - b|_W.
    /// (The squared-ratio convention makes the stated bound fail numerically
    /// even for honest contractive steps; the linear factor satisfies it.)
    double beta = 0.0;
    double mismatch_value = 0.0;
    double truncation_value = 0.0;
    bool applicable = false; // beta + margin < 1
    bool bound_holds = false;
};

/// Contraction diagnostic: estimates the one-step Lipschitz factor of the
/// implicit twin in the weighted norm (random pairs plus power iteration) and
/// checks mismatch <= truncation / (1 - beta) when beta + 0.01 < 1. Requires
/// time-independent weights.
ContractionReport contraction_check(const TwinModel& twin, const SpaceTimeField& gray,
                                    const ControlField& control, const QuadratureWeights& weights,
                                    std::uint64_t seed = 7);

struct FluxRecoveryReport {
    double u_min = 0.0, u_max = 0.0;
    double derivative_rel_l2 = 0.0;     // on [u_min, u_max]
    double mean_value_offset = 0.0;     // mean of (twin - oracle) flux values
    double value_rel_l2_after_offset = 0.0;
    std::array<double, 3> perturbation_sizes{0.01, 0.05, 0.1};
    std::array<double, 3> perturbation_mismatches{};
    bool monotone = false;
};

using FluxOracle = std::function<std::pair<double, double>(double)>; // u -> (F, dF/du)

/// Verification-context diagnostic: compares the trained flux derivative to
/// an oracle on the solution-covered range, and runs the monotonicity sweep
/// (larger flux-derivative perturbations must not shrink the sup-norm
/// solution difference).
FluxRecoveryReport flux_recovery_report(const TwinModel& twin, const FluxOracle& oracle,
                                        const SpaceTimeField& gray, const ControlField& control);

} // namespace twinforge
