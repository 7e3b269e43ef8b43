#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "twinforge/error.hpp"

namespace twinforge {

/// Elementary operations the tape can record. The set is closed: it covers the
/// sigmoid flux expansion, the Rusanov numerical flux, and the quadratic
/// objectives, so every backward rule is exhaustively testable.
enum class Op : std::uint8_t {
    input,
    constant,
    add,
    sub,
    mul,
    div,
    neg,
    sine,
    cosine,
    exponential,
    logistic,
    abs_smooth, // sqrt(x^2 + eps^2) - eps: smooth, exact at zero
    max_smooth, // (a + b + abs_smooth(a - b)) / 2
};

int op_arity(Op op);

struct Node {
    Op op;
    std::int32_t a = -1;
    std::int32_t b = -1;
    double value = 0.0;
};

struct BackwardResult {
    std::vector<double> adjoint; // one entry per tape node
    size_t edges_visited = 0;
};

/// Append-only record of elementary operations; parents always precede their
/// node, so one reverse pass visits every edge exactly once.
class Tape {
public:
    explicit Tape(double smooth_eps = 1e-8) : eps_(smooth_eps) {}

    int input(double value);
    int constant(double value);
    int record(Op op, std::span<const int> parents);

    int add(int a, int b) { return record2(Op::add, a, b); }
    int sub(int a, int b) { return record2(Op::sub, a, b); }
    int mul(int a, int b) { return record2(Op::mul, a, b); }
    int div(int a, int b) { return record2(Op::div, a, b); }
    int neg(int a) { return record1(Op::neg, a); }
    int sin(int a) { return record1(Op::sine, a); }
    int cos(int a) { return record1(Op::cosine, a); }
    int exp(int a) { return record1(Op::exponential, a); }
    int logistic(int a) { return record1(Op::logistic, a); }
    int abs_smooth(int a) { return record1(Op::abs_smooth, a); }
    int max_smooth(int a, int b) { return record2(Op::max_smooth, a, b); }

    double value(int id) const { return nodes_[id].value; }
    void set_input(int id, double value);
    size_t size() const { return nodes_.size(); }
    double smooth_eps() const { return eps_; }

    const std::vector<int>& inputs() const { return inputs_; }
    void mark_output(int id) { outputs_.push_back(id); }
    const std::vector<int>& outputs() const { return outputs_; }

    /// dOutput/dNode for every node on the tape, by a single reverse sweep.
    BackwardResult backward(int output) const;

    void clear();

private:
    int record1(Op op, int a);
    int record2(Op op, int a, int b);
    int push(Op op, int a, int b, double value);
    double eval(Op op, int a, int b) const;

    std::vector<Node> nodes_;
    std::vector<int> inputs_;
    std::vector<int> outputs_;
    std::unordered_map<std::uint64_t, int> const_cache_;
    double eps_;
};

/// Partial derivatives of one implicit step residual F_t(x_{t-1}, x_t, c_t),
/// all matrices row-major. d_cur must be invertible.
struct StepPartials {
    int n = 0;        // state dimension
    int ctrl_dim = 0; // control dimension of this step
    std::vector<double> d_prev; // n x n, dF_t/dx_{t-1}
    std::vector<double> d_cur;  // n x n, dF_t/dx_t
    std::vector<double> d_ctrl; // n x ctrl_dim, dF_t/dc_t
};

struct TimestepAdjointResult {
    /// dxi/dc_t per step (t = 1..T in step order).
    std::vector<std::vector<double>> dxi_dc;
};

/// Discrete adjoint over a chain of (possibly implicit) timesteps: one
/// backward sweep with one transposed solve per step, cost independent of the
/// total control count. dxi_dx[t] is the partial of the objective w.r.t. the
/// state after step t+1; dxi_dc_partial may be empty (treated as zero).
TimestepAdjointResult timestep_adjoint(std::span<const StepPartials> steps,
                                       std::span<const std::vector<double>> dxi_dx,
                                       std::span<const std::vector<double>> dxi_dc_partial);

} // namespace twinforge
