#include "twinforge/tape.hpp"

#include <cmath>
#include <cstring>

namespace twinforge {

int op_arity(Op op) {
    switch (op) {
        case Op::input:
        case Op::constant:
            return 0;
        case Op::neg:
        case Op::sine:
        case Op::cosine:
        case Op::exponential:
        case Op::logistic:
        case Op::abs_smooth:
            return 1;
        case Op::add:
        case Op::sub:
        case Op::mul:
        case Op::div:
        case Op::max_smooth:
            return 2;
    }
    throw error(errc::config, "unknown op tag");
}

int Tape::input(double value) {
    if (!std::isfinite(value)) throw error(errc::numeric, "tape: non-finite input value");
    int id = push(Op::input, -1, -1, value);
    inputs_.push_back(id);
    return id;
}

int Tape::constant(double value) {
    if (!std::isfinite(value)) throw error(errc::numeric, "tape: non-finite constant");
    std::uint64_t key;
    std::memcpy(&key, &value, sizeof key);
    auto it = const_cache_.find(key);
    if (it != const_cache_.end()) return it->second;
    int id = push(Op::constant, -1, -1, value);
    const_cache_.emplace(key, id);
    return id;
}

void Tape::set_input(int id, double value) {
    if (nodes_[id].op != Op::input) throw error(errc::config, "tape: node is not an input");
    nodes_[id].value = value;
}

int Tape::record(Op op, std::span<const int> parents) {
    const int arity = op_arity(op);
    if (arity == 0)
        throw error(errc::config, "tape: input/constant nodes are not recorded via record()");
    if (static_cast<int>(parents.size()) != arity)
        throw error(errc::config, "tape: parent count mismatch for op");
    for (int p : parents)
        if (p < 0 || p >= static_cast<int>(nodes_.size()))
            throw error(errc::config, "tape: parent not on tape");
    int a = parents[0];
    int b = arity == 2 ? parents[1] : -1;
    return push(op, a, b, eval(op, a, b));
}

int Tape::record1(Op op, int a) {
    int parents[1] = {a};
    return record(op, parents);
}

int Tape::record2(Op op, int a, int b) {
    int parents[2] = {a, b};
    return record(op, parents);
}

int Tape::push(Op op, int a, int b, double value) {
    if (!std::isfinite(value))
        throw error(errc::numeric, "tape: non-finite value at node " + std::to_string(nodes_.size()));
    nodes_.push_back({op, a, b, value});
    return static_cast<int>(nodes_.size()) - 1;
}

double Tape::eval(Op op, int a, int b) const {
    const double va = nodes_[a].value;
    const double vb = b >= 0 ? nodes_[b].value : 0.0;
    switch (op) {
        case Op::add: return va + vb;
        case Op::sub: return va - vb;
        case Op::mul: return va * vb;
        case Op::div: return va / vb;
        case Op::neg: return -va;
        case Op::sine: return std::sin(va);
        case Op::cosine: return std::cos(va);
        case Op::exponential: return std::exp(va);
        case Op::logistic: return 1.0 / (1.0 + std::exp(-va));
        case Op::abs_smooth: return std::sqrt(va * va + eps_ * eps_) - eps_;
        case Op::max_smooth: {
            const double d = va - vb;
            return 0.5 * (va + vb + (std::sqrt(d * d + eps_ * eps_) - eps_));
        }
        case Op::input:
        case Op::constant:
            break;
    }
    throw error(errc::config, "tape: unexpected op in eval");
}

BackwardResult Tape::backward(int output) const {
    if (output < 0 || output >= static_cast<int>(nodes_.size()))
        throw error(errc::config, "tape: backward output not on tape");
    BackwardResult res;
    res.adjoint.assign(nodes_.size(), 0.0);
    res.adjoint[output] = 1.0;
    for (int id = output; id >= 0; --id) {
        const Node& nd = nodes_[id];
        const double bar = res.adjoint[id];
        switch (nd.op) {
            case Op::input:
            case Op::constant:
                break;
            case Op::add:
                res.adjoint[nd.a] += bar;
                res.adjoint[nd.b] += bar;
                res.edges_visited += 2;
                break;
            case Op::sub:
                res.adjoint[nd.a] += bar;
                res.adjoint[nd.b] -= bar;
                res.edges_visited += 2;
                break;
            case Op::mul:
                res.adjoint[nd.a] += bar * nodes_[nd.b].value;
                res.adjoint[nd.b] += bar * nodes_[nd.a].value;
                res.edges_visited += 2;
                break;
            case Op::div: {
                const double vb = nodes_[nd.b].value;
                res.adjoint[nd.a] += bar / vb;
                res.adjoint[nd.b] -= bar * nd.value / vb;
                res.edges_visited += 2;
                break;
            }
            case Op::neg:
                res.adjoint[nd.a] -= bar;
                res.edges_visited += 1;
                break;
            case Op::sine:
                res.adjoint[nd.a] += bar * std::cos(nodes_[nd.a].value);
                res.edges_visited += 1;
                break;
            case Op::cosine:
                res.adjoint[nd.a] -= bar * std::sin(nodes_[nd.a].value);
                res.edges_visited += 1;
                break;
            case Op::exponential:
                res.adjoint[nd.a] += bar * nd.value;
                res.edges_visited += 1;
                break;
            case Op::logistic:
                res.adjoint[nd.a] += bar * nd.value * (1.0 - nd.value);
                res.edges_visited += 1;
                break;
            case Op::abs_smooth:
                res.adjoint[nd.a] += bar * nodes_[nd.a].value / (nd.value + eps_);
                res.edges_visited += 1;
                break;
            case Op::max_smooth: {
                const double d = nodes_[nd.a].value - nodes_[nd.b].value;
                const double r = std::sqrt(d * d + eps_ * eps_);
                res.adjoint[nd.a] += bar * 0.5 * (1.0 + d / r);
                res.adjoint[nd.b] += bar * 0.5 * (1.0 - d / r);
                res.edges_visited += 2;
                break;
            }
        }
    }
    return res;
}

void Tape::clear() {
    nodes_.clear();
    inputs_.clear();
    outputs_.clear();
    const_cache_.clear();
}

namespace {

/// Solve A^T y = rhs for small dense A (row-major) by Gaussian elimination
/// with partial pivoting. Throws on a singular matrix.
std::vector<double> solve_transposed(const std::vector<double>& a_rowmajor, int n,
                                     std::vector<double> rhs, int step_index) {
    std::vector<double> m(static_cast<size_t>(n) * n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) m[static_cast<size_t>(r) * n + c] = a_rowmajor[static_cast<size_t>(c) * n + r];
    for (int col = 0; col < n; ++col) {
        int piv = col;
        double best = std::abs(m[static_cast<size_t>(col) * n + col]);
        for (int r = col + 1; r < n; ++r) {
            double v = std::abs(m[static_cast<size_t>(r) * n + col]);
            if (v > best) { best = v; piv = r; }
        }
        if (best < 1e-300)
            throw error(errc::numeric,
                        "timestep_adjoint: singular step Jacobian at timestep " + std::to_string(step_index));
        if (piv != col) {
            for (int c = 0; c < n; ++c)
                std::swap(m[static_cast<size_t>(piv) * n + c], m[static_cast<size_t>(col) * n + c]);
            std::swap(rhs[piv], rhs[col]);
        }
        for (int r = col + 1; r < n; ++r) {
            double f = m[static_cast<size_t>(r) * n + col] / m[static_cast<size_t>(col) * n + col];
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c)
                m[static_cast<size_t>(r) * n + c] -= f * m[static_cast<size_t>(col) * n + c];
            rhs[r] -= f * rhs[col];
        }
    }
    std::vector<double> y(n);
    for (int r = n - 1; r >= 0; --r) {
        double s = rhs[r];
        for (int c = r + 1; c < n; ++c) s -= m[static_cast<size_t>(r) * n + c] * y[c];
        y[r] = s / m[static_cast<size_t>(r) * n + r];
    }
    return y;
}

} // namespace

TimestepAdjointResult timestep_adjoint(std::span<const StepPartials> steps,
                                       std::span<const std::vector<double>> dxi_dx,
                                       std::span<const std::vector<double>> dxi_dc_partial) {
    const int t_count = static_cast<int>(steps.size());
    if (static_cast<int>(dxi_dx.size()) != t_count)
        throw error(errc::config, "timestep_adjoint: need one dxi/dx entry per step");
    TimestepAdjointResult out;
    out.dxi_dc.resize(t_count);

    // Lagrangian stationarity: B_t^T lambda_t = -(dxi/dx_t)^T - A_{t+1}^T lambda_{t+1},
    // then dxi/dc_t = (dxi/dc_t)_partial + lambda_t^T C_t.
    std::vector<double> lambda_next; // lambda_{t+1}
    for (int t = t_count - 1; t >= 0; --t) {
        const StepPartials& st = steps[t];
        const int n = st.n;
        std::vector<double> rhs(n);
        for (int r = 0; r < n; ++r) rhs[r] = -dxi_dx[t][r];
        if (t + 1 < t_count) {
            const StepPartials& nx = steps[t + 1];
            for (int r = 0; r < n; ++r) {
                double s = 0.0;
                for (int c = 0; c < n; ++c)
                    s += nx.d_prev[static_cast<size_t>(c) * n + r] * lambda_next[c];
                rhs[r] -= s;
            }
        }
        std::vector<double> lambda = solve_transposed(st.d_cur, n, std::move(rhs), t + 1);
        std::vector<double> g(st.ctrl_dim, 0.0);
        for (int c = 0; c < st.ctrl_dim; ++c) {
            double s = 0.0;
            for (int r = 0; r < n; ++r)
                s += lambda[r] * st.d_ctrl[static_cast<size_t>(r) * st.ctrl_dim + c];
            g[c] = s;
            if (!dxi_dc_partial.empty() && !dxi_dc_partial[t].empty())
                g[c] += dxi_dc_partial[t][c];
        }
        out.dxi_dc[t] = std::move(g);
        lambda_next = std::move(lambda);
    }
    return out;
}

} // namespace twinforge
