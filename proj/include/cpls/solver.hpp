#pragma once

#include "model.hpp"
#include "penalties.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace cpls {

struct SolverConfig {
    int max_iters = 200000;
    /// Absolute duality-gap target; <= 0 selects relative_gap_tol * (1 + |y|^2 / n).
    double gap_tol = 0.0;
    double relative_gap_tol = 1e-10;
    /// Iterations between gap evaluations.
    int check_every = 5;
    bool record_trace = false;

    void validate() const
    {
        detail::require(max_iters >= 1, "solver: max_iters must be >= 1");
        detail::require(check_every >= 1, "solver: check_every must be >= 1");
        detail::require(std::isfinite(gap_tol), "solver: gap_tol must be finite");
        detail::require(gap_tol > 0.0 || relative_gap_tol > 0.0, "solver: gap_tol must be > 0");
    }

    double resolve_gap_tol(const Vector& y) const
    {
        if (gap_tol > 0.0) return gap_tol;
        return relative_gap_tol * (1.0 + y.squaredNorm() / static_cast<double>(y.size()));
    }
};

struct SolverResult {
    Vector beta_hat;
    Vector fitted;           ///< X beta_hat
    double objective = 0.0;  ///< ||y - X beta||^2 + 2 F(beta), scaled norm
    double gap = 0.0;
    double gap_tol = 0.0;
    int iters = 0;
    bool converged = false;
    /// Gap of the incumbent at every certified checkpoint.
    std::vector<double> gap_trace;
    /// Objective of every accepted iterate.
    std::vector<double> objective_trace;
};

inline double objective_value(const Vector& y, const Vector& fitted, double penalty_value)
{
    return (y - fitted).squaredNorm() / static_cast<double>(y.size()) + 2.0 * penalty_value;
}

namespace detail {

/// Gap of the Fenchel dual  max_u (1/n)(|y|^2 - |y - u|^2)  s.t.  dual_norm(X^T u / n) <= 1,
/// using u = s * residual with the best feasible s. Written as
///   (1 - s)^2 |r|^2 / n + 2 (F(beta) - s beta^T g),   g = X^T r / n,
/// which avoids cancelling the O(|y|^2) terms of primal - dual.
inline double gap_from_parts(const Vector& y, const Vector& fitted, const Vector& beta, const Vector& xt_residual_over_n,
                             double penalty_value, const Penalty& pen)
{
    const double n = static_cast<double>(y.size());
    const Vector r = y - fitted;
    const double rr = r.squaredNorm();
    if (rr == 0.0) return std::max(0.0, 2.0 * penalty_value);
    const double rho = dual_norm(pen, xt_residual_over_n);
    const double s_max = rho > 0.0 ? 1.0 / rho : std::numeric_limits<double>::infinity();
    const double s = std::clamp(y.dot(r) / rr, 0.0, s_max);
    const double gap = (1.0 - s) * (1.0 - s) * rr / n + 2.0 * (penalty_value - s * beta.dot(xt_residual_over_n));
    return std::max(0.0, gap);
}

} // namespace detail

inline double duality_gap(const Vector& beta, const Vector& y, const DesignMatrix& x, const Penalty& pen)
{
    detail::require(beta.size() == x.p() && y.size() == x.n(), "duality_gap: dimension mismatch");
    const Vector fitted = x.matrix() * beta;
    const Vector g = x.matrix().transpose() * (y - fitted) / static_cast<double>(x.n());
    return detail::gap_from_parts(y, fitted, beta, g, eval_penalty(pen, beta), pen);
}

/// Minimizes (1/n)|y - X beta|_2^2 + 2 F(beta) by FISTA with fixed step 1/L,
/// L = 2 sigma_max(X)^2 / n, and function-value restart (a step that raises
/// the objective is discarded and momentum is reset). Stops once the
/// duality gap of the best iterate is <= gap_tol.
class PenalizedLeastSquares {
public:
    PenalizedLeastSquares(DesignMatrix x, Penalty pen, SolverConfig cfg = {})
        : x_(std::move(x)), pen_(std::move(pen)), cfg_(cfg)
    {
        cfg_.validate();
        validate(pen_, x_.p());
        const Matrix& m = x_.matrix();
        const double n = static_cast<double>(x_.n());
        const Matrix gram = m.rows() <= m.cols() ? Matrix(m * m.transpose()) : Matrix(m.transpose() * m);
        Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
        lipschitz_ = 2.0 * std::max(eig.eigenvalues().maxCoeff(), 0.0) / n;
        if (!(lipschitz_ > 0.0)) lipschitz_ = 1.0; // X == 0: any step works
    }

    const DesignMatrix& design() const noexcept { return x_; }
    const Penalty& penalty() const noexcept { return pen_; }
    const SolverConfig& config() const noexcept { return cfg_; }
    double lipschitz() const noexcept { return lipschitz_; }

    SolverResult solve(const Vector& y, const Vector* init = nullptr) const
    {
        detail::require(y.size() == x_.n(), "solve: y must have length n");
        detail::require(y.allFinite(), "solve: y contains NaN or infinite values");
        if (init) {
            detail::require(init->size() == x_.p(), "solve: initial beta must have length p");
            detail::require(init->allFinite(), "solve: initial beta must be finite");
        }
        const Matrix& m = x_.matrix();
        const double n = static_cast<double>(x_.n());
        const double step = 1.0 / lipschitz_;
        const double tol = cfg_.resolve_gap_tol(y);
        Workspace ws;

        Vector x = init ? *init : Vector(Vector::Zero(x_.p()));
        Vector xx = m * x;
        double fx = penalty_value(x, ws);
        double px = objective_value(y, xx, fx);
        Vector z = x, xz = xx, x_prev, xx_prev;
        double t = 1.0;
        bool from_incumbent = true;

        SolverResult out;
        out.gap_tol = tol;
        double best_gap = std::numeric_limits<double>::infinity();
        auto certify = [&] {
            const Vector g = m.transpose() * (y - xx) / n;
            const double gap = detail::gap_from_parts(y, xx, x, g, fx, pen_);
            if (gap < best_gap) {
                best_gap = gap;
                out.beta_hat = x;
                out.fitted = xx;
                out.objective = px;
            }
            out.gap_trace.push_back(best_gap);
        };
        certify();
        if (cfg_.record_trace) out.objective_trace.push_back(px);

        int it = 0;
        while (best_gap > tol && it < cfg_.max_iters) {
            ++it;
            const Vector grad = (2.0 / n) * (m.transpose() * (xz - y));
            Vector x_new = prox_step(z - step * grad, 2.0 * step, ws);
            Vector xx_new = m * x_new;
            const double f_new = penalty_value(x_new, ws);
            const double p_new = objective_value(y, xx_new, f_new);
            if (p_new > px && !from_incumbent) {
                t = 1.0;
                z = x;
                xz = xx;
                from_incumbent = true;
                continue;
            }
            from_incumbent = false;
            x_prev = std::move(x);
            xx_prev = std::move(xx);
            x = std::move(x_new);
            xx = std::move(xx_new);
            fx = f_new;
            px = p_new;
            if (cfg_.record_trace) out.objective_trace.push_back(px);
            const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
            const double mom = (t - 1.0) / t_next;
            z = x + mom * (x - x_prev);
            xz = xx + mom * (xx - xx_prev);
            t = t_next;
            if (it % cfg_.check_every == 0) certify();
        }
        if (it % cfg_.check_every != 0) certify();
        out.gap = best_gap;
        out.iters = it;
        out.converged = best_gap <= tol;
        return out;
    }

private:
    struct Workspace {
        Vector cone_prox_w;
        Vector cone_norm_w;
    };

    double penalty_value(const Vector& beta, Workspace& ws) const
    {
        if (const auto* c = std::get_if<ConePenalty>(&pen_)) {
            const auto r = cone_norm(c->cone, beta, 1e-15, 100000, ws.cone_norm_w.size() ? &ws.cone_norm_w : nullptr);
            if (r.value > 0.0 && std::isfinite(r.value)) ws.cone_norm_w = r.weights;
            return c->lambda * r.value;
        }
        return eval_penalty(pen_, beta);
    }

    Vector prox_step(const Vector& v, double step, Workspace& ws) const
    {
        if (const auto* c = std::get_if<ConePenalty>(&pen_)) {
            auto r = cone_prox(c->cone, v, step * c->lambda, 1e-16, 5000,
                               ws.cone_prox_w.size() ? &ws.cone_prox_w : nullptr);
            ws.cone_prox_w = r.w;
            return std::move(r.b);
        }
        return prox(pen_, v, step);
    }

    DesignMatrix x_;
    Penalty pen_;
    SolverConfig cfg_;
    double lipschitz_ = 1.0;
};

inline SolverResult solve(const Vector& y, const DesignMatrix& x, const Penalty& pen, const SolverConfig& cfg = {},
                          const Vector* init = nullptr)
{
    return PenalizedLeastSquares(x, pen, cfg).solve(y, init);
}

inline nlohmann::json to_json(const SolverResult& r)
{
    nlohmann::json j;
    j["beta_hat"] = vector_to_json(r.beta_hat);
    j["objective"] = r.objective;
    j["gap"] = r.gap;
    j["iters"] = r.iters;
    j["converged"] = r.converged;
    return j;
}

// ---------------------------------------------------------------------------
// Certificates

struct StationarityReport {
    double dual_norm = 0.0;     ///< dual_norm((1/n) X^T (y - X beta_hat))
    double alignment = 0.0;     ///< v^T beta_hat
    double penalty = 0.0;       ///< F(beta_hat)
    bool zero_solution = false; ///< only dual feasibility checked
    bool pass = false;
};

/// With v = (1/n) X^T (y - X beta_hat): v must lie in the dual ball and, when
/// beta_hat != 0, satisfy v^T beta_hat = F(beta_hat).
inline StationarityReport stationarity_certificate(const SolverResult& result, const Vector& y, const DesignMatrix& x,
                                                   const Penalty& pen)
{
    const Vector v = x.matrix().transpose() * (y - x.matrix() * result.beta_hat) / static_cast<double>(x.n());
    StationarityReport r;
    r.dual_norm = dual_norm(pen, v);
    const bool feasible = r.dual_norm <= 1.0 + 1e-6;
    r.zero_solution = result.beta_hat.cwiseAbs().maxCoeff() == 0.0;
    if (r.zero_solution) {
        r.pass = feasible;
        return r;
    }
    r.alignment = v.dot(result.beta_hat);
    r.penalty = eval_penalty(pen, result.beta_hat);
    r.pass = feasible && r.alignment >= r.penalty - 1e-6 * (1.0 + std::abs(r.alignment));
    return r;
}

struct BasicInequalityReport {
    std::size_t trials = 0;
    double worst_slack = std::numeric_limits<double>::infinity(); ///< min over trials of rhs - lhs
    double tolerance = 0.0;
    bool pass = true;
};

/// For every trial beta:
///   ||X bh - f||^2 - ||X b - f||^2
///     <= 2((1/n) xi^T X (bh - b) + F(b) - F(bh)) - ||X (bh - b)||^2
/// up to 10 * gap_tol.
inline BasicInequalityReport basic_inequality_check(const SolverResult& result, const Problem& problem,
                                                    const Observation& obs, const Penalty& pen,
                                                    const std::vector<Vector>& trial_betas)
{
    const Matrix& m = problem.design.matrix();
    const double n = static_cast<double>(problem.design.n());
    const Vector& bh = result.beta_hat;
    const double fh = eval_penalty(pen, bh);
    const double err_h = (result.fitted - problem.mean).squaredNorm() / n;
    BasicInequalityReport r;
    r.tolerance = 10.0 * result.gap_tol;
    for (const auto& b : trial_betas) {
        detail::require(b.size() == bh.size(), "basic inequality: trial beta has wrong length");
        const Vector xb = m * b;
        const Vector xd = result.fitted - xb;
        const double lhs = err_h - (xb - problem.mean).squaredNorm() / n;
        const double rhs = 2.0 * (obs.noise.dot(xd) / n + eval_penalty(pen, b) - fh) - xd.squaredNorm() / n;
        r.worst_slack = std::min(r.worst_slack, rhs - lhs);
        ++r.trials;
    }
    r.pass = r.trials == 0 || r.worst_slack >= -r.tolerance;
    return r;
}

} // namespace cpls
