#pragma once

#include "model.hpp"
#include "parallel.hpp"
#include "penalties.hpp"
#include "rng.hpp"
#include "solver.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cpls {

/// C = {u : N_o(X^T u) <= n}, the set whose projection residual is the fit:
/// X beta_hat(y) = y - P_C(y) for the objective (1/n)|y - X beta|^2 + 2 N(beta).
/// Gauge of u with respect to C, for any norm penalty.
inline double dual_gauge(const DesignMatrix& x, const Penalty& pen, const Vector& u)
{
    detail::require(u.size() == x.n(), "dual gauge: u must have length n");
    return dual_norm(pen, x.matrix().transpose() * u) / static_cast<double>(x.n());
}

/// Explicit constraint list of C for L1 (slabs |x_j^T u| <= n lambda) and
/// group penalties (cylinders |X_G^T u|_2 <= n lambda).
class DualBall {
public:
    struct Slab {
        Vector normal;
        double normal_sq = 0.0;
    };
    /// |S U^T u|_2 <= radius with X_G = U S V^T (thin, nonzero singular values).
    struct Cylinder {
        Matrix u;
        Vector s;
    };

    DualBall(const DesignMatrix& x, const Penalty& pen)
    {
        validate(pen, x.p());
        n_ = x.n();
        const Matrix& m = x.matrix();
        if (const auto* l1 = std::get_if<L1Penalty>(&pen)) {
            radius_ = static_cast<double>(n_) * l1->lambda;
            for (Index j = 0; j < m.cols(); ++j) {
                const double sq = m.col(j).squaredNorm();
                if (sq > 0.0) slabs_.push_back({m.col(j), sq});
            }
        } else if (const auto* g = std::get_if<GroupPenalty>(&pen)) {
            radius_ = static_cast<double>(n_) * g->lambda;
            for (const auto& group : g->partition.groups()) {
                Matrix block(m.rows(), static_cast<Index>(group.size()));
                for (std::size_t c = 0; c < group.size(); ++c) block.col(static_cast<Index>(c)) = m.col(static_cast<Index>(group[c]));
                Eigen::JacobiSVD<Matrix> svd(block, Eigen::ComputeThinU);
                const Vector& sv = svd.singularValues();
                if (sv.size() == 0 || sv[0] <= 0.0) continue;
                Index rank = 0;
                while (rank < sv.size() && sv[rank] > 1e-12 * sv[0]) ++rank;
                cylinders_.push_back({svd.matrixU().leftCols(rank), sv.head(rank)});
            }
        } else {
            throw ValidationError("dual ball: explicit constraints exist only for l1 and group penalties");
        }
    }

    Index n() const noexcept { return n_; }
    double radius() const noexcept { return radius_; }
    const std::vector<Slab>& slabs() const noexcept { return slabs_; }
    const std::vector<Cylinder>& cylinders() const noexcept { return cylinders_; }
    std::size_t constraint_count() const noexcept { return slabs_.size() + cylinders_.size(); }

    /// max over constraints of (constraint value) / radius; <= 1 iff u in C.
    double gauge(const Vector& u) const
    {
        double worst = 0.0;
        for (const auto& sl : slabs_) worst = std::max(worst, std::abs(sl.normal.dot(u)));
        for (const auto& cy : cylinders_) worst = std::max(worst, (cy.s.asDiagonal() * (cy.u.transpose() * u)).norm());
        return worst / radius_;
    }

private:
    Index n_ = 0;
    double radius_ = 0.0;
    std::vector<Slab> slabs_;
    std::vector<Cylinder> cylinders_;
};

struct ProjectionResult {
    Vector u;               ///< feasible point of C
    double error_bound = 0; ///< certified bound on |u - P_C(y)|_2
    int cycles = 0;
    bool converged = false;
};

/// Dykstra's alternating projections, cycling over the constraints with one
/// correction vector each. Since Dykstra is block coordinate ascent on the
/// dual of min 1/2|u - y|^2 over the intersection, the corrections give a
/// dual point; with u scaled back into C this bounds |u - P_C(y)|_2 by
/// sqrt(2 * gap). Stops once that bound is <= tol * (1 + |y|_2); an absolute
/// target is not certifiable much below sqrt(eps) * |y|_2 in double precision.
inline ProjectionResult dual_ball_project(const Vector& y, const DualBall& ball, double tol = 1e-7,
                                          int max_cycles = 1000000)
{
    detail::require(y.size() == ball.n(), "dual ball projection: y must have length n");
    detail::require(y.allFinite(), "dual ball projection: y must be finite");
    detail::require(tol > 0.0, "dual ball projection: tol must be > 0");
    const double r = ball.radius();
    const auto& slabs = ball.slabs();
    const auto& cyls = ball.cylinders();

    // slab corrections are multiples of the normal; cylinder ones live in span(U)
    std::vector<double> slab_coef(slabs.size(), 0.0);
    std::vector<Vector> cyl_coef(cyls.size());
    for (std::size_t k = 0; k < cyls.size(); ++k) cyl_coef[k] = Vector::Zero(cyls[k].s.size());

    Vector u = y;
    ProjectionResult out;

    // The certificate is evaluated in long double at u = y - sum_i I_i rebuilt
    // from the corrections: the bound is sqrt(2 * gap), so drift or roundoff in
    // the gap would otherwise floor it near sqrt(eps) * |y|.
    using ld = long double;
    using VectorL = Eigen::Matrix<ld, Eigen::Dynamic, 1>;
    const VectorL y_l = y.cast<ld>();
    auto certify = [&]() -> double {
        VectorL ul = y_l;
        for (std::size_t i = 0; i < slabs.size(); ++i)
            if (slab_coef[i] != 0.0) ul -= static_cast<ld>(slab_coef[i]) * slabs[i].normal.cast<ld>();
        for (std::size_t k = 0; k < cyls.size(); ++k)
            if (cyl_coef[k].squaredNorm() > 0.0) ul -= cyls[k].u.cast<ld>() * cyl_coef[k].cast<ld>();
        u = ul.cast<double>(); // resync the iterate

        ld worst = 0.0L, gap = 0.0L;
        const ld rl = r;
        for (std::size_t i = 0; i < slabs.size(); ++i) {
            const ld d = slabs[i].normal.cast<ld>().dot(ul);
            worst = std::max(worst, std::abs(d));
            const ld c = slab_coef[i];
            if (c != 0.0L) gap += rl * std::abs(c) - c * d;
        }
        for (std::size_t k = 0; k < cyls.size(); ++k) {
            const auto& cy = cyls[k];
            const VectorL proj = cy.u.cast<ld>().transpose() * ul;
            worst = std::max(worst, (cy.s.cast<ld>().cwiseProduct(proj)).norm());
            const VectorL w = cyl_coef[k].cast<ld>();
            const ld wn = (w.array() / cy.s.cast<ld>().array()).matrix().norm();
            if (wn > 0.0L) gap += rl * wn - w.dot(proj); // sigma(U w) = r |S^{-1} w|
        }
        const ld scale = std::max(1.0L, worst / rl);
        // primal(u/scale) - dual(I) = 1/2 |u/scale - y|^2 - 1/2 |u - y|^2 + sum_i (sigma_i(I_i) - I_i^T u)
        const VectorL d = -(1.0L - 1.0L / scale) * ul;
        gap += 0.5L * d.dot(d + 2.0L * (ul - y_l));
        out.u = (ul / scale).cast<double>();
        return static_cast<double>(std::sqrt(2.0L * std::max(0.0L, gap)));
    };

    const double target = tol * (1.0 + y.norm());
    double bound = certify();
    int cycle = 0;
    for (; cycle < max_cycles && bound > target; ++cycle) {
        for (std::size_t i = 0; i < slabs.size(); ++i) {
            const auto& sl = slabs[i];
            // z = u + I_i, project z onto the slab
            const double a = sl.normal.dot(u) + slab_coef[i] * sl.normal_sq;
            const double clipped = std::clamp(a, -r, r);
            const double next = (a - clipped) / sl.normal_sq;
            u.noalias() += (slab_coef[i] - next) * sl.normal;
            slab_coef[i] = next;
        }
        for (std::size_t k = 0; k < cyls.size(); ++k) {
            const auto& cy = cyls[k];
            const Vector c = cy.u.transpose() * u + cyl_coef[k];
            const Vector sc = cy.s.cwiseProduct(c);
            Vector next = Vector::Zero(c.size());
            if (sc.norm() > r) {
                // nu > 0 with sum s_i^2 c_i^2 / (1 + nu s_i^2)^2 = r^2; Newton on 1/|.| - 1/r
                const Vector s2 = cy.s.array().square();
                double nu = 0.0;
                for (int it = 0; it < 200; ++it) {
                    const Eigen::ArrayXd den = 1.0 + nu * s2.array();
                    const double phi = (s2.array() * c.array().square() / den.square()).sum();
                    const double dphi = -2.0 * (s2.array().square() * c.array().square() / den.cube()).sum();
                    const double root = std::sqrt(phi);
                    if (std::abs(root - r) <= 1e-15 * r) break;
                    const double psi = 1.0 / root - 1.0 / r;
                    const double dpsi = -0.5 * dphi / (phi * root);
                    const double step = psi / dpsi;
                    nu = std::max(0.0, nu - step);
                    if (std::abs(step) <= 1e-16 * std::max(nu, 1e-300)) break;
                }
                const Eigen::ArrayXd den = 1.0 + nu * s2.array();
                next = c.array() - c.array() / den; // c - zeta
            }
            u.noalias() += cy.u * (cyl_coef[k] - next);
            cyl_coef[k] = std::move(next);
        }
        bound = certify();
    }
    out.error_bound = bound;
    out.cycles = cycle;
    out.converged = bound <= target;
    if (!out.converged)
        throw ConvergenceError("dual ball projection: cycle cap reached with error bound " + detail::sci(bound));
    return out;
}

// ---------------------------------------------------------------------------
// Certificates

/// {check, instances, worst_slack, pass}; slack is rhs - lhs of the tested
/// inequality, so pass iff worst_slack >= -tol.
struct GeometryReport {
    std::string check;
    std::size_t instances = 0;
    double worst_slack = std::numeric_limits<double>::infinity();
    double tol = 0.0;
    bool pass = true;

    void add(double slack)
    {
        worst_slack = std::min(worst_slack, slack);
        pass = pass && slack >= -tol;
    }
};

inline GeometryReport merge(const GeometryReport& a, const GeometryReport& b)
{
    GeometryReport out = a;
    out.instances += b.instances;
    out.worst_slack = std::min(a.worst_slack, b.worst_slack);
    out.tol = std::max(a.tol, b.tol);
    out.pass = a.pass && b.pass;
    return out;
}

inline nlohmann::json to_json(const GeometryReport& r)
{
    nlohmann::json j;
    j["check"] = r.check;
    j["instances"] = r.instances;
    j["worst_slack"] = std::isfinite(r.worst_slack) ? nlohmann::json(r.worst_slack) : nlohmann::json(nullptr);
    j["pass"] = r.pass;
    return j;
}

struct GeometryOptions {
    double tol = 1e-6;          ///< end-to-end tolerance, scaled units
    double dykstra_tol = 1e-7;  ///< |u - P_C(y)|_2 relative to 1 + |y|_2
    std::size_t samples = 1000; ///< sampled u' in C for the variational inequality
    std::uint64_t seed = 0;
    unsigned threads = 0;
};

/// Tight solver settings for certificates that compare two solutions: the
/// fit error is at most sqrt(gap) in scaled norm.
inline SolverConfig certification_solver_config()
{
    SolverConfig cfg;
    cfg.relative_gap_tol = 1e-14;
    cfg.max_iters = 500000;
    return cfg;
}

/// Gaussian u with the scale of y, pulled into C by 1 / max(1, gauge(u)).
inline Vector sample_dual_ball_point(const DesignMatrix& x, const Penalty& pen, double scale, Engine& eng)
{
    Vector u = scale * standard_normal(x.n(), eng);
    const double g = dual_gauge(x, pen, u);
    return u / std::max(1.0, g);
}

/// X beta_hat(y) = y - P_C(y). For L1/group both sides are computed (solver vs
/// Dykstra) and compared in scaled norm. For SLOPE/cone, theta = y - X beta_hat
/// must lie in C and satisfy (1/n)(y - theta)^T (theta - u') >= -tol for
/// sampled u' in C.
inline GeometryReport projection_identity_check(const Problem& problem, const Observation& obs, const Penalty& pen,
                                                const SolverConfig& cfg = certification_solver_config(),
                                                const GeometryOptions& opt = {})
{
    problem.validate();
    const DesignMatrix& x = problem.design;
    const double n = static_cast<double>(x.n());
    const auto res = solve(obs.y, x, pen, cfg);
    if (!res.converged)
        throw ConvergenceError("projection identity: solver stopped at gap " + detail::sci(res.gap) + " > " + detail::sci(res.gap_tol));
    GeometryReport report;
    report.check = "projection_identity";
    report.instances = 1;
    report.tol = opt.tol;
    const Vector theta = obs.y - res.fitted;
    const auto kind = kind_of(pen);
    if (kind == PenaltyKind::l1 || kind == PenaltyKind::group) {
        const DualBall ball(x, pen);
        const auto proj = dual_ball_project(obs.y, ball, opt.dykstra_tol);
        report.add(-scaled_norm((obs.y - proj.u) - res.fitted));
        return report;
    }
    report.add(1.0 - dual_gauge(x, pen, theta));
    Engine eng = make_engine(opt.seed, 0x7669ull);
    const double scale = std::max(obs.y.norm() / std::sqrt(n), 1e-300);
    const Vector fit = obs.y - theta;
    report.add(fit.dot(theta) / n); // u' = 0
    for (std::size_t i = 0; i < opt.samples; ++i) {
        const Vector up = sample_dual_ball_point(x, pen, scale, eng);
        report.add(fit.dot(theta - up) / n);
    }
    return report;
}

struct ContractionReport {
    GeometryReport lipschitz;           ///< |mu(y) - mu(y')| <= |y - y'|
    std::optional<GeometryReport> firm; ///< L1/group only
};

/// For each pair: ||X bh(y) - X bh(y')|| <= ||y - y'|| + tol, and for L1/group
/// the firm bound ||mu - mu'||^2 <= ||y - y'||^2 - (1/n)|P_C(y) - P_C(y')|^2 + tol
/// with P_C from Dykstra. Pairs are independent and may run concurrently;
/// results are folded in pair order.
inline ContractionReport contraction_check(const DesignMatrix& x, const Penalty& pen,
                                           const std::vector<std::pair<Vector, Vector>>& pairs,
                                           const SolverConfig& cfg = certification_solver_config(),
                                           const GeometryOptions& opt = {})
{
    const PenalizedLeastSquares solver(x, pen, cfg);
    const auto kind = kind_of(pen);
    const bool firm = kind == PenaltyKind::l1 || kind == PenaltyKind::group;
    std::optional<DualBall> ball;
    if (firm) ball.emplace(x, pen);
    const double n = static_cast<double>(x.n());

    std::vector<double> lip(pairs.size()), fn(pairs.size());
    parallel_for(
        pairs.size(),
        [&](std::size_t i) {
            const auto& [y1, y2] = pairs[i];
            detail::require(y1.size() == x.n() && y2.size() == x.n(), "contraction: pair vectors must have length n");
            const auto r1 = solver.solve(y1);
            const auto r2 = solver.solve(y2);
            if (!r1.converged || !r2.converged)
                throw ConvergenceError("contraction: solver did not converge on pair " + std::to_string(i));
            const double dy = scaled_norm(y1 - y2);
            const double dmu = scaled_norm(r1.fitted - r2.fitted);
            lip[i] = dy - dmu;
            if (firm) {
                const auto p1 = dual_ball_project(y1, *ball, opt.dykstra_tol);
                const auto p2 = dual_ball_project(y2, *ball, opt.dykstra_tol);
                fn[i] = dy * dy - (p1.u - p2.u).squaredNorm() / n - dmu * dmu;
            }
        },
        opt.threads);

    ContractionReport out;
    out.lipschitz.check = "contraction";
    out.lipschitz.tol = opt.tol;
    for (double s : lip) out.lipschitz.add(s);
    out.lipschitz.instances = pairs.size();
    if (firm) {
        GeometryReport f;
        f.check = "firm_nonexpansiveness";
        f.tol = opt.tol;
        for (double s : fn) f.add(s);
        f.instances = pairs.size();
        out.firm = f;
    }
    return out;
}

} // namespace cpls
