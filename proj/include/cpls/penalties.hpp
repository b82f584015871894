#pragma once

#include "types.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>

namespace cpls {

// ---------------------------------------------------------------------------
// Domain types

/// Partition of {0,...,p-1} into M groups of common size T.
class GroupPartition {
public:
    GroupPartition() = default;

    explicit GroupPartition(std::vector<IndexSet> groups) : groups_(std::move(groups))
    {
        detail::require(!groups_.empty(), "partition: need at least one group");
        group_size_ = groups_.front().size();
        detail::require(group_size_ >= 1, "partition: groups must be nonempty");
        std::size_t p = 0;
        for (const auto& g : groups_) {
            detail::require(g.size() == group_size_, "partition: all groups must have the same size T");
            p += g.size();
        }
        std::vector<char> seen(p, 0);
        for (const auto& g : groups_)
            for (auto j : g) {
                detail::require(j < p, "partition: index out of range");
                detail::require(!seen[j], "partition: groups must be disjoint");
                seen[j] = 1;
            }
        dimension_ = p;
    }

    /// Consecutive blocks {0..T-1}, {T..2T-1}, ...
    static GroupPartition contiguous(std::size_t p, std::size_t group_size)
    {
        detail::require(group_size >= 1 && p % group_size == 0, "partition: T must divide p");
        std::vector<IndexSet> groups(p / group_size);
        for (std::size_t k = 0; k < groups.size(); ++k) {
            groups[k].resize(group_size);
            std::iota(groups[k].begin(), groups[k].end(), k * group_size);
        }
        return GroupPartition(std::move(groups));
    }

    const std::vector<IndexSet>& groups() const noexcept { return groups_; }
    const IndexSet& group(std::size_t k) const { return groups_.at(k); }
    std::size_t group_size() const noexcept { return group_size_; }  ///< T
    std::size_t group_count() const noexcept { return groups_.size(); } ///< M
    std::size_t dimension() const noexcept { return dimension_; }     ///< p

private:
    std::vector<IndexSet> groups_;
    std::size_t group_size_ = 0;
    std::size_t dimension_ = 0;
};

/// Strictly positive, non-increasing weights mu_1 >= ... >= mu_p > 0.
class SlopeWeights {
public:
    SlopeWeights() = default;

    explicit SlopeWeights(Vector mu) : mu_(std::move(mu))
    {
        detail::require(mu_.size() >= 1, "slope weights: empty");
        detail::require(mu_.allFinite(), "slope weights: must be finite");
        for (Index j = 0; j < mu_.size(); ++j) {
            detail::require(mu_[j] > 0.0, "slope weights: must be positive");
            if (j > 0) detail::require(mu_[j] <= mu_[j - 1], "slope weights: must be non-increasing");
        }
    }

    const Vector& values() const noexcept { return mu_; }
    Index size() const noexcept { return mu_.size(); }

private:
    Vector mu_;
};

/// mu_j = sigma * sqrt(log(2p/j) / n), j = 1..p.
inline SlopeWeights slope_weights(Index p, Index n, double sigma)
{
    detail::require(p >= 1 && n >= 1, "slope_weights: p, n must be >= 1");
    detail::require(sigma > 0.0, "slope_weights: sigma must be > 0");
    Vector mu(p);
    for (Index j = 1; j <= p; ++j)
        mu[j - 1] = sigma * std::sqrt(std::log(2.0 * static_cast<double>(p) / static_cast<double>(j)) /
                                      static_cast<double>(n));
    return SlopeWeights(std::move(mu));
}

/// Polyhedral cone described by the extremal points of its truncation to the
/// l1 unit ball. Rows of `extremal` are the points.
struct PolyhedralCone {
    Matrix extremal;
    std::vector<IndexSet> admissible;
    /// Set for block cones: every union of blocks is admissible.
    std::optional<GroupPartition> blocks;

    Index dimension() const noexcept { return extremal.cols(); }
    Index point_count() const noexcept { return extremal.rows(); }

    void validate() const
    {
        detail::require(extremal.rows() >= 1 && extremal.cols() >= 1, "cone: need at least one extremal point");
        detail::require(extremal.allFinite(), "cone: extremal points must be finite");
        for (Index k = 0; k < extremal.rows(); ++k) {
            detail::require((extremal.row(k).array() >= 0.0).all(), "cone: extremal points must be nonnegative");
            detail::require(extremal.row(k).sum() <= 1.0 + 1e-12, "cone: extremal points need |a|_1 <= 1");
        }
        for (const auto& s : admissible)
            for (auto j : s) detail::require(static_cast<Index>(j) < dimension(), "cone: admissible index out of range");
        if (blocks) detail::require(static_cast<Index>(blocks->dimension()) == dimension(), "cone: block partition size");
    }
};

/// Cone of block-constant vectors; extremal points are 1_{G_k} / T.
inline PolyhedralCone block_cone(const GroupPartition& partition)
{
    const auto p = static_cast<Index>(partition.dimension());
    const double t = static_cast<double>(partition.group_size());
    PolyhedralCone cone;
    cone.extremal = Matrix::Zero(static_cast<Index>(partition.group_count()), p);
    for (std::size_t k = 0; k < partition.group_count(); ++k)
        for (auto j : partition.group(k)) cone.extremal(static_cast<Index>(k), static_cast<Index>(j)) = 1.0 / t;
    cone.blocks = partition;
    return cone;
}

inline bool is_admissible(const PolyhedralCone& cone, IndexSet s)
{
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    if (s.empty() || static_cast<Index>(s.size()) == cone.dimension()) return true;
    for (auto declared : cone.admissible) {
        std::sort(declared.begin(), declared.end());
        declared.erase(std::unique(declared.begin(), declared.end()), declared.end());
        if (declared == s) return true;
    }
    if (cone.blocks) {
        std::vector<char> in(static_cast<std::size_t>(cone.dimension()), 0);
        for (auto j : s) {
            if (static_cast<Index>(j) >= cone.dimension()) return false;
            in[j] = 1;
        }
        for (const auto& g : cone.blocks->groups()) {
            const auto hits = std::count_if(g.begin(), g.end(), [&](std::size_t j) { return in[j] != 0; });
            if (hits != 0 && static_cast<std::size_t>(hits) != g.size()) return false;
        }
        return true;
    }
    return false;
}

struct L1Penalty {
    double lambda = 1.0;
};

struct GroupPenalty {
    GroupPartition partition;
    double lambda = 1.0;
};

/// A * |beta|_* with the multiplier kept apart from the weights.
struct SlopePenalty {
    double scale = 8.0;
    SlopeWeights weights;
};

struct ConePenalty {
    PolyhedralCone cone;
    double lambda = 1.0;
};

using Penalty = std::variant<L1Penalty, GroupPenalty, SlopePenalty, ConePenalty>;

enum class PenaltyKind { l1, group, slope, cone };

inline PenaltyKind kind_of(const Penalty& pen) { return static_cast<PenaltyKind>(pen.index()); }

inline const char* kind_name(PenaltyKind kind)
{
    switch (kind) {
    case PenaltyKind::l1: return "l1";
    case PenaltyKind::group: return "group";
    case PenaltyKind::slope: return "slope";
    case PenaltyKind::cone: return "cone";
    }
    return "?";
}

/// lambda, or A for SLOPE.
inline double multiplier(const Penalty& pen)
{
    return std::visit(
        [](const auto& p) -> double {
            if constexpr (std::is_same_v<std::decay_t<decltype(p)>, SlopePenalty>)
                return p.scale;
            else
                return p.lambda;
        },
        pen);
}

inline Penalty with_multiplier(Penalty pen, double value)
{
    std::visit(
        [value](auto& p) {
            if constexpr (std::is_same_v<std::decay_t<decltype(p)>, SlopePenalty>)
                p.scale = value;
            else
                p.lambda = value;
        },
        pen);
    return pen;
}

/// The underlying norm N with lambda (or A) set to 1.
inline Penalty unit_penalty(const Penalty& pen) { return with_multiplier(pen, 1.0); }

inline void validate(const Penalty& pen, Index p)
{
    const double m = multiplier(pen);
    detail::require(std::isfinite(m) && m > 0.0, "penalty: lambda / A must be > 0");
    std::visit(
        [p](const auto& q) {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, GroupPenalty>)
                detail::require(static_cast<Index>(q.partition.dimension()) == p, "penalty: partition does not cover p");
            else if constexpr (std::is_same_v<T, SlopePenalty>)
                detail::require(q.weights.size() == p, "penalty: mu must have length p");
            else if constexpr (std::is_same_v<T, ConePenalty>) {
                q.cone.validate();
                detail::require(q.cone.dimension() == p, "penalty: cone dimension must be p");
            }
        },
        pen);
}

// ---------------------------------------------------------------------------
// Cone-generated norm  ||beta||_A = inf_{a in hull(E)} sqrt(sum_j beta_j^2 / a_j)

struct ConeNormResult {
    double value = 0.0;   ///< ||beta||_A (lambda = 1)
    Vector weights;       ///< convex weights over the extremal points
    Vector a;             ///< minimizing point of hull(E)
    double gap = 0.0;     ///< certified bound on value^2 - inf
    bool converged = true;
    int iterations = 0;
};

namespace detail {

/// h(w) and the Frank-Wolfe gap max_k G_k - h(w).
inline std::pair<double, double> cone_objective(const Matrix& e, const Vector& b2, const Vector& w)
{
    const Vector a = e.transpose() * w;
    Vector ratio = Vector::Zero(b2.size());
    double h = 0.0;
    for (Index j = 0; j < b2.size(); ++j)
        if (b2[j] > 0.0) {
            if (!(a[j] > 0.0)) return {std::numeric_limits<double>::infinity(), 0.0};
            h += b2[j] / a[j];
            ratio[j] = b2[j] / (a[j] * a[j]);
        }
    return {h, (e * ratio).maxCoeff() - h};
}

/// One damped Newton step for h restricted to the face {w_k > 0 : w_k large
/// or G_k near h}, with the simplex constraint enforced through a KKT system.
/// Returns true and updates w when the step lowers h, or keeps h flat to
/// rounding while halving the gap.
inline bool cone_face_newton(const Matrix& e, const Vector& b2, const Vector& a, const Vector& grad, double h,
                             double gap, Vector& w)
{
    const Index k = e.rows();
    std::vector<Index> face;
    for (Index i = 0; i < k; ++i)
        if (w[i] > 1e-6 * w.maxCoeff() || grad[i] >= h * (1.0 - 1e-6)) face.push_back(i);
    const Index m = static_cast<Index>(face.size());
    Vector dcoef(b2.size());
    for (Index j = 0; j < b2.size(); ++j) dcoef[j] = b2[j] > 0.0 ? 2.0 * b2[j] / (a[j] * a[j] * a[j]) : 0.0;
    Matrix kkt = Matrix::Zero(m + 1, m + 1);
    Vector rhs = Vector::Zero(m + 1);
    for (Index r = 0; r < m; ++r) {
        for (Index c = 0; c < m; ++c)
            kkt(r, c) = (e.row(face[r]).array() * e.row(face[c]).array() * dcoef.transpose().array()).sum();
        kkt(r, m) = kkt(m, r) = 1.0;
        rhs[r] = grad[face[r]];
    }
    const Vector base = w;
    const Vector sol = kkt.completeOrthogonalDecomposition().solve(rhs);
    Vector dir = Vector::Zero(k);
    for (Index r = 0; r < m; ++r) dir[face[r]] = sol[r];
    if (!dir.allFinite()) return false;
    double tmax = 1.0;
    for (Index i = 0; i < k; ++i)
        if (dir[i] < 0.0) tmax = std::min(tmax, -base[i] / dir[i]);
    for (double t = tmax; t > 1e-6; t *= 0.5) {
        // a positive floor lets the multiplicative update revive dropped points
        Vector trial = (base + t * dir).cwiseMax(1e-300);
        trial /= trial.sum();
        const auto [ht, gt] = cone_objective(e, b2, trial);
        if (ht < h || (ht <= h * (1.0 + 1e-15) && gt < 0.5 * gap)) {
            w = trial;
            return true;
        }
    }
    return false;
}

} // namespace detail

/// Minimizes h(w) = sum_j beta_j^2 / (E^T w)_j over the simplex by the
/// majorize-minimize update w_k <- w_k sqrt(G_k) / sum, G_k = -dh/dw_k, which
/// decreases h monotonically, with a Newton step on the active face every 25
/// iterations. Terms with beta_j = 0 are 0 whatever a_j is.
/// The Frank-Wolfe gap max_k G_k - h(w) bounds h(w) - min h.
inline ConeNormResult cone_norm(const PolyhedralCone& cone, const Vector& beta, double rel_tol = 1e-13,
                                int max_iters = 100000, const Vector* warm = nullptr)
{
    detail::require(beta.size() == cone.dimension(), "cone norm: dimension mismatch");
    const Matrix& e = cone.extremal;
    const Index k = e.rows();
    ConeNormResult out;
    const Vector b2 = beta.array().square();
    if (b2.maxCoeff() == 0.0) {
        out.weights = Vector::Constant(k, 1.0 / static_cast<double>(k));
        out.a = e.transpose() * out.weights;
        return out;
    }
    const Vector coverage = e.colwise().sum().transpose();
    for (Index j = 0; j < b2.size(); ++j)
        if (b2[j] > 0.0 && coverage[j] <= 0.0) {
            out.value = std::numeric_limits<double>::infinity();
            out.weights = Vector::Constant(k, 1.0 / static_cast<double>(k));
            out.a = e.transpose() * out.weights;
            return out;
        }

    Vector w = (warm && warm->size() == k && warm->minCoeff() > 0.0) ? Vector(*warm / warm->sum())
                                                                        : Vector::Constant(k, 1.0 / static_cast<double>(k));
    Vector a(b2.size()), ratio(b2.size()), grad(k);
    double h = 0.0, gap = 0.0, checkpoint = std::numeric_limits<double>::infinity();
    int it = 0;
    for (;; ++it) {
        a.noalias() = e.transpose() * w;
        h = 0.0;
        for (Index j = 0; j < b2.size(); ++j) {
            ratio[j] = b2[j] > 0.0 ? b2[j] / (a[j] * a[j]) : 0.0;
            if (b2[j] > 0.0) h += b2[j] / a[j];
        }
        grad.noalias() = e * ratio; // G_k
        gap = std::max(0.0, grad.maxCoeff() - h);
        if (gap <= rel_tol * h || it >= max_iters) break;
        if (it % 25 == 24) {
            if (detail::cone_face_newton(e, b2, a, grad, h, gap, w)) continue;
            // h is flat to rounding: the gap certificate cannot tighten further
            if (checkpoint - h <= 1e-15 * h) break;
            checkpoint = h;
        }
        Vector next = w.array() * grad.array().sqrt();
        const double total = next.sum();
        if (!(total > 0.0) || !next.allFinite()) break;
        w = next / total;
    }
    out.value = std::sqrt(h);
    out.weights = w;
    out.a = a;
    out.gap = gap;
    out.converged = gap <= rel_tol * h;
    out.iterations = it;
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace detail {

/// |u| sorted non-increasingly; ties keep original index order.
inline std::vector<Index> order_by_magnitude(const Vector& u)
{
    std::vector<Index> order(static_cast<std::size_t>(u.size()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return std::abs(u[a]) > std::abs(u[b]); });
    return order;
}

inline Vector sorted_magnitudes(const Vector& u)
{
    Vector s = u.cwiseAbs();
    std::sort(s.data(), s.data() + s.size(), std::greater<>());
    return s;
}

inline double sorted_l1(const Vector& mu, const Vector& u) { return mu.dot(sorted_magnitudes(u)); }

inline void require_dim(const Penalty& pen, Index size)
{
    std::visit(
        [size](const auto& q) {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, GroupPenalty>)
                require(static_cast<Index>(q.partition.dimension()) == size, "penalty: dimension mismatch");
            else if constexpr (std::is_same_v<T, SlopePenalty>)
                require(q.weights.size() == size, "penalty: dimension mismatch");
            else if constexpr (std::is_same_v<T, ConePenalty>)
                require(q.cone.dimension() == size, "penalty: dimension mismatch");
        },
        pen);
}

inline double group_sum(const GroupPartition& part, const Vector& v)
{
    double s = 0.0;
    for (const auto& g : part.groups()) {
        double sq = 0.0;
        for (auto j : g) sq += v[static_cast<Index>(j)] * v[static_cast<Index>(j)];
        s += std::sqrt(sq);
    }
    return s;
}

inline double group_max(const GroupPartition& part, const Vector& v)
{
    double m = 0.0;
    for (const auto& g : part.groups()) {
        double sq = 0.0;
        for (auto j : g) sq += v[static_cast<Index>(j)] * v[static_cast<Index>(j)];
        m = std::max(m, std::sqrt(sq));
    }
    return m;
}

} // namespace detail

/// Loose threshold beyond which an inner cone solve is reported as failed.
inline constexpr double kConeFailureTol = 1e-8;

/// F(beta).
inline double eval_penalty(const Penalty& pen, const Vector& beta)
{
    detail::require_dim(pen, beta.size());
    return std::visit(
        [&](const auto& q) -> double {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, L1Penalty>)
                return q.lambda * beta.lpNorm<1>();
            else if constexpr (std::is_same_v<T, GroupPenalty>)
                return q.lambda * detail::group_sum(q.partition, beta);
            else if constexpr (std::is_same_v<T, SlopePenalty>)
                return q.scale * detail::sorted_l1(q.weights.values(), beta);
            else {
                const auto r = cone_norm(q.cone, beta);
                if (!r.converged && r.gap > kConeFailureTol * r.value * r.value)
                    throw ConvergenceError("cone norm: inner solve stopped at relative gap " +
                                           detail::sci(r.gap / (r.value * r.value)));
                return q.lambda * r.value;
            }
        },
        pen);
}

/// N_o(v) / multiplier: the dual of F's norm, so v^T beta <= dual_norm(v) * F(beta).
inline double dual_norm(const Penalty& pen, const Vector& v)
{
    detail::require_dim(pen, v.size());
    return std::visit(
        [&](const auto& q) -> double {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, L1Penalty>)
                return v.lpNorm<Eigen::Infinity>() / q.lambda;
            else if constexpr (std::is_same_v<T, GroupPenalty>)
                return detail::group_max(q.partition, v) / q.lambda;
            else if constexpr (std::is_same_v<T, SlopePenalty>) {
                const Vector s = detail::sorted_magnitudes(v);
                const Vector& mu = q.weights.values();
                double num = 0.0, den = 0.0, best = 0.0;
                for (Index k = 0; k < s.size(); ++k) {
                    num += s[k];
                    den += mu[k];
                    best = std::max(best, num / den);
                }
                return best / q.scale;
            } else {
                const Vector v2 = v.array().square();
                return std::sqrt(std::max(0.0, (q.cone.extremal * v2).maxCoeff())) / q.lambda;
            }
        },
        pen);
}

// ---------------------------------------------------------------------------
// Proximal operators: argmin_b 1/2 |b - v|^2 + step * F(b)

inline Vector soft_threshold(const Vector& v, double t)
{
    return v.unaryExpr([t](double x) { return x > t ? x - t : (x < -t ? x + t : 0.0); });
}

/// Prox of b -> sum_j thresholds_j b*_j for non-increasing thresholds >= 0.
/// Pool-adjacent-violators on |v| sorted decreasingly minus the thresholds,
/// clipped at zero, then signs and order restored.
inline Vector sorted_l1_prox(const Vector& v, const Vector& thresholds)
{
    const Index p = v.size();
    detail::require(thresholds.size() == p, "sorted l1 prox: dimension mismatch");
    const auto order = detail::order_by_magnitude(v);

    // blocks of the stack: [start, end], running sum and mean
    std::vector<Index> start(static_cast<std::size_t>(p)), end(static_cast<std::size_t>(p));
    std::vector<double> sum(static_cast<std::size_t>(p)), mean(static_cast<std::size_t>(p));
    std::size_t top = 0;
    for (Index i = 0; i < p; ++i) {
        start[top] = i;
        end[top] = i;
        sum[top] = std::abs(v[order[static_cast<std::size_t>(i)]]) - thresholds[i];
        mean[top] = sum[top];
        while (top > 0 && mean[top - 1] <= mean[top]) {
            --top;
            end[top] = i;
            sum[top] += sum[top + 1];
            mean[top] = sum[top] / static_cast<double>(i - start[top] + 1);
        }
        ++top;
    }

    Vector out(p);
    for (std::size_t b = 0; b < top; ++b) {
        const double value = std::max(mean[b], 0.0);
        for (Index i = start[b]; i <= end[b]; ++i) {
            const Index j = order[static_cast<std::size_t>(i)];
            out[j] = v[j] < 0.0 ? -value : value;
        }
    }
    return out;
}

struct ConeProxResult {
    Vector b;
    Vector w;   ///< nonnegative cone coordinates of the minimizing a
    double gap = 0.0;
    bool converged = true;
    int iterations = 0;
};

/// Prox of c * ||.||_A via the variational form
///   min_{w >= 0} phi(w) = 1/2 sum_j v_j^2 c / (a_j + c) + c/2 sum_j a_j,  a = E^T w,
/// then b_j = v_j a_j / (a_j + c). phi is smooth and convex in w; cyclic
/// coordinate descent minimizes it exactly along each w_k (safeguarded Newton
/// on the monotone derivative). The certificate is the Fenchel gap against
/// u = v - b rescaled into the dual ball of radius c.
inline ConeProxResult cone_prox(const PolyhedralCone& cone, const Vector& v, double c, double rel_tol = 1e-16,
                                int max_sweeps = 5000, const Vector* warm = nullptr)
{
    detail::require(v.size() == cone.dimension(), "cone prox: dimension mismatch");
    detail::require(c > 0.0, "cone prox: step must be > 0");
    const Matrix& e = cone.extremal;
    const Index k_count = e.rows();
    const Index p = v.size();
    const Vector v2 = v.array().square();
    const double scale = 1.0 + 0.5 * v2.sum();

    // sparse rows of E
    std::vector<std::vector<std::pair<Index, double>>> rows(static_cast<std::size_t>(k_count));
    for (Index k = 0; k < k_count; ++k)
        for (Index j = 0; j < p; ++j)
            if (e(k, j) > 0.0) rows[static_cast<std::size_t>(k)].emplace_back(j, e(k, j));

    Vector w = (warm && warm->size() == k_count) ? Vector(warm->cwiseMax(0.0)) : Vector(Vector::Zero(k_count));
    Vector a = e.transpose() * w;

    // phi(w) - dual(u) with u = v - b = v c / (a + c):
    //   c/2 sum_j a_j (1 - v_j^2 / (a_j + c)^2),
    // plus the change from rescaling u into the dual ball when needed.
    auto certificate = [&](Vector& b) {
        const Eigen::ArrayXd den = a.array() + c;
        b = v.array() * a.array() / den;
        double gap = 0.5 * c * (a.array() * (1.0 - v2.array() / den.square())).sum();
        const Vector u = v - b;
        const double dn = std::sqrt(std::max(0.0, (e * u.array().square().matrix()).maxCoeff()));
        if (dn > c) {
            const Vector d = (1.0 - c / dn) * u;
            gap += 0.5 * d.dot(d + 2.0 * b);
        }
        return std::max(0.0, gap);
    };

    Vector b;
    ConeProxResult out;
    double gap = certificate(b);
    int sweep = 0;
    for (; sweep < max_sweeps && (sweep == 0 || gap > rel_tol * scale); ++sweep) {
        for (Index k = 0; k < k_count; ++k) {
            const auto& row = rows[static_cast<std::size_t>(k)];
            if (row.empty()) continue;
            const double wk = w[k];
            // derivative of phi along w_k at w_k = omega
            auto slope = [&](double omega, double* curvature) {
                double d = 0.0, h = 0.0;
                for (const auto& [j, ekj] : row) {
                    const double den = a[j] + ekj * (omega - wk) + c;
                    const double q = v2[j] / (den * den);
                    d += ekj * 0.5 * c * (1.0 - q);
                    h += ekj * ekj * c * q / den;
                }
                if (curvature) *curvature = h;
                return d;
            };
            double target = 0.0;
            if (slope(0.0, nullptr) < 0.0) {
                double lo = 0.0, hi = std::max(wk, 1e-300);
                while (slope(hi, nullptr) < 0.0) {
                    lo = hi;
                    hi *= 2.0;
                    if (!std::isfinite(hi)) break;
                }
                double omega = std::clamp(wk, lo, hi);
                for (int nt = 0; nt < 100; ++nt) {
                    double curv = 0.0;
                    const double d = slope(omega, &curv);
                    if (d < 0.0) lo = omega; else hi = omega;
                    double next = curv > 0.0 ? omega - d / curv : 0.5 * (lo + hi);
                    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
                    if (std::abs(next - omega) <= 1e-16 * std::max(1.0, omega) || hi - lo <= 1e-16 * hi) {
                        omega = next;
                        break;
                    }
                    omega = next;
                }
                target = omega;
            }
            if (target != wk) {
                for (const auto& [j, ekj] : row) a[j] += ekj * (target - wk);
                w[k] = target;
            }
        }
        a = e.transpose() * w; // refresh to avoid drift
        gap = certificate(b);
    }
    out.b = b;
    out.w = w;
    out.gap = gap;
    out.converged = gap <= rel_tol * scale;
    out.iterations = sweep;
    return out;
}

inline Vector prox(const Penalty& pen, const Vector& v, double step)
{
    detail::require(step > 0.0, "prox: step must be > 0");
    detail::require_dim(pen, v.size());
    return std::visit(
        [&](const auto& q) -> Vector {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, L1Penalty>)
                return soft_threshold(v, step * q.lambda);
            else if constexpr (std::is_same_v<T, GroupPenalty>) {
                Vector out = v;
                const double t = step * q.lambda;
                for (const auto& g : q.partition.groups()) {
                    double sq = 0.0;
                    for (auto j : g) sq += v[static_cast<Index>(j)] * v[static_cast<Index>(j)];
                    const double norm = std::sqrt(sq);
                    const double shrink = norm > t ? 1.0 - t / norm : 0.0;
                    for (auto j : g) out[static_cast<Index>(j)] *= shrink;
                }
                return out;
            } else if constexpr (std::is_same_v<T, SlopePenalty>)
                return sorted_l1_prox(v, step * q.scale * q.weights.values());
            else {
                const auto r = cone_prox(q.cone, v, step * q.lambda);
                const double scale = 1.0 + 0.5 * v.squaredNorm();
                if (!r.converged && r.gap > kConeFailureTol * scale)
                    throw ConvergenceError("cone prox: inner solve stopped at relative gap " +
                                           detail::sci(r.gap / scale));
                return r.b;
            }
        },
        pen);
}

// ---------------------------------------------------------------------------
// Subgradients and decomposition

/// An element v of the subdifferential of the unit-scale norm N at beta != 0:
/// N_o(v) = 1 and v^T beta = N(beta).
inline Vector unit_subgradient(const Penalty& pen, const Vector& beta)
{
    detail::require_dim(pen, beta.size());
    detail::require(beta.cwiseAbs().maxCoeff() > 0.0, "subgradient: beta must be nonzero");
    return std::visit(
        [&](const auto& q) -> Vector {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, L1Penalty>)
                return beta.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
            else if constexpr (std::is_same_v<T, GroupPenalty>) {
                Vector out = Vector::Zero(beta.size());
                for (const auto& g : q.partition.groups()) {
                    double sq = 0.0;
                    for (auto j : g) sq += beta[static_cast<Index>(j)] * beta[static_cast<Index>(j)];
                    if (sq == 0.0) continue;
                    const double norm = std::sqrt(sq);
                    for (auto j : g) out[static_cast<Index>(j)] = beta[static_cast<Index>(j)] / norm;
                }
                return out;
            } else if constexpr (std::is_same_v<T, SlopePenalty>) {
                const auto order = detail::order_by_magnitude(beta);
                const Vector& mu = q.weights.values();
                Vector out(beta.size());
                for (std::size_t r = 0; r < order.size(); ++r) {
                    const Index j = order[r];
                    out[j] = beta[j] < 0.0 ? -mu[static_cast<Index>(r)] : mu[static_cast<Index>(r)];
                }
                return out;
            } else {
                const auto r = cone_norm(q.cone, beta);
                Vector out = Vector::Zero(beta.size());
                for (Index j = 0; j < beta.size(); ++j)
                    if (beta[j] != 0.0) out[j] = beta[j] / (r.a[j] * r.value);
                return out;
            }
        },
        pen);
}

inline Vector restrict_to(const Vector& v, const IndexSet& s)
{
    Vector out = Vector::Zero(v.size());
    for (auto j : s) out[static_cast<Index>(j)] = v[static_cast<Index>(j)];
    return out;
}

inline IndexSet complement(const IndexSet& s, std::size_t p)
{
    std::vector<char> in(p, 0);
    for (auto j : s) in.at(j) = 1;
    IndexSet out;
    for (std::size_t j = 0; j < p; ++j)
        if (!in[j]) out.push_back(j);
    return out;
}

struct DecompositionReport {
    double lhs = 0.0; ///< ||beta||_A
    double rhs = 0.0; ///< ||beta_S||_A + ||beta_{S^c}||_A
    double residual = 0.0;
    bool pass = false;
};

/// ||beta||_A = ||beta_S||_A + ||beta_{S^c}||_A for S admissible.
inline DecompositionReport decomposition_check(const PolyhedralCone& cone, const IndexSet& s, const Vector& beta)
{
    cone.validate();
    detail::require(beta.size() == cone.dimension(), "decomposition: dimension mismatch");
    if (!is_admissible(cone, s)) throw ValidationError("decomposition: S is not declared admissible for the cone");
    const Penalty pen = ConePenalty{cone, 1.0};
    DecompositionReport r;
    r.lhs = eval_penalty(pen, beta);
    r.rhs = eval_penalty(pen, restrict_to(beta, s)) +
            eval_penalty(pen, restrict_to(beta, complement(s, static_cast<std::size_t>(beta.size()))));
    r.residual = std::abs(r.lhs - r.rhs);
    r.pass = r.residual <= 1e-6 * (1.0 + r.lhs);
    return r;
}

// ---------------------------------------------------------------------------
// JSON: {kind, lambda | A, partition, mu, extremal_points}

inline nlohmann::json to_json(const Penalty& pen)
{
    nlohmann::json j;
    j["kind"] = kind_name(kind_of(pen));
    std::visit(
        [&j](const auto& q) {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, L1Penalty>)
                j["lambda"] = q.lambda;
            else if constexpr (std::is_same_v<T, GroupPenalty>) {
                j["lambda"] = q.lambda;
                j["partition"] = q.partition.groups();
            } else if constexpr (std::is_same_v<T, SlopePenalty>) {
                j["A"] = q.scale;
                j["mu"] = std::vector<double>(q.weights.values().data(),
                                              q.weights.values().data() + q.weights.size());
            } else {
                j["lambda"] = q.lambda;
                nlohmann::json pts = nlohmann::json::array();
                for (Index k = 0; k < q.cone.extremal.rows(); ++k) {
                    nlohmann::json row = nlohmann::json::array();
                    for (Index c = 0; c < q.cone.extremal.cols(); ++c) row.push_back(q.cone.extremal(k, c));
                    pts.push_back(std::move(row));
                }
                j["extremal_points"] = std::move(pts);
                if (!q.cone.admissible.empty()) j["admissible_sets"] = q.cone.admissible;
                if (q.cone.blocks) j["partition"] = q.cone.blocks->groups();
            }
        },
        pen);
    return j;
}

inline Penalty penalty_from_json(const nlohmann::json& j)
{
    auto need = [&](const char* name) -> const nlohmann::json& {
        if (!j.contains(name)) throw ValidationError(std::string("penalty: missing field '") + name + "'");
        return j.at(name);
    };
    const auto kind = need("kind").get<std::string>();
    if (kind == "l1") return L1Penalty{need("lambda").get<double>()};
    if (kind == "group")
        return GroupPenalty{GroupPartition(need("partition").get<std::vector<IndexSet>>()), need("lambda").get<double>()};
    if (kind == "slope") {
        const auto mu = need("mu").get<std::vector<double>>();
        return SlopePenalty{need("A").get<double>(),
                            SlopeWeights(Eigen::Map<const Vector>(mu.data(), static_cast<Index>(mu.size())))};
    }
    if (kind == "cone") {
        const auto pts = need("extremal_points").get<std::vector<std::vector<double>>>();
        detail::require(!pts.empty(), "penalty: extremal_points must be nonempty");
        PolyhedralCone cone;
        cone.extremal.resize(static_cast<Index>(pts.size()), static_cast<Index>(pts.front().size()));
        for (std::size_t k = 0; k < pts.size(); ++k) {
            detail::require(pts[k].size() == pts.front().size(), "penalty: extremal points must share a dimension");
            for (std::size_t c = 0; c < pts[k].size(); ++c)
                cone.extremal(static_cast<Index>(k), static_cast<Index>(c)) = pts[k][c];
        }
        if (j.contains("admissible_sets")) cone.admissible = j.at("admissible_sets").get<std::vector<IndexSet>>();
        if (j.contains("partition")) cone.blocks = GroupPartition(j.at("partition").get<std::vector<IndexSet>>());
        cone.validate();
        return ConePenalty{std::move(cone), need("lambda").get<double>()};
    }
    throw ValidationError("penalty: unknown kind '" + kind + "'");
}

} // namespace cpls
