#pragma once

#include "model.hpp"
#include "normal.hpp"
#include "parallel.hpp"
#include "penalties.hpp"
#include "rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <variant>

namespace cpls {

// ---------------------------------------------------------------------------
// Restriction cones

/// |D_{S^c}|_1 <= c0 |D_S|_1, denominator |D|_2^2.
struct ReSpec {
    IndexSet support;
    double c0 = 3.0;
};

/// sum_{k not in S} |D_{G_k}|_2 <= c0 sum_{k in S} |D_{G_k}|_2, S a set of group indices.
struct GroupReSpec {
    GroupPartition partition;
    IndexSet groups;
    double c0 = 3.0;
};

/// sum_{j > s} mu_j d*_j <= c0 (sum_{j <= s} mu_j^2)^{1/2} |D|_2.
struct WreSpec {
    Index s = 1;
    double c0 = 3.0;
    SlopeWeights weights;
};

/// ||D_{S^c}||_A <= c0 ||D_S||_A, denominator ||D_S||_A^2.
struct ConeQSpec {
    PolyhedralCone cone;
    IndexSet support;
    double c0 = 3.0;
};

using ConeSpec = std::variant<ReSpec, GroupReSpec, WreSpec, ConeQSpec>;

inline const char* spec_name(const ConeSpec& spec)
{
    static constexpr const char* names[] = {"RE", "GroupRE", "WRE", "ConeQ"};
    return names[spec.index()];
}

namespace detail {

inline void require_index_set(const IndexSet& s, std::size_t bound, const char* what)
{
    require(!s.empty(), std::string(what) + ": S must be nonempty");
    for (auto j : s) require(j < bound, std::string(what) + ": index out of range");
}

inline double spec_c0(const ConeSpec& spec)
{
    return std::visit([](const auto& q) { return q.c0; }, spec);
}

} // namespace detail

inline void validate(const ConeSpec& spec, Index p)
{
    const auto up = static_cast<std::size_t>(p);
    detail::require(detail::spec_c0(spec) > 0.0 && std::isfinite(detail::spec_c0(spec)), "cone spec: c0 must be > 0");
    std::visit(
        [&](const auto& q) {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, ReSpec>)
                detail::require_index_set(q.support, up, "RE spec");
            else if constexpr (std::is_same_v<T, GroupReSpec>) {
                detail::require(q.partition.dimension() == up, "GroupRE spec: partition size must equal p");
                detail::require_index_set(q.groups, q.partition.group_count(), "GroupRE spec");
            } else if constexpr (std::is_same_v<T, WreSpec>) {
                detail::require(q.s >= 1 && q.s <= p, "WRE spec: s must lie in 1..p");
                detail::require(q.weights.size() == p, "WRE spec: weights must have length p");
            } else {
                q.cone.validate();
                detail::require(q.cone.dimension() == p, "ConeQ spec: cone dimension must equal p");
                detail::require_index_set(q.support, up, "ConeQ spec");
            }
        },
        spec);
}

namespace detail {

inline std::vector<char> mask_of(const IndexSet& s, Index p)
{
    std::vector<char> m(static_cast<std::size_t>(p), 0);
    for (auto j : s) m[j] = 1;
    return m;
}

/// Indicator of the "head" coordinates; the tail is what the retraction shrinks.
inline std::vector<char> head_mask(const ConeSpec& spec, const Vector& d)
{
    const Index p = d.size();
    return std::visit(
        [&](const auto& q) -> std::vector<char> {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, ReSpec> || std::is_same_v<T, ConeQSpec>)
                return mask_of(q.support, p);
            else if constexpr (std::is_same_v<T, GroupReSpec>) {
                std::vector<char> m(static_cast<std::size_t>(p), 0);
                for (auto k : q.groups)
                    for (auto j : q.partition.group(k)) m[j] = 1;
                return m;
            } else {
                std::vector<char> m(static_cast<std::size_t>(p), 0);
                const auto order = order_by_magnitude(d);
                for (Index r = 0; r < q.s; ++r) m[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = 1;
                return m;
            }
        },
        spec);
}

inline Vector masked(const Vector& d, const std::vector<char>& m, bool keep)
{
    Vector out = d;
    for (Index j = 0; j < d.size(); ++j)
        if ((m[static_cast<std::size_t>(j)] != 0) != keep) out[j] = 0.0;
    return out;
}

/// Block cones have the closed form sqrt(T) sum_k |d_{G_k}|_2.
inline double cone_value(const PolyhedralCone& cone, const Vector& d)
{
    if (cone.blocks) return std::sqrt(static_cast<double>(cone.blocks->group_size())) * group_sum(*cone.blocks, d);
    return cone_norm(cone, d, 1e-14).value;
}

} // namespace detail

/// Left side minus right side of the cone constraint; <= 0 inside the cone.
inline double cone_residual(const ConeSpec& spec, const Vector& d)
{
    return std::visit(
        [&](const auto& q) -> double {
            using T = std::decay_t<decltype(q)>;
            const auto head = detail::head_mask(spec, d);
            if constexpr (std::is_same_v<T, ReSpec>)
                return detail::masked(d, head, false).template lpNorm<1>() -
                       q.c0 * detail::masked(d, head, true).template lpNorm<1>();
            else if constexpr (std::is_same_v<T, GroupReSpec>) {
                double in = 0.0, out = 0.0;
                std::vector<char> chosen(q.partition.group_count(), 0);
                for (auto k : q.groups) chosen[k] = 1;
                for (std::size_t k = 0; k < q.partition.group_count(); ++k) {
                    double sq = 0.0;
                    for (auto j : q.partition.group(k)) sq += d[static_cast<Index>(j)] * d[static_cast<Index>(j)];
                    (chosen[k] ? in : out) += std::sqrt(sq);
                }
                return out - q.c0 * in;
            } else if constexpr (std::is_same_v<T, WreSpec>) {
                const Vector sorted = detail::sorted_magnitudes(d);
                const Vector& mu = q.weights.values();
                const double tail = mu.tail(mu.size() - q.s).dot(sorted.tail(sorted.size() - q.s));
                return tail - q.c0 * mu.head(q.s).norm() * d.norm();
            } else
                return detail::cone_value(q.cone, detail::masked(d, head, false)) -
                       q.c0 * detail::cone_value(q.cone, detail::masked(d, head, true));
        },
        spec);
}

/// Denominator of the ratio: |D|_2^2, or ||D_S||_A^2 for ConeQ.
inline double cone_denominator(const ConeSpec& spec, const Vector& d)
{
    if (const auto* q = std::get_if<ConeQSpec>(&spec)) {
        const double v = detail::cone_value(q->cone, detail::masked(d, detail::head_mask(spec, d), true));
        return v * v;
    }
    return d.squaredNorm();
}

struct ReEstimate {
    double value = 0.0; ///< constant (square root of the minimal ratio)
    Vector witness;     ///< unit vector in the cone achieving value^2
    int starts = 0;
    bool exact = false; ///< analytically known; otherwise an upper bound from multistart

    const char* status() const noexcept { return exact ? "exact" : "multistart-estimate"; }
};

struct ReOptions {
    int starts = 256;
    int max_iters = 5000;
    std::uint64_t seed = 0;
    unsigned threads = 0;
};

namespace detail {

/// Pulls d into the cone by shrinking its tail (bisection on the factor),
/// then normalizes. Returns nullopt when the head part vanishes.
inline std::optional<Vector> retract(const ConeSpec& spec, const Vector& d)
{
    const double norm = d.norm();
    if (!(norm > 0.0) || !d.allFinite()) return std::nullopt;
    Vector x = d / norm;
    if (cone_residual(spec, x) <= 0.0) return x;
    const auto head = head_mask(spec, x);
    const Vector h = masked(x, head, true);
    const Vector t = masked(x, head, false);
    if (h.squaredNorm() == 0.0) return std::nullopt;
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (cone_residual(spec, h + mid * t) <= 0.0) lo = mid; else hi = mid;
    }
    Vector y = h + lo * t;
    return Vector(y / y.norm());
}

inline bool is_identity_gram(const Matrix& gram)
{
    return (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() <= 1e-12;
}

} // namespace detail

/// Minimal ||X D||^2 / den(D) over the cone, by multistart projected gradient
/// on the unit sphere. The minimum over starts is an upper bound on the true
/// constant; status is "exact" only when (1/n) X^T X = I and the denominator
/// is |D|_2^2, where the ratio is identically 1.
inline ReEstimate re_type_constant(const DesignMatrix& x, const ConeSpec& spec, const ReOptions& opt = {})
{
    validate(spec, x.p());
    detail::require(opt.starts >= 1, "re_type_constant: budget must be >= 1");
    const Index p = x.p();
    const Matrix gram = x.matrix().transpose() * x.matrix() / static_cast<double>(x.n());
    const bool qa = std::holds_alternative<ConeQSpec>(spec);

    if (!qa && detail::is_identity_gram(gram)) {
        ReEstimate out;
        out.value = 1.0;
        out.exact = true;
        out.witness = Vector::Zero(p);
        const auto head = detail::head_mask(spec, Vector::LinSpaced(p, static_cast<double>(p), 1.0));
        for (Index j = 0; j < p; ++j)
            if (head[static_cast<std::size_t>(j)]) {
                out.witness[j] = 1.0;
                break;
            }
        return out;
    }

    auto ratio = [&](const Vector& d) {
        const double den = cone_denominator(spec, d);
        return den > 0.0 ? d.dot(gram * d) / den : std::numeric_limits<double>::infinity();
    };
    auto gradient = [&](const Vector& d, double r) -> Vector {
        const Vector gd = gram * d;
        if (!qa) return 2.0 * (gd - r * d) / d.squaredNorm();
        const auto& q = std::get<ConeQSpec>(spec);
        const Vector ds = detail::masked(d, detail::head_mask(spec, d), true);
        const auto cn = cone_norm(q.cone, ds, 1e-14);
        Vector sub = Vector::Zero(p);
        for (Index j = 0; j < p; ++j)
            if (ds[j] != 0.0) sub[j] = ds[j] / cn.a[j]; // d ||D_S||_A^2 / 2
        return 2.0 * (gd - r * sub) / (cn.value * cn.value);
    };

    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
    const double lmax = std::max(eig.eigenvalues().maxCoeff(), 1e-12);

    // deterministic starts first: the bottom eigenvector and the head coordinates
    std::vector<Vector> seeds;
    seeds.push_back(eig.eigenvectors().col(0));
    {
        const auto head = detail::head_mask(spec, Vector::LinSpaced(p, static_cast<double>(p), 1.0));
        for (Index j = 0; j < p && static_cast<int>(seeds.size()) < opt.starts; ++j)
            if (head[static_cast<std::size_t>(j)] && !std::holds_alternative<WreSpec>(spec))
                seeds.push_back(Vector::Unit(p, j));
    }

    const auto count = static_cast<std::size_t>(opt.starts);
    std::vector<double> values(count, std::numeric_limits<double>::infinity());
    std::vector<Vector> witnesses(count);
    parallel_for(
        count,
        [&](std::size_t i) {
            Vector start;
            if (i < seeds.size()) start = seeds[i];
            else {
                Engine eng = make_engine(opt.seed, i);
                start = standard_normal(p, eng);
            }
            auto cur = detail::retract(spec, start);
            if (!cur) {
                Engine eng = make_engine(opt.seed ^ 0x5a5a5a5aull, i);
                cur = detail::retract(spec, standard_normal(p, eng));
                if (!cur) return;
            }
            Vector d = *cur;
            double r = ratio(d);
            double eta = 1.0 / lmax;
            for (int it = 0; it < opt.max_iters; ++it) {
                const Vector g = gradient(d, r);
                bool moved = false;
                while (eta > 1e-18) {
                    const auto cand = detail::retract(spec, d - eta * g);
                    if (cand) {
                        const double rc = ratio(*cand);
                        if (rc < r) {
                            const double gain = r - rc;
                            d = *cand;
                            r = rc;
                            moved = gain > 1e-15 * std::max(r, 1e-300);
                            eta *= 2.0;
                            break;
                        }
                    }
                    eta *= 0.5;
                }
                if (!moved || r <= 1e-14 * lmax) break;
            }
            values[i] = r;
            witnesses[i] = d;
        },
        opt.threads);

    ReEstimate out;
    out.starts = opt.starts;
    std::size_t best = count;
    for (std::size_t i = 0; i < count; ++i)
        if (std::isfinite(values[i]) && (best == count || values[i] < values[best])) best = i;
    detail::require(best < count, "re_type_constant: no start reached the cone");
    out.value = std::sqrt(std::max(0.0, values[best]));
    out.witness = witnesses[best];
    return out;
}

// ---------------------------------------------------------------------------
// Tuning

/// max_k sigma_max(X_{G_k}) / sqrt(n)
inline double psi_star(const DesignMatrix& x, const GroupPartition& partition)
{
    detail::require(partition.dimension() == static_cast<std::size_t>(x.p()), "psi*: partition size must equal p");
    double best = 0.0;
    for (const auto& g : partition.groups()) {
        Matrix block(x.n(), static_cast<Index>(g.size()));
        for (std::size_t c = 0; c < g.size(); ++c) block.col(static_cast<Index>(c)) = x.matrix().col(static_cast<Index>(g[c]));
        Eigen::JacobiSVD<Matrix> svd(block);
        best = std::max(best, svd.singularValues()[0]);
    }
    return best / std::sqrt(static_cast<double>(x.n()));
}

/// Smallest multiplier covered by the oracle inequalities:
///   l1     2 sigma sqrt(2 log p / n)
///   group  (2 sigma / sqrt n)(sqrt T + psi* sqrt(2 log 2M))
///   cone   (2 sigma / sqrt n)(1 + sqrt(2 log 2|E|))
///   slope  A = 8
inline double recommended_tuning(const Penalty& pen, const DesignMatrix& x, double sigma)
{
    detail::require(sigma > 0.0, "recommended_tuning: sigma must be > 0");
    const double n = static_cast<double>(x.n());
    const double p = static_cast<double>(x.p());
    return std::visit(
        [&](const auto& q) -> double {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, L1Penalty>) {
                detail::require(x.p() >= 2, "recommended_tuning: the l1 threshold needs p >= 2");
                return 2.0 * sigma * std::sqrt(2.0 * std::log(p) / n);
            } else if constexpr (std::is_same_v<T, GroupPenalty>) {
                const double t = static_cast<double>(q.partition.group_size());
                const double m = static_cast<double>(q.partition.group_count());
                return 2.0 * sigma / std::sqrt(n) * (std::sqrt(t) + psi_star(x, q.partition) * std::sqrt(2.0 * std::log(2.0 * m)));
            } else if constexpr (std::is_same_v<T, SlopePenalty>) {
                return 8.0;
            } else {
                const double e = static_cast<double>(q.cone.point_count());
                return 2.0 * sigma / std::sqrt(n) * (1.0 + std::sqrt(2.0 * std::log(2.0 * e)));
            }
        },
        pen);
}

inline Penalty tuned(const Penalty& pen, const DesignMatrix& x, double sigma)
{
    return with_multiplier(pen, recommended_tuning(pen, x, sigma));
}

// ---------------------------------------------------------------------------
// Oracle bounds

struct SparseApproximation {
    Vector beta;
    double error = 0.0; ///< ||X beta - f||
};

/// Least-squares projection of f onto the columns in S (minimum-norm
/// coefficients under rank deficiency).
inline SparseApproximation best_sparse_approximation(const Vector& f, const DesignMatrix& x, const IndexSet& support)
{
    detail::require(f.size() == x.n(), "best_sparse_approximation: f must have length n");
    detail::require_index_set(support, static_cast<std::size_t>(x.p()), "best_sparse_approximation");
    Matrix xs(x.n(), static_cast<Index>(support.size()));
    for (std::size_t c = 0; c < support.size(); ++c) xs.col(static_cast<Index>(c)) = x.matrix().col(static_cast<Index>(support[c]));
    const Eigen::CompleteOrthogonalDecomposition<Matrix> cod(xs);
    const Vector coef = cod.solve(f);
    SparseApproximation out;
    out.beta = Vector::Zero(x.p());
    for (std::size_t c = 0; c < support.size(); ++c) out.beta[static_cast<Index>(support[c])] = coef[static_cast<Index>(c)];
    out.error = scaled_norm(xs * coef - f);
    return out;
}

struct OracleBound {
    double approximation = 0.0; ///< min over supp(beta) = S of ||X beta - f||
    double remainder = 0.0;     ///< penalty-specific term of the root bound
    double squared_bound = 0.0; ///< approximation^2 + remainder^2 (on the event)
    double root_bound = 0.0;    ///< + sigma Phi^{-1}(1 - delta) / sqrt n when delta is given
    double expectation_bound = 0.0;
    std::optional<double> squared_high_probability; ///< 3 approx^2 + (27/4)(...) + 6 sigma^2 log(1/delta) / n
};

/// `support` holds coordinates, except for the group penalty where it holds
/// group indices. `constant` is kappa, kappa_G, q_A or the WRE constant at
/// c0 = 3; a zero constant gives +inf bounds.
inline OracleBound oracle_bound(const Penalty& pen, const Problem& problem, const IndexSet& support, double constant,
                                std::optional<double> delta = std::nullopt)
{
    problem.validate();
    detail::require(constant >= 0.0, "oracle_bound: constant must be >= 0");
    if (delta) detail::require(*delta > 0.0 && *delta < 1.0, "oracle_bound: delta must lie in (0, 1)");
    const double n = static_cast<double>(problem.design.n());
    const double p = static_cast<double>(problem.design.p());
    const double sigma = problem.sigma;
    const double inf = std::numeric_limits<double>::infinity();

    IndexSet columns = support;
    double numerator = 0.0; // remainder = numerator / constant
    std::visit(
        [&](const auto& q) {
            using T = std::decay_t<decltype(q)>;
            const double s = static_cast<double>(support.size());
            if constexpr (std::is_same_v<T, L1Penalty>)
                numerator = 1.5 * q.lambda * std::sqrt(s);
            else if constexpr (std::is_same_v<T, GroupPenalty>) {
                detail::require_index_set(support, q.partition.group_count(), "oracle_bound");
                columns.clear();
                for (auto k : support)
                    for (auto j : q.partition.group(k)) columns.push_back(j);
                numerator = 1.5 * q.lambda * std::sqrt(s);
            } else if constexpr (std::is_same_v<T, SlopePenalty>)
                numerator = 1.5 * sigma * q.scale * std::sqrt(s * std::log(2.0 * std::numbers::e * p / s) / n);
            else
                numerator = 1.5 * q.lambda;
        },
        pen);

    OracleBound out;
    out.approximation = best_sparse_approximation(problem.mean, problem.design, columns).error;
    out.remainder = constant > 0.0 ? numerator / constant : inf;
    out.squared_bound = out.approximation * out.approximation + out.remainder * out.remainder;
    out.root_bound = out.approximation + out.remainder;
    if (delta) out.root_bound += sigma * std_normal_quantile(1.0 - *delta) / std::sqrt(n);
    out.expectation_bound = out.approximation + out.remainder + sigma / std::sqrt(2.0 * std::numbers::pi * n);
    if (delta)
        out.squared_high_probability = 3.0 * out.approximation * out.approximation + 3.0 * out.remainder * out.remainder +
                                6.0 * sigma * sigma * std::log(1.0 / *delta) / n;
    return out;
}

inline std::string format_index_set(const IndexSet& s)
{
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(s[i]);
    }
    return out;
}

inline IndexSet spec_support(const ConeSpec& spec)
{
    return std::visit(
        [](const auto& q) -> IndexSet {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, ReSpec> || std::is_same_v<T, ConeQSpec>)
                return q.support;
            else if constexpr (std::is_same_v<T, GroupReSpec>)
                return q.groups;
            else {
                IndexSet s(static_cast<std::size_t>(q.s));
                std::iota(s.begin(), s.end(), std::size_t{0});
                return s;
            }
        },
        spec);
}

} // namespace cpls
