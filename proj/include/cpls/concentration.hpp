#pragma once

#include "constants.hpp"
#include "csv.hpp"
#include "model.hpp"
#include "normal.hpp"
#include "parallel.hpp"
#include "penalties.hpp"
#include "rng.hpp"
#include "solver.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace cpls {

struct MonteCarloConfig {
    std::size_t replications = 10000; ///< N
    std::uint64_t base_seed = 0;
    std::vector<double> t_grid{0.5, 1.0, 2.0, 3.0};
    std::vector<double> delta_grid{0.5, 0.1, 0.01};
    double slack_sigmas = 3.0;
    unsigned threads = 0;

    void validate() const
    {
        detail::require(replications >= 100, "mc: replications must be >= 100");
        for (double t : t_grid) detail::require(std::isfinite(t) && t >= 0.0, "mc: t_grid entries must be >= 0");
        for (double d : delta_grid) detail::require(d > 0.0 && d < 1.0, "mc: delta_grid entries must lie in (0, 1)");
        detail::require(std::isfinite(slack_sigmas) && slack_sigmas >= 0.0, "mc: slack_sigmas must be >= 0");
    }
};

/// slack_sigmas binomial standard errors at success probability q.
inline double binomial_slack(double q, std::size_t count, double sigmas)
{
    q = std::clamp(q, 0.0, 1.0);
    return sigmas * std::sqrt(q * (1.0 - q) / static_cast<double>(count));
}

/// Above this non-converged fraction a simulation fails outright.
inline constexpr double kMaxNonConverged = 0.01;

// ---------------------------------------------------------------------------
// Replications

struct Replicate {
    std::size_t rep = 0; ///< 1-based
    std::uint64_t seed = 0;
    double error = 0.0; ///< ||X bh - f||
    bool converged = false;
    double gap = 0.0;
};

struct Simulation {
    std::vector<Replicate> reps;
    std::size_t nonconverged = 0;

    double nonconverged_fraction() const
    {
        return reps.empty() ? 0.0 : static_cast<double>(nonconverged) / static_cast<double>(reps.size());
    }
    bool convergence_ok() const { return nonconverged_fraction() <= kMaxNonConverged; }

    /// Errors of converged replications in replication order.
    std::vector<double> errors() const
    {
        std::vector<double> e;
        e.reserve(reps.size());
        for (const auto& r : reps)
            if (r.converged) e.push_back(r.error);
        return e;
    }
};

/// Replication i (1..N) observes y = f + sigma z with z seeded by
/// replication_seed(base_seed, i), solves, and records the scaled error.
/// Solver failures are recorded as non-converged and the run continues.
inline Simulation simulate_prediction_errors(const Problem& problem, const Penalty& pen, const SolverConfig& cfg,
                                             const MonteCarloConfig& mc)
{
    problem.validate();
    mc.validate();
    const PenalizedLeastSquares solver(problem.design, pen, cfg);
    Simulation out;
    out.reps.resize(mc.replications);
    parallel_for(
        mc.replications,
        [&](std::size_t i) {
            Replicate& r = out.reps[i];
            r.rep = i + 1;
            r.seed = replication_seed(mc.base_seed, r.rep);
            try {
                const Observation obs = sample_observation(problem, r.seed);
                const SolverResult res = solver.solve(obs.y);
                r.error = scaled_norm(res.fitted - problem.mean);
                r.converged = res.converged && std::isfinite(r.error);
                r.gap = res.gap;
            } catch (const std::exception&) {
                r.error = std::numeric_limits<double>::quiet_NaN();
                r.converged = false;
                r.gap = std::numeric_limits<double>::quiet_NaN();
            }
        },
        mc.threads);
    for (const auto& r : out.reps) out.nonconverged += r.converged ? 0 : 1;
    return out;
}

inline CsvTable errors_table(const Simulation& sim)
{
    CsvTable t({"rep", "seed", "error", "converged", "gap"});
    for (const auto& r : sim.reps) t.add(CsvTable::Row() << r.rep << r.seed << r.error << r.converged << r.gap);
    return t;
}

/// Mean of the order statistics N/2 and N/2 + 1 for even N.
inline double sample_median(std::vector<double> v)
{
    detail::require(!v.empty(), "median: empty sample");
    const std::size_t h = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
    const double upper = v[h];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h));
    return 0.5 * (lower + upper);
}

inline double sample_mean(const std::vector<double>& v)
{
    detail::require(!v.empty(), "mean: empty sample");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v)
{
    if (v.size() < 2) return 0.0;
    const double m = sample_mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Tails around the median and the mean

enum class TailSide { median_upper, mean_upper, mean_lower };

inline const char* side_name(TailSide s)
{
    switch (s) {
    case TailSide::median_upper: return "median_upper";
    case TailSide::mean_upper: return "mean_upper";
    case TailSide::mean_lower: return "mean_lower";
    }
    return "?";
}

struct TailRow {
    TailSide side = TailSide::median_upper;
    double t = 0.0;
    double threshold = 0.0; ///< center +- sigma t / sqrt n
    double empirical = 0.0; ///< exceedance frequency
    double bound = 0.0;     ///< 1 - Phi(t) for the median, exp(-t^2/2) for the mean
    double slack = 0.0;
    bool pass = false;
};

struct ConcentrationReport {
    std::size_t samples = 0;
    double median_hat = 0.0;
    double mean_hat = 0.0;
    std::vector<TailRow> rows; ///< median rows first, then mean rows, each in t_grid order
    bool pass = true;

    std::vector<TailRow> rows_for(TailSide side) const
    {
        std::vector<TailRow> out;
        for (const auto& r : rows)
            if (r.side == side) out.push_back(r);
        return out;
    }
};

/// For each t: P(err > med + sigma t / sqrt n) <= 1 - Phi(t), and around the
/// mean P(err > mean + sigma t / sqrt n), P(err < mean - sigma t / sqrt n)
/// <= exp(-t^2/2); each compared at slack_sigmas binomial standard errors.
inline ConcentrationReport concentration_check(const std::vector<double>& errors, double sigma, Index n,
                                               const MonteCarloConfig& mc)
{
    mc.validate();
    detail::require(!errors.empty(), "concentration: no samples");
    detail::require(sigma > 0.0 && n >= 1, "concentration: sigma > 0 and n >= 1 required");
    for (double e : errors) detail::require(std::isfinite(e), "concentration: samples must be finite");
    ConcentrationReport out;
    out.samples = errors.size();
    out.median_hat = sample_median(errors);
    out.mean_hat = sample_mean(errors);
    const double scale = sigma / std::sqrt(static_cast<double>(n));
    const double count = static_cast<double>(errors.size());

    auto frequency = [&](auto pred) {
        std::size_t k = 0;
        for (double e : errors) k += pred(e) ? 1 : 0;
        return static_cast<double>(k) / count;
    };
    auto push = [&](TailSide side, double t, double threshold, double empirical, double bound) {
        TailRow r{side, t, threshold, empirical, bound, binomial_slack(bound, errors.size(), mc.slack_sigmas), false};
        r.pass = r.empirical <= r.bound + r.slack;
        out.pass = out.pass && r.pass;
        out.rows.push_back(r);
    };
    for (double t : mc.t_grid) {
        const double th = out.median_hat + scale * t;
        push(TailSide::median_upper, t, th, frequency([&](double e) { return e > th; }), std_normal_sf(t));
    }
    for (double t : mc.t_grid) {
        const double th = out.mean_hat + scale * t;
        push(TailSide::mean_upper, t, th, frequency([&](double e) { return e > th; }), std::exp(-0.5 * t * t));
    }
    for (double t : mc.t_grid) {
        const double th = out.mean_hat - scale * t;
        push(TailSide::mean_lower, t, th, frequency([&](double e) { return e < th; }), std::exp(-0.5 * t * t));
    }
    return out;
}

inline CsvTable tails_table(const ConcentrationReport& r)
{
    CsvTable t({"t", "empirical", "bound", "slack", "pass"});
    for (const auto& row : r.rows_for(TailSide::median_upper))
        t.add(CsvTable::Row() << row.t << row.empirical << row.bound << row.slack << row.pass);
    return t;
}

inline CsvTable mean_tails_table(const ConcentrationReport& r)
{
    CsvTable t({"side", "t", "empirical", "bound", "slack", "pass"});
    for (const auto& row : r.rows)
        if (row.side != TailSide::median_upper)
            t.add(CsvTable::Row() << side_name(row.side) << row.t << row.empirical << row.bound << row.slack << row.pass);
    return t;
}

// ---------------------------------------------------------------------------
// Oracle coverage

struct OracleInputs {
    IndexSet support;       ///< coordinates, or group indices for the group penalty
    double constant = 1.0;  ///< kappa, kappa_G, q_A or the WRE constant at c0 = 3
    bool exact = true;      ///< false when the constant is a multistart estimate
};

struct CoverageRow {
    double delta = 0.0;
    double bound = 0.0; ///< root bound at level delta
    std::size_t violations = 0;
    double fraction = 0.0;
    double slack = 0.0;
    bool pass = false;
};

struct ExpectationRow {
    double mean = 0.0;
    double std = 0.0;
    double bound = 0.0;
    double slack = 0.0; ///< slack_sigmas * std / sqrt N
    bool pass = false;
};

struct CoverageReport {
    std::vector<CoverageRow> rows; ///< delta_grid order
    ExpectationRow expectation;
    bool certifying = true; ///< false for estimate-based constants
    bool pass = true;
};

/// Violation frequency of the root oracle bound at each delta, against
/// delta + slack, and the sample mean against the expectation bound.
inline CoverageReport oracle_coverage_check(const Problem& problem, const Penalty& pen, const OracleInputs& in,
                                            const std::vector<double>& errors, const MonteCarloConfig& mc)
{
    mc.validate();
    detail::require(!errors.empty(), "coverage: no samples");
    CoverageReport out;
    out.certifying = in.exact;
    const std::size_t count = errors.size();
    for (double delta : mc.delta_grid) {
        const OracleBound b = oracle_bound(pen, problem, in.support, in.constant, delta);
        CoverageRow r;
        r.delta = delta;
        r.bound = b.root_bound;
        for (double e : errors) r.violations += e > r.bound ? 1 : 0;
        r.fraction = static_cast<double>(r.violations) / static_cast<double>(count);
        r.slack = binomial_slack(delta, count, mc.slack_sigmas);
        r.pass = r.fraction <= delta + r.slack;
        out.pass = out.pass && r.pass;
        out.rows.push_back(r);
    }
    const OracleBound b = oracle_bound(pen, problem, in.support, in.constant);
    auto& ex = out.expectation;
    ex.mean = sample_mean(errors);
    ex.std = sample_std(errors);
    ex.bound = b.expectation_bound;
    ex.slack = mc.slack_sigmas * ex.std / std::sqrt(static_cast<double>(count));
    ex.pass = ex.mean <= ex.bound + ex.slack;
    out.pass = out.pass && ex.pass;
    return out;
}

inline CsvTable coverage_table(const CoverageReport& r)
{
    CsvTable t({"delta", "bound", "violations", "pass"});
    for (const auto& row : r.rows) t.add(CsvTable::Row() << row.delta << row.bound << row.violations << row.pass);
    return t;
}

// ---------------------------------------------------------------------------
// Noise events

struct EventRow {
    std::string event;
    double frequency = 0.0;
    double reference = 0.5; ///< probability the event is claimed to have at least
    double slack = 0.0;
    bool asserted = true;   ///< stress rows are reported, not asserted
    bool pass = false;
};

struct EventReport {
    std::vector<EventRow> rows;
    bool pass = true;
};

/// Threshold of the sorted-statistic event: 4 sigma sqrt(log(2p/j)), j = 1..p.
inline Vector omega_star_thresholds(Index p, double sigma)
{
    Vector t(p);
    for (Index j = 1; j <= p; ++j)
        t[j - 1] = 4.0 * sigma * std::sqrt(std::log(2.0 * static_cast<double>(p) / static_cast<double>(j)));
    return t;
}

/// g* <= threshold coordinatewise, g* the non-increasing rearrangement of |g|.
inline bool omega_star_holds(const Vector& g, const Vector& thresholds)
{
    const Vector s = detail::sorted_magnitudes(g);
    return (s.array() <= thresholds.array()).all();
}

/// Frequency of the noise event that drives each oracle inequality, over N
/// draws xi = sigma z (z seeded like the replications):
///   l1     |X^T xi|_inf / n <= lambda / 2
///   group  max_k |X_{G_k}^T xi|_2 / n <= lambda / 2
///   cone   ||X^T xi / n||_{A,dual} <= lambda / 2
///   slope  g* <= 4 sigma sqrt(log(2p/j)) with g = X^T xi / sqrt n,
///          plus the fully correlated stress case g_j = sigma eta for all j.
/// Pass iff each asserted frequency is >= 1/2 - slack.
inline EventReport event_probability_check(const Problem& problem, const Penalty& pen, const MonteCarloConfig& mc)
{
    problem.validate();
    mc.validate();
    validate(pen, problem.design.p());
    const Matrix& x = problem.design.matrix();
    const Index n = problem.design.n();
    const Index p = problem.design.p();
    const double sigma = problem.sigma;
    const bool slope = kind_of(pen) == PenaltyKind::slope;
    const Vector thresholds = omega_star_thresholds(p, sigma);

    std::vector<char> hit(mc.replications, 0), stress(mc.replications, 0);
    parallel_for(
        mc.replications,
        [&](std::size_t i) {
            Engine eng = make_engine(replication_seed(mc.base_seed, i + 1));
            const Vector xi = sigma * standard_normal(n, eng);
            const Vector v = x.transpose() * xi;
            if (slope) {
                hit[i] = omega_star_holds(v / std::sqrt(static_cast<double>(n)), thresholds);
                const double eta = std::normal_distribution<double>(0.0, 1.0)(eng);
                stress[i] = omega_star_holds(Vector::Constant(p, sigma * eta), thresholds);
            } else
                hit[i] = dual_norm(pen, v / static_cast<double>(n)) <= 0.5;
        },
        mc.threads);

    EventReport out;
    auto push = [&](std::string name, const std::vector<char>& flags, bool asserted) {
        EventRow r;
        r.event = std::move(name);
        r.frequency = static_cast<double>(std::count(flags.begin(), flags.end(), 1)) / static_cast<double>(flags.size());
        r.slack = binomial_slack(r.reference, flags.size(), mc.slack_sigmas);
        r.asserted = asserted;
        r.pass = r.frequency >= r.reference - r.slack;
        if (asserted) out.pass = out.pass && r.pass;
        out.rows.push_back(std::move(r));
    };
    switch (kind_of(pen)) {
    case PenaltyKind::l1: push("lasso_sup_norm", hit, true); break;
    case PenaltyKind::group: push("group_max_norm", hit, true); break;
    case PenaltyKind::cone: push("cone_dual_norm", hit, true); break;
    case PenaltyKind::slope:
        push("slope_omega_star", hit, true);
        push("slope_omega_star_correlated", stress, false);
        break;
    }
    return out;
}

inline CsvTable events_table(const EventReport& r)
{
    CsvTable t({"event", "frequency", "pass"});
    for (const auto& row : r.rows) t.add(CsvTable::Row() << row.event << row.frequency << row.pass);
    return t;
}

/// Analytic lower bound 1 - 1/sqrt(pi log p) on the sup-norm event at the
/// minimal l1 tuning (reported alongside the empirical frequency).
inline double lasso_event_analytic_bound(Index p)
{
    detail::require(p >= 2, "lasso event bound: p must be >= 2");
    return 1.0 - 1.0 / std::sqrt(std::numbers::pi * std::log(static_cast<double>(p)));
}

} // namespace cpls
