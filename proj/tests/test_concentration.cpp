#include <cpls/concentration.hpp>
#include <cpls/geometry.hpp>

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

using namespace cpls;
using Catch::Approx;

namespace {

Problem lasso_problem(Index n, Index p, std::uint64_t seed, double magnitude = 3.0)
{
    const auto x = gaussian_normalized_design(n, p, seed);
    Vector beta = Vector::Zero(p);
    beta.head(4).setConstant(magnitude);
    return Problem{x, x.matrix() * beta, 1.0};
}

MonteCarloConfig mc_with(std::size_t n, std::uint64_t seed)
{
    MonteCarloConfig mc;
    mc.replications = n;
    mc.base_seed = seed;
    return mc;
}

double quantile_of(std::vector<double> v, double q)
{
    std::sort(v.begin(), v.end());
    return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1))];
}

} // namespace

TEST_CASE("standard normal cdf and quantile")
{
    CHECK(std_normal_cdf(0.0) == 0.5);
    for (double t = -8.0; t <= 8.0; t += 0.01) {
        const long double ref = 0.5L * std::erfc(-static_cast<long double>(t) / std::sqrt(2.0L));
        CHECK(std::abs(std_normal_cdf(t) - static_cast<double>(ref)) <= 1e-12);
    }
    // Phi(t) rounds to within 1e-16 of 1 for large t, so the round trip is only well conditioned for t <= 3
    for (double t = -6.0; t <= 3.0; t += 0.05) CHECK(std::abs(std_normal_quantile(std_normal_cdf(t)) - t) <= 1e-9);
    for (double t = 0.05; t <= 10.0; t += 0.05) CHECK(std_normal_sf(t) <= std::exp(-t * t / 2.0));
    for (double d : {0.5, 0.2, 0.1, 0.05, 0.01, 1e-4, 1e-8})
        CHECK(std_normal_quantile(1.0 - d) <= std::sqrt(2.0 * std::log(1.0 / d)));
    CHECK_THROWS_AS(std_normal_quantile(0.0), ValidationError);
    CHECK_THROWS_AS(std_normal_quantile(1.0), ValidationError);
}

TEST_CASE("simulations are reproducible")
{
    const Problem pr = lasso_problem(30, 40, 1);
    const Penalty pen = tuned(L1Penalty{1.0}, pr.design, 1.0);
    MonteCarloConfig mc = mc_with(1000, 5);
    const auto a = simulate_prediction_errors(pr, pen, {}, mc);
    mc.threads = 1;
    const auto b = simulate_prediction_errors(pr, pen, {}, mc);
    REQUIRE(a.reps.size() == 1000);
    for (std::size_t i = 0; i < a.reps.size(); ++i) {
        CHECK(a.reps[i].error == b.reps[i].error);
        CHECK(a.reps[i].seed == b.reps[i].seed);
        CHECK(a.reps[i].rep == i + 1);
    }
    CHECK(errors_table(a).str() == errors_table(b).str());
    CHECK(a.nonconverged == 0);
}

TEST_CASE("near-noiseless runs return the deterministic bias")
{
    Problem pr = lasso_problem(20, 30, 2);
    pr.sigma = 1e-8;
    const Penalty pen = L1Penalty{0.3};
    const auto sim = simulate_prediction_errors(pr, pen, {}, mc_with(200, 3));
    const auto e = sim.errors();
    const auto [lo, hi] = std::minmax_element(e.begin(), e.end());
    CHECK(*hi - *lo <= 1e-6);
    const auto bias = solve(pr.mean, pr.design, pen, SolverConfig{});
    CHECK(std::abs(e.front() - scaled_norm(bias.fitted - pr.mean)) <= 1e-6);
}

TEST_CASE("zero mean with a dominating multiplier gives zero error")
{
    Problem pr{gaussian_normalized_design(20, 30, 4), Vector::Zero(20), 1.0};
    const auto sim = simulate_prediction_errors(pr, L1Penalty{100.0}, {}, mc_with(200, 4));
    for (double e : sim.errors()) CHECK(e == 0.0);
}

TEST_CASE("tail rows: extreme and central levels")
{
    const Problem pr = lasso_problem(30, 40, 6);
    const Penalty pen = tuned(L1Penalty{1.0}, pr.design, 1.0);
    MonteCarloConfig mc = mc_with(2000, 7);
    mc.t_grid = {0.0, 0.5, 1.0, 2.0, 6.0};
    const auto sim = simulate_prediction_errors(pr, pen, {}, mc);
    const auto rep = concentration_check(sim.errors(), 1.0, 30, mc);
    const auto med = rep.rows_for(TailSide::median_upper);
    REQUIRE(med.size() == 5);
    CHECK(med.front().empirical == Approx(0.5).margin(0.001));
    CHECK(med.front().pass);
    CHECK(med.back().empirical == 0.0);
    CHECK(med.back().pass);
    CHECK(rep.pass);
    CHECK(rep.rows.size() == 15);
    for (const auto& r : rep.rows) {
        CHECK(r.empirical >= 0.0);
        CHECK(r.empirical <= 1.0);
        CHECK(r.pass == (r.empirical <= r.bound + r.slack));
    }
}

TEST_CASE("medians of independent batches agree")
{
    const Problem pr = lasso_problem(30, 40, 8);
    const Penalty pen = tuned(L1Penalty{1.0}, pr.design, 1.0);
    const auto a = simulate_prediction_errors(pr, pen, {}, mc_with(2000, 9)).errors();
    const auto b = simulate_prediction_errors(pr, pen, {}, mc_with(2000, 10)).errors();
    const double iqr = quantile_of(a, 0.75) - quantile_of(a, 0.25);
    // standard error of a sample median is about 0.93 IQR / sqrt N under normality
    const double band = 3.0 * std::sqrt(2.0) * 0.93 * iqr / std::sqrt(2000.0);
    CHECK(std::abs(sample_median(a) - sample_median(b)) <= band);
}

TEST_CASE("errors are 1-Lipschitz in the noise on coupled pairs")
{
    const Problem pr = lasso_problem(30, 40, 11);
    const Penalty pen = tuned(L1Penalty{1.0}, pr.design, 1.0);
    const PenalizedLeastSquares solver(pr.design, pen, certification_solver_config());
    Engine eng = make_engine(12);
    for (int k = 0; k < 100; ++k) {
        const Vector z = standard_normal(30, eng);
        const Vector z2 = z + 0.3 * standard_normal(30, eng);
        const double e1 = scaled_norm(solver.solve(pr.mean + z).fitted - pr.mean);
        const double e2 = scaled_norm(solver.solve(pr.mean + z2).fitted - pr.mean);
        CHECK(std::abs(e1 - e2) <= scaled_norm(z - z2) + 1e-6);
    }
}

TEST_CASE("coverage rows and monotonicity")
{
    const Index n = 32;
    const auto x = orthonormal_design(n, n, 13);
    Vector beta = Vector::Zero(n);
    beta.head(2) << 4.0, -4.0;
    const Problem pr{x, x.matrix() * beta, 1.0};
    const Penalty pen = tuned(L1Penalty{1.0}, x, 1.0);
    MonteCarloConfig mc = mc_with(2000, 14);
    mc.delta_grid = {0.999999, 0.9, 0.5, 0.1, 0.01};
    const auto sim = simulate_prediction_errors(pr, pen, {}, mc);
    const auto cov = oracle_coverage_check(pr, pen, {{0, 1}, 1.0, true}, sim.errors(), mc);
    REQUIRE(cov.rows.size() == 5);
    CHECK(cov.rows.front().delta == 0.999999);
    CHECK(cov.rows.front().pass);
    for (std::size_t i = 1; i < cov.rows.size(); ++i) {
        CHECK(cov.rows[i].bound >= cov.rows[i - 1].bound);
        CHECK(cov.rows[i].fraction <= cov.rows[i - 1].fraction);
    }
    CHECK(cov.pass);
    CHECK(cov.expectation.pass);
    CHECK(cov.certifying);
    const auto est = oracle_coverage_check(pr, pen, {{0, 1}, 1.0, false}, sim.errors(), mc);
    CHECK_FALSE(est.certifying);
    CHECK(coverage_table(cov).size() == 5);
}

TEST_CASE("noise events")
{
    const Problem pr = lasso_problem(50, 100, 15);
    const MonteCarloConfig mc = mc_with(2000, 16);
    const Penalty lasso = tuned(L1Penalty{1.0}, pr.design, 1.0);
    const auto big = event_probability_check(pr, with_multiplier(lasso, 10.0 * multiplier(lasso)), mc);
    REQUIRE(big.rows.size() == 1);
    CHECK(big.rows[0].frequency == 1.0);
    const auto lo = event_probability_check(pr, lasso, mc);
    CHECK(lo.pass);
    CHECK(lo.rows[0].event == "lasso_sup_norm");

    const auto slope = event_probability_check(pr, SlopePenalty{8.0, slope_weights(100, 50, 1.0)}, mc);
    REQUIRE(slope.rows.size() == 2);
    CHECK(slope.rows[0].pass);
    CHECK_FALSE(slope.rows[1].asserted);
    const double stress = 2.0 * std_normal_cdf(4.0 * std::sqrt(std::log(2.0))) - 1.0;
    CHECK(slope.rows[1].frequency == Approx(stress).margin(3.0 * std::sqrt(stress * (1 - stress) / 2000.0) + 1e-3));
    CHECK(slope.pass);

    const auto part = GroupPartition::contiguous(100, 5);
    CHECK(event_probability_check(pr, tuned(GroupPenalty{part, 1.0}, pr.design, 1.0), mc).pass);
    CHECK(event_probability_check(pr, tuned(ConePenalty{block_cone(part), 1.0}, pr.design, 1.0), mc).pass);
    CHECK(lasso_event_analytic_bound(3) < 0.5);
    CHECK(lasso_event_analytic_bound(4) > 0.5);
}

TEST_CASE("sample statistics and slack")
{
    CHECK(sample_median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(sample_median({4.0, 1.0, 3.0, 2.0}) == 2.5);
    CHECK(binomial_slack(0.5, 10000, 3.0) == Approx(0.015));
    CHECK(binomial_slack(0.0, 100, 3.0) == 0.0);
    MonteCarloConfig bad;
    bad.replications = 99;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad.replications = 100;
    bad.delta_grid = {1.0};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("CSV output format")
{
    CHECK(format_real(0.1) == "0.10000000000000001");
    CHECK(format_real(1e-20) == "9.9999999999999995e-21");
    CHECK(format_real(3.0) == "3");
    ConcentrationReport empty;
    CHECK(tails_table(empty).str() == "t,empirical,bound,slack,pass\n");
    CsvTable t({"a", "b"});
    t.add(CsvTable::Row() << "x,y" << true);
    CHECK(t.str() == "a,b\n\"x,y\",true\n");
}
