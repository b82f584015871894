#include "oracles.hpp"

#include <cpls/constants.hpp>

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace cpls;
using Catch::Approx;

namespace {

/// (1/2) X^T X = [[1, rho], [rho, 1]] with n = 2.
DesignMatrix correlated_pair(double rho)
{
    Matrix x(2, 2);
    x << 1.0, rho, 0.0, std::sqrt(1.0 - rho * rho);
    return DesignMatrix(std::sqrt(2.0) * x);
}

double quantile_by_bisection(double q)
{
    double lo = -40.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (0.5 * std::erfc(-mid / std::sqrt(2.0)) < q ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

double ratio(const DesignMatrix& x, const ConeSpec& spec, const Vector& d)
{
    return (x.matrix() * d).squaredNorm() / static_cast<double>(x.n()) / cone_denominator(spec, d);
}

} // namespace

TEST_CASE("RE constant is exactly 1 on orthonormal designs")
{
    const auto x = orthonormal_design(16, 8, 3);
    for (double c0 : {1.0, 3.0, 10.0}) {
        const auto r = re_type_constant(x, ReSpec{{1, 4}, c0});
        CHECK(r.exact);
        CHECK(r.value == 1.0);
        CHECK(std::string(r.status()) == "exact");
    }
    const auto g = re_type_constant(x, GroupReSpec{GroupPartition::contiguous(8, 2), {1}, 3.0});
    CHECK(g.exact);
    CHECK(g.value == 1.0);
}

TEST_CASE("RE estimate matches the angular grid at p = 2")
{
    for (double rho : {0.0, 0.5, 0.9, -0.6}) {
        const auto x = correlated_pair(rho);
        for (double c0 : {1.0, 3.0, 0.3}) {
            const ConeSpec spec = ReSpec{{0}, c0};
            const auto est = re_type_constant(x, spec, {64, 5000, 1, 0});
            const double grid = oracle::re_grid_p2(x.matrix(), [&](const Vector& d) {
                return std::abs(d[1]) <= c0 * std::abs(d[0]);
            });
            CHECK(std::abs(est.value - grid) <= 1e-3);
        }
    }
}

TEST_CASE("witnesses lie in their cones and attain the reported value")
{
    const auto x = gaussian_normalized_design(40, 20, 5);
    const auto part = GroupPartition::contiguous(20, 4);
    const std::vector<ConeSpec> specs{ReSpec{{0, 3}, 3.0}, GroupReSpec{part, {0, 2}, 3.0},
                                      WreSpec{2, 3.0, slope_weights(20, 40, 1.0)},
                                      ConeQSpec{block_cone(part), {0, 1, 2, 3}, 3.0}};
    for (const auto& spec : specs) {
        const auto r = re_type_constant(x, spec, {32, 5000, 2, 0});
        CHECK_FALSE(r.exact);
        CHECK(r.starts == 32);
        CHECK(r.witness.norm() == Approx(1.0).epsilon(1e-12));
        CHECK(cone_residual(spec, r.witness) <= 1e-9);
        CHECK(std::abs(ratio(x, spec, r.witness) - r.value * r.value) <= 1e-8);
    }
}

TEST_CASE("singleton RE constant is at most 1 under normalization")
{
    const auto x = gaussian_normalized_design(25, 40, 6);
    REQUIRE(check_column_normalization(x).normalized);
    for (std::size_t j : {0u, 7u, 39u}) CHECK(re_type_constant(x, ReSpec{{j}, 3.0}, {16, 2000, 3, 0}).value <= 1.0 + 1e-12);
}

TEST_CASE("cone spec validation")
{
    const auto x = gaussian_normalized_design(10, 6, 7);
    CHECK_THROWS_AS(re_type_constant(x, ReSpec{{}, 3.0}), ValidationError);
    CHECK_THROWS_AS(re_type_constant(x, ReSpec{{6}, 3.0}), ValidationError);
    CHECK_THROWS_AS(re_type_constant(x, ReSpec{{0}, 0.0}), ValidationError);
    CHECK_THROWS_AS(re_type_constant(x, ReSpec{{0}, 3.0}, {0, 10, 0, 0}), ValidationError);
    CHECK_THROWS_AS(re_type_constant(x, WreSpec{7, 3.0, slope_weights(6, 10, 1.0)}), ValidationError);
}

TEST_CASE("recommended tuning")
{
    const auto x100 = gaussian_normalized_design(100, 100, 8);
    CHECK(recommended_tuning(L1Penalty{1.0}, x100, 1.0) == Approx(2.0 * std::sqrt(2.0 * std::log(100.0) / 100.0)));
    CHECK(recommended_tuning(L1Penalty{1.0}, x100, 1.0) == Approx(0.6070).epsilon(1e-4));
    CHECK(recommended_tuning(SlopePenalty{1.0, slope_weights(100, 100, 1.0)}, x100, 1.0) == 8.0);

    const auto xo = orthonormal_design(36, 9, 2);
    const double group = recommended_tuning(GroupPenalty{GroupPartition::contiguous(9, 9), 1.0}, xo, 1.5);
    CHECK(group == Approx(2.0 * 1.5 / 6.0 * (3.0 + std::sqrt(2.0 * std::log(2.0)))).epsilon(1e-12));
    CHECK(psi_star(xo, GroupPartition::contiguous(9, 3)) == Approx(1.0).epsilon(1e-12));

    const auto cone = block_cone(GroupPartition::contiguous(9, 3));
    CHECK(recommended_tuning(ConePenalty{cone, 1.0}, xo, 1.0) ==
          Approx(2.0 / 6.0 * (1.0 + std::sqrt(2.0 * std::log(6.0)))));

    CHECK_THROWS_AS(recommended_tuning(L1Penalty{1.0}, gaussian_normalized_design(10, 1, 1), 1.0), ValidationError);

    double prev_n = INFINITY, prev_p = 0.0;
    for (Index n : {10, 20, 40, 80}) {
        const double v = recommended_tuning(L1Penalty{1.0}, gaussian_normalized_design(n, 5, 1), 1.0);
        CHECK(v <= prev_n);
        prev_n = v;
    }
    for (Index p : {2, 5, 20, 60}) {
        const double v = recommended_tuning(L1Penalty{1.0}, gaussian_normalized_design(10, p, 1), 1.0);
        CHECK(v >= prev_p);
        prev_p = v;
    }
}

TEST_CASE("oracle bound on an orthonormal design with f in the model")
{
    const Index n = 64;
    const auto x = orthonormal_design(n, n, 9);
    Vector beta = Vector::Zero(n);
    beta.head(3) << 4.0, -3.0, 5.0;
    const Problem pr{x, x.matrix() * beta, 1.0};
    const Penalty pen = tuned(L1Penalty{1.0}, x, 1.0);
    const double lam = multiplier(pen);
    for (double delta : {0.5, 0.1, 0.01}) {
        const auto b = oracle_bound(pen, pr, {0, 1, 2}, 1.0, delta);
        CHECK(b.approximation <= 1e-12);
        CHECK(b.root_bound == Approx(1.5 * lam * std::sqrt(3.0) + quantile_by_bisection(1.0 - delta) / 8.0).epsilon(1e-10));
        CHECK(b.squared_bound == Approx(9.0 / 4.0 * 3.0 * lam * lam).epsilon(1e-10));
        REQUIRE(b.squared_high_probability);
        CHECK(*b.squared_high_probability == Approx(27.0 / 4.0 * 3.0 * lam * lam + 6.0 * std::log(1.0 / delta) / 64.0).epsilon(1e-10));
        CHECK(quantile_by_bisection(1.0 - delta) <= std::sqrt(2.0 * std::log(1.0 / delta)));
    }
    const auto e = oracle_bound(pen, pr, {0, 1, 2}, 1.0);
    CHECK(e.expectation_bound == Approx(1.5 * lam * std::sqrt(3.0) + 1.0 / std::sqrt(2.0 * std::acos(-1.0) * 64.0)));
    CHECK_FALSE(e.squared_high_probability);
}

TEST_CASE("oracle bound conventions and penalty-specific terms")
{
    const auto x = orthonormal_design(16, 4, 0);
    const Problem pr{x, Vector::Zero(16), 1.0};
    const auto zero = oracle_bound(L1Penalty{0.5}, pr, {0}, 0.0, 0.1);
    CHECK(std::isinf(zero.root_bound));
    CHECK(std::isinf(zero.squared_bound));
    CHECK(std::isinf(zero.expectation_bound));

    const auto slope = oracle_bound(SlopePenalty{8.0, slope_weights(4, 16, 1.0)}, pr, {0}, 1.0);
    CHECK(slope.remainder == Approx(12.0 * std::sqrt(std::log(8.0 * std::exp(1.0)) / 16.0)).epsilon(1e-12));

    const auto part = GroupPartition::contiguous(4, 2);
    const auto group = oracle_bound(GroupPenalty{part, 0.3}, pr, {1}, 0.5);
    CHECK(group.remainder == Approx(1.5 * 0.3 * 1.0 / 0.5));
    const auto cone = oracle_bound(ConePenalty{block_cone(part), 0.3}, pr, {0, 1}, 2.0);
    CHECK(cone.remainder == Approx(1.5 * 0.3 / 2.0));
    CHECK_THROWS_AS(oracle_bound(L1Penalty{0.5}, pr, {0}, 1.0, 1.0), ValidationError);
}

TEST_CASE("best sparse approximation")
{
    const auto x = gaussian_normalized_design(20, 10, 11);
    Engine eng = make_engine(12);
    Vector coef = Vector::Zero(10);
    coef[2] = 1.5;
    coef[5] = -2.0;
    auto in_span = best_sparse_approximation(x.matrix() * coef, x, {2, 5});
    CHECK(in_span.error <= 1e-12);
    CHECK((in_span.beta - coef).norm() <= 1e-10);

    Matrix xs(20, 2);
    xs << x.matrix().col(0), x.matrix().col(1);
    const Vector g = standard_normal(20, eng);
    const Vector orth = g - xs * xs.colPivHouseholderQr().solve(g);
    const auto o = best_sparse_approximation(orth, x, {0, 1});
    CHECK(o.beta.norm() <= 1e-12);
    CHECK(o.error == Approx(scaled_norm(orth)).epsilon(1e-12));

    const Vector f = standard_normal(20, eng);
    const IndexSet s{1, 3, 4, 8};
    Matrix xa(20, 4);
    for (int c = 0; c < 4; ++c) xa.col(c) = x.matrix().col(static_cast<Index>(s[c]));
    const Vector ref = xa.householderQr().solve(f);
    const auto r = best_sparse_approximation(f, x, s);
    for (int c = 0; c < 4; ++c) CHECK(std::abs(r.beta[static_cast<Index>(s[c])] - ref[c]) <= 1e-10);
    CHECK(r.error == Approx(scaled_norm(xa * ref - f)).epsilon(1e-10));

    double prev = INFINITY;
    IndexSet grow;
    for (std::size_t j = 0; j < 10; ++j) {
        grow.push_back(j);
        const double e = best_sparse_approximation(f, x, grow).error;
        CHECK(e <= prev + 1e-12);
        prev = e;
    }
    CHECK_THROWS_AS(best_sparse_approximation(f, x, {}), ValidationError);
}
