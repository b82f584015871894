#pragma once

#include "types.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <cmath>
#include <numbers>

namespace cpls {

/// Standard normal CDF, 0.5 * erfc(-t / sqrt 2).
inline double std_normal_cdf(double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); }

/// 1 - Phi(t) without cancellation in the upper tail.
inline double std_normal_sf(double t) { return 0.5 * std::erfc(t / std::numbers::sqrt2); }

/// Phi^{-1}(q) = -sqrt(2) * erfc^{-1}(2q).
inline double std_normal_quantile(double q)
{
    detail::require(q > 0.0 && q < 1.0, "normal quantile: q must lie in (0, 1)");
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * q);
}

} // namespace cpls
