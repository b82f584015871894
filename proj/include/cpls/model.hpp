#pragma once

#include "rng.hpp"
#include "types.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>

namespace cpls {

/// Dense n x p design with finite entries.
class DesignMatrix {
public:
    DesignMatrix() = default;

    explicit DesignMatrix(Matrix entries) : x_(std::move(entries))
    {
        detail::require(x_.rows() >= 1 && x_.cols() >= 1, "design: n and p must be >= 1");
        detail::require(x_.allFinite(), "design: entries must be finite");
    }

    const Matrix& matrix() const noexcept { return x_; }
    Index n() const noexcept { return x_.rows(); }
    Index p() const noexcept { return x_.cols(); }

private:
    Matrix x_;
};

/// The generative triple: design, unknown mean f and noise level sigma.
struct Problem {
    DesignMatrix design;
    Vector mean;
    double sigma = 1.0;

    void validate() const
    {
        detail::require(design.n() >= 1, "problem: empty design");
        detail::require(mean.size() == design.n(), "problem: f must have length n");
        detail::require(mean.allFinite(), "problem: f must be finite");
        detail::require(std::isfinite(sigma) && sigma > 0.0, "problem: sigma must be > 0");
    }
};

struct Observation {
    Vector y;
    Vector noise;
    std::uint64_t seed = 0;
};

/// sqrt((1/n) sum u_i^2)
inline double scaled_norm(const Vector& u)
{
    detail::require(u.size() > 0, "scaled_norm: empty vector");
    return u.norm() / std::sqrt(static_cast<double>(u.size()));
}

inline Observation sample_observation(const Problem& problem, std::uint64_t seed)
{
    problem.validate();
    Engine eng = make_engine(seed);
    Observation obs;
    obs.seed = seed;
    obs.noise = problem.sigma * standard_normal(problem.design.n(), eng);
    obs.y = problem.mean + obs.noise;
    return obs;
}

struct NormalizationCheck {
    bool normalized = false;
    double worst = 0.0; ///< max_j (1/n)|x_j|_2^2
};

inline constexpr double kNormalizationTol = 1e-12;

inline NormalizationCheck check_column_normalization(const DesignMatrix& x)
{
    const double n = static_cast<double>(x.n());
    const double worst = x.matrix().colwise().squaredNorm().maxCoeff() / n;
    return {worst <= 1.0 + kNormalizationTol, worst};
}

// ---------------------------------------------------------------------------
// Synthetic designs

/// I.i.d. N(0,1) entries, each column rescaled so that (1/n)|x_j|^2 = 1.
inline DesignMatrix gaussian_normalized_design(Index n, Index p, std::uint64_t seed)
{
    detail::require(n >= 1 && p >= 1, "design: n and p must be >= 1");
    Engine eng = make_engine(seed, 0x6465736967ull);
    Matrix x = standard_normal(n, p, eng);
    const double sn = std::sqrt(static_cast<double>(n));
    for (Index j = 0; j < p; ++j) {
        const double norm = x.col(j).norm();
        if (norm > 0.0) x.col(j) *= sn / norm;
    }
    return DesignMatrix(std::move(x));
}

/// sqrt(n) * Q with Q having orthonormal columns, so (1/n) X^T X = I_p.
/// seed == 0 gives the canonical sqrt(n) * [I; 0].
inline DesignMatrix orthonormal_design(Index n, Index p, std::uint64_t seed = 0)
{
    detail::require(p >= 1 && n >= p, "orthonormal design needs n >= p >= 1");
    const double sn = std::sqrt(static_cast<double>(n));
    if (seed == 0) return DesignMatrix(sn * Matrix::Identity(n, p));
    Engine eng = make_engine(seed, 0x6f7274686full);
    Matrix g = standard_normal(n, p, eng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(n, p);
    return DesignMatrix(sn * q);
}

// ---------------------------------------------------------------------------
// JSON: {n, p, X (row-major), f, sigma, seed, y}

inline nlohmann::json vector_to_json(const Vector& v)
{
    nlohmann::json arr = nlohmann::json::array();
    for (Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

inline Vector vector_from_json(const nlohmann::json& j, const std::string& field)
{
    detail::require(j.is_array(), field + ": expected an array of numbers");
    Vector v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        detail::require(j[i].is_number(), field + ": expected an array of numbers");
        v[static_cast<Index>(i)] = j[i].get<double>();
    }
    return v;
}

inline nlohmann::json to_json(const Problem& problem, const Observation* obs = nullptr)
{
    const Matrix& x = problem.design.matrix();
    nlohmann::json rows = nlohmann::json::array();
    for (Index i = 0; i < x.rows(); ++i) rows.push_back(vector_to_json(x.row(i).transpose()));
    nlohmann::json j;
    j["n"] = x.rows();
    j["p"] = x.cols();
    j["X"] = std::move(rows);
    j["f"] = vector_to_json(problem.mean);
    j["sigma"] = problem.sigma;
    if (obs) {
        j["seed"] = obs->seed;
        j["y"] = vector_to_json(obs->y);
    }
    return j;
}

inline Problem problem_from_json(const nlohmann::json& j)
{
    auto field = [&](const char* name) -> const nlohmann::json& {
        if (!j.contains(name)) throw ValidationError(std::string("problem: missing field '") + name + "'");
        return j.at(name);
    };
    const auto n = field("n").get<Index>();
    const auto p = field("p").get<Index>();
    const auto& rows = field("X");
    detail::require(rows.is_array() && static_cast<Index>(rows.size()) == n, "problem: X must have n rows");
    Matrix x(n, p);
    for (Index i = 0; i < n; ++i) {
        const auto& row = rows[static_cast<std::size_t>(i)];
        detail::require(row.is_array() && static_cast<Index>(row.size()) == p, "problem: X rows must have p entries");
        for (Index k = 0; k < p; ++k) x(i, k) = row[static_cast<std::size_t>(k)].get<double>();
    }
    Problem problem{DesignMatrix(std::move(x)), vector_from_json(field("f"), "f"), field("sigma").get<double>()};
    problem.validate();
    return problem;
}

/// Observation stored alongside a problem document, if present.
inline std::optional<Observation> observation_from_json(const Problem& problem, const nlohmann::json& j)
{
    if (!j.contains("y")) return std::nullopt;
    Observation obs;
    obs.y = vector_from_json(j.at("y"), "y");
    detail::require(obs.y.size() == problem.design.n(), "observation: y must have length n");
    obs.noise = obs.y - problem.mean;
    obs.seed = j.value("seed", std::uint64_t{0});
    return obs;
}

} // namespace cpls
