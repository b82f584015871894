#pragma once

#include "types.hpp"

#include <cstdint>
#include <random>

namespace cpls {

/// Streams are keyed by (seed, index): each key maps through std::seed_seq
/// into an independent std::mt19937_64 state, so replication i never depends
/// on how many draws replication i-1 made. Gaussian variates come from
/// std::normal_distribution<double> on that engine.
using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed, std::uint64_t index = 0)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                      0x9e3779b9u};
    return Engine(seq);
}

/// 64-bit seed for replication `index` of a run started from `base_seed`.
inline std::uint64_t replication_seed(std::uint64_t base_seed, std::uint64_t index)
{
    Engine eng = make_engine(base_seed, index);
    return eng();
}

inline Vector standard_normal(Index size, Engine& eng)
{
    std::normal_distribution<double> dist(0.0, 1.0);
    Vector z(size);
    for (Index i = 0; i < size; ++i) z[i] = dist(eng);
    return z;
}

inline Matrix standard_normal(Index rows, Index cols, Engine& eng)
{
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix m(rows, cols);
    // column-major fill order is part of the reproducibility contract
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = dist(eng);
    return m;
}

} // namespace cpls
