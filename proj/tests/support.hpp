#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "pflow/pflow.hpp"

namespace pflow::testing {

/// N points of N(mean, var) at the midpoint quantiles (l - 1/2) / N.
inline std::vector<double> normal_quantiles(double mean, double var, std::size_t n)
{
    const boost::math::normal_distribution<double> law(mean, std::sqrt(var));
    std::vector<double> out(n);
    for (std::size_t l = 0; l < n; ++l) out[l] = boost::math::quantile(law, (static_cast<double>(l) + 0.5) / static_cast<double>(n));
    return out;
}

/// Records all at (x, mu) whose displacements are the given values (d = 1).
inline ObservedDataset dataset_at(double x, double mu, const std::vector<double>& displacements, double dt = 0.1)
{
    ObservedDataset ds(1, 1);
    ds.dt = dt;
    ds.model_name = "example1";
    for (const double dx : displacements) {
        const double xn[1] = {x};
        const double m[1] = {mu};
        const double xp[1] = {x + dx};
        ds.push_back(xn, m, xp);
    }
    return ds;
}

inline std::vector<char> file_bytes(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("pflow_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline Vector vec(std::initializer_list<double> v)
{
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (const double x : v) out[i++] = x;
    return out;
}

}  // namespace pflow::testing
