#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "mfglab/common.hpp"
#include "mfglab/grid.hpp"
#include "mfglab/model.hpp"

namespace mfg {

/// N agent states in d dimensions at one time instant.
struct ParticleEnsemble {
    std::vector<Vec> states;
    double time = 0.0;

    std::size_t size() const { return states.size(); }
    int dimension() const { return states.empty() ? 0 : states.front().size(); }

    void validate(double horizon) const {
        if (states.empty()) throw domain_error("ParticleEnsemble: empty");
        if (time < 0.0 || time > horizon) throw domain_error("ParticleEnsemble: time outside horizon");
        for (const auto& s : states)
            if (!s.finite()) throw instability_error("ParticleEnsemble: non-finite state");
    }
};

/// Uniform 1/N weights on an ensemble; total mass is 1 by construction.
struct EmpiricalMeasure {
    const ParticleEnsemble& samples;

    double weight() const { return 1.0 / static_cast<double>(samples.size()); }

    template <typename F>
    double integrate(F&& fn) const {
        double s = 0.0;
        for (const auto& x : samples.states) s += fn(x);
        return s * weight();
    }
};

/// rho^N_Phi(x) = (1/N) sum_k Phi(x_k).
inline double empirical_moment(const MomentPolynomial& phi, const ParticleEnsemble& ens) {
    if (ens.states.empty()) throw domain_error("empirical_moment: empty ensemble");
    return EmpiricalMeasure{ens}.integrate(phi);
}

/// rho^{N-1}_{Phi,i} = (1/(N-1)) sum_{k != i} Phi(x_k).  Zero-based agent index.
inline double leave_one_out_moment(const MomentPolynomial& phi, const ParticleEnsemble& ens,
                                   std::size_t i) {
    const std::size_t n = ens.states.size();
    if (n < 2) throw domain_error("leave_one_out_moment: needs N >= 2");
    if (i >= n) throw domain_error("leave_one_out_moment: agent index out of range");
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (k != i) s += phi(ens.states[k]);
    return s / static_cast<double>(n - 1);
}

/// |rho^N_Phi - rho^{N-1}_{Phi,i}|; equals |Phi(x_i) - rho^{N-1}_{Phi,i}| / N.
inline double moment_gap(const MomentPolynomial& phi, const ParticleEnsemble& ens, std::size_t i) {
    return std::abs(empirical_moment(phi, ens) - leave_one_out_moment(phi, ens, i));
}

/// W1 in one dimension: integral over the grid domain of |empirical CDF -
/// density CDF|, midpoint rule on cell centers. Density must carry unit mass.
inline double wasserstein1_1d(std::vector<double> samples, const Grid1D& grid,
                              const std::vector<double>& density) {
    if (samples.empty()) throw domain_error("wasserstein1_1d: no samples");
    if (static_cast<int>(density.size()) != grid.n_cells())
        throw domain_error("wasserstein1_1d: density/grid size mismatch");
    std::stable_sort(samples.begin(), samples.end());
    const double dx = grid.dx();
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    double dist = 0.0;
    double cdf_g = 0.0;
    for (int i = 0; i < grid.n_cells(); ++i) {
        const double c = grid.center(i);
        // density CDF at the cell center: full cells below + half of this cell
        const double fg = cdf_g + 0.5 * density[static_cast<std::size_t>(i)] * dx;
        const auto it = std::upper_bound(samples.begin(), samples.end(), c);
        const double fe = static_cast<double>(it - samples.begin()) * inv_n;
        dist += std::abs(fe - fg) * dx;
        cdf_g += density[static_cast<std::size_t>(i)] * dx;
    }
    return dist;
}

/// Ensemble overload; rejects d != 1.
inline double wasserstein1_1d(const ParticleEnsemble& ens, const Grid1D& grid,
                              const std::vector<double>& density) {
    if (ens.dimension() != 1)
        throw domain_error("wasserstein1_1d: only d = 1 supported");
    std::vector<double> xs;
    xs.reserve(ens.size());
    for (const auto& s : ens.states) xs.push_back(s[0]);
    return wasserstein1_1d(std::move(xs), grid, density);
}

/// rho_Phi[g] = integral of Phi against g, midpoint rule. g must be normalized
/// to unit mass within 1e-8.
template <int D>
double moment_of_density(const MomentPolynomial& phi, const Grid<D>& grid,
                         const std::vector<double>& g) {
    const double cell = grid.cell_volume();
    double mass = 0.0;
    for (double v : g) mass += v;
    mass *= cell;
    if (std::abs(mass - 1.0) > 1e-8)
        throw domain_error("moment_of_density: density mass " + g17(mass) + " not within 1e-8 of 1");
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) s += phi(grid.center_vec(i)) * g[i];
    return s * cell;
}

}  // namespace mfg
