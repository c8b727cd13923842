#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "mfglab/common.hpp"
#include "mfglab/empirical.hpp"
#include "mfglab/grid.hpp"
#include "mfglab/model.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// Limit system
//
//   dt h + (f + chi2 (m_bar/a^) K[g,h]) . grad h
//        = l - chi1 (1/(2 a^)) (m_hat . grad h)^2
//            + chi3 (a-/(2 a^2)) int g (m_hat . grad h)^2 dz
//   dt g + div( (f + chi1 (1/a^) m_hat (m_hat . grad h)
//                  + chi2 (1/a^) m_bar K[g,h]) g ) = 0
//   g(0) = g0,  h(T,x) = p(x, rho_Phi[g](T))
//
// with K[g,h] = int g(t,z) (m_hat(t,z,rho) . grad h(t,z)) dz.
// Schemes: conservative first-order upwind for g (zero-flux boundaries),
// explicit backward step for h with upwind advection and a local
// Lax-Friedrichs dissipation on the quadratic term.
// ---------------------------------------------------------------------------

struct FixedPointConfig {
    double damping = 0.5;  // omega in (0,1]
    double tol = 1e-6;
    int max_iter = 200;
    int time_steps = 400;        // uniform levels over [0,T]
    double cfl_limit = 0.9;      // hard precondition checked every step
    double llf_factor = 1.25;    // sigma = min(|H_p|, llf_factor H_p^2 dt/dx)
    double boundary_mass_tol = 1e-6;  // truncation-margin audit on g
};

template <int D>
struct MFGSolution {
    ValueField<D> h;
    DensityField<D> g;
    int iterations = 0;
    bool converged = false;
    // (iteration, sup-norm h change, max-over-levels L1 g fixed-point defect)
    std::vector<std::array<double, 3>> residuals;
};

namespace pde {

/// grad h per dimension at every cell (central differences, one-sided at edges).
template <int D>
std::array<std::vector<double>, D> gradients(const Grid<D>& grid, const std::vector<double>& h) {
    std::array<std::vector<double>, D> g;
    for (int k = 0; k < D; ++k) g[k] = gradient_component(grid, h, k);
    return g;
}

/// K[g,h](t) = sum_i g_i (m_hat . grad h)_i dV  (midpoint quadrature).
template <int D>
double control_kernel(const Grid<D>& grid, const std::vector<double>& g_level,
                      const std::array<std::vector<double>, D>& dh, const ModelSpec& spec,
                      double t, double rho) {
    const double cell = grid.cell_volume();
    double s = 0.0;
    for (std::size_t i = 0; i < g_level.size(); ++i) {
        if (g_level[i] == 0.0) continue;
        const Vec x = grid.center_vec(i);
        const Vec mh = spec.self_gain(t, x, rho);
        double mg = 0.0;
        for (int k = 0; k < D; ++k) mg += mh[k] * dh[k][i];
        s += g_level[i] * mg;
    }
    return s * cell;
}

/// int g (m_hat . grad h)^2 dz for the chi3 accumulator.
template <int D>
double control_energy(const Grid<D>& grid, const std::vector<double>& g_level,
                      const std::array<std::vector<double>, D>& dh, const ModelSpec& spec,
                      double t, double rho) {
    const double cell = grid.cell_volume();
    double s = 0.0;
    for (std::size_t i = 0; i < g_level.size(); ++i) {
        if (g_level[i] == 0.0) continue;
        const Vec x = grid.center_vec(i);
        const Vec mh = spec.self_gain(t, x, rho);
        double mg = 0.0;
        for (int k = 0; k < D; ++k) mg += mh[k] * dh[k][i];
        s += g_level[i] * mg * mg;
    }
    return s * cell;
}

}  // namespace pde

/// Transport velocity v = f + chi1 (1/a^) m_hat (m_hat . grad h) + chi2 (1/a^) m_bar K.
/// Returns one per-cell array per dimension.
template <int D>
std::array<std::vector<double>, D> velocity_field(const Grid<D>& grid,
                                                  const std::vector<double>& h_level,
                                                  const std::vector<double>& g_level,
                                                  const ModelSpec& spec, const RegimeFlags& flags,
                                                  double t) {
    const auto dh = pde::gradients(grid, h_level);
    const double rho = moment_of_density(spec.moment_poly, grid, g_level);
    const double kernel = flags.chi2 ? pde::control_kernel(grid, g_level, dh, spec, t, rho) : 0.0;
    const double inv_a = 1.0 / spec.self_weight;
    std::array<std::vector<double>, D> v;
    for (int k = 0; k < D; ++k) v[k].assign(grid.size(), 0.0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Vec x = grid.center_vec(i);
        const Vec f = spec.drift(t, x, rho);
        Vec mh{}, mb{};
        double mg = 0.0;
        if (flags.chi1) {
            mh = spec.self_gain(t, x, rho);
            for (int k = 0; k < D; ++k) mg += mh[k] * dh[k][i];
        }
        if (flags.chi2) mb = spec.cross_gain(t, x, rho);
        for (int k = 0; k < D; ++k) {
            double vk = f[k];
            if (flags.chi1) vk += inv_a * mh[k] * mg;
            if (flags.chi2) vk += inv_a * mb[k] * kernel;
            if (!std::isfinite(vk)) throw instability_error("velocity_field: non-finite velocity");
            v[k][i] = vk;
        }
    }
    return v;
}

/// One conservative upwind step of dt g + div(v g) = 0 with zero-flux walls.
/// Mass is preserved by telescoping fluxes; positivity holds under the CFL bound.
template <int D>
std::vector<double> transport_forward_step(const Grid<D>& grid, const std::vector<double>& g_level,
                                           const std::array<std::vector<double>, D>& velocity,
                                           double dt, double cfl_limit = 0.9) {
    double cfl = 0.0;
    for (int k = 0; k < D; ++k) {
        double vmax = 0.0;
        for (double v : velocity[k]) vmax = std::max(vmax, std::abs(v));
        cfl += dt * vmax / grid.spacing(k);
    }
    if (cfl > cfl_limit)
        throw instability_error("transport_forward_step: CFL " + g17(cfl) + " exceeds " +
                                g17(cfl_limit) + " (reduce dt or refine time grid)");

    std::vector<double> out = g_level;
    for (int k = 0; k < D; ++k) {
        const double lam = dt / grid.spacing(k);
        std::size_t stride = 1;
        for (int d = k + 1; d < D; ++d) stride *= static_cast<std::size_t>(grid.cells[d]);
        const std::size_t nk = static_cast<std::size_t>(grid.cells[k]);
        const std::size_t total = grid.size();
        for (std::size_t f = 0; f < total; ++f) {
            const std::size_t ik = (f / stride) % nk;
            // right-face flux of cell f in dimension k (zero at the right wall)
            double flux_r = 0.0;
            if (ik + 1 < nk) {
                const double vf = 0.5 * (velocity[k][f] + velocity[k][f + stride]);
                flux_r = vf > 0.0 ? vf * g_level[f] : vf * g_level[f + stride];
            }
            double flux_l = 0.0;
            if (ik > 0) {
                const double vf = 0.5 * (velocity[k][f - stride] + velocity[k][f]);
                flux_l = vf > 0.0 ? vf * g_level[f - stride] : vf * g_level[f];
            }
            out[f] -= lam * (flux_r - flux_l);
        }
    }
    return out;
}

/// One explicit backward step of the HJB line: given h(t+dt) and g(t),
/// returns h(t). Advection is upwinded by the sign of its coefficient; the
/// quadratic term carries a local Lax-Friedrichs dissipation whose
/// coefficient shrinks with dt (classic LLF exactly at the CFL limit).
template <int D>
std::vector<double> hjb_backward_step(const Grid<D>& grid, const std::vector<double>& h_next,
                                      const std::vector<double>& g_level, const ModelSpec& spec,
                                      const RegimeFlags& flags, double t, double dt,
                                      double cfl_limit = 0.9, double llf_factor = 1.25) {
    const double inv_a = 1.0 / spec.self_weight;
    const double rho = moment_of_density(spec.moment_poly, grid, g_level);

    const auto dh = pde::gradients(grid, h_next);
    const double kernel =
        flags.chi2 ? pde::control_kernel(grid, g_level, dh, spec, t, rho) : 0.0;
    // chi3 integral is spatially constant: shifts h uniformly per level
    const double c3 = flags.chi3 && spec.cross_weight > 0.0
                          ? spec.cross_weight / (2.0 * spec.self_weight * spec.self_weight) *
                                pde::control_energy(grid, g_level, dh, spec, t, rho)
                          : 0.0;

    std::vector<double> out(h_next.size());
    std::array<std::size_t, D> stride{};
    for (int k = 0; k < D; ++k) {
        stride[k] = 1;
        for (int d = k + 1; d < D; ++d) stride[k] *= static_cast<std::size_t>(grid.cells[d]);
    }

    const std::size_t total = grid.size();
    for (std::size_t f = 0; f < total; ++f) {
        const Vec x = grid.center_vec(f);
        const Vec fdrift = spec.drift(t, x, rho);
        const Vec mh = spec.self_gain(t, x, rho);
        const Vec mb = flags.chi2 ? spec.cross_gain(t, x, rho) : Vec(D);

        // one-sided differences per dimension
        std::array<double, D> pm{}, pp{}, pbar{};
        for (int k = 0; k < D; ++k) {
            const std::size_t nk = static_cast<std::size_t>(grid.cells[k]);
            const std::size_t ik = (f / stride[k]) % nk;
            const double dxk = grid.spacing(k);
            const double fwd = ik + 1 < nk ? (h_next[f + stride[k]] - h_next[f]) / dxk : 0.0;
            const double bwd = ik > 0 ? (h_next[f] - h_next[f - stride[k]]) / dxk : 0.0;
            pp[k] = ik + 1 < nk ? fwd : bwd;  // one-sided at the wall
            pm[k] = ik > 0 ? bwd : fwd;
            pbar[k] = 0.5 * (pp[k] + pm[k]);
        }

        double m_dot_p = 0.0;
        if (flags.chi1)
            for (int k = 0; k < D; ++k) m_dot_p += mh[k] * pbar[k];

        // H(x, p) = sum_k A_k p_k + chi1 (1/(2 a^)) (m_hat . p)^2
        double ham = flags.chi1 ? 0.5 * inv_a * m_dot_p * m_dot_p : 0.0;
        double cfl = 0.0;
        for (int k = 0; k < D; ++k) {
            const double adv = fdrift[k] + (flags.chi2 ? inv_a * mb[k] * kernel : 0.0);
            const double hp = adv + (flags.chi1 ? inv_a * mh[k] * m_dot_p : 0.0);
            const double dxk = grid.spacing(k);
            cfl += dt * std::abs(hp) / dxk;
            const double sigma = std::min(std::abs(hp), llf_factor * hp * hp * dt / dxk);
            ham += adv * pbar[k] + 0.5 * sigma * (pp[k] - pm[k]);
        }
        if (cfl > cfl_limit)
            throw instability_error("hjb_backward_step: CFL " + g17(cfl) + " exceeds " +
                                    g17(cfl_limit) + " (characteristic speed too large)");

        const double l = spec.running_cost(t, x, rho);
        const double h_new = h_next[f] + dt * (ham - l - c3);
        if (!std::isfinite(h_new)) throw instability_error("hjb_backward_step: blow-up");
        out[f] = h_new;
    }
    return out;
}

namespace pde {

/// Terminal level h(T,x) = p(x, rho_Phi[g](T)).
template <int D>
std::vector<double> terminal_level(const Grid<D>& grid, const ModelSpec& spec,
                                   const std::vector<double>& g_final) {
    const double rho = moment_of_density(spec.moment_poly, grid, g_final);
    std::vector<double> h(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) h[i] = spec.terminal_payoff(grid.center_vec(i), rho);
    return h;
}

/// Full backward HJB sweep against the given density levels.
template <int D>
ValueField<D> hjb_solve_backward(const Grid<D>& grid, const ModelSpec& spec,
                                 const RegimeFlags& flags,
                                 const std::vector<std::vector<double>>& g_levels, double dt,
                                 const FixedPointConfig& cfg) {
    const int n = static_cast<int>(g_levels.size()) - 1;
    ValueField<D> h;
    h.grid = grid;
    h.dt = dt;
    h.levels.assign(static_cast<std::size_t>(n) + 1, {});
    h.at(n) = terminal_level(grid, spec, g_levels[static_cast<std::size_t>(n)]);
    for (int k = n - 1; k >= 0; --k)
        h.at(k) = hjb_backward_step(grid, h.at(k + 1), g_levels[static_cast<std::size_t>(k)], spec,
                                    flags, h.time_of(k), dt, cfg.cfl_limit, cfg.llf_factor);
    return h;
}

/// Forward transport sweep under h; the velocity at each level uses the
/// evolving density itself for the nonlocal couplings.
template <int D>
DensityField<D> transport_solve_forward(const Grid<D>& grid, const ModelSpec& spec,
                                        const RegimeFlags& flags, const std::vector<double>& g0,
                                        const ValueField<D>& h, double dt,
                                        const FixedPointConfig& cfg) {
    DensityField<D> g;
    g.grid = grid;
    g.dt = dt;
    g.levels.assign(h.levels.size(), {});
    g.at(0) = g0;
    for (int k = 0; k + 1 < h.n_levels(); ++k) {
        const auto v = velocity_field(grid, h.at(k), g.at(k), spec, flags, h.time_of(k));
        g.at(k + 1) = transport_forward_step(grid, g.at(k), v, dt, cfg.cfl_limit);
    }
    return g;
}

}  // namespace pde

/// Damped Picard iteration on the coupled system. The g-residual is the
/// fixed-point defect of the transport output against the density iterate it
/// was computed from, so a decoupled system converges in one iteration; the
/// h-residual compares consecutive h iterates (reported 0 on the first).
template <int D>
MFGSolution<D> solve_mfg_fixed_point(const Grid<D>& grid, const ModelSpec& spec,
                                     const RegimeFlags& flags, const std::vector<double>& g0,
                                     const FixedPointConfig& cfg) {
    spec.validate();
    grid.validate();
    if (!(cfg.damping > 0.0 && cfg.damping <= 1.0))
        throw domain_error("solve_mfg_fixed_point: damping must be in (0,1]");
    {
        double mass = 0.0;
        for (double v : g0) mass += v;
        if (std::abs(mass * grid.cell_volume() - 1.0) > 1e-8)
            throw domain_error("solve_mfg_fixed_point: g0 must have unit mass");
    }
    const double dt = spec.horizon / cfg.time_steps;
    const double cell = grid.cell_volume();

    MFGSolution<D> sol;
    // iterate levels: constant-in-time extension of g0
    std::vector<std::vector<double>> g_levels(static_cast<std::size_t>(cfg.time_steps) + 1, g0);

    for (int it = 1; it <= cfg.max_iter; ++it) {
        ValueField<D> h = pde::hjb_solve_backward(grid, spec, flags, g_levels, dt, cfg);
        DensityField<D> g_tilde =
            pde::transport_solve_forward(grid, spec, flags, g0, h, dt, cfg);

        double r_g = 0.0;
        for (int k = 0; k <= cfg.time_steps; ++k) {
            double l1 = 0.0;
            const auto& a = g_tilde.at(k);
            const auto& b = g_levels[static_cast<std::size_t>(k)];
            for (std::size_t i = 0; i < a.size(); ++i) l1 += std::abs(a[i] - b[i]);
            r_g = std::max(r_g, l1 * cell);
        }
        double r_h = 0.0;
        if (it > 1) {
            for (int k = 0; k < h.n_levels(); ++k) {
                const auto& a = h.at(k);
                const auto& b = sol.h.at(k);
                for (std::size_t i = 0; i < a.size(); ++i)
                    r_h = std::max(r_h, std::abs(a[i] - b[i]));
            }
        }
        sol.h = std::move(h);
        sol.residuals.push_back({static_cast<double>(it), r_h, r_g});
        sol.iterations = it;

        if (r_g <= cfg.tol && (it == 1 || r_h <= cfg.tol)) {
            sol.g = std::move(g_tilde);
            sol.converged = true;
            break;
        }
        if (it == cfg.max_iter) {
            sol.g = std::move(g_tilde);
            break;  // non-convergence is reported, not thrown
        }
        for (int k = 0; k <= cfg.time_steps; ++k) {
            auto& b = g_levels[static_cast<std::size_t>(k)];
            const auto& a = g_tilde.at(k);
            for (std::size_t i = 0; i < b.size(); ++i)
                b[i] = (1.0 - cfg.damping) * b[i] + cfg.damping * a[i];
        }
    }
    return sol;
}

/// Audit helper: worst mass defect and minimum density over all levels.
template <int D>
std::pair<double, double> density_audit(const DensityField<D>& g) {
    double worst_mass = 0.0, min_g = 0.0;
    for (int k = 0; k < g.n_levels(); ++k) {
        worst_mass = std::max(worst_mass, g.mass_defect(k));
        min_g = std::min(min_g, g.min_value(k));
    }
    return {worst_mass, min_g};
}

}  // namespace mfg
