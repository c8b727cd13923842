#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mfglab/common.hpp"
#include "mfglab/empirical.hpp"
#include "mfglab/grid.hpp"
#include "mfglab/model.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// Optimal control
// ---------------------------------------------------------------------------

/// u* = (1/alpha_hat) m_hat(t, x_i, rho) . gradW  (the unique maximizer of
/// omega -> lambda . m_hat omega - alpha_hat omega^2 / 2).
inline double optimal_control(const ModelSpec& spec, double t, const Vec& x_i, double rho,
                              const Vec& grad_w) {
    if (spec.self_weight == 0.0) throw domain_error("optimal_control: degenerate cost alpha_hat = 0");
    return dot(spec.self_gain(t, x_i, rho), grad_w) / spec.self_weight;
}

// ---------------------------------------------------------------------------
// Reduced symmetric Bellman solver: W(tau, x, rho) on an (x, rho) grid, d = 1
// ---------------------------------------------------------------------------

struct ReducedSolverConfig {
    Grid1D x_grid;
    double rho_min = 0.0, rho_max = 1.0;
    int rho_cells = 33;
    double dtau = 1e-3;
    int store_stride = 1;       // keep every k-th level for later interpolation
    double gradient_cap = 1e6;  // |dW/dx| above this signals instability
    double extrap_margin = 2.0; // cells of clamped extrapolation beyond the box
};

/// Helper for the rho-grid bounds: [min_box Phi, max_box Phi] with 10% margin.
inline std::pair<double, double> suggested_rho_range(const MomentPolynomial& phi, double x_min,
                                                     double x_max, int probes = 257) {
    double lo = 0.0, hi = 0.0;
    for (int i = 0; i < probes; ++i) {
        const double x = x_min + (x_max - x_min) * i / (probes - 1);
        const double v = phi(Vec{x});
        if (i == 0) lo = hi = v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double margin = 0.1 * std::max(hi - lo, 1e-12);
    return {lo - margin, hi + margin};
}

/// Backward-in-time table of the averaged Bellman value W(tau_k, x, rho).
class ReducedValueTable {
public:
    ReducedValueTable(Grid1D xg, double rho_min, double rho_max, int rho_cells, double dtau,
                      int levels, int store_stride)
        : xg_(xg), rho_min_(rho_min), rho_max_(rho_max), nrho_(rho_cells), dtau_(dtau) {
        if (rho_cells < 2) throw domain_error("ReducedValueTable: needs at least 2 rho nodes");
        // stored level indices: every stride-th plus the final level
        for (int k = 0; k < levels; k += store_stride) stored_.push_back(k);
        if (stored_.empty() || stored_.back() != levels - 1) stored_.push_back(levels - 1);
        values_.assign(stored_.size(), std::vector<double>());
        grads_.assign(stored_.size(), std::vector<double>());
    }

    const Grid1D& x_grid() const { return xg_; }
    double rho_min() const { return rho_min_; }
    double rho_max() const { return rho_max_; }
    int rho_cells() const { return nrho_; }
    double dtau() const { return dtau_; }
    double drho() const { return (rho_max_ - rho_min_) / (nrho_ - 1); }
    double rho_node(int j) const { return rho_min_ + j * drho(); }
    int n_stored() const { return static_cast<int>(stored_.size()); }
    double stored_time(int s) const { return stored_[static_cast<std::size_t>(s)] * dtau_; }

    std::size_t node(int i, int j) const {
        return static_cast<std::size_t>(i) * static_cast<std::size_t>(nrho_) +
               static_cast<std::size_t>(j);
    }

    /// Bilinear value at (x, rho) on stored level s.
    double value_on_level(int s, double x, double rho) const {
        return bilinear(values_[static_cast<std::size_t>(s)], x, rho);
    }

    /// W at arbitrary (t, x, rho): linear in t between stored levels.
    double value(double t, double x, double rho) const {
        auto [s0, s1, w] = bracket(t);
        const double a = value_on_level(s0, x, rho);
        return s1 == s0 ? a : (1.0 - w) * a + w * value_on_level(s1, x, rho);
    }

    /// dW/dx at arbitrary (t, x, rho) from the per-level central-difference field.
    double grad_x(double t, double x, double rho) const {
        auto [s0, s1, w] = bracket(t);
        const double a = bilinear(grads_[static_cast<std::size_t>(s0)], x, rho);
        return s1 == s0 ? a : (1.0 - w) * a + w * bilinear(grads_[static_cast<std::size_t>(s1)], x, rho);
    }

    // solver-facing storage hooks
    void store(int level_index, std::vector<double> w, std::vector<double> dwdx) {
        for (std::size_t s = 0; s < stored_.size(); ++s) {
            if (stored_[s] == level_index) {
                values_[s] = std::move(w);
                grads_[s] = std::move(dwdx);
                return;
            }
        }
    }
    bool wants_level(int level_index) const {
        return std::find(stored_.begin(), stored_.end(), level_index) != stored_.end();
    }

private:
    std::tuple<int, int, double> bracket(double t) const {
        const int last = n_stored() - 1;
        if (t <= stored_time(0)) return {0, 0, 0.0};
        if (t >= stored_time(last)) return {last, last, 0.0};
        int s = 0;
        while (s + 1 <= last && stored_time(s + 1) < t) ++s;
        const double t0 = stored_time(s), t1 = stored_time(s + 1);
        return {s, s + 1, (t - t0) / (t1 - t0)};
    }

    double bilinear(const std::vector<double>& v, double x, double rho) const {
        const double dx = xg_.dx();
        double sx = (x - xg_.x_min()) / dx - 0.5;
        sx = std::clamp(sx, 0.0, static_cast<double>(xg_.n_cells() - 1));
        const int i = std::min(static_cast<int>(sx), xg_.n_cells() - 2);
        const double fx = sx - i;
        double sr = (rho - rho_min_) / drho();
        sr = std::clamp(sr, 0.0, static_cast<double>(nrho_ - 1));
        const int j = std::min(static_cast<int>(sr), nrho_ - 2);
        const double fr = sr - j;
        const double v00 = v[node(i, j)], v01 = v[node(i, j + 1)];
        const double v10 = v[node(i + 1, j)], v11 = v[node(i + 1, j + 1)];
        return (1.0 - fx) * ((1.0 - fr) * v00 + fr * v01) + fx * ((1.0 - fr) * v10 + fr * v11);
    }

    Grid1D xg_;
    double rho_min_, rho_max_;
    int nrho_;
    double dtau_;
    std::vector<int> stored_;
    std::vector<std::vector<double>> values_;
    std::vector<std::vector<double>> grads_;
};

/// Backward sweep of the averaged Bellman system on the (x, rho) grid.
///
/// Per node: u* from the gradient of the next level; the field control (the
/// sum over the other agents) is closed by evaluating u* at the position
/// whose mean-moment equals rho — interpolation weights at the moment point,
/// exact for affine control fields with Phi = identity; x+ and rho+ follow
/// the one-step Euler state update; the new value interpolates the next
/// level at (x+, rho+) minus the one-step running cost.
inline ReducedValueTable bellman_backward_reduced(const ModelSpec& base, const ScalingExponents& exps,
                                                  int agents, const ReducedSolverConfig& cfg) {
    base.validate();
    if (base.dimension != 1)
        throw domain_error("bellman_backward_reduced: only d = 1 tables are supported");
    if (agents < 2) throw domain_error("bellman_backward_reduced: N must be >= 2");
    const ModelSpec spec = scaled_coefficients(base, exps, agents);
    const double nm1 = static_cast<double>(agents - 1);

    const int steps = std::max(1, static_cast<int>(std::lround(base.horizon / cfg.dtau)));
    const double dtau = base.horizon / steps;
    const Grid1D& xg = cfg.x_grid;
    const int nx = xg.n_cells(), nr = cfg.rho_cells;
    const double dx = xg.dx();
    const double drho = (cfg.rho_max - cfg.rho_min) / (nr - 1);

    ReducedValueTable table(xg, cfg.rho_min, cfg.rho_max, nr, dtau, steps + 1, cfg.store_stride);

    auto rho_at = [&](int j) { return cfg.rho_min + j * drho; };
    auto idx = [&](int i, int j) { return table.node(i, j); };

    // terminal level: W(T, x, rho) = p(x, rho)
    std::vector<double> w(static_cast<std::size_t>(nx) * static_cast<std::size_t>(nr));
    for (int i = 0; i < nx; ++i)
        for (int j = 0; j < nr; ++j)
            w[idx(i, j)] = base.terminal_payoff(Vec{xg.center(i)}, rho_at(j));

    auto gradient_of = [&](const std::vector<double>& level) {
        std::vector<double> g(level.size());
        for (int j = 0; j < nr; ++j) {
            for (int i = 0; i < nx; ++i) {
                double d;
                if (i == 0)
                    d = (level[idx(1, j)] - level[idx(0, j)]) / dx;
                else if (i == nx - 1)
                    d = (level[idx(nx - 1, j)] - level[idx(nx - 2, j)]) / dx;
                else
                    d = (level[idx(i + 1, j)] - level[idx(i - 1, j)]) / (2.0 * dx);
                g[idx(i, j)] = d;
            }
        }
        return g;
    };

    std::vector<double> dwdx = gradient_of(w);
    if (table.wants_level(steps)) table.store(steps, w, dwdx);

    const double x_margin = cfg.extrap_margin * dx;

    for (int k = steps - 1; k >= 0; --k) {
        const double tau = k * dtau;
        std::vector<double> w_new(w.size());

        // field control per rho row: u* interpolated at the moment position
        std::vector<double> u_field(static_cast<std::size_t>(nr));
        std::vector<double> v_field(static_cast<std::size_t>(nr));
        for (int j = 0; j < nr; ++j) {
            const double rho = rho_at(j);
            const double xr = std::clamp(rho, xg.x_min(), xg.x_max());
            // interpolate dW/dx of the next level along x at fixed rho row
            double s = (xr - xg.x_min()) / dx - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(nx - 1));
            const int i0 = std::min(static_cast<int>(s), nx - 2);
            const double f = s - i0;
            const double gx = (1.0 - f) * dwdx[idx(i0, j)] + f * dwdx[idx(i0 + 1, j)];
            const Vec xv{xr};
            const double uf = optimal_control(spec, tau, xv, rho, Vec{gx});
            u_field[static_cast<std::size_t>(j)] = uf;
            // representative velocity of the field for the rho update
            const double vf = spec.drift(tau, xv, rho)[0] +
                              spec.self_gain(tau, xv, rho)[0] * uf +
                              spec.cross_gain(tau, xv, rho)[0] * nm1 * uf;
            v_field[static_cast<std::size_t>(j)] = vf;
        }

        double max_speed_x = 0.0, max_speed_r = 0.0;
        for (int i = 0; i < nx; ++i) {
            const double x = xg.center(i);
            const Vec xv{x};
            for (int j = 0; j < nr; ++j) {
                const double rho = rho_at(j);
                const double gx = dwdx[idx(i, j)];
                if (std::abs(gx) > cfg.gradient_cap)
                    throw instability_error("bellman_backward_reduced: gradient blow-up at x=" +
                                            g17(x));
                const double u = optimal_control(spec, tau, xv, rho, Vec{gx});
                const double uf = u_field[static_cast<std::size_t>(j)];
                const double xdot = spec.drift(tau, xv, rho)[0] +
                                    spec.self_gain(tau, xv, rho)[0] * u +
                                    spec.cross_gain(tau, xv, rho)[0] * nm1 * uf;
                const double rdot =
                    base.moment_poly.gradient(Vec{std::clamp(rho, xg.x_min(), xg.x_max())})[0] *
                    v_field[static_cast<std::size_t>(j)];
                max_speed_x = std::max(max_speed_x, std::abs(xdot));
                max_speed_r = std::max(max_speed_r, std::abs(rdot));

                const double x_plus = x + dtau * xdot;
                if (x_plus < xg.x_min() - x_margin || x_plus > xg.x_max() + x_margin)
                    throw instability_error(
                        "bellman_backward_reduced: x+ left the domain box (domain too small), x+=" +
                        g17(x_plus));
                const double rho_plus = rho + dtau * rdot;

                const double cost = spec.running_cost(tau, xv, rho) +
                                    0.5 * spec.self_weight * u * u +
                                    0.5 * spec.cross_weight * nm1 * uf * uf;
                // clamped bilinear lookup of the next level at (x+, rho+)
                double sx = (std::clamp(x_plus, xg.x_min(), xg.x_max()) - xg.x_min()) / dx - 0.5;
                sx = std::clamp(sx, 0.0, static_cast<double>(nx - 1));
                const int ii = std::min(static_cast<int>(sx), nx - 2);
                const double fx = sx - ii;
                double sr = (std::clamp(rho_plus, cfg.rho_min, cfg.rho_max) - cfg.rho_min) / drho;
                sr = std::clamp(sr, 0.0, static_cast<double>(nr - 1));
                const int jj = std::min(static_cast<int>(sr), nr - 2);
                const double fr = sr - jj;
                const double wnext =
                    (1.0 - fx) * ((1.0 - fr) * w[idx(ii, jj)] + fr * w[idx(ii, jj + 1)]) +
                    fx * ((1.0 - fr) * w[idx(ii + 1, jj)] + fr * w[idx(ii + 1, jj + 1)]);

                const double val = wnext - dtau * cost;
                if (!std::isfinite(val))
                    throw instability_error("bellman_backward_reduced: non-finite value");
                w_new[idx(i, j)] = val;
            }
        }

        // stability bound re-estimated each backward step
        if (dtau > 0.5 * dx / std::max(max_speed_x, 1e-300) ||
            dtau > 0.5 * drho / std::max(max_speed_r, 1e-300)) {
            if (max_speed_x * dtau > 0.5 * dx)
                throw instability_error("bellman_backward_reduced: dtau " + g17(dtau) +
                                        " violates 0.5 dx / max speed with max speed " +
                                        g17(max_speed_x));
            throw instability_error("bellman_backward_reduced: dtau " + g17(dtau) +
                                    " violates 0.5 drho / max rho-speed with max rho-speed " +
                                    g17(max_speed_r));
        }

        w = std::move(w_new);
        dwdx = gradient_of(w);
        if (table.wants_level(k)) table.store(k, w, dwdx);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Full coupled one-step system at sampled configurations (the Corollary oracle)
// ---------------------------------------------------------------------------

/// Shared smooth terminal condition w(x, rho) with analytic derivatives;
/// the full system reads it as V_i(y) = w(y_i, rho^{N-1}_{Phi,i}(y)).
struct SharedTerminal {
    std::function<double(const Vec&, double)> w;
    std::function<Vec(const Vec&, double)> dw_dx;
    std::function<double(const Vec&, double)> dw_drho;
};

struct FullValueState {
    // per configuration: per-agent one-step values and controls
    std::vector<std::vector<double>> values;
    std::vector<std::vector<double>> controls;
};

inline constexpr int kFullSolverCap = 16;  // N*d cap for grid-free evaluation

/// One backward step of the full coupled dynamic-programming system,
/// evaluated exactly (no grid) at the given joint configurations.
inline FullValueState bellman_one_step_full(const ModelSpec& base, const ScalingExponents& exps,
                                            int agents, const SharedTerminal& terminal,
                                            const std::vector<std::vector<Vec>>& configs,
                                            double dtau) {
    base.validate();
    if (agents < 2) throw domain_error("bellman_one_step_full: N must be >= 2");
    if (agents * base.dimension > kFullSolverCap)
        throw domain_error("bellman_one_step_full: N*d exceeds the evaluation cap");
    const ModelSpec spec = scaled_coefficients(base, exps, agents);
    const MomentPolynomial& phi = base.moment_poly;
    const int d = base.dimension;
    const double tau = 0.0;

    FullValueState out;
    out.values.reserve(configs.size());
    out.controls.reserve(configs.size());

    for (const auto& y : configs) {
        const int n = static_cast<int>(y.size());
        if (n != agents) throw domain_error("bellman_one_step_full: configuration size mismatch");
        ParticleEnsemble ens{y, 0.0};
        const double rho_n = empirical_moment(phi, ens);
        std::vector<double> rho_loo(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            rho_loo[static_cast<std::size_t>(i)] =
                leave_one_out_moment(phi, ens, static_cast<std::size_t>(i));

        // u*_i = (1/a^)[ m^(y_i) . dV_i/dx_i + sum_{k != i} m-(y_k) . dV_i/dx_k ]
        // with dV_i/dx_k = dw/drho (y_i, rho_i) grad Phi(y_k) / (N-1)
        std::vector<double> u(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double rho_i = rho_loo[static_cast<std::size_t>(i)];
            const Vec grad_self = terminal.dw_dx(y[static_cast<std::size_t>(i)], rho_i);
            double s = dot(spec.self_gain(tau, y[static_cast<std::size_t>(i)], rho_n), grad_self);
            const double dwr = terminal.dw_drho(y[static_cast<std::size_t>(i)], rho_i);
            for (int k = 0; k < n; ++k) {
                if (k == i) continue;
                const Vec mb = spec.cross_gain(tau, y[static_cast<std::size_t>(k)], rho_n);
                const Vec gphi = phi.gradient(y[static_cast<std::size_t>(k)]);
                s += dot(mb, gphi) * dwr / static_cast<double>(n - 1);
            }
            u[static_cast<std::size_t>(i)] = s / spec.self_weight;
        }

        double u_sum = 0.0, usq_sum = 0.0;
        for (double ui : u) u_sum += ui, usq_sum += ui * ui;

        // moved configuration
        std::vector<Vec> y_plus(y.size(), Vec(d));
        for (int i = 0; i < n; ++i) {
            const Vec& yi = y[static_cast<std::size_t>(i)];
            const double ui = u[static_cast<std::size_t>(i)];
            const Vec f = spec.drift(tau, yi, rho_n);
            const Vec mh = spec.self_gain(tau, yi, rho_n);
            const Vec mb = spec.cross_gain(tau, yi, rho_n);
            const double cross = u_sum - ui;
            Vec xp(d);
            for (int c = 0; c < d; ++c) xp[c] = yi[c] + dtau * (f[c] + mh[c] * ui + mb[c] * cross);
            y_plus[static_cast<std::size_t>(i)] = xp;
        }
        ParticleEnsemble moved{y_plus, dtau};

        std::vector<double> v(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double ui = u[static_cast<std::size_t>(i)];
            const double cross_sq = usq_sum - ui * ui;
            const double cost = spec.running_cost(tau, y[static_cast<std::size_t>(i)], rho_n) +
                                0.5 * spec.self_weight * ui * ui +
                                0.5 * spec.cross_weight * cross_sq;
            const double rho_i_plus = leave_one_out_moment(phi, moved, static_cast<std::size_t>(i));
            v[static_cast<std::size_t>(i)] =
                terminal.w(y_plus[static_cast<std::size_t>(i)], rho_i_plus) - dtau * cost;
        }
        out.values.push_back(std::move(v));
        out.controls.push_back(std::move(u));
    }
    return out;
}

/// max over configurations of | <V_i>_N - <W(y_i, rho^{N-1}_i)>_N | after one
/// shared backward step from `terminal`.
inline double reduction_error(const ModelSpec& base, const ScalingExponents& exps, int agents,
                              double dtau, const std::vector<std::vector<Vec>>& configs,
                              const ReducedSolverConfig& cfg) {
    if (base.dimension != 1) throw domain_error("reduction_error: d = 1 only");
    // shared terminal: the reduced solver reads it from terminal_payoff
    ModelSpec one_step = base;
    one_step.horizon = dtau;
    SharedTerminal terminal{
        [&base](const Vec& x, double rho) { return base.terminal_payoff(x, rho); },
        {},
        {}};
    // derivatives by central finite differences of the shared terminal
    const double eps = 1e-6;
    terminal.dw_dx = [&base, eps](const Vec& x, double rho) {
        Vec g(x.size());
        for (int c = 0; c < x.size(); ++c) {
            Vec a = x, b = x;
            a[c] += eps;
            b[c] -= eps;
            g[c] = (base.terminal_payoff(a, rho) - base.terminal_payoff(b, rho)) / (2.0 * eps);
        }
        return g;
    };
    terminal.dw_drho = [&base, eps](const Vec& x, double rho) {
        return (base.terminal_payoff(x, rho + eps) - base.terminal_payoff(x, rho - eps)) /
               (2.0 * eps);
    };

    ReducedSolverConfig rc = cfg;
    rc.dtau = dtau;
    const ReducedValueTable table = bellman_backward_reduced(one_step, exps, agents, rc);
    const FullValueState full = bellman_one_step_full(one_step, exps, agents, terminal, configs, dtau);

    double worst = 0.0;
    for (std::size_t c = 0; c < configs.size(); ++c) {
        const auto& y = configs[c];
        ParticleEnsemble ens{y, 0.0};
        double avg_full = 0.0, avg_red = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            avg_full += full.values[c][i];
            const double rho_i = leave_one_out_moment(base.moment_poly, ens, i);
            avg_red += table.value(0.0, y[i][0], rho_i);
        }
        const double n = static_cast<double>(y.size());
        worst = std::max(worst, std::abs(avg_full / n - avg_red / n));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Feedback forward simulation (the particle flow of the mean-field limit)
// ---------------------------------------------------------------------------

/// Gradient source for the control: reduced table or PDE value field.
using GradientSource = std::function<Vec(double t, const Vec& x, double rho)>;

inline GradientSource gradient_from_table(const ReducedValueTable& table) {
    return [&table](double t, const Vec& x, double rho) {
        return Vec{table.grad_x(t, x[0], rho)};
    };
}

template <int D>
GradientSource gradient_from_field(const ValueField<D>& h) {
    // per-level gradient arrays, computed once
    struct Cache {
        std::vector<std::array<std::vector<double>, D>> levels;
    };
    auto cache = std::make_shared<Cache>();
    cache->levels.reserve(h.levels.size());
    for (const auto& lv : h.levels) {
        std::array<std::vector<double>, D> g;
        for (int k = 0; k < D; ++k) g[k] = gradient_component(h.grid, lv, k);
        cache->levels.push_back(std::move(g));
    }
    return [&h, cache](double t, const Vec& x, double /*rho*/) {
        auto [k0, k1, wgt] = h.bracket(t);
        Vec g(D);
        for (int c = 0; c < D; ++c) {
            const double a = interpolate(h.grid, cache->levels[static_cast<std::size_t>(k0)][c], x);
            g[c] = k1 == k0
                       ? a
                       : (1.0 - wgt) * a +
                             wgt * interpolate(h.grid, cache->levels[static_cast<std::size_t>(k1)][c], x);
        }
        return g;
    };
}

struct Trajectory {
    std::vector<double> times;
    std::vector<ParticleEnsemble> snapshots;
    std::vector<std::vector<double>> controls;  // per step, per agent
};

/// Explicit first-order particle flow: each agent moves with
/// f + m_hat u_i + m_bar (1/N) sum_{k != i} u_k, u_k = optimal control from
/// the gradient source. The cross sum is shared: O(N) per step.
inline Trajectory simulate_forward(const ModelSpec& base, const ScalingExponents& exps, int agents,
                                   const GradientSource& grad_w, const ParticleEnsemble& ens0,
                                   double dt, const Vec& box_min, const Vec& box_max,
                                   double box_margin = 0.5) {
    base.validate();
    if (static_cast<int>(ens0.size()) != agents)
        throw domain_error("simulate_forward: ensemble size != N");
    const ModelSpec spec = scaled_coefficients(base, exps, agents);
    const int d = base.dimension;
    const int steps = std::max(1, static_cast<int>(std::lround(base.horizon / dt)));
    const double step = base.horizon / steps;

    Trajectory traj;
    traj.times.reserve(static_cast<std::size_t>(steps) + 1);
    traj.snapshots.reserve(static_cast<std::size_t>(steps) + 1);
    ParticleEnsemble ens = ens0;
    ens.time = 0.0;
    traj.times.push_back(0.0);
    traj.snapshots.push_back(ens);

    std::vector<double> u(static_cast<std::size_t>(agents));
    for (int k = 0; k < steps; ++k) {
        const double t = k * step;
        const double rho = empirical_moment(base.moment_poly, ens);
        double u_sum = 0.0;
        for (int i = 0; i < agents; ++i) {
            const Vec& z = ens.states[static_cast<std::size_t>(i)];
            const Vec g = grad_w(t, z, rho);
            const double ui = optimal_control(spec, t, z, rho, g);
            u[static_cast<std::size_t>(i)] = ui;
            u_sum += ui;
        }
        ParticleEnsemble next = ens;
        next.time = (k + 1) * step;
        for (int i = 0; i < agents; ++i) {
            const Vec& z = ens.states[static_cast<std::size_t>(i)];
            const double ui = u[static_cast<std::size_t>(i)];
            const Vec f = spec.drift(t, z, rho);
            const Vec mh = spec.self_gain(t, z, rho);
            const Vec mb = spec.cross_gain(t, z, rho);
            const double cross_sum = u_sum - ui;  // sum over k != i, shared
            Vec& zn = next.states[static_cast<std::size_t>(i)];
            for (int c = 0; c < d; ++c) {
                zn[c] = z[c] + step * (f[c] + mh[c] * ui + mb[c] * cross_sum);
                if (!std::isfinite(zn[c]))
                    throw instability_error("simulate_forward: non-finite state");
                if (zn[c] < box_min[c] - box_margin || zn[c] > box_max[c] + box_margin)
                    throw instability_error(
                        "simulate_forward: particle escaped the domain box (domain too small)");
            }
        }
        traj.controls.push_back(u);
        ens = std::move(next);
        traj.times.push_back(ens.time);
        traj.snapshots.push_back(ens);
    }
    return traj;
}

}  // namespace mfg
