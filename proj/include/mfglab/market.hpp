#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "mfglab/common.hpp"
#include "mfglab/micro.hpp"
#include "mfglab/model.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// Financial market with endogenous price S = lambda * mean risky holding.
// The implicit stock ODE (I - P) xdot = kappa D / (lambda mean x) x + u with
// rank-one P = kappa x e^T / (e^T x) is made explicit through the Neumann
// closed form, giving xdot_i = (c1 + c2 mean u) x_i / mean x + u_i.
// ---------------------------------------------------------------------------

struct MarketParams {
    double kappa = 0.5;      // transaction-cost factor, in (0,1)
    double lambda = 0.5;     // market depth, in (0,1]
    double r = 0.0;          // bond interest rate, >= 0
    double dividend = 0.1;   // D > 0
    double alpha_hat = 1.0;  // control cost weight, > 0
    double horizon = 1.0;

    void validate() const {
        if (!(kappa > 0.0 && kappa < 1.0))
            throw domain_error("MarketParams: kappa must lie strictly inside (0,1)");
        if (!(lambda > 0.0 && lambda <= 1.0))
            throw domain_error("MarketParams: lambda must lie in (0,1]");
        if (r < 0.0) throw domain_error("MarketParams: r must be >= 0");
        if (!(dividend > 0.0)) throw domain_error("MarketParams: dividend must be > 0");
        if (!(alpha_hat > 0.0)) throw domain_error("MarketParams: alpha_hat must be > 0");
        if (!(horizon > 0.0)) throw domain_error("MarketParams: horizon must be > 0");
    }
};

/// Risky and riskless books per agent; wealth w_i = x_i + y_i.
struct PortfolioEnsemble {
    std::vector<double> risky;     // x_i >= 0
    std::vector<double> riskless;  // y_i >= 0
    double time = 0.0;

    std::size_t size() const { return risky.size(); }

    double mean_risky() const {
        double s = 0.0;
        for (double x : risky) s += x;
        return s / static_cast<double>(risky.size());
    }
    double mean_riskless() const {
        double s = 0.0;
        for (double y : riskless) s += y;
        return s / static_cast<double>(riskless.size());
    }

    void validate() const {
        if (risky.empty() || risky.size() != riskless.size())
            throw domain_error("PortfolioEnsemble: empty or mismatched books");
        for (std::size_t i = 0; i < risky.size(); ++i)
            if (risky[i] < 0.0 || riskless[i] < 0.0)
                throw domain_error("PortfolioEnsemble: negative holding");
        if (!(mean_risky() > 0.0))
            throw domain_error("PortfolioEnsemble: mean risky holding must be positive");
    }
};

/// S = lambda * (1/N) sum x_k.
inline double price(const PortfolioEnsemble& ens, double lambda) {
    if (ens.risky.empty()) throw domain_error("price: empty ensemble");
    return lambda * ens.mean_risky();
}

/// c1 = (1 + kappa/(1-kappa)) kappa D / lambda,  c2 = kappa/(1-kappa).
inline std::pair<double, double> market_constants(const MarketParams& p) {
    if (!(p.kappa > 0.0 && p.kappa < 1.0))
        throw domain_error("market_constants: kappa must lie strictly inside (0,1)");
    const double c2 = p.kappa / (1.0 - p.kappa);
    const double c1 = (1.0 + c2) * p.kappa * p.dividend / p.lambda;
    return {c1, c2};
}

/// Sigma^{-1} rhs for Sigma = I - kappa x e^T / (e^T x), via the closed form
/// Sigma^{-1} = I + (kappa/(1-kappa)) x e^T / (e^T x). One dot product and
/// one scaled vector add: O(N).
inline std::vector<double> rank_one_inverse_apply(const std::vector<double>& x, double kappa,
                                                  const std::vector<double>& rhs) {
    if (!(kappa > 0.0 && kappa < 1.0))
        throw domain_error("rank_one_inverse_apply: kappa must lie strictly inside (0,1)");
    if (x.size() != rhs.size()) throw domain_error("rank_one_inverse_apply: size mismatch");
    double ex = 0.0, erhs = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) ex += x[i], erhs += rhs[i];
    if (ex == 0.0) throw domain_error("rank_one_inverse_apply: e^T x = 0 (degenerate price)");
    const double scale = kappa / (1.0 - kappa) * erhs / ex;
    std::vector<double> out(rhs);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] += scale * x[i];
    return out;
}

/// Explicit per-agent drift: xdot_i = (c1 + c2 mean u) x_i / mean x + u_i,
/// ydot_i = r y_i - u_i.
inline std::pair<std::vector<double>, std::vector<double>> explicit_market_drift(
    const PortfolioEnsemble& ens, const std::vector<double>& u, const MarketParams& p) {
    const std::size_t n = ens.size();
    if (u.size() != n) throw domain_error("explicit_market_drift: control size mismatch");
    const double mean_x = ens.mean_risky();
    if (!(mean_x > 0.0))
        throw domain_error("explicit_market_drift: zero mean risky holding (degenerate)");
    const auto [c1, c2] = market_constants(p);
    double mean_u = 0.0;
    for (double ui : u) mean_u += ui;
    mean_u /= static_cast<double>(n);
    std::vector<double> xdot(n), ydot(n);
    const double coef = (c1 + c2 * mean_u) / mean_x;
    for (std::size_t i = 0; i < n; ++i) {
        xdot[i] = coef * ens.risky[i] + u[i];
        ydot[i] = p.r * ens.riskless[i] - u[i];
    }
    return {xdot, ydot};
}

// ---------------------------------------------------------------------------
// ModelSpec adapters for the mean-field limits
// ---------------------------------------------------------------------------

struct MarketLimit {
    ModelSpec spec;
    ScalingExponents exps;
};

/// 2-D limit data of the market Lemma: f = (c1 x/rho, r y), m_hat = (1,-1)
/// (the O(1/N) self-gain correction is dropped), m_bar = (c2 x/rho, 0) with
/// theta_bar = 1, alpha_bar = 0, p = 0. Phi must be the first-coordinate mean.
inline MarketLimit market_model_spec(const MarketParams& params, ScalarFn objective,
                                     const MomentPolynomial& phi) {
    params.validate();
    if (!phi.is_first_coordinate())
        throw domain_error("market_model_spec: Phi must be the first-coordinate mean");
    const auto [c1, c2] = market_constants(params);
    ModelSpec spec;
    spec.dimension = 2;
    spec.horizon = params.horizon;
    spec.moment_poly = phi;
    spec.self_weight = params.alpha_hat;
    spec.cross_weight = 0.0;
    spec.drift = [c1, r = params.r](double, const Vec& x, double rho) {
        return Vec{c1 * x[0] / rho, r * x[1]};
    };
    spec.self_gain = [](double, const Vec&, double) { return Vec{1.0, -1.0}; };
    spec.cross_gain = [c2](double, const Vec& x, double rho) {
        return Vec{c2 * x[0] / rho, 0.0};
    };
    spec.running_cost = std::move(objective);
    spec.terminal_payoff = [](const Vec&, double) { return 0.0; };
    // alpha_bar = 0: a_bar = 2 keeps eta3 < 0 so chi3 is inactive, matching
    // the absent cross-cost term of the limit system.
    return {std::move(spec), ScalingExponents(0.0, 0.0, 2.0, 1.0)};
}

/// Simplified y = 0 model: 1-D spec with f = c1 x/rho, m_hat = 1,
/// m_bar = c2 x/rho (theta_bar = 1). r plays no role.
inline ModelSpec simplified_market_spec(const MarketParams& params, ScalarFn objective,
                                        const MomentPolynomial& phi) {
    params.validate();
    if (!phi.is_first_coordinate())
        throw domain_error("simplified_market_spec: Phi must be the first-coordinate mean");
    const auto [c1, c2] = market_constants(params);
    ModelSpec spec;
    spec.dimension = 1;
    spec.horizon = params.horizon;
    spec.moment_poly = phi;
    spec.self_weight = params.alpha_hat;
    spec.cross_weight = 0.0;
    spec.drift = [c1](double, const Vec& x, double rho) { return Vec{c1 * x[0] / rho}; };
    spec.self_gain = [](double, const Vec&, double) { return Vec{1.0}; };
    spec.cross_gain = [c2](double, const Vec& x, double rho) { return Vec{c2 * x[0] / rho}; };
    spec.running_cost = std::move(objective);
    spec.terminal_payoff = [](const Vec&, double) { return 0.0; };
    return spec;
}

/// Default experiment objective when the config leaves l unspecified:
/// track the mean holding, l = (x - rho)^2 / 2.
inline ScalarFn market_default_objective() {
    return [](double, const Vec& x, double rho) {
        const double d = x[0] - rho;
        return 0.5 * d * d;
    };
}

// ---------------------------------------------------------------------------
// Microscopic market simulation
// ---------------------------------------------------------------------------

/// Per-agent control source for the market run. `grad` supplies dh/dx (1-D
/// simplified limit) or (dh/dx, dh/dy) (2-D); null means u = 0. The
/// microscopic self-gain keeps the O(1/N) correction c2 x /(rho N).
struct MarketControl {
    GradientSource grad;   // may be empty: frozen market
    int limit_dim = 1;     // 1 = simplified y=0 limit, 2 = full (x,y) limit
};

struct MarketStepRecord {
    double time = 0.0;
    double stock_price = 0.0;
    double mean_risky = 0.0;
    double mean_riskless = 0.0;
    long clamp_count = 0;  // cumulative projections onto x,y >= 0
};

struct MarketTrajectory {
    std::vector<MarketStepRecord> series;
    std::vector<PortfolioEnsemble> snapshots;  // at configured intervals
};

inline MarketTrajectory simulate_market(const MarketParams& params, int agents,
                                        const PortfolioEnsemble& ens0, double dt,
                                        const MarketControl& control, int snapshot_stride = 0) {
    params.validate();
    ens0.validate();
    if (static_cast<int>(ens0.size()) != agents)
        throw domain_error("simulate_market: ensemble size != N");
    const auto [c1, c2] = market_constants(params);
    (void)c1;
    const int steps = std::max(1, static_cast<int>(std::lround(params.horizon / dt)));
    const double step = params.horizon / steps;
    const double inv_a = 1.0 / params.alpha_hat;
    const double n = static_cast<double>(agents);

    MarketTrajectory out;
    out.series.reserve(static_cast<std::size_t>(steps) + 1);
    PortfolioEnsemble ens = ens0;
    ens.time = 0.0;
    long clamps = 0;

    auto record = [&](const PortfolioEnsemble& e) {
        out.series.push_back({e.time, price(e, params.lambda), e.mean_risky(), e.mean_riskless(),
                              clamps});
    };
    record(ens);
    if (snapshot_stride > 0) out.snapshots.push_back(ens);

    std::vector<double> u(static_cast<std::size_t>(agents), 0.0);
    for (int k = 0; k < steps; ++k) {
        const double t = k * step;
        const double rho = ens.mean_risky();
        if (control.grad) {
            for (int i = 0; i < agents; ++i) {
                const double x = ens.risky[static_cast<std::size_t>(i)];
                const double y = ens.riskless[static_cast<std::size_t>(i)];
                // microscopic m_hat: (1 + c2 x/(rho N), -1)
                const double mhat_x = 1.0 + c2 * x / (rho * n);
                if (control.limit_dim == 1) {
                    const Vec g = control.grad(t, Vec{x}, rho);
                    u[static_cast<std::size_t>(i)] = inv_a * mhat_x * g[0];
                } else {
                    const Vec g = control.grad(t, Vec{x, y}, rho);
                    u[static_cast<std::size_t>(i)] = inv_a * (mhat_x * g[0] - g[1]);
                }
            }
        }
        const auto [xdot, ydot] = explicit_market_drift(ens, u, params);
        ens.time = (k + 1) * step;
        for (int i = 0; i < agents; ++i) {
            const auto s = static_cast<std::size_t>(i);
            double xn = ens.risky[s] + step * xdot[s];
            double yn = ens.riskless[s] + step * ydot[s];
            if (xn < 0.0) {
                xn = 0.0;
                ++clamps;
            }
            if (yn < 0.0) {
                yn = 0.0;
                ++clamps;
            }
            if (!std::isfinite(xn) || !std::isfinite(yn))
                throw instability_error("simulate_market: non-finite holding");
            ens.risky[s] = xn;
            ens.riskless[s] = yn;
        }
        record(ens);
        if (snapshot_stride > 0 && ((k + 1) % snapshot_stride == 0 || k + 1 == steps))
            out.snapshots.push_back(ens);
    }
    return out;
}

}  // namespace mfg
