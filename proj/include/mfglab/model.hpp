#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mfglab/common.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// Moment polynomial  Phi(x) = sum_{|j| <= n} beta_j prod_k (x^k)^{j_k}
// ---------------------------------------------------------------------------

struct MomentTerm {
    std::array<int, kMaxDim> index{};  // multi-index j, one entry per dimension
    double coeff = 0.0;                // beta_j
};

class MomentPolynomial {
public:
    MomentPolynomial(int dim, int degree, std::vector<MomentTerm> terms)
        : dim_(dim), degree_(degree), terms_(std::move(terms)) {
        if (dim < 1 || dim > kMaxDim) throw domain_error("MomentPolynomial: bad dimension");
        for (const auto& t : terms_) {
            int total = 0;
            for (int k = 0; k < dim_; ++k) {
                if (t.index[k] < 0) throw domain_error("MomentPolynomial: negative exponent");
                total += t.index[k];
            }
            if (total > degree_) throw domain_error("MomentPolynomial: term degree exceeds n");
        }
    }

    /// Phi(x) = x^1, the first-coordinate mean moment.
    static MomentPolynomial mean(int dim) {
        MomentTerm t;
        t.index[0] = 1;
        t.coeff = 1.0;
        return MomentPolynomial(dim, 1, {t});
    }

    double operator()(const Vec& x) const {
        double s = 0.0;
        for (const auto& t : terms_) {
            double m = t.coeff;
            for (int k = 0; k < dim_; ++k)
                for (int e = 0; e < t.index[k]; ++e) m *= x[k];
            s += m;
        }
        return s;
    }

    Vec gradient(const Vec& x) const {
        Vec g(dim_);
        for (const auto& t : terms_) {
            for (int k = 0; k < dim_; ++k) {
                if (t.index[k] == 0) continue;
                double m = t.coeff * t.index[k];
                for (int j = 0; j < dim_; ++j) {
                    int e = t.index[j] - (j == k ? 1 : 0);
                    for (int r = 0; r < e; ++r) m *= x[j];
                }
                g[k] += m;
            }
        }
        return g;
    }

    int dimension() const { return dim_; }
    int degree() const { return degree_; }
    const std::vector<MomentTerm>& terms() const { return terms_; }

    /// True when Phi is exactly the first-coordinate mean x^1.
    bool is_first_coordinate() const {
        if (terms_.size() != 1) return false;
        const auto& t = terms_[0];
        if (t.coeff != 1.0 || t.index[0] != 1) return false;
        for (int k = 1; k < dim_; ++k)
            if (t.index[k] != 0) return false;
        return true;
    }

private:
    int dim_;
    int degree_;
    std::vector<MomentTerm> terms_;
};

// ---------------------------------------------------------------------------
// Symmetric game data (Assumptions 1-3)
// ---------------------------------------------------------------------------

using VectorFn = std::function<Vec(double t, const Vec& x, double rho)>;
using ScalarFn = std::function<double(double t, const Vec& x, double rho)>;
using TerminalFn = std::function<double(const Vec& x, double rho)>;

/// The defining functions and weights of the symmetric N-player game:
/// drift f, self gain m_hat, cross gain m_bar, running cost l, terminal
/// payoff p, moment polynomial Phi, control-cost weights alpha_hat/alpha_bar.
struct ModelSpec {
    int dimension = 1;
    double horizon = 1.0;
    VectorFn drift;
    VectorFn self_gain;
    VectorFn cross_gain;
    ScalarFn running_cost;
    TerminalFn terminal_payoff;
    MomentPolynomial moment_poly = MomentPolynomial::mean(1);
    double self_weight = 1.0;   // alpha_hat > 0
    double cross_weight = 0.0;  // alpha_bar >= 0

    void validate() const {
        if (dimension < 1 || dimension > kMaxDim) throw domain_error("ModelSpec: bad dimension");
        if (!(horizon > 0.0)) throw domain_error("ModelSpec: horizon must be positive");
        if (!(self_weight > 0.0)) throw domain_error("ModelSpec: alpha_hat must be > 0");
        if (cross_weight < 0.0) throw domain_error("ModelSpec: alpha_bar must be >= 0");
        if (!drift || !self_gain || !cross_gain || !running_cost || !terminal_payoff)
            throw domain_error("ModelSpec: missing function");
        if (moment_poly.dimension() != dimension)
            throw domain_error("ModelSpec: moment polynomial dimension mismatch");
    }
};

/// Sampled Lipschitz check of Assumption 3: draws `pairs` random pairs
/// within the box and tests |f(t,x,rho)-f(t,x',rho')| <= L(|x-x'|+|rho-rho'|)
/// for every model function. `uniform` maps a counter to U[0,1).
bool lipschitz_sample_check(const ModelSpec& spec, const Vec& box_min, const Vec& box_max,
                            double lipschitz, int pairs,
                            const std::function<double(std::uint64_t)>& uniform);

// ---------------------------------------------------------------------------
// Scaling exponents and regime classification (Assumption 4, Lemma on scalings)
// ---------------------------------------------------------------------------

struct ScalingExponents {
    double a_hat = 0.0;      // alpha_hat ~ N^-a_hat,  a_hat >= 0
    double theta_hat = 0.0;  // m_hat ~ N^-theta_hat,  theta_hat >= 0
    double a_bar = 1.0;      // alpha_bar ~ N^-a_bar,  a_bar >= 1
    double theta_bar = 1.0;  // m_bar ~ N^-theta_bar,  theta_bar >= 1

    ScalingExponents(double ah, double th, double ab, double tb)
        : a_hat(ah), theta_hat(th), a_bar(ab), theta_bar(tb) {
        if (a_hat < 0.0 || theta_hat < 0.0)
            throw domain_error("ScalingExponents: a_hat and theta_hat must be >= 0");
        if (a_bar < 1.0 || theta_bar < 1.0)
            throw domain_error("ScalingExponents: a_bar and theta_bar must be >= 1");
    }
};

enum class Regime { vanishing, classical, nonlocal, mixed, invalid };

inline std::string regime_name(Regime r) {
    switch (r) {
        case Regime::vanishing: return "vanishing";
        case Regime::classical: return "classical";
        case Regime::nonlocal: return "non-local";
        case Regime::mixed: return "mixed";
        case Regime::invalid: return "invalid";
    }
    return "invalid";
}

/// eta signs decide which coupling terms survive the mean-field limit;
/// chi_i = (eta_i == 0) are the indicator switches of the limit system.
struct RegimeFlags {
    double eta1 = 0.0, eta2 = 0.0, eta3 = 0.0;
    bool chi1 = false, chi2 = false, chi3 = false;
    bool valid = false;
    Regime regime = Regime::invalid;
};

/// (eta1, eta2, eta3) = (a^ - 2 th^,  a^ + 1 - th^ - th-,  2 a^ + 1 - 2 th^ - a-).
inline std::array<double, 3> eta_values(const ScalingExponents& e) {
    return {e.a_hat - 2.0 * e.theta_hat,
            e.a_hat + 1.0 - e.theta_hat - e.theta_bar,
            2.0 * e.a_hat + 1.0 - 2.0 * e.theta_hat - e.a_bar};
}

inline RegimeFlags classify_regime(const ScalingExponents& e) {
    const auto eta = eta_values(e);
    RegimeFlags f;
    f.eta1 = eta[0];
    f.eta2 = eta[1];
    f.eta3 = eta[2];
    // Exponents come from user-declared rationals, so equality is exact.
    f.chi1 = (f.eta1 == 0.0);
    f.chi2 = (f.eta2 == 0.0);
    f.chi3 = (f.eta3 == 0.0);
    f.valid = (f.eta1 <= 0.0 && f.eta2 <= 0.0 && f.eta3 <= 0.0);
    if (!f.valid)
        f.regime = Regime::invalid;
    else if (f.eta1 < 0.0 && f.eta2 < 0.0 && f.eta3 < 0.0)
        f.regime = Regime::vanishing;
    else if (f.chi1 && f.eta2 < 0.0 && f.eta3 < 0.0)
        f.regime = Regime::classical;
    else if (f.chi2 || f.chi3)
        f.regime = Regime::nonlocal;
    else
        f.regime = Regime::mixed;
    return f;
}

/// Copy of `spec` with m_hat/N^theta_hat, m_bar/N^theta_bar, alpha_hat/N^a_hat,
/// alpha_bar/N^a_bar. N = 1 is the identity.
inline ModelSpec scaled_coefficients(const ModelSpec& spec, const ScalingExponents& e, int agents) {
    if (agents < 1) throw domain_error("scaled_coefficients: N must be >= 1");
    const double n = static_cast<double>(agents);
    const double s_mhat = std::pow(n, -e.theta_hat);
    const double s_mbar = std::pow(n, -e.theta_bar);
    ModelSpec out = spec;
    out.self_weight = spec.self_weight * std::pow(n, -e.a_hat);
    out.cross_weight = spec.cross_weight * std::pow(n, -e.a_bar);
    out.self_gain = [inner = spec.self_gain, s_mhat](double t, const Vec& x, double rho) {
        return inner(t, x, rho) * s_mhat;
    };
    out.cross_gain = [inner = spec.cross_gain, s_mbar](double t, const Vec& x, double rho) {
        return inner(t, x, rho) * s_mbar;
    };
    return out;
}

inline bool lipschitz_sample_check(const ModelSpec& spec, const Vec& box_min, const Vec& box_max,
                                   double lipschitz, int pairs,
                                   const std::function<double(std::uint64_t)>& uniform) {
    spec.validate();
    const int d = spec.dimension;
    std::uint64_t ctr = 0;
    auto draw_point = [&](Vec& x) {
        for (int k = 0; k < d; ++k) x[k] = box_min[k] + (box_max[k] - box_min[k]) * uniform(ctr++);
    };
    // rho sampled over the Phi-range of the box corners plus margin
    double rho_lo = spec.moment_poly(box_min), rho_hi = spec.moment_poly(box_max);
    if (rho_lo > rho_hi) std::swap(rho_lo, rho_hi);
    for (int p = 0; p < pairs; ++p) {
        Vec x(d), y(d);
        draw_point(x);
        draw_point(y);
        const double rx = rho_lo + (rho_hi - rho_lo) * uniform(ctr++);
        const double ry = rho_lo + (rho_hi - rho_lo) * uniform(ctr++);
        const double t = spec.horizon * uniform(ctr++);
        double dist = std::abs(rx - ry);
        for (int k = 0; k < d; ++k) dist += std::abs(x[k] - y[k]);
        const double bound = lipschitz * dist + 1e-12;
        auto vec_gap = [&](const VectorFn& fn) {
            Vec a = fn(t, x, rx), b = fn(t, y, ry);
            double g = 0.0;
            for (int k = 0; k < d; ++k) g += std::abs(a[k] - b[k]);
            return g;
        };
        if (vec_gap(spec.drift) > bound) return false;
        if (vec_gap(spec.self_gain) > bound) return false;
        if (vec_gap(spec.cross_gain) > bound) return false;
        if (std::abs(spec.running_cost(t, x, rx) - spec.running_cost(t, y, ry)) > bound) return false;
        if (std::abs(spec.terminal_payoff(x, rx) - spec.terminal_payoff(y, ry)) > bound) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Built-in function forms (configs can only reference these)
// ---------------------------------------------------------------------------

/// constant: value
inline ScalarFn make_constant(double value) {
    return [value](double, const Vec&, double) { return value; };
}

/// affine: c0 + sum_k cx_k x_k + c_rho rho + c_t t
inline ScalarFn make_affine(double c0, std::vector<double> cx, double c_rho, double c_t) {
    return [=](double t, const Vec& x, double rho) {
        double s = c0 + c_rho * rho + c_t * t;
        for (std::size_t k = 0; k < cx.size() && static_cast<int>(k) < x.size(); ++k)
            s += cx[k] * x[static_cast<int>(k)];
        return s;
    };
}

/// quadratic: 0.5 * scale * (sum_k w_k x_k + w_rho rho - center)^2
inline ScalarFn make_quadratic(double scale, std::vector<double> w, double w_rho, double center) {
    return [=](double t, const Vec& x, double rho) {
        (void)t;
        double s = w_rho * rho - center;
        for (std::size_t k = 0; k < w.size() && static_cast<int>(k) < x.size(); ++k)
            s += w[k] * x[static_cast<int>(k)];
        return 0.5 * scale * s * s;
    };
}

inline TerminalFn as_terminal(const ScalarFn& fn) {
    return [fn](const Vec& x, double rho) { return fn(0.0, x, rho); };
}

/// Per-component scalar forms assembled into a vector-valued function.
inline VectorFn make_vector_fn(std::vector<ScalarFn> components) {
    return [comps = std::move(components)](double t, const Vec& x, double rho) {
        Vec out(static_cast<int>(comps.size()));
        for (std::size_t k = 0; k < comps.size(); ++k) out[static_cast<int>(k)] = comps[k](t, x, rho);
        return out;
    };
}

}  // namespace mfg
