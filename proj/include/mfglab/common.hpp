#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace mfg {

/// Base class for all library errors.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Precondition or argument violation (empty ensemble, bad exponent, ...).
struct domain_error : error {
    using error::error;
};

/// Malformed or inconsistent configuration input.
struct config_error : error {
    using error::error;
};

/// CFL violation, gradient blow-up, non-finite state, domain escape.
struct instability_error : error {
    using error::error;
};

/// Filesystem failures while emitting run artifacts.
struct io_error : error {
    using error::error;
};

/// Per-agent state vector with inline storage. The micro game runs in
/// d <= kMaxDim dimensions (the market model needs d = 2).
inline constexpr int kMaxDim = 4;

struct Vec {
    std::array<double, kMaxDim> v{};
    int n = 0;

    Vec() = default;
    explicit Vec(int dim) : n(dim) {
        if (dim < 0 || dim > kMaxDim) throw domain_error("Vec: dimension out of range");
    }
    Vec(std::initializer_list<double> xs) {
        if (static_cast<int>(xs.size()) > kMaxDim) throw domain_error("Vec: dimension out of range");
        for (double x : xs) v[n++] = x;
    }

    int size() const { return n; }
    double& operator[](int i) { return v[static_cast<std::size_t>(i)]; }
    double operator[](int i) const { return v[static_cast<std::size_t>(i)]; }

    Vec& operator+=(const Vec& o) {
        for (int i = 0; i < n; ++i) v[i] += o.v[i];
        return *this;
    }
    Vec& operator*=(double s) {
        for (int i = 0; i < n; ++i) v[i] *= s;
        return *this;
    }
    friend Vec operator+(Vec a, const Vec& b) { return a += b; }
    friend Vec operator*(double s, Vec a) { return a *= s; }
    friend Vec operator*(Vec a, double s) { return a *= s; }

    friend double dot(const Vec& a, const Vec& b) {
        double s = 0.0;
        for (int i = 0; i < a.n; ++i) s += a.v[i] * b.v[i];
        return s;
    }
    friend double norm1(const Vec& a) {
        double s = 0.0;
        for (int i = 0; i < a.n; ++i) s += std::abs(a.v[i]);
        return s;
    }
    bool finite() const {
        for (int i = 0; i < n; ++i)
            if (!std::isfinite(v[i])) return false;
        return true;
    }
};

/// 17 significant digits: round-trip exact for IEEE doubles, '.' decimal.
inline std::string g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline bool approx_eq(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace mfg
