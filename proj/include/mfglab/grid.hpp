#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <tuple>
#include <utility>
#include <vector>

#include "mfglab/common.hpp"

namespace mfg {

/// Uniform cell-centered tensor grid in D dimensions (D = 1 or 2 here).
template <int D>
struct Grid {
    std::array<double, D> lo{};
    std::array<double, D> hi{};
    std::array<int, D> cells{};

    void validate() const {
        for (int k = 0; k < D; ++k) {
            if (!(hi[k] > lo[k])) throw domain_error("Grid: empty extent");
            if (cells[k] < 16) throw domain_error("Grid: needs at least 16 cells per dimension");
        }
    }

    double spacing(int k) const { return (hi[k] - lo[k]) / cells[k]; }

    double cell_volume() const {
        double v = 1.0;
        for (int k = 0; k < D; ++k) v *= spacing(k);
        return v;
    }

    std::size_t size() const {
        std::size_t n = 1;
        for (int k = 0; k < D; ++k) n *= static_cast<std::size_t>(cells[k]);
        return n;
    }

    // flattened index: last dimension fastest
    std::size_t flat(const std::array<int, D>& idx) const {
        std::size_t f = 0;
        for (int k = 0; k < D; ++k) f = f * static_cast<std::size_t>(cells[k]) + static_cast<std::size_t>(idx[k]);
        return f;
    }

    std::array<int, D> unflat(std::size_t f) const {
        std::array<int, D> idx{};
        for (int k = D - 1; k >= 0; --k) {
            idx[k] = static_cast<int>(f % static_cast<std::size_t>(cells[k]));
            f /= static_cast<std::size_t>(cells[k]);
        }
        return idx;
    }

    double center(int k, int i) const { return lo[k] + (i + 0.5) * spacing(k); }

    Vec center_vec(std::size_t f) const {
        const auto idx = unflat(f);
        Vec x(D);
        for (int k = 0; k < D; ++k) x[k] = center(k, idx[k]);
        return x;
    }
};

struct Grid1D : Grid<1> {
    Grid1D() = default;
    Grid1D(double x_min, double x_max, int n) { lo[0] = x_min, hi[0] = x_max, cells[0] = n; }
    double x_min() const { return lo[0]; }
    double x_max() const { return hi[0]; }
    int n_cells() const { return cells[0]; }
    double dx() const { return spacing(0); }
    double center(int i) const { return Grid<1>::center(0, i); }
};

using Grid2D = Grid<2>;

// ---------------------------------------------------------------------------
// Multilinear interpolation and central-difference gradients on cell centers
// ---------------------------------------------------------------------------

namespace detail {

/// Clamped cell-center coordinate: returns (index, fraction) for dimension k.
template <int D>
inline std::pair<int, double> locate(const Grid<D>& g, int k, double x) {
    const double dxk = g.spacing(k);
    double s = (x - g.lo[k]) / dxk - 0.5;  // position in center units
    if (s <= 0.0) return {0, 0.0};
    if (s >= g.cells[k] - 1) return {g.cells[k] - 2 >= 0 ? g.cells[k] - 2 : 0, 1.0};
    const int i = static_cast<int>(s);
    return {i, s - i};
}

}  // namespace detail

/// Multilinear interpolation of cell-center values; clamps outside the box.
template <int D>
double interpolate(const Grid<D>& g, const std::vector<double>& v, const Vec& x) {
    if constexpr (D == 1) {
        auto [i, f] = detail::locate(g, 0, x[0]);
        if (g.cells[0] == 1) return v[0];
        return (1.0 - f) * v[static_cast<std::size_t>(i)] + f * v[static_cast<std::size_t>(i + 1)];
    } else {
        auto [i, fi] = detail::locate(g, 0, x[0]);
        auto [j, fj] = detail::locate(g, 1, x[1]);
        const auto n1 = static_cast<std::size_t>(g.cells[1]);
        auto at = [&](int a, int b) { return v[static_cast<std::size_t>(a) * n1 + static_cast<std::size_t>(b)]; };
        const double v00 = at(i, j), v01 = at(i, j + 1), v10 = at(i + 1, j), v11 = at(i + 1, j + 1);
        return (1.0 - fi) * ((1.0 - fj) * v00 + fj * v01) + fi * ((1.0 - fj) * v10 + fj * v11);
    }
}

/// Central differences in dimension k, one-sided at the box boundary.
template <int D>
std::vector<double> gradient_component(const Grid<D>& g, const std::vector<double>& v, int k) {
    std::vector<double> out(v.size());
    const double dxk = g.spacing(k);
    std::size_t stride = 1;
    for (int d = k + 1; d < D; ++d) stride *= static_cast<std::size_t>(g.cells[d]);
    const std::size_t nk = static_cast<std::size_t>(g.cells[k]);
    const std::size_t total = g.size();
    for (std::size_t f = 0; f < total; ++f) {
        const std::size_t ik = (f / stride) % nk;
        if (nk == 1) {
            out[f] = 0.0;
        } else if (ik == 0) {
            out[f] = (v[f + stride] - v[f]) / dxk;
        } else if (ik == nk - 1) {
            out[f] = (v[f] - v[f - stride]) / dxk;
        } else {
            out[f] = (v[f + stride] - v[f - stride]) / (2.0 * dxk);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Time-level fields of the limit system
// ---------------------------------------------------------------------------

/// Grid function per uniform time level t_k = k*dt, k = 0..n_steps.
template <int D>
struct TimeField {
    Grid<D> grid;
    double dt = 0.0;
    std::vector<std::vector<double>> levels;  // levels[k] over flattened cells

    int n_levels() const { return static_cast<int>(levels.size()); }
    double time_of(int k) const { return k * dt; }
    double final_time() const { return (n_levels() - 1) * dt; }

    const std::vector<double>& at(int k) const { return levels[static_cast<std::size_t>(k)]; }
    std::vector<double>& at(int k) { return levels[static_cast<std::size_t>(k)]; }

    /// Level pair bracketing time t with the interpolation weight.
    std::tuple<int, int, double> bracket(double t) const {
        const int last = n_levels() - 1;
        double s = t / dt;
        if (s <= 0.0) return {0, 0, 0.0};
        if (s >= last) return {last, last, 0.0};
        const int k = static_cast<int>(s);
        return {k, k + 1, s - k};
    }

    double value(double t, const Vec& x) const {
        auto [k0, k1, w] = bracket(t);
        const double a = interpolate(grid, at(k0), x);
        if (k1 == k0) return a;
        return (1.0 - w) * a + w * interpolate(grid, at(k1), x);
    }
};

/// h(t,x): value function of the limit system.
template <int D>
using ValueField = TimeField<D>;

/// g(t,x): nonnegative, unit mass at every level.
template <int D>
struct DensityField : TimeField<D> {
    /// |sum g dx - 1| at level k.
    double mass_defect(int k) const {
        double m = 0.0;
        for (double v : this->at(k)) m += v;
        return std::abs(m * this->grid.cell_volume() - 1.0);
    }
    double min_value(int k) const {
        double m = this->at(k).empty() ? 0.0 : this->at(k)[0];
        for (double v : this->at(k)) m = std::min(m, v);
        return m;
    }
};

using ValueField1D = ValueField<1>;
using DensityField1D = DensityField<1>;

}  // namespace mfg
