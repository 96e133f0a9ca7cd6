// Coordinate transforms, label encoding, cell-midpoint baseline localization,
// and error/gain metrics.  Everything here works in the platform-centered
// frame: +x north, +y east, +z up, azimuth measured from north toward east,
// elevation positive above the local horizontal.
#pragma once

#include "staploc/common.hpp"

#include <algorithm>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace staploc::localize {

inline Vec3 sph_to_cart(double range_m, double az_deg, double el_deg) {
    const double az = deg2rad(az_deg);
    const double el = deg2rad(el_deg);
    return {range_m * std::cos(el) * std::cos(az),
            range_m * std::cos(el) * std::sin(az),
            range_m * std::sin(el)};
}

// Axis-aligned Cartesian hull of a spherical search box, used to normalize
// labels.  Exact per-axis extremes via interval arithmetic on the separable
// factors r*cos(el)*cos(az), r*cos(el)*sin(az), r*sin(el).
struct BoundingBox {
    Vec3 lo{0, 0, 0};
    Vec3 hi{0, 0, 0};
};

namespace detail {

struct Interval {
    double lo, hi;
};

inline Interval mul(Interval a, Interval b) {
    const double c[4] = {a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi};
    return {*std::min_element(c, c + 4), *std::max_element(c, c + 4)};
}

// Range of sin over [a, b] radians (assumes b - a < 2*pi).
inline Interval sin_range(double a, double b) {
    double lo = std::min(std::sin(a), std::sin(b));
    double hi = std::max(std::sin(a), std::sin(b));
    // Interior critical points at pi/2 + 2k*pi (max) and -pi/2 + 2k*pi (min).
    const double two_pi = 2.0 * kPi;
    double peak = kPi / 2.0 + std::floor((a - kPi / 2.0) / two_pi + 1.0) * two_pi;
    if (peak >= a && peak <= b) hi = 1.0;
    double trough = -kPi / 2.0 + std::floor((a + kPi / 2.0) / two_pi + 1.0) * two_pi;
    if (trough >= a && trough <= b) lo = -1.0;
    return {lo, hi};
}

inline Interval cos_range(double a, double b) { return sin_range(a + kPi / 2.0, b + kPi / 2.0); }

}  // namespace detail

inline BoundingBox spherical_box_hull(double r_lo, double r_hi, double az_lo_deg, double az_hi_deg,
                                      double el_lo_deg, double el_hi_deg) {
    if (!(r_lo <= r_hi && az_lo_deg <= az_hi_deg && el_lo_deg <= el_hi_deg))
        throw std::invalid_argument("spherical_box_hull: bounds out of order");
    const detail::Interval r{r_lo, r_hi};
    const detail::Interval caz = detail::cos_range(deg2rad(az_lo_deg), deg2rad(az_hi_deg));
    const detail::Interval saz = detail::sin_range(deg2rad(az_lo_deg), deg2rad(az_hi_deg));
    const detail::Interval cel = detail::cos_range(deg2rad(el_lo_deg), deg2rad(el_hi_deg));
    const detail::Interval sel = detail::sin_range(deg2rad(el_lo_deg), deg2rad(el_hi_deg));
    const detail::Interval x = detail::mul(detail::mul(r, cel), caz);
    const detail::Interval y = detail::mul(detail::mul(r, cel), saz);
    const detail::Interval z = detail::mul(r, sel);
    BoundingBox box;
    box.lo = {x.lo, y.lo, z.lo};
    box.hi = {x.hi, y.hi, z.hi};
    return box;
}

// Affine map box -> [-1,1]^3.  Degenerate axes get a tiny synthetic width so
// the map stays invertible.
inline Vec3 encode_label(const Vec3& p, const BoundingBox& box) {
    static constexpr const char* kAxis[3] = {"x", "y", "z"};
    Vec3 out;
    for (int a = 0; a < 3; ++a) {
        const double mid = 0.5 * (box.lo[a] + box.hi[a]);
        double half = 0.5 * (box.hi[a] - box.lo[a]);
        if (half < 1e-12) half = 1e-12;
        const double slack = 1e-9 * std::max(1.0, half);
        if (p[a] < box.lo[a] - slack || p[a] > box.hi[a] + slack)
            throw std::invalid_argument(std::string("encode_label: ") + kAxis[a] +
                                        " coordinate outside the label box");
        out[a] = (p[a] - mid) / half;
    }
    return out;
}

inline Vec3 decode_label(const Vec3& e, const BoundingBox& box) {
    Vec3 out;
    for (int a = 0; a < 3; ++a) {
        const double mid = 0.5 * (box.lo[a] + box.hi[a]);
        double half = 0.5 * (box.hi[a] - box.lo[a]);
        if (half < 1e-12) half = 1e-12;
        out[a] = mid + e[a] * half;
    }
    return out;
}

// Geometry of a heatmap tensor: the grid points ARE the cell midpoints.
struct GridSpec {
    double first_range_mid = 0.0;  // slant-range midpoint of the first bin, m
    double range_step = 0.0;       // bin depth, m
    int n_bins = 0;
    double az0_deg = 0.0;  // first azimuth grid point
    double az_step_deg = 0.0;
    int n_az = 0;
    double el0_deg = 0.0;  // first elevation grid point
    double el_step_deg = 0.0;
    int n_el = 0;

    int cells() const { return n_bins * n_az * n_el; }
    // Flattened index layout: bin-major, then azimuth, then elevation.
    int flat(int bin, int iaz, int jel) const { return (bin * n_az + iaz) * n_el + jel; }
};

// Argmax cell -> Cartesian midpoint.  Ties resolve to the lowest flattened
// index so results do not depend on traversal order.
inline Vec3 peak_cell_midpoint(const float* values, const GridSpec& g) {
    const int n = g.cells();
    if (n <= 0) throw std::invalid_argument("peak_cell_midpoint: empty grid");
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (values[i] > values[best]) best = i;
    const int bin = best / (g.n_az * g.n_el);
    const int rem = best % (g.n_az * g.n_el);
    const int iaz = rem / g.n_el;
    const int jel = rem % g.n_el;
    return sph_to_cart(g.first_range_mid + bin * g.range_step, g.az0_deg + iaz * g.az_step_deg,
                       g.el0_deg + jel * g.el_step_deg);
}

inline double avg_euclidean_error(const std::vector<Vec3>& predicted,
                                  const std::vector<Vec3>& truth) {
    if (predicted.empty()) throw std::invalid_argument("avg_euclidean_error: empty input");
    if (predicted.size() != truth.size())
        throw std::invalid_argument("avg_euclidean_error: size mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) sum += (predicted[i] - truth[i]).norm();
    return sum / static_cast<double>(predicted.size());
}

// gain > 1 means the learned localizer beats the cell-midpoint baseline.
inline double gain(double err_baseline, double err_model) {
    if (err_baseline < 0.0 || err_model < 0.0) throw std::invalid_argument("gain: negative error");
    if (err_model == 0.0) return std::numeric_limits<double>::infinity();
    return err_baseline / err_model;
}

}  // namespace staploc::localize
