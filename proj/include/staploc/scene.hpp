// Synthetic radar scene generation: scenario geometry, world-fixed clutter
// patch fields, array steering, target sampling, and per-bin return matrices.
//
// Frames: world coordinates are local ENU-style (x north, y east, z up) with
// the ground plane at z = 0.  Per-scenario spherical coordinates (range,
// azimuth, elevation) are measured from that scenario's platform position,
// azimuth from north toward east.
#pragma once

#include "staploc/common.hpp"
#include "staploc/localize.hpp"

#include <optional>
#include <string>
#include <vector>

namespace staploc::scene {

struct ArrayGeometry {
    int num_channels = 16;            // L condensed subarray channels
    double element_spacing_m = 0.015;  // lambda/2 element pitch
    double wavelength_m = 0.03;        // 10 GHz carrier
    int subarray_factor = 3;           // elements condensed per channel

    double subarray_spacing_m() const { return subarray_factor * element_spacing_m; }

    void validate() const {
        if (num_channels < 1) throw ConfigError("geometry.num_channels must be >= 1");
        if (element_spacing_m <= 0.0) throw ConfigError("geometry.element_spacing must be > 0");
        if (wavelength_m <= 0.0) throw ConfigError("geometry.wavelength must be > 0");
        if (subarray_factor < 1) throw ConfigError("geometry.subarray_factor must be >= 1");
    }
};

// Knobs for the world-fixed clutter field.  Margins extend the patch field
// beyond the original constrained area so displaced platforms still see
// populated bins after re-binning.
struct ClutterParams {
    double cnr_db = 30.0;            // per-channel clutter-to-noise ratio, mean over bins
    double range_margin_m = 1300.0;  // extra slant-range coverage on each side
    double az_margin_deg = 5.0;      // extra azimuth coverage on each side
    double patch_range_step_m = 30.0;
    double patch_az_step_deg = 0.4;
    double texture_sigma_db = 9.0;        // log-normal texture spread
    double texture_corr_m = 80.0;         // correlation length across the line of sight
    double texture_corr_range_m = 600.0;  // correlation length along the line of sight
    int texture_features = 320;           // random Fourier features for the field
};

struct ScenarioConfig {
    Vec3 platform_position{0.0, 0.0, 1000.0};  // world (north, east, up), m
    double standoff_m = -1.0;  // G; negative means "derive from first_bin"
    int first_bin = 51;        // P, absolute index of the first constrained bin
    double r_min_m = 14553.0;  // midpoint of bin P
    double r_max_m = 14673.0;  // midpoint of bin P + num_bins - 1
    double az_min_deg = 20.0;
    double az_max_deg = 30.0;
    double el_min_deg = -4.1;
    double el_max_deg = -3.9;
    double range_res_m = 30.0;  // bin depth
    double az_res_deg = 0.4;
    double el_res_deg = 0.01;
    int num_bins = 5;        // kappa
    double rcs_mean = 1.0;   // mu
    double rcs_range = 1.0;  // l, sigma ~ U(mu - l/2, mu + l/2)
    double noise_power = 1.0;
    std::uint64_t clutter_seed = 1;
    int num_realizations = 100;  // K
    ClutterParams clutter;
};

struct ClutterPatch {
    Vec3 position{0, 0, 0};  // world, on the ground plane
    double power = 0.0;      // mean reflectivity power
};

struct TargetTruth {
    double range_m = 0.0;
    double az_deg = 0.0;
    double el_deg = 0.0;
    double rcs = 1.0;
    int range_bin = 0;        // absolute bin index rho-hat
    Vec3 cartesian{0, 0, 0};  // platform-centered Cartesian position
};

// Per-bin matched-filtered data matrices (L x K).  combined = target +
// clutter + noise exactly; reference is an independent clutter-plus-noise
// draw for the same bin.
struct RangeBinData {
    int bin_index = 0;
    CMat target;    // X
    CMat clutter;   // C
    CMat noise;     // N
    CMat combined;  // Y
    CMat reference; // Z
};

namespace detail {

inline int checked_steps(double span, double step, const char* what) {
    if (step <= 0.0) throw ConfigError(std::string(what) + ": resolution must be > 0");
    const int n = static_cast<int>(std::llround(span / step));
    if (n < 0 || std::abs(span - n * step) > 1e-6 * step)
        throw ConfigError(std::string(what) + ": resolution does not tile the window");
    return n;
}

// Stationary unit-variance Gaussian random field on the ground plane via
// random Fourier features; exponentiated into a mean-one log-normal texture.
// The correlation kernel is anisotropic: texture_corr_range_m along the
// bearing axis (the origin platform's line of sight) and texture_corr_m
// across it, in world coordinates shared by every displaced observer.
struct TextureField {
    std::vector<double> kx, ky, phase;
    double amplitude = 0.0;
    double scale_ln = 0.0;  // sigma_dB in natural-log units
    double mean_fix = 1.0;

    static TextureField build(std::uint64_t seed, const ClutterParams& p, double bearing_rad) {
        TextureField f;
        const int F = std::max(1, p.texture_features);
        const double cb = std::cos(bearing_rad), sb = std::sin(bearing_rad);
        Rng rng(seed);
        f.kx.resize(F);
        f.ky.resize(F);
        f.phase.resize(F);
        for (int i = 0; i < F; ++i) {
            const double k_along = rng.normal() / p.texture_corr_range_m;
            const double k_across = rng.normal() / p.texture_corr_m;
            f.kx[i] = k_along * cb - k_across * sb;
            f.ky[i] = k_along * sb + k_across * cb;
            f.phase[i] = rng.uniform(0.0, 2.0 * kPi);
        }
        f.amplitude = std::sqrt(2.0 / F);
        f.scale_ln = p.texture_sigma_db * std::numbers::ln10 / 10.0;
        f.mean_fix = std::exp(-0.5 * f.scale_ln * f.scale_ln);
        return f;
    }

    double factor(double x, double y) const {
        double g = 0.0;
        for (std::size_t i = 0; i < kx.size(); ++i)
            g += std::cos(kx[i] * x + ky[i] * y + phase[i]);
        return std::exp(scale_ln * amplitude * g) * mean_fix;
    }
};

}  // namespace detail

struct Scenario {
    ScenarioConfig config;
    ArrayGeometry geometry;
    std::string tag = "O";
    double standoff_m = 0.0;          // G, grid origin offset for this platform
    int first_bin = 0;                // P
    double boresight_az_deg = 0.0;    // array spotlight azimuth (toward region center)
    Vec3 region_center_world{0, 0, 0};  // ground anchor shared across displacements
    std::vector<ClutterPatch> patches;

    int num_bins() const { return config.num_bins; }
    double bin_midpoint_m(int i) const { return config.r_min_m + i * config.range_res_m; }
    double range_lo_edge_m() const { return config.r_min_m - 0.5 * config.range_res_m; }
    double range_hi_edge_m() const {
        return config.r_max_m + 0.5 * config.range_res_m;
    }
    int n_az() const {
        return detail::checked_steps(config.az_max_deg - config.az_min_deg, config.az_res_deg,
                                     "azimuth window") + 1;
    }
    int n_el() const {
        return detail::checked_steps(config.el_max_deg - config.el_min_deg, config.el_res_deg,
                                     "elevation window") + 1;
    }

    // Absolute bin index of a slant range; may fall outside [P, P + kappa).
    int bin_of(double range_m) const {
        return static_cast<int>(std::floor((range_m - standoff_m) / config.range_res_m));
    }

    localize::GridSpec grid_spec() const {
        localize::GridSpec g;
        g.first_range_mid = config.r_min_m;
        g.range_step = config.range_res_m;
        g.n_bins = config.num_bins;
        g.az0_deg = config.az_min_deg;
        g.az_step_deg = config.az_res_deg;
        g.n_az = n_az();
        g.el0_deg = config.el_min_deg;
        g.el_step_deg = config.el_res_deg;
        g.n_el = n_el();
        return g;
    }

    localize::BoundingBox label_box() const {
        return localize::spherical_box_hull(range_lo_edge_m(), range_hi_edge_m(),
                                            config.az_min_deg, config.az_max_deg,
                                            config.el_min_deg, config.el_max_deg);
    }
};

namespace detail {

inline void validate_config(const ScenarioConfig& c) {
    if (!(c.platform_position.z() > 0.0))
        throw ConfigError("scene.platform height must be > 0");
    if (!(c.r_min_m < c.r_max_m)) throw ConfigError("scene.r_min must be < scene.r_max");
    if (!(c.az_min_deg < c.az_max_deg)) throw ConfigError("scene.az window out of order");
    if (!(c.el_min_deg < c.el_max_deg)) throw ConfigError("scene.el window out of order");
    if (c.num_bins < 1) throw ConfigError("scene.num_bins must be >= 1");
    if (c.range_res_m <= 0.0) throw ConfigError("scene.range_res must be > 0");
    const double span = c.r_max_m - c.r_min_m;
    if (std::abs(span - (c.num_bins - 1) * c.range_res_m) > 1e-6)
        throw ConfigError("scene: (num_bins - 1) * range_res must equal r_max - r_min");
    if (c.rcs_mean <= 0.0) throw ConfigError("scene.rcs_mean must be > 0");
    if (c.rcs_range < 0.0 || c.rcs_range > 2.0 * c.rcs_mean)
        throw ConfigError("scene.rcs_range must satisfy 0 <= l <= 2*mu");
    if (c.noise_power <= 0.0) throw ConfigError("scene.noise_power must be > 0");
    if (c.num_realizations < 1) throw ConfigError("scene.num_realizations must be >= 1");
    if (c.clutter.range_margin_m < 0.0 || c.clutter.az_margin_deg < 0.0)
        throw ConfigError("scene.clutter margins must be >= 0");
    if (c.clutter.patch_range_step_m <= 0.0 || c.clutter.patch_az_step_deg <= 0.0)
        throw ConfigError("scene.clutter patch steps must be > 0");
    if (c.clutter.texture_corr_m <= 0.0) throw ConfigError("scene.clutter.texture_corr must be > 0");
    if (c.clutter.texture_corr_range_m <= 0.0)
        throw ConfigError("scene.clutter.texture_corr_range must be > 0");
    // Grid tiling checks (throw early rather than at first grid use).
    detail::checked_steps(c.az_max_deg - c.az_min_deg, c.az_res_deg, "azimuth window");
    detail::checked_steps(c.el_max_deg - c.el_min_deg, c.el_res_deg, "elevation window");
}

// Resolve the (standoff G, first_bin P) pair against the bin-midpoint grid:
// the lower edge of bin P must equal r_min - dr/2.
inline void resolve_grid_origin(const ScenarioConfig& c, double& standoff, int& first_bin) {
    const double lo_edge = c.r_min_m - 0.5 * c.range_res_m;
    if (c.standoff_m < 0.0) {
        if (c.first_bin < 0) throw ConfigError("scene.first_bin must be >= 0");
        first_bin = c.first_bin;
        standoff = lo_edge - first_bin * c.range_res_m;
        if (standoff < 0.0)
            throw ConfigError("scene.first_bin too large for r_min (derived standoff < 0)");
    } else {
        const double p = (lo_edge - c.standoff_m) / c.range_res_m;
        first_bin = static_cast<int>(std::llround(p));
        standoff = c.standoff_m;
        if (first_bin < 0 || std::abs(p - first_bin) > 1e-6)
            throw ConfigError("scene.standoff is not commensurate with the range bin grid");
    }
}

inline Vec3 ground_point(const Vec3& platform, double slant_m, double az_deg) {
    const double h = platform.z();
    const double d = std::sqrt(slant_m * slant_m - h * h);
    const double az = deg2rad(az_deg);
    return {platform.x() + d * std::cos(az), platform.y() + d * std::sin(az), 0.0};
}

}  // namespace detail

// Array response for a far-field point at platform-frame (range, az, el).
// Subarray condensation keeps a constant gain of subarray_factor per channel;
// range enters only through the caller's bin selection.
inline CVec steering_vector(const Scenario& s, double /*range_m*/, double az_deg, double el_deg) {
    const ArrayGeometry& g = s.geometry;
    const double u = std::sin(deg2rad(az_deg - s.boresight_az_deg)) * std::cos(deg2rad(el_deg));
    const double step = 2.0 * kPi / g.wavelength_m * g.subarray_spacing_m() * u;
    CVec a(g.num_channels);
    for (int l = 0; l < g.num_channels; ++l)
        a[l] = std::polar(static_cast<double>(g.subarray_factor), step * l);
    return a;
}

inline Scenario build_scenario(const ScenarioConfig& config, const ArrayGeometry& geometry) {
    geometry.validate();
    detail::validate_config(config);

    Scenario s;
    s.config = config;
    s.geometry = geometry;
    detail::resolve_grid_origin(config, s.standoff_m, s.first_bin);

    const double h = config.platform_position.z();
    const double r_c = 0.5 * (config.r_min_m + config.r_max_m);
    if (r_c <= h) throw ConfigError("scene: region slant range must exceed platform height");
    s.boresight_az_deg = 0.5 * (config.az_min_deg + config.az_max_deg);
    s.region_center_world =
        detail::ground_point(config.platform_position, r_c, s.boresight_az_deg);

    // World-fixed patch lattice over the constrained area plus margins.
    const ClutterParams& cl = config.clutter;
    const double r_lo = std::max(h + 1.0, s.range_lo_edge_m() - cl.range_margin_m);
    const double r_hi = s.range_hi_edge_m() + cl.range_margin_m;
    const double az_lo = config.az_min_deg - cl.az_margin_deg;
    const double az_hi = config.az_max_deg + cl.az_margin_deg;
    const auto texture = detail::TextureField::build(derive_seed(config.clutter_seed, {0x7e}), cl,
                                                     deg2rad(s.boresight_az_deg));

    const int n_rings = static_cast<int>(std::floor((r_hi - r_lo) / cl.patch_range_step_m));
    const int n_cols = static_cast<int>(std::floor((az_hi - az_lo) / cl.patch_az_step_deg));
    s.patches.reserve(static_cast<std::size_t>(std::max(0, n_rings)) *
                      static_cast<std::size_t>(std::max(0, n_cols)));
    for (int i = 0; i < n_rings; ++i) {
        const double r = r_lo + (i + 0.5) * cl.patch_range_step_m;
        if (r <= h) continue;
        for (int j = 0; j < n_cols; ++j) {
            const double az = az_lo + (j + 0.5) * cl.patch_az_step_deg;
            ClutterPatch p;
            p.position = detail::ground_point(config.platform_position, r, az);
            p.power = texture.factor(p.position.x(), p.position.y());
            s.patches.push_back(p);
        }
    }
    // An empty patch field (patch steps coarser than the covered region) is
    // the legitimate no-clutter limit: clutter matrices are exactly zero.
    if (s.patches.empty()) return s;

    // Scale the field so the mean per-channel clutter power across the
    // constrained bins hits the requested CNR for this (original) platform.
    const double g2 = static_cast<double>(geometry.subarray_factor) * geometry.subarray_factor;
    std::vector<double> bin_power(static_cast<std::size_t>(config.num_bins), 0.0);
    for (const ClutterPatch& p : s.patches) {
        const int b = s.bin_of((p.position - config.platform_position).norm()) - s.first_bin;
        if (b >= 0 && b < config.num_bins) bin_power[static_cast<std::size_t>(b)] += g2 * p.power;
    }
    double mean_power = 0.0;
    for (double v : bin_power) mean_power += v;
    mean_power /= config.num_bins;
    if (mean_power <= 0.0)
        throw NumericError("scene: no clutter patches fall inside the constrained bins");
    const double scale = config.noise_power * db_to_linear(cl.cnr_db) / mean_power;
    for (ClutterPatch& p : s.patches) p.power *= scale;
    return s;
}

// Move the platform while keeping the world-fixed clutter field and ground
// region anchor.  The constrained windows re-center on the new line of sight
// to the anchor with their spans and resolutions preserved; the bin grid
// origin G floats so bin midpoints land exactly on the new window.
inline Scenario displace_platform(const Scenario& origin, double north_m, double east_m,
                                  const std::string& tag) {
    Scenario s = origin;
    s.tag = tag;
    s.config.platform_position += Vec3{north_m, east_m, 0.0};

    const Vec3 d_old = origin.region_center_world - origin.config.platform_position;
    const Vec3 d_new = origin.region_center_world - s.config.platform_position;
    const double slant_old = d_old.norm();
    const double slant_new = d_new.norm();
    if (slant_new <= 1.0) throw ConfigError("displace: platform lands on the region anchor");

    // Shift every constrained window by the change in the line of sight to the
    // shared ground anchor.  Working in deltas (not absolute re-centering)
    // keeps any configured window offset from the LOS and makes the null
    // displacement an exact identity.
    const double d_az = rad2deg(std::atan2(d_new.y(), d_new.x())) -
                        rad2deg(std::atan2(d_old.y(), d_old.x()));
    const double d_el = rad2deg(std::asin(d_new.z() / slant_new)) -
                        rad2deg(std::asin(d_old.z() / slant_old));
    const double d_r = slant_new - slant_old;

    ScenarioConfig& c = s.config;
    c.az_min_deg += d_az;
    c.az_max_deg += d_az;
    c.el_min_deg += d_el;
    c.el_max_deg += d_el;
    c.r_min_m += d_r;
    c.r_max_m += d_r;
    if (c.r_min_m - 0.5 * c.range_res_m <= c.platform_position.z())
        throw ConfigError("displace: constrained range window collapses below platform height");

    s.boresight_az_deg = origin.boresight_az_deg + d_az;
    s.first_bin = origin.first_bin;
    s.standoff_m = c.r_min_m - 0.5 * c.range_res_m - s.first_bin * c.range_res_m;
    c.standoff_m = s.standoff_m;
    s.region_center_world = origin.region_center_world;
    return s;
}

// Uniform draw over the constrained (r, az, el, rcs) box.  Draw order is
// pinned: range, azimuth, elevation, rcs.
inline TargetTruth sample_target(const Scenario& s, std::uint64_t seed) {
    Rng rng(seed);
    TargetTruth t;
    t.range_m = rng.uniform(s.range_lo_edge_m(), s.range_hi_edge_m());
    t.az_deg = rng.uniform(s.config.az_min_deg, s.config.az_max_deg);
    t.el_deg = rng.uniform(s.config.el_min_deg, s.config.el_max_deg);
    t.rcs = rng.uniform(s.config.rcs_mean - 0.5 * s.config.rcs_range,
                        s.config.rcs_mean + 0.5 * s.config.rcs_range);
    const int last = s.first_bin + s.config.num_bins - 1;
    t.range_bin = std::clamp(s.bin_of(t.range_m), s.first_bin, last);
    t.cartesian = localize::sph_to_cart(t.range_m, t.az_deg, t.el_deg);
    return t;
}

namespace detail {

// Column-major fill order (realization-outer) is part of the determinism
// contract for the data streams.
inline CMat complex_gaussian(int rows, int cols, Rng& rng, double power) {
    CMat m(rows, cols);
    const double amp = std::sqrt(power);
    for (int k = 0; k < cols; ++k)
        for (int r = 0; r < rows; ++r) m(r, k) = amp * rng.cnormal();
    return m;
}

inline void center_rows(CMat& m) {
    if (m.cols() == 0) return;
    const CVec mean = m.rowwise().mean();
    m.colwise() -= mean;
}

}  // namespace detail

// Generate the per-bin matched-filtered matrices for one coherent dwell.
// Pass target == nullptr for a null-hypothesis (clutter + noise only) dwell.
inline std::vector<RangeBinData> simulate_returns(const Scenario& s, const TargetTruth* target,
                                                  int num_realizations, std::uint64_t seed) {
    if (num_realizations < 1) throw std::invalid_argument("simulate_returns: K must be >= 1");
    const int L = s.geometry.num_channels;
    const int K = num_realizations;
    const int kappa = s.config.num_bins;
    const Vec3 platform = s.config.platform_position;

    // Bin the world patches against this scenario's grid.
    std::vector<std::vector<int>> members(static_cast<std::size_t>(kappa));
    for (int i = 0; i < static_cast<int>(s.patches.size()); ++i) {
        const int b = s.bin_of((s.patches[static_cast<std::size_t>(i)].position - platform).norm()) -
                      s.first_bin;
        if (b >= 0 && b < kappa) members[static_cast<std::size_t>(b)].push_back(i);
    }

    std::vector<RangeBinData> out(static_cast<std::size_t>(kappa));
    for (int b = 0; b < kappa; ++b) {
        RangeBinData& bin = out[static_cast<std::size_t>(b)];
        const int rho = s.first_bin + b;
        bin.bin_index = rho;
        const std::vector<int>& idx = members[static_cast<std::size_t>(b)];
        const int n_p = static_cast<int>(idx.size());

        // Patch steering matrix and per-patch powers for this bin.
        CMat A(L, n_p);
        RVec powers(n_p);
        for (int c = 0; c < n_p; ++c) {
            const ClutterPatch& p = s.patches[static_cast<std::size_t>(idx[c])];
            const Vec3 d = p.position - platform;
            const double r = d.norm();
            const double az = rad2deg(std::atan2(d.y(), d.x()));
            const double el = rad2deg(std::asin(d.z() / r));
            A.col(c) = steering_vector(s, r, az, el);
            powers[c] = p.power;
        }

        auto clutter_draw = [&](std::uint64_t comp) {
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(rho), comp}));
            CMat gamma(n_p, K);
            for (int k = 0; k < K; ++k)
                for (int p = 0; p < n_p; ++p)
                    gamma(p, k) = std::sqrt(powers[p]) * rng.cnormal();
            return CMat(A * gamma);
        };
        auto noise_draw = [&](std::uint64_t comp) {
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(rho), comp}));
            return detail::complex_gaussian(L, K, rng, s.config.noise_power);
        };

        bin.clutter = clutter_draw(0);
        bin.noise = noise_draw(1);
        bin.target = CMat::Zero(L, K);
        if (target != nullptr && target->range_bin == rho) {
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(rho), 2}));
            const CVec a = steering_vector(s, target->range_m, target->az_deg, target->el_deg);
            const double amp = std::sqrt(target->rcs);
            for (int k = 0; k < K; ++k)
                bin.target.col(k) = a * std::polar(amp, rng.uniform(0.0, 2.0 * kPi));
        }
        bin.reference = clutter_draw(3) + noise_draw(4);

        detail::center_rows(bin.target);
        detail::center_rows(bin.clutter);
        detail::center_rows(bin.noise);
        detail::center_rows(bin.reference);
        bin.combined = bin.target + bin.clutter + bin.noise;
    }
    return out;
}

}  // namespace staploc::scene
