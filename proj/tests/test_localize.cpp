#include "staploc/localize.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace staploc;
using namespace staploc::localize;

namespace {

BoundingBox unit_box() {
    BoundingBox b;
    b.lo = Vec3{-1.0, -2.0, -3.0};
    b.hi = Vec3{3.0, 4.0, 5.0};
    return b;
}

}  // namespace

TEST(Localize, SphToCartAxes) {
    const Vec3 north = sph_to_cart(1000.0, 0.0, 0.0);
    EXPECT_NEAR(north.x(), 1000.0, 1e-9);
    EXPECT_NEAR(north.y(), 0.0, 1e-9);
    EXPECT_NEAR(north.z(), 0.0, 1e-9);

    const Vec3 east = sph_to_cart(1000.0, 90.0, 0.0);
    EXPECT_NEAR(east.x(), 0.0, 1e-9);
    EXPECT_NEAR(east.y(), 1000.0, 1e-9);
    EXPECT_NEAR(east.z(), 0.0, 1e-9);

    const Vec3 up = sph_to_cart(42.0, 123.0, 90.0);
    EXPECT_NEAR(up.z(), 42.0, 1e-9);
}

TEST(Localize, SphToCartPreservesNorm) {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        const double r = rng.uniform(0.0, 2.0e4);
        const double az = rng.uniform(-180.0, 180.0);
        const double el = rng.uniform(-90.0, 90.0);
        EXPECT_NEAR(sph_to_cart(r, az, el).norm(), r, 1e-9 * std::max(1.0, r));
    }
}

TEST(Localize, EncodeCenterAndCorners) {
    const BoundingBox box = unit_box();
    const Vec3 center = 0.5 * (box.lo + box.hi);
    const Vec3 e = encode_label(center, box);
    EXPECT_NEAR(e.x(), 0.0, 1e-12);
    EXPECT_NEAR(e.y(), 0.0, 1e-12);
    EXPECT_NEAR(e.z(), 0.0, 1e-12);

    const Vec3 lo = encode_label(box.lo, box);
    const Vec3 hi = encode_label(box.hi, box);
    for (int a = 0; a < 3; ++a) {
        EXPECT_NEAR(lo[a], -1.0, 1e-12);
        EXPECT_NEAR(hi[a], 1.0, 1e-12);
    }
    const Vec3 mixed = encode_label(Vec3{box.lo.x(), box.hi.y(), box.lo.z()}, box);
    EXPECT_NEAR(mixed.x(), -1.0, 1e-12);
    EXPECT_NEAR(mixed.y(), 1.0, 1e-12);
    EXPECT_NEAR(mixed.z(), -1.0, 1e-12);
}

TEST(Localize, EncodeDecodeRoundTrip) {
    const BoundingBox box = spherical_box_hull(14538.0, 14688.0, 20.0, 30.0, -4.1, -3.9);
    Rng rng(12);
    for (int i = 0; i < 10000; ++i) {
        Vec3 p;
        for (int a = 0; a < 3; ++a) p[a] = rng.uniform(box.lo[a], box.hi[a]);
        const Vec3 back = decode_label(encode_label(p, box), box);
        for (int a = 0; a < 3; ++a) EXPECT_NEAR(back[a], p[a], 1e-9);
    }
}

TEST(Localize, EncodeRejectsOutOfBoxNamingAxis) {
    const BoundingBox box = unit_box();
    try {
        encode_label(Vec3{100.0, 0.0, 0.0}, box);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("x"), std::string::npos);
    }
    try {
        encode_label(Vec3{0.0, 0.0, -100.0}, box);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("z"), std::string::npos);
    }
}

TEST(Localize, SphericalBoxHullContainsSamples) {
    // Azimuth window crossing 0 so the hull must pick up the interior
    // cos-extremum at az = 0 rather than an endpoint value.
    const BoundingBox box = spherical_box_hull(900.0, 1100.0, -10.0, 10.0, -5.0, 5.0);
    EXPECT_NEAR(box.hi.x(), 1100.0, 1e-9);
    Rng rng(13);
    for (int i = 0; i < 5000; ++i) {
        const Vec3 p = sph_to_cart(rng.uniform(900.0, 1100.0), rng.uniform(-10.0, 10.0),
                                   rng.uniform(-5.0, 5.0));
        for (int a = 0; a < 3; ++a) {
            EXPECT_GE(p[a], box.lo[a] - 1e-9);
            EXPECT_LE(p[a], box.hi[a] + 1e-9);
        }
    }
}

namespace {

GridSpec desk_grid() {
    GridSpec g;
    g.first_range_mid = 14553.0;
    g.range_step = 30.0;
    g.n_bins = 5;
    g.az0_deg = 20.0;
    g.az_step_deg = 0.4;
    g.n_az = 26;
    g.el0_deg = -4.1;
    g.el_step_deg = 0.01;
    g.n_el = 21;
    return g;
}

}  // namespace

TEST(Localize, PeakCellMidpointSingleCell) {
    const GridSpec g = desk_grid();
    std::vector<float> v(static_cast<std::size_t>(g.cells()), 0.0f);
    const int bin = 2, iaz = 7, jel = 13;
    v[static_cast<std::size_t>(g.flat(bin, iaz, jel))] = 1.0f;
    const Vec3 got = peak_cell_midpoint(v.data(), g);
    const Vec3 want = sph_to_cart(g.first_range_mid + bin * g.range_step,
                                  g.az0_deg + iaz * g.az_step_deg, g.el0_deg + jel * g.el_step_deg);
    EXPECT_NEAR((got - want).norm(), 0.0, 1e-9);
}

TEST(Localize, PeakCellMidpointTieBreaksToLowestIndex) {
    const GridSpec g = desk_grid();
    std::vector<float> v(static_cast<std::size_t>(g.cells()), 0.5f);
    // All-equal tensor: the first cell wins.
    const Vec3 first = sph_to_cart(g.first_range_mid, g.az0_deg, g.el0_deg);
    EXPECT_NEAR((peak_cell_midpoint(v.data(), g) - first).norm(), 0.0, 1e-9);

    // Two equal peaks: the lower flattened index wins.
    v[static_cast<std::size_t>(g.flat(1, 3, 4))] = 2.0f;
    v[static_cast<std::size_t>(g.flat(4, 20, 11))] = 2.0f;
    const Vec3 want = sph_to_cart(g.first_range_mid + g.range_step, g.az0_deg + 3 * g.az_step_deg,
                                  g.el0_deg + 4 * g.el_step_deg);
    EXPECT_NEAR((peak_cell_midpoint(v.data(), g) - want).norm(), 0.0, 1e-9);
}

TEST(Localize, PeakCellMidpointInvariantToMonotoneRescale) {
    const GridSpec g = desk_grid();
    Rng rng(14);
    std::vector<float> v(static_cast<std::size_t>(g.cells()));
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    std::vector<float> squared(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) squared[i] = 3.0f * v[i] * v[i] + 1.0f;
    const Vec3 a = peak_cell_midpoint(v.data(), g);
    const Vec3 b = peak_cell_midpoint(squared.data(), g);
    EXPECT_NEAR((a - b).norm(), 0.0, 1e-12);
}

// Uniform target inside one (30 m x 0.4 deg x 0.01 deg) cell at ~14.6 km:
// the mean distance to the cell midpoint is 27.49 m (Monte-Carlo reference,
// standard error 0.03 m).
TEST(Localize, QuantizationFloorOracle) {
    const double r0 = 14613.0, az0 = 25.0, el0 = -4.0;
    Rng rng(15);
    double sum = 0.0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        const double r = r0 + rng.uniform(-15.0, 15.0);
        const double az = az0 + rng.uniform(-0.2, 0.2);
        const double el = el0 + rng.uniform(-0.005, 0.005);
        sum += (sph_to_cart(r, az, el) - sph_to_cart(r0, az0, el0)).norm();
    }
    const double mean = sum / draws;
    EXPECT_NEAR(mean, 27.49, 0.4);
}

TEST(Localize, AvgEuclideanError) {
    const std::vector<Vec3> truth{Vec3{0, 0, 0}, Vec3{1, 1, 1}};
    EXPECT_DOUBLE_EQ(avg_euclidean_error(truth, truth), 0.0);

    const std::vector<Vec3> off{Vec3{3, 4, 0}};
    const std::vector<Vec3> zero{Vec3{0, 0, 0}};
    EXPECT_NEAR(avg_euclidean_error(off, zero), 5.0, 1e-12);

    // Mean additivity over equal-length concatenation.
    const std::vector<Vec3> p1{Vec3{1, 0, 0}, Vec3{0, 2, 0}};
    const std::vector<Vec3> t1{Vec3{0, 0, 0}, Vec3{0, 0, 0}};
    const std::vector<Vec3> p2{Vec3{0, 0, 3}, Vec3{4, 0, 0}};
    const double e1 = avg_euclidean_error(p1, t1);
    const double e2 = avg_euclidean_error(p2, t1);
    std::vector<Vec3> pc(p1);
    pc.insert(pc.end(), p2.begin(), p2.end());
    std::vector<Vec3> tc(t1);
    tc.insert(tc.end(), t1.begin(), t1.end());
    EXPECT_NEAR(avg_euclidean_error(pc, tc), 0.5 * (e1 + e2), 1e-12);

    EXPECT_THROW(avg_euclidean_error(p1, off), std::invalid_argument);
    EXPECT_THROW(avg_euclidean_error({}, {}), std::invalid_argument);
}

TEST(Localize, GainDefinition) {
    EXPECT_DOUBLE_EQ(gain(10.0, 10.0), 1.0);
    EXPECT_NEAR(gain(33.0, 20.0), 1.65, 1e-12);
    EXPECT_NEAR(gain(33.0, 20.0) * gain(20.0, 33.0), 1.0, 1e-12);
    EXPECT_TRUE(std::isinf(gain(5.0, 0.0)));
    EXPECT_THROW(gain(-1.0, 2.0), std::invalid_argument);
}
