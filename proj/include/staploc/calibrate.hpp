// RCS calibration: find the mean RCS that makes the dataset's mean output
// SCNR hit a requested level.  Output SCNR is exactly linear in RCS, so one
// probe batch at the configured RCS distribution shape pins the scale.
#pragma once

#include "staploc/common.hpp"
#include "staploc/scene.hpp"
#include "staploc/stap.hpp"

#include <cmath>

namespace staploc::calibrate {

// Returns the calibrated rcs_mean; callers should scale rcs_range by the same
// factor to keep the distribution shape (and hence the dB offset) unchanged.
inline double calibrate_rcs(const scene::Scenario& s, double target_scnr_db, int n_cal,
                            std::uint64_t seed, int cov_realizations = 1600,
                            double loading_rel = 1e-6) {
    if (n_cal < 1) throw std::invalid_argument("calibrate_rcs: n_cal must be >= 1");
    const auto covs = stap::scenario_covariances(s, cov_realizations, loading_rel);

    double sum_db = 0.0;
    for (int i = 0; i < n_cal; ++i) {
        const auto iu = static_cast<std::uint64_t>(i);
        const scene::TargetTruth t = scene::sample_target(s, derive_seed(seed, {iu, 0}));
        const auto returns =
            scene::simulate_returns(s, &t, s.config.num_realizations, derive_seed(seed, {iu, 1}));
        double db = kMinDb;
        for (std::size_t b = 0; b < returns.size(); ++b)
            if (returns[b].bin_index == t.range_bin)
                db = stap::output_scnr_db(returns[b], covs[b]);
        if (!std::isfinite(db) || db <= kMinDb)
            throw NumericError("calibrate_rcs: degenerate scene (no measurable target response)");
        sum_db += db;
    }
    const double mean_db = sum_db / n_cal;
    const double scale = db_to_linear(target_scnr_db - mean_db);
    const double mu = s.config.rcs_mean * scale;
    if (!std::isfinite(mu) || mu <= 0.0)
        throw NumericError("calibrate_rcs: calibration produced a non-positive RCS");
    return mu;
}

}  // namespace staploc::calibrate
