// Covariance estimation, whitening, the NAMF test statistic, heatmap tensor
// generation over the constrained grid, and output-SCNR bookkeeping.
#pragma once

#include "staploc/common.hpp"
#include "staploc/localize.hpp"
#include "staploc/scene.hpp"

#include <cassert>
#include <string>
#include <vector>

namespace staploc::stap {

struct CovarianceEstimate {
    CMat sigma;        // loaded sample covariance
    CMat inv_sqrt;     // Hermitian Sigma^(-1/2)
    RVec eigenvalues;  // of sigma, descending
};

// Sample covariance (1/K) * data * data^H plus relative diagonal loading.
// The inverse square root is formed eagerly via the Hermitian eigensystem
// with eigenvalues clamped at 1e-12 of the largest.
inline CovarianceEstimate estimate_covariance(const CMat& data, double loading_rel = 1e-6) {
    if (data.cols() < 1) throw std::invalid_argument("estimate_covariance: no realizations");
    if (loading_rel < 0.0) throw std::invalid_argument("estimate_covariance: negative loading");
    const int L = static_cast<int>(data.rows());
    CovarianceEstimate est;
    est.sigma = data * data.adjoint() / static_cast<double>(data.cols());
    double mean_diag = est.sigma.diagonal().real().mean();
    if (mean_diag <= 0.0) mean_diag = 1.0;  // all-zero data: pure loading term
    est.sigma += loading_rel * mean_diag * CMat::Identity(L, L);

    Eigen::SelfAdjointEigenSolver<CMat> eig(est.sigma);
    if (eig.info() != Eigen::Success)
        throw NumericError("estimate_covariance: eigendecomposition failed");
    const RVec lam = eig.eigenvalues();  // ascending
    const double lam_max = lam[L - 1];
    if (!(lam_max > 0.0)) throw NumericError("estimate_covariance: covariance not positive");
    RVec inv_sqrt_lam(L);
    for (int i = 0; i < L; ++i)
        inv_sqrt_lam[i] = 1.0 / std::sqrt(std::max(lam[i], 1e-12 * lam_max));
    est.inv_sqrt = eig.eigenvectors() * inv_sqrt_lam.asDiagonal() * eig.eigenvectors().adjoint();
    est.eigenvalues = lam.reverse();
    return est;
}

inline CMat whiten(const CMat& data, const CovarianceEstimate& cov) {
    if (data.rows() != cov.inv_sqrt.cols())
        throw std::invalid_argument("whiten: dimension mismatch");
    return cov.inv_sqrt * data;
}

// NAMF statistic for one whitened steering vector against whitened data:
//   Gamma = ||a^H Y||^2 / (||a||^2 * ||(||y_k||^2)_k||_2).
// Bounded by sqrt(K); all-zero data maps to 0.
inline double namf_statistic(const CMat& whitened_data, const CVec& whitened_steering) {
    if (whitened_data.rows() != whitened_steering.size())
        throw std::invalid_argument("namf_statistic: dimension mismatch");
    const double aa = whitened_steering.squaredNorm();
    if (aa <= 0.0) throw std::invalid_argument("namf_statistic: zero steering vector");
    const double num = (whitened_steering.adjoint() * whitened_data).squaredNorm();
    const double denom = whitened_data.colwise().squaredNorm().norm();
    if (denom <= 0.0) throw std::invalid_argument("namf_statistic: zero data matrix");
    const double gamma = num / (aa * denom);
    assert(gamma <= std::sqrt(static_cast<double>(whitened_data.cols())) * (1.0 + 1e-9) + 1e-12);
    return gamma;
}

// Whitened steering vectors for every grid cell, one block per range bin.
// Cell c = iaz * n_el + jel inside a bin, matching GridSpec::flat.
struct SteeringGrid {
    std::vector<double> az_deg, el_deg;
    std::vector<CMat> whitened;    // per bin: L x (n_az * n_el)
    std::vector<RVec> cell_norms;  // per bin: squared norms of each column
    int n_az = 0, n_el = 0;
};

inline SteeringGrid make_steering_grid(const scene::Scenario& s,
                                       const std::vector<CovarianceEstimate>& covs) {
    if (static_cast<int>(covs.size()) != s.config.num_bins)
        throw std::invalid_argument("make_steering_grid: need one covariance per bin");
    SteeringGrid grid;
    grid.n_az = s.n_az();
    grid.n_el = s.n_el();
    grid.az_deg.resize(static_cast<std::size_t>(grid.n_az));
    grid.el_deg.resize(static_cast<std::size_t>(grid.n_el));
    for (int i = 0; i < grid.n_az; ++i)
        grid.az_deg[static_cast<std::size_t>(i)] = s.config.az_min_deg + i * s.config.az_res_deg;
    for (int j = 0; j < grid.n_el; ++j)
        grid.el_deg[static_cast<std::size_t>(j)] = s.config.el_min_deg + j * s.config.el_res_deg;

    // Far-field steering ignores range, so the unwhitened block is shared.
    const int cells = grid.n_az * grid.n_el;
    CMat raw(s.geometry.num_channels, cells);
    for (int i = 0; i < grid.n_az; ++i)
        for (int j = 0; j < grid.n_el; ++j)
            raw.col(i * grid.n_el + j) =
                scene::steering_vector(s, s.bin_midpoint_m(0), grid.az_deg[static_cast<std::size_t>(i)],
                                       grid.el_deg[static_cast<std::size_t>(j)]);
    grid.whitened.reserve(covs.size());
    grid.cell_norms.reserve(covs.size());
    for (const CovarianceEstimate& cov : covs) {
        grid.whitened.emplace_back(cov.inv_sqrt * raw);
        grid.cell_norms.emplace_back(grid.whitened.back().colwise().squaredNorm().transpose());
    }
    return grid;
}

// Heatmap tensor plus the labels and metadata carried alongside it through
// dataset files.  Values are bin-major float32.
struct HeatmapTensor {
    int n_bins = 0, n_az = 0, n_el = 0;
    std::vector<float> values;
    scene::TargetTruth truth;
    Vec3 encoded_label{0, 0, 0};
    double output_scnr_db = kMinDb;
    std::string scenario_tag;

    int cells() const { return n_bins * n_az * n_el; }
};

// Output SCNR of one bin: whitened target energy over whitened clutter+noise
// energy.  Zero target maps to the -300 dB sentinel.
inline double output_scnr_db(const scene::RangeBinData& bin, const CovarianceEstimate& cov) {
    const double den = (cov.inv_sqrt * (bin.clutter + bin.noise)).squaredNorm();
    if (den <= 0.0) throw std::invalid_argument("output_scnr: zero clutter-plus-noise energy");
    const double num = (cov.inv_sqrt * bin.target).squaredNorm();
    if (num <= 0.0) return kMinDb;
    return linear_to_db(num / den);
}

// NAMF heatmap over all bins and grid cells.  Equivalent to calling
// namf_statistic per cell, but batched through one GEMM per bin.
inline HeatmapTensor build_heatmap(const std::vector<scene::RangeBinData>& returns,
                                   const std::vector<CovarianceEstimate>& covs,
                                   const SteeringGrid& grid,
                                   const scene::TargetTruth* truth = nullptr) {
    if (returns.size() != covs.size() || returns.size() != grid.whitened.size())
        throw std::invalid_argument("build_heatmap: bins/covariances/grid size mismatch");
    HeatmapTensor t;
    t.n_bins = static_cast<int>(returns.size());
    t.n_az = grid.n_az;
    t.n_el = grid.n_el;
    const int cells = grid.n_az * grid.n_el;
    t.values.assign(static_cast<std::size_t>(t.n_bins) * cells, 0.0f);

    for (int b = 0; b < t.n_bins; ++b) {
        const scene::RangeBinData& bin = returns[static_cast<std::size_t>(b)];
        const CMat yh = covs[static_cast<std::size_t>(b)].inv_sqrt * bin.combined;
        const double denom = yh.colwise().squaredNorm().norm();
        float* dst = t.values.data() + static_cast<std::size_t>(b) * cells;
        if (denom <= 0.0) continue;  // all-zero bin -> all-zero slice
        const CMat g = grid.whitened[static_cast<std::size_t>(b)].adjoint() * yh;
        const RVec& norms = grid.cell_norms[static_cast<std::size_t>(b)];
        for (int c = 0; c < cells; ++c) {
            const double num = g.row(c).squaredNorm();
            dst[c] = static_cast<float>(num / (norms[c] * denom));
        }
        if (truth != nullptr && truth->range_bin == bin.bin_index)
            t.output_scnr_db = output_scnr_db(bin, covs[static_cast<std::size_t>(b)]);
    }
    if (truth != nullptr) t.truth = *truth;
    return t;
}

// Reference covariances for a scenario: one null-hypothesis dwell seeded from
// the scenario's clutter seed, estimated per bin from the reference matrices.
inline std::vector<CovarianceEstimate> scenario_covariances(const scene::Scenario& s,
                                                            int cov_realizations,
                                                            double loading_rel = 1e-6) {
    const auto dwell = scene::simulate_returns(s, nullptr, cov_realizations,
                                               derive_seed(s.config.clutter_seed, {0xC0}));
    std::vector<CovarianceEstimate> covs;
    covs.reserve(dwell.size());
    for (const scene::RangeBinData& bin : dwell)
        covs.push_back(estimate_covariance(bin.reference, loading_rel));
    return covs;
}

}  // namespace staploc::stap
