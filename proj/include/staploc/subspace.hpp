// Clutter subspace extraction and chordal distance between the dominant
// subspaces of two scenarios' covariances.
#pragma once

#include "staploc/common.hpp"
#include "staploc/scene.hpp"
#include "staploc/stap.hpp"

#include <algorithm>
#include <cassert>
#include <string>
#include <vector>

namespace staploc::subspace {

enum class RankRuleKind { Fixed, Energy, NoiseFloor };

struct RankRule {
    RankRuleKind kind = RankRuleKind::NoiseFloor;
    int fixed_rank = 0;          // Fixed: use exactly this rank
    double energy_eps = 0.05;    // Energy: keep (1 - eps) of above-floor energy
    double floor_factor = 10.0;  // NoiseFloor: keep eigenvalues > factor * floor
};

struct SubspaceBasis {
    CMat basis;        // L x rank, orthonormal columns, dominant first
    int rank = 0;
    RVec eigenvalues;  // all L eigenvalues of the covariance, descending
};

namespace detail {

// Noise floor estimate: median of the trailing (smallest) quartile.
inline double noise_floor(const RVec& lam_desc) {
    const int L = static_cast<int>(lam_desc.size());
    const int q = std::max(1, L / 4);
    std::vector<double> tail(lam_desc.data() + (L - q), lam_desc.data() + L);
    std::sort(tail.begin(), tail.end());
    const int m = q / 2;
    return (q % 2 == 1) ? tail[static_cast<std::size_t>(m)]
                        : 0.5 * (tail[static_cast<std::size_t>(m - 1)] + tail[static_cast<std::size_t>(m)]);
}

}  // namespace detail

inline SubspaceBasis clutter_basis(const stap::CovarianceEstimate& cov, const RankRule& rule) {
    const int L = static_cast<int>(cov.sigma.rows());
    Eigen::SelfAdjointEigenSolver<CMat> eig(cov.sigma);
    if (eig.info() != Eigen::Success)
        throw NumericError("clutter_basis: eigendecomposition failed");

    SubspaceBasis out;
    out.eigenvalues = eig.eigenvalues().reverse();  // descending

    int r = 0;
    switch (rule.kind) {
        case RankRuleKind::Fixed:
            if (rule.fixed_rank < 1 || rule.fixed_rank > L)
                throw std::invalid_argument("clutter_basis: fixed rank out of range");
            r = rule.fixed_rank;
            break;
        case RankRuleKind::NoiseFloor: {
            const double floor = detail::noise_floor(out.eigenvalues);
            if (!(floor > 0.0)) throw NumericError("clutter_basis: non-positive noise floor");
            for (int i = 0; i < L; ++i)
                if (out.eigenvalues[i] > rule.floor_factor * floor) ++r;
            break;
        }
        case RankRuleKind::Energy: {
            const double floor = detail::noise_floor(out.eigenvalues);
            double total = 0.0;
            for (int i = 0; i < L; ++i) total += std::max(out.eigenvalues[i] - floor, 0.0);
            if (total > 0.0) {
                double acc = 0.0;
                for (int i = 0; i < L; ++i) {
                    acc += std::max(out.eigenvalues[i] - floor, 0.0);
                    if (acc >= (1.0 - rule.energy_eps) * total) {
                        r = i + 1;
                        break;
                    }
                }
            }
            break;
        }
    }
    out.rank = r;
    out.basis = CMat(L, r);
    // Eigenvectors come back ascending; take the top r in descending order.
    for (int i = 0; i < r; ++i) out.basis.col(i) = eig.eigenvectors().col(L - 1 - i);
    return out;
}

struct ChordalResult {
    double distance = 0.0;    // r - Tr(J_D J_O J_D), in [0, r]
    int rank = 0;
    double normalized = 0.0;  // distance / rank
    std::vector<double> principal_angles_rad;  // ascending
};

inline ChordalResult chordal_distance(const SubspaceBasis& origin, const SubspaceBasis& displaced,
                                      int rank) {
    if (rank < 1) throw std::invalid_argument("chordal_distance: rank must be >= 1");
    if (origin.rank < rank || displaced.rank < rank)
        throw std::invalid_argument("chordal_distance: basis has fewer columns than rank");
    const CMat uo = origin.basis.leftCols(rank);
    const CMat ud = displaced.basis.leftCols(rank);

    const CMat jo = uo * uo.adjoint();
    const CMat jd = ud * ud.adjoint();
    const Complex tr = (jd * jo * jd).trace();
    if (std::abs(tr.imag()) > 1e-9 * std::max(1.0, std::abs(tr.real())))
        throw NumericError("chordal_distance: projector trace is not real");

    ChordalResult res;
    res.rank = rank;
    res.distance = rank - tr.real();

    // Principal angles from the singular values of the cross-Gram matrix.
    const CMat cross = uo.adjoint() * ud;
    Eigen::JacobiSVD<CMat> svd(cross);
    const RVec sv = svd.singularValues();  // descending
    res.principal_angles_rad.reserve(static_cast<std::size_t>(rank));
    double sin2_sum = 0.0;
    for (int i = 0; i < rank; ++i) {
        const double c = std::clamp(sv[i], 0.0, 1.0);
        res.principal_angles_rad.push_back(std::acos(c));
        sin2_sum += 1.0 - c * c;
    }
    // acos of descending cosines is already ascending.
    assert(std::abs(res.distance - sin2_sum) < 1e-8 * std::max(1.0, sin2_sum) + 1e-9);
    if (res.distance < 0.0 && res.distance > -1e-9) res.distance = 0.0;
    if (res.distance < 0.0 || res.distance > rank + 1e-9)
        throw NumericError("chordal_distance: distance outside [0, rank]");
    res.normalized = res.distance / rank;
    return res;
}

enum class BinCombine { MeanBins, CenterBin };

struct ChordalRow {
    std::string tag;
    double distance = 0.0;    // combined across bins per policy
    double normalized = 0.0;  // combined distance / rank
    double mean_rank = 0.0;   // ranks are fixed per bin by the origin scenario
};

// Chordal distances of each displaced scenario from the origin.  Ranks are
// chosen per bin on the origin covariance by `rule` and reused (fixed) for
// the displaced covariances so both subspaces live on the same Grassmannian.
inline std::vector<ChordalRow> pairwise_chordal(const scene::Scenario& origin,
                                                const std::vector<scene::Scenario>& displaced,
                                                const RankRule& rule, int cov_realizations,
                                                BinCombine policy = BinCombine::MeanBins,
                                                double loading_rel = 1e-6) {
    const auto covs_o = stap::scenario_covariances(origin, cov_realizations, loading_rel);
    const int kappa = static_cast<int>(covs_o.size());
    std::vector<SubspaceBasis> base_o;
    std::vector<int> ranks(static_cast<std::size_t>(kappa));
    base_o.reserve(covs_o.size());
    for (int b = 0; b < kappa; ++b) {
        base_o.push_back(clutter_basis(covs_o[static_cast<std::size_t>(b)], rule));
        ranks[static_cast<std::size_t>(b)] = base_o.back().rank;
        if (ranks[static_cast<std::size_t>(b)] < 1)
            throw NumericError("pairwise_chordal: origin clutter rank is zero in bin " +
                               std::to_string(b));
    }

    std::vector<ChordalRow> rows;
    rows.reserve(displaced.size());
    for (const scene::Scenario& d : displaced) {
        const auto covs_d = stap::scenario_covariances(d, cov_realizations, loading_rel);
        if (static_cast<int>(covs_d.size()) != kappa)
            throw std::invalid_argument("pairwise_chordal: bin count mismatch");
        ChordalRow row;
        row.tag = d.tag;
        const int lo = (policy == BinCombine::CenterBin) ? kappa / 2 : 0;
        const int hi = (policy == BinCombine::CenterBin) ? kappa / 2 + 1 : kappa;
        double dist = 0.0, norm = 0.0, rank_sum = 0.0;
        for (int b = lo; b < hi; ++b) {
            RankRule fixed{RankRuleKind::Fixed, ranks[static_cast<std::size_t>(b)], 0.0, 0.0};
            const SubspaceBasis bd = clutter_basis(covs_d[static_cast<std::size_t>(b)], fixed);
            const ChordalResult c =
                chordal_distance(base_o[static_cast<std::size_t>(b)], bd,
                                 ranks[static_cast<std::size_t>(b)]);
            dist += c.distance;
            norm += c.normalized;
            rank_sum += c.rank;
        }
        const int n = hi - lo;
        row.distance = dist / n;
        row.normalized = norm / n;
        row.mean_rank = rank_sum / n;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace staploc::subspace
