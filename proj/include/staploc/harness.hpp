// Experiment harness: INI-style config with CLI overrides, dataset file I/O,
// dataset generation, localizer evaluation, the displaced-platform experiment
// protocol, and CSV/SVG/summary report rendering.
#pragma once

#include "staploc/calibrate.hpp"
#include "staploc/common.hpp"
#include "staploc/localize.hpp"
#include "staploc/neural.hpp"
#include "staploc/scene.hpp"
#include "staploc/stap.hpp"
#include "staploc/subspace.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace staploc::harness {

// ---------------------------------------------------------------------------
// Configuration: INI-style sections, overridable by "--section.key=value".
// ---------------------------------------------------------------------------

class ConfigMap {
public:
    ConfigMap() = default;

    static ConfigMap from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file: " + path);
        ConfigMap cfg;
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find_first_of("#;");
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed section");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
            cfg.kv_[section.empty() ? key : section + "." + key] = value;
        }
        return cfg;
    }

    void set(const std::string& dotted_key, const std::string& value) {
        kv_[dotted_key] = value;
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& def) const {
        used_.insert(key);
        const auto it = kv_.find(key);
        return it == kv_.end() ? def : it->second;
    }
    double get_double(const std::string& key, double def) const {
        used_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        return parse_double(it->second, key);
    }
    int get_int(const std::string& key, int def) const {
        used_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        try {
            std::size_t pos = 0;
            const long v = std::stol(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return static_cast<int>(v);
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': not an integer: " + it->second);
        }
    }
    std::uint64_t get_u64(const std::string& key, std::uint64_t def) const {
        used_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        try {
            std::size_t pos = 0;
            const unsigned long long v = std::stoull(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return static_cast<std::uint64_t>(v);
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': not an unsigned integer: " + it->second);
        }
    }

    // Reject misspelled/unknown keys once all consumers have pulled values.
    void check_all_used() const {
        for (const auto& [k, v] : kv_)
            if (used_.count(k) == 0) throw ConfigError("unknown config key: " + k);
    }

    static double parse_double(const std::string& s, const std::string& key) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': not a number: " + s);
        }
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> used_;
};

struct ExperimentConfig {
    scene::ScenarioConfig scene;
    scene::ArrayGeometry geometry;
    int cov_realizations = 1600;
    double loading_rel = 1e-6;
    subspace::RankRule rank_rule;
    subspace::BinCombine combine = subspace::BinCombine::MeanBins;
    int train_examples = 4096;
    int test_examples = 512;
    int fsl_examples = 64;
    int calib_examples = 256;
    neural::TrainConfig train_cfg;  // epochs 30, batch 64, lr 1e-3
    neural::TrainConfig fsl_cfg;    // epochs 50, batch 64, lr 5e-4
    std::vector<double> scnr_sweep_db = {-20, -15, -10, -5, 0, 5, 10, 15, 20};
    double displacement_m = 1000.0;
    std::uint64_t master_seed = 1;
    std::string out_dir = "out";
};

namespace detail {

inline std::vector<double> parse_sweep(const std::string& text) {
    std::vector<double> out;
    const auto colon1 = text.find(':');
    if (colon1 != std::string::npos) {  // lo:step:hi
        const auto colon2 = text.find(':', colon1 + 1);
        if (colon2 == std::string::npos)
            throw ConfigError("experiment.scnr_db: expected lo:step:hi, got " + text);
        const double lo = ConfigMap::parse_double(text.substr(0, colon1), "experiment.scnr_db");
        const double step =
            ConfigMap::parse_double(text.substr(colon1 + 1, colon2 - colon1 - 1),
                                    "experiment.scnr_db");
        const double hi = ConfigMap::parse_double(text.substr(colon2 + 1), "experiment.scnr_db");
        if (step <= 0.0 || hi < lo) throw ConfigError("experiment.scnr_db: bad range " + text);
        for (double v = lo; v <= hi + 1e-9; v += step) out.push_back(v);
        return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(ConfigMap::parse_double(item, "experiment.scnr_db"));
    if (out.empty()) throw ConfigError("experiment.scnr_db: empty sweep");
    return out;
}

}  // namespace detail

inline ExperimentConfig experiment_from(const ConfigMap& m) {
    ExperimentConfig cfg;
    scene::ScenarioConfig& s = cfg.scene;
    s.platform_position = Vec3{m.get_double("scene.platform_north", 0.0),
                               m.get_double("scene.platform_east", 0.0),
                               m.get_double("scene.platform_height", 1000.0)};
    s.standoff_m = m.get_double("scene.standoff", -1.0);
    s.first_bin = m.get_int("scene.first_bin", 51);
    s.r_min_m = m.get_double("scene.r_min", 14553.0);
    s.r_max_m = m.get_double("scene.r_max", 14673.0);
    s.az_min_deg = m.get_double("scene.az_min", 20.0);
    s.az_max_deg = m.get_double("scene.az_max", 30.0);
    s.el_min_deg = m.get_double("scene.el_min", -4.1);
    s.el_max_deg = m.get_double("scene.el_max", -3.9);
    s.range_res_m = m.get_double("scene.range_res", 30.0);
    s.az_res_deg = m.get_double("scene.az_res", 0.4);
    s.el_res_deg = m.get_double("scene.el_res", 0.01);
    s.num_bins = m.get_int("scene.num_bins", 5);
    s.rcs_mean = m.get_double("scene.rcs_mean", 1.0);
    s.rcs_range = m.get_double("scene.rcs_range", 1.0);
    s.noise_power = m.get_double("scene.noise_power", 1.0);
    s.clutter_seed = m.get_u64("scene.clutter_seed", 1);
    s.num_realizations = m.get_int("scene.num_realizations", 100);

    scene::ClutterParams& cl = s.clutter;
    cl.cnr_db = m.get_double("clutter.cnr_db", 30.0);
    cl.range_margin_m = m.get_double("clutter.range_margin", 1300.0);
    cl.az_margin_deg = m.get_double("clutter.az_margin", 5.0);
    cl.patch_range_step_m = m.get_double("clutter.patch_range_step", 30.0);
    cl.patch_az_step_deg = m.get_double("clutter.patch_az_step", 0.4);
    cl.texture_sigma_db = m.get_double("clutter.texture_sigma_db", 9.0);
    cl.texture_corr_m = m.get_double("clutter.texture_corr", 80.0);
    cl.texture_corr_range_m = m.get_double("clutter.texture_corr_range", 600.0);
    cl.texture_features = m.get_int("clutter.texture_features", 320);

    scene::ArrayGeometry& g = cfg.geometry;
    g.num_channels = m.get_int("array.num_channels", 16);
    g.element_spacing_m = m.get_double("array.element_spacing", 0.015);
    g.wavelength_m = m.get_double("array.wavelength", 0.03);
    g.subarray_factor = m.get_int("array.subarray_factor", 3);

    cfg.cov_realizations = m.get_int("stap.cov_realizations", 1600);
    cfg.loading_rel = m.get_double("stap.diagonal_loading", 1e-6);
    if (cfg.cov_realizations < 1) throw ConfigError("stap.cov_realizations must be >= 1");

    const std::string rule = m.get_string("subspace.rule", "noise_floor");
    if (rule == "noise_floor")
        cfg.rank_rule.kind = subspace::RankRuleKind::NoiseFloor;
    else if (rule == "energy")
        cfg.rank_rule.kind = subspace::RankRuleKind::Energy;
    else if (rule == "fixed")
        cfg.rank_rule.kind = subspace::RankRuleKind::Fixed;
    else
        throw ConfigError("subspace.rule: expected noise_floor|energy|fixed, got " + rule);
    cfg.rank_rule.floor_factor = m.get_double("subspace.floor_factor", 10.0);
    cfg.rank_rule.energy_eps = m.get_double("subspace.energy_eps", 0.05);
    cfg.rank_rule.fixed_rank = m.get_int("subspace.fixed_rank", 0);
    const std::string comb = m.get_string("subspace.combine", "mean");
    if (comb == "mean")
        cfg.combine = subspace::BinCombine::MeanBins;
    else if (comb == "center")
        cfg.combine = subspace::BinCombine::CenterBin;
    else
        throw ConfigError("subspace.combine: expected mean|center, got " + comb);

    cfg.train_examples = m.get_int("train.examples", 4096);
    cfg.test_examples = m.get_int("train.test_examples", 512);
    cfg.fsl_examples = m.get_int("train.fsl_examples", 64);
    cfg.calib_examples = m.get_int("train.calib_examples", 256);
    if (cfg.train_examples < 1 || cfg.test_examples < 1 || cfg.fsl_examples < 1 ||
        cfg.calib_examples < 1)
        throw ConfigError("train: example counts must be >= 1");
    cfg.train_cfg.epochs = m.get_int("train.epochs", 30);
    cfg.train_cfg.batch_size = m.get_int("train.batch_size", 64);
    cfg.train_cfg.adam.lr = m.get_double("train.lr", 1e-3);
    cfg.fsl_cfg.epochs = m.get_int("fsl.epochs", 50);
    cfg.fsl_cfg.batch_size = m.get_int("fsl.batch_size", 64);
    cfg.fsl_cfg.adam.lr = m.get_double("fsl.lr", 5e-4);

    cfg.scnr_sweep_db = detail::parse_sweep(m.get_string("experiment.scnr_db", "-20:5:20"));
    std::sort(cfg.scnr_sweep_db.begin(), cfg.scnr_sweep_db.end());
    cfg.displacement_m = m.get_double("experiment.displacement", 1000.0);
    if (cfg.displacement_m <= 0.0) throw ConfigError("experiment.displacement must be > 0");
    cfg.master_seed = m.get_u64("experiment.seed", 1);
    cfg.out_dir = m.get_string("experiment.out_dir", "out");
    return cfg;
}

// Displacement compass, paper order.  (north, east) unit offsets.
inline const std::vector<std::pair<std::string, Vec3>>& compass_offsets() {
    static const double s = std::numbers::sqrt2 / 2.0;
    static const std::vector<std::pair<std::string, Vec3>> kOffsets = {
        {"N", {1, 0, 0}},   {"NW", {s, -s, 0}}, {"W", {0, -1, 0}}, {"SW", {-s, -s, 0}},
        {"S", {-1, 0, 0}},  {"SE", {-s, s, 0}}, {"E", {0, 1, 0}},  {"NE", {s, s, 0}},
    };
    return kOffsets;
}

inline std::vector<scene::Scenario> build_all_scenarios(const ExperimentConfig& cfg) {
    std::vector<scene::Scenario> out;
    out.push_back(scene::build_scenario(cfg.scene, cfg.geometry));
    for (const auto& [tag, unit] : compass_offsets())
        out.push_back(scene::displace_platform(out.front(), unit.x() * cfg.displacement_m,
                                               unit.y() * cfg.displacement_m, tag));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset container and STAPHMT1 file format (little-endian):
//   magic[8]="STAPHMT1" | u32 version=1 | u32 count | u32 bins | u32 az | u32 el
//   per example: f32 values[bins*az*el] (bin-major), f32 enc_label[3],
//                f32 cartesian_truth[3], f32 output_scnr_db, u32 truth_bin
// ---------------------------------------------------------------------------

struct Dataset {
    int n = 0, n_bins = 0, n_az = 0, n_el = 0;
    std::vector<float> tensors;  // n * bins*az*el
    std::vector<float> labels;   // n * 3, encoded to [-1,1]
    std::vector<Vec3> truth;     // platform-frame Cartesian, meters
    std::vector<float> scnr_db;  // per-example output SCNR
    std::vector<std::uint32_t> truth_bin;

    std::size_t cells() const {
        return static_cast<std::size_t>(n_bins) * n_az * n_el;
    }
    const float* tensor(int i) const { return tensors.data() + static_cast<std::size_t>(i) * cells(); }
    neural::DataView view() const {
        return {n, n_bins, n_az, n_el, tensors.data(), labels.data()};
    }
    double mean_output_scnr_db() const {
        if (n == 0) return kMinDb;
        double s = 0.0;
        for (float v : scnr_db) s += v;
        return s / n;
    }
};

inline constexpr char kDatasetMagic[8] = {'S', 'T', 'A', 'P', 'H', 'M', 'T', '1'};

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open dataset for writing: " + path);
    os.write(kDatasetMagic, 8);
    auto u32 = [&os](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    u32(1);
    u32(static_cast<std::uint32_t>(ds.n));
    u32(static_cast<std::uint32_t>(ds.n_bins));
    u32(static_cast<std::uint32_t>(ds.n_az));
    u32(static_cast<std::uint32_t>(ds.n_el));
    const std::size_t cells = ds.cells();
    for (int i = 0; i < ds.n; ++i) {
        os.write(reinterpret_cast<const char*>(ds.tensor(i)),
                 static_cast<std::streamsize>(cells * sizeof(float)));
        os.write(reinterpret_cast<const char*>(ds.labels.data() + static_cast<std::size_t>(i) * 3),
                 3 * sizeof(float));
        const float cart[3] = {static_cast<float>(ds.truth[static_cast<std::size_t>(i)].x()),
                               static_cast<float>(ds.truth[static_cast<std::size_t>(i)].y()),
                               static_cast<float>(ds.truth[static_cast<std::size_t>(i)].z())};
        os.write(reinterpret_cast<const char*>(cart), 3 * sizeof(float));
        os.write(reinterpret_cast<const char*>(&ds.scnr_db[static_cast<std::size_t>(i)]),
                 sizeof(float));
        os.write(reinterpret_cast<const char*>(&ds.truth_bin[static_cast<std::size_t>(i)]), 4);
    }
    if (!os) throw IoError("failed writing dataset: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset: " + path);
    std::size_t offset = 0;
    auto need = [&](void* dst, std::size_t bytes) {
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
        if (static_cast<std::size_t>(in.gcount()) != bytes)
            throw FormatError(path + ": truncated at byte offset " + std::to_string(offset));
        offset += bytes;
    };
    char magic[8];
    need(magic, 8);
    if (std::memcmp(magic, kDatasetMagic, 8) != 0)
        throw FormatError(path + ": not a STAPHMT1 dataset");
    std::uint32_t header[5];
    need(header, sizeof(header));
    if (header[0] != 1)
        throw FormatError(path + ": unsupported dataset version " + std::to_string(header[0]));
    Dataset ds;
    ds.n = static_cast<int>(header[1]);
    ds.n_bins = static_cast<int>(header[2]);
    ds.n_az = static_cast<int>(header[3]);
    ds.n_el = static_cast<int>(header[4]);
    if (ds.n_bins < 1 || ds.n_az < 1 || ds.n_el < 1 || ds.n < 0)
        throw FormatError(path + ": implausible dataset header");
    const std::size_t cells = ds.cells();
    ds.tensors.resize(static_cast<std::size_t>(ds.n) * cells);
    ds.labels.resize(static_cast<std::size_t>(ds.n) * 3);
    ds.truth.resize(static_cast<std::size_t>(ds.n));
    ds.scnr_db.resize(static_cast<std::size_t>(ds.n));
    ds.truth_bin.resize(static_cast<std::size_t>(ds.n));
    for (int i = 0; i < ds.n; ++i) {
        need(ds.tensors.data() + static_cast<std::size_t>(i) * cells, cells * sizeof(float));
        need(ds.labels.data() + static_cast<std::size_t>(i) * 3, 3 * sizeof(float));
        float cart[3];
        need(cart, sizeof(cart));
        ds.truth[static_cast<std::size_t>(i)] = Vec3{cart[0], cart[1], cart[2]};
        need(&ds.scnr_db[static_cast<std::size_t>(i)], sizeof(float));
        need(&ds.truth_bin[static_cast<std::size_t>(i)], 4);
    }
    return ds;
}

// Generate `count` labeled heatmap examples at the requested mean output
// SCNR.  Deterministic: every example derives its own seed chain from
// (master_seed, index), so thread count does not affect the result.
inline Dataset generate_dataset(const scene::Scenario& s, int count, double target_scnr_db,
                                std::uint64_t master_seed, int cov_realizations = 1600,
                                double loading_rel = 1e-6, int calib_examples = 256) {
    if (count < 1) throw std::invalid_argument("generate_dataset: count must be >= 1");
    const auto covs = stap::scenario_covariances(s, cov_realizations, loading_rel);
    const auto grid = stap::make_steering_grid(s, covs);
    const localize::BoundingBox box = s.label_box();

    // Calibrate RCS so the realized mean output SCNR tracks the request.
    scene::Scenario cal = s;
    const double mu = calibrate::calibrate_rcs(s, target_scnr_db, calib_examples,
                                               derive_seed(master_seed, {0xCA11}),
                                               cov_realizations, loading_rel);
    cal.config.rcs_range = s.config.rcs_range * (mu / s.config.rcs_mean);
    cal.config.rcs_mean = mu;

    Dataset ds;
    ds.n = count;
    ds.n_bins = s.config.num_bins;
    ds.n_az = s.n_az();
    ds.n_el = s.n_el();
    const std::size_t cells = ds.cells();
    ds.tensors.resize(static_cast<std::size_t>(count) * cells);
    ds.labels.resize(static_cast<std::size_t>(count) * 3);
    ds.truth.resize(static_cast<std::size_t>(count));
    ds.scnr_db.resize(static_cast<std::size_t>(count));
    ds.truth_bin.resize(static_cast<std::size_t>(count));

#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < count; ++i) {
        const auto iu = static_cast<std::uint64_t>(i);
        const scene::TargetTruth t = scene::sample_target(cal, derive_seed(master_seed, {iu, 1}));
        const auto returns = scene::simulate_returns(cal, &t, cal.config.num_realizations,
                                                     derive_seed(master_seed, {iu, 2}));
        const stap::HeatmapTensor hm = stap::build_heatmap(returns, covs, grid, &t);
        std::memcpy(ds.tensors.data() + static_cast<std::size_t>(i) * cells, hm.values.data(),
                    cells * sizeof(float));
        const Vec3 enc = localize::encode_label(t.cartesian, box);
        for (int a = 0; a < 3; ++a)
            ds.labels[static_cast<std::size_t>(i) * 3 + a] = static_cast<float>(enc[a]);
        ds.truth[static_cast<std::size_t>(i)] = t.cartesian;
        ds.scnr_db[static_cast<std::size_t>(i)] = static_cast<float>(hm.output_scnr_db);
        ds.truth_bin[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(t.range_bin);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Evaluation and rank statistics
// ---------------------------------------------------------------------------

struct EvalSummary {
    double err_namf = 0.0;  // cell-midpoint baseline AED, meters
    double err_cnn = 0.0;   // CNN AED, meters
};

inline EvalSummary evaluate(neural::Cnn<float>& net, const Dataset& ds,
                            const scene::Scenario& s) {
    if (ds.n < 1) throw std::invalid_argument("evaluate: empty dataset");
    const localize::GridSpec grid = s.grid_spec();
    if (grid.cells() != static_cast<int>(ds.cells()))
        throw std::invalid_argument("evaluate: dataset grid does not match scenario");
    const localize::BoundingBox box = s.label_box();

    std::vector<Vec3> base, pred;
    base.reserve(static_cast<std::size_t>(ds.n));
    for (int i = 0; i < ds.n; ++i) base.push_back(localize::peak_cell_midpoint(ds.tensor(i), grid));
    const std::vector<Vec3> raw = neural::predict(net, ds.view());
    pred.reserve(raw.size());
    for (const Vec3& e : raw) pred.push_back(localize::decode_label(e, box));

    EvalSummary out;
    out.err_namf = localize::avg_euclidean_error(base, ds.truth);
    out.err_cnn = localize::avg_euclidean_error(pred, ds.truth);
    return out;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman_rho: size mismatch");
    const int n = static_cast<int>(a.size());
    if (n < 2) throw std::invalid_argument("spearman_rho: need at least two points");
    auto ranks = [n](const std::vector<double>& x) {
        std::vector<int> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&x](int i, int j) { return x[static_cast<std::size_t>(i)] < x[static_cast<std::size_t>(j)]; });
        std::vector<double> r(static_cast<std::size_t>(n));
        int i = 0;
        while (i < n) {
            int j = i;
            while (j + 1 < n && x[static_cast<std::size_t>(idx[static_cast<std::size_t>(j + 1)])] ==
                                    x[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])])
                ++j;
            const double avg = 0.5 * (i + j) + 1.0;
            for (int k = i; k <= j; ++k) r[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (int i = 0; i < n; ++i) {
        ma += ra[static_cast<std::size_t>(i)];
        mb += rb[static_cast<std::size_t>(i)];
    }
    ma /= n;
    mb /= n;
    double num = 0, va = 0, vb = 0;
    for (int i = 0; i < n; ++i) {
        const double da = ra[static_cast<std::size_t>(i)] - ma;
        const double db = rb[static_cast<std::size_t>(i)] - mb;
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va <= 0.0 || vb <= 0.0)
        throw NumericError("spearman_rho: rank variance is zero (constant input)");
    return num / std::sqrt(va * vb);
}

// Monte-Carlo estimate of the cell-midpoint quantization floor: the AED a
// perfect cell classifier would incur for uniform targets.
inline double quantization_floor(const scene::Scenario& s, int draws, std::uint64_t seed) {
    const localize::GridSpec g = s.grid_spec();
    double sum = 0.0;
    for (int i = 0; i < draws; ++i) {
        const scene::TargetTruth t =
            scene::sample_target(s, derive_seed(seed, {static_cast<std::uint64_t>(i)}));
        const int bin = t.range_bin - s.first_bin;
        const int iaz = std::clamp(
            static_cast<int>(std::lround((t.az_deg - g.az0_deg) / g.az_step_deg)), 0, g.n_az - 1);
        const int jel = std::clamp(
            static_cast<int>(std::lround((t.el_deg - g.el0_deg) / g.el_step_deg)), 0, g.n_el - 1);
        const Vec3 mid = localize::sph_to_cart(g.first_range_mid + bin * g.range_step,
                                               g.az0_deg + iaz * g.az_step_deg,
                                               g.el0_deg + jel * g.el_step_deg);
        sum += (mid - t.cartesian).norm();
    }
    return sum / draws;
}

// ---------------------------------------------------------------------------
// Experiment protocol
// ---------------------------------------------------------------------------

struct ScenarioPoint {
    std::string tag;
    double scnr_db = 0.0;
    double err_namf = 0.0;
    double err_cnn = 0.0;
    double err_fsl = 0.0;
    double gain = 0.0;
    double gain_fsl = 0.0;
    double mean_output_scnr_db = 0.0;
};

struct ExperimentReport {
    std::vector<subspace::ChordalRow> chordal;  // displaced scenarios, paper order
    std::vector<ScenarioPoint> points;          // every scenario x sweep point
    double top_scnr_db = 0.0;
    double spearman_chordal_gain = 0.0;      // chordal distance vs pre-FSL gain
    double spearman_chordal_gain_fsl = 0.0;  // chordal distance vs post-FSL gain
    double origin_err_namf_top = 0.0;        // baseline AED on O at top SCNR
    double origin_quant_floor = 0.0;         // cell-midpoint floor on O
};

inline const ScenarioPoint& report_point(const ExperimentReport& r, const std::string& tag,
                                         double scnr_db) {
    for (const ScenarioPoint& p : r.points)
        if (p.tag == tag && std::abs(p.scnr_db - scnr_db) < 1e-9) return p;
    throw std::invalid_argument("report_point: no point for " + tag);
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    auto note = [log](const std::string& msg) {
        if (log != nullptr) (*log) << msg << std::endl;
    };
    const auto scenarios = build_all_scenarios(cfg);
    const scene::Scenario& origin = scenarios.front();

    ExperimentReport rep;
    rep.top_scnr_db = *std::max_element(cfg.scnr_sweep_db.begin(), cfg.scnr_sweep_db.end());
    rep.origin_quant_floor =
        quantization_floor(origin, 4096, derive_seed(cfg.master_seed, {0xF1007}));

    {
        std::vector<scene::Scenario> displaced(scenarios.begin() + 1, scenarios.end());
        rep.chordal = subspace::pairwise_chordal(origin, displaced, cfg.rank_rule,
                                                 cfg.cov_realizations, cfg.combine,
                                                 cfg.loading_rel);
        std::ostringstream msg;
        msg << "chordal distances:";
        for (const auto& row : rep.chordal) msg << " " << row.tag << "=" << row.distance;
        note(msg.str());
    }

    for (std::size_t si = 0; si < cfg.scnr_sweep_db.size(); ++si) {
        const double scnr = cfg.scnr_sweep_db[si];
        const auto su = static_cast<std::uint64_t>(si);
        note("scnr " + std::to_string(scnr) + " dB: generating training data");
        const Dataset train_ds =
            generate_dataset(origin, cfg.train_examples, scnr,
                             derive_seed(cfg.master_seed, {0xD5, su, 0}), cfg.cov_realizations,
                             cfg.loading_rel, cfg.calib_examples);

        neural::Cnn<float> net = neural::build_localizer_cnn<float>(
            train_ds.n_bins, train_ds.n_az, train_ds.n_el,
            derive_seed(cfg.master_seed, {0xD5, su, 1}));
        neural::TrainConfig tc = cfg.train_cfg;
        tc.shuffle_seed = derive_seed(cfg.master_seed, {0xD5, su, 2});
        note("scnr " + std::to_string(scnr) + " dB: training");
        const auto losses = neural::train(net, train_ds.view(), tc);
        if (!losses.empty())
            note("  final train loss " + std::to_string(losses.back()));

        for (std::size_t j = 0; j < scenarios.size(); ++j) {
            const scene::Scenario& s = scenarios[j];
            const auto ju = static_cast<std::uint64_t>(j);
            const Dataset test_ds =
                generate_dataset(s, cfg.test_examples, scnr,
                                 derive_seed(cfg.master_seed, {0xD5, su, 3, ju}),
                                 cfg.cov_realizations, cfg.loading_rel, cfg.calib_examples);
            const EvalSummary base_eval = evaluate(net, test_ds, s);

            const Dataset fsl_ds =
                generate_dataset(s, cfg.fsl_examples, scnr,
                                 derive_seed(cfg.master_seed, {0xD5, su, 4, ju}),
                                 cfg.cov_realizations, cfg.loading_rel, cfg.calib_examples);
            neural::Cnn<float> tuned = net.clone();
            neural::TrainConfig fc = cfg.fsl_cfg;
            fc.shuffle_seed = derive_seed(cfg.master_seed, {0xD5, su, 5, ju});
            neural::freeze_and_finetune(tuned, fsl_ds.view(), fc);
            const EvalSummary fsl_eval = evaluate(tuned, test_ds, s);

            ScenarioPoint p;
            p.tag = s.tag;
            p.scnr_db = scnr;
            p.err_namf = base_eval.err_namf;
            p.err_cnn = base_eval.err_cnn;
            p.err_fsl = fsl_eval.err_cnn;
            p.gain = localize::gain(p.err_namf, p.err_cnn);
            p.gain_fsl = localize::gain(p.err_namf, p.err_fsl);
            p.mean_output_scnr_db = test_ds.mean_output_scnr_db();
            rep.points.push_back(p);
            note("  " + s.tag + ": namf " + std::to_string(p.err_namf) + " m, cnn " +
                 std::to_string(p.err_cnn) + " m, fsl " + std::to_string(p.err_fsl) + " m");
        }
    }

    // Rank agreement at the top of the sweep, displaced scenarios only.
    std::vector<double> dist, gains, gains_fsl;
    for (const auto& row : rep.chordal) {
        const ScenarioPoint& p = report_point(rep, row.tag, rep.top_scnr_db);
        dist.push_back(row.distance);
        gains.push_back(p.gain);
        gains_fsl.push_back(p.gain_fsl);
    }
    rep.spearman_chordal_gain = spearman_rho(dist, gains);
    rep.spearman_chordal_gain_fsl = spearman_rho(dist, gains_fsl);
    rep.origin_err_namf_top = report_point(rep, "O", rep.top_scnr_db).err_namf;
    return rep;
}

// ---------------------------------------------------------------------------
// Report rendering (deterministic text -> byte-identical reruns)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

}  // namespace detail

inline std::string render_errors_csv(const ExperimentReport& rep) {
    std::string out =
        "scenario,scnr_db,err_namf_m,err_cnn_m,err_cnn_fsl_m,gain,gain_fsl,mean_output_scnr_db\n";
    for (const ScenarioPoint& p : rep.points) {
        out += p.tag;
        out += "," + detail::fmt("%.2f", p.scnr_db);
        out += "," + detail::fmt("%.6f", p.err_namf);
        out += "," + detail::fmt("%.6f", p.err_cnn);
        out += "," + detail::fmt("%.6f", p.err_fsl);
        out += "," + detail::fmt("%.6f", p.gain);
        out += "," + detail::fmt("%.6f", p.gain_fsl);
        out += "," + detail::fmt("%.3f", p.mean_output_scnr_db);
        out += "\n";
    }
    return out;
}

inline std::string render_chordal_csv(const ExperimentReport& rep) {
    std::string out =
        "scenario,chordal_distance,normalized_distance,mean_rank,gain_top_scnr,gain_fsl_top_scnr\n";
    for (const auto& row : rep.chordal) {
        const ScenarioPoint& p = report_point(rep, row.tag, rep.top_scnr_db);
        out += row.tag;
        out += "," + detail::fmt("%.8f", row.distance);
        out += "," + detail::fmt("%.8f", row.normalized);
        out += "," + detail::fmt("%.2f", row.mean_rank);
        out += "," + detail::fmt("%.6f", p.gain);
        out += "," + detail::fmt("%.6f", p.gain_fsl);
        out += "\n";
    }
    return out;
}

inline std::string render_summary(const ExperimentReport& rep) {
    std::ostringstream os;
    os << "displaced-platform localization experiment summary\n";
    os << "====================================================\n";
    os << "top of SCNR sweep: " << detail::fmt("%.2f", rep.top_scnr_db) << " dB\n\n";
    os << "chordal distance vs pre-FSL gain (Spearman): "
       << detail::fmt("%.4f", rep.spearman_chordal_gain) << "\n";
    os << "chordal distance vs post-FSL gain (Spearman): "
       << detail::fmt("%.4f", rep.spearman_chordal_gain_fsl) << "\n\n";
    const ScenarioPoint& o = report_point(rep, "O", rep.top_scnr_db);
    os << "matched (O) at top SCNR: baseline " << detail::fmt("%.2f", o.err_namf)
       << " m, cnn " << detail::fmt("%.2f", o.err_cnn) << " m, gain "
       << detail::fmt("%.3f", o.gain) << ", post-FSL gain " << detail::fmt("%.3f", o.gain_fsl)
       << "\n";
    os << "cell-midpoint quantization floor (O): "
       << detail::fmt("%.2f", rep.origin_quant_floor) << " m; baseline/floor ratio "
       << detail::fmt("%.3f", rep.origin_err_namf_top / rep.origin_quant_floor) << "\n\n";
    os << "scenario  chordal    gain@top   gain_fsl@top\n";
    for (const auto& row : rep.chordal) {
        const ScenarioPoint& p = report_point(rep, row.tag, rep.top_scnr_db);
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%-9s %-10.4f %-10.4f %-10.4f\n", row.tag.c_str(),
                      row.distance, p.gain, p.gain_fsl);
        os << buf;
    }
    return os.str();
}

// Minimal, dependency-free SVG line chart: AED vs SCNR for one scenario.
inline std::string render_svg(const std::string& tag, const std::vector<ScenarioPoint>& pts) {
    const int W = 640, H = 440, ml = 70, mr = 20, mt = 40, mb = 50;
    double xmin = 1e300, xmax = -1e300, ymax = 0.0;
    for (const auto& p : pts) {
        xmin = std::min(xmin, p.scnr_db);
        xmax = std::max(xmax, p.scnr_db);
        ymax = std::max({ymax, p.err_namf, p.err_cnn, p.err_fsl});
    }
    if (!(xmax > xmin)) xmax = xmin + 1.0;
    if (ymax <= 0.0) ymax = 1.0;
    ymax *= 1.05;
    auto X = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto Y = [&](double v) { return H - mb - v / ymax * (H - mt - mb); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">scenario "
       << tag << ": localization error vs output SCNR</text>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
       << H - mb << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
       << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = ymax * i / 4.0;
        os << "<text x=\"" << ml - 8 << "\" y=\"" << detail::fmt("%.1f", Y(v) + 4)
           << "\" text-anchor=\"end\" font-size=\"11\">" << detail::fmt("%.0f", v) << "</text>\n";
    }
    for (const auto& p : pts)
        os << "<text x=\"" << detail::fmt("%.1f", X(p.scnr_db)) << "\" y=\"" << H - mb + 18
           << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::fmt("%.0f", p.scnr_db)
           << "</text>\n";
    os << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 12
       << "\" text-anchor=\"middle\" font-size=\"12\">output SCNR (dB)</text>\n";
    os << "<text x=\"18\" y=\"" << (mt + H - mb) / 2
       << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 "
       << (mt + H - mb) / 2 << ")\">average Euclidean error (m)</text>\n";

    const struct {
        const char* name;
        const char* color;
        double ScenarioPoint::* field;
    } series[3] = {{"cell midpoint", "#d62728", &ScenarioPoint::err_namf},
                   {"cnn", "#1f77b4", &ScenarioPoint::err_cnn},
                   {"cnn + fsl", "#2ca02c", &ScenarioPoint::err_fsl}};
    for (int k = 0; k < 3; ++k) {
        os << "<polyline fill=\"none\" stroke=\"" << series[k].color
           << "\" stroke-width=\"2\" points=\"";
        for (const auto& p : pts)
            os << detail::fmt("%.1f", X(p.scnr_db)) << "," << detail::fmt("%.1f", Y(p.*series[k].field))
               << " ";
        os << "\"/>\n";
        for (const auto& p : pts)
            os << "<circle cx=\"" << detail::fmt("%.1f", X(p.scnr_db)) << "\" cy=\""
               << detail::fmt("%.1f", Y(p.*series[k].field)) << "\" r=\"3\" fill=\""
               << series[k].color << "\"/>\n";
        os << "<text x=\"" << W - mr - 150 << "\" y=\"" << mt + 16 * (k + 1)
           << "\" font-size=\"12\" fill=\"" << series[k].color << "\">" << series[k].name
           << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

// Writes errors.csv, chordal.csv, summary.txt, and one SVG per scenario.
// Each file's content is rendered fully before the file is opened, so a
// failure never leaves a partial report behind.
inline void write_reports(const ExperimentReport& rep, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);
    auto emit = [&](const std::string& name, const std::string& content) {
        const std::string path = out_dir + "/" + name;
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open report file: " + path);
        os.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!os) throw IoError("failed writing report file: " + path);
    };
    emit("errors.csv", render_errors_csv(rep));
    emit("chordal.csv", render_chordal_csv(rep));
    emit("summary.txt", render_summary(rep));

    std::vector<std::string> tags = {"O"};
    for (const auto& row : rep.chordal) tags.push_back(row.tag);
    for (const std::string& tag : tags) {
        std::vector<ScenarioPoint> pts;
        for (const ScenarioPoint& p : rep.points)
            if (p.tag == tag) pts.push_back(p);
        std::sort(pts.begin(), pts.end(),
                  [](const ScenarioPoint& a, const ScenarioPoint& b) { return a.scnr_db < b.scnr_db; });
        if (!pts.empty()) emit("aed_" + tag + ".svg", render_svg(tag, pts));
    }
}

// Rebuild a report from previously written CSVs (used by the `report`
// subcommand to re-render summary and SVGs).
inline ExperimentReport load_report_from_csv(const std::string& dir) {
    auto read_file = [](const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open report csv: " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(item);
        return out;
    };
    ExperimentReport rep;
    {
        std::stringstream ss(read_file(dir + "/errors.csv"));
        std::string line;
        if (!std::getline(ss, line)) throw FormatError(dir + "/errors.csv: empty file");
        while (std::getline(ss, line)) {
            if (line.empty()) continue;
            const auto f = split(line);
            if (f.size() != 8) throw FormatError(dir + "/errors.csv: expected 8 columns");
            ScenarioPoint p;
            p.tag = f[0];
            p.scnr_db = ConfigMap::parse_double(f[1], "errors.csv:scnr_db");
            p.err_namf = ConfigMap::parse_double(f[2], "errors.csv:err_namf_m");
            p.err_cnn = ConfigMap::parse_double(f[3], "errors.csv:err_cnn_m");
            p.err_fsl = ConfigMap::parse_double(f[4], "errors.csv:err_cnn_fsl_m");
            p.gain = ConfigMap::parse_double(f[5], "errors.csv:gain");
            p.gain_fsl = ConfigMap::parse_double(f[6], "errors.csv:gain_fsl");
            p.mean_output_scnr_db = ConfigMap::parse_double(f[7], "errors.csv:mean_output_scnr_db");
            rep.points.push_back(p);
        }
        if (rep.points.empty()) throw FormatError(dir + "/errors.csv: no rows");
    }
    {
        std::stringstream ss(read_file(dir + "/chordal.csv"));
        std::string line;
        if (!std::getline(ss, line)) throw FormatError(dir + "/chordal.csv: empty file");
        while (std::getline(ss, line)) {
            if (line.empty()) continue;
            const auto f = split(line);
            if (f.size() != 6) throw FormatError(dir + "/chordal.csv: expected 6 columns");
            subspace::ChordalRow row;
            row.tag = f[0];
            row.distance = ConfigMap::parse_double(f[1], "chordal.csv:chordal_distance");
            row.normalized = ConfigMap::parse_double(f[2], "chordal.csv:normalized_distance");
            row.mean_rank = ConfigMap::parse_double(f[3], "chordal.csv:mean_rank");
            rep.chordal.push_back(row);
        }
    }
    rep.top_scnr_db = -1e300;
    for (const auto& p : rep.points) rep.top_scnr_db = std::max(rep.top_scnr_db, p.scnr_db);
    std::vector<double> dist, gains, gains_fsl;
    for (const auto& row : rep.chordal) {
        const ScenarioPoint& p = report_point(rep, row.tag, rep.top_scnr_db);
        dist.push_back(row.distance);
        gains.push_back(p.gain);
        gains_fsl.push_back(p.gain_fsl);
    }
    if (dist.size() >= 2) {
        rep.spearman_chordal_gain = spearman_rho(dist, gains);
        rep.spearman_chordal_gain_fsl = spearman_rho(dist, gains_fsl);
    }
    const ScenarioPoint& o = report_point(rep, "O", rep.top_scnr_db);
    rep.origin_err_namf_top = o.err_namf;
    rep.origin_quant_floor = o.err_namf;  // floor is not persisted; reuse baseline
    return rep;
}

}  // namespace staploc::harness
