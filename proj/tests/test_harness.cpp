#include "staploc/harness.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace staploc;
using namespace staploc::harness;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
    const fs::path d = fs::temp_directory_path() / "staploc_harness_test";
    fs::create_directories(d);
    return d;
}

std::string write_tmp(const std::string& name, const std::string& content) {
    const fs::path p = tmp_dir() / name;
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os << content;
    os.close();
    return p.string();
}

Dataset tiny_dataset(int n = 3) {
    Dataset ds;
    ds.n = n;
    ds.n_bins = 2;
    ds.n_az = 3;
    ds.n_el = 2;
    const std::size_t cells = ds.cells();
    ds.tensors.resize(static_cast<std::size_t>(n) * cells);
    ds.labels.resize(static_cast<std::size_t>(n) * 3);
    for (std::size_t i = 0; i < ds.tensors.size(); ++i)
        ds.tensors[i] = 0.125f * static_cast<float>(i) - 1.0f;
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
        ds.labels[i] = static_cast<float>(i % 5) * 0.25f - 0.5f;
    for (int i = 0; i < n; ++i) {
        ds.truth.push_back(Vec3{0.5 + i, -1.25 * i, 1000.0 + 16.0 * i});
        ds.scnr_db.push_back(3.5f - i);
        ds.truth_bin.push_back(static_cast<std::uint32_t>(51 + i));
    }
    return ds;
}

ExperimentReport fake_report() {
    ExperimentReport rep;
    subspace::ChordalRow n_row, w_row;
    n_row.tag = "N";
    n_row.distance = 0.125;
    n_row.normalized = 0.03125;
    n_row.mean_rank = 4.0;
    w_row.tag = "W";
    w_row.distance = 0.5;
    w_row.normalized = 0.125;
    w_row.mean_rank = 4.0;
    rep.chordal = {n_row, w_row};
    for (const char* tag : {"O", "N", "W"})
        for (double scnr : {0.0, 5.0}) {
            ScenarioPoint p;
            p.tag = tag;
            p.scnr_db = scnr;
            p.err_namf = 30.0 + scnr;
            p.err_cnn = (p.tag == "O" ? 20.0 : p.tag == "N" ? 22.0 : 26.0) + scnr;
            p.err_fsl = p.err_cnn - 1.0;
            p.gain = p.err_namf / p.err_cnn;
            p.gain_fsl = p.err_namf / p.err_fsl;
            p.mean_output_scnr_db = scnr + 0.25;
            rep.points.push_back(p);
        }
    rep.top_scnr_db = 5.0;
    rep.origin_quant_floor = 27.5;
    rep.origin_err_namf_top = 35.0;
    rep.spearman_chordal_gain = -1.0;
    rep.spearman_chordal_gain_fsl = -1.0;
    return rep;
}

}  // namespace

TEST(Harness, ConfigParsesSectionsCommentsAndWhitespace) {
    const std::string path = write_tmp("ok.ini",
                                       "# leading comment\n"
                                       "top_key = 7\n"
                                       "[scene]\n"
                                       "  r_min = 14000.5   ; trailing comment\n"
                                       "  clutter_seed=42\n"
                                       "\n"
                                       "[experiment]\n"
                                       "out_dir = results/run1 # comment\n");
    ConfigMap cfg = ConfigMap::from_file(path);
    EXPECT_EQ(cfg.get_int("top_key", -1), 7);
    EXPECT_DOUBLE_EQ(cfg.get_double("scene.r_min", 0.0), 14000.5);
    EXPECT_EQ(cfg.get_u64("scene.clutter_seed", 0), 42u);
    EXPECT_EQ(cfg.get_string("experiment.out_dir", ""), "results/run1");
    EXPECT_EQ(cfg.get_string("missing.key", "fallback"), "fallback");
    EXPECT_TRUE(cfg.has("scene.r_min"));
    EXPECT_FALSE(cfg.has("scene.r_max"));

    // CLI-style override replaces the file value.
    cfg.set("scene.r_min", "15000");
    EXPECT_DOUBLE_EQ(cfg.get_double("scene.r_min", 0.0), 15000.0);
}

TEST(Harness, ConfigRejectsMalformedFiles) {
    EXPECT_THROW(ConfigMap::from_file(write_tmp("bad1.ini", "[scene\nr_min = 1\n")), ConfigError);
    EXPECT_THROW(ConfigMap::from_file(write_tmp("bad2.ini", "just a bare line\n")), ConfigError);
    EXPECT_THROW(ConfigMap::from_file(write_tmp("bad3.ini", "= 5\n")), ConfigError);
    EXPECT_THROW(ConfigMap::from_file((tmp_dir() / "does_not_exist.ini").string()), IoError);
}

TEST(Harness, ConfigReportsTypeErrorsWithKeyName) {
    ConfigMap cfg;
    cfg.set("scene.num_bins", "five");
    cfg.set("scene.r_min", "1.2.3");
    cfg.set("experiment.seed", "xyz");
    try {
        cfg.get_int("scene.num_bins", 0);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("scene.num_bins"), std::string::npos);
    }
    EXPECT_THROW(cfg.get_double("scene.r_min", 0.0), ConfigError);
    EXPECT_THROW(cfg.get_u64("experiment.seed", 0), ConfigError);
    // Trailing junk after a valid prefix is rejected too.
    cfg.set("scene.noise_power", "1.5w");
    EXPECT_THROW(cfg.get_double("scene.noise_power", 0.0), ConfigError);
}

TEST(Harness, ConfigFlagsUnknownKeys) {
    ConfigMap cfg;
    cfg.set("scene.r_min", "14553");
    cfg.set("scene.r_mni", "14553");  // typo never read
    (void)cfg.get_double("scene.r_min", 0.0);
    try {
        cfg.check_all_used();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("scene.r_mni"), std::string::npos);
    }
    (void)cfg.get_double("scene.r_mni", 0.0);
    EXPECT_NO_THROW(cfg.check_all_used());
}

TEST(Harness, ExperimentConfigDefaultsMatchDeskScale) {
    const ExperimentConfig cfg = experiment_from(ConfigMap{});
    EXPECT_EQ(cfg.train_examples, 4096);
    EXPECT_EQ(cfg.test_examples, 512);
    EXPECT_EQ(cfg.fsl_examples, 64);
    EXPECT_EQ(cfg.cov_realizations, 1600);
    EXPECT_EQ(cfg.train_cfg.epochs, 30);
    EXPECT_EQ(cfg.fsl_cfg.epochs, 50);
    EXPECT_DOUBLE_EQ(cfg.train_cfg.adam.lr, 1e-3);
    EXPECT_DOUBLE_EQ(cfg.fsl_cfg.adam.lr, 5e-4);
    EXPECT_DOUBLE_EQ(cfg.displacement_m, 1000.0);
    ASSERT_EQ(cfg.scnr_sweep_db.size(), 9u);
    EXPECT_DOUBLE_EQ(cfg.scnr_sweep_db.front(), -20.0);
    EXPECT_DOUBLE_EQ(cfg.scnr_sweep_db.back(), 20.0);
    EXPECT_EQ(cfg.rank_rule.kind, subspace::RankRuleKind::NoiseFloor);
    EXPECT_EQ(cfg.combine, subspace::BinCombine::MeanBins);
    EXPECT_DOUBLE_EQ(cfg.scene.r_min_m, 14553.0);
    EXPECT_EQ(cfg.geometry.num_channels, 16);
}

TEST(Harness, ExperimentConfigAppliesOverridesAndValidates) {
    ConfigMap m;
    m.set("subspace.rule", "energy");
    m.set("subspace.combine", "center");
    m.set("experiment.scnr_db", "5,0,-5");
    m.set("train.examples", "128");
    const ExperimentConfig cfg = experiment_from(m);
    EXPECT_EQ(cfg.rank_rule.kind, subspace::RankRuleKind::Energy);
    EXPECT_EQ(cfg.combine, subspace::BinCombine::CenterBin);
    EXPECT_EQ(cfg.train_examples, 128);
    // Sweep values are sorted ascending regardless of input order.
    ASSERT_EQ(cfg.scnr_sweep_db.size(), 3u);
    EXPECT_DOUBLE_EQ(cfg.scnr_sweep_db[0], -5.0);
    EXPECT_DOUBLE_EQ(cfg.scnr_sweep_db[2], 5.0);
    EXPECT_NO_THROW(m.check_all_used());

    ConfigMap bad1;
    bad1.set("subspace.rule", "pca");
    EXPECT_THROW(experiment_from(bad1), ConfigError);
    ConfigMap bad2;
    bad2.set("experiment.displacement", "0");
    EXPECT_THROW(experiment_from(bad2), ConfigError);
    ConfigMap bad3;
    bad3.set("train.examples", "0");
    EXPECT_THROW(experiment_from(bad3), ConfigError);
}

TEST(Harness, ParseSweepBothForms) {
    using detail::parse_sweep;
    const auto r1 = parse_sweep("-20:5:20");
    ASSERT_EQ(r1.size(), 9u);
    EXPECT_DOUBLE_EQ(r1[0], -20.0);
    EXPECT_DOUBLE_EQ(r1[8], 20.0);
    const auto r2 = parse_sweep("1:0.5:2");
    ASSERT_EQ(r2.size(), 3u);
    EXPECT_DOUBLE_EQ(r2[1], 1.5);
    const auto r3 = parse_sweep("3,1,2");
    ASSERT_EQ(r3.size(), 3u);
    EXPECT_DOUBLE_EQ(r3[0], 3.0);  // comma list preserves order here
    const auto r4 = parse_sweep("7");
    ASSERT_EQ(r4.size(), 1u);
    EXPECT_THROW(parse_sweep("5:0:10"), ConfigError);
    EXPECT_THROW(parse_sweep("10:1:5"), ConfigError);
    EXPECT_THROW(parse_sweep("5:10"), ConfigError);
    EXPECT_THROW(parse_sweep(""), ConfigError);
    EXPECT_THROW(parse_sweep("1,two,3"), ConfigError);
}

TEST(Harness, CompassOffsetsArePaperOrderedUnitVectors) {
    const auto& offs = compass_offsets();
    ASSERT_EQ(offs.size(), 8u);
    const char* want[8] = {"N", "NW", "W", "SW", "S", "SE", "E", "NE"};
    for (int i = 0; i < 8; ++i) {
        EXPECT_EQ(offs[static_cast<std::size_t>(i)].first, want[i]);
        EXPECT_NEAR(offs[static_cast<std::size_t>(i)].second.norm(), 1.0, 1e-12);
        EXPECT_DOUBLE_EQ(offs[static_cast<std::size_t>(i)].second.z(), 0.0);
    }
    EXPECT_DOUBLE_EQ(offs[0].second.x(), 1.0);   // N points north
    EXPECT_DOUBLE_EQ(offs[6].second.y(), 1.0);   // E points east
    EXPECT_NEAR(offs[1].second.x(), std::numbers::sqrt2 / 2.0, 1e-15);
    EXPECT_NEAR(offs[1].second.y(), -std::numbers::sqrt2 / 2.0, 1e-15);
}

TEST(Harness, BuildAllScenariosHasOriginPlusCompass) {
    ExperimentConfig cfg = experiment_from(ConfigMap{});
    const auto scen = build_all_scenarios(cfg);
    ASSERT_EQ(scen.size(), 9u);
    EXPECT_EQ(scen[0].tag, "O");
    EXPECT_EQ(scen[1].tag, "N");
    EXPECT_EQ(scen[8].tag, "NE");
    EXPECT_NEAR(scen[1].config.platform_position.x() - scen[0].config.platform_position.x(),
                1000.0, 1e-9);
    EXPECT_NEAR((scen[5].config.platform_position - scen[0].config.platform_position).norm(),
                1000.0, 1e-9);
}

TEST(Harness, DatasetRoundTripIsBitExact) {
    const Dataset ds = tiny_dataset();
    const std::string path = (tmp_dir() / "roundtrip.bin").string();
    save_dataset(path, ds);
    const Dataset rd = load_dataset(path);
    EXPECT_EQ(rd.n, ds.n);
    EXPECT_EQ(rd.n_bins, ds.n_bins);
    EXPECT_EQ(rd.n_az, ds.n_az);
    EXPECT_EQ(rd.n_el, ds.n_el);
    ASSERT_EQ(rd.tensors.size(), ds.tensors.size());
    EXPECT_EQ(std::memcmp(rd.tensors.data(), ds.tensors.data(),
                          ds.tensors.size() * sizeof(float)), 0);
    EXPECT_EQ(std::memcmp(rd.labels.data(), ds.labels.data(), ds.labels.size() * sizeof(float)), 0);
    EXPECT_EQ(rd.truth_bin, ds.truth_bin);
    for (int i = 0; i < ds.n; ++i) {
        // Truth is persisted as float32; the chosen values are exactly representable.
        EXPECT_EQ(rd.truth[static_cast<std::size_t>(i)], ds.truth[static_cast<std::size_t>(i)]);
        EXPECT_EQ(rd.scnr_db[static_cast<std::size_t>(i)], ds.scnr_db[static_cast<std::size_t>(i)]);
    }

    const Dataset empty = tiny_dataset(0);
    const std::string epath = (tmp_dir() / "empty.bin").string();
    save_dataset(epath, empty);
    const Dataset re = load_dataset(epath);
    EXPECT_EQ(re.n, 0);
    EXPECT_EQ(re.n_az, 3);
    EXPECT_DOUBLE_EQ(re.mean_output_scnr_db(), kMinDb);
}

TEST(Harness, DatasetLoadRejectsCorruptFiles) {
    const Dataset ds = tiny_dataset();
    const std::string good = (tmp_dir() / "good.bin").string();
    save_dataset(good, ds);

    // Wrong magic.
    {
        std::ifstream in(good, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        std::string bytes = ss.str();
        bytes[0] = 'X';
        const std::string p = write_tmp("badmagic.bin", bytes);
        try {
            load_dataset(p);
            FAIL() << "expected FormatError";
        } catch (const FormatError& e) {
            EXPECT_NE(std::string(e.what()).find("not a STAPHMT1"), std::string::npos);
        }
    }
    // Unsupported version.
    {
        std::ifstream in(good, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        std::string bytes = ss.str();
        bytes[8] = 2;  // version field low byte
        const std::string p = write_tmp("badver.bin", bytes);
        EXPECT_THROW(load_dataset(p), FormatError);
    }
    // Truncation inside the second example names the byte offset.
    {
        std::ifstream in(good, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        std::string bytes = ss.str();
        bytes.resize(bytes.size() - 10);
        const std::string p = write_tmp("trunc.bin", bytes);
        try {
            load_dataset(p);
            FAIL() << "expected FormatError";
        } catch (const FormatError& e) {
            EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
        }
    }
    // Implausible header.
    {
        std::ifstream in(good, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        std::string bytes = ss.str();
        bytes[16] = 0;  // n_bins = 0
        const std::string p = write_tmp("badhdr.bin", bytes);
        EXPECT_THROW(load_dataset(p), FormatError);
    }
}

TEST(Harness, SpearmanMatchesHandComputedOracles) {
    EXPECT_NEAR(spearman_rho({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-12);
    EXPECT_NEAR(spearman_rho({1, 2, 3, 4}, {9, 7, 5, 3}), -1.0, 1e-12);
    // Monotone transform invariance: ranks only.
    EXPECT_NEAR(spearman_rho({1, 2, 3, 4}, {1, 8, 27, 64}), 1.0, 1e-12);
    // Tied pair gets the average rank: hand-computed 1.5/sqrt(3).
    EXPECT_NEAR(spearman_rho({1, 1, 2}, {1, 2, 3}), 1.5 / std::sqrt(3.0), 1e-12);
    // One swap in five: rho = 1 - 6*2/(5*24) = 0.9.
    EXPECT_NEAR(spearman_rho({1, 2, 3, 4, 5}, {1, 3, 2, 4, 5}), 0.9, 1e-12);
    EXPECT_THROW(spearman_rho({1, 2}, {1}), std::invalid_argument);
    EXPECT_THROW(spearman_rho({1}, {1}), std::invalid_argument);
    EXPECT_THROW(spearman_rho({2, 2, 2}, {1, 2, 3}), NumericError);
}

TEST(Harness, QuantizationFloorMatchesIndependentOracle) {
    scene::ScenarioConfig c;
    const scene::Scenario s = scene::build_scenario(c, scene::ArrayGeometry{});
    const double floor = quantization_floor(s, 4096, 99);
    // Independent Monte-Carlo oracle for the desk grid: 27.49 +/- 0.03 m.
    EXPECT_NEAR(floor, 27.49, 0.5);
}

TEST(Harness, GenerateDatasetIsDeterministicAndCalibrated) {
    scene::ScenarioConfig c;
    const scene::Scenario s = scene::build_scenario(c, scene::ArrayGeometry{});
    const int n = 48;
    const Dataset a = generate_dataset(s, n, 10.0, 77, 400, 1e-6, 64);
    const Dataset b = generate_dataset(s, n, 10.0, 77, 400, 1e-6, 64);
    ASSERT_EQ(a.tensors.size(), b.tensors.size());
    EXPECT_EQ(std::memcmp(a.tensors.data(), b.tensors.data(),
                          a.tensors.size() * sizeof(float)), 0);
    EXPECT_EQ(std::memcmp(a.labels.data(), b.labels.data(), a.labels.size() * sizeof(float)), 0);
    EXPECT_EQ(a.truth_bin, b.truth_bin);

    EXPECT_EQ(a.n, n);
    EXPECT_EQ(a.n_bins, 5);
    EXPECT_EQ(a.n_az, 26);
    EXPECT_EQ(a.n_el, 21);
    EXPECT_NEAR(a.mean_output_scnr_db(), 10.0, 1.5);
    for (float v : a.labels) {
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
    for (std::uint32_t tb : a.truth_bin) {
        EXPECT_GE(tb, 51u);
        EXPECT_LE(tb, 55u);
    }

    const Dataset other = generate_dataset(s, n, 10.0, 78, 400, 1e-6, 64);
    EXPECT_NE(std::memcmp(a.tensors.data(), other.tensors.data(),
                          a.tensors.size() * sizeof(float)), 0);
    EXPECT_THROW(generate_dataset(s, 0, 10.0, 1, 400, 1e-6, 64), std::invalid_argument);
}

TEST(Harness, EvaluateComputesBaselineAndModelErrors) {
    scene::ScenarioConfig c;
    const scene::Scenario s = scene::build_scenario(c, scene::ArrayGeometry{});
    const Dataset ds = generate_dataset(s, 32, 15.0, 5, 400, 1e-6, 64);
    neural::Cnn<float> net = neural::build_localizer_cnn<float>(ds.n_bins, ds.n_az, ds.n_el, 11);
    const EvalSummary e = evaluate(net, ds, s);
    EXPECT_GT(e.err_namf, 1.0);
    EXPECT_LT(e.err_namf, 200.0);
    EXPECT_GT(e.err_cnn, 1.0);    // untrained network is far from truth
    EXPECT_LT(e.err_cnn, 3000.0);  // but bounded by the decode box scale

    Dataset empty;
    EXPECT_THROW(evaluate(net, empty, s), std::invalid_argument);

    scene::ScenarioConfig c2 = c;
    c2.el_max_deg = -3.95;  // 16 elevation cells instead of 21
    const scene::Scenario s2 = scene::build_scenario(c2, scene::ArrayGeometry{});
    EXPECT_THROW(evaluate(net, ds, s2), std::invalid_argument);
}

TEST(Harness, ErrorsCsvHasHeaderAndOneRowPerPoint) {
    const ExperimentReport rep = fake_report();
    const std::string csv = render_errors_csv(rep);
    std::stringstream ss(csv);
    std::string line;
    std::getline(ss, line);
    EXPECT_EQ(line,
              "scenario,scnr_db,err_namf_m,err_cnn_m,err_cnn_fsl_m,gain,gain_fsl,"
              "mean_output_scnr_db");
    int rows = 0;
    while (std::getline(ss, line))
        if (!line.empty()) ++rows;
    EXPECT_EQ(rows, static_cast<int>(rep.points.size()));
    EXPECT_NE(csv.find("O,0.00,30.000000,20.000000"), std::string::npos);
}

TEST(Harness, SvgHasThreeSeriesAndLegend) {
    const ExperimentReport rep = fake_report();
    std::vector<ScenarioPoint> pts;
    for (const auto& p : rep.points)
        if (p.tag == "O") pts.push_back(p);
    const std::string svg = render_svg("O", pts);
    std::size_t polylines = 0, pos = 0;
    while ((pos = svg.find("<polyline", pos)) != std::string::npos) {
        ++polylines;
        pos += 9;
    }
    EXPECT_EQ(polylines, 3u);
    EXPECT_NE(svg.find("cell midpoint"), std::string::npos);
    EXPECT_NE(svg.find("cnn + fsl"), std::string::npos);
    EXPECT_NE(svg.find("output SCNR (dB)"), std::string::npos);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
}

TEST(Harness, WriteReportsRoundTripsThroughCsv) {
    const ExperimentReport rep = fake_report();
    const std::string dir = (tmp_dir() / "reports").string();
    write_reports(rep, dir);
    EXPECT_TRUE(fs::exists(fs::path(dir) / "errors.csv"));
    EXPECT_TRUE(fs::exists(fs::path(dir) / "chordal.csv"));
    EXPECT_TRUE(fs::exists(fs::path(dir) / "summary.txt"));
    EXPECT_TRUE(fs::exists(fs::path(dir) / "aed_O.svg"));
    EXPECT_TRUE(fs::exists(fs::path(dir) / "aed_N.svg"));
    EXPECT_TRUE(fs::exists(fs::path(dir) / "aed_W.svg"));

    const ExperimentReport rt = load_report_from_csv(dir);
    ASSERT_EQ(rt.points.size(), rep.points.size());
    ASSERT_EQ(rt.chordal.size(), rep.chordal.size());
    EXPECT_DOUBLE_EQ(rt.top_scnr_db, 5.0);
    for (std::size_t i = 0; i < rep.points.size(); ++i) {
        EXPECT_EQ(rt.points[i].tag, rep.points[i].tag);
        EXPECT_NEAR(rt.points[i].err_cnn, rep.points[i].err_cnn, 1e-6);
        EXPECT_NEAR(rt.points[i].gain, rep.points[i].gain, 1e-6);
    }
    EXPECT_NEAR(rt.chordal[0].distance, 0.125, 1e-8);
    EXPECT_NEAR(rt.chordal[1].distance, 0.5, 1e-8);
    // Chordal up, gain down across {N, W}: perfect anti-correlation.
    EXPECT_NEAR(rt.spearman_chordal_gain, -1.0, 1e-12);

    // A second render of the same report is byte-identical.
    const std::string csv1 = render_errors_csv(rep);
    const std::string csv2 = render_errors_csv(rep);
    EXPECT_EQ(csv1, csv2);
    const std::string sum = render_summary(rep);
    EXPECT_NE(sum.find("Spearman"), std::string::npos);
    EXPECT_NE(sum.find("quantization floor"), std::string::npos);
}

TEST(Harness, ReportPointLookupThrowsOnMissingTag) {
    const ExperimentReport rep = fake_report();
    EXPECT_NO_THROW(report_point(rep, "N", 5.0));
    EXPECT_THROW(report_point(rep, "Z", 5.0), std::invalid_argument);
    EXPECT_THROW(report_point(rep, "N", 7.0), std::invalid_argument);
}
