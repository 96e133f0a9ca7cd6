// staploc: command-line driver for the displaced-platform localization
// pipeline.  Subcommands cover scenario inspection, dataset generation,
// chordal analysis, CNN training / fine-tuning / evaluation, the full
// experiment protocol, and report re-rendering.
//
// Exit codes: 0 success, 2 configuration/argument error, 3 numeric failure,
// 4 I/O or file-format error.

#include "CLI11.hpp"
#include "staploc/harness.hpp"

#include <iostream>
#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using namespace staploc;

struct GlobalOpts {
    std::string config_path;
    std::vector<std::string> overrides;  // section.key=value
    std::optional<std::uint64_t> seed;
    std::string out_dir;
};

harness::ExperimentConfig load_config(const GlobalOpts& g) {
    harness::ConfigMap m = g.config_path.empty() ? harness::ConfigMap{}
                                                 : harness::ConfigMap::from_file(g.config_path);
    for (const std::string& ov : g.overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("--set expects section.key=value, got: " + ov);
        m.set(ov.substr(0, eq), ov.substr(eq + 1));
    }
    harness::ExperimentConfig cfg = harness::experiment_from(m);
    m.check_all_used();
    if (g.seed.has_value()) cfg.master_seed = *g.seed;
    if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
    return cfg;
}

scene::Scenario find_scenario(const harness::ExperimentConfig& cfg, const std::string& tag) {
    for (const auto& s : harness::build_all_scenarios(cfg))
        if (s.tag == tag) return s;
    throw ConfigError("unknown scenario tag: " + tag + " (expected O, N, NE, E, SE, S, SW, W, NW)");
}

int cmd_gen_scenario(const harness::ExperimentConfig& cfg) {
    std::cout << "tag,first_bin,standoff_m,r_min_m,r_max_m,az_min_deg,az_max_deg,el_min_deg,"
                 "el_max_deg,boresight_az_deg,patches\n";
    for (const auto& s : harness::build_all_scenarios(cfg)) {
        const auto& c = s.config;
        std::printf("%s,%d,%.3f,%.3f,%.3f,%.4f,%.4f,%.4f,%.4f,%.4f,%zu\n", s.tag.c_str(),
                    s.first_bin, s.standoff_m, c.r_min_m, c.r_max_m, c.az_min_deg, c.az_max_deg,
                    c.el_min_deg, c.el_max_deg, s.boresight_az_deg, s.patches.size());
    }
    return 0;
}

int cmd_gen_dataset(const harness::ExperimentConfig& cfg, const std::string& tag, int count,
                    double scnr_db, const std::string& out_path) {
    const scene::Scenario s = find_scenario(cfg, tag);
    const harness::Dataset ds =
        harness::generate_dataset(s, count, scnr_db, cfg.master_seed, cfg.cov_realizations,
                                  cfg.loading_rel, cfg.calib_examples);
    harness::save_dataset(out_path, ds);
    std::cout << "wrote " << ds.n << " examples (" << ds.n_bins << "x" << ds.n_az << "x"
              << ds.n_el << ", mean output SCNR " << ds.mean_output_scnr_db() << " dB) to "
              << out_path << "\n";
    return 0;
}

int cmd_chordal(const harness::ExperimentConfig& cfg) {
    const auto scenarios = harness::build_all_scenarios(cfg);
    std::vector<scene::Scenario> displaced(scenarios.begin() + 1, scenarios.end());
    const auto rows = subspace::pairwise_chordal(scenarios.front(), displaced, cfg.rank_rule,
                                                 cfg.cov_realizations, cfg.combine,
                                                 cfg.loading_rel);
    std::cout << "scenario,chordal_distance,normalized_distance,mean_rank\n";
    for (const auto& r : rows)
        std::printf("%s,%.8f,%.8f,%.2f\n", r.tag.c_str(), r.distance, r.normalized, r.mean_rank);
    return 0;
}

int cmd_train(const harness::ExperimentConfig& cfg, const std::string& data_path,
              const std::string& model_path) {
    const harness::Dataset ds = harness::load_dataset(data_path);
    neural::Cnn<float> net = neural::build_localizer_cnn<float>(
        ds.n_bins, ds.n_az, ds.n_el, derive_seed(cfg.master_seed, {0x11}));
    neural::TrainConfig tc = cfg.train_cfg;
    tc.shuffle_seed = derive_seed(cfg.master_seed, {0x12});
    const auto losses = neural::train(net, ds.view(), tc);
    neural::save_checkpoint(net, model_path);
    std::cout << "trained " << tc.epochs << " epochs on " << ds.n << " examples; final loss "
              << (losses.empty() ? 0.0 : losses.back()) << "; saved " << model_path << "\n";
    return 0;
}

int cmd_fsl(const harness::ExperimentConfig& cfg, const std::string& model_in,
            const std::string& data_path, const std::string& model_out) {
    neural::Cnn<float> net = neural::load_checkpoint<float>(model_in);
    const harness::Dataset ds = harness::load_dataset(data_path);
    neural::TrainConfig fc = cfg.fsl_cfg;
    fc.shuffle_seed = derive_seed(cfg.master_seed, {0x13});
    const auto losses = neural::freeze_and_finetune(net, ds.view(), fc);
    neural::save_checkpoint(net, model_out);
    std::cout << "fine-tuned " << fc.epochs << " epochs on " << ds.n << " examples; final loss "
              << (losses.empty() ? 0.0 : losses.back()) << "; saved " << model_out << "\n";
    return 0;
}

int cmd_eval(const harness::ExperimentConfig& cfg, const std::string& model_path,
             const std::string& data_path, const std::string& tag) {
    neural::Cnn<float> net = neural::load_checkpoint<float>(model_path);
    const harness::Dataset ds = harness::load_dataset(data_path);
    const scene::Scenario s = find_scenario(cfg, tag);
    const harness::EvalSummary e = harness::evaluate(net, ds, s);
    std::printf("scenario %s: baseline AED %.3f m, cnn AED %.3f m, gain %.4f\n", tag.c_str(),
                e.err_namf, e.err_cnn, localize::gain(e.err_namf, e.err_cnn));
    return 0;
}

int cmd_run_experiment(const harness::ExperimentConfig& cfg, bool quiet) {
    const harness::ExperimentReport rep =
        harness::run_experiment(cfg, quiet ? nullptr : &std::cerr);
    harness::write_reports(rep, cfg.out_dir);
    std::cout << "experiment complete; reports in " << cfg.out_dir << "\n"
              << "spearman(chordal, gain) = " << rep.spearman_chordal_gain << "\n"
              << "spearman(chordal, gain_fsl) = " << rep.spearman_chordal_gain_fsl << "\n";
    return 0;
}

int cmd_report(const std::string& dir) {
    const harness::ExperimentReport rep = harness::load_report_from_csv(dir);
    harness::write_reports(rep, dir);
    std::cout << "re-rendered reports in " << dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"displaced-platform radar localization pipeline"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config_path, "INI config file");
    app.add_option("--set", g.overrides, "override config values as section.key=value");
    std::uint64_t seed_arg = 0;
    auto* seed_opt = app.add_option("--seed", seed_arg, "master seed override");
    app.add_option("--out,--out-dir", g.out_dir, "output directory override");
    int threads = 0;
    app.add_option("--threads", threads,
                   "worker threads for dataset generation (0 = library default); results are "
                   "seeded per example and do not depend on this");

    auto* sc_scen = app.add_subcommand("gen-scenario", "print scenario geometry as CSV");

    auto* sc_data = app.add_subcommand("gen-dataset", "generate a labeled heatmap dataset");
    std::string tag = "O", out_path = "dataset.bin";
    int count = 512;
    double scnr_db = 20.0;
    sc_data->add_option("--scenario", tag, "scenario tag (O or compass direction)");
    sc_data->add_option("--count", count, "number of examples")->check(CLI::PositiveNumber);
    sc_data->add_option("--scnr", scnr_db, "target mean output SCNR in dB");
    sc_data->add_option("--out", out_path, "output dataset path")->required();

    auto* sc_chordal = app.add_subcommand("chordal", "print chordal distances as CSV");

    auto* sc_train = app.add_subcommand("train", "train the CNN localizer on a dataset");
    std::string data_path, model_path = "model.bin";
    sc_train->add_option("--data", data_path, "training dataset path")->required();
    sc_train->add_option("--out", model_path, "output checkpoint path")->required();

    auto* sc_fsl = app.add_subcommand("fsl", "few-shot fine-tune a trained checkpoint");
    std::string model_in, model_out = "model_fsl.bin";
    sc_fsl->add_option("--model", model_in, "input checkpoint path")->required();
    sc_fsl->add_option("--data", data_path, "fine-tuning dataset path")->required();
    sc_fsl->add_option("--out", model_out, "output checkpoint path")->required();

    auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint against a dataset");
    sc_eval->add_option("--model", model_in, "checkpoint path")->required();
    sc_eval->add_option("--data", data_path, "dataset path")->required();
    sc_eval->add_option("--scenario", tag, "scenario tag the dataset was generated for");

    auto* sc_run = app.add_subcommand("run-experiment", "run the full experiment protocol");
    bool quiet = false;
    sc_run->add_flag("--quiet", quiet, "suppress progress logging on stderr");

    auto* sc_report = app.add_subcommand("report", "re-render summary and plots from CSVs");
    std::string report_dir = "out";
    sc_report->add_option("--dir", report_dir, "directory holding errors.csv and chordal.csv");

    try {
        app.parse(argc, argv);
        if (*seed_opt) g.seed = seed_arg;
#ifdef _OPENMP
        if (threads > 0) omp_set_num_threads(threads);
#else
        (void)threads;
#endif

        if (*sc_report) return cmd_report(report_dir);
        const staploc::harness::ExperimentConfig cfg = load_config(g);
        if (*sc_scen) return cmd_gen_scenario(cfg);
        if (*sc_data) return cmd_gen_dataset(cfg, tag, count, scnr_db, out_path);
        if (*sc_chordal) return cmd_chordal(cfg);
        if (*sc_train) return cmd_train(cfg, data_path, model_path);
        if (*sc_fsl) return cmd_fsl(cfg, model_in, data_path, model_out);
        if (*sc_eval) return cmd_eval(cfg, model_in, data_path, tag);
        if (*sc_run) return cmd_run_experiment(cfg, quiet);
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const staploc::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "argument error: " << e.what() << "\n";
        return 2;
    } catch (const staploc::IoError& e) {  // includes FormatError
        std::cerr << e.what() << "\n";
        return 4;
    } catch (const staploc::NumericError& e) {
        std::cerr << e.what() << "\n";
        return 3;
    }
}
