#pragma once

// Command-line front end. Subcommands cover the full workflow:
//   fixture -> gen-labels -> pair -> [refine] -> train -> eval
// plus predict and grasp-select utilities. Exit codes: 0 success, 1 runtime
// failure, 2 usage errors.

#include <CLI11.hpp>
#include <iostream>

#include "affgro/pipeline.hpp"

namespace affgro {

namespace detail {

inline Config assemble_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    Config cfg = Config::defaults();
    if (!config_path.empty()) cfg.merge(Config::load(config_path));
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
        cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    return cfg;
}

}  // namespace detail

inline int run_command(const std::vector<std::string>& args) {
    CLI::App app{"pseudo-label-supervised affordance grounding pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "config file (flat key=value lines)");
    app.add_option("--set", overrides, "config override, key=value (repeatable)");

    // fixture
    auto* cmd_fixture = app.add_subcommand("fixture", "generate the synthetic desk-scale dataset");
    std::string fx_out;
    FixtureSpec fx;
    cmd_fixture->add_option("--out", fx_out, "output dataset root")->required();
    cmd_fixture->add_option("--seed", fx.seed, "rng seed");
    cmd_fixture->add_option("--objects", fx.n_objects, "number of object classes");
    cmd_fixture->add_option("--affordances", fx.n_affordances, "number of affordance classes");
    cmd_fixture->add_option("--ego-train", fx.ego_train_per_class, "ego train images per class");
    cmd_fixture->add_option("--exo-train", fx.exo_train_per_class, "exo train images per class");
    cmd_fixture->add_option("--ego-test", fx.ego_test_per_class, "ego test images per class");
    cmd_fixture->add_option("--image-size", fx.image_size, "square image size");

    // gen-labels
    auto* cmd_labels = app.add_subcommand("gen-labels", "generate initial pseudo labels for ego train images");
    std::string gl_root, gl_out;
    cmd_labels->add_option("--root", gl_root, "dataset root")->required();
    cmd_labels->add_option("--labels", gl_out, "output labels directory")->required();

    // pair
    auto* cmd_pair = app.add_subcommand("pair", "build the exocentric pair index");
    std::string pr_root, pr_out;
    cmd_pair->add_option("--root", pr_root, "dataset root")->required();
    cmd_pair->add_option("--out", pr_out, "output pair index file (TSV)")->required();

    // refine
    auto* cmd_refine = app.add_subcommand("refine", "train the refinement stage and post-process labels");
    std::string rf_root, rf_labels, rf_pair, rf_out, rf_ckpt;
    std::uint64_t rf_seed = 1;
    cmd_refine->add_option("--root", rf_root, "dataset root")->required();
    cmd_refine->add_option("--labels", rf_labels, "initial labels directory")->required();
    cmd_refine->add_option("--pair", rf_pair, "pair index file")->required();
    cmd_refine->add_option("--out", rf_out, "output refined labels directory")->required();
    cmd_refine->add_option("--checkpoint-out", rf_ckpt, "optional refinement checkpoint path");
    cmd_refine->add_option("--seed", rf_seed, "rng seed");

    // train
    auto* cmd_train = app.add_subcommand("train", "supervised training on pseudo labels");
    std::string tr_root, tr_labels, tr_pair, tr_out, tr_seeds = "1";
    cmd_train->add_option("--root", tr_root, "dataset root")->required();
    cmd_train->add_option("--labels", tr_labels, "labels directory (initial or refined)")->required();
    cmd_train->add_option("--pair", tr_pair, "pair index file")->required();
    cmd_train->add_option("--out-dir", tr_out, "run directory for checkpoints and loss logs")->required();
    cmd_train->add_option("--seeds", tr_seeds, "comma-separated seeds (one training run each)");

    // eval
    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    std::string ev_root, ev_ckpt, ev_run_dir, ev_seeds, ev_report, ev_overlays;
    bool ev_force = false;
    cmd_eval->add_option("--root", ev_root, "dataset root")->required();
    cmd_eval->add_option("--checkpoint", ev_ckpt, "checkpoint file (single-run mode)");
    cmd_eval->add_option("--run-dir", ev_run_dir, "run directory from `train` (multi-seed mode)");
    cmd_eval->add_option("--seeds", ev_seeds, "seeds to evaluate from --run-dir");
    cmd_eval->add_option("--report", ev_report, "report path prefix")->required();
    cmd_eval->add_option("--overlays", ev_overlays, "directory for qualitative overlay images");
    cmd_eval->add_flag("--force", ev_force, "evaluate even if the config hash does not match");

    // predict
    auto* cmd_predict = app.add_subcommand("predict", "single image + query -> heatmap + overlay");
    std::string pd_ckpt, pd_image, pd_query, pd_out;
    cmd_predict->add_option("--checkpoint", pd_ckpt, "checkpoint file")->required();
    cmd_predict->add_option("--image", pd_image, "input image (PPM)")->required();
    cmd_predict->add_option("--query", pd_query, "affordance query text")->required();
    cmd_predict->add_option("--out", pd_out, "output path prefix")->required();

    // grasp-select
    auto* cmd_grasp = app.add_subcommand("grasp-select", "pick the grasp candidate with the highest heatmap value");
    std::string gs_heatmap, gs_candidates, gs_out;
    cmd_grasp->add_option("--heatmap", gs_heatmap, "heatmap file (PGM)")->required();
    cmd_grasp->add_option("--candidates", gs_candidates, "candidate file (TSV: id u v [score])")->required();
    cmd_grasp->add_option("--out", gs_out, "optional output file for the selection");

    std::vector<const char*> argv;
    argv.push_back("affgro");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 2;
    }

    try {
        const Config cfg = detail::assemble_config(config_path, overrides);

        if (cmd_fixture->parsed()) {
            fx.blur_sigma = cfg.num("label.blur_sigma");
            const auto data = generate_fixture(fx);
            write_fixture(data, fx_out);
            std::cout << "fixture: " << data.train.samples.size() << " train + " << data.test.samples.size()
                      << " test samples -> " << fx_out << "\n";
        } else if (cmd_labels->parsed()) {
            const auto rep = run_gen_labels(cfg, gl_root, gl_out);
            std::cout << "gen-labels: wrote " << rep.written << " labels (" << rep.degenerate << " degenerate, "
                      << rep.inverted << " inversion fixes) -> " << gl_out << "\n";
        } else if (cmd_pair->parsed()) {
            const auto index = run_pair(cfg, pr_root, pr_out);
            std::cout << "pair: indexed " << index.pools.size() << " ego images -> " << pr_out << "\n";
        } else if (cmd_refine->parsed()) {
            std::optional<std::filesystem::path> ckpt;
            if (!rf_ckpt.empty()) ckpt = rf_ckpt;
            const auto rep = run_refine(cfg, rf_root, rf_labels, rf_pair, rf_out, ckpt, rf_seed);
            std::cout << "refine: " << rep.refined << " refined (" << rep.fallback_used << " fallbacks), "
                      << rep.copied << " copied -> " << rf_out << "\n";
        } else if (cmd_train->parsed()) {
            const auto seeds = parse_seeds(tr_seeds);
            const auto res = run_train(cfg, tr_root, tr_labels, tr_pair, tr_out, seeds);
            for (std::size_t i = 0; i < res.seeds.size(); ++i)
                std::cout << "train: seed " << res.seeds[i] << " final l_kl "
                          << format_double(res.final_epochs[i].l_kl) << " -> " << res.checkpoints[i].string()
                          << "\n";
        } else if (cmd_eval->parsed()) {
            std::optional<std::filesystem::path> overlays;
            if (!ev_overlays.empty()) overlays = ev_overlays;
            std::vector<MetricReport> reports;
            if (!ev_ckpt.empty()) {
                reports.push_back(run_eval(cfg, ev_ckpt, ev_root, ev_force, overlays));
                atomic_write_file(ev_report + ".txt", reports.back().text());
                atomic_write_file(ev_report + ".kv", reports.back().key_values());
            } else if (!ev_run_dir.empty() && !ev_seeds.empty()) {
                for (std::uint64_t seed : parse_seeds(ev_seeds)) {
                    const auto ckpt =
                        std::filesystem::path(ev_run_dir) / ("checkpoint_s" + std::to_string(seed) + ".ckpt");
                    auto rep = run_eval(cfg, ckpt, ev_root, ev_force, overlays);
                    atomic_write_file(ev_report + "_s" + std::to_string(seed) + ".txt", rep.text());
                    atomic_write_file(ev_report + "_s" + std::to_string(seed) + ".kv", rep.key_values());
                    reports.push_back(std::move(rep));
                }
                const auto mean = mean_report(reports);
                atomic_write_file(ev_report + "_mean.txt", mean.text());
                atomic_write_file(ev_report + "_mean.kv", mean.key_values());
            } else {
                std::cerr << "eval: pass --checkpoint, or --run-dir together with --seeds\n";
                return 2;
            }
            for (const auto& rep : reports)
                std::cout << "eval: KLD " << format_double(rep.kld) << " SIM " << format_double(rep.sim) << " NSS "
                          << format_double(rep.nss) << " (" << rep.count << " samples)\n";
        } else if (cmd_predict->parsed()) {
            const auto hm = run_predict(pd_ckpt, pd_image, pd_query, pd_out);
            std::cout << "predict: heatmap sum " << format_double(grid_sum(hm.g)) << " -> " << pd_out << ".pgm\n";
        } else if (cmd_grasp->parsed()) {
            const auto heatmap = read_heatmap_pgm(gs_heatmap);
            const auto candidates = parse_grasp_candidates(read_file(gs_candidates));
            const auto best = select_grasp(heatmap, candidates);
            std::ostringstream line;
            line << best.id << "\t" << format_double(best.u) << "\t" << format_double(best.v) << "\n";
            if (!gs_out.empty()) atomic_write_file(gs_out, line.str());
            std::cout << "grasp-select: candidate " << best.id << " at (" << format_double(best.u) << ", "
                      << format_double(best.v) << ")\n";
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace affgro
