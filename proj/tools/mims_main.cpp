#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "mims/harness.hpp"
#include "mims/localization.hpp"
#include "mims/metrics.hpp"
#include "mims/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void apply_thread_cap() {
#ifdef _OPENMP
    if (const char* env = std::getenv("MIMS_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
#endif
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void print_report(const mims::MetricsReport& r) {
    std::cout << "variant " << r.variant << "  pool " << r.pool << "  seed " << r.seed
              << "  epochs " << r.epochs << "\n";
    std::cout << "parameters " << r.parameter_count << "  train loss " << std::fixed
              << std::setprecision(4) << r.final_train_loss << "  wall " << std::setprecision(1)
              << r.wall_time_sec << "s\n";
    std::cout << "test AUROC " << std::setprecision(4) << r.auroc << "\n";
    for (const auto& [bin, v] : r.per_scale_auroc)
        std::cout << "  scale " << bin << "  AUROC " << std::setprecision(4) << v << "\n";
    std::cout.unsetf(std::ios::fixed);
}

mims::ExperimentConfig config_from_cli(const CLI::App* cmd, const std::string& config_path) {
    mims::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = mims::ExperimentConfig::load_file(config_path);
    auto override_str = [&](const char* flag, std::string& field) {
        if (cmd->count(flag)) field = cmd->get_option(flag)->as<std::string>();
    };
    auto override_int = [&](const char* flag, int& field) {
        if (cmd->count(flag)) field = cmd->get_option(flag)->as<int>();
    };
    auto override_dbl = [&](const char* flag, double& field) {
        if (cmd->count(flag)) field = cmd->get_option(flag)->as<double>();
    };
    override_str("--variant", cfg.variant);
    override_str("--pool", cfg.pool);
    override_str("--dataset", cfg.dataset_root);
    override_str("--optimizer", cfg.optimizer);
    override_int("--k", cfg.k);
    override_int("--epochs", cfg.epochs);
    override_int("--batch-bags", cfg.batch_bags);
    override_dbl("--lr", cfg.lr);
    override_dbl("--backbone-lr-factor", cfg.backbone_lr_factor);
    if (cmd->count("--seed")) cfg.seed = cmd->get_option("--seed")->as<std::uint64_t>();
    if (cmd->count("--scales")) {
        cfg.scales.clear();
        for (const auto& s : split_list(cmd->get_option("--scales")->as<std::string>()))
            cfg.scales.push_back(std::stod(s));
    }
    cfg.validate();
    return cfg;
}

void add_config_flags(CLI::App* cmd, std::string& config_path) {
    cmd->add_option("--config", config_path, "experiment config JSON");
    cmd->add_option("--variant", "model variant")->type_name("NAME");
    cmd->add_option("--pool", "pooling scheme")->type_name("NAME");
    cmd->add_option("--dataset", "dataset root directory")->type_name("DIR");
    cmd->add_option("--optimizer", "adam or sgd");
    cmd->add_option("--k", "top-k pool size")->type_name("INT");
    cmd->add_option("--epochs", "training epochs")->type_name("INT");
    cmd->add_option("--batch-bags", "bags per optimizer step")->type_name("INT");
    cmd->add_option("--lr", "learning rate")->type_name("FLOAT");
    cmd->add_option("--backbone-lr-factor", "stem learning-rate multiplier")->type_name("FLOAT");
    cmd->add_option("--seed", "run seed")->type_name("UINT");
    cmd->add_option("--scales", "comma-separated MSConv scale factors");
}

mims::Dataset load_split(const std::string& root, const std::string& split) {
    fs::path p(root);
    if (!split.empty() && fs::exists(p / split / "manifest.csv")) p /= split;
    return mims::load_dataset(p.string());
}

int run(int argc, char** argv) {
    CLI::App app{"multi-instance multi-scale CNN workbench"};
    app.require_subcommand(1);
    bool as_json = false;
    app.add_flag("--json", as_json, "machine-readable output");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic bag dataset");
    std::string gen_out;
    std::uint64_t gen_seed = 7;
    int train_bags = 400, test_bags = 200;
    mims::SyntheticSpec spec;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--train-bags", train_bags, "bags in the train split");
    gen->add_option("--test-bags", test_bags, "bags in the test split");
    gen->add_option("--image-size", spec.image_h, "instance height and width");
    gen->add_option("--inst-min", spec.inst_min, "min instances per bag");
    gen->add_option("--inst-max", spec.inst_max, "max instances per bag");
    gen->add_option("--roi-radius", spec.roi_base_radius, "ring base radius in pixels");
    gen->add_option("--scale-min", spec.roi_scale_min, "min ROI scale factor");
    gen->add_option("--scale-max", spec.roi_scale_max, "max ROI scale factor");
    gen->add_option("--noise", spec.noise_sigma, "pixel noise sigma");
    gen->add_option("--positive-fraction", spec.positive_fraction, "fraction of positive bags");
    gen->add_flag("--stratify-scales", spec.stratify_scales, "cycle ROI scales through the bins");

    // train
    auto* tr = app.add_subcommand("train", "train a model and report test AUROC");
    std::string tr_config, tr_ckpt, tr_report;
    add_config_flags(tr, tr_config);
    tr->add_option("--ckpt-out", tr_ckpt, "checkpoint output path");
    tr->add_option("--report-out", tr_report, "metrics report JSON path");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_dataset, ev_split = "test";
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--dataset", ev_dataset, "dataset root")->required();
    ev->add_option("--split", ev_split, "split subdirectory (default test)");

    // compare-pools
    auto* cp = app.add_subcommand("compare-pools", "train one model per aggregation scheme");
    std::string cp_config, cp_schemes = "mean,max,max-inst,topk2,topk3,topk4,topk5", cp_csv;
    add_config_flags(cp, cp_config);
    cp->add_option("--schemes", cp_schemes, "comma-separated scheme list");
    cp->add_option("--csv-out", cp_csv, "write the comparison table as CSV");

    // heatmap
    auto* hm = app.add_subcommand("heatmap", "emit localization heatmaps for a checkpoint");
    std::string hm_ckpt, hm_dataset, hm_out, hm_split = "test";
    int hm_class = 1, hm_max_bags = -1;
    hm->add_option("--ckpt", hm_ckpt, "checkpoint path")->required();
    hm->add_option("--dataset", hm_dataset, "dataset root")->required();
    hm->add_option("--out", hm_out, "output directory")->required();
    hm->add_option("--split", hm_split, "split subdirectory (default test)");
    hm->add_option("--class", hm_class, "interested class (0 or 1)");
    hm->add_option("--max-bags", hm_max_bags, "cap on processed bags");

    // feature-corr
    auto* fc = app.add_subcommand("feature-corr", "stem feature correlation across scales");
    std::string fc_ckpt, fc_dataset, fc_scales = "0.5,0.75,1.0,2.0", fc_split = "test";
    int fc_max_images = 100;
    fc->add_option("--ckpt", fc_ckpt, "checkpoint path")->required();
    fc->add_option("--dataset", fc_dataset, "dataset root")->required();
    fc->add_option("--scales", fc_scales, "comma-separated scale factors");
    fc->add_option("--split", fc_split, "split subdirectory (default test)");
    fc->add_option("--max-images", fc_max_images, "instances to average over");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op");
    int gc_cases = 20;
    std::uint64_t gc_seed = 1;
    gc->add_option("--cases", gc_cases, "random instances per op");
    gc->add_option("--seed", gc_seed, "suite seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e); // prints the message and usage
        return 1;
    }

    if (gen->parsed()) {
        spec.image_w = spec.image_h;
        spec.n_bags = train_bags;
        mims::Dataset train_set = mims::generate(spec, gen_seed, 0);
        mims::save_dataset(train_set, (fs::path(gen_out) / "train").string());
        spec.n_bags = test_bags;
        mims::Dataset test_set =
            mims::generate(spec, gen_seed, static_cast<std::uint64_t>(train_bags));
        mims::save_dataset(test_set, (fs::path(gen_out) / "test").string());
        json j{{"out", gen_out},
               {"seed", gen_seed},
               {"train_bags", train_bags},
               {"test_bags", test_bags}};
        if (as_json)
            std::cout << j.dump() << "\n";
        else
            std::cout << "wrote " << train_bags << " train / " << test_bags << " test bags to "
                      << gen_out << "\n";
        return 0;
    }

    if (tr->parsed()) {
        mims::ExperimentConfig cfg = config_from_cli(tr, tr_config);
        mims::TrainResult result = mims::train(cfg);
        if (!tr_ckpt.empty()) mims::save_checkpoint(result.model, tr_ckpt);
        if (!tr_report.empty()) {
            // report files stay byte-deterministic; wall time goes to stdout
            std::ofstream out(tr_report);
            out << result.report.to_json(false).dump(2) << "\n";
        }
        if (as_json)
            std::cout << result.report.to_json(true).dump() << "\n";
        else
            print_report(result.report);
        return 0;
    }

    if (ev->parsed()) {
        mims::MimsModel model = mims::load_checkpoint(ev_ckpt);
        mims::Dataset data = load_split(ev_dataset, ev_split);
        std::map<std::string, double> per_scale;
        const double a = mims::evaluate_auroc(model, data, &per_scale);
        if (as_json) {
            json j{{"auroc", a}, {"per_scale_auroc", per_scale}};
            std::cout << j.dump() << "\n";
        } else {
            std::cout << "AUROC " << std::setprecision(4) << a << " on " << data.bags.size()
                      << " bags\n";
            for (const auto& [bin, v] : per_scale)
                std::cout << "  scale " << bin << "  AUROC " << v << "\n";
        }
        return 0;
    }

    if (cp->parsed()) {
        mims::ExperimentConfig cfg = config_from_cli(cp, cp_config);
        mims::Dataset train_set = load_split(cfg.dataset_root, "train");
        mims::Dataset test_set = load_split(cfg.dataset_root, "test");
        auto rows = mims::compare_pools(cfg, split_list(cp_schemes), train_set, test_set);
        json j = json::array();
        std::ostringstream csv;
        csv << "scheme,auroc,paper_reference_cirrus\n";
        if (!as_json)
            std::cout << std::left << std::setw(16) << "scheme" << std::setw(10) << "auroc"
                      << "paper(Cirrus)\n";
        for (const auto& r : rows) {
            csv << r.scheme << "," << r.auroc << ","
                << (r.paper_reference >= 0 ? std::to_string(r.paper_reference) : "") << "\n";
            j.push_back({{"scheme", r.scheme},
                         {"auroc", r.auroc},
                         {"paper_reference", r.paper_reference}});
            if (!as_json) {
                std::cout << std::left << std::setw(16) << r.scheme << std::setw(10)
                          << std::setprecision(4) << r.auroc;
                if (r.paper_reference >= 0) std::cout << r.paper_reference;
                std::cout << "\n";
            }
        }
        if (!as_json)
            std::cout << "(paper column: Table-2 Cirrus values, context only, never asserted)\n";
        if (!cp_csv.empty()) {
            std::ofstream out(cp_csv);
            out << csv.str();
        }
        if (as_json) std::cout << j.dump() << "\n";
        return 0;
    }

    if (hm->parsed()) {
        mims::MimsModel model = mims::load_checkpoint(hm_ckpt);
        mims::Dataset data = load_split(hm_dataset, hm_split);
        json emitted = json::array();
        int bags_done = 0, files = 0;
        for (const auto& bag : data.bags) {
            if (hm_max_bags >= 0 && bags_done >= hm_max_bags) break;
            auto maps = mims::localize_bag(model, bag, hm_class, hm_out);
            for (const auto& e : maps) {
                emitted.push_back({{"bag", bag.id},
                                   {"instance", e.instance},
                                   {"prob", e.prob},
                                   {"argmax", {e.argmax_x, e.argmax_y}},
                                   {"heat", e.heat_path}});
                ++files;
            }
            ++bags_done;
        }
        if (as_json)
            std::cout << emitted.dump() << "\n";
        else
            std::cout << "emitted " << files << " heatmaps from " << bags_done << " bags into "
                      << hm_out << "\n";
        return 0;
    }

    if (fc->parsed()) {
        mims::MimsModel model = mims::load_checkpoint(fc_ckpt);
        mims::Dataset data = load_split(fc_dataset, fc_split);
        std::vector<double> scales;
        for (const auto& s : split_list(fc_scales)) scales.push_back(std::stod(s));
        auto result = mims::feature_corr(model, data, scales, fc_max_images);
        json j{{"images_used", result.images_used}, {"skipped", result.skipped}};
        json per_scale = json::array();
        if (!as_json)
            std::cout << std::left << std::setw(8) << "scale" << std::setw(12) << "pearson_r"
                      << "paper(ResNet-101)\n";
        for (const auto& [s, r] : result.mean_r) {
            const double ref = mims::paper_reference_corr(s);
            per_scale.push_back({{"scale", s}, {"mean_r", r}, {"paper_reference", ref}});
            if (!as_json) {
                std::cout << std::left << std::setw(8) << s << std::setw(12)
                          << std::setprecision(4) << r;
                if (ref >= 0) std::cout << ref;
                std::cout << "\n";
            }
        }
        if (!as_json && result.skipped)
            std::cout << "skipped " << result.skipped << " zero-variance images\n";
        j["per_scale"] = per_scale;
        if (as_json) std::cout << j.dump() << "\n";
        return 0;
    }

    if (gc->parsed()) {
        auto results = mims::gradcheck_suite(gc_seed, gc_cases);
        const double tol = mims::gradcheck_tolerance();
        bool ok = true;
        json j = json::array();
        for (const auto& [name, err] : results) {
            const bool pass = err < tol;
            ok = ok && pass;
            j.push_back({{"op", name}, {"max_rel_error", err}, {"pass", pass}});
            if (!as_json)
                std::cout << std::left << std::setw(24) << name << std::scientific
                          << std::setprecision(3) << err << (pass ? "  ok" : "  FAIL") << "\n"
                          << std::defaultfloat;
        }
        if (as_json) std::cout << j.dump() << "\n";
        if (!as_json) std::cout << (ok ? "all ops passed" : "gradcheck FAILED") << " (tolerance "
                                << tol << ")\n";
        return ok ? 0 : 2;
    }
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    try {
        return run(argc, argv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
