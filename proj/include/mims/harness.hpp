#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mims/config.hpp"
#include "mims/model.hpp"
#include "mims/synth.hpp"

namespace mims {

struct MetricsReport {
    double auroc = 0;
    std::map<std::string, double> per_scale_auroc; // bin label -> auroc
    std::size_t parameter_count = 0;
    double wall_time_sec = 0;
    std::uint64_t seed = 0;
    std::string variant, pool;
    int epochs = 0;
    double final_train_loss = 0;

    nlohmann::json to_json(bool include_wall_time = true) const;
};

struct TrainResult {
    MimsModel model;
    MetricsReport report;
};

// Bag-level optimization with bce_with_logits; instance-based schemes
// (max-inst, patchcls-mean) train on per-instance logits instead. Stem
// parameters step at lr * backbone_lr_factor.
TrainResult train_on(const ExperimentConfig& config, const Dataset& train_set,
                     const Dataset& test_set);
// Loads <dataset_root>/train and <dataset_root>/test.
TrainResult train(const ExperimentConfig& config);

double bag_score(MimsModel& model, const Bag& bag);
double evaluate_auroc(MimsModel& model, const Dataset& test,
                      std::map<std::string, double>* per_scale = nullptr);

struct PoolComparisonRow {
    std::string scheme; // mean | max | max-inst | topk<k>
    double auroc = 0;
    double paper_reference = -1; // Table-2 context value, printed not asserted
};

// Trains one model per scheme on identical data and seed.
// Scheme names: mean, max, max-inst, patchcls-mean, topk (config k), topk<k>.
std::vector<PoolComparisonRow> compare_pools(const ExperimentConfig& base,
                                             const std::vector<std::string>& schemes,
                                             const Dataset& train_set, const Dataset& test_set);
double paper_reference_auroc(const std::string& scheme); // -1 when none listed

struct FeatureCorrResult {
    std::vector<std::pair<double, double>> mean_r; // (scale, mean Pearson r)
    int images_used = 0;
    int skipped = 0; // zero-variance features
};

// Mean Pearson correlation between stem features of each image and of its
// rescaled copy mapped back onto the original feature grid.
FeatureCorrResult feature_corr(MimsModel& model, const Dataset& data,
                               const std::vector<double>& scales, int max_images = 100);
double paper_reference_corr(double scale); // Supp-Table-1 context value or -1

// Finite-difference sweep over every differentiable op; returns
// (op name, max relative error) pairs. `cases_per_op` random instances each.
std::vector<std::pair<std::string, double>> gradcheck_suite(std::uint64_t seed, int cases_per_op);
double gradcheck_tolerance(); // 1e-2 in 32-bit, 1e-5 in the 64-bit build

} // namespace mims
