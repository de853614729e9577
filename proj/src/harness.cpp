#include "mims/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "mims/metrics.hpp"
#include "mims/rng.hpp"

namespace fs = std::filesystem;

namespace mims {

nlohmann::json MetricsReport::to_json(bool include_wall_time) const {
    nlohmann::json j;
    j["auroc"] = auroc;
    j["per_scale_auroc"] = per_scale_auroc;
    j["parameter_count"] = parameter_count;
    if (include_wall_time) j["wall_time_sec"] = wall_time_sec;
    j["seed"] = seed;
    j["variant"] = variant;
    j["pool"] = pool;
    j["epochs"] = epochs;
    j["final_train_loss"] = final_train_loss;
    return j;
}

namespace {

double sigmoid_of(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

NodePtr bag_loss(MimsModel& model, const Bag& bag) {
    BagForward fw = model.forward(bag);
    const real y = static_cast<real>(bag.label);
    if (model.scheme() == PoolScheme::patchcls_mean) {
        // every slice inherits the bag label; mean of per-instance losses
        const int n = fw.instance_logits->value.dim(0);
        return bce_with_logits(fw.instance_logits, Tensor::full({n, 1}, y));
    }
    return bce_with_logits(fw.logit, Tensor::full({1, 1}, y));
}

} // namespace

double bag_score(MimsModel& model, const Bag& bag) {
    BagForward fw = model.forward(bag);
    if (model.scheme() == PoolScheme::patchcls_mean) {
        const Tensor& logits = fw.instance_logits->value;
        double s = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i)
            s += sigmoid_of(static_cast<double>(logits.at(i)));
        return s / static_cast<double>(logits.size());
    }
    return sigmoid_of(static_cast<double>(fw.logit->value.at(0)));
}

double evaluate_auroc(MimsModel& model, const Dataset& test,
                      std::map<std::string, double>* per_scale) {
    const bool was_training = model.training();
    model.set_training(false);
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(test.bags.size());
    for (const auto& bag : test.bags) {
        scores.push_back(bag_score(model, bag));
        labels.push_back(bag.label);
    }
    model.set_training(was_training);
    const double overall = auroc(scores, labels);

    if (per_scale && test.truth.size() == test.bags.size()) {
        const auto& bins = scale_bins();
        for (std::size_t bi = 0; bi < bins.size(); ++bi) {
            std::vector<double> s;
            std::vector<int> l;
            for (std::size_t i = 0; i < test.bags.size(); ++i) {
                if (test.bags[i].label == 0) {
                    s.push_back(scores[i]);
                    l.push_back(0);
                } else if (scale_bin_of(test.truth[i]) == static_cast<int>(bi)) {
                    s.push_back(scores[i]);
                    l.push_back(1);
                }
            }
            const bool both = std::count(l.begin(), l.end(), 1) > 0 &&
                              std::count(l.begin(), l.end(), 0) > 0;
            if (both) (*per_scale)[bins[bi].label] = auroc(s, l);
        }
    }
    return overall;
}

TrainResult train_on(const ExperimentConfig& config, const Dataset& train_set,
                     const Dataset& test_set) {
    config.validate();
    if (train_set.bags.empty()) throw std::runtime_error("train: empty training set");
    const auto t0 = std::chrono::steady_clock::now();

    MimsModel model(config);
    Adam adam(static_cast<real>(config.lr), static_cast<real>(config.beta1),
              static_cast<real>(config.beta2), static_cast<real>(config.adam_eps));
    const bool use_adam = config.optimizer == "adam";

    std::vector<std::size_t> order(train_set.bags.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double epoch_loss = 0.0;
    model.set_training(true);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng.uniform_int(i);
            std::swap(order[i - 1], order[j]);
        }
        epoch_loss = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t nb = std::min(static_cast<std::size_t>(config.batch_bags),
                                            order.size() - done);
            for (std::size_t b = 0; b < nb; ++b) {
                NodePtr loss = bag_loss(model, train_set.bags[order[done + b]]);
                epoch_loss += static_cast<double>(loss->value.at(0));
                backward(smul(loss, real(1) / static_cast<real>(nb)));
            }
            if (use_adam)
                adam.step(model.parameters());
            else
                sgd_step(model.parameters(), static_cast<real>(config.lr));
            done += nb;
        }
        epoch_loss /= static_cast<double>(order.size());
    }

    TrainResult out{std::move(model), {}};
    out.report.seed = config.seed;
    out.report.variant = config.variant;
    out.report.pool = config.pool;
    out.report.epochs = config.epochs;
    out.report.final_train_loss = epoch_loss;
    out.report.parameter_count = out.model.parameter_count();
    if (!test_set.bags.empty())
        out.report.auroc = evaluate_auroc(out.model, test_set, &out.report.per_scale_auroc);
    out.report.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

TrainResult train(const ExperimentConfig& config) {
    if (config.dataset_root.empty()) throw std::runtime_error("train: no dataset_root configured");
    const fs::path root(config.dataset_root);
    if (!fs::exists(root / "train" / "manifest.csv"))
        throw std::runtime_error("train: missing dataset at " + (root / "train").string());
    Dataset train_set = load_dataset((root / "train").string());
    Dataset test_set;
    if (fs::exists(root / "test" / "manifest.csv")) test_set = load_dataset((root / "test").string());
    return train_on(config, train_set, test_set);
}

double paper_reference_auroc(const std::string& scheme) {
    if (scheme == "mean") return 0.829;
    if (scheme == "max") return 0.960;
    if (scheme == "max-inst") return 0.975;
    if (scheme == "topk2") return 0.980;
    if (scheme == "topk3") return 0.980;
    if (scheme == "topk4") return 0.986;
    if (scheme == "topk5" || scheme == "topk") return 0.986;
    return -1;
}

namespace {

ExperimentConfig config_for_scheme(const ExperimentConfig& base, const std::string& scheme) {
    ExperimentConfig c = base;
    if (scheme == "mean" || scheme == "max" || scheme == "max-inst" || scheme == "patchcls-mean" ||
        scheme == "topk") {
        c.pool = scheme == "topk" ? "topk" : scheme;
    } else if (scheme.rfind("topk", 0) == 0) {
        c.pool = "topk";
        try {
            c.k = std::stoi(scheme.substr(4));
        } catch (...) {
            throw std::invalid_argument("unknown scheme '" + scheme + "'");
        }
    } else {
        throw std::invalid_argument("unknown scheme '" + scheme + "'");
    }
    c.validate();
    return c;
}

} // namespace

std::vector<PoolComparisonRow> compare_pools(const ExperimentConfig& base,
                                             const std::vector<std::string>& schemes,
                                             const Dataset& train_set, const Dataset& test_set) {
    std::vector<PoolComparisonRow> rows;
    for (const auto& scheme : schemes) {
        ExperimentConfig c = config_for_scheme(base, scheme);
        TrainResult r = train_on(c, train_set, test_set);
        rows.push_back({scheme, r.report.auroc, paper_reference_auroc(scheme)});
    }
    return rows;
}

double paper_reference_corr(double scale) {
    if (scale == 2.0) return 0.261;
    if (scale == 0.75) return 0.451;
    if (scale == 0.5) return 0.257;
    if (scale == 1.0) return 1.0;
    return -1;
}

FeatureCorrResult feature_corr(MimsModel& model, const Dataset& data,
                               const std::vector<double>& scales, int max_images) {
    FeatureCorrResult out;
    const bool was_training = model.training();
    model.set_training(false);

    std::vector<Tensor> images;
    for (const auto& bag : data.bags) {
        for (const auto& inst : bag.instances) {
            if (static_cast<int>(images.size()) >= max_images) break;
            images.push_back(inst);
        }
        if (static_cast<int>(images.size()) >= max_images) break;
    }
    out.images_used = static_cast<int>(images.size());

    std::vector<double> sums(scales.size(), 0.0);
    std::vector<int> counts(scales.size(), 0);
    for (const auto& inst : images) {
        const Shape& sh = inst.shape();
        Tensor x4 = inst.reshape({1, sh[0], sh[1], sh[2]});
        NodePtr base = model.stem_forward(constant(x4));
        const Tensor& f0 = base->value;
        std::vector<double> ref(f0.size());
        for (std::size_t i = 0; i < f0.size(); ++i) ref[i] = static_cast<double>(f0.at(i));

        for (std::size_t si = 0; si < scales.size(); ++si) {
            const double s = scales[si];
            Tensor fs;
            if (s == 1.0) {
                fs = f0;
            } else {
                NodePtr scaled = model.stem_forward(constant(bilinear_resize_tensor(x4, s, s)));
                fs = bilinear_resize_tensor(scaled->value,
                                            static_cast<double>(f0.dim(2)) / scaled->value.dim(2),
                                            static_cast<double>(f0.dim(3)) / scaled->value.dim(3));
                if (fs.dim(2) != f0.dim(2) || fs.dim(3) != f0.dim(3))
                    throw std::logic_error("feature_corr: regrid missed the feature grid");
            }
            std::vector<double> cur(fs.size());
            for (std::size_t i = 0; i < fs.size(); ++i) cur[i] = static_cast<double>(fs.at(i));
            const double r = pearson(ref, cur);
            if (std::isnan(r)) {
                ++out.skipped;
            } else {
                sums[si] += r;
                ++counts[si];
            }
        }
    }
    model.set_training(was_training);
    for (std::size_t si = 0; si < scales.size(); ++si)
        out.mean_r.emplace_back(scales[si], counts[si] ? sums[si] / counts[si]
                                                       : std::nan(""));
    return out;
}

} // namespace mims
