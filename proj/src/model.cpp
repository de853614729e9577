#include "mims/model.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "mims/rng.hpp"

namespace mims {

Tensor stack_instances(const std::vector<Tensor>& instances, const std::string& bag_id) {
    if (instances.empty()) throw std::invalid_argument("bag " + bag_id + ": no instances");
    const Shape& s0 = instances[0].shape();
    if (s0.size() != 3)
        throw std::invalid_argument("bag " + bag_id + ": instances must be [c,h,w], got " +
                                    shape_str(s0));
    for (const auto& t : instances)
        if (t.shape() != s0)
            throw std::invalid_argument("bag " + bag_id + ": instance shape " + shape_str(t.shape()) +
                                        " differs from " + shape_str(s0));
    const int n = static_cast<int>(instances.size());
    Tensor out({n, s0[0], s0[1], s0[2]});
    const std::size_t per = instances[0].size();
    for (int i = 0; i < n; ++i)
        std::copy(instances[static_cast<std::size_t>(i)].data(),
                  instances[static_cast<std::size_t>(i)].data() + per,
                  out.data() + static_cast<std::size_t>(i) * per);
    return out;
}

// --- stem ---------------------------------------------------------------------

namespace {

void he_init(Tensor& w, int fan_in, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < w.size(); ++i)
        w.at(i) = static_cast<real>(rng.gauss() * std_dev);
}

} // namespace

BackboneStem::BackboneStem(int in_channels, const std::vector<int>& channels, std::uint64_t seed)
    : channels_(channels) {
    Rng rng(seed);
    int ic = in_channels;
    for (int oc : channels_) {
        Block b;
        b.conv = make_conv_kernel(oc, ic, 3, /*with_bias=*/false, /*stride=*/1, /*padding=*/1);
        he_init(b.conv.weights->value, ic * 9, rng);
        b.bn = BatchNorm2D(oc);
        blocks_.push_back(std::move(b));
        ic = oc;
    }
}

NodePtr BackboneStem::forward(const NodePtr& x) {
    NodePtr h = x;
    for (auto& b : blocks_) h = maxpool2x2(relu(batchnorm2d(conv2d(h, b.conv), b.bn)));
    return h;
}

void BackboneStem::set_training(bool training) {
    for (auto& b : blocks_) b.bn.training = training;
}

void BackboneStem::collect_parameters(std::vector<Parameter>& out, const std::string& prefix,
                                      real lr_scale) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string base = prefix + ".block" + std::to_string(i);
        out.push_back({base + ".conv.w", blocks_[i].conv.weights, lr_scale});
        out.push_back({base + ".bn.gamma", blocks_[i].bn.gamma, lr_scale});
        out.push_back({base + ".bn.beta", blocks_[i].bn.beta, lr_scale});
    }
}

void BackboneStem::collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out,
                                   const std::string& prefix) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string base = prefix + ".block" + std::to_string(i);
        out.emplace_back(base + ".bn.running_mean", &blocks_[i].bn.running_mean);
        out.emplace_back(base + ".bn.running_var", &blocks_[i].bn.running_var);
    }
}

// --- model --------------------------------------------------------------------

MimsModel::MimsModel(const ExperimentConfig& config) : config_(config) {
    config_.validate();
    variant_ = config_.variant_enum();
    scheme_ = config_.pool_enum();

    stem_ = BackboneStem(config_.in_channels, config_.stem_channels, mix_seed(config_.seed, 1));

    if (variant_ != Variant::mi_pre) {
        MSConvConfig mc;
        mc.kernel_groups = config_.kernel_groups;
        switch (variant_) {
            case Variant::mims:
            case Variant::si_cnn:
                mc.scales.clear();
                for (double s : config_.scales) mc.scales.emplace_back(s, s);
                break;
            case Variant::mims_noresizing:
            case Variant::mi_pre_conv:
            case Variant::pyramid_input:
                mc.scales = {{1.0, 1.0}};
                break;
            default: break;
        }
        const bool normed = variant_ == Variant::mims || variant_ == Variant::mims_noresizing ||
                            variant_ == Variant::pyramid_input;
        mc.use_norm = normed;
        mc.use_scale_weights = normed;
        msconv_.emplace(mc, stem_.out_channels(), mix_seed(config_.seed, 2));
        feature_dim_ = mc.total_channels();
    } else {
        feature_dim_ = stem_.out_channels();
    }

    pool_ = TopKPool(config_.k, static_cast<real>(config_.decay));

    Rng rng(mix_seed(config_.seed, 3));
    Tensor w({feature_dim_, 1});
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(feature_dim_));
    for (std::size_t i = 0; i < w.size(); ++i) w.at(i) = static_cast<real>(rng.gauss() * std_dev);
    fc_w_ = leaf(std::move(w), true);
    fc_b_ = leaf(Tensor::zeros({1}), true);

    stem_.collect_parameters(params_, "stem", static_cast<real>(config_.backbone_lr_factor));
    if (msconv_) msconv_->collect_parameters(params_, "msconv");
    const bool uses_topk = scheme_ == PoolScheme::topk || scheme_ == PoolScheme::max_inst ||
                           scheme_ == PoolScheme::patchcls_mean;
    if (uses_topk) params_.push_back({"pool.logits", pool_.logits});
    params_.push_back({"fc.w", fc_w_});
    params_.push_back({"fc.b", fc_b_});

    std::set<std::string> names;
    for (const auto& p : params_)
        if (!names.insert(p.name).second)
            throw std::logic_error("model: duplicate parameter name " + p.name);

    stem_.collect_buffers(buffers_, "stem");
    if (msconv_) msconv_->collect_buffers(buffers_, "msconv");
}

void MimsModel::set_training(bool training) {
    training_ = training;
    stem_.set_training(training);
    if (msconv_) msconv_->set_training(training);
}

std::size_t MimsModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.node->value.size();
    return n;
}

std::vector<std::pair<std::string, Tensor*>> MimsModel::state() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& p : params_) out.emplace_back(p.name, &p.node->value);
    for (auto& [name, t] : buffers_) out.emplace_back(name, t);
    return out;
}

BagForward MimsModel::forward_instances(const std::vector<Tensor>& instances,
                                        const std::string& bag_id) {
    BagForward fw;
    const PoolScheme embed = (scheme_ == PoolScheme::mean || scheme_ == PoolScheme::max)
                                 ? scheme_
                                 : PoolScheme::topk;

    // The raw instances plus, in input-pyramid mode, each rescaled copy form
    // separate stem batches; pooling collapses across all of them.
    std::vector<std::vector<Tensor>> groups{instances};
    if (config_.input_pyramid()) {
        for (double s : config_.pyramid_scales) {
            if (s == 1.0) continue;
            std::vector<Tensor> scaled;
            scaled.reserve(instances.size());
            for (const auto& inst : instances) {
                const Shape& sh = inst.shape();
                Tensor as4 = inst.reshape({1, sh[0], sh[1], sh[2]});
                Tensor r = bilinear_resize_tensor(as4, s, s);
                scaled.push_back(r.reshape({r.dim(1), r.dim(2), r.dim(3)}));
            }
            groups.push_back(std::move(scaled));
        }
    }

    std::vector<PoolInput> pool_inputs;
    NodePtr weights;
    if (embed == PoolScheme::topk) weights = pool_.weights();
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        NodePtr x = constant(stack_instances(groups[gi], bag_id));
        NodePtr prim = stem_.forward(x);
        if (gi == 0) {
            fw.input = x;
            fw.primary = prim;
        }
        if (msconv_) {
            auto maps = msconv_->forward(prim);
            for (std::size_t i = 0; i < maps.size(); ++i)
                for (std::size_t g = 0; g < maps[i].size(); ++g)
                    pool_inputs.push_back({maps[i][g], msconv_->channel_offset(static_cast<int>(g))});
        } else {
            pool_inputs.push_back({prim, 0});
        }
    }

    NodePtr feature = bag_pool(pool_inputs, feature_dim_, embed, weights);
    fw.logit = fully_connected(feature, fc_w_, fc_b_);
    fw.feature = feature->value.reshape({feature_dim_});
    return fw;
}

BagForward MimsModel::forward(const Bag& bag) {
    if (bag.instances.empty()) throw std::invalid_argument("bag " + bag.id + ": no instances");
    if (scheme_ == PoolScheme::max_inst || scheme_ == PoolScheme::patchcls_mean) {
        // instance-based MIL: the classifier runs per instance
        std::vector<NodePtr> logits;
        BagForward first;
        for (std::size_t i = 0; i < bag.instances.size(); ++i) {
            BagForward fw = forward_instances({bag.instances[i]}, bag.id);
            if (i == 0) first = fw;
            logits.push_back(fw.logit);
        }
        BagForward out;
        out.input = first.input;
        out.primary = first.primary;
        out.feature = first.feature;
        out.instance_logits = logits.size() == 1 ? logits[0] : concat(logits, 0);
        out.logit = scheme_ == PoolScheme::max_inst ? reduce_max(out.instance_logits)
                                                    : reduce_mean(out.instance_logits);
        out.logit = reshape(out.logit, {1, 1});
        return out;
    }
    return forward_instances(bag.instances, bag.id);
}

std::vector<double> MimsModel::forward_instancewise(const Bag& bag) {
    if (bag.instances.empty()) throw std::invalid_argument("bag " + bag.id + ": no instances");
    std::vector<double> probs;
    probs.reserve(bag.instances.size());
    for (const auto& inst : bag.instances) {
        BagForward fw = forward_instances({inst}, bag.id);
        const double z = static_cast<double>(fw.logit->value.at(0));
        probs.push_back(z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
    }
    return probs;
}

MimsModel build_model(const ExperimentConfig& config) { return MimsModel(config); }

// --- checkpoints -----------------------------------------------------------------

void save_checkpoint(MimsModel& model, const std::string& path) {
    std::ofstream bin(path, std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    nlohmann::json index;
    index["format"] = "mims-ckpt-1";
    index["config"] = model.config().to_json();
    nlohmann::json tensors = nlohmann::json::object();
    std::size_t offset = 0;
    for (auto& [name, t] : model.state()) {
        save_rtf(*t, bin);
        tensors[name] = {{"offset", offset}, {"bytes", rtf_byte_size(*t)}};
        offset += rtf_byte_size(*t);
    }
    index["tensors"] = tensors;
    if (!bin) throw std::runtime_error("checkpoint: write failed for " + path);
    bin.close();
    std::ofstream js(path + ".json");
    if (!js) throw std::runtime_error("checkpoint: cannot open " + path + ".json for writing");
    js << index.dump(2) << "\n";
}

MimsModel load_checkpoint(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw std::runtime_error("checkpoint: cannot open " + path + ".json");
    nlohmann::json index;
    try {
        js >> index;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: bad index " + path + ".json: " + e.what());
    }
    if (!index.contains("format") || index["format"] != "mims-ckpt-1")
        throw std::runtime_error("checkpoint: unrecognized format in " + path + ".json");
    MimsModel model(ExperimentConfig::from_json(index["config"]));

    std::ifstream bin(path, std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint: cannot open " + path);
    const auto& tensors = index["tensors"];
    for (auto& [name, t] : model.state()) {
        if (!tensors.contains(name))
            throw std::runtime_error("checkpoint: missing tensor '" + name + "' in " + path);
        const std::size_t offset = tensors[name]["offset"].get<std::size_t>();
        bin.seekg(static_cast<std::streamoff>(offset));
        Tensor loaded = load_rtf(bin, path + ":" + name);
        if (loaded.shape() != t->shape())
            throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " +
                                     shape_str(loaded.shape()) + ", expected " + shape_str(t->shape()));
        *t = loaded;
    }
    return model;
}

} // namespace mims
