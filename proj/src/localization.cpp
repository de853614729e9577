#include "mims/localization.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace mims {

namespace {

std::uint8_t clamp_byte(double v) {
    const double r = std::floor(v + 0.5); // round half up
    if (r < 0) return 0;
    if (r > 255) return 255;
    return static_cast<std::uint8_t>(r);
}

// Same half-pixel-center blend as bilinear_resize, targeting exact extents.
Tensor resize_to_grid(const Tensor& x, int oh, int ow) {
    const int h = x.dim(2), w = x.dim(3);
    return bilinear_resize_tensor(x, static_cast<double>(oh) / static_cast<double>(h),
                                  static_cast<double>(ow) / static_cast<double>(w));
}

} // namespace

ContributionMap contribution_map(MimsModel& model, const Bag& bag, int instance_index,
                                 const std::string& layer, int interested_class) {
    if (instance_index < 0 || static_cast<std::size_t>(instance_index) >= bag.instances.size())
        throw std::invalid_argument("contribution_map: instance index out of range for bag " + bag.id);
    if (layer != "primary" && layer != "input")
        throw std::invalid_argument("contribution_map: unknown layer identifier '" + layer + "'");
    if (interested_class != 0 && interested_class != 1)
        throw std::invalid_argument("contribution_map: class must be 0 or 1");

    const bool was_training = model.training();
    model.set_training(false);
    BagForward fw = model.forward_instances({bag.instances[static_cast<std::size_t>(instance_index)]},
                                            bag.id);
    // Seed the backward pass at the classifier for the interested class: the
    // collected gradient is the ascent direction of that class's score, so
    // positive T marks activations that argue for the class.
    NodePtr objective = interested_class == 1 ? fw.logit : smul(fw.logit, real(-1));
    backward(reshape(objective, {1}));
    model.set_training(was_training);

    NodePtr rec = layer == "primary" ? fw.primary : fw.input;
    const Tensor& val = rec->value;
    const Tensor& grad = rec->grad;
    const int c = val.dim(1), mh = val.dim(2), mw = val.dim(3);
    Tensor t({mh, mw});
    const std::size_t plane = static_cast<std::size_t>(mh) * mw;
    for (int y = 0; y < mh; ++y)
        for (int x = 0; x < mw; ++x) {
            double s = 0.0;
            const std::size_t off = static_cast<std::size_t>(y) * mw + x;
            for (int ci = 0; ci < c; ++ci)
                s += static_cast<double>(grad.at(static_cast<std::size_t>(ci) * plane + off)) *
                     static_cast<double>(val.at(static_cast<std::size_t>(ci) * plane + off));
            t.at(off) = static_cast<real>(s);
        }

    ContributionMap cm;
    cm.p = quantize_rectify(t);
    cm.t = std::move(t);
    cm.source_layer = layer;
    return cm;
}

ByteImage quantize_rectify(const Tensor& t) {
    if (t.ndim() != 2)
        throw std::invalid_argument("quantize_rectify: expected 2-d map, got " + shape_str(t.shape()));
    ByteImage p;
    p.h = t.dim(0);
    p.w = t.dim(1);
    p.pixels.resize(t.size(), 0);
    double max_pos = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i)
        max_pos = std::max(max_pos, static_cast<double>(t.at(i)));
    if (max_pos <= 0.0) return p; // all-nonpositive map stays all-zero
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double v = static_cast<double>(t.at(i));
        if (v > 0.0) p.pixels[i] = clamp_byte(v / max_pos * 255.0);
    }
    return p;
}

HeatmapOverlay upsample_overlay(const ByteImage& p, const ByteImage& r) {
    if (r.h < p.h || r.w < p.w)
        throw std::invalid_argument("upsample_overlay: slice smaller than contribution map");
    Tensor pf({1, 1, p.h, p.w});
    for (std::size_t i = 0; i < pf.size(); ++i) pf.at(i) = static_cast<real>(p.pixels[i]);
    Tensor up = resize_to_grid(pf, r.h, r.w);
    if (up.dim(2) != r.h || up.dim(3) != r.w)
        throw std::logic_error("upsample_overlay: resize missed the target grid");

    HeatmapOverlay out;
    out.p_star.h = r.h;
    out.p_star.w = r.w;
    out.p_star.pixels.resize(static_cast<std::size_t>(r.h) * r.w);
    out.h = out.p_star;
    for (std::size_t i = 0; i < out.p_star.pixels.size(); ++i) {
        const std::uint8_t ps = clamp_byte(static_cast<double>(up.at(i)));
        out.p_star.pixels[i] = ps;
        out.h.pixels[i] = clamp_byte(0.6 * static_cast<double>(r.pixels[i]) +
                                     0.3 * static_cast<double>(ps));
    }
    return out;
}

ByteImage instance_to_bytes(const Tensor& instance) {
    if (instance.ndim() != 3)
        throw std::invalid_argument("instance_to_bytes: expected [c,h,w], got " +
                                    shape_str(instance.shape()));
    const int c = instance.dim(0), h = instance.dim(1), w = instance.dim(2);
    ByteImage img;
    img.h = h;
    img.w = w;
    img.pixels.resize(static_cast<std::size_t>(h) * w);
    const std::size_t plane = img.pixels.size();
    for (std::size_t i = 0; i < plane; ++i) {
        double v = 0.0;
        for (int ci = 0; ci < c; ++ci)
            v += static_cast<double>(instance.at(static_cast<std::size_t>(ci) * plane + i));
        img.pixels[i] = clamp_byte(v / c * 255.0);
    }
    return img;
}

void write_pgm(const ByteImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

void write_ppm_red_composite(const ByteImage& p_star, const ByteImage& r, const std::string& path) {
    if (p_star.h != r.h || p_star.w != r.w)
        throw std::invalid_argument("write_ppm: extent mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << r.w << " " << r.h << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(r.w) * 3);
    for (int y = 0; y < r.h; ++y) {
        for (int x = 0; x < r.w; ++x) {
            const double dim = 0.6 * static_cast<double>(r.at(y, x));
            row[static_cast<std::size_t>(x) * 3 + 0] =
                clamp_byte(dim + 0.3 * static_cast<double>(p_star.at(y, x)));
            row[static_cast<std::size_t>(x) * 3 + 1] = clamp_byte(dim);
            row[static_cast<std::size_t>(x) * 3 + 2] = clamp_byte(dim);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

std::vector<EmittedHeatmap> localize_bag(MimsModel& model, const Bag& bag, int interested_class,
                                         const std::string& out_dir) {
    fs::create_directories(out_dir);
    const bool was_training = model.training();
    model.set_training(false);
    std::vector<double> probs = model.forward_instancewise(bag);
    std::vector<EmittedHeatmap> emitted;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double class_prob = interested_class == 1 ? probs[i] : 1.0 - probs[i];
        if (class_prob <= 0.5) continue;
        ContributionMap cm =
            contribution_map(model, bag, static_cast<int>(i), "primary", interested_class);
        ByteImage r = instance_to_bytes(bag.instances[i]);
        HeatmapOverlay ov = upsample_overlay(cm.p, r);

        EmittedHeatmap e;
        e.instance = static_cast<int>(i);
        e.prob = class_prob;
        std::uint8_t best = 0;
        for (int y = 0; y < ov.p_star.h; ++y)
            for (int x = 0; x < ov.p_star.w; ++x)
                if (ov.p_star.at(y, x) > best) {
                    best = ov.p_star.at(y, x);
                    e.argmax_y = y;
                    e.argmax_x = x;
                }
        const std::string stem = (fs::path(out_dir) / (bag.id + "_s" + std::to_string(i))).string();
        e.heat_path = stem + "_heat.pgm";
        e.overlay_path = stem + "_overlay.pgm";
        e.composite_path = stem + "_overlay.ppm";
        write_pgm(ov.p_star, e.heat_path);
        write_pgm(ov.h, e.overlay_path);
        write_ppm_red_composite(ov.p_star, r, e.composite_path);
        emitted.push_back(std::move(e));
    }
    model.set_training(was_training);
    return emitted;
}

} // namespace mims
