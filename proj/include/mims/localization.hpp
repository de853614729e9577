#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mims/model.hpp"

namespace mims {

struct ByteImage {
    int h = 0, w = 0;
    std::vector<std::uint8_t> pixels; // row-major

    std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * w + x]; }
};

// Signed grad-times-input contribution map T and its rectified [0,255]
// quantization P for one instance at one recorded layer.
struct ContributionMap {
    Tensor t; // [m, n], signed
    ByteImage p;
    std::string source_layer;
};

struct HeatmapOverlay {
    ByteImage p_star; // heatmap upsampled to the slice grid
    ByteImage h;      // 0.6*R + 0.3*P*, rounded half-up and clamped
};

// Backward pass seeded at the classifier for the interested class; the layer
// contribution is T_hw = sum_i g_ihw * x_ihw where g is the gradient of the
// class score (class 0 uses the negated logit) and x the recorded
// activation. Layers: "primary" (stem output, default) or "input".
ContributionMap contribution_map(MimsModel& model, const Bag& bag, int instance_index,
                                 const std::string& layer = "primary", int interested_class = 1);

// Negatives to 0, then linear scale putting the max positive at 255,
// round half up. An all-nonpositive map stays all-zero.
ByteImage quantize_rectify(const Tensor& t);

// P* = bilinear upsample of P to R's grid (round half up, clamp), then
// H = clamp(round(0.6*R + 0.3*P*)). R must already be in [0,255].
HeatmapOverlay upsample_overlay(const ByteImage& p, const ByteImage& r);

// Maps an instance tensor to display bytes: clamp(round(255*x), 0, 255) of
// the channel mean.
ByteImage instance_to_bytes(const Tensor& instance);

void write_pgm(const ByteImage& img, const std::string& path);
// Color composite: P* rides the red channel over the dimmed slice.
void write_ppm_red_composite(const ByteImage& p_star, const ByteImage& r, const std::string& path);

struct EmittedHeatmap {
    int instance = 0;
    double prob = 0;
    int argmax_y = 0, argmax_x = 0; // of P*, first max in row-major order
    std::string heat_path, overlay_path, composite_path;
};

// Instances whose probability for the interested class exceeds 0.5 each
// yield <bagid>_s<k>_heat.pgm, _overlay.pgm and _overlay.ppm under out_dir.
std::vector<EmittedHeatmap> localize_bag(MimsModel& model, const Bag& bag, int interested_class,
                                         const std::string& out_dir);

} // namespace mims
