#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mims/model.hpp"

namespace mims {

// Weakly-labeled scale-varying toy data: positive bags hide rings (annuli)
// of varying radius in 1..3 of their instances, every instance carries
// area-matched distractor disks, and only the bag label is stored. Rings and
// disks share pixel intensity and expected pixel mass, so bag statistics do
// not separate the classes; detecting the ring pattern does.
struct SyntheticSpec {
    int image_h = 64, image_w = 64;
    int inst_min = 4, inst_max = 8;
    double roi_base_radius = 6.0;
    double roi_scale_min = 0.5, roi_scale_max = 2.0;
    double noise_sigma = 0.1;
    int n_bags = 100;
    double positive_fraction = 0.5;
    int distractors_min = 1, distractors_max = 3;
    // When set, the first ROI of the p-th positive bag draws its scale from
    // bin p%3 of {[0.5,0.8), [0.8,1.25), [1.25,2.0]} so every scale bin is
    // populated; otherwise scales are uniform over the configured range.
    bool stratify_scales = false;

    void validate() const;
};

struct RoiTruth {
    int instance = 0;
    double cx = 0, cy = 0, scale = 1;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0; // inclusive bounding box
};

struct BagTruth {
    std::string bag_id;
    int label = 0;
    std::vector<RoiTruth> rois;
};

struct Dataset {
    std::vector<Bag> bags;
    std::vector<BagTruth> truth;
};

// Pure function of (spec, seed, index_base): bag i derives its stream from
// mix_seed(seed, index_base + i), so disjoint index ranges give disjoint
// splits from one seed. Exactly round(n_bags * positive_fraction) bags are
// positive (the leading indices).
Dataset generate(const SyntheticSpec& spec, std::uint64_t seed, std::uint64_t index_base = 0);

// Layout under `dir`: manifest.csv (bag_id,instance_path,label; one row per
// instance, paths relative to dir), truth.json, bags/<bag>_s<k>.rtf.
void save_dataset(const Dataset& data, const std::string& dir);
Dataset load_dataset(const std::string& manifest_path);

// Scale bins used for stratification and per-scale AUROC reporting.
struct ScaleBin {
    const char* label;
    double lo, hi;
};
const std::vector<ScaleBin>& scale_bins();
// A positive bag's reporting scale is its first ROI's scale; -1 if none.
int scale_bin_of(const BagTruth& truth);

} // namespace mims
