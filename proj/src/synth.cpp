#include "mims/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mims/rng.hpp"

namespace fs = std::filesystem;

namespace mims {

void SyntheticSpec::validate() const {
    if (image_h < 8 || image_w < 8) throw std::invalid_argument("synth: image size too small");
    if (inst_min < 1 || inst_max < inst_min)
        throw std::invalid_argument("synth: bad instance count range");
    if (roi_base_radius <= 0) throw std::invalid_argument("synth: roi_base_radius must be positive");
    if (roi_scale_min <= 0 || roi_scale_max < roi_scale_min)
        throw std::invalid_argument("synth: bad roi scale range");
    const double rho_max = roi_base_radius * roi_scale_max;
    if (rho_max > (std::min(image_h, image_w) - 1) / 2.0)
        throw std::invalid_argument("synth: ROI does not fit inside the image at max scale");
    if (noise_sigma < 0) throw std::invalid_argument("synth: negative noise sigma");
    if (n_bags < 1) throw std::invalid_argument("synth: n_bags must be positive");
    if (positive_fraction < 0 || positive_fraction > 1)
        throw std::invalid_argument("synth: positive_fraction outside [0,1]");
    if (distractors_min < 0 || distractors_max < distractors_min)
        throw std::invalid_argument("synth: bad distractor count range");
}

const std::vector<ScaleBin>& scale_bins() {
    static const std::vector<ScaleBin> bins{
        {"0.5-0.8", 0.5, 0.8}, {"0.8-1.25", 0.8, 1.25}, {"1.25-2.0", 1.25, 2.0}};
    return bins;
}

int scale_bin_of(const BagTruth& truth) {
    if (truth.rois.empty()) return -1;
    const double s = truth.rois[0].scale;
    const auto& bins = scale_bins();
    for (std::size_t i = 0; i < bins.size(); ++i) {
        const bool last = i + 1 == bins.size();
        if (s >= bins[i].lo && (s < bins[i].hi || (last && s <= bins[i].hi)))
            return static_cast<int>(i);
    }
    return -1;
}

namespace {

// Ring geometry, frozen: outer radius rho = base_radius * s, thickness
// t = max(1.5, 0.3 * rho). A pixel (x, y) belongs to the ring iff
// (rho - t)^2 <= (x-cx)^2 + (y-cy)^2 <= rho^2, evaluated in double.
double ring_thickness(double rho) { return std::max(1.5, 0.3 * rho); }

// Disk with the same pixel area as a ring of the same scale, so that mean
// intensity carries no label signal.
double ring_equivalent_disk_radius(double rho) {
    const double inner = rho - ring_thickness(rho);
    return std::sqrt(std::max(rho * rho - inner * inner, 1.0));
}

void rasterize_ring(Tensor& img, int h, int w, double cx, double cy, double rho) {
    const double t = ring_thickness(rho);
    const double inner = std::max(rho - t, 0.0);
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - rho)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + rho)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rho)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + rho)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double d2 = dx * dx + dy * dy;
            if (d2 >= inner * inner && d2 <= rho * rho) {
                real& px = img.at(static_cast<std::size_t>(y) * w + x);
                px = std::max(px, real(1));
            }
        }
}

void rasterize_disk(Tensor& img, int h, int w, double cx, double cy, double r) {
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            if (dx * dx + dy * dy <= r * r) {
                real& px = img.at(static_cast<std::size_t>(y) * w + x);
                px = std::max(px, real(1));
            }
        }
}

std::string bag_name(std::uint64_t global_index) {
    std::ostringstream os;
    os << "bag_";
    std::string digits = std::to_string(global_index);
    for (std::size_t i = digits.size(); i < 5; ++i) os << '0';
    os << digits;
    return os.str();
}

} // namespace

Dataset generate(const SyntheticSpec& spec, std::uint64_t seed, std::uint64_t index_base) {
    spec.validate();
    const int h = spec.image_h, w = spec.image_w;
    const std::uint64_t n_pos =
        static_cast<std::uint64_t>(std::llround(spec.positive_fraction * spec.n_bags));

    Dataset out;
    out.bags.reserve(static_cast<std::size_t>(spec.n_bags));
    out.truth.reserve(static_cast<std::size_t>(spec.n_bags));

    std::uint64_t positive_counter = 0;
    for (int b = 0; b < spec.n_bags; ++b) {
        const std::uint64_t global = index_base + static_cast<std::uint64_t>(b);
        Rng rng(mix_seed(seed, global));
        Bag bag;
        bag.id = bag_name(global);
        bag.label = static_cast<std::uint64_t>(b) < n_pos ? 1 : 0;
        BagTruth truth;
        truth.bag_id = bag.id;
        truth.label = bag.label;

        const int n_inst =
            spec.inst_min + static_cast<int>(rng.uniform_int(
                                static_cast<std::uint64_t>(spec.inst_max - spec.inst_min + 1)));
        std::vector<Tensor> canvases;
        canvases.reserve(static_cast<std::size_t>(n_inst));
        for (int i = 0; i < n_inst; ++i) canvases.emplace_back(Shape{h, w});

        // distractor disks on every instance, positive or not
        for (int i = 0; i < n_inst; ++i) {
            const int n_dis = spec.distractors_min +
                              static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(
                                  spec.distractors_max - spec.distractors_min + 1)));
            for (int d = 0; d < n_dis; ++d) {
                const double s = rng.uniform(spec.roi_scale_min, spec.roi_scale_max);
                const double r = ring_equivalent_disk_radius(spec.roi_base_radius * s);
                const double cx = rng.uniform(r, static_cast<double>(w - 1) - r);
                const double cy = rng.uniform(r, static_cast<double>(h - 1) - r);
                rasterize_disk(canvases[static_cast<std::size_t>(i)], h, w, cx, cy, r);
            }
        }

        if (bag.label == 1) {
            const int max_roi = std::min(3, n_inst);
            const int n_roi = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_roi)));
            // distinct instance picks via partial Fisher-Yates
            std::vector<int> idx(static_cast<std::size_t>(n_inst));
            for (int i = 0; i < n_inst; ++i) idx[static_cast<std::size_t>(i)] = i;
            for (int r = 0; r < n_roi; ++r) {
                const int j =
                    r + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_inst - r)));
                std::swap(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(j)]);
            }
            for (int r = 0; r < n_roi; ++r) {
                double s;
                if (spec.stratify_scales && r == 0) {
                    const auto& bins = scale_bins();
                    const ScaleBin& bin = bins[positive_counter % bins.size()];
                    const double lo = std::max(bin.lo, spec.roi_scale_min);
                    const double hi = std::min(bin.hi, spec.roi_scale_max);
                    s = lo < hi ? rng.uniform(lo, hi)
                                : rng.uniform(spec.roi_scale_min, spec.roi_scale_max);
                } else {
                    s = rng.uniform(spec.roi_scale_min, spec.roi_scale_max);
                }
                const double rho = spec.roi_base_radius * s;
                const double cx = rng.uniform(rho, static_cast<double>(w - 1) - rho);
                const double cy = rng.uniform(rho, static_cast<double>(h - 1) - rho);
                rasterize_ring(canvases[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])],
                               h, w, cx, cy, rho);
                RoiTruth rt;
                rt.instance = idx[static_cast<std::size_t>(r)];
                rt.cx = cx;
                rt.cy = cy;
                rt.scale = s;
                rt.x0 = std::max(0, static_cast<int>(std::floor(cx - rho)));
                rt.x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + rho)));
                rt.y0 = std::max(0, static_cast<int>(std::floor(cy - rho)));
                rt.y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + rho)));
                truth.rois.push_back(rt);
            }
            ++positive_counter;
        }

        // pixel noise last, in instance then row-major order
        for (int i = 0; i < n_inst; ++i) {
            Tensor& img = canvases[static_cast<std::size_t>(i)];
            for (std::size_t p = 0; p < img.size(); ++p)
                img.at(p) = static_cast<real>(static_cast<double>(img.at(p)) +
                                              spec.noise_sigma * rng.gauss());
            bag.instances.push_back(img.reshape({1, h, w}));
        }

        out.bags.push_back(std::move(bag));
        out.truth.push_back(std::move(truth));
    }
    return out;
}

// --- serialization -----------------------------------------------------------

void save_dataset(const Dataset& data, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "bags");
    std::ofstream manifest(fs::path(dir) / "manifest.csv");
    if (!manifest) throw std::runtime_error("save_dataset: cannot write manifest in " + dir);
    manifest << "bag_id,instance_path,label\n";
    for (const auto& bag : data.bags) {
        for (std::size_t i = 0; i < bag.instances.size(); ++i) {
            const std::string rel = "bags/" + bag.id + "_s" + std::to_string(i) + ".rtf";
            save_rtf_file(bag.instances[i], (fs::path(dir) / rel).string());
            manifest << bag.id << "," << rel << "," << bag.label << "\n";
        }
    }
    manifest.close();

    nlohmann::json truth_json;
    truth_json["bags"] = nlohmann::json::array();
    for (const auto& t : data.truth) {
        nlohmann::json b;
        b["id"] = t.bag_id;
        b["label"] = t.label;
        b["rois"] = nlohmann::json::array();
        for (const auto& r : t.rois)
            b["rois"].push_back({{"instance", r.instance},
                                 {"cx", r.cx},
                                 {"cy", r.cy},
                                 {"scale", r.scale},
                                 {"bbox", {r.x0, r.y0, r.x1, r.y1}}});
        truth_json["bags"].push_back(b);
    }
    std::ofstream tj(fs::path(dir) / "truth.json");
    if (!tj) throw std::runtime_error("save_dataset: cannot write truth.json in " + dir);
    tj << truth_json.dump(2) << "\n";
}

Dataset load_dataset(const std::string& manifest_path) {
    fs::path mpath(manifest_path);
    if (fs::is_directory(mpath)) mpath /= "manifest.csv";
    std::ifstream in(mpath);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + mpath.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_dataset: empty manifest " + mpath.string());
    if (line == "bag_id,instance_path,label\r") line.pop_back();
    if (line != "bag_id,instance_path,label")
        throw std::runtime_error("load_dataset: malformed header in " + mpath.string() + ": '" + line + "'");

    const fs::path root = mpath.parent_path();
    Dataset out;
    std::map<std::string, std::size_t> index;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw std::runtime_error("load_dataset: malformed row " + std::to_string(line_no) +
                                     " in " + mpath.string());
        const std::string id = line.substr(0, c1);
        const std::string rel = line.substr(c1 + 1, c2 - c1 - 1);
        const std::string label_s = line.substr(c2 + 1);
        if (label_s != "0" && label_s != "1")
            throw std::runtime_error("load_dataset: label '" + label_s + "' is not 0/1 at row " +
                                     std::to_string(line_no) + " of " + mpath.string());
        const int label = label_s == "1" ? 1 : 0;
        auto it = index.find(id);
        if (it == index.end()) {
            index.emplace(id, out.bags.size());
            Bag b;
            b.id = id;
            b.label = label;
            out.bags.push_back(std::move(b));
            it = index.find(id);
        }
        Bag& bag = out.bags[it->second];
        if (bag.label != label)
            throw std::runtime_error("load_dataset: bag " + id + " has inconsistent labels");
        bag.instances.push_back(load_rtf_file((root / rel).string()));
    }

    const fs::path tpath = root / "truth.json";
    if (fs::exists(tpath)) {
        std::ifstream tj(tpath);
        nlohmann::json j;
        try {
            tj >> j;
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("load_dataset: bad truth.json: " + std::string(e.what()));
        }
        for (const auto& b : j["bags"]) {
            BagTruth t;
            t.bag_id = b["id"].get<std::string>();
            t.label = b["label"].get<int>();
            for (const auto& r : b["rois"]) {
                RoiTruth rt;
                rt.instance = r["instance"].get<int>();
                rt.cx = r["cx"].get<double>();
                rt.cy = r["cy"].get<double>();
                rt.scale = r["scale"].get<double>();
                rt.x0 = r["bbox"][0].get<int>();
                rt.y0 = r["bbox"][1].get<int>();
                rt.x1 = r["bbox"][2].get<int>();
                rt.y1 = r["bbox"][3].get<int>();
                t.rois.push_back(rt);
            }
            out.truth.push_back(std::move(t));
        }
    }
    return out;
}

} // namespace mims
