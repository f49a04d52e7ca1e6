#pragma once

// Initial pseudo-label generation and the exocentric pairing index.
//
// Labels: part name p = P(o, a) -> detect boxes -> confidence filter ->
// box-prompted segmentation -> background sanity fix -> union -> blurred,
// normalized heatmap. Each label carries a provenance sidecar.
//
// Pairing: every ego image gets a ranked pool of same-class exo partners,
// scored by cosine similarity of masked-average-pooled patch features from
// a frozen encoder; built offline and persisted as TSV.

#include <filesystem>
#include <map>
#include <sstream>

#include "affgro/backends.hpp"
#include "affgro/dataset.hpp"
#include "affgro/heatmap.hpp"
#include "affgro/model.hpp"

namespace affgro {

struct BoxProvenance {
    DetectionBox box;
    bool inverted{false};
};

struct LabelProvenance {
    std::vector<BoxProvenance> boxes;
    bool degenerate{false};  // uniform fallback used
    // refinement stage bookkeeping
    bool refined{false};
    std::size_t selected_regions{0};
    bool used_fallback{false};

    std::string serialize() const {
        std::ostringstream out;
        out << "degenerate=" << (degenerate ? 1 : 0) << "\n";
        out << "refined=" << (refined ? 1 : 0) << "\n";
        if (refined) {
            out << "selected_regions=" << selected_regions << "\n";
            out << "used_fallback=" << (used_fallback ? 1 : 0) << "\n";
        }
        out << "n_boxes=" << boxes.size() << "\n";
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            const auto& b = boxes[i];
            out << "box" << i << "=" << format_double(b.box.x0) << "," << format_double(b.box.y0) << ","
                << format_double(b.box.x1) << "," << format_double(b.box.y1) << ","
                << format_double(b.box.confidence) << "," << (b.inverted ? 1 : 0) << "\n";
        }
        return out.str();
    }

    static LabelProvenance parse(const std::string& text) {
        LabelProvenance p;
        std::map<std::string, std::string> kv;
        for (const auto& line : split(text, '\n')) {
            if (trim(line).empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        p.degenerate = kv.count("degenerate") && kv["degenerate"] == "1";
        p.refined = kv.count("refined") && kv["refined"] == "1";
        if (kv.count("selected_regions")) p.selected_regions = std::stoul(kv["selected_regions"]);
        p.used_fallback = kv.count("used_fallback") && kv["used_fallback"] == "1";
        const std::size_t n = kv.count("n_boxes") ? std::stoul(kv["n_boxes"]) : 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto cols = split(kv.at("box" + std::to_string(i)), ',');
            if (cols.size() != 6) throw Error("bad provenance box record");
            BoxProvenance b;
            b.box = DetectionBox{std::stod(cols[0]), std::stod(cols[1]), std::stod(cols[2]), std::stod(cols[3]),
                                 std::stod(cols[4])};
            b.inverted = cols[5] == "1";
            p.boxes.push_back(b);
        }
        return p;
    }
};

struct GeneratedLabel {
    HeatmapLabel heatmap;
    LabelProvenance provenance;
};

// detect -> filter -> segment each surviving box independently -> sanity fix
// -> union -> heatmap. No detection (or an empty union) falls back to a
// uniform label flagged degenerate, so the dataset size stays stable.
inline GeneratedLabel generate_initial_label(const Sample& sample, const PartMapping& mapping, Detector& detector,
                                             Segmenter& segmenter, double blur_sigma) {
    if (sample.view != View::ego) throw Error("generate_initial_label: expected an egocentric sample");
    const std::string& part = mapping.lookup(sample.object, sample.affordance);

    GeneratedLabel out;
    const auto boxes = detector.detect(sample.image, part);
    if (boxes.empty()) {
        out.heatmap = uniform_heatmap(sample.image.h, sample.image.w);
        out.provenance.degenerate = true;
        return out;
    }
    const auto kept = filter_boxes(boxes);
    MaskGrid merged(sample.image.h, sample.image.w);
    for (const auto& box : kept) {
        const MaskGrid raw = segmenter.segment_box(sample.image, box);
        const MaskGrid fixed = background_sanity_fix(raw, box);
        BoxProvenance bp;
        bp.box = box;
        bp.inverted = !(fixed == raw);
        out.provenance.boxes.push_back(bp);
        merged = mask_union(merged, fixed);
    }
    if (mask_area(merged) == 0) {
        out.heatmap = uniform_heatmap(sample.image.h, sample.image.w);
        out.provenance.degenerate = true;
        return out;
    }
    out.heatmap = mask_to_heatmap(merged, blur_sigma);
    return out;
}

// Patch-level object mask: cell (i, j) = 1 iff its pixel rectangle
// intersects the box.
inline MaskGrid object_patchmask(const DetectionBox& box, std::size_t img_h, std::size_t img_w, std::size_t gh,
                                 std::size_t gw) {
    box.validate(img_h, img_w);
    MaskGrid m(gh, gw);
    const double ph = static_cast<double>(img_h) / static_cast<double>(gh);
    const double pw = static_cast<double>(img_w) / static_cast<double>(gw);
    for (std::size_t i = 0; i < gh; ++i)
        for (std::size_t j = 0; j < gw; ++j) {
            const double y0 = static_cast<double>(i) * ph, y1 = y0 + ph;
            const double x0 = static_cast<double>(j) * pw, x1 = x0 + pw;
            if (box.x0 < x1 && x0 < box.x1 && box.y0 < y1 && y0 < box.y1) m.at(i, j) = 1;
        }
    return m;
}

// Patch features of one image under a frozen encoder: [gh*gw, dim].
struct PatchFeatures {
    std::size_t gh{0}, gw{0}, dim{0};
    std::vector<double> v;
};

inline PatchFeatures extract_patch_features(Model& frozen, const Image& image) {
    Workspace ws(frozen.params());
    const Image resized = (image.h == frozen.config().resolution && image.w == frozen.config().resolution)
                              ? image
                              : bilinear_resize_image(image, frozen.config().resolution, frozen.config().resolution);
    auto feat = frozen.encode_image(ws, resized);
    PatchFeatures out;
    out.gh = feat.gh;
    out.gw = feat.gw;
    out.dim = frozen.config().dim;
    out.v = feat.patches.val();
    return out;
}

inline std::vector<double> masked_average_pool(const PatchFeatures& f, const MaskGrid& pm) {
    if (pm.h != f.gh || pm.w != f.gw) throw Error("masked_average_pool: mask/feature grid mismatch");
    const std::size_t n = mask_area(pm);
    if (n == 0) throw Error("empty pooling region");
    std::vector<double> out(f.dim, 0.0);
    for (std::size_t p = 0; p < f.gh * f.gw; ++p)
        if (pm.v[p])
            for (std::size_t c = 0; c < f.dim; ++c) out[c] += f.v[p * f.dim + c];
    for (auto& x : out) x /= static_cast<double>(n);
    return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error("cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) throw Error("cosine: zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double pair_score(const PatchFeatures& ego_feat, const MaskGrid& ego_pm, const PatchFeatures& exo_feat,
                         const MaskGrid& exo_pm) {
    return cosine(masked_average_pool(ego_feat, ego_pm), masked_average_pool(exo_feat, exo_pm));
}

struct ExoPairIndex {
    // ego id -> (exo id, score), scores non-increasing, length <= pool size
    std::map<std::string, std::vector<std::pair<std::string, double>>> pools;

    std::string serialize(const std::string& config_hash) const {
        std::ostringstream out;
        out << "# config_hash=" << config_hash << "\n";
        for (const auto& [ego, pool] : pools)
            for (const auto& [exo, score] : pool) out << ego << "\t" << exo << "\t" << format_double(score) << "\n";
        return out.str();
    }

    static ExoPairIndex parse(const std::string& text, std::string* config_hash = nullptr) {
        ExoPairIndex idx;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            if (line[0] == '#') {
                const auto pos = line.find("config_hash=");
                if (pos != std::string::npos && config_hash) *config_hash = trim(line.substr(pos + 12));
                continue;
            }
            const auto cols = split(line, '\t');
            if (cols.size() != 3) throw Error("bad pair index line: " + line);
            idx.pools[cols[0]].emplace_back(cols[1], std::stod(cols[2]));
        }
        return idx;
    }
};

// Patch mask for the object in an image: detected boxes (query = object
// name), confidence-filtered, unioned at patch granularity. No detection
// degrades to global pooling (all-ones mask).
inline MaskGrid object_patchmask_for(Detector& detector, const Sample& s, std::size_t gh, std::size_t gw) {
    const auto boxes = filter_boxes(detector.detect(s.image, s.object));
    MaskGrid pm(gh, gw);
    if (boxes.empty()) {
        for (auto& v : pm.v) v = 1;
        return pm;
    }
    for (const auto& b : boxes) pm = mask_union(pm, object_patchmask(b, s.image.h, s.image.w, gh, gw));
    return pm;
}

// Ranks, for each ego image, the same-class exo images by pair_score and
// keeps the top pool_size.
inline ExoPairIndex build_pair_index(const DatasetIndex& dataset, Model& frozen_encoder, Detector& detector,
                                     std::size_t pool_size) {
    const auto egos = dataset.view_samples(View::ego);
    const auto exos = dataset.view_samples(View::exo);

    // precondition: every ego class pair has at least one exo partner
    std::set<std::pair<std::string, std::string>> exo_classes;
    for (const Sample* x : exos) exo_classes.emplace(x->object, x->affordance);
    std::vector<std::string> missing;
    for (const Sample* e : egos)
        if (!exo_classes.count({e->object, e->affordance}))
            missing.push_back("(" + e->object + ", " + e->affordance + ")");
    if (!missing.empty()) {
        std::string msg = "build_pair_index: no exocentric partner for:";
        for (const auto& m : missing) msg += " " + m;
        throw Error(msg);
    }

    const std::size_t g = frozen_encoder.config().grid();
    std::map<std::string, PatchFeatures> feats;
    std::map<std::string, MaskGrid> pmasks;
    for (const Sample* s : egos) {
        feats.emplace(s->id, extract_patch_features(frozen_encoder, s->image));
        pmasks.emplace(s->id, object_patchmask_for(detector, *s, g, g));
    }
    for (const Sample* s : exos) {
        feats.emplace(s->id, extract_patch_features(frozen_encoder, s->image));
        pmasks.emplace(s->id, object_patchmask_for(detector, *s, g, g));
    }

    ExoPairIndex index;
    for (const Sample* e : egos) {
        std::vector<std::pair<std::string, double>> scored;
        for (const Sample* x : exos) {
            if (x->object != e->object || x->affordance != e->affordance) continue;
            scored.emplace_back(x->id, pair_score(feats.at(e->id), pmasks.at(e->id), feats.at(x->id), pmasks.at(x->id)));
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        if (scored.size() > pool_size) scored.resize(pool_size);
        index.pools.emplace(e->id, std::move(scored));
    }
    return index;
}

inline const std::string& sample_partner(const ExoPairIndex& index, const std::string& ego_id, Rng& rng) {
    auto it = index.pools.find(ego_id);
    if (it == index.pools.end()) throw Error("pair index: unknown ego id " + ego_id);
    if (it->second.empty()) throw Error("pair index: empty pool for " + ego_id);
    return it->second[rng.uniform_index(it->second.size())].first;
}

// ---- label storage (PGM alongside a provenance sidecar) ----

inline void write_label(const std::filesystem::path& labels_dir, const std::string& id, const HeatmapLabel& hm,
                        const LabelProvenance& prov) {
    write_heatmap_pgm(labels_dir / (id + ".pgm"), hm);
    atomic_write_file(labels_dir / (id + ".meta"), prov.serialize());
}

inline HeatmapLabel read_label(const std::filesystem::path& labels_dir, const std::string& id) {
    return read_heatmap_pgm(labels_dir / (id + ".pgm"));
}

inline LabelProvenance read_label_provenance(const std::filesystem::path& labels_dir, const std::string& id) {
    const auto path = labels_dir / (id + ".meta");
    if (!std::filesystem::exists(path)) return {};
    return LabelProvenance::parse(read_file(path));
}

}  // namespace affgro
