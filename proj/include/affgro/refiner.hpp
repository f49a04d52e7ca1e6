#pragma once

// Pseudo-label refinement. A sigmoid-output grounding model is trained with
// an occlusion-similarity loss: pooling the non-predicted part of the ego
// object crop should match pooling the visible (occluded) object in exo
// crops under a frozen auxiliary encoder. Afterwards the predicted masks are
// snapped to auto-segmentation regions by intersection ratio.

#include <set>

#include "affgro/objectives.hpp"

namespace affgro {

inline MaskGrid binarize(const RealGrid& g, double threshold = 0.5) {
    MaskGrid m(g.h, g.w);
    for (std::size_t i = 0; i < g.size(); ++i) m.v[i] = g.v[i] >= threshold ? 1 : 0;
    return m;
}

namespace detail {

struct SquarePad {
    std::size_t side, top, left;
};

inline SquarePad square_pad(std::size_t h, std::size_t w) {
    const std::size_t side = std::max(h, w);
    return {side, (side - h) / 2, (side - w) / 2};
}

}  // namespace detail

// Crop by box -> zero-pad to square (centered) -> resize to the encoder
// resolution -> encode with the frozen auxiliary encoder.
inline PatchFeatures crop_encode(const Image& image, const DetectionBox& box, Model& aux) {
    box.validate(image.h, image.w);
    const auto p = detail::to_pixel_box(box, image.h, image.w);
    const std::size_t bh = p.y1 - p.y0, bw = p.x1 - p.x0;
    if (bh * bw < 4) throw Error("degenerate crop");
    const Image crop = crop_image(image, p.y0, p.x0, bh, bw);
    const auto pad = detail::square_pad(bh, bw);
    Image squared(pad.side, pad.side);
    for (std::size_t i = 0; i < bh; ++i)
        for (std::size_t j = 0; j < bw; ++j) {
            const auto* s = crop.px(i, j);
            auto* d = squared.px(pad.top + i, pad.left + j);
            d[0] = s[0];
            d[1] = s[1];
            d[2] = s[2];
        }
    return extract_patch_features(aux, squared);
}

// Crop a plain mask grid, pad to square, resize to the feature grid.
inline RealGrid crop_pad_resize_mask(const RealGrid& mask, const DetectionBox& box, std::size_t gh, std::size_t gw) {
    const auto p = detail::to_pixel_box(box, mask.h, mask.w);
    const std::size_t bh = p.y1 - p.y0, bw = p.x1 - p.x0;
    RealGrid cropped = crop_grid(mask, p.y0, p.x0, bh, bw);
    const auto pad = detail::square_pad(bh, bw);
    RealGrid squared(pad.side, pad.side, 0.0);
    for (std::size_t i = 0; i < bh; ++i)
        for (std::size_t j = 0; j < bw; ++j) squared.at(pad.top + i, pad.left + j) = cropped.at(i, j);
    return bilinear_resize_grid(squared, gh, gw);
}

// Constant side of the pretrain loss for one exo partner: the pooled,
// binarized visible-object feature.
struct ExoPooled {
    std::vector<double> pooled;  // [dim]
};

inline ExoPooled pool_exo_features(const MaskGrid& obj_mask, const DetectionBox& box, const PatchFeatures& g_exo) {
    RealGrid m(obj_mask.h, obj_mask.w);
    for (std::size_t i = 0; i < m.size(); ++i) m.v[i] = obj_mask.v[i] ? 1.0 : 0.0;
    const RealGrid resized = crop_pad_resize_mask(m, box, g_exo.gh, g_exo.gw);
    const MaskGrid bin = binarize(resized);
    ExoPooled out;
    out.pooled = masked_average_pool(g_exo, bin);
    return out;
}

// Differentiable ego side: pool G_ego under resize14(pad(crop(1 - M_pred))).
inline ad::Tensor pool_ego_features(const ad::Tensor& m_pred, std::size_t res, const DetectionBox& box,
                                    const PatchFeatures& g_ego) {
    const auto p = detail::to_pixel_box(box, res, res);
    const std::size_t bh = p.y1 - p.y0, bw = p.x1 - p.x0;
    auto inv = ad::add_scalar(ad::scale(m_pred, -1.0), 1.0);  // 1 - M_pred, [res*res, 1]
    auto cropped = ad::crop2d(inv, res, res, p.y0, p.x0, bh, bw);
    const auto pad = detail::square_pad(bh, bw);
    auto squared = ad::pad_embed2d(cropped, bh, bw, pad.top, pad.left, pad.side, pad.side);
    auto small = ad::bilinear_resize(squared, pad.side, pad.side, g_ego.gh, g_ego.gw);  // [gh*gw, 1]
    auto denom = ad::sum(small);
    if (denom.item() < 1e-9) throw Error("empty pooling region");
    auto feat = ad::Tensor::constant({g_ego.gh * g_ego.gw, g_ego.dim}, g_ego.v);
    auto numer = ad::matmul(ad::transpose(small), feat);  // [1, dim]
    return ad::div_scalar(numer, denom);
}

// L = 1 - cos(MAP(M~ego * G_ego), MAP(M~exo * G_exo)), averaged over partners.
inline ad::Tensor pretrain_loss(const ad::Tensor& m_pred, std::size_t res, const DetectionBox& box_ego,
                                const PatchFeatures& g_ego, const std::vector<ExoPooled>& partners) {
    if (partners.empty()) throw Error("pretrain_loss: no exocentric partners");
    auto pooled_ego = pool_ego_features(m_pred, res, box_ego, g_ego);
    std::vector<ad::Tensor> coses;
    std::vector<double> coeffs;
    const double inv_n = 1.0 / static_cast<double>(partners.size());
    for (const auto& ex : partners) {
        double norm2 = 0.0;
        for (double x : ex.pooled) norm2 += x * x;
        if (norm2 <= 0.0) throw Error("empty pooling region");
        coses.push_back(ad::cosine_similarity(pooled_ego, ad::Tensor::constant({1, ex.pooled.size()}, ex.pooled)));
        coeffs.push_back(-inv_n);
    }
    return ad::affine_combination(coses, coeffs, 1.0);
}

// Snap the predicted mask to auto-segmentation regions: keep regions whose
// intersection ratio with binarize(M_pred) * M_obj exceeds
// max(0.1, 0.9 * max_ratio); fall back to the original label when nothing
// qualifies.
struct PostprocessResult {
    HeatmapLabel label;
    std::size_t selected_regions{0};
    bool used_fallback{false};
};

inline PostprocessResult postprocess(const RealGrid& m_pred, const MaskGrid& m_obj_ego, const SegmentSet& segments,
                                     const HeatmapLabel& fallback, double blur_sigma) {
    if (m_obj_ego.h != m_pred.h || m_obj_ego.w != m_pred.w) throw Error("postprocess: mask shape mismatch");
    const MaskGrid candidate = mask_intersect(binarize(m_pred), m_obj_ego);
    std::vector<double> ratios;
    ratios.reserve(segments.regions.size());
    double max_ratio = 0.0;
    for (const auto& region : segments.regions) {
        const double area = static_cast<double>(mask_area(region));
        const double inter = static_cast<double>(mask_area(mask_intersect(region, candidate)));
        const double r = area > 0.0 ? inter / area : 0.0;
        ratios.push_back(r);
        max_ratio = std::max(max_ratio, r);
    }
    const double threshold = std::max(0.1, 0.9 * max_ratio);
    MaskGrid merged(m_pred.h, m_pred.w);
    PostprocessResult out;
    for (std::size_t i = 0; i < ratios.size(); ++i)
        if (ratios[i] > threshold) {
            merged = mask_union(merged, segments.regions[i]);
            ++out.selected_regions;
        }
    if (out.selected_regions == 0 || mask_area(merged) == 0) {
        out.label = fallback;
        out.used_fallback = true;
        out.selected_regions = 0;
        return out;
    }
    out.label = mask_to_heatmap(merged, blur_sigma);
    return out;
}

// ---- refinement training ----

struct RefineScope {
    bool all{false};
    std::set<std::pair<std::string, std::string>> pairs;

    bool contains(const std::string& o, const std::string& a) const { return all || pairs.count({o, a}) != 0; }
    bool empty() const { return !all && pairs.empty(); }

    // "all" or a semicolon-separated list of object,affordance pairs
    static RefineScope parse(const std::string& text) {
        RefineScope s;
        const std::string t = trim(text);
        if (t == "all") {
            s.all = true;
            return s;
        }
        if (t.empty() || t == "none") return s;
        for (const auto& item : split(t, ';')) {
            if (trim(item).empty()) continue;
            const auto cols = split(item, ',');
            if (cols.size() != 2) throw Error("refine scope: expected object,affordance pairs: " + item);
            s.pairs.emplace(trim(cols[0]), trim(cols[1]));
        }
        return s;
    }
};

struct RefineInputs {
    const DatasetIndex* data{nullptr};
    const PartMapping* mapping{nullptr};
    const ExoPairIndex* pair_index{nullptr};
    Detector* detector{nullptr};
    Segmenter* segmenter{nullptr};
    Model* aux_encoder{nullptr};  // frozen Enc'_V
};

struct RefineResult {
    std::unique_ptr<Model> model;
    std::vector<double> epoch_losses;                 // mean pretrain loss per epoch
    std::map<std::string, RealGrid> predicted_masks;  // ego id -> M_pred at image resolution
    Config effective_config;
};

namespace detail {

inline DetectionBox best_box(const std::vector<DetectionBox>& boxes) {
    if (boxes.empty()) throw Error("no detection");
    std::size_t best = 0;
    for (std::size_t i = 1; i < boxes.size(); ++i)
        if (boxes[i].confidence > boxes[best].confidence) best = i;
    return boxes[best];
}

inline DetectionBox scale_box(const DetectionBox& b, std::size_t from_h, std::size_t from_w, std::size_t to_h,
                              std::size_t to_w) {
    const double sy = static_cast<double>(to_h) / static_cast<double>(from_h);
    const double sx = static_cast<double>(to_w) / static_cast<double>(from_w);
    return DetectionBox{b.x0 * sx, b.y0 * sy, b.x1 * sx, b.y1 * sy, b.confidence};
}

inline DetectionBox hflip_box(const DetectionBox& b, std::size_t w) {
    return DetectionBox{static_cast<double>(w) - b.x1, b.y0, static_cast<double>(w) - b.x0, b.y1, b.confidence};
}

}  // namespace detail

// Trains the sigmoid-mask model with the pretrain loss only, on the scoped
// classes, with the configured number of exocentric partners per ego image.
inline RefineResult train_refinement(const Config& cfg, const RefineInputs& in, const RefineScope& scope,
                                     std::uint64_t seed) {
    const TrainSettings ts = TrainSettings::from_config(cfg);
    const std::size_t epochs = static_cast<std::size_t>(cfg.integer("refine.epochs"));
    const std::size_t n_partners = static_cast<std::size_t>(cfg.integer("refine.partners"));

    // validate scope against dataset classes
    const auto classes = in.data->class_pairs();
    for (const auto& pr : scope.pairs)
        if (!classes.count(pr))
            throw Error("refine scope lists unknown class (" + pr.first + ", " + pr.second + ")");

    RefineResult result;
    ModelConfig mc = ModelConfig::from_config(cfg);
    mc.exo_classes = 0;
    mc.init_seed = mc.init_seed ^ (seed * 0x9e3779b97f4a7c15ULL + 1);
    result.model = std::make_unique<Model>(mc);
    result.effective_config = cfg;
    result.effective_config.set("train.seed", std::to_string(seed));
    if (scope.empty()) return result;  // no-op

    Model& model = *result.model;
    const std::size_t res = mc.resolution;

    std::map<std::string, const Sample*> exo_by_id;
    for (const Sample* x : in.data->view_samples(View::exo)) exo_by_id[x->id] = x;

    struct EgoEntry {
        const Sample* sample;
        DetectionBox box_orig;           // object box, original image coords
        DetectionBox box_res;            // object box at model resolution
        std::vector<ExoPooled> partners;
        std::string part;
    };
    std::vector<EgoEntry> entries;
    for (const Sample* e : in.data->view_samples(View::ego)) {
        if (e->split != Split::train || !scope.contains(e->object, e->affordance)) continue;
        EgoEntry entry;
        entry.sample = e;
        entry.part = in.mapping->lookup(e->object, e->affordance);
        const auto boxes = filter_boxes(in.detector->detect(e->image, e->object));
        if (boxes.empty()) continue;  // nothing to crop against
        entry.box_orig = detail::best_box(boxes);
        entry.box_res = detail::scale_box(entry.box_orig, e->image.h, e->image.w, res, res);

        auto pool_it = in.pair_index->pools.find(e->id);
        if (pool_it == in.pair_index->pools.end() || pool_it->second.empty())
            throw Error("train_refinement: no exocentric partners for " + e->id);
        const std::size_t take = std::min<std::size_t>(n_partners, pool_it->second.size());
        for (std::size_t k = 0; k < take; ++k) {
            const Sample* x = exo_by_id.at(pool_it->second[k].first);
            const auto xboxes = filter_boxes(in.detector->detect(x->image, x->object));
            if (xboxes.empty()) continue;
            const DetectionBox xb = detail::best_box(xboxes);
            const MaskGrid raw = in.segmenter->segment_box(x->image, xb);
            const MaskGrid obj = background_sanity_fix(raw, xb);
            const PatchFeatures g_exo = crop_encode(x->image, xb, *in.aux_encoder);
            RealGrid m(obj.h, obj.w);
            for (std::size_t i = 0; i < m.size(); ++i) m.v[i] = obj.v[i] ? 1.0 : 0.0;
            const MaskGrid bin = binarize(crop_pad_resize_mask(m, xb, g_exo.gh, g_exo.gw));
            if (mask_area(bin) == 0) continue;
            ExoPooled pooled;
            pooled.pooled = masked_average_pool(g_exo, bin);
            entry.partners.push_back(std::move(pooled));
        }
        if (entry.partners.empty()) continue;
        entries.push_back(std::move(entry));
    }
    if (entries.empty()) return result;

    // frozen ego crop features, cached for the two flip states (random crop
    // at desk scale is the identity, so the cache covers every step)
    std::map<std::string, PatchFeatures> g_ego_cache;
    auto g_ego_for = [&](const EgoEntry& e, bool flipped, const Image& img,
                         const DetectionBox& box) -> const PatchFeatures& {
        const std::string key = e.sample->id + (flipped ? "|f" : "|n");
        auto it = g_ego_cache.find(key);
        if (it != g_ego_cache.end()) return it->second;
        return g_ego_cache.emplace(key, crop_encode(img, box, *in.aux_encoder)).first->second;
    };

    AdamW opt(ts.lr, ts.encoder_lr, ts.beta1, ts.beta2, ts.weight_decay);
    Rng rng(seed ^ 0x5851f42d4c957f2dULL);

    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        std::vector<std::size_t> order(entries.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t epoch_count = 0;

        for (std::size_t start = 0; start < order.size(); start += ts.batch) {
            const std::size_t stop = std::min(order.size(), start + ts.batch);
            Workspace ws(model.params());
            std::vector<ad::Tensor> losses;
            for (std::size_t k = start; k < stop; ++k) {
                const EgoEntry& e = entries[order[k]];
                const std::size_t crop_from = std::max(ts.crop_from, res);
                Image src = (e.sample->image.h == crop_from && e.sample->image.w == crop_from)
                                ? e.sample->image
                                : bilinear_resize_image(e.sample->image, crop_from, crop_from);
                DetectionBox box = detail::scale_box(e.box_orig, e.sample->image.h, e.sample->image.w, crop_from,
                                                     crop_from);
                const std::size_t oi = rng.uniform_index(crop_from - res + 1);
                const std::size_t oj = rng.uniform_index(crop_from - res + 1);
                Image img = crop_image(src, oi, oj, res, res);
                box.x0 = std::clamp(box.x0 - static_cast<double>(oj), 0.0, static_cast<double>(res) - 1.0);
                box.x1 = std::clamp(box.x1 - static_cast<double>(oj), box.x0 + 1.0, static_cast<double>(res));
                box.y0 = std::clamp(box.y0 - static_cast<double>(oi), 0.0, static_cast<double>(res) - 1.0);
                box.y1 = std::clamp(box.y1 - static_cast<double>(oi), box.y0 + 1.0, static_cast<double>(res));
                bool flipped = false;
                if (rng.bernoulli(ts.hflip_prob)) {
                    img = hflip_image(img);
                    box = detail::hflip_box(box, res);
                    flipped = true;
                }
                const bool identity_crop = crop_from == res;
                const PatchFeatures& g_ego =
                    identity_crop ? g_ego_for(e, flipped, img, box) : crop_encode(img, box, *in.aux_encoder);

                auto fwd = model.forward_mask(ws, img, e.part);
                losses.push_back(pretrain_loss(fwd.mask, res, box, g_ego, e.partners));
            }
            auto batch_loss =
                ad::affine_combination(losses, std::vector<double>(losses.size(), 1.0 / static_cast<double>(losses.size())));
            ad::backward(batch_loss);
            opt.step(model.params(), ws);
            epoch_loss += batch_loss.item() * static_cast<double>(losses.size());
            epoch_count += losses.size();
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_count));
    }

    // final clean-pass masks at image resolution
    for (const auto& e : entries) {
        const Image img = (e.sample->image.h == res && e.sample->image.w == res)
                              ? e.sample->image
                              : bilinear_resize_image(e.sample->image, res, res);
        RealGrid m = model.predict_mask(img, e.part);
        if (m.h != e.sample->image.h || m.w != e.sample->image.w)
            m = bilinear_resize_grid(m, e.sample->image.h, e.sample->image.w);
        result.predicted_masks.emplace(e.sample->id, std::move(m));
    }
    return result;
}

}  // namespace affgro
