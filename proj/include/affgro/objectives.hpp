#pragma once

// Training losses, the stitching augmentation, AdamW, and the main training
// loop. Per-sample rng draws happen in a fixed order regardless of which
// loss terms are enabled, so zeroing a coefficient reproduces the reduced
// pipeline step for step.

#include <array>
#include <iomanip>
#include <sstream>

#include "affgro/labeler.hpp"
#include "affgro/model.hpp"

namespace affgro {

inline constexpr double kKlEps = 1e-12;

// KL(target || pred) with epsilon smoothing on both sides.
inline double kl_divergence(const RealGrid& target, const RealGrid& pred, double eps = kKlEps) {
    if (!target.same_shape(pred)) throw Error("kl: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i)
        s += target.v[i] * std::log((target.v[i] + eps) / (pred.v[i] + eps));
    return s;
}

inline double kl_loss(const HeatmapLabel& pred, const HeatmapLabel& target) {
    return kl_divergence(target.g, pred.g);
}

// max(0, (1 - cos(f_A, sg(f_E))) - margin); no gradient reaches f_E.
inline ad::Tensor align_loss(const ad::Tensor& f_a, const ad::Tensor& f_e, double margin) {
    auto cos = ad::cosine_similarity(f_a, ad::detach(f_e));
    return ad::relu(ad::add_scalar(ad::scale(cos, -1.0), 1.0 - margin));
}

inline ad::Tensor cross_entropy(const ad::Tensor& logits, std::size_t target) {
    if (target >= logits.numel()) throw Error("cross_entropy: target index out of range");
    return ad::sub(ad::logsumexp(logits), ad::pick(logits, target));
}

// (1 - cos(f_pred_part, Enc_T(p))) + 0.1 * (1 - cos(f_pred_obj, Enc_T(o))).
// `as_printed` swaps the pairing to match the equation as typeset.
inline ad::Tensor reason_loss(const ReasoningOutput& out, const std::vector<double>& obj_emb,
                              const std::vector<double>& part_emb, bool as_printed = false) {
    auto obj_t = ad::Tensor::constant({1, obj_emb.size()}, obj_emb);
    auto part_t = ad::Tensor::constant({1, part_emb.size()}, part_emb);
    auto part_cos = ad::cosine_similarity(out.pred_part, as_printed ? obj_t : part_t);
    auto obj_cos = ad::cosine_similarity(out.pred_obj, as_printed ? part_t : obj_t);
    return ad::affine_combination({part_cos, obj_cos}, {-1.0, -0.1}, 1.1);
}

struct StitchResult {
    Image image;
    HeatmapLabel label;
    std::size_t quadrant{0};  // 0..3, row-major
};

// 2x2 composite; the target lands in a uniformly drawn quadrant and the
// label keeps mass only there.
inline StitchResult stitch_augment(const Image& target, const HeatmapLabel& target_label,
                                   const std::array<const Image*, 3>& others, Rng& rng) {
    const std::size_t res = target.h;
    if (target.w != res || res % 2 != 0) throw Error("stitch_augment: image must be square with even size");
    const std::size_t tile = res / 2;
    StitchResult out;
    out.quadrant = rng.uniform_index(4);
    out.image = Image(res, res);
    std::size_t other_i = 0;
    for (std::size_t q = 0; q < 4; ++q) {
        const Image& src = q == out.quadrant ? target : *others.at(other_i++);
        const Image small = bilinear_resize_image(src, tile, tile);
        const std::size_t oi = (q / 2) * tile, oj = (q % 2) * tile;
        for (std::size_t i = 0; i < tile; ++i)
            for (std::size_t j = 0; j < tile; ++j) {
                const auto* s = small.px(i, j);
                auto* d = out.image.px(oi + i, oj + j);
                d[0] = s[0];
                d[1] = s[1];
                d[2] = s[2];
            }
    }
    RealGrid lg(res, res, 0.0);
    const RealGrid small_label = bilinear_resize_grid(target_label.g, tile, tile);
    const std::size_t oi = (out.quadrant / 2) * tile, oj = (out.quadrant % 2) * tile;
    for (std::size_t i = 0; i < tile; ++i)
        for (std::size_t j = 0; j < tile; ++j) lg.at(oi + i, oj + j) = small_label.at(i, j);
    out.label = HeatmapLabel::normalized(std::move(lg));
    return out;
}

struct LossReport {
    double l_kl{0}, l_align{0}, l_exo_cls{0}, l_reason{0}, l_total{0};

    LossReport& operator+=(const LossReport& o) {
        l_kl += o.l_kl;
        l_align += o.l_align;
        l_exo_cls += o.l_exo_cls;
        l_reason += o.l_reason;
        l_total += o.l_total;
        return *this;
    }

    LossReport scaled(double c) const { return {l_kl * c, l_align * c, l_exo_cls * c, l_reason * c, l_total * c}; }
};

struct TrainSettings {
    std::size_t epochs{40}, batch{20};
    double lr{1e-4}, encoder_lr{1e-5};
    double beta1{0.9}, beta2{0.95}, weight_decay{0.01};
    double lambda1{10.0}, lambda2{1.0}, margin{0.1};
    double stitch_prob{0.5}, hflip_prob{0.5};
    std::size_t crop_from{256};
    bool align{true};
    bool eq7_as_printed{false};
    double degenerate_weight{1.0};

    static TrainSettings from_config(const Config& c) {
        TrainSettings s;
        s.epochs = static_cast<std::size_t>(c.integer("train.epochs"));
        s.batch = static_cast<std::size_t>(c.integer("train.batch"));
        s.lr = c.num("train.lr");
        s.encoder_lr = c.num("train.encoder_lr");
        s.beta1 = c.num("train.beta1");
        s.beta2 = c.num("train.beta2");
        s.weight_decay = c.num("train.weight_decay");
        s.lambda1 = c.num("train.lambda1");
        s.lambda2 = c.num("train.lambda2");
        s.margin = c.num("train.margin");
        s.stitch_prob = c.num("train.stitch_prob");
        s.hflip_prob = c.num("train.hflip_prob");
        s.crop_from = static_cast<std::size_t>(c.integer("train.crop_from"));
        s.align = c.flag("train.align");
        s.eq7_as_printed = c.flag("train.eq7_as_printed");
        s.degenerate_weight = c.num("train.degenerate_weight");
        if (s.lr <= 0 || s.encoder_lr <= 0) throw Error("train: learning rates must be positive");
        if (s.stitch_prob < 0 || s.stitch_prob > 1) throw Error("train: stitch_prob must be in [0,1]");
        return s;
    }
};

// Decoupled weight decay Adam. Parameters with the "enc." prefix use the
// (reduced) encoder learning rate.
class AdamW {
public:
    AdamW(double lr, double encoder_lr, double beta1, double beta2, double weight_decay)
        : lr_(lr), encoder_lr_(encoder_lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay) {}

    void step(ParamStore& store, Workspace& ws) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& p : store.all()) {
            if (!p.trainable) continue;
            const double lr = p.name.rfind("enc.", 0) == 0 ? encoder_lr_ : lr_;
            const auto g = ws.grad_of(p.name);
            if (p.m.size() != p.value.size()) {
                p.m.assign(p.value.size(), 0.0);
                p.v.assign(p.value.size(), 0.0);
            }
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                p.m[i] = beta1_ * p.m[i] + (1.0 - beta1_) * g[i];
                p.v[i] = beta2_ * p.v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = p.m[i] / bc1;
                const double vhat = p.v[i] / bc2;
                p.value[i] -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + wd_ * p.value[i]);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    double lr_, encoder_lr_, beta1_, beta2_, wd_;
    std::size_t t_{0};
};

struct TrainInputs {
    const DatasetIndex* data{nullptr};
    const PartMapping* mapping{nullptr};
    std::map<std::string, HeatmapLabel> labels;  // ego id -> label at image resolution
    std::map<std::string, bool> degenerate;      // ego id -> uniform-fallback flag
    const ExoPairIndex* pair_index{nullptr};
    Detector* detector{nullptr};  // exo object boxes (served from cache on real runs)
};

struct TrainResult {
    std::unique_ptr<Model> model;
    std::vector<LossReport> epoch_reports;
    std::string loss_log;
    Config effective_config;
};

namespace detail {

struct AugmentedSample {
    Image image;
    HeatmapLabel label;
    bool stitched{false};
};

inline HeatmapLabel resize_label(const HeatmapLabel& hm, std::size_t h, std::size_t w) {
    if (hm.g.h == h && hm.g.w == w) return hm;
    RealGrid g = bilinear_resize_grid(hm.g, h, w);
    double s = 0.0;
    for (double x : g.v) s += x;
    if (s <= 0.0) return uniform_heatmap(h, w);
    for (double& x : g.v) x /= s;
    return HeatmapLabel{std::move(g)};
}

}  // namespace detail

// Main supervised training loop (Sec. 3 pipeline): KL to the pseudo label,
// plus the alignment, exocentric classification, and reasoning terms.
inline TrainResult train(const Config& cfg, const TrainInputs& in, std::uint64_t seed) {
    const TrainSettings ts = TrainSettings::from_config(cfg);
    ModelConfig mc = ModelConfig::from_config(cfg);

    // affordance vocabulary for the exo classification head
    std::set<std::string> aff_set;
    for (const auto& s : in.data->samples) aff_set.insert(s.affordance);
    std::vector<std::string> vocab(aff_set.begin(), aff_set.end());
    std::map<std::string, std::size_t> aff_index;
    for (std::size_t i = 0; i < vocab.size(); ++i) aff_index[vocab[i]] = i;
    mc.exo_classes = vocab.size();
    mc.init_seed = mc.init_seed ^ seed;

    Config eff = cfg;
    eff.set("model.exo_classes", std::to_string(mc.exo_classes));
    eff.set("train.seed", std::to_string(seed));
    {
        std::string joined;
        for (const auto& a : vocab) joined += (joined.empty() ? "" : ",") + a;
        eff.set("train.affordance_vocab", joined);
    }

    auto egos = in.data->view_samples(View::ego);
    std::vector<std::string> missing;
    for (const Sample* e : egos)
        if (!in.labels.count(e->id)) missing.push_back(e->id);
    if (!missing.empty()) {
        std::string msg = "train: missing pseudo labels for:";
        for (const auto& id : missing) msg += " " + id;
        throw Error(msg);
    }
    if (egos.empty()) throw Error("train: no egocentric training samples");

    std::map<std::string, const Sample*> exo_by_id;
    for (const Sample* x : in.data->view_samples(View::exo)) exo_by_id[x->id] = x;

    auto result = TrainResult{};
    result.model = std::make_unique<Model>(mc);
    Model& model = *result.model;
    const std::size_t res = mc.resolution;

    // exo features are computed at model resolution; patch masks come from
    // object boxes in original image coordinates
    std::map<std::string, MaskGrid> exo_patchmask;
    std::map<std::string, Image> exo_resized;
    auto exo_prepared = [&](const std::string& id) -> std::pair<const Image*, const MaskGrid*> {
        auto it = exo_resized.find(id);
        if (it == exo_resized.end()) {
            const Sample* x = exo_by_id.at(id);
            exo_resized[id] = (x->image.h == res && x->image.w == res) ? x->image
                                                                       : bilinear_resize_image(x->image, res, res);
            MaskGrid pm(mc.grid(), mc.grid());
            if (in.detector != nullptr) {
                pm = object_patchmask_for(*in.detector, *x, mc.grid(), mc.grid());
            } else {
                for (auto& v : pm.v) v = 1;
            }
            exo_patchmask[id] = pm;
        }
        return {&exo_resized.at(id), &exo_patchmask.at(id)};
    };

    AdamW opt(ts.lr, ts.encoder_lr, ts.beta1, ts.beta2, ts.weight_decay);
    Rng rng(seed);
    std::ostringstream log;
    std::size_t global_step = 0;

    for (std::size_t epoch = 1; epoch <= ts.epochs; ++epoch) {
        std::vector<std::size_t> order(egos.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);

        LossReport epoch_acc;
        std::size_t epoch_steps = 0;

        for (std::size_t start = 0; start < order.size(); start += ts.batch) {
            const std::size_t stop = std::min(order.size(), start + ts.batch);
            const double inv_n = 1.0 / static_cast<double>(stop - start);

            Workspace ws(model.params());
            std::vector<ad::Tensor> totals;
            LossReport step_report;

            for (std::size_t k = start; k < stop; ++k) {
                const Sample& ego = *egos[order[k]];
                const HeatmapLabel& raw_label = in.labels.at(ego.id);

                // fixed rng draw order: stitch coin, (distractors, quadrant),
                // crop offsets, flip coin, partner
                const bool want_stitch = rng.bernoulli(ts.stitch_prob);
                detail::AugmentedSample aug;

                // crop source: image and label resized to crop_from, then a
                // random res-sized window
                const std::size_t crop_from = std::max(ts.crop_from, res);
                Image src = (ego.image.h == crop_from && ego.image.w == crop_from)
                                ? ego.image
                                : bilinear_resize_image(ego.image, crop_from, crop_from);
                HeatmapLabel lbl = detail::resize_label(raw_label, crop_from, crop_from);

                std::array<const Image*, 3> distractors{nullptr, nullptr, nullptr};
                std::size_t quadrant_draws = 0;
                std::vector<Image> distractor_storage;
                const bool can_stitch = egos.size() >= 4;
                if (want_stitch && can_stitch) {
                    distractor_storage.reserve(3);
                    for (std::size_t d = 0; d < 3; ++d) {
                        std::size_t idx = rng.uniform_index(egos.size() - 1);
                        if (idx >= order[k]) ++idx;
                        const Image& other = egos[idx]->image;
                        distractor_storage.push_back((other.h == res && other.w == res)
                                                         ? other
                                                         : bilinear_resize_image(other, res, res));
                    }
                    for (std::size_t d = 0; d < 3; ++d) distractors[d] = &distractor_storage[d];
                    quadrant_draws = 1;
                }

                const std::size_t oi = rng.uniform_index(crop_from - res + 1);
                const std::size_t oj = rng.uniform_index(crop_from - res + 1);
                aug.image = crop_image(src, oi, oj, res, res);
                {
                    RealGrid g = crop_grid(lbl.g, oi, oj, res, res);
                    double s = 0.0;
                    for (double x : g.v) s += x;
                    aug.label = s > 0.0 ? HeatmapLabel::normalized(std::move(g)) : uniform_heatmap(res, res);
                }
                if (rng.bernoulli(ts.hflip_prob)) {
                    aug.image = hflip_image(aug.image);
                    aug.label = HeatmapLabel{hflip_grid(aug.label.g)};
                }
                if (quadrant_draws) {
                    auto st = stitch_augment(aug.image, aug.label, distractors, rng);
                    aug.image = std::move(st.image);
                    aug.label = std::move(st.label);
                    aug.stitched = true;
                }

                // partner draw happens for every sample so rng consumption
                // does not depend on loss toggles
                const std::string partner_id = sample_partner(*in.pair_index, ego.id, rng);

                auto fwd = model.forward_grounding(ws, aug.image, ego.affordance);

                double kl_weight = 1.0;
                auto deg = in.degenerate.find(ego.id);
                if (deg != in.degenerate.end() && deg->second) kl_weight = ts.degenerate_weight;
                auto l_kl = ad::scale(ad::kl_to_const_target(fwd.heatmap, aug.label.g.v, kKlEps), kl_weight);

                ad::Tensor l_align = ad::Tensor::scalar(0.0);
                ad::Tensor l_exo = ad::Tensor::scalar(0.0);
                if (ts.align && !aug.stitched) {
                    const auto [exo_img, exo_pm] = exo_prepared(partner_id);
                    auto exo_feat = model.encode_image(ws, *exo_img);
                    std::vector<double> pm_col(exo_pm->size());
                    double area = 0.0;
                    for (std::size_t i = 0; i < pm_col.size(); ++i) {
                        pm_col[i] = exo_pm->v[i] ? 1.0 : 0.0;
                        area += pm_col[i];
                    }
                    if (area <= 0.0) throw Error("empty pooling region");
                    auto pm_t = ad::Tensor::constant({pm_col.size(), 1}, pm_col);
                    auto f_e = ad::scale(ad::matmul(ad::transpose(pm_t), exo_feat.patches), 1.0 / area);
                    l_align = align_loss(fwd.f_a, f_e, ts.margin);
                    l_exo = cross_entropy(model.exo_head(ws, f_e), aff_index.at(ego.affordance));
                }

                ad::Tensor l_reason = ad::Tensor::scalar(0.0);
                if (fwd.has_reasoning) {
                    const std::string& part = in.mapping->lookup(ego.object, ego.affordance);
                    l_reason = reason_loss(fwd.reasoning, model.text().embed(ego.object), model.text().embed(part),
                                           ts.eq7_as_printed);
                }

                auto total = ad::affine_combination({l_kl, l_align, l_exo, l_reason},
                                                    {1.0, ts.lambda1, ts.lambda1, ts.lambda2});
                totals.push_back(total);
                step_report.l_kl += l_kl.item() * inv_n;
                step_report.l_align += l_align.item() * inv_n;
                step_report.l_exo_cls += l_exo.item() * inv_n;
                step_report.l_reason += l_reason.item() * inv_n;
                step_report.l_total += total.item() * inv_n;
            }

            auto batch_loss = ad::affine_combination(totals, std::vector<double>(totals.size(), inv_n));
            ad::backward(batch_loss);
            opt.step(model.params(), ws);

            ++global_step;
            log << "epoch=" << epoch << " step=" << global_step << " l_kl=" << format_double(step_report.l_kl)
                << " l_align=" << format_double(step_report.l_align)
                << " l_exo_cls=" << format_double(step_report.l_exo_cls)
                << " l_reason=" << format_double(step_report.l_reason)
                << " l_total=" << format_double(step_report.l_total) << "\n";
            epoch_acc += step_report;
            ++epoch_steps;
        }
        result.epoch_reports.push_back(epoch_acc.scaled(1.0 / static_cast<double>(epoch_steps)));
    }

    result.loss_log = log.str();
    result.effective_config = eff;
    return result;
}

}  // namespace affgro
