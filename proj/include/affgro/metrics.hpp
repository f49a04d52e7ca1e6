#pragma once

// Saliency-style evaluation: KLD (same formula and epsilon as the KL loss),
// SIM (histogram intersection), NSS (z-scored prediction averaged over
// fixation pixels). Macro averages with a per-class breakdown.

#include <cmath>
#include <map>
#include <sstream>

#include "affgro/dataset.hpp"
#include "affgro/model.hpp"
#include "affgro/objectives.hpp"

namespace affgro {

inline double kld_metric(const HeatmapLabel& pred, const HeatmapLabel& gt) {
    return kl_divergence(gt.g, pred.g, kKlEps);
}

inline double sim_metric(const HeatmapLabel& pred, const HeatmapLabel& gt) {
    if (!pred.g.same_shape(gt.g)) throw Error("sim: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.g.size(); ++i) s += std::min(pred.g.v[i], gt.g.v[i]);
    return s;
}

// NSS. Prediction is z-scored with the population standard deviation; the
// ground truth is min-max normalized to [0,1] and binarized at 0.1 to form
// the fixation map. No fixations -> NaN (caller excludes); constant
// prediction -> 0 by convention.
inline double nss_metric(const HeatmapLabel& pred, const HeatmapLabel& gt) {
    if (!pred.g.same_shape(gt.g)) throw Error("nss: shape mismatch");
    const std::size_t n = pred.g.size();
    double mn = gt.g.v[0], mx = gt.g.v[0];
    for (double x : gt.g.v) {
        mn = std::min(mn, x);
        mx = std::max(mx, x);
    }
    if (mx <= mn) return std::nan("");
    double mu = 0.0;
    for (double x : pred.g.v) mu += x;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double x : pred.g.v) var += (x - mu) * (x - mu);
    var /= static_cast<double>(n);
    const double sigma = std::sqrt(var);
    std::size_t fix_count = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double norm = (gt.g.v[i] - mn) / (mx - mn);
        if (norm > 0.1) {
            ++fix_count;
            if (sigma > 0.0) acc += (pred.g.v[i] - mu) / sigma;
        }
    }
    if (fix_count == 0) return std::nan("");
    if (sigma == 0.0) return 0.0;
    return acc / static_cast<double>(fix_count);
}

struct ClassMetrics {
    double kld{0}, sim{0}, nss{0};
    std::size_t count{0};
    std::size_t nss_count{0};
};

struct MetricReport {
    double kld{0}, sim{0}, nss{0};
    std::size_t count{0};
    std::size_t nss_excluded{0};
    std::map<std::pair<std::string, std::string>, ClassMetrics> per_class;
    std::string config_hash;

    std::string text() const {
        std::ostringstream out;
        out << "# nss_std=population\n";
        if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
        out << "samples=" << count << " nss_excluded=" << nss_excluded << "\n";
        out << "KLD=" << format_double(kld) << " SIM=" << format_double(sim) << " NSS=" << format_double(nss)
            << "\n";
        out << "\nper-class (object, affordance): KLD SIM NSS n\n";
        for (const auto& [key, m] : per_class)
            out << key.first << "," << key.second << "\t" << format_double(m.kld) << "\t" << format_double(m.sim)
                << "\t" << format_double(m.nss) << "\t" << m.count << "\n";
        return out.str();
    }

    std::string key_values() const {
        std::ostringstream out;
        out << "kld=" << format_double(kld) << "\n";
        out << "sim=" << format_double(sim) << "\n";
        out << "nss=" << format_double(nss) << "\n";
        out << "count=" << count << "\n";
        out << "nss_excluded=" << nss_excluded << "\n";
        out << "nss_std=population\n";
        if (!config_hash.empty()) out << "config_hash=" << config_hash << "\n";
        return out.str();
    }
};

// Prediction resized (and renormalized) to ground-truth resolution before
// scoring.
inline HeatmapLabel align_to_gt(const HeatmapLabel& pred, std::size_t h, std::size_t w) {
    if (pred.g.h == h && pred.g.w == w) return pred;
    RealGrid g = bilinear_resize_grid(pred.g, h, w);
    return HeatmapLabel::normalized(std::move(g));
}

// Evaluates a predictor callback over the test split.
template <typename PredictFn>
inline MetricReport evaluate_with(const DatasetIndex& test, PredictFn&& predict) {
    const auto egos = test.view_samples(View::ego);
    std::vector<std::string> missing;
    for (const Sample* s : egos)
        if (!test.gt_heatmaps.count(s->id)) missing.push_back(s->id);
    if (!missing.empty()) {
        std::string msg = "evaluate: missing ground truth for:";
        for (const auto& id : missing) msg += " " + id;
        throw Error(msg);
    }
    if (egos.empty()) throw Error("evaluate: no test samples");

    MetricReport rep;
    double nss_acc = 0.0;
    std::size_t nss_n = 0;
    for (const Sample* s : egos) {
        const HeatmapLabel& gt = test.gt_heatmaps.at(s->id);
        const HeatmapLabel pred = align_to_gt(predict(*s), gt.g.h, gt.g.w);
        const double kld = kld_metric(pred, gt);
        const double sim = sim_metric(pred, gt);
        const double nss = nss_metric(pred, gt);
        auto& cls = rep.per_class[{s->object, s->affordance}];
        rep.kld += kld;
        rep.sim += sim;
        cls.kld += kld;
        cls.sim += sim;
        ++cls.count;
        ++rep.count;
        if (std::isnan(nss)) {
            ++rep.nss_excluded;
        } else {
            nss_acc += nss;
            ++nss_n;
            cls.nss += nss;
            ++cls.nss_count;
        }
    }
    rep.kld /= static_cast<double>(rep.count);
    rep.sim /= static_cast<double>(rep.count);
    rep.nss = nss_n > 0 ? nss_acc / static_cast<double>(nss_n) : 0.0;
    for (auto& [key, m] : rep.per_class) {
        m.kld /= static_cast<double>(m.count);
        m.sim /= static_cast<double>(m.count);
        if (m.nss_count > 0) m.nss /= static_cast<double>(m.nss_count);
    }
    return rep;
}

inline MetricReport evaluate(Model& model, const DatasetIndex& test) {
    const std::size_t res = model.config().resolution;
    return evaluate_with(test, [&](const Sample& s) {
        const Image img = (s.image.h == res && s.image.w == res) ? s.image : bilinear_resize_image(s.image, res, res);
        return model.predict_heatmap(img, s.affordance);
    });
}

}  // namespace affgro
