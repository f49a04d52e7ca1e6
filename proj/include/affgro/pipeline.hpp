#pragma once

// Pipeline stages behind the CLI: label generation, pair-index building,
// refinement, training, evaluation, prediction, grasp selection. Every
// stage writes the config hash into its outputs; eval refuses mismatched
// artifacts unless forced.

#include <cstdlib>
#include <optional>

#include "affgro/metrics.hpp"
#include "affgro/refiner.hpp"

namespace affgro {

// ---- grasp selection ----

struct GraspCandidate {
    long id{0};
    double u{0}, v{0};  // pixel column, row
    std::optional<double> score;
};

// Highest heatmap value at the candidate's pixel; ties break to lowest id.
inline GraspCandidate select_grasp(const HeatmapLabel& heatmap, const std::vector<GraspCandidate>& candidates) {
    if (candidates.empty()) throw Error("select_grasp: no candidates");
    const GraspCandidate* best = nullptr;
    double best_val = 0.0;
    for (const auto& c : candidates) {
        const auto col = static_cast<long>(std::lround(c.u));
        const auto row = static_cast<long>(std::lround(c.v));
        if (col < 0 || row < 0 || col >= static_cast<long>(heatmap.g.w) || row >= static_cast<long>(heatmap.g.h))
            throw Error("select_grasp: candidate " + std::to_string(c.id) + " outside the image");
        const double val = heatmap.g.at(static_cast<std::size_t>(row), static_cast<std::size_t>(col));
        if (best == nullptr || val > best_val || (val == best_val && c.id < best->id)) {
            best = &c;
            best_val = val;
        }
    }
    return *best;
}

// TSV: id <TAB> u <TAB> v [<TAB> score]
inline std::vector<GraspCandidate> parse_grasp_candidates(const std::string& text) {
    std::vector<GraspCandidate> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        if (cols.size() != 3 && cols.size() != 4) throw Error("bad grasp candidate line: " + line);
        GraspCandidate c;
        c.id = std::stol(cols[0]);
        c.u = std::stod(cols[1]);
        c.v = std::stod(cols[2]);
        if (cols.size() == 4) c.score = std::stod(cols[3]);
        out.push_back(c);
    }
    return out;
}

// ---- backends ----

struct BackendSet {
    std::shared_ptr<Detector> detector;
    std::shared_ptr<Segmenter> segmenter;
    std::shared_ptr<MockBackend> mock;  // set when the mock backend is active
};

inline BackendSet make_backends(const Config& cfg, const std::filesystem::path& root,
                                const std::vector<const DatasetIndex*>& indexes, MockOptions opts = {}) {
    const std::string name = cfg.str_or("label.backend", "mock");
    BackendSet out;
    if (name == "mock") {
        const auto meta_path = root / "fixture_meta.tsv";
        if (!std::filesystem::exists(meta_path))
            throw Error("mock backend requires fixture geometry at " + meta_path.string());
        auto records = parse_fixture_meta(read_file(meta_path));
        std::vector<const Sample*> all;
        for (const DatasetIndex* idx : indexes)
            for (const auto& s : idx->samples) all.push_back(&s);
        out.mock = std::make_shared<MockBackend>(std::move(records), all, opts);
        out.detector = out.mock;
        out.segmenter = out.mock;
    } else {
        throw Error("unknown backend '" + name + "' (shipping backends: mock)");
    }
    if (const char* cache_dir = std::getenv("AFFGRO_BACKEND_CACHE"); cache_dir != nullptr && *cache_dir != '\0') {
        auto cached = std::make_shared<CachedBackend>(out.detector, out.segmenter, cache_dir);
        out.detector = cached;
        out.segmenter = cached;
    }
    return out;
}

// Frozen stand-ins for the pretrained encoders; the salt decouples them from
// the trainable model's initialization.
inline std::unique_ptr<Model> make_frozen_encoder(const Config& cfg, std::size_t resolution, std::uint64_t salt) {
    ModelConfig mc = ModelConfig::from_config(cfg);
    mc.resolution = resolution;
    mc.exo_classes = 0;
    mc.reasoning = false;
    mc.init_seed = mc.init_seed ^ salt;
    auto m = std::make_unique<Model>(mc);
    m->params().freeze_all();
    return m;
}

inline constexpr std::uint64_t kPairEncoderSalt = 0xf00dfeedULL;
inline constexpr std::uint64_t kAuxEncoderSalt = 0xa5a5a5a5ULL;

inline std::filesystem::path default_mapping_path(const Config& cfg, const std::filesystem::path& root) {
    if (cfg.has("label.mapping")) return cfg.str("label.mapping");
    return root / "parts.tsv";
}

// ---- stages ----

struct GenLabelsReport {
    std::size_t written{0};
    std::size_t degenerate{0};
    std::size_t inverted{0};
};

inline GenLabelsReport run_gen_labels(const Config& cfg, const std::filesystem::path& root,
                                      const std::filesystem::path& labels_dir) {
    const auto train = load_dataset(root, Split::train);
    const auto mapping = load_part_mapping(default_mapping_path(cfg, root));
    auto backends = make_backends(cfg, root, {&train});
    const double sigma = cfg.num("label.blur_sigma");

    GenLabelsReport rep;
    for (const Sample* s : train.view_samples(View::ego)) {
        auto gen = generate_initial_label(*s, mapping, *backends.detector, *backends.segmenter, sigma);
        write_label(labels_dir, s->id, gen.heatmap, gen.provenance);
        ++rep.written;
        if (gen.provenance.degenerate) ++rep.degenerate;
        for (const auto& b : gen.provenance.boxes)
            if (b.inverted) ++rep.inverted;
    }
    atomic_write_file(labels_dir / "manifest.txt",
                      "stage=gen-labels\nconfig_hash=" + cfg.hash() + "\nlabels=" + std::to_string(rep.written) + "\n");
    return rep;
}

inline ExoPairIndex run_pair(const Config& cfg, const std::filesystem::path& root,
                             const std::filesystem::path& out_file) {
    const auto train = load_dataset(root, Split::train);
    auto backends = make_backends(cfg, root, {&train});
    auto frozen = make_frozen_encoder(cfg, static_cast<std::size_t>(cfg.integer("model.resolution")),
                                      kPairEncoderSalt);
    auto index = build_pair_index(train, *frozen, *backends.detector,
                                  static_cast<std::size_t>(cfg.integer("label.pool_size")));
    atomic_write_file(out_file, index.serialize(cfg.hash()));
    return index;
}

struct LabelSet {
    std::map<std::string, HeatmapLabel> labels;
    std::map<std::string, bool> degenerate;
};

inline LabelSet load_labels_for(const DatasetIndex& data, const std::filesystem::path& labels_dir) {
    LabelSet out;
    std::vector<std::string> missing;
    for (const Sample* s : data.view_samples(View::ego)) {
        const auto path = labels_dir / (s->id + ".pgm");
        if (!std::filesystem::exists(path)) {
            missing.push_back(s->id);
            continue;
        }
        out.labels.emplace(s->id, read_heatmap_pgm(path));
        out.degenerate[s->id] = read_label_provenance(labels_dir, s->id).degenerate;
    }
    if (!missing.empty()) {
        std::string msg = "missing pseudo labels for:";
        for (const auto& id : missing) msg += " " + id;
        throw Error(msg);
    }
    return out;
}

struct TrainStageResult {
    std::vector<std::uint64_t> seeds;
    std::vector<std::filesystem::path> checkpoints;
    std::vector<LossReport> final_epochs;
};

inline TrainStageResult run_train(const Config& cfg, const std::filesystem::path& root,
                                  const std::filesystem::path& labels_dir,
                                  const std::filesystem::path& pair_file, const std::filesystem::path& out_dir,
                                  const std::vector<std::uint64_t>& seeds) {
    const auto train_data = load_dataset(root, Split::train);
    const auto mapping = load_part_mapping(default_mapping_path(cfg, root));
    auto backends = make_backends(cfg, root, {&train_data});
    auto labels = load_labels_for(train_data, labels_dir);
    const auto pair_index = ExoPairIndex::parse(read_file(pair_file));

    Config cfg_with_hash = cfg;
    cfg_with_hash.set("run.config_hash", cfg.hash());

    TrainStageResult out;
    std::filesystem::create_directories(out_dir);
    for (std::uint64_t seed : seeds) {
        TrainInputs in;
        in.data = &train_data;
        in.mapping = &mapping;
        in.labels = labels.labels;
        in.degenerate = labels.degenerate;
        in.pair_index = &pair_index;
        in.detector = backends.detector.get();
        auto result = train(cfg_with_hash, in, seed);
        const auto ckpt = out_dir / ("checkpoint_s" + std::to_string(seed) + ".ckpt");
        save_checkpoint(ckpt, *result.model, result.effective_config);
        atomic_write_file(out_dir / ("loss_s" + std::to_string(seed) + ".log"), result.loss_log);
        out.seeds.push_back(seed);
        out.checkpoints.push_back(ckpt);
        out.final_epochs.push_back(result.epoch_reports.back());
    }
    return out;
}

struct RefineStageReport {
    std::size_t refined{0};
    std::size_t fallback_used{0};
    std::size_t copied{0};
};

inline RefineStageReport run_refine(const Config& cfg, const std::filesystem::path& root,
                                    const std::filesystem::path& labels_dir, const std::filesystem::path& pair_file,
                                    const std::filesystem::path& out_labels_dir,
                                    const std::optional<std::filesystem::path>& checkpoint_out, std::uint64_t seed) {
    const auto train_data = load_dataset(root, Split::train);
    const auto mapping = load_part_mapping(default_mapping_path(cfg, root));
    auto backends = make_backends(cfg, root, {&train_data});
    const auto pair_index = ExoPairIndex::parse(read_file(pair_file));
    auto aux = make_frozen_encoder(cfg, static_cast<std::size_t>(cfg.integer("refine.aux_resolution")),
                                   kAuxEncoderSalt);
    const auto scope = RefineScope::parse(cfg.str("refine.scope"));
    const double sigma = cfg.num("label.blur_sigma");
    const auto min_area = static_cast<std::size_t>(cfg.integer("label.min_area"));

    RefineInputs in;
    in.data = &train_data;
    in.mapping = &mapping;
    in.pair_index = &pair_index;
    in.detector = backends.detector.get();
    in.segmenter = backends.segmenter.get();
    in.aux_encoder = aux.get();
    auto result = train_refinement(cfg, in, scope, seed);

    RefineStageReport rep;
    for (const Sample* s : train_data.view_samples(View::ego)) {
        const HeatmapLabel initial = read_label(labels_dir, s->id);
        auto prov = read_label_provenance(labels_dir, s->id);
        auto mask_it = result.predicted_masks.find(s->id);
        if (mask_it == result.predicted_masks.end()) {
            write_label(out_labels_dir, s->id, initial, prov);
            ++rep.copied;
            continue;
        }
        const auto boxes = filter_boxes(backends.detector->detect(s->image, s->object));
        if (boxes.empty()) {
            write_label(out_labels_dir, s->id, initial, prov);
            ++rep.copied;
            continue;
        }
        const DetectionBox box = detail::best_box(boxes);
        const MaskGrid obj = background_sanity_fix(backends.segmenter->segment_box(s->image, box), box);
        const SegmentSet segments = backends.segmenter->auto_segment(s->image, min_area);
        auto post = postprocess(mask_it->second, obj, segments, initial, sigma);
        prov.refined = true;
        prov.selected_regions = post.selected_regions;
        prov.used_fallback = post.used_fallback;
        write_label(out_labels_dir, s->id, post.label, prov);
        ++rep.refined;
        if (post.used_fallback) ++rep.fallback_used;
    }
    atomic_write_file(out_labels_dir / "manifest.txt",
                      "stage=refine\nconfig_hash=" + cfg.hash() + "\nrefined=" + std::to_string(rep.refined) +
                          "\ncopied=" + std::to_string(rep.copied) + "\n");
    if (checkpoint_out && result.model) save_checkpoint(*checkpoint_out, *result.model, result.effective_config);
    return rep;
}

inline MetricReport run_eval(const Config& cfg, const std::filesystem::path& checkpoint_path,
                             const std::filesystem::path& root, bool force_config_mismatch,
                             const std::optional<std::filesystem::path>& overlays_dir) {
    auto lc = load_checkpoint(checkpoint_path);
    const std::string recorded = lc.run_config.str_or("run.config_hash", "");
    if (!force_config_mismatch && !recorded.empty() && recorded != cfg.hash())
        throw Error("checkpoint was trained under config hash " + recorded + " but the current config hashes to " +
                    cfg.hash() + "; pass --force to evaluate anyway");
    const auto test = load_dataset(root, Split::test);
    MetricReport rep = evaluate(*lc.model, test);
    rep.config_hash = recorded.empty() ? cfg.hash() : recorded;
    if (overlays_dir) {
        const std::size_t res = lc.model->config().resolution;
        for (const Sample* s : test.view_samples(View::ego)) {
            const Image img =
                (s->image.h == res && s->image.w == res) ? s->image : bilinear_resize_image(s->image, res, res);
            const HeatmapLabel hm = lc.model->predict_heatmap(img, s->affordance);
            write_ppm(*overlays_dir / (s->id + ".ppm"), overlay_heatmap(s->image, hm));
        }
    }
    return rep;
}

inline MetricReport mean_report(const std::vector<MetricReport>& reports) {
    if (reports.empty()) throw Error("mean_report: no reports");
    MetricReport out;
    for (const auto& r : reports) {
        out.kld += r.kld;
        out.sim += r.sim;
        out.nss += r.nss;
        out.nss_excluded += r.nss_excluded;
    }
    const double inv = 1.0 / static_cast<double>(reports.size());
    out.kld *= inv;
    out.sim *= inv;
    out.nss *= inv;
    out.count = reports.front().count;
    out.config_hash = reports.front().config_hash;
    return out;
}

inline HeatmapLabel run_predict(const std::filesystem::path& checkpoint_path, const std::filesystem::path& image_path,
                                const std::string& query, const std::filesystem::path& out_prefix) {
    auto lc = load_checkpoint(checkpoint_path);
    const Image orig = read_ppm(image_path);
    const std::size_t res = lc.model->config().resolution;
    const Image img = (orig.h == res && orig.w == res) ? orig : bilinear_resize_image(orig, res, res);
    const HeatmapLabel hm = lc.model->predict_heatmap(img, query);
    write_heatmap_pgm(std::filesystem::path(out_prefix.string() + ".pgm"), hm);
    write_ppm(std::filesystem::path(out_prefix.string() + "_overlay.ppm"), overlay_heatmap(orig, hm));
    return hm;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    for (const auto& item : split(text, ','))
        if (!trim(item).empty()) seeds.push_back(std::stoull(trim(item)));
    if (seeds.empty()) throw Error("no seeds given");
    return seeds;
}

}  // namespace affgro
