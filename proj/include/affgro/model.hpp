#pragma once

// The grounding network. A patch-transformer encoder produces a class token
// and a patch-feature grid; a frozen hash-seeded text provider embeds
// queries; a cross-attention fuser turns the query into a grounding vector;
// a two-way transformer decoder with two deconv upsampling stages and a
// dynamic per-image classifier produces the logits map. A reasoning head
// (two shallow MLPs) predicts object and part features from the class token.

#include <cstring>
#include <map>
#include <memory>

#include "affgro/config.hpp"
#include "affgro/heatmap.hpp"
#include "affgro/tensor.hpp"

namespace affgro {

struct ModelConfig {
    std::size_t resolution{224};
    std::size_t patch{16};
    std::size_t width{768};
    std::size_t depth{12};
    std::size_t heads{12};
    std::size_t dim{512};  // projected feature width d
    std::size_t fuser_blocks{4};
    std::size_t decoder_blocks{2};
    bool reasoning{true};
    std::size_t exo_classes{0};  // affordance vocabulary size; 0 = no head
    std::uint64_t init_seed{12345};

    std::size_t grid() const { return resolution / patch; }
    std::size_t n_patches() const { return grid() * grid(); }

    void validate() const {
        if (resolution % patch != 0) throw Error("model config: resolution not divisible by patch size");
        if (width % heads != 0) throw Error("model config: width not divisible by heads");
        if (dim % 4 != 0) throw Error("model config: dim must be divisible by 4");
        if (dim % heads != 0) throw Error("model config: dim not divisible by heads");
    }

    static ModelConfig from_config(const Config& c) {
        ModelConfig m;
        m.resolution = static_cast<std::size_t>(c.integer("model.resolution"));
        m.patch = static_cast<std::size_t>(c.integer("model.patch"));
        m.width = static_cast<std::size_t>(c.integer("model.width"));
        m.depth = static_cast<std::size_t>(c.integer("model.depth"));
        m.heads = static_cast<std::size_t>(c.integer("model.heads"));
        m.dim = static_cast<std::size_t>(c.integer("model.dim"));
        m.fuser_blocks = static_cast<std::size_t>(c.integer("model.fuser_blocks"));
        m.decoder_blocks = static_cast<std::size_t>(c.integer("model.decoder_blocks"));
        m.reasoning = c.flag("model.reasoning");
        m.init_seed = static_cast<std::uint64_t>(c.integer("model.init_seed"));
        if (c.has("model.exo_classes")) m.exo_classes = static_cast<std::size_t>(c.integer("model.exo_classes"));
        m.validate();
        return m;
    }

    // desk-scale configuration used by fixtures and tests
    static ModelConfig tiny(std::size_t resolution = 64, std::uint64_t seed = 12345) {
        ModelConfig m;
        m.resolution = resolution;
        m.patch = 16;
        m.width = 32;
        m.depth = 2;
        m.heads = 4;
        m.dim = 32;
        m.fuser_blocks = 4;
        m.decoder_blocks = 2;
        m.init_seed = seed;
        m.validate();
        return m;
    }
};

struct Param {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> value;
    bool trainable{true};
    // AdamW state
    std::vector<double> m, v;
};

class ParamStore {
public:
    Param& add(const std::string& name, std::vector<std::size_t> shape, std::vector<double> value,
               bool trainable = true) {
        if (index_.count(name)) throw Error("duplicate parameter: " + name);
        Param p;
        p.name = name;
        p.shape = std::move(shape);
        p.value = std::move(value);
        p.trainable = trainable;
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return params_.back();
    }

    Param& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter: " + name);
        return params_[it->second];
    }

    const Param& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter: " + name);
        return params_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::vector<Param>& all() { return params_; }
    const std::vector<Param>& all() const { return params_; }
    std::size_t count() const { return params_.size(); }

    void freeze_all() {
        for (auto& p : params_) p.trainable = false;
    }

private:
    std::vector<Param> params_;
    std::map<std::string, std::size_t> index_;
};

// One autodiff graph; binds each parameter to a single leaf node so reuse
// within a forward pass accumulates gradients correctly.
class Workspace {
public:
    explicit Workspace(ParamStore& store) : store_(&store) {}

    ad::Tensor p(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Param& par = store_->get(name);
        auto t = ad::Tensor::leaf(par.shape, par.value, par.trainable);
        bound_.emplace(name, t);
        return t;
    }

    // gradient of the last backward() for a bound parameter (zeros if unused)
    std::vector<double> grad_of(const std::string& name) const {
        auto it = bound_.find(name);
        if (it == bound_.end() || it->second.grad().empty())
            return std::vector<double>(store_->get(name).value.size(), 0.0);
        return it->second.grad();
    }

    bool bound(const std::string& name) const { return bound_.count(name) != 0; }

private:
    ParamStore* store_;
    std::map<std::string, ad::Tensor> bound_;
};

// Frozen deterministic text embedding provider: each string hashes to a seed
// that generates a fixed unit vector. Stands in for pre-extracted text
// features at desk scale; a real provider can supply a lookup table file.
class TextEmbedder {
public:
    TextEmbedder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}

    std::vector<double> embed(const std::string& query) const {
        auto it = cache_.find(query);
        if (it != cache_.end()) return it->second;
        Rng rng(fnv1a64(query) ^ seed_);
        std::vector<double> v(dim_);
        double norm2 = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            norm2 += x * x;
        }
        const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-30));
        for (auto& x : v) x *= inv;
        cache_.emplace(query, v);
        return v;
    }

    ad::Tensor embed_tensor(const std::string& query) const {
        return ad::Tensor::constant({1, dim_}, embed(query));
    }

    std::size_t dim() const { return dim_; }

private:
    std::size_t dim_;
    std::uint64_t seed_;
    mutable std::map<std::string, std::vector<double>> cache_;
};

struct FeatureBundle {
    ad::Tensor cls;      // [1, d]
    ad::Tensor patches;  // [gh*gw, d]
    std::size_t gh{0}, gw{0};
};

struct ReasoningOutput {
    ad::Tensor pred_obj;   // [1, d]
    ad::Tensor pred_part;  // [1, d]
};

struct DecoderOutput {
    ad::Tensor logits;      // [H*W, 1], H = 4*gh, W = 4*gw
    ad::Tensor dyn_weight;  // [1, d/4]
    std::size_t h{0}, w{0};
};

class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(cfg), text_(cfg.dim, cfg.init_seed ^ 0x9e3779b97f4a7c15ULL) {
        cfg_.validate();
        Rng rng(cfg_.init_seed);
        register_params(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const TextEmbedder& text() const { return text_; }

    // ---- encoder ----
    FeatureBundle encode_image(Workspace& ws, const Image& img) const {
        if (img.h != cfg_.resolution || img.w != cfg_.resolution)
            throw Error("encode_image: expected " + std::to_string(cfg_.resolution) + "x" +
                        std::to_string(cfg_.resolution) + " input, got " + std::to_string(img.h) + "x" +
                        std::to_string(img.w));
        const std::size_t g = cfg_.grid(), P = cfg_.patch, n = cfg_.n_patches();
        std::vector<double> patches(n * P * P * 3);
        for (std::size_t gi = 0; gi < g; ++gi)
            for (std::size_t gj = 0; gj < g; ++gj) {
                double* row = patches.data() + (gi * g + gj) * P * P * 3;
                for (std::size_t pi = 0; pi < P; ++pi)
                    for (std::size_t pj = 0; pj < P; ++pj) {
                        const auto* px = img.px(gi * P + pi, gj * P + pj);
                        for (std::size_t c = 0; c < 3; ++c)
                            row[(pi * P + pj) * 3 + c] = (static_cast<double>(px[c]) / 255.0 - 0.5) * 2.0;
                    }
            }
        auto x = ad::linear(ad::Tensor::constant({n, P * P * 3}, std::move(patches)), ws.p("enc.patch.w"),
                            ws.p("enc.patch.b"));
        auto tokens = ad::concat_rows({ws.p("enc.cls"), x});
        tokens = ad::add(tokens, ws.p("enc.pos"));
        for (std::size_t b = 0; b < cfg_.depth; ++b) {
            const std::string pre = "enc.blk" + std::to_string(b);
            auto h = ad::layer_norm(tokens, ws.p(pre + ".ln1.g"), ws.p(pre + ".ln1.b"));
            tokens = ad::add(tokens, attention(ws, pre + ".attn", h, h, cfg_.heads));
            auto h2 = ad::layer_norm(tokens, ws.p(pre + ".ln2.g"), ws.p(pre + ".ln2.b"));
            tokens = ad::add(tokens, mlp(ws, pre + ".mlp", h2));
        }
        tokens = ad::layer_norm(tokens, ws.p("enc.ln_post.g"), ws.p("enc.ln_post.b"));
        tokens = ad::matmul(tokens, ws.p("enc.proj"));
        FeatureBundle out;
        out.cls = ad::slice_rows(tokens, 0, 1);
        out.patches = ad::slice_rows(tokens, 1, n + 1);
        out.gh = out.gw = g;
        return out;
    }

    ad::Tensor embed_text(const std::string& query) const { return text_.embed_tensor(query); }

    // ---- reasoning head ----
    ReasoningOutput reason(Workspace& ws, const ad::Tensor& cls, const ad::Tensor& f_t) const {
        ReasoningOutput out;
        auto h = ad::gelu(ad::linear(cls, ws.p("reason.noun.w1"), ws.p("reason.noun.b1")));
        out.pred_obj = ad::linear(h, ws.p("reason.noun.w2"), ws.p("reason.noun.b2"));
        auto joint = ad::concat_cols({out.pred_obj, f_t});
        auto h2 = ad::gelu(ad::linear(joint, ws.p("reason.part.w1"), ws.p("reason.part.b1")));
        out.pred_part = ad::linear(h2, ws.p("reason.part.w2"), ws.p("reason.part.b2"));
        return out;
    }

    // ---- cross-modal fuser ----
    ad::Tensor fuse(Workspace& ws, const ad::Tensor& query, const FeatureBundle& feat) const {
        auto kv = ad::concat_rows({feat.cls, feat.patches});
        auto q = query;
        for (std::size_t b = 0; b < cfg_.fuser_blocks; ++b) {
            const std::string pre = "fuser.blk" + std::to_string(b);
            auto qn = ad::layer_norm(q, ws.p(pre + ".lnq.g"), ws.p(pre + ".lnq.b"));
            auto kvn = ad::layer_norm(kv, ws.p(pre + ".lnkv.g"), ws.p(pre + ".lnkv.b"));
            q = ad::add(q, attention(ws, pre + ".attn", qn, kvn, cfg_.heads));
            auto qn2 = ad::layer_norm(q, ws.p(pre + ".ln2.g"), ws.p(pre + ".ln2.b"));
            q = ad::add(q, mlp(ws, pre + ".mlp", qn2));
        }
        return q;
    }

    // ---- two-way decoder ----
    DecoderOutput decode(Workspace& ws, const FeatureBundle& feat, const ad::Tensor& query_token) const {
        auto a = ad::concat_rows({query_token, feat.cls, ws.p("dec.x")});
        auto b = feat.patches;
        for (std::size_t i = 0; i < cfg_.decoder_blocks; ++i) {
            const std::string pre = "dec.blk" + std::to_string(i);
            auto an = ad::layer_norm(a, ws.p(pre + ".ln_a1.g"), ws.p(pre + ".ln_a1.b"));
            a = ad::add(a, attention(ws, pre + ".self", an, an, cfg_.heads));
            auto an2 = ad::layer_norm(a, ws.p(pre + ".ln_a2.g"), ws.p(pre + ".ln_a2.b"));
            auto bn1 = ad::layer_norm(b, ws.p(pre + ".ln_b1.g"), ws.p(pre + ".ln_b1.b"));
            a = ad::add(a, attention(ws, pre + ".cross_ab", an2, bn1, cfg_.heads));
            auto an3 = ad::layer_norm(a, ws.p(pre + ".ln_a3.g"), ws.p(pre + ".ln_a3.b"));
            a = ad::add(a, mlp(ws, pre + ".mlp", an3));
            auto bn2 = ad::layer_norm(b, ws.p(pre + ".ln_b2.g"), ws.p(pre + ".ln_b2.b"));
            auto an4 = ad::layer_norm(a, ws.p(pre + ".ln_a4.g"), ws.p(pre + ".ln_a4.b"));
            b = ad::add(b, attention(ws, pre + ".cross_ba", bn2, an4, cfg_.heads));
        }
        const std::size_t d = cfg_.dim, g = feat.gh;
        auto up = ad::conv_transpose2x2(b, g, g, ws.p("dec.up1.w"), ws.p("dec.up1.b"), d, d / 2);
        up = ad::gelu(up);
        up = ad::conv_transpose2x2(up, 2 * g, 2 * g, ws.p("dec.up2.w"), ws.p("dec.up2.b"), d / 2, d / 4);
        up = ad::gelu(up);
        auto xt = ad::slice_rows(a, 2, 3);
        auto dyn = ad::gelu(ad::linear(xt, ws.p("dec.dyn.w1"), ws.p("dec.dyn.b1")));
        dyn = ad::linear(dyn, ws.p("dec.dyn.w2"), ws.p("dec.dyn.b2"));
        DecoderOutput out;
        out.dyn_weight = dyn;
        out.logits = ad::matmul(up, ad::transpose(dyn));
        out.h = out.w = 4 * g;
        return out;
    }

    // Grounding-mode query token: fuser output, with the reasoning residual
    // added to the text feature beforehand when the module is enabled.
    struct GroundingForward {
        FeatureBundle feat;
        ad::Tensor f_a;
        DecoderOutput dec;
        ad::Tensor heatmap;  // [res*res, 1], sums to 1
        ReasoningOutput reasoning;
        bool has_reasoning{false};
    };

    GroundingForward forward_grounding(Workspace& ws, const Image& img, const std::string& affordance) const {
        GroundingForward out;
        out.feat = encode_image(ws, img);
        auto f_t = embed_text(affordance);
        auto query = f_t;
        if (cfg_.reasoning) {
            out.reasoning = reason(ws, out.feat.cls, f_t);
            out.has_reasoning = true;
            query = ad::add(f_t, out.reasoning.pred_part);
        }
        out.f_a = fuse(ws, query, out.feat);
        out.dec = decode(ws, out.feat, out.f_a);
        auto up = ad::bilinear_resize(out.dec.logits, out.dec.h, out.dec.w, cfg_.resolution, cfg_.resolution);
        out.heatmap = ad::softmax_all(up);
        return out;
    }

    // Refinement-mode forward: the decoder query is c_V + Enc_T(part), the
    // fuser and reasoning head are bypassed, and the output is a sigmoid mask.
    struct MaskForward {
        FeatureBundle feat;
        DecoderOutput dec;
        ad::Tensor mask;  // [res*res, 1] in [0,1]
    };

    MaskForward forward_mask(Workspace& ws, const Image& img, const std::string& part) const {
        MaskForward out;
        out.feat = encode_image(ws, img);
        auto query = ad::add(out.feat.cls, embed_text(part));
        out.dec = decode(ws, out.feat, query);
        auto up = ad::bilinear_resize(out.dec.logits, out.dec.h, out.dec.w, cfg_.resolution, cfg_.resolution);
        out.mask = ad::sigmoid(up);
        return out;
    }

    HeatmapLabel predict_heatmap(const Image& img, const std::string& affordance) {
        Workspace ws(store_);
        auto fwd = forward_grounding(ws, img, affordance);
        RealGrid g(cfg_.resolution, cfg_.resolution);
        g.v = fwd.heatmap.val();
        return HeatmapLabel{std::move(g)};
    }

    RealGrid predict_mask(const Image& img, const std::string& part) {
        Workspace ws(store_);
        auto fwd = forward_mask(ws, img, part);
        RealGrid g(cfg_.resolution, cfg_.resolution);
        g.v = fwd.mask.val();
        return g;
    }

    // exocentric affordance classification head
    ad::Tensor exo_head(Workspace& ws, const ad::Tensor& f_e) const {
        if (cfg_.exo_classes == 0) throw Error("exo head not configured (exo_classes == 0)");
        return ad::linear(f_e, ws.p("exohead.w"), ws.p("exohead.b"));
    }

    // ---- shared sublayers ----
    ad::Tensor attention(Workspace& ws, const std::string& pre, const ad::Tensor& q_in, const ad::Tensor& kv_in,
                         std::size_t heads) const {
        const std::size_t dm = q_in.cols();
        const std::size_t dh = dm / heads;
        auto q = ad::linear(q_in, ws.p(pre + ".wq"), ws.p(pre + ".bq"));
        auto k = ad::linear(kv_in, ws.p(pre + ".wk"), ws.p(pre + ".bk"));
        auto v = ad::linear(kv_in, ws.p(pre + ".wv"), ws.p(pre + ".bv"));
        std::vector<ad::Tensor> head_outs;
        for (std::size_t h = 0; h < heads; ++h) {
            auto qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
            auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
            head_outs.push_back(ad::matmul(ad::softmax_rows(scores), vh));
        }
        return ad::linear(ad::concat_cols(head_outs), ws.p(pre + ".wo"), ws.p(pre + ".bo"));
    }

    ad::Tensor mlp(Workspace& ws, const std::string& pre, const ad::Tensor& x) const {
        auto h = ad::gelu(ad::linear(x, ws.p(pre + ".w1"), ws.p(pre + ".b1")));
        return ad::linear(h, ws.p(pre + ".w2"), ws.p(pre + ".b2"));
    }

private:
    void register_params(Rng& rng) {
        const std::size_t P = cfg_.patch, W = cfg_.width, D = cfg_.dim;
        const std::size_t n_tok = cfg_.n_patches() + 1;
        add_normal(rng, "enc.patch.w", {P * P * 3, W});
        add_zeros("enc.patch.b", {W});
        add_normal(rng, "enc.cls", {1, W});
        add_normal(rng, "enc.pos", {n_tok, W});
        for (std::size_t b = 0; b < cfg_.depth; ++b) {
            const std::string pre = "enc.blk" + std::to_string(b);
            add_ln(pre + ".ln1", W);
            add_attn(rng, pre + ".attn", W);
            add_ln(pre + ".ln2", W);
            add_mlp(rng, pre + ".mlp", W);
        }
        add_ln("enc.ln_post", W);
        add_normal(rng, "enc.proj", {W, D});
        for (std::size_t b = 0; b < cfg_.fuser_blocks; ++b) {
            const std::string pre = "fuser.blk" + std::to_string(b);
            add_ln(pre + ".lnq", D);
            add_ln(pre + ".lnkv", D);
            add_attn(rng, pre + ".attn", D);
            add_ln(pre + ".ln2", D);
            add_mlp(rng, pre + ".mlp", D);
        }
        add_normal(rng, "dec.x", {1, D});
        for (std::size_t b = 0; b < cfg_.decoder_blocks; ++b) {
            const std::string pre = "dec.blk" + std::to_string(b);
            add_ln(pre + ".ln_a1", D);
            add_attn(rng, pre + ".self", D);
            add_ln(pre + ".ln_a2", D);
            add_ln(pre + ".ln_b1", D);
            add_attn(rng, pre + ".cross_ab", D);
            add_ln(pre + ".ln_a3", D);
            add_mlp(rng, pre + ".mlp", D);
            add_ln(pre + ".ln_b2", D);
            add_ln(pre + ".ln_a4", D);
            add_attn(rng, pre + ".cross_ba", D);
        }
        add_normal(rng, "dec.up1.w", {D * (D / 2) * 4});
        add_zeros("dec.up1.b", {D / 2});
        add_normal(rng, "dec.up2.w", {(D / 2) * (D / 4) * 4});
        add_zeros("dec.up2.b", {D / 4});
        add_normal(rng, "dec.dyn.w1", {D, D});
        add_zeros("dec.dyn.b1", {D});
        add_normal(rng, "dec.dyn.w2", {D, D / 4});
        add_zeros("dec.dyn.b2", {D / 4});
        if (cfg_.reasoning) {
            add_normal(rng, "reason.noun.w1", {D, D});
            add_zeros("reason.noun.b1", {D});
            add_normal(rng, "reason.noun.w2", {D, D});
            add_zeros("reason.noun.b2", {D});
            add_normal(rng, "reason.part.w1", {2 * D, D});
            add_zeros("reason.part.b1", {D});
            add_normal(rng, "reason.part.w2", {D, D});
            add_zeros("reason.part.b2", {D});
        }
        if (cfg_.exo_classes > 0) {
            add_normal(rng, "exohead.w", {D, cfg_.exo_classes});
            add_zeros("exohead.b", {cfg_.exo_classes});
        }
    }

    void add_normal(Rng& rng, const std::string& name, std::vector<std::size_t> shape, double std_dev = 0.02) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal() * std_dev;
        store_.add(name, std::move(shape), std::move(v));
    }

    void add_zeros(const std::string& name, std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        store_.add(name, std::move(shape), std::vector<double>(n, 0.0));
    }

    void add_ln(const std::string& pre, std::size_t n) {
        store_.add(pre + ".g", {n}, std::vector<double>(n, 1.0));
        store_.add(pre + ".b", {n}, std::vector<double>(n, 0.0));
    }

    void add_attn(Rng& rng, const std::string& pre, std::size_t d) {
        add_normal(rng, pre + ".wq", {d, d});
        add_zeros(pre + ".bq", {d});
        add_normal(rng, pre + ".wk", {d, d});
        add_zeros(pre + ".bk", {d});
        add_normal(rng, pre + ".wv", {d, d});
        add_zeros(pre + ".bv", {d});
        add_normal(rng, pre + ".wo", {d, d});
        add_zeros(pre + ".bo", {d});
    }

    void add_mlp(Rng& rng, const std::string& pre, std::size_t d) {
        add_normal(rng, pre + ".w1", {d, 4 * d});
        add_zeros(pre + ".b1", {4 * d});
        add_normal(rng, pre + ".w2", {4 * d, d});
        add_zeros(pre + ".b2", {d});
    }

    ModelConfig cfg_;
    ParamStore store_;
    TextEmbedder text_;
};

// ---- checkpoint container ----
// "AFGC" magic, version, embedded config text, then named double tensors.

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const Config& run_config) {
    std::ostringstream out;
    const std::string cfg_text = run_config.serialize();
    out << "AFGC 1\n";
    out << "config " << cfg_text.size() << "\n" << cfg_text;
    out << "params " << model.params().count() << "\n";
    for (const auto& p : model.params().all()) {
        out << p.name << " " << p.shape.size();
        for (auto d : p.shape) out << " " << d;
        out << "\n";
        out.write(reinterpret_cast<const char*>(p.value.data()),
                  static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    }
    atomic_write_file(path, out.str());
}

struct LoadedCheckpoint {
    Config run_config;
    std::unique_ptr<Model> model;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    std::istringstream in(bytes);
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != "AFGC") throw Error("unknown checkpoint format: " + path.string());
    if (version != 1) throw Error("unsupported checkpoint version: " + std::to_string(version));
    std::string kw;
    std::size_t cfg_len = 0;
    in >> kw >> cfg_len;
    if (kw != "config") throw Error("corrupt checkpoint (missing config): " + path.string());
    in.get();
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
    LoadedCheckpoint lc;
    lc.run_config = Config::parse(cfg_text);
    ModelConfig mc = ModelConfig::from_config(lc.run_config);
    lc.model = std::make_unique<Model>(mc);
    std::size_t count = 0;
    in >> kw >> count;
    if (kw != "params") throw Error("corrupt checkpoint (missing params): " + path.string());
    std::string line;
    std::getline(in, line);
    for (std::size_t i = 0; i < count; ++i) {
        std::getline(in, line);
        std::istringstream hdr(line);
        std::string name;
        std::size_t ndim = 0;
        hdr >> name >> ndim;
        std::vector<std::size_t> shape(ndim);
        std::size_t numel = 1;
        for (auto& d : shape) {
            hdr >> d;
            numel *= d;
        }
        Param& p = lc.model->params().get(name);
        if (p.shape != shape) throw Error("checkpoint shape mismatch for " + name);
        in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(numel * sizeof(double)));
        if (!in) throw Error("truncated checkpoint: " + path.string());
    }
    return lc;
}

}  // namespace affgro
