#pragma once

// Flat key=value run configuration. One shared file drives every pipeline
// stage; stages record the config hash into their outputs so downstream
// stages can refuse mismatched artifacts.

#include <map>
#include <sstream>
#include <string>

#include "affgro/core.hpp"

namespace affgro {

class Config {
public:
    Config() = default;

    static Config defaults() {
        Config c;
        // model
        c.set("model.resolution", "224");
        c.set("model.patch", "16");
        c.set("model.width", "768");
        c.set("model.depth", "12");
        c.set("model.heads", "12");
        c.set("model.dim", "512");
        c.set("model.fuser_blocks", "4");
        c.set("model.decoder_blocks", "2");
        c.set("model.reasoning", "1");
        c.set("model.init_seed", "12345");
        // training (defaults follow the reference recipe)
        c.set("train.epochs", "40");
        c.set("train.batch", "20");
        c.set("train.lr", "1e-4");
        c.set("train.encoder_lr", "1e-5");
        c.set("train.beta1", "0.9");
        c.set("train.beta2", "0.95");
        c.set("train.weight_decay", "0.01");
        c.set("train.lambda1", "10");
        c.set("train.lambda2", "1");
        c.set("train.margin", "0.1");
        c.set("train.stitch_prob", "0.5");
        c.set("train.hflip_prob", "0.5");
        c.set("train.crop_from", "256");
        c.set("train.align", "1");
        c.set("train.eq7_as_printed", "0");
        c.set("train.degenerate_weight", "1.0");
        // pseudo labels
        c.set("label.blur_sigma", "1.0");
        c.set("label.pool_size", "10");
        c.set("label.min_area", "100");
        c.set("label.backend", "mock");
        // refinement stage
        c.set("refine.epochs", "20");
        c.set("refine.scope", "all");
        c.set("refine.partners", "3");
        c.set("refine.aux_resolution", "224");
        return c;
    }

    static Config parse(const std::string& text) {
        Config c;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw Error("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
            c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
        }
        return c;
    }

    static Config load(const std::filesystem::path& path) { return parse(read_file(path)); }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    const std::string& str(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw Error("missing config key: " + key);
        return it->second;
    }

    std::string str_or(const std::string& key, const std::string& fallback) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    double num(const std::string& key) const {
        const std::string& s = str(key);
        try {
            return std::stod(s);
        } catch (const std::exception&) {
            throw Error("config key " + key + ": not a number: '" + s + "'");
        }
    }

    long integer(const std::string& key) const {
        const double d = num(key);
        const long l = static_cast<long>(d);
        if (static_cast<double>(l) != d) throw Error("config key " + key + ": not an integer");
        return l;
    }

    bool flag(const std::string& key) const {
        const std::string& s = str(key);
        if (s == "1" || s == "true" || s == "yes") return true;
        if (s == "0" || s == "false" || s == "no") return false;
        throw Error("config key " + key + ": not a boolean: '" + s + "'");
    }

    // Later entries win; used for file <- CLI override layering.
    void merge(const Config& other) {
        for (const auto& [k, v] : other.kv_) kv_[k] = v;
    }

    std::string serialize() const {
        std::ostringstream out;
        for (const auto& [k, v] : kv_) out << k << "=" << v << "\n";
        return out.str();
    }

    // Stable content hash; std::map keeps serialization order-independent of
    // insertion order.
    std::string hash() const { return hex64(fnv1a64(serialize())); }

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace affgro
