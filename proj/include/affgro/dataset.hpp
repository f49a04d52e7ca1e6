#pragma once

// Dataset ingestion. Directory layout (mirrors AGD20K):
//
//   root/<division>/trainset/{egocentric,exocentric}/<affordance>/<object>/<file>.ppm
//   root/<division>/testset/egocentric/<affordance>/<object>/<file>.ppm
//   root/<division>/testset/GT/<affordance>/<object>/<file>.pgm
//
// Sample ids are the root-relative path without extension, so downstream
// artifacts (labels, provenance) mirror the dataset tree.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "affgro/core.hpp"
#include "affgro/heatmap.hpp"
#include "affgro/image_io.hpp"

namespace affgro {

enum class View { ego, exo };
enum class Split { train, test };

inline const char* to_string(View v) { return v == View::ego ? "ego" : "exo"; }
inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct Sample {
    std::string id;
    Image image;
    View view{View::ego};
    std::string object;
    std::string affordance;
    Split split{Split::train};
};

struct LoadReport {
    std::size_t loaded{0};
    std::size_t skipped{0};
    std::vector<std::string> warnings;
};

struct DatasetIndex {
    std::vector<Sample> samples;
    std::map<std::string, HeatmapLabel> gt_heatmaps;  // test ego ids only
    LoadReport report;

    const Sample& by_id(const std::string& id) const {
        for (const auto& s : samples)
            if (s.id == id) return s;
        throw Error("unknown sample id: " + id);
    }

    std::vector<const Sample*> view_samples(View v) const {
        std::vector<const Sample*> out;
        for (const auto& s : samples)
            if (s.view == v) out.push_back(&s);
        return out;
    }

    std::set<std::pair<std::string, std::string>> class_pairs() const {
        std::set<std::pair<std::string, std::string>> out;
        for (const auto& s : samples) out.emplace(s.object, s.affordance);
        return out;
    }
};

// Maps (object, affordance) -> part name used as the grounding query.
class PartMapping {
public:
    void insert(const std::string& object, const std::string& affordance, const std::string& part) {
        if (part.empty()) throw Error("part mapping: empty part for (" + object + ", " + affordance + ")");
        auto [it, fresh] = entries_.emplace(std::make_pair(object, affordance), part);
        if (!fresh) throw Error("part mapping: duplicate key (" + object + ", " + affordance + ")");
    }

    bool has(const std::string& object, const std::string& affordance) const {
        return entries_.count({object, affordance}) != 0;
    }

    const std::string& lookup(const std::string& object, const std::string& affordance) const {
        auto it = entries_.find({object, affordance});
        if (it == entries_.end())
            throw Error("part mapping: no entry for (" + object + ", " + affordance + ")");
        return it->second;
    }

    const std::map<std::pair<std::string, std::string>, std::string>& entries() const { return entries_; }

    std::string serialize() const {
        std::string out;
        for (const auto& [key, part] : entries_)
            out += key.first + "\t" + key.second + "\t" + part + "\n";
        return out;
    }

private:
    std::map<std::pair<std::string, std::string>, std::string> entries_;
};

// One record per line: object <TAB> affordance <TAB> part.
inline PartMapping parse_part_mapping(const std::string& text) {
    PartMapping m;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        if (cols.size() != 3)
            throw Error("part mapping line " + std::to_string(lineno) + ": expected 3 tab-separated columns");
        try {
            m.insert(trim(cols[0]), trim(cols[1]), trim(cols[2]));
        } catch (const Error& e) {
            throw Error(std::string(e.what()) + " at line " + std::to_string(lineno));
        }
    }
    return m;
}

inline PartMapping load_part_mapping(const std::filesystem::path& file) {
    if (!std::filesystem::exists(file)) throw Error("part mapping file not found: " + file.string());
    return parse_part_mapping(read_file(file));
}

namespace detail {

inline std::string relative_id(const std::filesystem::path& root, const std::filesystem::path& file) {
    auto rel = std::filesystem::relative(file, root);
    rel.replace_extension();
    return rel.generic_string();
}

}  // namespace detail

// Loads one split. Unparseable paths are skipped and counted in the report;
// a missing root is fatal.
inline DatasetIndex load_dataset(const std::filesystem::path& root, Split split) {
    namespace fs = std::filesystem;
    if (!fs::exists(root)) throw Error("dataset root not found: " + root.string());

    DatasetIndex index;
    const std::string set_dir = split == Split::train ? "trainset" : "testset";

    std::vector<fs::path> divisions;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) divisions.push_back(e.path());
    std::sort(divisions.begin(), divisions.end());

    for (const auto& division : divisions) {
        const fs::path base = division / set_dir;
        if (!fs::exists(base)) continue;
        for (const char* view_name : {"egocentric", "exocentric"}) {
            const fs::path view_dir = base / view_name;
            if (!fs::exists(view_dir)) continue;
            std::vector<fs::path> files;
            for (const auto& e : fs::recursive_directory_iterator(view_dir))
                if (e.is_regular_file()) files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const auto& file : files) {
                // expected: <view_dir>/<affordance>/<object>/<file>
                const auto rel = fs::relative(file, view_dir);
                std::vector<std::string> parts;
                for (const auto& p : rel) parts.push_back(p.string());
                if (parts.size() != 3 || file.extension() != ".ppm") {
                    ++index.report.skipped;
                    index.report.warnings.push_back("skipped unparseable path: " + file.string());
                    continue;
                }
                Sample s;
                s.id = detail::relative_id(root, file);
                s.affordance = parts[0];
                s.object = parts[1];
                s.view = std::string(view_name) == "egocentric" ? View::ego : View::exo;
                s.split = split;
                try {
                    s.image = read_ppm(file);
                } catch (const Error& e) {
                    ++index.report.skipped;
                    index.report.warnings.push_back(std::string("skipped unreadable image: ") + e.what());
                    continue;
                }
                if (s.image.h < 64 || s.image.w < 64) {
                    ++index.report.skipped;
                    index.report.warnings.push_back("skipped undersized image: " + file.string());
                    continue;
                }
                if (s.object.empty() || s.affordance.empty()) {
                    ++index.report.skipped;
                    index.report.warnings.push_back("skipped sample with empty class: " + file.string());
                    continue;
                }
                ++index.report.loaded;
                index.samples.push_back(std::move(s));
            }
        }
        if (split == Split::test) {
            const fs::path gt_dir = base / "GT";
            if (fs::exists(gt_dir)) {
                std::vector<fs::path> files;
                for (const auto& e : fs::recursive_directory_iterator(gt_dir))
                    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
                std::sort(files.begin(), files.end());
                for (const auto& file : files) {
                    const auto rel = fs::relative(file, gt_dir);
                    std::vector<std::string> parts;
                    for (const auto& p : rel) parts.push_back(p.string());
                    if (parts.size() != 3) {
                        ++index.report.skipped;
                        index.report.warnings.push_back("skipped unparseable GT path: " + file.string());
                        continue;
                    }
                    fs::path ego_file = base / "egocentric" / rel;
                    ego_file.replace_extension(".ppm");
                    const std::string ego_id = detail::relative_id(root, ego_file);
                    const auto u8 = read_pgm(file);
                    bool any = false;
                    for (auto v : u8.v) any = any || v != 0;
                    if (!any) throw Error("degenerate ground truth (all zero): " + file.string());
                    RealGrid g(u8.h, u8.w);
                    for (std::size_t i = 0; i < g.size(); ++i) g.v[i] = static_cast<double>(u8.v[i]);
                    index.gt_heatmaps.emplace(ego_id, HeatmapLabel::normalized(std::move(g)));
                }
            }
        }
    }

    std::sort(index.samples.begin(), index.samples.end(),
              [](const Sample& a, const Sample& b) { return a.id < b.id; });
    std::set<std::string> ids;
    for (const auto& s : index.samples)
        if (!ids.insert(s.id).second) throw Error("duplicate sample id: " + s.id);
    return index;
}

}  // namespace affgro
