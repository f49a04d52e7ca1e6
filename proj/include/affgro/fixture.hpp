#pragma once

// Synthetic desk-scale dataset. Each ego image shows a two-part object
// (body + part, both ellipses) on a noisy background; the matching exo
// images show the same object with the part overpainted by an occluder
// blob, mimicking a hand covering the interaction region. The generator
// keeps the exact geometry so mock backends and tests can answer queries
// without any pretrained model.

#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include "affgro/dataset.hpp"

namespace affgro {

struct Ellipse {
    double cx{0}, cy{0}, rx{1}, ry{1};

    bool contains(std::size_t i, std::size_t j) const {
        const double dx = (static_cast<double>(j) - cx) / rx;
        const double dy = (static_cast<double>(i) - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
    }

    // [x0, x1) x [y0, y1), clipped to the image
    std::array<double, 4> bbox(std::size_t h, std::size_t w) const {
        const double x0 = std::max(0.0, std::floor(cx - rx));
        const double y0 = std::max(0.0, std::floor(cy - ry));
        const double x1 = std::min(static_cast<double>(w), std::ceil(cx + rx) + 1.0);
        const double y1 = std::min(static_cast<double>(h), std::ceil(cy + ry) + 1.0);
        return {x0, y0, x1, y1};
    }
};

inline MaskGrid ellipse_mask(const Ellipse& e, std::size_t h, std::size_t w) {
    MaskGrid m(h, w);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            if (e.contains(i, j)) m.at(i, j) = 1;
    return m;
}

inline MaskGrid mask_union(const MaskGrid& a, const MaskGrid& b) {
    MaskGrid m(a.h, a.w);
    for (std::size_t i = 0; i < m.size(); ++i) m.v[i] = (a.v[i] || b.v[i]) ? 1 : 0;
    return m;
}

inline MaskGrid mask_minus(const MaskGrid& a, const MaskGrid& b) {
    MaskGrid m(a.h, a.w);
    for (std::size_t i = 0; i < m.size(); ++i) m.v[i] = (a.v[i] && !b.v[i]) ? 1 : 0;
    return m;
}

inline MaskGrid mask_intersect(const MaskGrid& a, const MaskGrid& b) {
    MaskGrid m(a.h, a.w);
    for (std::size_t i = 0; i < m.size(); ++i) m.v[i] = (a.v[i] && b.v[i]) ? 1 : 0;
    return m;
}

// Geometry record for one fixture image.
struct FixtureRecord {
    std::string id;
    View view{View::ego};
    std::string object, affordance, part;
    std::size_t h{0}, w{0};
    Ellipse body, part_region;
    bool has_occluder{false};
    Ellipse occluder;

    MaskGrid body_mask() const { return ellipse_mask(body, h, w); }
    MaskGrid part_mask() const { return ellipse_mask(part_region, h, w); }
    MaskGrid object_mask() const { return mask_union(body_mask(), part_mask()); }
    // pixels of the object still visible (exo: occluder hides part of it)
    MaskGrid visible_object_mask() const {
        auto obj = object_mask();
        if (!has_occluder) return obj;
        return mask_minus(obj, ellipse_mask(occluder, h, w));
    }
};

struct FixtureSpec {
    std::uint64_t seed{7};
    std::size_t n_objects{4};
    std::size_t n_affordances{2};
    std::size_t ego_train_per_class{6};
    std::size_t exo_train_per_class{4};
    std::size_t ego_test_per_class{2};
    std::size_t image_size{64};
    double blur_sigma{1.0};
    double min_occlusion{0.6};
};

struct FixtureData {
    DatasetIndex train;
    DatasetIndex test;
    PartMapping mapping;
    std::map<std::string, FixtureRecord> records;  // id -> geometry
};

namespace detail {

inline std::array<std::uint8_t, 3> hsv_to_rgb(double hue, double sat, double val) {
    const double h6 = std::fmod(hue, 1.0) * 6.0;
    const int i = static_cast<int>(h6);
    const double f = h6 - i;
    const double p = val * (1.0 - sat), q = val * (1.0 - sat * f), t = val * (1.0 - sat * (1.0 - f));
    double r = 0, g = 0, b = 0;
    switch (i % 6) {
        case 0: r = val; g = t; b = p; break;
        case 1: r = q; g = val; b = p; break;
        case 2: r = p; g = val; b = t; break;
        case 3: r = p; g = q; b = val; break;
        case 4: r = t; g = p; b = val; break;
        case 5: r = val; g = p; b = q; break;
    }
    auto u8 = [](double x) { return static_cast<std::uint8_t>(std::lround(x * 255.0)); };
    return {u8(r), u8(g), u8(b)};
}

inline std::string fixture_object_name(std::size_t i) {
    static const char* names[] = {"mug", "pan", "kettle", "lamp", "vase", "drill",
                                  "clamp", "flask", "crate", "bell", "fan", "jar"};
    if (i < std::size(names)) return names[i];
    return "object" + std::to_string(i);
}

inline std::string fixture_affordance_name(std::size_t i) {
    static const char* names[] = {"hold", "open", "press", "turn", "lift", "pour"};
    if (i < std::size(names)) return names[i];
    return "use" + std::to_string(i);
}

inline std::string fixture_part_word(std::size_t i) {
    static const char* names[] = {"grip", "cap", "button", "knob", "rim", "spout"};
    if (i < std::size(names)) return names[i];
    return "part" + std::to_string(i);
}

inline void paint(Image& img, const MaskGrid& m, std::array<std::uint8_t, 3> rgb) {
    for (std::size_t i = 0; i < img.h; ++i)
        for (std::size_t j = 0; j < img.w; ++j)
            if (m.at(i, j)) {
                auto* px = img.px(i, j);
                px[0] = rgb[0];
                px[1] = rgb[1];
                px[2] = rgb[2];
            }
}

}  // namespace detail

inline FixtureData generate_fixture(const FixtureSpec& spec) {
    if (spec.n_objects < 2) throw Error("generate_fixture: n_objects must be >= 2");
    if (spec.n_affordances < 1) throw Error("generate_fixture: n_affordances must be >= 1");
    const std::size_t N = spec.image_size;
    if (N < 64) throw Error("generate_fixture: image_size must be >= 64");

    Rng rng(spec.seed);
    FixtureData data;

    for (std::size_t oi = 0; oi < spec.n_objects; ++oi)
        for (std::size_t ai = 0; ai < spec.n_affordances; ++ai) {
            const std::string object = detail::fixture_object_name(oi);
            const std::string affordance = detail::fixture_affordance_name(ai);
            data.mapping.insert(object, affordance, detail::fixture_part_word(ai) + " of the " + object);
        }

    const double scale = static_cast<double>(N) / 64.0;

    auto make_record = [&](View view, Split split, std::size_t oi, std::size_t ai, std::size_t idx) {
        const std::string object = detail::fixture_object_name(oi);
        const std::string affordance = detail::fixture_affordance_name(ai);
        FixtureRecord rec;
        rec.view = view;
        rec.object = object;
        rec.affordance = affordance;
        rec.part = data.mapping.lookup(object, affordance);
        rec.h = rec.w = N;

        const double c = static_cast<double>(N) / 2.0;
        rec.body.cx = c + (rng.uniform() - 0.5) * 14.0 * scale;
        rec.body.cy = c + (rng.uniform() - 0.5) * 14.0 * scale;
        rec.body.rx = (11.0 + rng.uniform() * 4.0) * scale;
        rec.body.ry = (11.0 + rng.uniform() * 4.0) * scale;

        // The part sits on the body rim at an affordance-specific angle, so
        // its location is predictable from the query but varies per image.
        const double base_angle = 2.0 * 3.14159265358979323846 * static_cast<double>(ai) /
                                  static_cast<double>(std::max<std::size_t>(2, spec.n_affordances));
        const double angle = base_angle + (rng.uniform() - 0.5) * 0.5;
        const double pr = (3.5 + rng.uniform() * 2.0) * scale;
        rec.part_region.rx = pr;
        rec.part_region.ry = (3.5 + rng.uniform() * 2.0) * scale;
        rec.part_region.cx = rec.body.cx + std::cos(angle) * rec.body.rx * 0.95;
        rec.part_region.cy = rec.body.cy + std::sin(angle) * rec.body.ry * 0.95;
        const double m = 2.0;
        rec.part_region.cx = std::clamp(rec.part_region.cx, rec.part_region.rx + m,
                                        static_cast<double>(N) - 1.0 - rec.part_region.rx - m);
        rec.part_region.cy = std::clamp(rec.part_region.cy, rec.part_region.ry + m,
                                        static_cast<double>(N) - 1.0 - rec.part_region.ry - m);

        if (view == View::exo) {
            rec.has_occluder = true;
            rec.occluder.cx = rec.part_region.cx + (rng.uniform() - 0.5) * 2.0 * scale;
            rec.occluder.cy = rec.part_region.cy + (rng.uniform() - 0.5) * 2.0 * scale;
            rec.occluder.rx = rec.part_region.rx * 1.1;
            rec.occluder.ry = rec.part_region.ry * 1.1;
            const auto part_px = rec.part_mask();
            const double part_area = static_cast<double>(mask_area(part_px));
            for (int grow = 0; grow < 12; ++grow) {
                const auto covered = mask_intersect(part_px, ellipse_mask(rec.occluder, N, N));
                if (static_cast<double>(mask_area(covered)) >= spec.min_occlusion * part_area) break;
                rec.occluder.rx *= 1.15;
                rec.occluder.ry *= 1.15;
            }
        }

        // render
        Image img(N, N);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j) {
                auto* px = img.px(i, j);
                const double n0 = rng.uniform();
                px[0] = static_cast<std::uint8_t>(24 + static_cast<int>(n0 * 12.0));
                px[1] = static_cast<std::uint8_t>(26 + static_cast<int>(rng.uniform() * 12.0));
                px[2] = static_cast<std::uint8_t>(30 + static_cast<int>(rng.uniform() * 12.0));
            }
        const auto body_rgb = detail::hsv_to_rgb(0.61803398875 * static_cast<double>(oi), 0.55, 0.72);
        const auto part_rgb = detail::hsv_to_rgb(0.11 + 0.61803398875 * static_cast<double>(ai) + 0.31, 0.92, 0.96);
        detail::paint(img, rec.body_mask(), body_rgb);
        detail::paint(img, rec.part_mask(), part_rgb);
        if (rec.has_occluder) detail::paint(img, ellipse_mask(rec.occluder, N, N), {228, 188, 156});

        const std::string set_dir = split == Split::train ? "trainset" : "testset";
        const std::string view_dir = view == View::ego ? "egocentric" : "exocentric";
        std::ostringstream id;
        id << "Seen/" << set_dir << "/" << view_dir << "/" << affordance << "/" << object << "/"
           << (view == View::ego ? "e" : "x") << (split == Split::test ? "t" : "") << std::setw(3)
           << std::setfill('0') << idx;
        rec.id = id.str();

        Sample s;
        s.id = rec.id;
        s.image = std::move(img);
        s.view = view;
        s.object = object;
        s.affordance = affordance;
        s.split = split;
        return std::make_pair(std::move(s), std::move(rec));
    };

    for (std::size_t oi = 0; oi < spec.n_objects; ++oi)
        for (std::size_t ai = 0; ai < spec.n_affordances; ++ai) {
            for (std::size_t k = 0; k < spec.ego_train_per_class; ++k) {
                auto [s, rec] = make_record(View::ego, Split::train, oi, ai, k);
                data.records.emplace(rec.id, rec);
                data.train.samples.push_back(std::move(s));
            }
            for (std::size_t k = 0; k < spec.exo_train_per_class; ++k) {
                auto [s, rec] = make_record(View::exo, Split::train, oi, ai, k);
                data.records.emplace(rec.id, rec);
                data.train.samples.push_back(std::move(s));
            }
            for (std::size_t k = 0; k < spec.ego_test_per_class; ++k) {
                auto [s, rec] = make_record(View::ego, Split::test, oi, ai, k);
                data.test.gt_heatmaps.emplace(rec.id, mask_to_heatmap(rec.part_mask(), spec.blur_sigma));
                data.records.emplace(rec.id, rec);
                data.test.samples.push_back(std::move(s));
            }
        }

    auto by_id = [](const Sample& a, const Sample& b) { return a.id < b.id; };
    std::sort(data.train.samples.begin(), data.train.samples.end(), by_id);
    std::sort(data.test.samples.begin(), data.test.samples.end(), by_id);
    data.train.report.loaded = data.train.samples.size();
    data.test.report.loaded = data.test.samples.size();
    return data;
}

inline FixtureData generate_fixture(std::uint64_t seed, std::size_t n_objects, std::size_t n_affordances) {
    FixtureSpec spec;
    spec.seed = seed;
    spec.n_objects = n_objects;
    spec.n_affordances = n_affordances;
    return generate_fixture(spec);
}

namespace detail {

inline std::string ellipse_tsv(const Ellipse& e) {
    return format_double(e.cx) + "," + format_double(e.cy) + "," + format_double(e.rx) + "," + format_double(e.ry);
}

inline Ellipse parse_ellipse(const std::string& s) {
    const auto cols = split(s, ',');
    if (cols.size() != 4) throw Error("bad ellipse record: " + s);
    return Ellipse{std::stod(cols[0]), std::stod(cols[1]), std::stod(cols[2]), std::stod(cols[3])};
}

}  // namespace detail

inline std::string serialize_fixture_meta(const std::map<std::string, FixtureRecord>& records) {
    std::ostringstream out;
    out << "# id\tview\tobject\taffordance\tpart\th\tw\tbody\tpart_region\toccluder\n";
    for (const auto& [id, r] : records) {
        out << id << "\t" << to_string(r.view) << "\t" << r.object << "\t" << r.affordance << "\t" << r.part
            << "\t" << r.h << "\t" << r.w << "\t" << detail::ellipse_tsv(r.body) << "\t"
            << detail::ellipse_tsv(r.part_region) << "\t"
            << (r.has_occluder ? detail::ellipse_tsv(r.occluder) : std::string("-")) << "\n";
    }
    return out.str();
}

inline std::map<std::string, FixtureRecord> parse_fixture_meta(const std::string& text) {
    std::map<std::string, FixtureRecord> records;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        if (cols.size() != 10) throw Error("bad fixture meta line: " + line);
        FixtureRecord r;
        r.id = cols[0];
        r.view = cols[1] == "ego" ? View::ego : View::exo;
        r.object = cols[2];
        r.affordance = cols[3];
        r.part = cols[4];
        r.h = std::stoul(cols[5]);
        r.w = std::stoul(cols[6]);
        r.body = detail::parse_ellipse(cols[7]);
        r.part_region = detail::parse_ellipse(cols[8]);
        if (cols[9] != "-") {
            r.has_occluder = true;
            r.occluder = detail::parse_ellipse(cols[9]);
        }
        records.emplace(r.id, r);
    }
    return records;
}

// Writes the fixture in the standard dataset layout plus parts.tsv and
// fixture_meta.tsv at the root.
inline void write_fixture(const FixtureData& data, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    for (const DatasetIndex* index : {&data.train, &data.test})
        for (const auto& s : index->samples) write_ppm(root / (s.id + ".ppm"), s.image);
    for (const auto& [id, hm] : data.test.gt_heatmaps) {
        // Seen/testset/egocentric/a/o/stem -> Seen/testset/GT/a/o/stem.pgm
        const auto pos = id.find("/egocentric/");
        if (pos == std::string::npos) throw Error("unexpected GT id: " + id);
        const std::string gt_id = id.substr(0, pos) + "/GT/" + id.substr(pos + 12);
        write_heatmap_pgm(root / (gt_id + ".pgm"), hm);
    }
    atomic_write_file(root / "parts.tsv", data.mapping.serialize());
    atomic_write_file(root / "fixture_meta.tsv", serialize_fixture_meta(data.records));
}

}  // namespace affgro
