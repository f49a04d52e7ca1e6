#pragma once

// Part detection and promptable segmentation backends. The interfaces match
// what an open-vocabulary detector (boxes for a text query) and a promptable
// segmenter (mask for a box prompt, grid-prompt auto segmentation) provide.
// The shipping `mock` backend answers from fixture geometry so the whole
// pipeline runs without pretrained weights; real adapters plug in behind the
// same interfaces.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>

#include "affgro/fixture.hpp"
#include "affgro/image_io.hpp"

namespace affgro {

struct DetectionBox {
    double x0{0}, y0{0}, x1{0}, y1{0};  // inclusive-exclusive pixel coords
    double confidence{0.0};

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }

    void validate(std::size_t img_h, std::size_t img_w) const {
        if (!(x0 >= 0 && x0 < x1 && x1 <= static_cast<double>(img_w)) ||
            !(y0 >= 0 && y0 < y1 && y1 <= static_cast<double>(img_h)))
            throw Error("detection box out of bounds");
    }
};

struct SegmentSet {
    std::vector<MaskGrid> regions;  // pairwise disjoint

    bool disjoint() const {
        if (regions.empty()) return true;
        MaskGrid seen(regions[0].h, regions[0].w);
        for (const auto& r : regions)
            for (std::size_t i = 0; i < r.size(); ++i) {
                if (r.v[i] && seen.v[i]) return false;
                if (r.v[i]) seen.v[i] = 1;
            }
        return true;
    }
};

class Detector {
public:
    virtual ~Detector() = default;
    virtual std::vector<DetectionBox> detect(const Image& image, const std::string& query) = 0;
    virtual std::string backend_id() const = 0;
};

class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual MaskGrid segment_box(const Image& image, const DetectionBox& box) = 0;
    virtual SegmentSet auto_segment(const Image& image, std::size_t min_area) = 0;
    virtual std::string backend_id() const = 0;
};

// Confidence threshold 0.5; if nothing qualifies, keep the single best box.
inline std::vector<DetectionBox> filter_boxes(const std::vector<DetectionBox>& boxes) {
    std::vector<DetectionBox> out;
    for (const auto& b : boxes)
        if (b.confidence >= 0.5) out.push_back(b);
    if (out.empty() && !boxes.empty()) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < boxes.size(); ++i)
            if (boxes[i].confidence > boxes[best].confidence) best = i;
        out.push_back(boxes[best]);
    }
    return out;
}

namespace detail {

struct PixelBox {
    std::size_t x0, y0, x1, y1;  // half-open
};

inline PixelBox to_pixel_box(const DetectionBox& box, std::size_t h, std::size_t w) {
    auto clamp_sz = [](double v, std::size_t hi) {
        return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(hi)));
    };
    PixelBox p{clamp_sz(std::floor(box.x0), w), clamp_sz(std::floor(box.y0), h),
               clamp_sz(std::ceil(box.x1), w), clamp_sz(std::ceil(box.y1), h)};
    if (p.x1 <= p.x0) p.x1 = std::min(p.x0 + 1, w);
    if (p.y1 <= p.y0) p.y1 = std::min(p.y0 + 1, h);
    return p;
}

}  // namespace detail

// Box-prompted masks sometimes come back inverted (background highlighted).
// Heuristic: sum the mask on the box's one-pixel boundary ring; a foreground
// object rarely touches the whole ring, so a sum above half the perimeter
// means the mask is inverted, and we flip it inside the box.
inline MaskGrid background_sanity_fix(const MaskGrid& mask, const DetectionBox& box) {
    const auto p = detail::to_pixel_box(box, mask.h, mask.w);
    std::size_t perim = 0, edge_sum = 0;
    for (std::size_t i = p.y0; i < p.y1; ++i)
        for (std::size_t j = p.x0; j < p.x1; ++j) {
            const bool on_ring = i == p.y0 || i + 1 == p.y1 || j == p.x0 || j + 1 == p.x1;
            if (!on_ring) continue;
            ++perim;
            edge_sum += mask.at(i, j) ? 1 : 0;
        }
    if (2 * edge_sum <= perim) return mask;
    MaskGrid out = mask;
    for (std::size_t i = p.y0; i < p.y1; ++i)
        for (std::size_t j = p.x0; j < p.x1; ++j) out.at(i, j) = out.at(i, j) ? 0 : 1;
    return out;
}

inline std::uint64_t image_content_hash(const Image& img) {
    std::uint64_t h = fnv1a64(&img.h, sizeof(img.h));
    h = fnv1a64(&img.w, sizeof(img.w), h);
    return fnv1a64(img.rgb.data(), img.rgb.size(), h);
}

struct MockOptions {
    bool decoy_box{false};         // extra low-confidence detection
    bool adversarial_mask{false};  // return inverted masks to exercise the sanity fix
    bool unavailable{false};       // simulate a transient backend failure
};

// Deterministic backend answering from fixture geometry. Images are
// identified by content hash.
class MockBackend : public Detector, public Segmenter {
public:
    MockBackend(std::map<std::string, FixtureRecord> records, const std::vector<const Sample*>& samples,
                MockOptions opts = {})
        : records_(std::move(records)), opts_(opts) {
        for (const Sample* s : samples) {
            auto it = records_.find(s->id);
            if (it == records_.end()) continue;
            auto [pos, fresh] = by_hash_.emplace(image_content_hash(s->image), &it->second);
            if (!fresh) throw Error("mock backend: duplicate image content hash for " + s->id);
        }
    }

    static std::shared_ptr<MockBackend> from_fixture(const FixtureData& data, MockOptions opts = {}) {
        std::vector<const Sample*> all;
        for (const auto& s : data.train.samples) all.push_back(&s);
        for (const auto& s : data.test.samples) all.push_back(&s);
        return std::make_shared<MockBackend>(data.records, all, opts);
    }

    std::string backend_id() const override { return "mock"; }

    void set_options(MockOptions opts) { opts_ = opts; }

    std::vector<DetectionBox> detect(const Image& image, const std::string& query) override {
        if (opts_.unavailable) throw BackendUnavailable("mock backend marked unavailable");
        if (query.empty()) throw Error("detect: empty query");
        const FixtureRecord& rec = lookup(image);
        std::vector<DetectionBox> out;
        if (query == rec.part) {
            out.push_back(from_bbox(rec.part_region.bbox(rec.h, rec.w), 0.9));
        } else if (query == rec.object) {
            const auto bb = rec.body.bbox(rec.h, rec.w);
            const auto pb = rec.part_region.bbox(rec.h, rec.w);
            out.push_back(from_bbox({std::min(bb[0], pb[0]), std::min(bb[1], pb[1]), std::max(bb[2], pb[2]),
                                     std::max(bb[3], pb[3])},
                                    0.9));
        }
        if (!out.empty() && opts_.decoy_box) {
            const double q = static_cast<double>(rec.w) / 4.0;
            out.push_back(DetectionBox{0.0, 0.0, q, q, 0.3});
        }
        return out;
    }

    MaskGrid segment_box(const Image& image, const DetectionBox& box) override {
        if (opts_.unavailable) throw BackendUnavailable("mock backend marked unavailable");
        const FixtureRecord& rec = lookup(image);
        box.validate(rec.h, rec.w);
        const auto part = rec.part_mask();
        const auto obj = rec.visible_object_mask();
        // whichever fixture region the prompt box frames better
        const double iou_part = bbox_iou(box, rec.part_region.bbox(rec.h, rec.w));
        const auto bb = rec.body.bbox(rec.h, rec.w);
        const auto pb = rec.part_region.bbox(rec.h, rec.w);
        const double iou_obj = bbox_iou(box, {std::min(bb[0], pb[0]), std::min(bb[1], pb[1]),
                                              std::max(bb[2], pb[2]), std::max(bb[3], pb[3])});
        MaskGrid chosen = iou_part >= iou_obj ? part : obj;
        MaskGrid out(rec.h, rec.w);
        const auto p = detail::to_pixel_box(box, rec.h, rec.w);
        for (std::size_t i = p.y0; i < p.y1; ++i)
            for (std::size_t j = p.x0; j < p.x1; ++j)
                out.at(i, j) = opts_.adversarial_mask ? (chosen.at(i, j) ? 0 : 1) : chosen.at(i, j);
        return out;
    }

    SegmentSet auto_segment(const Image& image, std::size_t min_area) override {
        if (opts_.unavailable) throw BackendUnavailable("mock backend marked unavailable");
        const FixtureRecord& rec = lookup(image);
        std::vector<MaskGrid> parts;
        const auto part = rec.part_mask();
        const auto body = rec.body_mask();
        MaskGrid covered(rec.h, rec.w);
        if (rec.has_occluder) {
            const auto occ = ellipse_mask(rec.occluder, rec.h, rec.w);
            parts.push_back(occ);
            parts.push_back(mask_minus(part, occ));
            parts.push_back(mask_minus(mask_minus(body, part), occ));
            covered = mask_union(occ, mask_union(part, body));
        } else {
            parts.push_back(part);
            parts.push_back(mask_minus(body, part));
            covered = mask_union(part, body);
        }
        // background quadrants
        for (int qi = 0; qi < 2; ++qi)
            for (int qj = 0; qj < 2; ++qj) {
                MaskGrid q(rec.h, rec.w);
                for (std::size_t i = static_cast<std::size_t>(qi) * rec.h / 2; i < (static_cast<std::size_t>(qi) + 1) * rec.h / 2; ++i)
                    for (std::size_t j = static_cast<std::size_t>(qj) * rec.w / 2; j < (static_cast<std::size_t>(qj) + 1) * rec.w / 2; ++j)
                        if (!covered.at(i, j)) q.at(i, j) = 1;
                parts.push_back(std::move(q));
            }
        SegmentSet out;
        for (auto& m : parts)
            if (mask_area(m) >= min_area) out.regions.push_back(std::move(m));
        return out;
    }

private:
    const FixtureRecord& lookup(const Image& image) const {
        auto it = by_hash_.find(image_content_hash(image));
        if (it == by_hash_.end()) throw Error("mock backend: unknown image (not part of the fixture)");
        return *it->second;
    }

    static DetectionBox from_bbox(const std::array<double, 4>& b, double conf) {
        return DetectionBox{b[0], b[1], b[2], b[3], conf};
    }

    static double bbox_iou(const DetectionBox& a, const std::array<double, 4>& b) {
        const double ix = std::max(0.0, std::min(a.x1, b[2]) - std::max(a.x0, b[0]));
        const double iy = std::max(0.0, std::min(a.y1, b[3]) - std::max(a.y0, b[1]));
        const double inter = ix * iy;
        const double uni = a.area() + (b[2] - b[0]) * (b[3] - b[1]) - inter;
        return uni > 0.0 ? inter / uni : 0.0;
    }

    std::map<std::string, FixtureRecord> records_;
    std::map<std::uint64_t, const FixtureRecord*> by_hash_;
    MockOptions opts_;
};

// Disk cache around a detector/segmenter pair. Keys combine the image
// content hash, the query hash, and the backend id. Detection results are
// stored as TSV, masks as packed bitmaps.
class CachedBackend : public Detector, public Segmenter {
public:
    CachedBackend(std::shared_ptr<Detector> det, std::shared_ptr<Segmenter> seg, std::filesystem::path dir)
        : det_(std::move(det)), seg_(std::move(seg)), dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    std::string backend_id() const override { return det_->backend_id(); }

    std::vector<DetectionBox> detect(const Image& image, const std::string& query) override {
        const auto path = dir_ / (key(image, "det", query) + ".tsv");
        if (std::filesystem::exists(path)) {
            std::vector<DetectionBox> out;
            std::istringstream in(read_file(path));
            std::string line;
            while (std::getline(in, line)) {
                if (trim(line).empty()) continue;
                const auto cols = split(line, '\t');
                if (cols.size() != 5) throw Error("corrupt cache entry: " + path.string());
                out.push_back(DetectionBox{std::stod(cols[0]), std::stod(cols[1]), std::stod(cols[2]),
                                           std::stod(cols[3]), std::stod(cols[4])});
            }
            return out;
        }
        auto boxes = det_->detect(image, query);
        std::ostringstream out;
        for (const auto& b : boxes)
            out << format_double(b.x0) << "\t" << format_double(b.y0) << "\t" << format_double(b.x1) << "\t"
                << format_double(b.y1) << "\t" << format_double(b.confidence) << "\n";
        atomic_write_file(path, out.str());
        return boxes;
    }

    MaskGrid segment_box(const Image& image, const DetectionBox& box) override {
        std::ostringstream q;
        q << format_double(box.x0) << "," << format_double(box.y0) << "," << format_double(box.x1) << ","
          << format_double(box.y1);
        const auto path = dir_ / (key(image, "seg", q.str()) + ".abm");
        if (std::filesystem::exists(path)) return read_bitmask(path);
        auto mask = seg_->segment_box(image, box);
        write_bitmask(path, mask);
        return mask;
    }

    SegmentSet auto_segment(const Image& image, std::size_t min_area) override {
        const auto path = dir_ / (key(image, "autoseg", std::to_string(min_area)) + ".asg");
        if (std::filesystem::exists(path)) {
            const std::string bytes = read_file(path);
            std::istringstream in(bytes);
            std::string magic;
            std::size_t count = 0;
            in >> magic >> count;
            if (magic != "ASG1") throw Error("corrupt cache entry: " + path.string());
            in.get();
            SegmentSet out;
            std::size_t off = static_cast<std::size_t>(in.tellg());
            for (std::size_t k = 0; k < count; ++k) {
                // masks are stored back to back
                std::istringstream hdr(bytes.substr(off));
                std::string m2;
                std::size_t w = 0, h = 0;
                hdr >> m2 >> w >> h;
                if (m2 != "ABM1") throw Error("corrupt cache entry: " + path.string());
                hdr.get();
                const std::size_t header_len = static_cast<std::size_t>(hdr.tellg());
                const std::size_t nbytes = (w * h + 7) / 8;
                if (bytes.size() < off + header_len + nbytes) throw Error("corrupt cache entry: " + path.string());
                MaskGrid m(h, w);
                const char* data = bytes.data() + off + header_len;
                for (std::size_t i = 0; i < m.size(); ++i)
                    m.v[i] = (data[i / 8] & (0x80 >> (i % 8))) ? 1 : 0;
                out.regions.push_back(std::move(m));
                off += header_len + nbytes;
            }
            return out;
        }
        auto segs = seg_->auto_segment(image, min_area);
        std::ostringstream out;
        out << "ASG1 " << segs.regions.size() << "\n";
        for (const auto& m : segs.regions) out << encode_bitmask(m);
        atomic_write_file(path, out.str());
        return segs;
    }

private:
    std::string key(const Image& image, const char* kind, const std::string& query) const {
        return hex64(image_content_hash(image)) + "_" + kind + "_" + hex64(fnv1a64(query)) + "_" +
               hex64(fnv1a64(det_->backend_id()));
    }

    std::shared_ptr<Detector> det_;
    std::shared_ptr<Segmenter> seg_;
    std::filesystem::path dir_;
};

}  // namespace affgro
