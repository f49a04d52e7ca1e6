#include <catch_amalgamated.hpp>

#include "affgro/labeler.hpp"
#include "affgro/pipeline.hpp"
#include "test_fixture_util.hpp"
#include "test_util.hpp"

using namespace affgro;

namespace {

class CountingDetector : public Detector {
public:
    explicit CountingDetector(std::shared_ptr<Detector> inner) : inner_(std::move(inner)) {}
    std::vector<DetectionBox> detect(const Image& img, const std::string& q) override {
        ++calls;
        return inner_->detect(img, q);
    }
    std::string backend_id() const override { return inner_->backend_id(); }
    std::size_t calls{0};

private:
    std::shared_ptr<Detector> inner_;
};

}  // namespace

TEST_CASE("object_patchmask") {
    SECTION("full-image box sets every cell") {
        const auto m = object_patchmask(DetectionBox{0, 0, 224, 224, 1.0}, 224, 224, 14, 14);
        CHECK(mask_area(m) == 14 * 14);
    }
    SECTION("box inside one patch sets one cell") {
        const auto m = object_patchmask(DetectionBox{33, 50, 40, 60, 1.0}, 224, 224, 14, 14);
        CHECK(mask_area(m) == 1);
        CHECK(m.at(3, 2) == 1);
    }
    SECTION("box [8,40)x[8,40) on 224^2 with 16px patches -> 3x3 cells") {
        const auto m = object_patchmask(DetectionBox{8, 8, 40, 40, 1.0}, 224, 224, 14, 14);
        CHECK(mask_area(m) == 9);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) CHECK(m.at(i, j) == 1);
    }
}

TEST_CASE("generate_initial_label on the fixture") {
    const auto data = generate_fixture(testutil::small_fixture_spec(21));
    auto mock = MockBackend::from_fixture(data);
    const Sample* ego = data.train.view_samples(View::ego).front();
    const auto& rec = data.records.at(ego->id);

    SECTION("support is the blur-dilated part region") {
        const auto gen = generate_initial_label(*ego, data.mapping, *mock, *mock, 1.0);
        CHECK(gen.heatmap.valid(1e-6));
        CHECK_FALSE(gen.provenance.degenerate);
        const auto part = rec.part_mask();
        for (std::size_t i = 0; i < part.size(); ++i)
            if (part.v[i]) CHECK(gen.heatmap.g.v[i] > 0.0);
        // compare against the oracle conversion of the true part mask
        const auto oracle = mask_to_heatmap(part, 1.0);
        for (std::size_t i = 0; i < part.size(); ++i)
            CHECK(gen.heatmap.g.v[i] == Catch::Approx(oracle.g.v[i]).margin(1e-12));
    }

    SECTION("adversarial segmenter triggers the inversion and recovers the same label") {
        auto adv = MockBackend::from_fixture(data, MockOptions{.adversarial_mask = true});
        const auto gen_adv = generate_initial_label(*ego, data.mapping, *adv, *adv, 1.0);
        const auto gen_ref = generate_initial_label(*ego, data.mapping, *mock, *mock, 1.0);
        REQUIRE(!gen_adv.provenance.boxes.empty());
        CHECK(gen_adv.provenance.boxes[0].inverted);
        CHECK_FALSE(gen_ref.provenance.boxes[0].inverted);
        for (std::size_t i = 0; i < gen_adv.heatmap.g.size(); ++i)
            CHECK(gen_adv.heatmap.g.v[i] == Catch::Approx(gen_ref.heatmap.g.v[i]).margin(1e-12));
    }

    SECTION("no detection falls back to a flagged uniform label") {
        PartMapping bogus;
        bogus.insert(ego->object, ego->affordance, "part name the detector has never heard of");
        const auto gen = generate_initial_label(*ego, bogus, *mock, *mock, 1.0);
        CHECK(gen.provenance.degenerate);
        for (double v : gen.heatmap.g.v)
            CHECK(v == Catch::Approx(1.0 / static_cast<double>(ego->image.h * ego->image.w)).epsilon(1e-12));
    }

    SECTION("missing mapping entry fails before any backend call") {
        PartMapping empty;
        auto counting = std::make_shared<CountingDetector>(mock);
        CHECK_THROWS_WITH(generate_initial_label(*ego, empty, *counting, *mock, 1.0),
                          Catch::Matchers::ContainsSubstring("no entry"));
        CHECK(counting->calls == 0);
    }
}

TEST_CASE("pair_score") {
    SECTION("identical features and masks give 1") {
        PatchFeatures f;
        f.gh = f.gw = 2;
        f.dim = 3;
        Rng rng(5);
        f.v = testutil::random_vec(rng, 12);
        MaskGrid m(2, 2, 1);
        CHECK(pair_score(f, m, f, m) == Catch::Approx(1.0).epsilon(1e-12));
    }
    SECTION("antiparallel features give -1") {
        PatchFeatures a, b;
        a.gh = a.gw = b.gh = b.gw = 2;
        a.dim = b.dim = 3;
        Rng rng(6);
        a.v = testutil::random_vec(rng, 12);
        b.v = a.v;
        for (auto& x : b.v) x = -x;
        MaskGrid m(2, 2, 1);
        CHECK(pair_score(a, m, b, m) == Catch::Approx(-1.0).epsilon(1e-12));
    }
    SECTION("hand-computed 2x2 oracle") {
        PatchFeatures ego, exo;
        ego.gh = ego.gw = exo.gh = exo.gw = 2;
        ego.dim = exo.dim = 2;
        // cells: (1,0), (0,1), (2,2), (3,1); mask selects first two
        ego.v = {1, 0, 0, 1, 2, 2, 3, 1};
        exo.v = {2, 0, 0, 0, 1, 1, 0, 2};  // mask selects cells 0 and 3
        MaskGrid me(2, 2), mx(2, 2);
        me.v = {1, 1, 0, 0};
        mx.v = {1, 0, 0, 1};
        // pooled ego = (0.5, 0.5); pooled exo = (1, 1); cos = 1
        CHECK(pair_score(ego, me, exo, mx) == Catch::Approx(1.0).epsilon(1e-12));
        // flip one exo component: pooled exo = (1, -1) -> cos = 0
        exo.v[7] = -2;
        CHECK(pair_score(ego, me, exo, mx) == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("empty mask is an error") {
        PatchFeatures f;
        f.gh = f.gw = 2;
        f.dim = 2;
        f.v.assign(8, 1.0);
        MaskGrid full(2, 2, 1), empty(2, 2, 0);
        CHECK_THROWS_WITH(pair_score(f, empty, f, full), Catch::Matchers::ContainsSubstring("empty pooling region"));
    }
    SECTION("symmetry") {
        Rng rng(7);
        PatchFeatures a, b;
        a.gh = a.gw = b.gh = b.gw = 2;
        a.dim = b.dim = 4;
        a.v = testutil::random_vec(rng, 16);
        b.v = testutil::random_vec(rng, 16);
        MaskGrid ma(2, 2), mb(2, 2);
        ma.v = {1, 0, 1, 0};
        mb.v = {0, 1, 1, 1};
        CHECK(pair_score(a, ma, b, mb) == Catch::Approx(pair_score(b, mb, a, ma)).epsilon(1e-12));
    }
}

TEST_CASE("build_pair_index") {
    const auto spec = testutil::small_fixture_spec(31);
    const auto data = generate_fixture(spec);
    auto mock = MockBackend::from_fixture(data);
    auto frozen = std::make_unique<Model>(ModelConfig::tiny(64, 777));
    frozen->params().freeze_all();

    SECTION("pool larger than candidates keeps all, sorted") {
        const auto index = build_pair_index(data.train, *frozen, *mock, 10);
        for (const auto& [ego_id, pool] : index.pools) {
            CHECK(pool.size() == spec.exo_train_per_class);
            for (std::size_t i = 1; i < pool.size(); ++i) CHECK(pool[i - 1].second >= pool[i].second);
            const auto& ego = data.train.by_id(ego_id);
            for (const auto& [exo_id, score] : pool) {
                const auto& exo = data.train.by_id(exo_id);
                CHECK(exo.object == ego.object);
                CHECK(exo.affordance == ego.affordance);
                CHECK(score <= 1.0 + 1e-12);
                CHECK(score >= -1.0 - 1e-12);
            }
        }
    }
    SECTION("pool of one keeps the argmax") {
        const auto top1 = build_pair_index(data.train, *frozen, *mock, 1);
        const auto full = build_pair_index(data.train, *frozen, *mock, 100);
        for (const auto& [ego_id, pool] : top1.pools) {
            REQUIRE(pool.size() == 1);
            CHECK(pool[0].first == full.pools.at(ego_id)[0].first);
        }
    }
    SECTION("missing partner class is fatal and lists the class") {
        DatasetIndex broken;
        for (const auto& s : data.train.samples) {
            if (s.view == View::exo && s.object == "mug") continue;
            broken.samples.push_back(s);
        }
        CHECK_THROWS_WITH(build_pair_index(broken, *frozen, *mock, 10),
                          Catch::Matchers::ContainsSubstring("mug"));
    }
    SECTION("serialize/parse round trip is exact") {
        const auto index = build_pair_index(data.train, *frozen, *mock, 10);
        std::string hash;
        const auto back = ExoPairIndex::parse(index.serialize("cafef00d"), &hash);
        CHECK(hash == "cafef00d");
        REQUIRE(back.pools.size() == index.pools.size());
        for (const auto& [ego_id, pool] : index.pools) {
            const auto& bp = back.pools.at(ego_id);
            REQUIRE(bp.size() == pool.size());
            for (std::size_t i = 0; i < pool.size(); ++i) {
                CHECK(bp[i].first == pool[i].first);
                CHECK(bp[i].second == pool[i].second);  // %.17g round trip
            }
        }
    }
}

TEST_CASE("sample_partner") {
    ExoPairIndex index;
    index.pools["ego"] = {{"a", 0.9}, {"b", 0.8}, {"c", 0.7}, {"d", 0.6}, {"e", 0.5},
                          {"f", 0.4}, {"g", 0.3}, {"h", 0.2}, {"i", 0.1}, {"j", 0.0}};
    index.pools["solo"] = {{"only", 1.0}};

    SECTION("pool of one always returns it") {
        Rng rng(1);
        for (int t = 0; t < 20; ++t) CHECK(sample_partner(index, "solo", rng) == "only");
    }
    SECTION("fixed seed reproduces the sequence") {
        Rng a(42), b(42);
        for (int t = 0; t < 50; ++t) CHECK(sample_partner(index, "ego", a) == sample_partner(index, "ego", b));
    }
    SECTION("10k draws from a pool of 10 are near uniform") {
        Rng rng(7);
        std::map<std::string, std::size_t> counts;
        const std::size_t n = 10000;
        for (std::size_t t = 0; t < n; ++t) ++counts[sample_partner(index, "ego", rng)];
        // 3 sigma of Binomial(10000, 0.1)
        const double sigma = std::sqrt(10000 * 0.1 * 0.9);
        for (const auto& [id, c] : counts)
            CHECK(std::abs(static_cast<double>(c) - 1000.0) <= 3.0 * sigma);
        CHECK(counts.size() == 10);
    }
}
