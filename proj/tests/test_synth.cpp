#include <catch2/catch_amalgamated.hpp>

#include "scape/synth.hpp"

#include <set>

using namespace scape;

namespace {

DataConfig small_cfg() {
    DataConfig cfg;
    cfg.image_size = 64;
    cfg.n_categories = 20;
    cfg.k_max = 8;
    cfg.occlusion_p = 0.2;
    cfg.seed = 9;
    return cfg;
}

bool same_template(const CategoryTemplate& a, const CategoryTemplate& b) {
    if (a.k != b.k || a.edges != b.edges || a.symmetric_pairs != b.symmetric_pairs) return false;
    for (int i = 0; i < a.k; ++i) {
        if (a.canonical[i] != b.canonical[i]) return false;
        if (a.markers[i].shape != b.markers[i].shape || a.markers[i].radius_px != b.markers[i].radius_px ||
            a.markers[i].intensity != b.markers[i].intensity)
            return false;
    }
    return true;
}

uint64_t instance_fingerprint(const Instance& inst) {
    uint64_t h = fnv1a(inst.pixels.data(), inst.pixels.size() * sizeof(double));
    h = fnv1a(inst.keypoints.data(), inst.keypoints.size() * sizeof(inst.keypoints[0]), h);
    h = fnv1a(inst.visibility.data(), inst.visibility.size(), h);
    h = fnv1a(&inst.bbox, sizeof(inst.bbox), h);
    return h;
}

uint64_t episode_fingerprint(const Episode& ep) {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& s : ep.supports) h = fnv1a(&h, sizeof(h), instance_fingerprint(s) ^ h);
    h ^= instance_fingerprint(ep.query);
    h = fnv1a(&ep.normalizer, sizeof(double), h);
    return h;
}

} // namespace

TEST_CASE("same seed produces identical category templates") {
    auto cfg = small_cfg();
    CategoryTemplate a = generate_category(1234, cfg);
    CategoryTemplate b = generate_category(1234, cfg);
    CHECK(same_template(a, b));
}

TEST_CASE("symmetric pairs mirror across the vertical axis") {
    auto cfg = small_cfg();
    int checked = 0;
    for (uint64_t s = 0; s < 200; ++s) {
        CategoryTemplate t = generate_category(mix_seed(5, s), cfg);
        for (const auto& pr : t.symmetric_pairs) {
            const auto& l = t.canonical[pr[0]];
            const auto& r = t.canonical[pr[1]];
            CHECK(std::abs(l[0] - (1.0 - r[0])) < 1e-9);
            CHECK(std::abs(l[1] - r[1]) < 1e-9);
            // pair members share the one marker style
            CHECK(t.markers[pr[0]].shape == t.markers[pr[1]].shape);
            ++checked;
        }
        // distinct coordinates
        for (int i = 0; i < t.k; ++i)
            for (int j = i + 1; j < t.k; ++j) {
                const double dx = t.canonical[i][0] - t.canonical[j][0];
                const double dy = t.canonical[i][1] - t.canonical[j][1];
                CHECK(dx * dx + dy * dy > 1e-6);
            }
        // edges reference valid indices and connect the layout (spanning tree or more)
        CHECK(t.edges.size() + 1 >= static_cast<size_t>(t.k));
        for (const auto& e : t.edges) {
            CHECK(e[0] >= 0);
            CHECK(e[0] < t.k);
            CHECK(e[1] >= 0);
            CHECK(e[1] < t.k);
        }
    }
    CHECK(checked > 0);
}

TEST_CASE("about 70 percent of categories carry a mirrored pair") {
    auto cfg = small_cfg();
    int symmetric = 0;
    const int n = 1000;
    for (int i = 0; i < n; ++i)
        if (!generate_category(mix_seed(42, i), cfg).symmetric_pairs.empty()) ++symmetric;
    const double frac = static_cast<double>(symmetric) / n;
    CHECK(frac > 0.67);
    CHECK(frac < 0.73);
}

TEST_CASE("zero occlusion probability renders everything visible") {
    auto cfg = small_cfg();
    CategoryTemplate t = generate_category(77, cfg);
    Instance inst = render_instance(t, cfg, 3, 0.0);
    for (uint8_t v : inst.visibility) CHECK(v == 1);
}

TEST_CASE("identity transform reproduces canonical coordinates") {
    auto cfg = small_cfg();
    CategoryTemplate t = generate_category(78, cfg);
    Instance inst = render_with_transform(t, cfg, SimilarityTransform{}, {});
    for (int i = 0; i < t.k; ++i) {
        CHECK(std::abs(inst.keypoints[i][0] - t.canonical[i][0]) < 1e-12);
        CHECK(std::abs(inst.keypoints[i][1] - t.canonical[i][1]) < 1e-12);
    }
}

TEST_CASE("inverse transform maps rendered keypoints back to canonical") {
    auto cfg = small_cfg();
    for (uint64_t s = 0; s < 50; ++s) {
        CategoryTemplate t = generate_category(mix_seed(11, s), cfg);
        Instance inst = render_instance(t, cfg, mix_seed(13, s), 0.3);
        for (int i = 0; i < t.k; ++i) {
            const auto back = inst.transform.invert(inst.keypoints[i]);
            CHECK(std::abs(back[0] - t.canonical[i][0]) < 1e-9);
            CHECK(std::abs(back[1] - t.canonical[i][1]) < 1e-9);
        }
        CHECK(inst.bbox[2] > inst.bbox[0]);
        CHECK(inst.bbox[3] > inst.bbox[1]);
        CHECK(inst.bbox_longest_side() > 0.0);
        // visible keypoints stay inside the frame; occluded ones keep coordinates
        for (int i = 0; i < t.k; ++i) {
            CHECK(inst.keypoints[i][0] > 0.0);
            CHECK(inst.keypoints[i][0] < 1.0);
            CHECK(inst.keypoints[i][1] > 0.0);
            CHECK(inst.keypoints[i][1] < 1.0);
        }
    }
}

TEST_CASE("rendered marker centroids sit within one pixel of the keypoint") {
    // isolated two-marker templates so the pixel scan sees exactly one marker
    auto cfg = small_cfg();
    for (int shape = 0; shape < 6; ++shape) {
        for (double radius : {2.4, 3.2}) {
            CategoryTemplate t;
            t.k = 2;
            t.canonical = {{0.3, 0.4}, {0.7, 0.6}};
            t.markers = {MarkerStyle{shape, radius, 1.0}, MarkerStyle{shape, radius, 1.0}};
            for (uint64_t s = 0; s < 5; ++s) {
                std::mt19937_64 rng(mix_seed(100 + shape, s));
                SimilarityTransform tf;
                tf.rot = uniform_in(rng, -0.5, 0.5);
                tf.scale = uniform_in(rng, 0.8, 1.2);
                tf.tx = uniform_in(rng, -0.05, 0.05);
                tf.ty = uniform_in(rng, -0.05, 0.05);
                Instance inst = render_with_transform(t, cfg, tf, {});
                const int size = inst.image_size;
                for (int i = 0; i < t.k; ++i) {
                    const double cx = inst.keypoints[i][0] * size - 0.5;
                    const double cy = inst.keypoints[i][1] * size - 0.5;
                    const int win = static_cast<int>(radius) + 3;
                    double sx = 0.0, sy = 0.0;
                    int n = 0;
                    for (int y = static_cast<int>(cy) - win; y <= static_cast<int>(cy) + win; ++y)
                        for (int x = static_cast<int>(cx) - win; x <= static_cast<int>(cx) + win; ++x) {
                            if (x < 0 || y < 0 || x >= size || y >= size) continue;
                            if (inst.pixels[static_cast<size_t>(y) * size + x] >= 0.9) {
                                sx += x;
                                sy += y;
                                ++n;
                            }
                        }
                    REQUIRE(n > 0);
                    CHECK(std::abs(sx / n - cx) <= 1.0);
                    CHECK(std::abs(sy / n - cy) <= 1.0);
                }
            }
        }
    }
}

TEST_CASE("splits are disjoint and sized 70/10/20") {
    for (int n : {10, 11, 37, 100}) {
        DataConfig cfg = small_cfg();
        cfg.n_categories = n;
        for (uint64_t seed : {1ULL, 99ULL}) {
            cfg.seed = seed;
            Dataset ds = Dataset::build(cfg);
            std::set<int> seen;
            size_t total = 0;
            for (int s = 0; s < 3; ++s) {
                for (int id : ds.split_ids[s]) {
                    CHECK(seen.insert(id).second); // no overlap between categories
                    ++total;
                }
            }
            CHECK(total == static_cast<size_t>(n));
            CHECK(ds.ids(SplitKind::train).size() == static_cast<size_t>(static_cast<int>(n * 0.7)));
            CHECK(ds.ids(SplitKind::val).size() == static_cast<size_t>(static_cast<int>(n * 0.1)));
        }
    }
    DataConfig cfg100 = small_cfg();
    cfg100.n_categories = 100;
    Dataset ds = Dataset::build(cfg100);
    CHECK(ds.ids(SplitKind::train).size() == 70);
    CHECK(ds.ids(SplitKind::val).size() == 10);
    CHECK(ds.ids(SplitKind::test).size() == 20);
}

TEST_CASE("episodes are reproducible and well formed") {
    Dataset ds = Dataset::build(small_cfg());
    std::mt19937_64 r1(5), r2(5);
    Episode a = ds.sample_episode(SplitKind::train, 5, r1);
    Episode b = ds.sample_episode(SplitKind::train, 5, r2);
    CHECK(episode_fingerprint(a) == episode_fingerprint(b));
    CHECK(a.supports.size() == 5);
    for (const auto& s : a.supports) CHECK(s.category_id == a.query.category_id);
    CHECK(a.normalizer > 0.0);

    // every keypoint slot visible in at least one support, even under heavy occlusion
    DataConfig hard = small_cfg();
    hard.occlusion_p = 0.4;
    Dataset hd = Dataset::build(hard);
    std::mt19937_64 r3(6);
    for (int i = 0; i < 20; ++i) {
        Episode ep = hd.sample_episode(SplitKind::test, 1, r3);
        for (const auto& inst : ep.supports)
            for (uint8_t v : inst.visibility) CHECK(v == 1); // 1-shot coverage means fully visible
    }
    std::mt19937_64 r4(7);
    for (int i = 0; i < 10; ++i) {
        Episode ep = hd.sample_episode(SplitKind::test, 5, r4);
        std::vector<uint8_t> covered(ep.k, 0);
        for (const auto& inst : ep.supports)
            for (int j = 0; j < ep.k; ++j)
                if (inst.visibility[j]) covered[j] = 1;
        for (uint8_t c : covered) CHECK(c == 1);
    }
}

TEST_CASE("manifest round-trips and is deterministic") {
    DataConfig cfg = small_cfg();
    cfg.n_categories = 30;
    Dataset ds = Dataset::build(cfg);
    const std::string m1 = manifest_text(ds);
    const std::string m2 = manifest_text(Dataset::build(cfg));
    CHECK(m1 == m2);

    // line count: header plus one line per category
    size_t lines = 0;
    for (char c : m1)
        if (c == '\n') ++lines;
    CHECK(lines == static_cast<size_t>(cfg.n_categories) + 1);

    Dataset loaded = load_manifest(m1);
    CHECK(loaded.categories.size() == ds.categories.size());
    for (int s = 0; s < 3; ++s) CHECK(loaded.split_ids[s] == ds.split_ids[s]);
    for (size_t i = 0; i < ds.categories.size(); ++i)
        CHECK(same_template(loaded.categories[i], ds.categories[i]));
    CHECK(manifest_text(loaded) == m1);
}
