#pragma once

// Procedural keypoint categories and episodic samplers.
//
// Categories are small marker-and-limb figures. A category drawn as symmetric
// places keypoint pairs mirrored about the vertical axis, shares the pair's
// marker style, and keeps the pair's limb neighborhoods mirror images of each
// other, so the two members cannot be told apart from local appearance alone.
// Occlusion overpaints a patch over the marker while keeping the ground-truth
// coordinate, which is what the visible-to-invisible inference tests rely on.

#include "scape/util.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace scape {

enum class SplitKind { train, val, test };

inline const char* split_name(SplitKind s) {
    switch (s) {
        case SplitKind::train: return "train";
        case SplitKind::val: return "val";
        default: return "test";
    }
}

inline SplitKind split_from_name(const std::string& s) {
    if (s == "train") return SplitKind::train;
    if (s == "val") return SplitKind::val;
    if (s == "test") return SplitKind::test;
    throw std::invalid_argument("unknown split: " + s);
}

struct DataConfig {
    int image_size = 64;
    int n_categories = 100;
    int k_max = 8;
    double occlusion_p = 0.15;
    uint64_t seed = 1;

    void validate() const {
        if (image_size < 16) throw std::invalid_argument("data: image_size too small");
        if (n_categories < 10) throw std::invalid_argument("data: need at least 10 categories");
        if (k_max < 2) throw std::invalid_argument("data: k_max must be at least 2");
        if (occlusion_p < 0.0 || occlusion_p > 0.5)
            throw std::invalid_argument("data: occlusion_p must lie in [0, 0.5]");
    }
};

struct MarkerStyle {
    int shape = 0;          // 0 disc, 1 ring, 2 square, 3 diamond, 4 plus, 5 saltire
    double radius_px = 3.0;
    double intensity = 1.0;
};

struct CategoryTemplate {
    int category_id = 0;
    int k = 0;
    std::vector<std::array<double, 2>> canonical;      // [0,1]^2
    std::vector<std::array<int, 2>> edges;             // spanning tree + chords
    std::vector<std::array<int, 2>> symmetric_pairs;   // disjoint index pairs
    std::vector<MarkerStyle> markers;                  // per keypoint
    double limb_intensity = 0.35;
    uint64_t seed = 0;

    bool in_pair(int slot) const {
        for (const auto& p : symmetric_pairs)
            if (p[0] == slot || p[1] == slot) return true;
        return false;
    }
};

// rotation + isotropic scale about the image center, then translation
struct SimilarityTransform {
    double rot = 0.0;
    double scale = 1.0;
    double tx = 0.0;
    double ty = 0.0;

    std::array<double, 2> apply(const std::array<double, 2>& p) const {
        const double cx = p[0] - 0.5, cy = p[1] - 0.5;
        const double c = std::cos(rot), s = std::sin(rot);
        return {0.5 + scale * (c * cx - s * cy) + tx, 0.5 + scale * (s * cx + c * cy) + ty};
    }
    std::array<double, 2> invert(const std::array<double, 2>& p) const {
        const double cx = p[0] - tx - 0.5, cy = p[1] - ty - 0.5;
        const double c = std::cos(-rot), s = std::sin(-rot);
        return {0.5 + (c * cx - s * cy) / scale, 0.5 + (s * cx + c * cy) / scale};
    }
};

struct Instance {
    int image_size = 0;
    std::vector<double> pixels; // row-major [size x size], values in [0,1]
    std::vector<std::array<double, 2>> keypoints;
    std::vector<uint8_t> visibility;
    std::array<double, 4> bbox{0, 0, 0, 0}; // x0, y0, x1, y1 normalized
    int category_id = 0;
    SimilarityTransform transform;

    double bbox_longest_side() const { return std::max(bbox[2] - bbox[0], bbox[3] - bbox[1]); }
};

struct Episode {
    std::vector<Instance> supports;
    Instance query;
    double normalizer = 0.0;
    int category_id = 0;
    int k = 0;
    std::vector<std::array<int, 2>> symmetric_pairs;
};

// ---------------------------------------------------------------------------
// Category generation
// ---------------------------------------------------------------------------

namespace synth_detail {

constexpr double kLayoutLo = 0.22;
constexpr double kLayoutHi = 0.78;
constexpr double kMinSeparation = 0.14;
constexpr double kFrameMargin = 0.09;

// mirrored-pair members keep a generous clearance so their pooled tokens stay
// near-ambiguous locally; surrounding structure is what breaks the tie
constexpr double kPairClearance = 0.30;

inline bool far_enough(const std::vector<std::array<double, 2>>& pts, const std::vector<double>& radius,
                       double x, double y, double own_radius, double relax) {
    for (size_t i = 0; i < pts.size(); ++i) {
        const double dx = pts[i][0] - x, dy = pts[i][1] - y;
        const double need = std::max(radius[i], own_radius) * relax;
        if (dx * dx + dy * dy < need * need) return false;
    }
    return true;
}

inline std::array<double, 2> place_point(std::mt19937_64& rng, std::vector<std::array<double, 2>>& pts,
                                         std::vector<double>& radius, double lo_x, double hi_x,
                                         double own_radius) {
    double relax = 1.0;
    for (int attempt = 0;; ++attempt) {
        const double x = uniform_in(rng, lo_x, hi_x);
        const double y = uniform_in(rng, kLayoutLo, kLayoutHi);
        if (far_enough(pts, radius, x, y, own_radius, relax)) {
            pts.push_back({x, y});
            radius.push_back(own_radius);
            return {x, y};
        }
        if (attempt > 0 && attempt % 64 == 0) relax *= 0.8; // loosen instead of looping forever
    }
}

} // namespace synth_detail

// Deterministic in the seed. With probability 0.7 the category carries at
// least one mirrored pair; pair members share marker style and their limbs
// attach mirror-consistently (either to each other, to the matching member of
// another pair, or to a keypoint sitting on the axis).
inline CategoryTemplate generate_category(uint64_t seed, const DataConfig& cfg) {
    using namespace synth_detail;
    CategoryTemplate t;
    t.seed = seed;
    std::mt19937_64 rng(seed);

    t.k = uniform_int(rng, std::min(3, cfg.k_max), cfg.k_max);
    const bool symmetric = uniform01(rng) < 0.7;

    int n_pairs = 0;
    if (symmetric) {
        n_pairs = 1;
        if (t.k >= 6 && uniform01(rng) < 0.5) n_pairs = 2;
    }
    const int n_singles = t.k - 2 * n_pairs;

    // slot order is shuffled so "which slot is the left member" varies per category
    std::vector<int> slot_order(t.k);
    for (int i = 0; i < t.k; ++i) slot_order[i] = i;
    for (int i = t.k - 1; i > 0; --i) std::swap(slot_order[i], slot_order[uniform_int(rng, 0, i)]);

    t.canonical.assign(t.k, {0.0, 0.0});

    std::vector<std::array<double, 2>> placed;
    std::vector<double> placed_radius;
    std::vector<int> single_slots, pair_left, pair_right;
    int next = 0;

    // pairs go first so they can claim their clearance
    for (int pr = 0; pr < n_pairs; ++pr) {
        const int left = slot_order[next++];
        const int right = slot_order[next++];
        const auto p =
            place_point(rng, placed, placed_radius, 0.5 + kPairClearance / 2.0, kLayoutHi, kPairClearance);
        const std::array<double, 2> mirrored{1.0 - p[0], p[1]};
        placed.push_back(mirrored);
        placed_radius.push_back(kPairClearance);
        t.canonical[right] = p;
        t.canonical[left] = mirrored;
        t.symmetric_pairs.push_back({left, right});
        pair_left.push_back(left);
        pair_right.push_back(right);
    }

    int axis_slot = -1;
    for (int s = 0; s < n_singles; ++s) {
        const int slot = slot_order[next++];
        std::array<double, 2> p;
        if (s == 0 && n_pairs > 0) {
            // root single pinned to the axis keeps pair attachments symmetric
            double relax = 1.0;
            for (int attempt = 0;; ++attempt) {
                const double y = uniform_in(rng, kLayoutLo, kLayoutHi);
                if (far_enough(placed, placed_radius, 0.5, y, kMinSeparation, relax)) {
                    p = {0.5, y};
                    break;
                }
                if (attempt > 0 && attempt % 64 == 0) relax *= 0.8;
            }
            placed.push_back(p);
            placed_radius.push_back(kMinSeparation);
            axis_slot = slot;
        } else {
            p = place_point(rng, placed, placed_radius, kLayoutLo, kLayoutHi, kMinSeparation);
        }
        t.canonical[slot] = p;
        single_slots.push_back(slot);
    }

    // skeleton: spanning tree plus optional chords
    auto add_edge = [&](int a, int b) { t.edges.push_back({a, b}); };
    for (size_t i = 1; i < single_slots.size(); ++i) {
        // attach to the nearest earlier single
        int best = single_slots[0];
        double best_d = 1e18;
        for (size_t j = 0; j < i; ++j) {
            const auto& a = t.canonical[single_slots[i]];
            const auto& b = t.canonical[single_slots[j]];
            const double d = (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]);
            if (d < best_d) {
                best_d = d;
                best = single_slots[j];
            }
        }
        add_edge(single_slots[i], best);
    }
    if (n_pairs > 0) {
        if (axis_slot >= 0) {
            for (int pr = 0; pr < n_pairs; ++pr) {
                add_edge(pair_left[pr], axis_slot);
                add_edge(pair_right[pr], axis_slot);
            }
            if (uniform01(rng) < 0.5) add_edge(pair_left[0], pair_right[0]);
        } else {
            // no single to anchor on: crossbar on the first pair, then chain
            // pairs side to side
            add_edge(pair_left[0], pair_right[0]);
            for (int pr = 1; pr < n_pairs; ++pr) {
                add_edge(pair_left[pr], pair_left[pr - 1]);
                add_edge(pair_right[pr], pair_right[pr - 1]);
            }
        }
    }
    if (n_singles >= 2 && uniform01(rng) < 0.3)
        add_edge(single_slots[0], single_slots[single_slots.size() - 1]);

    // marker styles: distinct per slot, shared within each pair
    std::vector<MarkerStyle> palette;
    for (double r : {2.4, 3.2})
        for (double inten : {0.7, 0.85, 1.0})
            for (int shape = 0; shape < 6; ++shape) palette.push_back({shape, r, inten});
    for (int i = static_cast<int>(palette.size()) - 1; i > 0; --i)
        std::swap(palette[i], palette[uniform_int(rng, 0, i)]);
    t.markers.assign(t.k, {});
    int palette_next = 0;
    for (int s : single_slots) t.markers[s] = palette[palette_next++];
    for (int pr = 0; pr < n_pairs; ++pr) {
        t.markers[pair_left[pr]] = palette[palette_next];
        t.markers[pair_right[pr]] = palette[palette_next];
        ++palette_next;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace synth_detail {

inline void paint(std::vector<double>& pix, int size, int x, int y, double v) {
    if (x < 0 || y < 0 || x >= size || y >= size) return;
    double& p = pix[static_cast<size_t>(y) * size + x];
    p = std::max(p, v);
}

// trim_a / trim_b shorten the segment ends, in pixels
inline void draw_line(std::vector<double>& pix, int size, std::array<double, 2> a, std::array<double, 2> b,
                      double v, double trim_a = 0.0, double trim_b = 0.0) {
    double ax = a[0] * size, ay = a[1] * size, bx = b[0] * size, by = b[1] * size;
    const double len = std::hypot(bx - ax, by - ay);
    if (len <= trim_a + trim_b + 1.0) return;
    const double ux = (bx - ax) / len, uy = (by - ay) / len;
    ax += ux * trim_a;
    ay += uy * trim_a;
    bx -= ux * trim_b;
    by -= uy * trim_b;
    const double cut_len = len - trim_a - trim_b;
    const int steps = std::max(2, static_cast<int>(cut_len * 3.0));
    for (int i = 0; i <= steps; ++i) {
        const double u = static_cast<double>(i) / steps;
        paint(pix, size, static_cast<int>(ax + u * (bx - ax)), static_cast<int>(ay + u * (by - ay)), v);
    }
}

inline bool marker_covers(const MarkerStyle& m, double dx, double dy) {
    const double r = m.radius_px;
    switch (m.shape) {
        case 0: return dx * dx + dy * dy <= r * r;
        case 1: {
            const double d = std::sqrt(dx * dx + dy * dy);
            return d <= r && d >= r - 1.4;
        }
        case 2: return std::abs(dx) <= r * 0.9 && std::abs(dy) <= r * 0.9;
        case 3: return std::abs(dx) + std::abs(dy) <= r * 1.2;
        case 4: return (std::abs(dx) <= 0.9 && std::abs(dy) <= r) || (std::abs(dy) <= 0.9 && std::abs(dx) <= r);
        default:
            return std::abs(std::abs(dx) - std::abs(dy)) <= 0.9 && std::max(std::abs(dx), std::abs(dy)) <= r;
    }
}

inline void draw_marker(std::vector<double>& pix, int size, const MarkerStyle& m, std::array<double, 2> c) {
    const double cx = c[0] * size - 0.5, cy = c[1] * size - 0.5;
    const int r = static_cast<int>(m.radius_px) + 2;
    for (int y = static_cast<int>(cy) - r; y <= static_cast<int>(cy) + r + 1; ++y)
        for (int x = static_cast<int>(cx) - r; x <= static_cast<int>(cx) + r + 1; ++x)
            if (marker_covers(m, x - cx, y - cy)) paint(pix, size, x, y, m.intensity);
}

} // namespace synth_detail

// Per-instance appearance variation: marker/limb intensity jitter, background
// noise, and distractor markers that are not keypoints. Distractors and noise
// keep appearance-only matching from being sufficient.
struct RenderJitter {
    std::vector<double> marker_shift; // per slot, shared within a mirrored pair
    double limb_shift = 0.0;
    double bg_noise_amp = 0.0;
    uint64_t noise_seed = 0;
    std::vector<std::pair<MarkerStyle, std::array<double, 2>>> distractors;
};

// Deterministic render under a caller-chosen transform and occlusion set.
inline Instance render_with_transform(const CategoryTemplate& t, const DataConfig& cfg,
                                      const SimilarityTransform& tf, const std::vector<uint8_t>& occluded,
                                      const RenderJitter* jitter = nullptr) {
    using namespace synth_detail;
    const int size = cfg.image_size;
    Instance inst;
    inst.image_size = size;
    inst.category_id = t.category_id;
    inst.transform = tf;
    inst.pixels.assign(static_cast<size_t>(size) * size, 0.0);
    inst.keypoints.resize(t.k);
    inst.visibility.assign(t.k, 1);

    for (int i = 0; i < t.k; ++i) inst.keypoints[i] = tf.apply(t.canonical[i]);

    const double limb_v =
        std::max(0.25, t.limb_intensity + (jitter ? jitter->limb_shift : 0.0));
    for (const auto& e : t.edges) {
        // limbs stop short of mirrored-pair markers so a pair member's local
        // neighborhood stays an exact mirror image of its partner's
        const double trim_a = t.in_pair(e[0]) ? t.markers[e[0]].radius_px + 2.5 : 0.0;
        const double trim_b = t.in_pair(e[1]) ? t.markers[e[1]].radius_px + 2.5 : 0.0;
        draw_line(inst.pixels, size, inst.keypoints[e[0]], inst.keypoints[e[1]], limb_v, trim_a, trim_b);
    }
    for (int i = 0; i < t.k; ++i) {
        MarkerStyle style = t.markers[i];
        if (jitter && !jitter->marker_shift.empty()) style.intensity += jitter->marker_shift[i];
        draw_marker(inst.pixels, size, style, inst.keypoints[i]);
    }
    if (jitter)
        for (const auto& [style, pos] : jitter->distractors) draw_marker(inst.pixels, size, style, pos);

    // occlusion erases a patch down to the background, so the hidden keypoint
    // leaves no local beacon; only cut limbs and the visible keypoints hint at it
    for (int i = 0; i < t.k; ++i) {
        if (!occluded.empty() && occluded[i]) {
            inst.visibility[i] = 0;
            const double cx = inst.keypoints[i][0] * size - 0.5, cy = inst.keypoints[i][1] * size - 0.5;
            const int half = static_cast<int>(t.markers[i].radius_px) + 3;
            for (int y = static_cast<int>(cy) - half; y <= static_cast<int>(cy) + half + 1; ++y)
                for (int x = static_cast<int>(cx) - half; x <= static_cast<int>(cx) + half + 1; ++x)
                    if (x >= 0 && y >= 0 && x < size && y < size)
                        inst.pixels[static_cast<size_t>(y) * size + x] = 0.0;
        }
    }

    // tight bbox over rendered pixels; the threshold sits above the noise floor
    int x0 = size, y0 = size, x1 = -1, y1 = -1;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (inst.pixels[static_cast<size_t>(y) * size + x] > 0.2) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (jitter && jitter->bg_noise_amp > 0.0) {
        std::mt19937_64 noise_rng(jitter->noise_seed);
        for (double& p : inst.pixels)
            p = std::min(1.0, p + uniform01(noise_rng) * jitter->bg_noise_amp);
    }
    if (x1 >= 0) {
        inst.bbox = {static_cast<double>(x0) / size, static_cast<double>(y0) / size,
                     static_cast<double>(x1 + 1) / size, static_cast<double>(y1 + 1) / size};
    } else {
        // fully erased by occlusion; fall back to the keypoint extent
        double kx0 = 1.0, ky0 = 1.0, kx1 = 0.0, ky1 = 0.0;
        for (const auto& p : inst.keypoints) {
            kx0 = std::min(kx0, p[0]);
            kx1 = std::max(kx1, p[0]);
            ky0 = std::min(ky0, p[1]);
            ky1 = std::max(ky1, p[1]);
        }
        inst.bbox = {kx0, ky0, kx1 + 1.0 / size, ky1 + 1.0 / size};
    }
    return inst;
}

inline Instance render_instance(const CategoryTemplate& t, const DataConfig& cfg, uint64_t seed,
                                double occlusion_p) {
    using namespace synth_detail;
    if (occlusion_p < 0.0 || occlusion_p > 0.5)
        throw std::invalid_argument("render: occlusion_p must lie in [0, 0.5]");
    std::mt19937_64 rng(seed);

    SimilarityTransform tf;
    bool fitted = false;
    for (int attempt = 0; attempt < 64 && !fitted; ++attempt) {
        tf.rot = uniform_in(rng, -M_PI / 6.0, M_PI / 6.0);
        tf.scale = uniform_in(rng, 0.7, 1.3);
        double minx = 1e9, miny = 1e9, maxx = -1e9, maxy = -1e9;
        SimilarityTransform probe{tf.rot, tf.scale, 0.0, 0.0};
        for (const auto& p : t.canonical) {
            const auto q = probe.apply(p);
            minx = std::min(minx, q[0]);
            maxx = std::max(maxx, q[0]);
            miny = std::min(miny, q[1]);
            maxy = std::max(maxy, q[1]);
        }
        const double lo_tx = kFrameMargin - minx, hi_tx = (1.0 - kFrameMargin) - maxx;
        const double lo_ty = kFrameMargin - miny, hi_ty = (1.0 - kFrameMargin) - maxy;
        if (lo_tx > hi_tx || lo_ty > hi_ty) continue; // object cannot fit, resample
        tf.tx = uniform_in(rng, lo_tx, hi_tx);
        tf.ty = uniform_in(rng, lo_ty, hi_ty);
        fitted = true;
    }
    if (!fitted) throw std::runtime_error("render: no in-frame transform found after bounded retries");

    std::vector<uint8_t> occluded(t.k, 0);
    for (int i = 0; i < t.k; ++i) occluded[i] = uniform01(rng) < occlusion_p ? 1 : 0;

    RenderJitter jitter;
    jitter.marker_shift.assign(t.k, 0.0);
    {
        std::vector<uint8_t> assigned(t.k, 0);
        for (int i = 0; i < t.k; ++i) {
            if (assigned[i]) continue;
            const double shift = uniform_in(rng, -0.08, 0.0);
            jitter.marker_shift[i] = shift;
            assigned[i] = 1;
            for (const auto& pr : t.symmetric_pairs) { // pairs share their jitter
                const int partner = pr[0] == i ? pr[1] : (pr[1] == i ? pr[0] : -1);
                if (partner >= 0 && !assigned[partner]) {
                    jitter.marker_shift[partner] = shift;
                    assigned[partner] = 1;
                }
            }
        }
    }
    jitter.limb_shift = uniform_in(rng, -0.04, 0.04);
    jitter.bg_noise_amp = 0.10;

    double kx0 = 1.0, ky0 = 1.0, kx1 = 0.0, ky1 = 0.0;
    for (const auto& p : t.canonical) {
        const auto q = tf.apply(p);
        kx0 = std::min(kx0, q[0]);
        kx1 = std::max(kx1, q[0]);
        ky0 = std::min(ky0, q[1]);
        ky1 = std::max(ky1, q[1]);
    }
    // distractors are exact copies of this instance's own markers, so local
    // appearance alone cannot tell them from the true keypoint
    const int n_distractors = uniform_int(rng, 0, 3);
    for (int i = 0; i < n_distractors; ++i) {
        const int copy_of = uniform_int(rng, 0, t.k - 1);
        MarkerStyle style = t.markers[copy_of];
        style.intensity += jitter.marker_shift[copy_of];
        for (int attempt = 0; attempt < 8; ++attempt) {
            const double x = uniform_in(rng, std::max(kFrameMargin, kx0 - 0.06), std::min(1.0 - kFrameMargin, kx1 + 0.06));
            const double y = uniform_in(rng, std::max(kFrameMargin, ky0 - 0.06), std::min(1.0 - kFrameMargin, ky1 + 0.06));
            bool clear = true;
            for (int j = 0; j < t.k; ++j) {
                const auto q = tf.apply(t.canonical[j]);
                if (std::hypot(q[0] - x, q[1] - y) < 0.10) clear = false;
            }
            if (clear) {
                jitter.distractors.push_back({style, {x, y}});
                break;
            }
        }
    }
    jitter.noise_seed = rng();
    return render_with_transform(t, cfg, tf, occluded, &jitter);
}

// ---------------------------------------------------------------------------
// Dataset, episodes, manifest
// ---------------------------------------------------------------------------

struct Dataset {
    DataConfig cfg;
    std::vector<CategoryTemplate> categories;
    std::vector<int> split_ids[3];

    static Dataset build(const DataConfig& cfg) {
        cfg.validate();
        Dataset ds;
        ds.cfg = cfg;
        ds.categories.reserve(cfg.n_categories);
        for (int id = 0; id < cfg.n_categories; ++id) {
            CategoryTemplate t = generate_category(mix_seed(cfg.seed, static_cast<uint64_t>(id)), cfg);
            t.category_id = id;
            ds.categories.push_back(std::move(t));
        }
        ds.assign_splits();
        return ds;
    }

    void assign_splits() {
        const int n = static_cast<int>(categories.size());
        const int n_train = static_cast<int>(n * 0.7);
        const int n_val = static_cast<int>(n * 0.1);
        for (int i = 0; i < 3; ++i) split_ids[i].clear();
        for (int id = 0; id < n; ++id) {
            if (id < n_train)
                split_ids[0].push_back(id);
            else if (id < n_train + n_val)
                split_ids[1].push_back(id);
            else
                split_ids[2].push_back(id);
        }
    }

    const std::vector<int>& ids(SplitKind s) const { return split_ids[static_cast<int>(s)]; }

    SplitKind split_of(int category_id) const {
        for (int s = 0; s < 3; ++s)
            for (int id : split_ids[s])
                if (id == category_id) return static_cast<SplitKind>(s);
        throw std::out_of_range("category id not in any split");
    }

    // One few-shot task. Support sets are redrawn until every keypoint slot is
    // visible in at least one support.
    Episode sample_episode(SplitKind split, int n_shot, std::mt19937_64& rng) const {
        if (n_shot != 1 && n_shot != 5) throw std::invalid_argument("episode: n_shot must be 1 or 5");
        const auto& pool = ids(split);
        if (pool.empty()) throw std::invalid_argument("episode: empty split");
        const CategoryTemplate& cat = categories[pool[uniform_int(rng, 0, static_cast<int>(pool.size()) - 1)]];

        Episode ep;
        ep.category_id = cat.category_id;
        ep.k = cat.k;
        ep.symmetric_pairs = cat.symmetric_pairs;

        for (int attempt = 0;; ++attempt) {
            ep.supports.clear();
            std::vector<uint8_t> covered(cat.k, 0);
            for (int s = 0; s < n_shot; ++s) {
                ep.supports.push_back(render_instance(cat, cfg, rng(), cfg.occlusion_p));
                for (int i = 0; i < cat.k; ++i)
                    if (ep.supports.back().visibility[i]) covered[i] = 1;
            }
            bool full = true;
            for (uint8_t c : covered)
                if (!c) full = false;
            if (full) break;
            if (attempt > 2000) throw std::runtime_error("episode: support coverage not reached");
        }
        // a query with no visible keypoint is not a task; redraw it
        for (int attempt = 0;; ++attempt) {
            ep.query = render_instance(cat, cfg, rng(), cfg.occlusion_p);
            bool any = false;
            for (uint8_t v : ep.query.visibility) any = any || v;
            if (any) break;
            if (attempt > 2000) throw std::runtime_error("episode: no visible query keypoints");
        }
        ep.normalizer = ep.query.bbox_longest_side();
        return ep;
    }
};

// ---------------------------------------------------------------------------

inline std::string manifest_text(const Dataset& ds) {
    std::ostringstream os;
    os << "# scape-manifest v1 seed=" << ds.cfg.seed << " categories=" << ds.cfg.n_categories
       << " image_size=" << ds.cfg.image_size << " k_max=" << ds.cfg.k_max
       << " occlusion_p=" << fmt_double(ds.cfg.occlusion_p) << "\n";
    for (size_t i = 0; i < ds.categories.size(); ++i) {
        const auto& c = ds.categories[i];
        os << c.category_id << " " << c.k << " " << split_name(ds.split_of(c.category_id)) << " " << c.seed
           << "\n";
    }
    return os.str();
}

inline Dataset load_manifest(const std::string& text) {
    std::istringstream is(text);
    std::string header;
    if (!std::getline(is, header) || header.rfind("# scape-manifest v1 ", 0) != 0)
        throw std::runtime_error("manifest: bad header");
    DataConfig cfg;
    {
        std::istringstream hs(header.substr(std::string("# scape-manifest v1 ").size()));
        std::string kv;
        while (hs >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw std::runtime_error("manifest: bad header field " + kv);
            const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
            if (key == "seed") cfg.seed = std::stoull(val);
            else if (key == "categories") cfg.n_categories = std::stoi(val);
            else if (key == "image_size") cfg.image_size = std::stoi(val);
            else if (key == "k_max") cfg.k_max = std::stoi(val);
            else if (key == "occlusion_p") cfg.occlusion_p = std::stod(val);
            else throw std::runtime_error("manifest: unknown header field " + key);
        }
    }
    Dataset ds;
    ds.cfg = cfg;
    std::string line;
    std::map<SplitKind, std::vector<int>> by_split;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        int id = 0, k = 0;
        std::string split;
        uint64_t seed = 0;
        if (!(ls >> id >> k >> split >> seed)) throw std::runtime_error("manifest: bad line: " + line);
        CategoryTemplate t = generate_category(seed, cfg);
        t.category_id = id;
        if (t.k != k)
            throw std::runtime_error("manifest: category " + std::to_string(id) +
                                     " does not reproduce from its seed");
        ds.categories.push_back(std::move(t));
        by_split[split_from_name(split)].push_back(id);
    }
    if (static_cast<int>(ds.categories.size()) != cfg.n_categories)
        throw std::runtime_error("manifest: category count mismatch");
    for (int s = 0; s < 3; ++s) ds.split_ids[s] = by_split[static_cast<SplitKind>(s)];
    return ds;
}

// PGM image plus a CSV of (x, y, visible) rows per exported instance.
inline void export_instances(const Dataset& ds, const std::filesystem::path& dir, int per_category,
                             uint64_t seed) {
    for (const auto& cat : ds.categories) {
        for (int i = 0; i < per_category; ++i) {
            Instance inst = render_instance(cat, ds.cfg, mix_seed(seed, cat.category_id * 1000ULL + i),
                                            ds.cfg.occlusion_p);
            const std::string stem = "cat" + std::to_string(cat.category_id) + "_" + std::to_string(i);
            write_pgm(dir / (stem + ".pgm"), inst.image_size, inst.image_size, inst.pixels);
            std::ostringstream os;
            os.precision(17);
            for (int j = 0; j < cat.k; ++j)
                os << inst.keypoints[j][0] << "," << inst.keypoints[j][1] << ","
                   << static_cast<int>(inst.visibility[j]) << "\n";
            write_file(dir / (stem + ".csv"), os.str());
        }
    }
}

} // namespace scape
