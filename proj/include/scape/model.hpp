#pragma once

// The pose estimator: patch-embedding backbone shared by support and query,
// Gaussian-pooled support keypoint tokens, a cross-attention context stage
// (GKP) that enriches keypoint tokens from the support image, a self-attention
// interactor over [keypoints | query tokens] with optionally unshared Q/K
// projections per segment, an additive keypoint-attention refiner (KAR) on the
// keypoint-to-keypoint logit block, and three output heads: direct coordinate
// regression plus two map-supervised baselines kept for ablations.

#include "scape/nn.hpp"
#include "scape/synth.hpp"
#include "scape/tensor.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace scape {

enum class Variant {
    scape,
    lite,
    no_gkp,
    no_kar,
    shared_qk,
    mask_kk,
    matching_head,
    map_regression_head,
};

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::scape: return "scape";
        case Variant::lite: return "lite";
        case Variant::no_gkp: return "no_gkp";
        case Variant::no_kar: return "no_kar";
        case Variant::shared_qk: return "shared_qk";
        case Variant::mask_kk: return "mask_kk";
        case Variant::matching_head: return "matching_head";
        default: return "map_regression_head";
    }
}

inline Variant variant_from_name(const std::string& s) {
    for (Variant v : {Variant::scape, Variant::lite, Variant::no_gkp, Variant::no_kar, Variant::shared_qk,
                      Variant::mask_kk, Variant::matching_head, Variant::map_regression_head})
        if (s == variant_name(v)) return v;
    throw std::invalid_argument("unknown variant: " + s);
}

enum class HeadKind { coordinate, matching, map_regression };

struct ModelConfig {
    int image_size = 64;
    int patch_size = 8;
    int d_model = 48;
    int n_heads = 4;
    int n_gkp_layers = 2;
    int n_interactor_layers = 4;
    int k_max = 8;
    int n_filters = 4;
    int af_hidden = 0;   // 0 -> k_max / 2
    int ffn_hidden = 0;  // 0 -> 2 * d_model
    int head_hidden = 0; // 0 -> d_model
    double token_sigma = 1.0;
    double dropout_p = 0.1; // used inside the KAR assigner only
    bool gkp_query_ctx = true;
    bool use_identifiers = true;
    Variant variant = Variant::scape;
    uint64_t init_seed = 1;

    int grid() const { return image_size / patch_size; }
    int n_query_tokens() const { return grid() * grid(); }
    int af_hidden_eff() const { return af_hidden > 0 ? af_hidden : std::max(1, k_max / 2); }
    int ffn_hidden_eff() const { return ffn_hidden > 0 ? ffn_hidden : 2 * d_model; }
    int head_hidden_eff() const { return head_hidden > 0 ? head_hidden : d_model; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw std::invalid_argument("config: image_size must be a multiple of patch_size");
        if (d_model <= 0 || d_model % 4 != 0) throw std::invalid_argument("config: d_model must be a multiple of 4");
        if (n_heads <= 0 || d_model % n_heads != 0)
            throw std::invalid_argument("config: d_model must be divisible by n_heads");
        if (k_max < 2) throw std::invalid_argument("config: k_max must be at least 2");
        if (af_hidden_eff() < 1) throw std::invalid_argument("config: af_hidden must be at least 1");
        if (n_filters < 1) throw std::invalid_argument("config: n_filters must be at least 1");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw std::invalid_argument("config: dropout_p must be in [0,1)");
        if (token_sigma < 0.0) throw std::invalid_argument("config: token_sigma must be non-negative");
        if (n_gkp_layers < 0 || n_interactor_layers < 1)
            throw std::invalid_argument("config: need at least one interactor layer");
    }

    struct Layout {
        int n_gkp = 0;
        int n_inter = 0;
        bool unshared = false;
        bool use_kar = false;
        bool mask_kk = false;
        HeadKind head = HeadKind::coordinate;
    };

    // Variant resolution keeps the total attention block count fixed: stacks
    // without GKP spend all blocks on the interactor.
    Layout layout() const {
        const int total = n_gkp_layers + n_interactor_layers;
        switch (variant) {
            case Variant::scape: return {n_gkp_layers, n_interactor_layers, true, true, false, HeadKind::coordinate};
            case Variant::lite: return {1, 2, true, true, false, HeadKind::coordinate};
            case Variant::no_gkp: return {0, total, true, true, false, HeadKind::coordinate};
            case Variant::no_kar:
                return {n_gkp_layers, n_interactor_layers, true, false, false, HeadKind::coordinate};
            case Variant::shared_qk: return {0, total, false, false, false, HeadKind::coordinate};
            case Variant::mask_kk:
                return {n_gkp_layers, n_interactor_layers, true, false, true, HeadKind::coordinate};
            case Variant::matching_head: return {0, total, false, false, false, HeadKind::matching};
            default: return {0, total, false, false, false, HeadKind::map_regression};
        }
    }
};

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

struct KarLayer {
    std::vector<Mlp> filters; // each k_max -> af_hidden -> k_max
    Tensor w_assign;          // [d_model x n_filters]
    Tensor assign_gamma, assign_beta;

    KarLayer() = default;
    KarLayer(ParamRegistry& reg, const std::string& name, const ModelConfig& cfg) {
        for (int i = 0; i < cfg.n_filters; ++i)
            filters.emplace_back(reg, name + ".af" + std::to_string(i), cfg.k_max, cfg.af_hidden_eff(),
                                 cfg.k_max);
        w_assign = reg.uniform_param(name + ".w_assign", {cfg.d_model, cfg.n_filters},
                                     std::sqrt(1.0 / cfg.d_model));
        assign_gamma = reg.const_param(name + ".assign_gamma", {cfg.n_filters}, 1.0);
        assign_beta = reg.const_param(name + ".assign_beta", {cfg.n_filters}, 0.0);
    }
};

struct EncoderBlockParams {
    MultiHeadAttention attn;
    Mlp ffn;
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;

    EncoderBlockParams() = default;
    EncoderBlockParams(ParamRegistry& reg, const std::string& name, const ModelConfig& cfg, bool unshared,
                       KvSource kv) {
        AttentionConfig ac;
        ac.d_model = cfg.d_model;
        ac.n_heads = cfg.n_heads;
        ac.unshared_qk = unshared;
        ac.kv_source = kv;
        attn = MultiHeadAttention(reg, name + ".attn", ac);
        ffn = Mlp(reg, name + ".ffn", cfg.d_model, cfg.ffn_hidden_eff(), cfg.d_model);
        ln1_gamma = reg.const_param(name + ".ln1_gamma", {cfg.d_model}, 1.0);
        ln1_beta = reg.const_param(name + ".ln1_beta", {cfg.d_model}, 0.0);
        ln2_gamma = reg.const_param(name + ".ln2_gamma", {cfg.d_model}, 1.0);
        ln2_beta = reg.const_param(name + ".ln2_beta", {cfg.d_model}, 0.0);
    }
};

struct InteractorLayer {
    EncoderBlockParams block;
    KarLayer kar;

    InteractorLayer() = default;
    InteractorLayer(ParamRegistry& reg, const std::string& name, const ModelConfig& cfg, bool unshared)
        : block(reg, name, cfg, unshared, KvSource::self_tokens), kar(reg, name + ".kar", cfg) {}
};

struct Model {
    ModelConfig cfg;
    ModelConfig::Layout lay;
    ParamRegistry reg;

    Linear patch_embed;
    Tensor embed_ln_gamma, embed_ln_beta;
    Tensor identifiers; // [k_max x d_model], zero-initialized, learned
    Tensor posenc;      // fixed, not a parameter

    std::vector<EncoderBlockParams> gkp;
    std::vector<InteractorLayer> inter;

    Mlp coord_head;
    Linear match_p1, match_p2;
    Mlp map_head;

    explicit Model(const ModelConfig& c) : cfg(c), lay(c.layout()), reg(c.init_seed) {
        cfg.validate();
        const int d = cfg.d_model, p2 = cfg.patch_size * cfg.patch_size;
        patch_embed = Linear(reg, "backbone.patch", p2, d);
        embed_ln_gamma = reg.const_param("backbone.ln_gamma", {d}, 1.0);
        embed_ln_beta = reg.const_param("backbone.ln_beta", {d}, 0.0);
        identifiers = reg.const_param("identifiers", {cfg.k_max, d}, 0.0);
        posenc = positional_encoding_2d(cfg.grid(), cfg.grid(), d);
        for (int i = 0; i < lay.n_gkp; ++i)
            gkp.emplace_back(reg, "gkp" + std::to_string(i), cfg, false, KvSource::cross_tokens);
        for (int i = 0; i < lay.n_inter; ++i)
            inter.emplace_back(reg, "inter" + std::to_string(i), cfg, lay.unshared);
        coord_head = Mlp(reg, "coord_head", d, cfg.head_hidden_eff(), 2);
        match_p1 = Linear(reg, "match_p1", d, d);
        match_p2 = Linear(reg, "match_p2", d, d);
        map_head = Mlp(reg, "map_head", d, cfg.head_hidden_eff(), cfg.n_query_tokens());
    }
};

// ---------------------------------------------------------------------------
// Backbone and tokenization
// ---------------------------------------------------------------------------

// Non-overlapping patch flattening -> shared linear projection -> layernorm.
inline Tensor backbone_embed(const Model& m, const std::vector<double>& pixels, int image_size) {
    if (image_size != m.cfg.image_size)
        throw std::invalid_argument("backbone: image size " + std::to_string(image_size) + " != configured " +
                                    std::to_string(m.cfg.image_size));
    if (static_cast<int>(pixels.size()) != image_size * image_size)
        throw std::invalid_argument("backbone: pixel buffer size mismatch");
    const int p = m.cfg.patch_size, g = m.cfg.grid(), nq = g * g;
    std::vector<double> patches(static_cast<size_t>(nq) * p * p);
    for (int pr = 0; pr < g; ++pr)
        for (int pc = 0; pc < g; ++pc) {
            double* dst = patches.data() + (static_cast<size_t>(pr) * g + pc) * p * p;
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    dst[y * p + x] = pixels[static_cast<size_t>(pr * p + y) * image_size + pc * p + x];
        }
    Tensor pt = Tensor::leaf({nq, p * p}, std::move(patches));
    return layer_norm(m.patch_embed.forward(pt), m.embed_ln_gamma, m.embed_ln_beta);
}

inline Tensor backbone_embed(const Model& m, const Instance& inst) {
    return backbone_embed(m, inst.pixels, inst.image_size);
}

// Normalized Gaussian pooling weights over the g x g feature grid, one row per
// keypoint slot. Rows for absent or excluded slots are zero. sigma == 0 is the
// nearest-cell limit.
inline Tensor extraction_weights(int g, const std::vector<std::array<double, 2>>& keypoints, double sigma,
                                 int rows, const std::vector<double>& row_scale) {
    const int nq = g * g;
    std::vector<double> w(static_cast<size_t>(rows) * nq, 0.0);
    for (size_t j = 0; j < keypoints.size(); ++j) {
        if (row_scale[j] == 0.0) continue;
        const double gx = keypoints[j][0] * g - 0.5;
        const double gy = keypoints[j][1] * g - 0.5;
        if (keypoints[j][0] < 0.0 || keypoints[j][0] > 1.0 || keypoints[j][1] < 0.0 || keypoints[j][1] > 1.0)
            throw std::invalid_argument("extraction: keypoint outside the unit square");
        double* row = w.data() + j * nq;
        if (sigma == 0.0) {
            const int cx = std::clamp(static_cast<int>(std::lround(gx)), 0, g - 1);
            const int cy = std::clamp(static_cast<int>(std::lround(gy)), 0, g - 1);
            row[cy * g + cx] = row_scale[j];
            continue;
        }
        double norm = 0.0;
        for (int r = 0; r < g; ++r)
            for (int c = 0; c < g; ++c) {
                const double d2 = (c - gx) * (c - gx) + (r - gy) * (r - gy);
                const double h = std::exp(-d2 / (2.0 * sigma * sigma));
                row[r * g + c] = h;
                norm += h;
            }
        if (!(norm > 0.0)) throw std::logic_error("extraction: degenerate heatmap normalizer");
        for (int i = 0; i < nq; ++i) row[i] *= row_scale[j] / norm;
    }
    return Tensor::leaf({rows, nq}, std::move(w));
}

// token_j = sum_p H_j(p) feat(p) / sum_p H_j(p)
inline Tensor extract_keypoint_tokens(const Tensor& support_feat, int g,
                                      const std::vector<std::array<double, 2>>& keypoints, double sigma) {
    if (support_feat.rows() != g * g)
        throw std::invalid_argument("extraction: feature grid size mismatch");
    std::vector<double> ones(keypoints.size(), 1.0);
    Tensor w = extraction_weights(g, keypoints, sigma, static_cast<int>(keypoints.size()), ones);
    return matmul(w, support_feat);
}

// ---------------------------------------------------------------------------
// KAR
// ---------------------------------------------------------------------------

// Per-keypoint mixing weights over the filters: softmax(layernorm(dropout(F_s W))).
inline Tensor kar_assign_weights(const KarLayer& kar, const Tensor& fs, double dropout_p,
                                 std::mt19937_64& drop_rng, bool training) {
    Tensor a = matmul(fs, kar.w_assign);
    a = dropout(a, dropout_p, drop_rng, training);
    a = layer_norm(a, kar.assign_gamma, kar.assign_beta);
    return softmax_rows(a);
}

// Refined keypoint-to-keypoint logits: A + sum_i Assign_i(F_s) . AF_i(A),
// where AF_i(A) = MLP_i(ReLU(A)) acts row-wise and row j of filter i is scaled
// by keypoint j's assigner weight for filter i. The input block must already
// have invalid rows/columns zeroed; filter outputs are re-zeroed so padding
// cannot leak through the filter MLPs.
inline Tensor kar_refine(const Tensor& logits_kk, const Tensor& assign, const KarLayer& kar,
                         const Tensor& valid_vec) {
    if (logits_kk.rows() != logits_kk.cols())
        throw std::invalid_argument("kar: keypoint block must be square");
    if (valid_vec.size() != logits_kk.rows()) throw std::invalid_argument("kar: invalid mask shape");
    Tensor delta;
    for (size_t i = 0; i < kar.filters.size(); ++i) {
        Tensor af = kar.filters[i].forward(relu(logits_kk));
        af = scale_rows(scale_cols(af, valid_vec), valid_vec);
        Tensor weighted = scale_rows(af, slice_cols(assign, static_cast<int>(i), static_cast<int>(i) + 1));
        delta = delta.defined() ? add(delta, weighted) : weighted;
    }
    return add(logits_kk, delta);
}

// Convenience form matching the per-operation contract: assigner weights are
// computed from F_s without dropout.
inline Tensor kar_refine(const Tensor& logits_kk, const Tensor& fs, const KarLayer& kar,
                         const BoolMask& valid) {
    if (valid.size() != static_cast<size_t>(logits_kk.rows()))
        throw std::invalid_argument("kar: invalid mask shape");
    std::vector<double> vv(valid.begin(), valid.end());
    const int n = static_cast<int>(vv.size());
    Tensor valid_vec = Tensor::leaf({n}, std::move(vv));
    std::mt19937_64 rng(0);
    Tensor assign = kar_assign_weights(kar, fs, 0.0, rng, false);
    return kar_refine(logits_kk, assign, kar, valid_vec);
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct AttentionRecordLayer {
    std::string kind; // "gkp" or "interactor"
    int q_rows = 0, kv_cols = 0;
    std::vector<std::vector<double>> attn;      // per head, post-softmax [q_rows x kv_cols]
    std::vector<std::vector<double>> kk_before; // per head, [k_max x k_max] logits (interactor only)
    std::vector<std::vector<double>> kk_after;
    std::vector<double> assign; // [k_max x n_filters] assigner weights (KAR stacks only)
};

struct AttentionRecord {
    bool enabled = false;
    std::vector<AttentionRecordLayer> layers;
};

struct ForwardOptions {
    bool training = false;
    uint64_t dropout_seed = 0;
    bool record_attention = false;
    bool compute_loss = true;
};

struct ForwardOutput {
    Tensor coords; // [k_max x 2] raw regression output (coordinate heads)
    Tensor maps;   // [k_max x n_q] similarity/map logits (map heads)
    Tensor loss;   // scalar, when requested
    AttentionRecord record;
};

namespace model_detail {

inline Tensor encoder_block(const EncoderBlockParams& blk, const Tensor& tokens, const Tensor& kv, int q_split,
                            int kv_split, const LogitHook& hook, const BoolMask* mask,
                            std::vector<Tensor>* attn_out) {
    auto r = blk.attn.forward(tokens, kv, q_split, kv_split, hook, mask);
    if (attn_out) *attn_out = r.attn;
    Tensor x = layer_norm(add(tokens, r.out), blk.ln1_gamma, blk.ln1_beta);
    x = layer_norm(add(x, blk.ffn.forward(x)), blk.ln2_gamma, blk.ln2_beta);
    return x;
}

inline void record_maps(AttentionRecordLayer& rec, const std::vector<Tensor>& maps) {
    rec.q_rows = maps[0].rows();
    rec.kv_cols = maps[0].cols();
    for (const auto& m : maps) rec.attn.push_back(m.data());
}

} // namespace model_detail

// Cross-attention context stage: keypoint tokens attend the support image
// (plus the query tokens by default); query tokens are not updated.
inline Tensor gkp_forward(const Model& m, Tensor fs, const Tensor& support_ctx, const Tensor& fq,
                          const Tensor& keep_rows, AttentionRecord* record) {
    if (support_ctx.rows() == 0) throw std::invalid_argument("gkp: empty context");
    Tensor ctx = m.cfg.gkp_query_ctx ? concat_rows(support_ctx, fq) : support_ctx;
    for (const auto& layer : m.gkp) {
        std::vector<Tensor> maps;
        fs = model_detail::encoder_block(layer, fs, ctx, 0, 0, nullptr, nullptr,
                                         record && record->enabled ? &maps : nullptr);
        fs = scale_rows(fs, keep_rows); // padded slots stay zero
        if (record && record->enabled) {
            AttentionRecordLayer rec;
            rec.kind = "gkp";
            model_detail::record_maps(rec, maps);
            record->layers.push_back(std::move(rec));
        }
    }
    return fs;
}

struct InteractorResult {
    Tensor fs;
    Tensor fq;
};

// Self-attention over [F_s | F_q]; unshared Q/K per segment when configured;
// KAR (or the masking experiment) attaches to the keypoint block of each
// head's logits.
inline InteractorResult interactor_forward(const Model& m, Tensor fs, Tensor fq, int k_valid,
                                           const ForwardOptions& opt, AttentionRecord* record,
                                           std::mt19937_64& drop_rng) {
    const int K = m.cfg.k_max, nq = m.cfg.n_query_tokens(), T = K + nq;
    std::vector<double> validd(K, 0.0);
    for (int i = 0; i < k_valid; ++i) validd[i] = 1.0;
    Tensor valid_vec = Tensor::leaf({K}, validd);
    std::vector<double> keepd(T, 1.0);
    for (int i = k_valid; i < K; ++i) keepd[i] = 0.0;
    Tensor keep_rows = Tensor::leaf({T}, keepd);

    // key mask: padded keypoint columns are never attended; the masking
    // experiment additionally blocks every keypoint-to-keypoint cell
    BoolMask mask(static_cast<size_t>(T) * T, 1);
    bool need_mask = k_valid < K || m.lay.mask_kk;
    for (int i = 0; i < T; ++i)
        for (int j = 0; j < K; ++j) {
            const bool padded = j >= k_valid;
            const bool masked_kk = m.lay.mask_kk && i < K;
            if (padded || masked_kk) mask[static_cast<size_t>(i) * T + j] = 0;
        }

    Tensor tokens = concat_rows(fs, fq);
    for (const auto& layer : m.inter) {
        AttentionRecordLayer rec;
        rec.kind = "interactor";
        const bool recording = record && record->enabled;
        if (recording) {
            rec.kk_before.resize(m.cfg.n_heads);
            rec.kk_after.resize(m.cfg.n_heads);
        }

        LogitHook hook = nullptr;
        Tensor assign;
        if (m.lay.use_kar) {
            Tensor cur_fs = slice_rows(tokens, 0, K);
            assign = kar_assign_weights(layer.kar, cur_fs, m.cfg.dropout_p, drop_rng, opt.training);
            if (recording) rec.assign = assign.data();
            hook = [&, assign](const Tensor& logits, int head) -> Tensor {
                Tensor kk = slice_cols(slice_rows(logits, 0, K), 0, K);
                Tensor kk_z = scale_rows(scale_cols(kk, valid_vec), valid_vec);
                Tensor refined = kar_refine(kk_z, assign, layer.kar, valid_vec);
                if (recording) {
                    rec.kk_before[head] = kk_z.data();
                    rec.kk_after[head] = refined.data();
                }
                Tensor delta = sub(refined, kk_z);
                return add(logits, pad_block(delta, logits.rows(), logits.cols()));
            };
        } else if (recording) {
            // keep the before/after slots meaningful for non-KAR stacks
            hook = [&](const Tensor& logits, int head) -> Tensor {
                Tensor kk = slice_cols(slice_rows(logits, 0, K), 0, K);
                Tensor kk_z = scale_rows(scale_cols(kk, valid_vec), valid_vec);
                rec.kk_before[head] = kk_z.data();
                rec.kk_after[head] = kk_z.data();
                return logits;
            };
        }

        std::vector<Tensor> maps;
        tokens = model_detail::encoder_block(layer.block, tokens, tokens, K, K, hook,
                                             need_mask ? &mask : nullptr, recording ? &maps : nullptr);
        tokens = scale_rows(tokens, keep_rows);
        if (recording) {
            model_detail::record_maps(rec, maps);
            record->layers.push_back(std::move(rec));
        }
    }
    return {slice_rows(tokens, 0, K), slice_rows(tokens, K, T)};
}

// Per-token regression head; raw outputs are normalized image coordinates,
// clamped to [0,1] only at evaluation time.
inline Tensor regress_coordinates(const Model& m, const Tensor& fs) { return m.coord_head.forward(fs); }

// Map heads for the matching-vs-regression ablation. explicit matching scores
// (P1 F_s)(P2 F_q)^T / sqrt(d); token regression reads the map out of F_s.
inline Tensor similarity_map_head(const Model& m, const Tensor& fs, const Tensor& fq, HeadKind mode) {
    if (mode == HeadKind::matching) {
        const double s = 1.0 / std::sqrt(static_cast<double>(m.cfg.d_model));
        return scale(matmul(m.match_p1.forward(fs), transpose(m.match_p2.forward(fq))), s);
    }
    if (mode == HeadKind::map_regression) return m.map_head.forward(fs);
    throw std::invalid_argument("similarity_map_head: coordinate head has no map");
}

// Cell-center decode; ties resolve to the lowest flat index.
inline std::array<double, 2> decode_argmax(const std::vector<double>& map, int g) {
    if (static_cast<int>(map.size()) != g * g) throw std::invalid_argument("decode_argmax: size mismatch");
    int best = 0;
    for (int i = 1; i < g * g; ++i)
        if (map[i] > map[best]) best = i;
    const int r = best / g, c = best % g;
    return {(c + 0.5) / g, (r + 0.5) / g};
}

inline int coord_to_cell(const std::array<double, 2>& p, int g) {
    const int cx = std::clamp(static_cast<int>(p[0] * g), 0, g - 1);
    const int cy = std::clamp(static_cast<int>(p[1] * g), 0, g - 1);
    return cy * g + cx;
}

inline ForwardOutput model_forward(const Model& m, const Episode& ep, const ForwardOptions& opt) {
    const int K = m.cfg.k_max, g = m.cfg.grid(), nq = m.cfg.n_query_tokens(), d = m.cfg.d_model;
    if (ep.supports.empty()) throw std::invalid_argument("forward: episode has no supports");
    if (ep.k < 1 || ep.k > K) throw std::invalid_argument("forward: keypoint count outside [1, k_max]");
    (void)d;

    std::mt19937_64 drop_rng(mix_seed(opt.dropout_seed, 0x5ca9e));

    ForwardOutput out;
    out.record.enabled = opt.record_attention;

    // query tokens: features plus positional encoding
    Tensor fq = add(backbone_embed(m, ep.query), m.posenc);

    // support keypoint tokens: Gaussian-pooled local features, averaged over
    // the shots where the slot is visible; support context tokens mirror the
    // query token construction
    std::vector<int> vis_count(K, 0);
    for (const auto& s : ep.supports)
        for (int j = 0; j < ep.k; ++j)
            if (s.visibility[j]) ++vis_count[j];
    for (int j = 0; j < ep.k; ++j)
        if (vis_count[j] == 0) throw std::invalid_argument("forward: keypoint slot visible in no support");

    Tensor fs;
    Tensor support_ctx;
    for (const auto& s : ep.supports) {
        Tensor feat = backbone_embed(m, s);
        std::vector<double> row_scale(ep.k, 0.0);
        for (int j = 0; j < ep.k; ++j)
            if (s.visibility[j]) row_scale[j] = 1.0 / vis_count[j];
        Tensor w = extraction_weights(g, s.keypoints, m.cfg.token_sigma, K, row_scale);
        Tensor tok = matmul(w, feat);
        fs = fs.defined() ? add(fs, tok) : tok;
        Tensor ctx = add(feat, m.posenc);
        support_ctx = support_ctx.defined() ? concat_rows(support_ctx, ctx) : ctx;
    }

    std::vector<double> validd(K, 0.0);
    for (int i = 0; i < ep.k; ++i) validd[i] = 1.0;
    Tensor valid_vec = Tensor::leaf({K}, validd);
    if (m.cfg.use_identifiers) fs = add(fs, scale_rows(m.identifiers, valid_vec));

    fs = gkp_forward(m, fs, support_ctx, fq, valid_vec, &out.record);

    auto ir = interactor_forward(m, fs, fq, ep.k, opt, &out.record, drop_rng);

    // every annotated slot is supervised, occluded ones included; occlusion
    // only matters at evaluation time, where the metrics stratify on it
    BoolMask supervised(K, 0);
    std::vector<double> gt(static_cast<size_t>(K) * 2, 0.0);
    for (int j = 0; j < ep.k; ++j) {
        supervised[j] = 1;
        gt[j * 2 + 0] = ep.query.keypoints[j][0];
        gt[j * 2 + 1] = ep.query.keypoints[j][1];
    }

    if (m.lay.head == HeadKind::coordinate) {
        out.coords = regress_coordinates(m, ir.fs);
        if (opt.compute_loss) out.loss = l1_loss(out.coords, Tensor::leaf({K, 2}, gt), supervised);
    } else {
        out.maps = similarity_map_head(m, ir.fs, ir.fq, m.lay.head);
        if (opt.compute_loss) {
            std::vector<int> cells(K, 0);
            for (int j = 0; j < ep.k; ++j) cells[j] = coord_to_cell(ep.query.keypoints[j], g);
            out.loss = softmax_xent_rows(out.maps, cells, supervised);
        }
    }
    return out;
}

// Evaluation-time predictions: coordinate heads clamp raw outputs to [0,1],
// map heads decode the arg-max cell center.
inline std::vector<std::array<double, 2>> predict_coords(const Model& m, const Episode& ep,
                                                         uint64_t dropout_seed = 0) {
    ForwardOptions opt;
    opt.training = false;
    opt.dropout_seed = dropout_seed;
    opt.compute_loss = false;
    ForwardOutput out = model_forward(m, ep, opt);
    std::vector<std::array<double, 2>> coords(m.cfg.k_max, {0.0, 0.0});
    const int g = m.cfg.grid();
    for (int j = 0; j < m.cfg.k_max; ++j) {
        if (m.lay.head == HeadKind::coordinate) {
            coords[j] = {std::clamp(out.coords.at(j, 0), 0.0, 1.0), std::clamp(out.coords.at(j, 1), 0.0, 1.0)};
        } else {
            std::vector<double> row(out.maps.data().begin() + static_cast<size_t>(j) * g * g,
                                    out.maps.data().begin() + static_cast<size_t>(j + 1) * g * g);
            coords[j] = decode_argmax(row, g);
        }
    }
    return coords;
}

} // namespace scape
