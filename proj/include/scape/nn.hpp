#pragma once

// Reusable network blocks: linear layers, 2-layer MLPs, multi-head attention
// with optionally unshared Q/K projections per token segment, fixed sinusoidal
// 2-D positional encoding, and Adam with milestone lr decay.

#include "scape/tensor.hpp"
#include "scape/util.hpp"

#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace scape {

// Ordered name -> parameter map. Construction order defines both the
// initializer draw order and the checkpoint layout, so it must be stable.
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor>> params;
    std::mt19937_64 init_rng;

    explicit ParamRegistry(uint64_t seed) : init_rng(seed) {}

    Tensor uniform_param(const std::string& name, Shape shape, double bound) {
        std::vector<double> d(static_cast<size_t>(numel(shape)));
        for (auto& v : d) v = uniform_in(init_rng, -bound, bound);
        Tensor t = Tensor::leaf(std::move(shape), std::move(d), true);
        params.emplace_back(name, t);
        return t;
    }

    Tensor const_param(const std::string& name, Shape shape, double value) {
        Tensor t = Tensor::full(std::move(shape), value, true);
        params.emplace_back(name, t);
        return t;
    }

    Tensor find(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return t;
        throw std::out_of_range("no parameter named " + name);
    }

    void zero_all_grads() {
        for (auto& [n, t] : params) t.zero_grad();
    }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& [name, t] : params) n += t.data().size();
        return n;
    }

    // value copy from an identically laid out registry
    void copy_values_from(const ParamRegistry& src) {
        if (src.params.size() != params.size())
            throw std::invalid_argument("copy_values_from: registry layout mismatch");
        for (size_t i = 0; i < params.size(); ++i) {
            if (params[i].first != src.params[i].first ||
                params[i].second.shape() != src.params[i].second.shape())
                throw std::invalid_argument("copy_values_from: parameter mismatch at " + params[i].first);
            params[i].second.data() = src.params[i].second.data();
        }
    }
};

struct Linear {
    Tensor W; // [d_in x d_out]
    Tensor b; // [d_out]

    Linear() = default;
    Linear(ParamRegistry& reg, const std::string& name, int d_in, int d_out) {
        const double bound = std::sqrt(1.0 / d_in);
        W = reg.uniform_param(name + ".W", {d_in, d_out}, bound);
        b = reg.const_param(name + ".b", {d_out}, 0.0);
    }

    Tensor forward(const Tensor& x) const { return add_bias(matmul(x, W), b); }
};

// linear -> ReLU -> linear
struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(ParamRegistry& reg, const std::string& name, int d_in, int hidden, int d_out)
        : fc1(reg, name + ".fc1", d_in, hidden), fc2(reg, name + ".fc2", hidden, d_out) {}

    Tensor forward(const Tensor& x) const { return fc2.forward(relu(fc1.forward(x))); }
};

enum class KvSource { self_tokens, cross_tokens };

struct AttentionConfig {
    int d_model = 0;
    int n_heads = 1;
    bool unshared_qk = false;
    KvSource kv_source = KvSource::self_tokens;
    double dropout_p = 0.0;

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
            throw std::invalid_argument("attention: d_model must be divisible by n_heads");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw std::invalid_argument("attention: dropout_p must be in [0,1)");
    }
};

// Receives one head's pre-softmax logit block and returns the (possibly
// modified) block. KAR and the keypoint-masking experiment both attach here.
using LogitHook = std::function<Tensor(const Tensor& logits, int head)>;

struct MultiHeadAttention {
    AttentionConfig cfg;
    Linear q1, k1; // shared path, or segment 1 (keypoint tokens)
    Linear q2, k2; // segment 2 (image tokens) when unshared_qk
    Linear v, o;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamRegistry& reg, const std::string& name, const AttentionConfig& c) : cfg(c) {
        cfg.validate();
        q1 = Linear(reg, name + ".q1", cfg.d_model, cfg.d_model);
        k1 = Linear(reg, name + ".k1", cfg.d_model, cfg.d_model);
        if (cfg.unshared_qk) {
            q2 = Linear(reg, name + ".q2", cfg.d_model, cfg.d_model);
            k2 = Linear(reg, name + ".k2", cfg.d_model, cfg.d_model);
        }
        v = Linear(reg, name + ".v", cfg.d_model, cfg.d_model);
        o = Linear(reg, name + ".o", cfg.d_model, cfg.d_model);
    }

    struct Result {
        Tensor out;                // [a x d_model]
        std::vector<Tensor> attn;  // per head, post-softmax [a x b]
    };

    // q_split / kv_split give the boundary between the keypoint segment and
    // the image segment when unshared_qk is on (0 or a/b count as "one segment").
    Result forward(const Tensor& q_tokens, const Tensor& kv_tokens, int q_split, int kv_split,
                   const LogitHook& hook = nullptr, const BoolMask* mask = nullptr) const {
        const int a = q_tokens.rows(), b = kv_tokens.rows();
        const int d = cfg.d_model, h = cfg.n_heads, dh = d / h;
        if (q_tokens.cols() != d || kv_tokens.cols() != d)
            throw std::invalid_argument("attention: token width must equal d_model");
        if (q_split < 0 || q_split > a || kv_split < 0 || kv_split > b)
            throw std::invalid_argument("attention: split index out of range");

        Tensor Q, K;
        if (cfg.unshared_qk) {
            Q = project_segmented(q_tokens, q_split, q1, q2);
            K = project_segmented(kv_tokens, kv_split, k1, k2);
        } else {
            Q = q1.forward(q_tokens);
            K = k1.forward(kv_tokens);
        }
        Tensor V = v.forward(kv_tokens);

        const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> ctx(h), maps(h);
        for (int head = 0; head < h; ++head) {
            Tensor qh = slice_cols(Q, head * dh, (head + 1) * dh);
            Tensor kh = slice_cols(K, head * dh, (head + 1) * dh);
            Tensor vh = slice_cols(V, head * dh, (head + 1) * dh);
            Tensor logits = scale(matmul(qh, transpose(kh)), scl);
            if (hook) logits = hook(logits, head);
            Tensor attn = softmax_rows(logits, mask);
            maps[head] = attn;
            ctx[head] = matmul(attn, vh);
        }
        Tensor merged = h == 1 ? ctx[0] : concat_cols(ctx);
        return {o.forward(merged), std::move(maps)};
    }

private:
    static Tensor project_segmented(const Tensor& tokens, int split, const Linear& seg1, const Linear& seg2) {
        if (split <= 0) return seg2.forward(tokens);
        if (split >= tokens.rows()) return seg1.forward(tokens);
        Tensor top = seg1.forward(slice_rows(tokens, 0, split));
        Tensor bot = seg2.forward(slice_rows(tokens, split, tokens.rows()));
        return concat_rows(top, bot);
    }
};

// Fixed sinusoidal encoding on an h x w grid: first half of the channels
// encodes the row index, second half the column index.
inline Tensor positional_encoding_2d(int h, int w, int d) {
    if (d % 4 != 0) throw std::invalid_argument("positional_encoding_2d: d must be divisible by 4");
    const int quarter = d / 4;
    std::vector<double> enc(static_cast<size_t>(h) * w * d);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double* row = enc.data() + (static_cast<size_t>(r) * w + c) * d;
            for (int i = 0; i < quarter; ++i) {
                const double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
                row[i] = std::sin(r * omega);
                row[quarter + i] = std::cos(r * omega);
                row[2 * quarter + i] = std::sin(c * omega);
                row[3 * quarter + i] = std::cos(c * omega);
            }
        }
    return Tensor::leaf({h * w, d}, std::move(enc));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::vector<std::vector<double>> m, v;

    explicit AdamState(const ParamRegistry& reg, double learning_rate = 2e-4) : lr(learning_rate) {
        m.reserve(reg.params.size());
        v.reserve(reg.params.size());
        for (const auto& [name, t] : reg.params) {
            m.emplace_back(t.data().size(), 0.0);
            v.emplace_back(t.data().size(), 0.0);
        }
    }
};

// Bias-corrected Adam update in place; gradients are left untouched.
inline void adam_step(ParamRegistry& reg, AdamState& st) {
    if (st.m.size() != reg.params.size()) throw std::invalid_argument("adam_step: state/registry mismatch");
    ++st.step_count;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
    for (size_t p = 0; p < reg.params.size(); ++p) {
        Tensor& t = reg.params[p].second;
        const auto& g = t.grad();
        if (g.size() != st.m[p].size()) throw std::invalid_argument("adam_step: gradient shape mismatch");
        auto& mp = st.m[p];
        auto& vp = st.v[p];
        auto& val = t.data();
        for (size_t i = 0; i < g.size(); ++i) {
            mp[i] = st.beta1 * mp[i] + (1.0 - st.beta1) * g[i];
            vp[i] = st.beta2 * vp[i] + (1.0 - st.beta2) * g[i] * g[i];
            const double mhat = mp[i] / bc1;
            const double vhat = vp[i] / bc2;
            val[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// Step decay with milestones at the 140/180 and 170/180 fractions of the
// configured run length.
inline double lr_schedule(int epoch, int total_epochs, double base_lr) {
    if (total_epochs <= 0) throw std::invalid_argument("lr_schedule: total_epochs must be positive");
    const int m1 = static_cast<int>(std::lround(total_epochs * 140.0 / 180.0));
    const int m2 = static_cast<int>(std::lround(total_epochs * 170.0 / 180.0));
    double lr = base_lr;
    if (epoch >= m1) lr *= 0.1;
    if (epoch >= m2) lr *= 0.1;
    return lr;
}

} // namespace scape
