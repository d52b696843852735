#pragma once

// Dense f64 tensors with reverse-mode gradients on a per-thread tape.
// Every op records a closure with its local gradient rule; backward walks
// the tape once in reverse. Ops are coarse (matmul, softmax, layernorm, ...)
// so the tape stays short and the arithmetic stays in tight loops.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scape {

using Shape = std::vector<int>;
using BoolMask = std::vector<uint8_t>;

inline int numel(const Shape& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {
inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
}
} // namespace detail

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until touched by autograd
    bool requires_grad = false;
    uint64_t id = 0;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != static_cast<int>(data.size()))
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        for (int d : shape)
            if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        t.node_->id = detail::next_node_id();
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel(shape)), 0.0);
        return leaf(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel(shape)), v);
        return leaf(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double v) { return leaf({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int size() const { return static_cast<int>(node_->value.size()); }
    int rows() const { return node_->shape.at(0); }
    int cols() const { return node_->shape.size() >= 2 ? node_->shape.at(1) : 1; }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }

    double item() const {
        if (size() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
        return node_->value[0];
    }
    double at(int i) const { return node_->value[static_cast<size_t>(i)]; }
    double at(int r, int c) const { return node_->value[static_cast<size_t>(r) * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    uint64_t node_id() const { return node_->id; }
    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct TapeEntry {
    std::vector<uint64_t> input_ids;
    uint64_t output_id = 0;
    std::function<void()> backward;
};

class Tape {
public:
    Tape() : prev_(active_ptr()) { active_ptr() = this; }
    ~Tape() { active_ptr() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ptr(); }

    void record(std::vector<uint64_t> inputs, uint64_t output, std::function<void()> fn) {
        entries_.push_back({std::move(inputs), output, std::move(fn)});
    }

    size_t size() const { return entries_.size(); }
    const TapeEntry& entry(size_t i) const { return entries_[i]; }

    void run_backward() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    }

private:
    static Tape*& active_ptr() {
        thread_local Tape* active = nullptr;
        return active;
    }
    std::vector<TapeEntry> entries_;
    Tape* prev_ = nullptr;
};

namespace detail {

inline bool track(const std::initializer_list<Tensor>& inputs) {
    if (Tape::active() == nullptr) return false;
    for (const auto& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

inline Tensor make_output(Shape shape, std::vector<double> value, bool requires_grad) {
    return Tensor::leaf(std::move(shape), std::move(value), requires_grad);
}

inline void record(const std::initializer_list<Tensor>& inputs, const Tensor& out, std::function<void()> fn) {
    std::vector<uint64_t> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(t.node_id());
    Tape::active()->record(std::move(ids), out.node_id(), std::move(fn));
}

// null when the output was never part of a path to the loss
inline const std::vector<double>* out_grad(const std::shared_ptr<TensorNode>& n) {
    if (n->grad.size() != n->value.size()) return nullptr;
    return &n->grad;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline void check_2d(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int i = 0; i < m; ++i) {
        double* pc = c.data() + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = pa[static_cast<size_t>(i) * k + p];
            if (aip == 0.0) continue;
            const double* pbr = pb + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) pc[j] += aip * pbr[j];
        }
    }
    const bool rg = detail::track({a, b});
    Tensor out = detail::make_output({m, n}, std::move(c), rg);
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::record({a, b}, out, [an, bn, on, m, k, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            const double* pg = g->data();
            if (an->requires_grad) {
                an->ensure_grad();
                double* da = an->grad.data();
                const double* pb = bn->value.data();
                // dA = dC * B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* gr = pg + static_cast<size_t>(i) * n;
                        const double* br = pb + static_cast<size_t>(p) * n;
                        for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
                        da[static_cast<size_t>(i) * k + p] += acc;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* db = bn->grad.data();
                const double* pa = an->value.data();
                // dB = A^T * dC
                for (int i = 0; i < m; ++i) {
                    const double* ar = pa + static_cast<size_t>(i) * k;
                    const double* gr = pg + static_cast<size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const double aip = ar[p];
                        if (aip == 0.0) continue;
                        double* dbr = db + static_cast<size_t>(p) * n;
                        for (int j = 0; j < n; ++j) dbr[j] += aip * gr[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    check_2d(x, "transpose");
    const int m = x.rows(), n = x.cols();
    std::vector<double> y(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y[static_cast<size_t>(j) * m + i] = x.at(i, j);
    const bool rg = detail::track({x});
    Tensor out = detail::make_output({n, m}, std::move(y), rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on, m, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    xn->grad[static_cast<size_t>(i) * n + j] += (*g)[static_cast<size_t>(j) * m + i];
        });
    }
    return out;
}

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_same_shape(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    std::vector<double> y(a.data().size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = fwd(a.data()[i], b.data()[i]);
    const bool rg = track({a, b});
    Tensor out = make_output(a.shape(), std::move(y), rg);
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        record({a, b}, out, [an, bn, on, bwd] {
            const auto* g = out_grad(on);
            if (!g) return;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (size_t i = 0; i < g->size(); ++i) {
                auto [da, db] = bwd(an->value[i], bn->value[i], (*g)[i]);
                if (an->requires_grad) an->grad[i] += da;
                if (bn->requires_grad) bn->grad[i] += db;
            }
        });
    }
    return out;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_same_shape(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double g) { return std::pair<double, double>(g, g); });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_same_shape(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double g) { return std::pair<double, double>(g, -g); });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_same_shape(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g) { return std::pair<double, double>(g * y, g * x); });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> y(x.data().size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * c;
    const bool rg = detail::track({x});
    Tensor out = detail::make_output(x.shape(), std::move(y), rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on, c] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            for (size_t i = 0; i < g->size(); ++i) xn->grad[i] += c * (*g)[i];
        });
    }
    return out;
}

inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    check_2d(x, "add_bias");
    if (b.size() != x.cols())
        throw std::invalid_argument("add_bias: bias length " + shape_str(b.shape()) + " does not match " +
                                    shape_str(x.shape()));
    const int m = x.rows(), n = x.cols();
    std::vector<double> y(x.data().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y[static_cast<size_t>(i) * n + j] = x.at(i, j) + b.at(j);
    const bool rg = detail::track({x, b});
    Tensor out = detail::make_output(x.shape(), std::move(y), rg);
    if (rg) {
        auto xn = x.node(), bn = b.node(), on = out.node();
        detail::record({x, b}, out, [xn, bn, on, m, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < g->size(); ++i) xn->grad[i] += (*g)[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) bn->grad[j] += (*g)[static_cast<size_t>(i) * n + j];
            }
        });
    }
    return out;
}

// gradient convention at x == 0: subgradient 0
inline Tensor relu(const Tensor& x) {
    std::vector<double> y(x.data().size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    const bool rg = detail::track({x});
    Tensor out = detail::make_output(x.shape(), std::move(y), rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            for (size_t i = 0; i < g->size(); ++i)
                if (xn->value[i] > 0.0) xn->grad[i] += (*g)[i];
        });
    }
    return out;
}

// Row softmax with optional keep-mask. Masked cells are exactly zero in the
// output; the max-subtraction never sees masked entries, so no -inf arithmetic.
inline Tensor softmax_rows(const Tensor& x, const BoolMask* mask = nullptr) {
    check_2d(x, "softmax_rows");
    const int m = x.rows(), n = x.cols();
    if (mask && static_cast<int>(mask->size()) != m * n)
        throw std::invalid_argument("softmax_rows: mask size " + std::to_string(mask->size()) +
                                    " does not match " + shape_str(x.shape()));
    std::vector<double> y(x.data().size(), 0.0);
    for (int i = 0; i < m; ++i) {
        const size_t off = static_cast<size_t>(i) * n;
        double mx = -std::numeric_limits<double>::infinity();
        int kept = 0;
        for (int j = 0; j < n; ++j) {
            if (mask && !(*mask)[off + j]) continue;
            mx = std::max(mx, x.data()[off + j]);
            ++kept;
        }
        if (kept == 0)
            throw std::invalid_argument("softmax_rows: row " + std::to_string(i) + " is fully masked");
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            if (mask && !(*mask)[off + j]) continue;
            y[off + j] = std::exp(x.data()[off + j] - mx);
            sum += y[off + j];
        }
        for (int j = 0; j < n; ++j) y[off + j] /= sum;
    }
    const bool rg = detail::track({x});
    Tensor out = detail::make_output(x.shape(), std::move(y), rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on, m, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const size_t off = static_cast<size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += (*g)[off + j] * on->value[off + j];
                for (int j = 0; j < n; ++j)
                    xn->grad[off + j] += on->value[off + j] * ((*g)[off + j] - dot);
            }
        });
    }
    return out;
}

// Normalizes the last axis; gamma/beta have that axis's length.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.shape().empty()) throw std::invalid_argument("layer_norm: scalar input");
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    const int d = x.shape().back();
    if (gamma.size() != d || beta.size() != d)
        throw std::invalid_argument("layer_norm: gamma/beta length must be " + std::to_string(d));
    const int rows = x.size() / d;
    std::vector<double> y(x.data().size());
    std::vector<double> xhat(x.data().size());
    std::vector<double> inv_sd(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += x.data()[off + j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = x.data()[off + j] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_sd[r] = inv;
        for (int j = 0; j < d; ++j) {
            xhat[off + j] = (x.data()[off + j] - mean) * inv;
            y[off + j] = gamma.at(j) * xhat[off + j] + beta.at(j);
        }
    }
    const bool rg = detail::track({x, gamma, beta});
    Tensor out = detail::make_output(x.shape(), std::move(y), rg);
    if (rg) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        detail::record({x, gamma, beta}, out,
                       [xn, gn, bn, on, rows, d, xhat = std::move(xhat), inv_sd = std::move(inv_sd)] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const size_t off = static_cast<size_t>(r) * d;
                if (gn->requires_grad || bn->requires_grad) {
                    for (int j = 0; j < d; ++j) {
                        if (gn->requires_grad) gn->grad[j] += (*g)[off + j] * xhat[off + j];
                        if (bn->requires_grad) bn->grad[j] += (*g)[off + j];
                    }
                }
                if (xn->requires_grad) {
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double h = (*g)[off + j] * gn->value[j];
                        mean_h += h;
                        mean_hx += h * xhat[off + j];
                    }
                    mean_h /= d;
                    mean_hx /= d;
                    for (int j = 0; j < d; ++j) {
                        const double h = (*g)[off + j] * gn->value[j];
                        xn->grad[off + j] += inv_sd[r] * (h - mean_h - xhat[off + j] * mean_hx);
                    }
                }
            }
        });
    }
    return out;
}

// Inverted dropout. p == 0 or eval mode returns the input tensor unchanged.
inline Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    const double keep = 1.0 - p;
    std::vector<uint8_t> mask(x.data().size());
    std::vector<double> y(x.data().size());
    for (size_t i = 0; i < y.size(); ++i) {
        // top 53 bits -> uniform [0,1)
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        mask[i] = u >= p ? 1 : 0;
        y[i] = mask[i] ? x.data()[i] / keep : 0.0;
    }
    const bool rg = detail::track({x});
    Tensor out = detail::make_output(x.shape(), std::move(y), rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on, keep, mask = std::move(mask)] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            for (size_t i = 0; i < g->size(); ++i)
                if (mask[i]) xn->grad[i] += (*g)[i] / keep;
        });
    }
    return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check_2d(a, "concat_rows");
    check_2d(b, "concat_rows");
    if (a.cols() != b.cols())
        throw std::invalid_argument("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int ma = a.rows(), mb = b.rows(), n = a.cols();
    std::vector<double> y;
    y.reserve(a.data().size() + b.data().size());
    y.insert(y.end(), a.data().begin(), a.data().end());
    y.insert(y.end(), b.data().begin(), b.data().end());
    const bool rg = detail::track({a, b});
    Tensor out = detail::make_output({ma + mb, n}, std::move(y), rg);
    if (rg) {
        auto an = a.node(), bn = b.node(), on = out.node();
        detail::record({a, b}, out, [an, bn, on, ma, mb, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < static_cast<size_t>(ma) * n; ++i) an->grad[i] += (*g)[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                const size_t off = static_cast<size_t>(ma) * n;
                for (size_t i = 0; i < static_cast<size_t>(mb) * n; ++i) bn->grad[i] += (*g)[off + i];
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
    check_2d(x, "slice_rows");
    if (r0 < 0 || r1 > x.rows() || r0 >= r1)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                    ") out of " + shape_str(x.shape()));
    const int n = x.cols(), m = r1 - r0;
    std::vector<double> y(x.data().begin() + static_cast<size_t>(r0) * n,
                          x.data().begin() + static_cast<size_t>(r1) * n);
    const bool rg = detail::track({x});
    Tensor out = detail::make_output({m, n}, std::move(y), rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on, r0, m, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            const size_t off = static_cast<size_t>(r0) * n;
            for (size_t i = 0; i < static_cast<size_t>(m) * n; ++i) xn->grad[off + i] += (*g)[i];
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    check_2d(x, "slice_cols");
    if (c0 < 0 || c1 > x.cols() || c0 >= c1)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                    ") out of " + shape_str(x.shape()));
    const int m = x.rows(), n = x.cols(), w = c1 - c0;
    std::vector<double> y(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) y[static_cast<size_t>(i) * w + j] = x.at(i, c0 + j);
    const bool rg = detail::track({x});
    Tensor out = detail::make_output({m, w}, std::move(y), rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on, m, n, c0, w] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    xn->grad[static_cast<size_t>(i) * n + c0 + j] += (*g)[static_cast<size_t>(i) * w + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty list");
    const int m = parts[0].rows();
    int n = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_cols");
        if (p.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
        n += p.cols();
    }
    std::vector<double> y(static_cast<size_t>(m) * n);
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) y[static_cast<size_t>(i) * n + c0 + j] = p.at(i, j);
        c0 += w;
    }
    bool rg = false;
    if (Tape::active())
        for (const auto& p : parts)
            if (p.requires_grad()) rg = true;
    Tensor out = detail::make_output({m, n}, std::move(y), rg);
    if (rg) {
        std::vector<std::shared_ptr<TensorNode>> nodes;
        std::vector<uint64_t> ids;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            ids.push_back(p.node_id());
        }
        auto on = out.node();
        Tape::active()->record(std::move(ids), out.node_id(), [nodes = std::move(nodes), on, m, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            int c0 = 0;
            for (auto& pn : nodes) {
                const int w = static_cast<int>(pn->value.size()) / m;
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            pn->grad[static_cast<size_t>(i) * w + j] += (*g)[static_cast<size_t>(i) * n + c0 + j];
                }
                c0 += w;
            }
        });
    }
    return out;
}

// y[i,j] = x[i,j] * s[i]
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
    check_2d(x, "scale_rows");
    if (s.size() != x.rows())
        throw std::invalid_argument("scale_rows: scale length " + std::to_string(s.size()) + " vs rows " +
                                    std::to_string(x.rows()));
    const int m = x.rows(), n = x.cols();
    std::vector<double> y(x.data().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y[static_cast<size_t>(i) * n + j] = x.at(i, j) * s.at(i);
    const bool rg = detail::track({x, s});
    Tensor out = detail::make_output(x.shape(), std::move(y), rg);
    if (rg) {
        auto xn = x.node(), sn = s.node(), on = out.node();
        detail::record({x, s}, out, [xn, sn, on, m, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            if (xn->requires_grad) xn->ensure_grad();
            if (sn->requires_grad) sn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const size_t off = static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    if (xn->requires_grad) xn->grad[off + j] += (*g)[off + j] * sn->value[i];
                    if (sn->requires_grad) sn->grad[i] += (*g)[off + j] * xn->value[off + j];
                }
            }
        });
    }
    return out;
}

// y[i,j] = x[i,j] * s[j]
inline Tensor scale_cols(const Tensor& x, const Tensor& s) {
    check_2d(x, "scale_cols");
    if (s.size() != x.cols())
        throw std::invalid_argument("scale_cols: scale length " + std::to_string(s.size()) + " vs cols " +
                                    std::to_string(x.cols()));
    const int m = x.rows(), n = x.cols();
    std::vector<double> y(x.data().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y[static_cast<size_t>(i) * n + j] = x.at(i, j) * s.at(j);
    const bool rg = detail::track({x, s});
    Tensor out = detail::make_output(x.shape(), std::move(y), rg);
    if (rg) {
        auto xn = x.node(), sn = s.node(), on = out.node();
        detail::record({x, s}, out, [xn, sn, on, m, n] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            if (xn->requires_grad) xn->ensure_grad();
            if (sn->requires_grad) sn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const size_t off = static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    if (xn->requires_grad) xn->grad[off + j] += (*g)[off + j] * sn->value[j];
                    if (sn->requires_grad) sn->grad[j] += (*g)[off + j] * xn->value[off + j];
                }
            }
        });
    }
    return out;
}

// embeds x at (0,0) of an R x C zero matrix
inline Tensor pad_block(const Tensor& x, int R, int C) {
    check_2d(x, "pad_block");
    if (x.rows() > R || x.cols() > C)
        throw std::invalid_argument("pad_block: " + shape_str(x.shape()) + " does not fit in [" +
                                    std::to_string(R) + "x" + std::to_string(C) + "]");
    const int m = x.rows(), n = x.cols();
    std::vector<double> y(static_cast<size_t>(R) * C, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y[static_cast<size_t>(i) * C + j] = x.at(i, j);
    const bool rg = detail::track({x});
    Tensor out = detail::make_output({R, C}, std::move(y), rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on, m, n, C] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    xn->grad[static_cast<size_t>(i) * n + j] += (*g)[static_cast<size_t>(i) * C + j];
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    const bool rg = detail::track({x});
    Tensor out = detail::make_output({1}, {s}, rg);
    if (rg) {
        auto xn = x.node(), on = out.node();
        detail::record({x}, out, [xn, on] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            xn->ensure_grad();
            for (double& d : xn->grad) d += (*g)[0];
        });
    }
    return out;
}

// Mean absolute error over both coordinates of the visible keypoints.
inline Tensor l1_loss(const Tensor& pred, const Tensor& target, const BoolMask& visibility) {
    check_2d(pred, "l1_loss");
    if (pred.shape() != target.shape())
        throw std::invalid_argument("l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                    shape_str(target.shape()));
    if (pred.cols() != 2) throw std::invalid_argument("l1_loss: expected k x 2 coordinates");
    if (static_cast<int>(visibility.size()) != pred.rows())
        throw std::invalid_argument("l1_loss: visibility length mismatch");
    int nvis = 0;
    for (uint8_t v : visibility) nvis += v ? 1 : 0;
    if (nvis == 0) throw std::invalid_argument("l1_loss: no visible keypoints");
    const int k = pred.rows();
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
        if (!visibility[i]) continue;
        acc += std::abs(pred.at(i, 0) - target.at(i, 0));
        acc += std::abs(pred.at(i, 1) - target.at(i, 1));
    }
    const double denom = 2.0 * nvis;
    const bool rg = detail::track({pred, target});
    Tensor out = detail::make_output({1}, {acc / denom}, rg);
    if (rg) {
        auto pn = pred.node(), tn = target.node(), on = out.node();
        detail::record({pred, target}, out, [pn, tn, on, k, denom, visibility] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            const double go = (*g)[0] / denom;
            if (pn->requires_grad) pn->ensure_grad();
            if (tn->requires_grad) tn->ensure_grad();
            for (int i = 0; i < k; ++i) {
                if (!visibility[i]) continue;
                for (int c = 0; c < 2; ++c) {
                    const double diff = pn->value[static_cast<size_t>(i) * 2 + c] -
                                        tn->value[static_cast<size_t>(i) * 2 + c];
                    const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                    if (pn->requires_grad) pn->grad[static_cast<size_t>(i) * 2 + c] += go * s;
                    if (tn->requires_grad) tn->grad[static_cast<size_t>(i) * 2 + c] -= go * s;
                }
            }
        });
    }
    return out;
}

// Per-row softmax cross-entropy against a target cell, averaged over active rows.
inline Tensor softmax_xent_rows(const Tensor& logits, const std::vector<int>& target_cells,
                                const BoolMask& row_mask) {
    check_2d(logits, "softmax_xent_rows");
    const int m = logits.rows(), n = logits.cols();
    if (static_cast<int>(target_cells.size()) != m || static_cast<int>(row_mask.size()) != m)
        throw std::invalid_argument("softmax_xent_rows: per-row metadata length mismatch");
    int active = 0;
    for (int i = 0; i < m; ++i)
        if (row_mask[i]) {
            if (target_cells[i] < 0 || target_cells[i] >= n)
                throw std::invalid_argument("softmax_xent_rows: target cell out of range");
            ++active;
        }
    if (active == 0) throw std::invalid_argument("softmax_xent_rows: no active rows");
    std::vector<double> probs(logits.data().size(), 0.0);
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        if (!row_mask[i]) continue;
        const size_t off = static_cast<size_t>(i) * n;
        double mx = logits.data()[off];
        for (int j = 1; j < n; ++j) mx = std::max(mx, logits.data()[off + j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            probs[off + j] = std::exp(logits.data()[off + j] - mx);
            sum += probs[off + j];
        }
        for (int j = 0; j < n; ++j) probs[off + j] /= sum;
        loss += std::log(sum) + mx - logits.data()[off + target_cells[i]];
    }
    loss /= active;
    const bool rg = detail::track({logits});
    Tensor out = detail::make_output({1}, {loss}, rg);
    if (rg) {
        auto ln = logits.node(), on = out.node();
        detail::record({logits}, out,
                       [ln, on, m, n, active, target_cells, row_mask, probs = std::move(probs)] {
            const auto* g = detail::out_grad(on);
            if (!g) return;
            ln->ensure_grad();
            const double go = (*g)[0] / active;
            for (int i = 0; i < m; ++i) {
                if (!row_mask[i]) continue;
                const size_t off = static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    double d = probs[off + j];
                    if (j == target_cells[i]) d -= 1.0;
                    ln->grad[off + j] += go * d;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward and gradient checking
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    Tape* tape = Tape::active();
    if (!tape) throw std::logic_error("backward: no active tape on this thread");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    tape->run_backward();
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

// Max over components of |analytic - central difference| / max(1, |analytic|, |numeric|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double h) {
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor loss = f(x);
        if (loss.size() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
        if (!all_finite(loss)) throw std::runtime_error("grad_check: f(x) is not finite");
        x.zero_grad();
        backward(loss);
        analytic = x.grad();
        x.zero_grad();
    }
    double worst = 0.0;
    for (size_t i = 0; i < x.data().size(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + h;
        const double fp = f(x).item();
        x.data()[i] = orig - h;
        const double fm = f(x).item();
        x.data()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

} // namespace scape
