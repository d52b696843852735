#include <catch2/catch_amalgamated.hpp>

#include "scape/nn.hpp"

#include <cmath>
#include <set>

using namespace scape;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<size_t>(numel(shape)));
    for (auto& v : d) v = uniform_in(rng, lo, hi);
    return Tensor::leaf(std::move(shape), std::move(d));
}

void zero_params(Linear& l) {
    std::fill(l.W.data().begin(), l.W.data().end(), 0.0);
    std::fill(l.b.data().begin(), l.b.data().end(), 0.0);
}

// unbatched reference attention used as the oracle, no shared code with the
// implementation beyond the raw weight values
std::vector<double> reference_attention(const MultiHeadAttention& mha, const Tensor& x) {
    const int a = x.rows(), d = mha.cfg.d_model, h = mha.cfg.n_heads, dh = d / h;
    auto lin = [&](const Linear& l, const Tensor& in) {
        std::vector<double> out(static_cast<size_t>(in.rows()) * d, 0.0);
        for (int i = 0; i < in.rows(); ++i)
            for (int j = 0; j < d; ++j) {
                double acc = l.b.at(j);
                for (int p = 0; p < d; ++p) acc += in.at(i, p) * l.W.at(p, j);
                out[i * d + j] = acc;
            }
        return out;
    };
    auto Q = lin(mha.q1, x), K = lin(mha.k1, x), V = lin(mha.v, x);
    std::vector<double> merged(static_cast<size_t>(a) * d, 0.0);
    for (int head = 0; head < h; ++head) {
        for (int i = 0; i < a; ++i) {
            std::vector<double> logits(a);
            for (int j = 0; j < a; ++j) {
                double acc = 0.0;
                for (int c = 0; c < dh; ++c) acc += Q[i * d + head * dh + c] * K[j * d + head * dh + c];
                logits[j] = acc / std::sqrt(static_cast<double>(dh));
            }
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            double denom = 0.0;
            for (double& v : logits) {
                v = std::exp(v - mx);
                denom += v;
            }
            for (int j = 0; j < a; ++j)
                for (int c = 0; c < dh; ++c)
                    merged[i * d + head * dh + c] += logits[j] / denom * V[j * d + head * dh + c];
        }
    }
    Tensor m = Tensor::leaf({a, d}, merged);
    return lin(mha.o, m);
}

} // namespace

TEST_CASE("mlp zero weights give zero output") {
    ParamRegistry reg(1);
    Mlp mlp(reg, "m", 6, 3, 6);
    zero_params(mlp.fc1);
    zero_params(mlp.fc2);
    std::mt19937_64 rng(2);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor y = mlp.forward(x);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("mlp follows the K -> K/2 -> K width convention used by attention filters") {
    const int k_max = 100;
    ParamRegistry reg(1);
    Mlp af(reg, "af", k_max, k_max / 2, k_max);
    CHECK(af.fc1.W.shape() == Shape{100, 50});
    CHECK(af.fc2.W.shape() == Shape{50, 100});
}

TEST_CASE("mlp matches hand-composed matmul/relu oracle") {
    ParamRegistry reg(3);
    Mlp mlp(reg, "m", 5, 7, 4);
    std::mt19937_64 rng(4);
    Tensor x = random_tensor({3, 5}, rng);
    Tensor want = add_bias(matmul(relu(add_bias(matmul(x, mlp.fc1.W), mlp.fc1.b)), mlp.fc2.W), mlp.fc2.b);
    Tensor got = mlp.forward(x);
    for (int i = 0; i < got.size(); ++i) CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-12);
}

TEST_CASE("attention with a single key/value token ignores the query") {
    ParamRegistry reg(5);
    AttentionConfig cfg{.d_model = 8, .n_heads = 2};
    MultiHeadAttention mha(reg, "a", cfg);
    std::mt19937_64 rng(6);
    Tensor kv = random_tensor({1, 8}, rng);
    Tensor q_a = random_tensor({3, 8}, rng);
    Tensor q_b = random_tensor({3, 8}, rng);
    auto ra = mha.forward(q_a, kv, 0, 0);
    auto rb = mha.forward(q_b, kv, 0, 0);
    Tensor vo = mha.o.forward(mha.v.forward(kv));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 8; ++j) {
            CHECK(ra.out.at(i, j) == Catch::Approx(vo.at(0, j)).margin(1e-12));
            CHECK(ra.out.at(i, j) == rb.out.at(i, j));
        }
}

TEST_CASE("zero query weights give the mean of the value projections") {
    ParamRegistry reg(7);
    AttentionConfig cfg{.d_model = 8, .n_heads = 2};
    MultiHeadAttention mha(reg, "a", cfg);
    zero_params(mha.q1);
    std::mt19937_64 rng(8);
    Tensor x = random_tensor({5, 8}, rng);
    auto r = mha.forward(x, x, 0, 0);
    Tensor vx = mha.v.forward(x);
    std::vector<double> mean_row(8, 0.0);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 8; ++j) mean_row[j] += vx.at(i, j) / 5.0;
    Tensor want = mha.o.forward(Tensor::leaf({1, 8}, mean_row));
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 8; ++j) CHECK(r.out.at(i, j) == Catch::Approx(want.at(0, j)).margin(1e-12));
}

TEST_CASE("attention matches single-loop reference oracle") {
    ParamRegistry reg(9);
    AttentionConfig cfg{.d_model = 6, .n_heads = 2};
    MultiHeadAttention mha(reg, "a", cfg);
    std::mt19937_64 rng(10);
    Tensor x = random_tensor({3, 6}, rng);
    auto got = mha.forward(x, x, 0, 0);
    auto want = reference_attention(mha, x);
    for (int i = 0; i < got.out.size(); ++i) CHECK(std::abs(got.out.data()[i] - want[i]) < 1e-10);
}

TEST_CASE("identity logit hook is bitwise identical to no hook") {
    ParamRegistry reg(11);
    AttentionConfig cfg{.d_model = 8, .n_heads = 2};
    MultiHeadAttention mha(reg, "a", cfg);
    std::mt19937_64 rng(12);
    Tensor x = random_tensor({4, 8}, rng);
    auto plain = mha.forward(x, x, 0, 0);
    auto hooked = mha.forward(x, x, 0, 0, [](const Tensor& l, int) { return l; });
    for (int i = 0; i < plain.out.size(); ++i) CHECK(plain.out.data()[i] == hooked.out.data()[i]);
    for (int h = 0; h < 2; ++h)
        for (int i = 0; i < plain.attn[h].size(); ++i)
            CHECK(plain.attn[h].data()[i] == hooked.attn[h].data()[i]);
}

TEST_CASE("unshared projections with tied weights equal the shared path bitwise") {
    ParamRegistry reg(13);
    AttentionConfig shared_cfg{.d_model = 8, .n_heads = 2, .unshared_qk = false};
    AttentionConfig unshared_cfg{.d_model = 8, .n_heads = 2, .unshared_qk = true};
    MultiHeadAttention shared(reg, "s", shared_cfg);
    MultiHeadAttention unshared(reg, "u", unshared_cfg);
    // tie every projection to the shared module's weights
    unshared.q1.W.data() = shared.q1.W.data();
    unshared.q2.W.data() = shared.q1.W.data();
    unshared.k1.W.data() = shared.k1.W.data();
    unshared.k2.W.data() = shared.k1.W.data();
    unshared.v.W.data() = shared.v.W.data();
    unshared.o.W.data() = shared.o.W.data();
    std::mt19937_64 rng(14);
    Tensor x = random_tensor({6, 8}, rng);
    auto a = shared.forward(x, x, 0, 0);
    auto b = unshared.forward(x, x, 2, 2);
    for (int i = 0; i < a.out.size(); ++i) CHECK(a.out.data()[i] == b.out.data()[i]);
}

TEST_CASE("attention maps are row-stochastic") {
    ParamRegistry reg(15);
    AttentionConfig cfg{.d_model = 12, .n_heads = 3};
    MultiHeadAttention mha(reg, "a", cfg);
    std::mt19937_64 rng(16);
    Tensor x = random_tensor({7, 12}, rng, -3.0, 3.0);
    auto r = mha.forward(x, x, 0, 0);
    for (const auto& m : r.attn)
        for (int i = 0; i < m.rows(); ++i) {
            double s = 0.0;
            for (int j = 0; j < m.cols(); ++j) {
                s += m.at(i, j);
                CHECK(m.at(i, j) >= 0.0);
            }
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
}

TEST_CASE("attention split index out of range is rejected") {
    ParamRegistry reg(17);
    AttentionConfig cfg{.d_model = 8, .n_heads = 2, .unshared_qk = true};
    MultiHeadAttention mha(reg, "a", cfg);
    std::mt19937_64 rng(18);
    Tensor x = random_tensor({4, 8}, rng);
    CHECK_THROWS_AS(mha.forward(x, x, 5, 0), std::invalid_argument);
}

TEST_CASE("positional encoding is deterministic, bounded, and injective up to 16x16") {
    Tensor a = positional_encoding_2d(16, 16, 16);
    Tensor b = positional_encoding_2d(16, 16, 16);
    for (int i = 0; i < a.size(); ++i) {
        CHECK(a.data()[i] == b.data()[i]);
        CHECK(a.data()[i] >= -1.0);
        CHECK(a.data()[i] <= 1.0);
    }
    // exhaustive pairwise distinctness
    const int n = 256, d = 16;
    double min_gap = 1e9;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double gap = 0.0;
            for (int c = 0; c < d; ++c) gap = std::max(gap, std::abs(a.at(i, c) - a.at(j, c)));
            min_gap = std::min(min_gap, gap);
        }
    CHECK(min_gap > 1e-6);

    CHECK_THROWS_AS(positional_encoding_2d(4, 4, 6), std::invalid_argument);
}

TEST_CASE("adam first step moves each weight by about -lr") {
    ParamRegistry reg(19);
    Tensor w = reg.uniform_param("w", {3, 3}, 1.0);
    const std::vector<double> before = w.data();
    AdamState st(reg, 1e-3);
    {
        Tape tape;
        backward(sum(w)); // gradient of 1 everywhere
    }
    adam_step(reg, st);
    for (int i = 0; i < w.size(); ++i) {
        const double delta = w.data()[i] - before[i];
        CHECK(std::abs(delta + 1e-3) < 1e-6 * 1e-3);
    }
    CHECK(st.step_count == 1);
}

TEST_CASE("adam leaves parameters unchanged on zero gradient") {
    ParamRegistry reg(21);
    Tensor w = reg.uniform_param("w", {4}, 1.0);
    const std::vector<double> before = w.data();
    AdamState st(reg, 1e-2);
    w.zero_grad();
    adam_step(reg, st);
    for (int i = 0; i < w.size(); ++i) CHECK(w.data()[i] == before[i]);
}

TEST_CASE("adam minimizes w^2 from w=1") {
    ParamRegistry reg(23);
    Tensor w = reg.const_param("w", {1}, 1.0);
    AdamState st(reg, 8e-3); // small enough that the iterate never crosses zero

    double prev = 1.0;
    for (int i = 0; i < 100; ++i) {
        reg.zero_all_grads();
        Tape tape;
        Tensor loss = mul(w, w);
        backward(loss);
        adam_step(reg, st);
        const double f = w.item() * w.item();
        CHECK(f <= prev + 1e-12);
        prev = f;
    }
    CHECK(std::abs(w.item()) < 0.5);
}

TEST_CASE("lr schedule hits the published milestones") {
    CHECK(lr_schedule(0, 180, 2e-4) == Catch::Approx(2e-4));
    CHECK(lr_schedule(139, 180, 2e-4) == Catch::Approx(2e-4));
    CHECK(lr_schedule(150, 180, 2e-4) == Catch::Approx(2e-5));
    CHECK(lr_schedule(175, 180, 2e-4) == Catch::Approx(2e-6));
    // scaled run length keeps the same fractions
    CHECK(lr_schedule(13, 18, 1e-3) == Catch::Approx(1e-3));
    CHECK(lr_schedule(14, 18, 1e-3) == Catch::Approx(1e-4));
    CHECK(lr_schedule(17, 18, 1e-3) == Catch::Approx(1e-5));
}

TEST_CASE("registry copy and lookup") {
    ParamRegistry a(31), b(31);
    Tensor wa = a.uniform_param("w", {2, 2}, 1.0);
    Tensor wb = b.uniform_param("w", {2, 2}, 1.0);
    for (int i = 0; i < 4; ++i) CHECK(wa.data()[i] == wb.data()[i]); // same seed, same draws
    wa.data()[0] = 99.0;
    b.copy_values_from(a);
    CHECK(wb.data()[0] == 99.0);
    CHECK_THROWS_AS(a.find("nope"), std::out_of_range);
}
