#include <catch2/catch_amalgamated.hpp>

#include "scape/ablation.hpp"
#include "scape/metrics.hpp"

#include <cmath>

using namespace scape;

namespace {

DataConfig eval_data() {
    DataConfig d;
    d.image_size = 32;
    d.n_categories = 12;
    d.k_max = 4;
    d.occlusion_p = 0.25;
    d.seed = 31;
    return d;
}

ModelConfig eval_model(Variant v = Variant::scape) {
    ModelConfig c;
    c.image_size = 32;
    c.patch_size = 8;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_gkp_layers = 1;
    c.n_interactor_layers = 1;
    c.k_max = 4;
    c.dropout_p = 0.0;
    c.variant = v;
    c.init_seed = 7;
    return c;
}

} // namespace

TEST_CASE("pck analytic cases and loop oracle") {
    std::vector<std::array<double, 2>> gt = {{0.2, 0.2}, {0.5, 0.5}, {0.8, 0.3}, {0.4, 0.7}, {0.6, 0.6}};
    CHECK(pck(gt, gt, BoolMask(5, 1), 0.5) == 1.0);

    std::vector<std::array<double, 2>> far(5, {0.0, 0.0});
    for (size_t i = 0; i < far.size(); ++i) far[i] = {gt[i][0] + 0.3, gt[i][1] + 0.3};
    CHECK(pck(far, gt, BoolMask(5, 1), 0.5, 0.2) == 0.0);

    // mixed case against an explicit per-keypoint loop
    std::vector<std::array<double, 2>> pred = {{0.21, 0.2}, {0.9, 0.9}, {0.8, 0.31}, {0.0, 0.0}, {0.6, 0.6}};
    BoolMask vis = {1, 1, 1, 1, 0};
    const double normalizer = 0.6, thr = 0.2;
    int hits = 0, nvis = 0;
    for (int j = 0; j < 5; ++j) {
        if (!vis[j]) continue;
        ++nvis;
        if (std::hypot(pred[j][0] - gt[j][0], pred[j][1] - gt[j][1]) <= thr * normalizer) ++hits;
    }
    CHECK(pck(pred, gt, vis, normalizer, thr) == static_cast<double>(hits) / nvis);

    CHECK(std::isnan(pck(pred, gt, BoolMask(5, 0), normalizer)));
    CHECK_THROWS_AS(pck(pred, gt, vis, 0.0), std::invalid_argument);
}

TEST_CASE("pck is monotone in the threshold") {
    std::mt19937_64 rng(3);
    std::vector<double> dists(40);
    for (auto& d : dists) d = uniform_in(rng, 0.0, 0.5);
    double prev = 0.0;
    for (double t = 0.0; t <= 0.5; t += 0.01) {
        const double cur = pck_from_distances(dists, t);
        CHECK(cur >= prev);
        prev = cur;
    }
}

TEST_CASE("auc analytic cases") {
    CHECK(auc(std::vector<double>(7, 0.0)) == Catch::Approx(1.0));
    CHECK(auc(std::vector<double>(7, 0.9)) == Catch::Approx(0.0));
    // one distance at t_max/2: step function integrates to one half
    CHECK(std::abs(auc({0.1}, 0.2, 20) - 0.5) <= 1.0 / 20 + 1e-12);
    // never exceeds the terminal PCK, invariant under permutation
    std::mt19937_64 rng(5);
    std::vector<double> dists(25);
    for (auto& d : dists) d = uniform_in(rng, 0.0, 0.4);
    const double a = auc(dists);
    CHECK(a <= pck_from_distances(dists, 0.2) + 1e-12);
    std::vector<double> shuffled = dists;
    for (int i = 24; i > 0; --i) std::swap(shuffled[i], shuffled[uniform_int(rng, 0, i)]);
    CHECK(auc(shuffled) == a);
    CHECK(pck_from_distances(shuffled, 0.2) == pck_from_distances(dists, 0.2));
}

TEST_CASE("nme analytic cases and loop oracle") {
    CHECK(nme(std::vector<double>(4, 0.0)) == 0.0);
    CHECK(nme({0.1, 0.3}) == Catch::Approx(0.2));
    std::mt19937_64 rng(7);
    std::vector<double> dists(100);
    double acc = 0.0;
    for (auto& d : dists) {
        d = uniform_in(rng, 0.0, 1.0);
        acc += d;
    }
    CHECK(std::abs(nme(dists) - acc / 100.0) < 1e-12);
    CHECK(std::isnan(nme({})));
}

TEST_CASE("evaluate: oracle bound, weak baseline, determinism") {
    Dataset ds = Dataset::build(eval_data());
    EvalResult oracle = evaluate(oracle_predictor(), ds, SplitKind::test, 40, 1, 11);
    CHECK(oracle.pck == 1.0);
    CHECK(oracle.nme == 0.0);
    CHECK(oracle.pck_occluded == 1.0);

    EvalResult center = evaluate(center_predictor(), ds, SplitKind::test, 40, 1, 11);
    CHECK(center.pck < oracle.pck);

    EvalResult again = evaluate(center_predictor(), ds, SplitKind::test, 40, 1, 11);
    CHECK(again.pck == center.pck);
    CHECK(again.dists == center.dists);
    CHECK(again.dists_occluded == center.dists_occluded);
}

TEST_CASE("evaluate is stable when the episode count doubles") {
    Dataset ds = Dataset::build(eval_data());
    EvalResult a = evaluate(center_predictor(), ds, SplitKind::test, 150, 1, 13);
    EvalResult b = evaluate(center_predictor(), ds, SplitKind::test, 300, 1, 13);
    const double p = a.pck;
    const double sigma = std::sqrt(std::max(p * (1.0 - p), 1e-6) / static_cast<double>(a.dists.size()));
    CHECK(std::abs(a.pck - b.pck) < 3.0 * sigma);
}

TEST_CASE("model predictor feeds evaluate") {
    Model m(eval_model());
    Dataset ds = Dataset::build(eval_data());
    EvalResult r = evaluate(model_predictor(m), ds, SplitKind::val, 10, 1, 17);
    CHECK(r.n_episodes == 10);
    CHECK(r.pck >= 0.0);
    CHECK(r.pck <= 1.0);
    CHECK(r.nme >= 0.0);
}

TEST_CASE("kar-zeroed scape and no_kar evaluate identically") {
    Model ms(eval_model(Variant::scape));
    Model mn(eval_model(Variant::no_kar));
    mn.reg.copy_values_from(ms.reg);
    for (Model* m : {&ms, &mn})
        for (auto& [name, t] : m->reg.params)
            if (name.find(".af") != std::string::npos || name.find(".w_assign") != std::string::npos)
                std::fill(t.data().begin(), t.data().end(), 0.0);
    Dataset ds = Dataset::build(eval_data());
    EvalResult a = evaluate(model_predictor(ms), ds, SplitKind::test, 20, 1, 19);
    EvalResult b = evaluate(model_predictor(mn), ds, SplitKind::test, 20, 1, 19);
    CHECK(a.pck == b.pck);
    CHECK(a.auc == b.auc);
    CHECK(a.nme == b.nme);
    CHECK(a.dists == b.dists);
}

TEST_CASE("ablation harness emits one row per variant and seed") {
    AblationPlan plan;
    plan.model = eval_model();
    plan.data = eval_data();
    plan.variants = {Variant::scape, Variant::shared_qk};
    plan.seeds = {1, 2};
    plan.budget.train_steps = 25;
    plan.budget.batch_size = 1;
    plan.budget.base_lr = 1e-3;
    plan.budget.epochs = 2;
    plan.budget.eval_episodes = 12;
    plan.budget.n_threads = 2;

    AblationReport report = run_ablation(plan);
    CHECK(report.rows.size() == 4);
    const std::string csv = report.to_csv();
    size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 5); // header + 4 rows

    auto deltas = report.paired_deltas("scape", "shared_qk");
    CHECK(deltas.size() == 2);
    CHECK(std::isfinite(report.mean_pck("scape")));

    // deterministic under re-run
    AblationReport again = run_ablation(plan);
    CHECK(again.to_csv() == csv);
    CHECK(report.summary() == again.summary());
}

TEST_CASE("training smoke run decreases the loss and logs rows") {
    Model m(eval_model());
    Dataset ds = Dataset::build(eval_data());
    TrainSettings ts;
    ts.steps = 120;
    ts.batch_size = 2;
    ts.base_lr = 2e-3;
    ts.epochs = 4;
    ts.seed = 3;
    ts.n_threads = 2;
    int rows = 0, epochs_seen = 0;
    TrainHooks hooks;
    hooks.on_step = [&](int, double, double) { ++rows; };
    hooks.on_epoch = [&](int) { ++epochs_seen; };
    TrainResult r = train_model(m, ds, SplitKind::train, ts, hooks);
    CHECK(!r.diverged);
    CHECK(rows == 120);
    CHECK(epochs_seen == 4);
    CHECK(r.final_loss < r.first_loss);
}

TEST_CASE("training is byte-identical across thread counts") {
    Dataset ds = Dataset::build(eval_data());
    auto run = [&](int threads) {
        Model m(eval_model());
        TrainSettings ts;
        ts.steps = 12;
        ts.batch_size = 4;
        ts.base_lr = 1e-3;
        ts.epochs = 1;
        ts.seed = 5;
        ts.n_threads = threads;
        train_model(m, ds, SplitKind::train, ts);
        std::vector<double> flat;
        for (const auto& [name, t] : m.reg.params) flat.insert(flat.end(), t.data().begin(), t.data().end());
        return flat;
    };
    CHECK(run(1) == run(2));
}
