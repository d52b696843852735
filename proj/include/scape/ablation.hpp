#pragma once

// Paired-seed ablation harness. Every (variant, seed) run trains from scratch
// under the same step budget; for a given seed, all variants see the same
// category set, the same training episode stream, and the same evaluation
// episode stream, so per-seed deltas are paired comparisons.

#include "scape/metrics.hpp"
#include "scape/train.hpp"

#include <atomic>
#include <map>
#include <thread>

namespace scape {

struct AblationBudget {
    int train_steps = 2000;
    int batch_size = 1;
    int n_shot = 1;
    double base_lr = 1e-3;
    int epochs = 18;
    int eval_episodes = 150;
    int n_threads = 2; // concurrent runs; each run trains single-threaded
};

struct AblationRun {
    std::string variant;
    uint64_t seed = 0;
    EvalResult eval;
    bool diverged = false;
    std::string diagnostic;
};

struct AblationReport {
    std::vector<AblationRun> rows; // variant-major, seed-minor

    double mean_pck(const std::string& variant) const {
        double s = 0.0;
        int n = 0;
        for (const auto& r : rows)
            if (r.variant == variant && !r.diverged) {
                s += r.eval.pck;
                ++n;
            }
        if (n == 0) return std::numeric_limits<double>::quiet_NaN();
        return s / n;
    }

    // per-seed pck differences a - b over seeds where both runs finished
    std::vector<double> paired_deltas(const std::string& a, const std::string& b,
                                      double EvalResult::* field = &EvalResult::pck) const {
        std::map<uint64_t, double> va, vb;
        for (const auto& r : rows) {
            if (r.diverged) continue;
            if (r.variant == a) va[r.seed] = r.eval.*field;
            if (r.variant == b) vb[r.seed] = r.eval.*field;
        }
        std::vector<double> out;
        for (const auto& [seed, value] : va)
            if (vb.count(seed)) out.push_back(value - vb.at(seed));
        return out;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(12);
        os << "variant,seed,pck,auc,nme,pck_symmetric,pck_occluded,diverged\n";
        for (const auto& r : rows) {
            os << r.variant << "," << r.seed << "," << r.eval.pck << "," << r.eval.auc << "," << r.eval.nme
               << "," << r.eval.pck_symmetric << "," << r.eval.pck_occluded << ","
               << (r.diverged ? 1 : 0) << "\n";
        }
        return os.str();
    }

    std::string summary() const {
        std::ostringstream os;
        os.precision(4);
        std::vector<std::string> variants;
        for (const auto& r : rows)
            if (std::find(variants.begin(), variants.end(), r.variant) == variants.end())
                variants.push_back(r.variant);
        os << "variant            mean_pck  mean_sym  mean_occ  runs\n";
        for (const auto& v : variants) {
            double sp = 0, ss = 0, so = 0;
            int n = 0;
            for (const auto& r : rows)
                if (r.variant == v && !r.diverged) {
                    sp += r.eval.pck;
                    ss += r.eval.pck_symmetric;
                    so += r.eval.pck_occluded;
                    ++n;
                }
            os << v;
            for (size_t pad = v.size(); pad < 19; ++pad) os << ' ';
            if (n) os << sp / n << "    " << ss / n << "    " << so / n << "    " << n << "\n";
            else os << "all runs diverged\n";
        }
        return os.str();
    }
};

struct AblationPlan {
    ModelConfig model;
    DataConfig data;
    std::vector<Variant> variants;
    std::vector<uint64_t> seeds;
    AblationBudget budget;
};

inline AblationRun run_one_ablation(const AblationPlan& plan, Variant variant, uint64_t seed,
                                    const Dataset& ds) {
    AblationRun run;
    run.variant = variant_name(variant);
    run.seed = seed;

    ModelConfig mc = plan.model;
    mc.variant = variant;
    mc.init_seed = mix_seed(seed, 0x1247);
    Model model(mc);

    TrainSettings ts;
    ts.steps = plan.budget.train_steps;
    ts.batch_size = plan.budget.batch_size;
    ts.n_shot = plan.budget.n_shot;
    ts.base_lr = plan.budget.base_lr;
    ts.epochs = plan.budget.epochs;
    ts.seed = mix_seed(seed, 0x7E41);
    ts.n_threads = 1;

    TrainResult tr = train_model(model, ds, SplitKind::train, ts);
    if (tr.diverged) {
        run.diverged = true;
        run.diagnostic = tr.diagnostic;
        return run;
    }
    run.eval = evaluate(model_predictor(model), ds, SplitKind::test, plan.budget.eval_episodes,
                        plan.budget.n_shot, mix_seed(seed, 0xE7A1));
    return run;
}

inline AblationReport run_ablation(const AblationPlan& plan) {
    if (plan.variants.empty() || plan.seeds.empty())
        throw std::invalid_argument("ablation: variants and seeds must be non-empty");

    // one dataset per seed, shared by every variant of that seed
    std::map<uint64_t, Dataset> data_by_seed;
    for (uint64_t s : plan.seeds) {
        DataConfig dc = plan.data;
        dc.seed = mix_seed(s, 0xDA7A);
        data_by_seed.emplace(s, Dataset::build(dc));
    }

    struct Job {
        Variant variant;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (Variant v : plan.variants)
        for (uint64_t s : plan.seeds) jobs.push_back({v, s});

    AblationReport report;
    report.rows.resize(jobs.size());
    std::atomic<size_t> next{0};
    const int workers = std::max(1, std::min<int>(plan.budget.n_threads, static_cast<int>(jobs.size())));
    auto work = [&] {
        for (size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1))
            report.rows[i] = run_one_ablation(plan, jobs[i].variant, jobs[i].seed, data_by_seed.at(jobs[i].seed));
    };
    if (workers > 1) {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    } else {
        work();
    }
    return report;
}

} // namespace scape
