#pragma once

// Episodic training loop. Batches can fan out over worker threads: every batch
// slot owns a full parameter clone and a private tape, and slot gradients are
// reduced into the master registry in slot order, so results are byte-identical
// for any thread count.

#include "scape/metrics.hpp"
#include "scape/model.hpp"

#include <atomic>
#include <functional>
#include <sstream>
#include <thread>
#include <vector>

namespace scape {

struct TrainSettings {
    int steps = 20000;
    int batch_size = 16;
    int n_shot = 1;
    double base_lr = 2e-4;
    int epochs = 180; // lr-schedule epoch equivalents over the run
    uint64_t seed = 1;
    int n_threads = 1;

    void validate() const {
        if (steps < 1 || batch_size < 1 || epochs < 1 || n_threads < 1)
            throw std::invalid_argument("train: steps, batch_size, epochs, n_threads must be positive");
        if (!(base_lr > 0.0)) throw std::invalid_argument("train: base_lr must be positive");
    }
};

struct TrainHooks {
    std::function<void(int step, double lr, double loss)> on_step;
    std::function<void(int epoch)> on_epoch; // fires when an epoch boundary is crossed, and at the end
};

struct TrainResult {
    bool diverged = false;
    std::string diagnostic;
    double first_loss = 0.0;
    double final_loss = 0.0;
    int steps_run = 0;
};

inline TrainResult train_model(Model& m, const Dataset& ds, SplitKind split, const TrainSettings& ts,
                               const TrainHooks& hooks = {}) {
    ts.validate();
    TrainResult result;
    AdamState adam(m.reg, ts.base_lr);

    const int B = ts.batch_size;
    const int workers = std::min(ts.n_threads, B);
    const bool use_slots = B > 1;

    // one clone per batch slot; values refreshed from the master each step
    std::vector<Model> slots;
    if (use_slots)
        for (int j = 0; j < B; ++j) slots.emplace_back(m.cfg);

    int prev_epoch = -1;
    for (int step = 0; step < ts.steps; ++step) {
        const int epoch = static_cast<int>(static_cast<int64_t>(step) * ts.epochs / ts.steps);
        if (epoch != prev_epoch) {
            if (prev_epoch >= 0 && hooks.on_epoch) hooks.on_epoch(prev_epoch);
            prev_epoch = epoch;
        }
        adam.lr = lr_schedule(epoch, ts.epochs, ts.base_lr);

        std::vector<uint64_t> ep_seeds(B);
        for (int j = 0; j < B; ++j)
            ep_seeds[j] = mix_seed(ts.seed, static_cast<uint64_t>(step) * B + j + 1);

        std::vector<double> losses(B, 0.0);
        m.reg.zero_all_grads();

        auto run_slot = [&](Model& model, int j) {
            std::mt19937_64 ep_rng(ep_seeds[j]);
            Episode ep = ds.sample_episode(split, ts.n_shot, ep_rng);
            Tape tape;
            ForwardOptions opt;
            opt.training = true;
            opt.dropout_seed = mix_seed(ep_seeds[j], 0xD20);
            ForwardOutput out = model_forward(model, ep, opt);
            losses[j] = out.loss.item();
            if (std::isfinite(losses[j])) backward(out.loss);
        };

        if (use_slots) {
            for (int j = 0; j < B; ++j) {
                slots[j].reg.copy_values_from(m.reg);
                slots[j].reg.zero_all_grads();
            }
            if (workers > 1) {
                std::vector<std::thread> pool;
                std::atomic<int> next{0};
                for (int w = 0; w < workers; ++w)
                    pool.emplace_back([&] {
                        for (int j = next.fetch_add(1); j < B; j = next.fetch_add(1)) run_slot(slots[j], j);
                    });
                for (auto& t : pool) t.join();
            } else {
                for (int j = 0; j < B; ++j) run_slot(slots[j], j);
            }
            // slot-order reduction keeps the sum independent of scheduling
            for (size_t p = 0; p < m.reg.params.size(); ++p) {
                auto& dst = m.reg.params[p].second.node()->grad;
                m.reg.params[p].second.node()->ensure_grad();
                for (int j = 0; j < B; ++j) {
                    const auto& src = slots[j].reg.params[p].second.grad();
                    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
                }
                for (double& g : dst) g /= B;
            }
        } else {
            run_slot(m, 0);
        }

        double mean_loss = 0.0;
        bool finite = true;
        for (double l : losses) {
            mean_loss += l / B;
            if (!std::isfinite(l)) finite = false;
        }
        if (!finite || !std::isfinite(mean_loss)) {
            std::ostringstream os;
            os << "non-finite loss at step " << step << "; episode seeds:";
            for (uint64_t s : ep_seeds) os << " " << s;
            result.diverged = true;
            result.diagnostic = os.str();
            result.steps_run = step;
            return result;
        }

        adam_step(m.reg, adam);

        if (step == 0) result.first_loss = mean_loss;
        result.final_loss = mean_loss;
        if (hooks.on_step) hooks.on_step(step, adam.lr, mean_loss);
        result.steps_run = step + 1;
    }
    if (hooks.on_epoch) hooks.on_epoch(prev_epoch < 0 ? 0 : prev_epoch);
    return result;
}

} // namespace scape
