// Command-line driver: dataset generation, training, evaluation, ablation
// sweeps, and attention-map dumps. Every command echoes its effective
// configuration into the output directory and is byte-reproducible from the
// seeds it was given.

#include <CLI11.hpp>

#include "scape/ablation.hpp"
#include "scape/checkpoint.hpp"
#include "scape/metrics.hpp"
#include "scape/model.hpp"
#include "scape/runconfig.hpp"
#include "scape/synth.hpp"
#include "scape/train.hpp"

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace scape;

namespace {

// exit codes: 0 ok, 2 usage, 3 data/checkpoint mismatch, 4 numeric failure
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

fs::path resolve(const RunConfig& cfg, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : fs::path(cfg.out_dir) / path;
}

void write_echo(const RunConfig& cfg) {
    write_file(fs::path(cfg.out_dir) / "config_echo.txt", echo_run_config(cfg));
}

Dataset load_dataset(const RunConfig& cfg) {
    const fs::path path = resolve(cfg, cfg.manifest);
    if (!fs::exists(path)) throw DataError("manifest not found: " + path.string());
    Dataset ds = load_manifest(read_file(path));
    if (ds.cfg.image_size != cfg.image_size || ds.cfg.k_max != cfg.k_max)
        throw DataError("manifest geometry (" + std::to_string(ds.cfg.image_size) + "px, k_max " +
                        std::to_string(ds.cfg.k_max) + ") does not match the configured model (" +
                        std::to_string(cfg.image_size) + "px, k_max " + std::to_string(cfg.k_max) + ")");
    return ds;
}

std::string metrics_csv(const std::string& variant, uint64_t seed, const EvalResult& e) {
    std::ostringstream os;
    os.precision(12);
    os << "variant,seed,pck,auc,nme,pck_symmetric,pck_occluded\n";
    os << variant << "," << seed << "," << e.pck << "," << e.auc << "," << e.nme << "," << e.pck_symmetric
       << "," << e.pck_occluded << "\n";
    return os.str();
}

int cmd_gen(const RunConfig& cfg, int export_count) {
    Dataset ds = Dataset::build(cfg.data_config());
    const fs::path path = resolve(cfg, cfg.manifest);
    write_file(path, manifest_text(ds));
    if (export_count > 0) export_instances(ds, fs::path(cfg.out_dir) / "samples", export_count, cfg.data_seed);
    write_echo(cfg);
    std::cout << "wrote " << path.string() << " (" << ds.categories.size() << " categories: "
              << ds.ids(SplitKind::train).size() << " train / " << ds.ids(SplitKind::val).size() << " val / "
              << ds.ids(SplitKind::test).size() << " test)\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg);
    Model model(cfg.model_config());
    std::cout << "training variant " << cfg.variant << " (" << model.reg.total_scalars() << " parameters, "
              << model.gkp.size() << " gkp + " << model.inter.size() << " interactor blocks)\n";

    std::ostringstream loss_csv;
    loss_csv.precision(17);
    loss_csv << "step,lr,loss\n";
    const fs::path ckpt_path = resolve(cfg, cfg.checkpoint);

    TrainHooks hooks;
    hooks.on_step = [&](int step, double lr, double loss) {
        loss_csv << step << "," << lr << "," << loss << "\n";
        if ((step + 1) % 500 == 0)
            std::cout << "step " << step + 1 << "/" << cfg.steps << "  lr " << lr << "  loss " << loss
                      << std::endl;
    };
    hooks.on_epoch = [&](int) { save_checkpoint(ckpt_path, model); };

    TrainResult r = train_model(model, ds, SplitKind::train, cfg.train_settings(), hooks);
    write_file(fs::path(cfg.out_dir) / "loss.csv", loss_csv.str());
    write_echo(cfg);
    if (r.diverged) {
        write_file(fs::path(cfg.out_dir) / "divergence.txt", r.diagnostic + "\n");
        throw NumericError(r.diagnostic);
    }
    save_checkpoint(ckpt_path, model);
    std::cout << "finished " << r.steps_run << " steps, loss " << r.first_loss << " -> " << r.final_loss
              << ", checkpoint " << ckpt_path.string() << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, bool oracle) {
    Dataset ds = load_dataset(cfg);
    const SplitKind split = split_from_name(cfg.eval_split);

    EvalResult result;
    std::string variant_label;
    if (oracle) {
        variant_label = "oracle";
        result = evaluate(oracle_predictor(), ds, split, cfg.eval_episodes, cfg.n_shot, cfg.eval_seed,
                          cfg.threshold);
    } else {
        const fs::path ckpt_path = resolve(cfg, cfg.checkpoint);
        if (!fs::exists(ckpt_path)) throw DataError("checkpoint not found: " + ckpt_path.string());
        const std::string bytes = read_file(ckpt_path);
        const uint64_t stored = checkpoint_config_hash(bytes);
        const uint64_t expected = config_hash(cfg.model_config());
        if (stored != expected) {
            std::ostringstream os;
            os << "checkpoint/config hash mismatch: checkpoint has " << std::hex << stored
               << ", configuration requires " << expected;
            throw DataError(os.str());
        }
        Model model = load_checkpoint_bytes(bytes);
        variant_label = cfg.variant;
        result = evaluate(model_predictor(model), ds, split, cfg.eval_episodes, cfg.n_shot, cfg.eval_seed,
                          cfg.threshold);
    }

    write_file(fs::path(cfg.out_dir) / "metrics.csv", metrics_csv(variant_label, cfg.eval_seed, result));
    write_echo(cfg);
    std::cout.precision(4);
    std::cout << variant_label << " on " << cfg.eval_split << " (" << result.n_episodes << " episodes, "
              << cfg.n_shot << "-shot):\n"
              << "  pck@" << cfg.threshold << " " << result.pck << "\n  auc       " << result.auc
              << "\n  nme       " << result.nme << "\n  pck sym   " << result.pck_symmetric
              << "\n  pck occ   " << result.pck_occluded << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg); // anchors the data family; per-seed sets derive from it
    AblationPlan plan;
    plan.model = cfg.model_config();
    plan.data = ds.cfg;
    plan.budget.train_steps = cfg.ablation_steps;
    plan.budget.batch_size = cfg.ablation_batch;
    plan.budget.n_shot = cfg.n_shot;
    plan.budget.base_lr = cfg.ablation_lr;
    plan.budget.epochs = cfg.ablation_epochs;
    plan.budget.eval_episodes = cfg.ablation_eval_episodes;
    plan.budget.n_threads = cfg.threads;
    {
        std::istringstream vs(cfg.ablation_variants);
        std::string name;
        while (std::getline(vs, name, ',')) plan.variants.push_back(variant_from_name(name));
    }
    for (int s = 1; s <= cfg.ablation_seeds; ++s) plan.seeds.push_back(static_cast<uint64_t>(s));

    std::cout << "ablation: " << plan.variants.size() << " variants x " << plan.seeds.size() << " seeds, "
              << plan.budget.train_steps << " steps each\n";
    AblationReport report = run_ablation(plan);

    write_file(fs::path(cfg.out_dir) / "ablation.csv", report.to_csv());
    std::ostringstream summary;
    summary << report.summary() << "\n";
    auto pair_line = [&](const char* label, const char* a, const char* b, double EvalResult::* field) {
        auto d = report.paired_deltas(a, b, field);
        if (d.empty()) return;
        double mean = 0;
        int pos = 0;
        for (double x : d) {
            mean += x / static_cast<double>(d.size());
            if (x > 0) ++pos;
        }
        summary.precision(4);
        summary << label << ": mean delta " << (mean >= 0 ? "+" : "") << mean << ", positive on " << pos
                << "/" << d.size() << " paired seeds\n";
    };
    pair_line("scape vs no_kar        (pck)", "scape", "no_kar", &EvalResult::pck);
    pair_line("scape vs no_gkp        (pck)", "scape", "no_gkp", &EvalResult::pck);
    pair_line("no_kar vs shared_qk    (pck)", "no_kar", "shared_qk", &EvalResult::pck);
    pair_line("no_gkp vs shared_qk    (pck)", "no_gkp", "shared_qk", &EvalResult::pck);
    pair_line("coordinate vs map head (pck)", "shared_qk", "map_regression_head", &EvalResult::pck);
    pair_line("map head vs matching   (pck)", "map_regression_head", "matching_head", &EvalResult::pck);
    pair_line("scape vs mask_kk       (pck)", "scape", "mask_kk", &EvalResult::pck);
    pair_line("scape vs lite          (pck)", "scape", "lite", &EvalResult::pck);
    pair_line("scape vs no_kar   (occluded)", "scape", "no_kar", &EvalResult::pck_occluded);
    pair_line("scape vs no_gkp  (symmetric)", "scape", "no_gkp", &EvalResult::pck_symmetric);
    write_file(fs::path(cfg.out_dir) / "ablation_summary.txt", summary.str());
    write_echo(cfg);
    std::cout << summary.str();
    return 0;
}

int cmd_dump_attention(const RunConfig& cfg, uint64_t episode_seed) {
    Dataset ds = load_dataset(cfg);
    const fs::path ckpt_path = resolve(cfg, cfg.checkpoint);
    if (!fs::exists(ckpt_path)) throw DataError("checkpoint not found: " + ckpt_path.string());
    const std::string bytes = read_file(ckpt_path);
    if (checkpoint_config_hash(bytes) != config_hash(cfg.model_config()))
        throw DataError("checkpoint/config hash mismatch");
    Model model = load_checkpoint_bytes(bytes);

    std::mt19937_64 rng(episode_seed);
    Episode ep = ds.sample_episode(split_from_name(cfg.eval_split), cfg.n_shot, rng);

    ForwardOptions opt;
    opt.record_attention = true;
    opt.compute_loss = false;
    ForwardOutput out = model_forward(model, ep, opt);

    const fs::path dir = fs::path(cfg.out_dir) / "attn";
    fs::create_directories(dir);
    const int K = model.cfg.k_max, nq = model.cfg.n_query_tokens();
    int n_files = 0;
    int inter_index = 0;
    for (size_t li = 0; li < out.record.layers.size(); ++li) {
        const auto& layer = out.record.layers[li];
        for (size_t h = 0; h < layer.attn.size(); ++h) {
            // keypoint-to-image block as a heatmap image, keypoint rows stacked
            const int img_cols = layer.kv_cols - (layer.kind == "interactor" ? K : 0);
            const int col0 = layer.kv_cols - img_cols;
            std::vector<double> block(static_cast<size_t>(K) * img_cols);
            double peak = 0.0;
            for (int i = 0; i < K; ++i)
                for (int j = 0; j < img_cols; ++j) {
                    block[static_cast<size_t>(i) * img_cols + j] =
                        layer.attn[h][static_cast<size_t>(i) * layer.kv_cols + col0 + j];
                    peak = std::max(peak, block[static_cast<size_t>(i) * img_cols + j]);
                }
            if (peak > 0.0)
                for (double& v : block) v /= peak;
            const std::string stem = "layer" + std::to_string(li) + "_head" + std::to_string(h);
            write_pgm(dir / (stem + ".pgm"), img_cols, K, block);
            ++n_files;
            // full post-softmax keypoint rows for exact checks
            std::vector<double> rows(static_cast<size_t>(K) * layer.kv_cols);
            for (int i = 0; i < K; ++i)
                for (int j = 0; j < layer.kv_cols; ++j)
                    rows[static_cast<size_t>(i) * layer.kv_cols + j] =
                        layer.attn[h][static_cast<size_t>(i) * layer.kv_cols + j];
            write_file(dir / (stem + "_rows.csv"), csv_matrix(rows, K, layer.kv_cols));
        }
        if (layer.kind == "interactor") {
            // keypoint block logits before/after refinement, heads stacked
            std::vector<double> before, after;
            for (size_t h = 0; h < layer.kk_before.size(); ++h) {
                before.insert(before.end(), layer.kk_before[h].begin(), layer.kk_before[h].end());
                after.insert(after.end(), layer.kk_after[h].begin(), layer.kk_after[h].end());
            }
            const int rows = static_cast<int>(layer.kk_before.size()) * K;
            write_file(dir / ("interactor" + std::to_string(inter_index) + "_kk_before.csv"),
                       csv_matrix(before, rows, K));
            write_file(dir / ("interactor" + std::to_string(inter_index) + "_kk_after.csv"),
                       csv_matrix(after, rows, K));
            ++inter_index;
        }
    }
    write_echo(cfg);
    std::cout << "wrote " << n_files << " heatmaps (layers x heads) plus " << 2 * inter_index
              << " keypoint-block csv files into " << dir.string() << "\n";
    (void)nq;
    return 0;
}

void add_common_options(CLI::App* cmd, RunConfig& cfg) {
    cmd->add_option("--config", "key=value config file applied before flags")->check(CLI::ExistingFile);
    cmd->add_option("--image-size", cfg.image_size);
    cmd->add_option("--patch-size", cfg.patch_size);
    cmd->add_option("--d-model", cfg.d_model);
    cmd->add_option("--heads", cfg.n_heads);
    cmd->add_option("--gkp-layers", cfg.n_gkp_layers);
    cmd->add_option("--interactor-layers", cfg.n_interactor_layers);
    cmd->add_option("--k-max", cfg.k_max);
    cmd->add_option("--filters", cfg.n_filters);
    cmd->add_option("--af-hidden", cfg.af_hidden);
    cmd->add_option("--ffn-hidden", cfg.ffn_hidden);
    cmd->add_option("--head-hidden", cfg.head_hidden);
    cmd->add_option("--token-sigma", cfg.token_sigma);
    cmd->add_option("--dropout", cfg.dropout);
    cmd->add_option("--gkp-query-ctx", cfg.gkp_query_ctx);
    cmd->add_option("--use-identifiers", cfg.use_identifiers);
    cmd->add_option("--variant", cfg.variant);
    cmd->add_option("--init-seed", cfg.init_seed);
    cmd->add_option("--categories", cfg.categories);
    cmd->add_option("--occlusion", cfg.occlusion_p);
    cmd->add_option("--seed", cfg.data_seed);
    cmd->add_option("--steps", cfg.steps);
    cmd->add_option("--batch-size", cfg.batch_size);
    cmd->add_option("--epochs", cfg.epochs);
    cmd->add_option("--lr", cfg.base_lr);
    cmd->add_option("--train-seed", cfg.train_seed);
    cmd->add_option("--n-shot", cfg.n_shot)->check(CLI::IsMember({1, 5}));
    cmd->add_option("--threads", cfg.threads);
    cmd->add_option("--eval-episodes", cfg.eval_episodes);
    cmd->add_option("--eval-seed", cfg.eval_seed);
    cmd->add_option("--threshold", cfg.threshold);
    cmd->add_option("--split", cfg.eval_split)->check(CLI::IsMember({"train", "val", "test"}));
    cmd->add_option("--ablation-variants", cfg.ablation_variants);
    cmd->add_option("--ablation-seeds", cfg.ablation_seeds);
    cmd->add_option("--ablation-steps", cfg.ablation_steps);
    cmd->add_option("--ablation-batch", cfg.ablation_batch);
    cmd->add_option("--ablation-lr", cfg.ablation_lr);
    cmd->add_option("--ablation-epochs", cfg.ablation_epochs);
    cmd->add_option("--ablation-eval-episodes", cfg.ablation_eval_episodes);
    cmd->add_option("--manifest", cfg.manifest);
    cmd->add_option("--checkpoint", cfg.checkpoint);
    cmd->add_option("--out", cfg.out_dir);
}

} // namespace

int main(int argc, char** argv) {
    RunConfig cfg;

    // the config file loads before flag parsing so flags can override it
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            try {
                apply_config_text(cfg, read_file(argv[i + 1]));
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 2;
            }
        }
    }

    CLI::App app{"category-agnostic keypoint pose estimation on procedural data"};
    app.require_subcommand(1);

    int export_count = 0;
    bool oracle = false;
    uint64_t episode_seed = 1;

    CLI::App* gen = app.add_subcommand("gen", "generate a dataset manifest");
    add_common_options(gen, cfg);
    gen->add_option("--export", export_count, "also export this many sample instances per category");

    CLI::App* train = app.add_subcommand("train", "train a model on a generated manifest");
    add_common_options(train, cfg);

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common_options(eval, cfg);
    eval->add_flag("--oracle", oracle, "score the ground-truth oracle instead of a checkpoint (self-test)");

    CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate the variant grid with paired seeds");
    add_common_options(ablate, cfg);

    CLI::App* dump = app.add_subcommand("dump-attention", "write attention heatmaps and keypoint-block csvs");
    add_common_options(dump, cfg);
    dump->add_option("--episode-seed", episode_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    try {
        std::filesystem::create_directories(cfg.out_dir);
        if (gen->parsed()) return cmd_gen(cfg, export_count);
        if (train->parsed()) return cmd_train(cfg);
        if (eval->parsed()) return cmd_eval(cfg, oracle);
        if (ablate->parsed()) return cmd_ablate(cfg);
        if (dump->parsed()) return cmd_dump_attention(cfg, episode_seed);
        std::cerr << "error: no command\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
