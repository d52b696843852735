// Drives the built CLI binary end to end: reproducibility of generated
// artifacts, exit codes, checkpoint/config binding, and the attention dump
// layout. Invoked as: test_cli <path-to-scape-binary>

#include "scape/runconfig.hpp"
#include "scape/util.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

int g_failures = 0;

#define CHECK(cond)                                                                  \
    do {                                                                             \
        if (!(cond)) {                                                               \
            ++g_failures;                                                            \
            std::cerr << "FAIL " << __FILE__ << ":" << __LINE__ << "  " #cond "\n"; \
        }                                                                            \
    } while (0)

std::string g_binary;

int run(const std::string& args) {
    const std::string cmd = g_binary + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (status == -1) return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

size_t count_lines(const std::string& text) {
    size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

size_t count_files(const fs::path& dir, const std::string& suffix) {
    size_t n = 0;
    if (!fs::exists(dir)) return 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            ++n;
    }
    return n;
}

const char* kTinyModel =
    " --image-size 32 --k-max 4 --d-model 16 --heads 2 --gkp-layers 1 --interactor-layers 1";
const char* kTinyData = " --categories 20 --seed 7 --occlusion 0.2";

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: test_cli <scape-binary>\n";
        return 2;
    }
    g_binary = argv[1];
    const fs::path root = fs::temp_directory_path() / "scape_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string A = (root / "a").string(), B = (root / "b").string();

    // --- gen: determinism, split sizes, line count -------------------------
    CHECK(run("gen --out " + A + kTinyData + " --image-size 32 --k-max 4") == 0);
    CHECK(run("gen --out " + B + kTinyData + " --image-size 32 --k-max 4") == 0);
    const std::string manifest_a = scape::read_file(fs::path(A) / "manifest.txt");
    CHECK(manifest_a == scape::read_file(fs::path(B) / "manifest.txt"));
    CHECK(count_lines(manifest_a) == 21); // header plus one line per category

    const std::string C = (root / "c").string();
    CHECK(run("gen --out " + C + " --categories 100 --seed 3 --image-size 32 --k-max 4") == 0);
    const std::string manifest_c = scape::read_file(fs::path(C) / "manifest.txt");
    size_t train_n = 0, val_n = 0, test_n = 0;
    {
        std::istringstream is(manifest_c);
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
            if (line.find(" train ") != std::string::npos) ++train_n;
            if (line.find(" val ") != std::string::npos) ++val_n;
            if (line.find(" test ") != std::string::npos) ++test_n;
        }
    }
    CHECK(train_n == 70);
    CHECK(val_n == 10);
    CHECK(test_n == 20);

    // --- train: smoke run, loss log, checkpoint ----------------------------
    const std::string train_args = std::string("--out ") + A + kTinyModel + kTinyData +
                                   " --steps 200 --batch-size 2 --lr 3e-3 --epochs 2 --train-seed 5";
    CHECK(run("train " + train_args) == 0);
    CHECK(fs::exists(fs::path(A) / "checkpoint.scpe"));
    const std::string loss_csv = scape::read_file(fs::path(A) / "loss.csv");
    CHECK(count_lines(loss_csv) == 201); // header + one row per step
    {
        // the run ends below where it started; single-episode losses are
        // noisy, so compare a head window against a tail window
        std::istringstream is(loss_csv);
        std::string line;
        std::getline(is, line); // header
        std::vector<double> losses;
        while (std::getline(is, line)) losses.push_back(std::stod(line.substr(line.rfind(',') + 1)));
        double head = 0.0, tail = 0.0;
        const size_t w = 25;
        for (size_t i = 0; i < w; ++i) {
            head += losses[i] / w;
            tail += losses[losses.size() - 1 - i] / w;
        }
        CHECK(tail < head);
    }

    // --- eval: determinism, oracle self-test, hash binding, usage errors ---
    const std::string eval_args = std::string("--out ") + A + kTinyModel + kTinyData +
                                  " --eval-episodes 25 --eval-seed 9";
    CHECK(run("eval " + eval_args) == 0);
    const std::string metrics1 = scape::read_file(fs::path(A) / "metrics.csv");
    CHECK(run("eval " + eval_args) == 0);
    CHECK(metrics1 == scape::read_file(fs::path(A) / "metrics.csv"));

    CHECK(run("eval --oracle --out " + A + kTinyModel + kTinyData + " --eval-episodes 10") == 0);
    const std::string oracle_csv = scape::read_file(fs::path(A) / "metrics.csv");
    CHECK(oracle_csv.find("oracle,") != std::string::npos);
    CHECK(oracle_csv.find(",1,") != std::string::npos); // pck 1

    // config/checkpoint hash mismatch refuses with exit 3
    CHECK(run("eval --out " + A + kTinyData +
              " --image-size 32 --k-max 4 --d-model 32 --heads 2 --gkp-layers 1 --interactor-layers 1") == 3);
    // missing manifest is a data error
    CHECK(run("eval --out " + (root / "nope").string() + kTinyModel + kTinyData) == 3);
    // unknown flag is a usage error
    CHECK(run("train --frobnicate 7") == 2);
    CHECK(run("") == 2);

    // --- config file + echo round-trip -------------------------------------
    {
        scape::write_file(root / "base.cfg", "steps = 77\nbase_lr = 0.002\nvariant = no_kar\n");
        CHECK(run("gen --out " + B + " --config " + (root / "base.cfg").string() + kTinyData +
                  " --image-size 32 --k-max 4 --steps 88") == 0);
        const std::string echo = scape::read_file(fs::path(B) / "config_echo.txt");
        scape::RunConfig parsed = scape::parse_run_config(echo);
        CHECK(parsed.steps == 88);             // flag overrides config file
        CHECK(parsed.base_lr == 0.002);        // file overrides default
        CHECK(parsed.variant == "no_kar");
        CHECK(scape::echo_run_config(parsed) == echo); // exact round-trip
    }

    // --- dump-attention ------------------------------------------------------
    CHECK(run("dump-attention --out " + A + kTinyModel + kTinyData + " --episode-seed 4") == 0);
    const fs::path attn = fs::path(A) / "attn";
    CHECK(count_files(attn, ".pgm") == 4);           // (1 gkp + 1 interactor) x 2 heads
    CHECK(count_files(attn, "_kk_before.csv") == 1); // one interactor layer
    CHECK(count_files(attn, "_kk_after.csv") == 1);
    // every dumped post-softmax row sums to one
    for (const auto& entry : fs::directory_iterator(attn)) {
        const std::string name = entry.path().filename().string();
        if (name.find("_rows.csv") == std::string::npos) continue;
        for (const auto& row : scape::parse_csv_matrix(scape::read_file(entry.path()))) {
            double s = 0.0;
            for (double v : row) s += v;
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
    // a stack without the refiner leaves the keypoint block untouched
    {
        const std::string D = (root / "d").string();
        CHECK(run("gen --out " + D + kTinyData + " --image-size 32 --k-max 4") == 0);
        CHECK(run("train --out " + D + kTinyModel + kTinyData +
                  " --variant no_kar --steps 30 --batch-size 1 --epochs 1") == 0);
        CHECK(run("dump-attention --out " + D + kTinyModel + kTinyData +
                  " --variant no_kar --episode-seed 4") == 0);
        CHECK(scape::read_file(fs::path(D) / "attn" / "interactor0_kk_before.csv") ==
              scape::read_file(fs::path(D) / "attn" / "interactor0_kk_after.csv"));
    }

    // --- ablate: row count and reproducibility ------------------------------
    {
        const std::string E = (root / "e").string();
        CHECK(run("gen --out " + E + kTinyData + " --image-size 32 --k-max 4") == 0);
        const std::string ablate_args = std::string("--out ") + E + kTinyModel + kTinyData +
                                        " --ablation-variants scape,shared_qk --ablation-seeds 2"
                                        " --ablation-steps 25 --ablation-batch 1 --ablation-epochs 1"
                                        " --ablation-eval-episodes 10";
        CHECK(run("ablate " + ablate_args) == 0);
        const std::string csv = scape::read_file(fs::path(E) / "ablation.csv");
        CHECK(count_lines(csv) == 5); // header + 2 variants x 2 seeds
        CHECK(fs::exists(fs::path(E) / "ablation_summary.txt"));
        CHECK(run("ablate " + ablate_args) == 0);
        CHECK(csv == scape::read_file(fs::path(E) / "ablation.csv"));
    }

    if (g_failures == 0) {
        std::cout << "test_cli: all checks passed\n";
        return 0;
    }
    std::cerr << "test_cli: " << g_failures << " failures\n";
    return 1;
}
