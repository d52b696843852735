#pragma once

// Flat key=value run configuration shared by every CLI command. The effective
// config is echoed into the output directory; parsing the echo reproduces the
// struct exactly, which is what the reproducibility checks lean on.

#include "scape/ablation.hpp"
#include "scape/model.hpp"
#include "scape/synth.hpp"
#include "scape/train.hpp"
#include "scape/util.hpp"

#include <map>
#include <string>

namespace scape {

struct RunConfig {
    // model
    int image_size = 64;
    int patch_size = 8;
    int d_model = 48;
    int n_heads = 4;
    int n_gkp_layers = 2;
    int n_interactor_layers = 4;
    int k_max = 8;
    int n_filters = 4;
    int af_hidden = 0;
    int ffn_hidden = 0;
    int head_hidden = 0;
    double token_sigma = 1.0;
    double dropout = 0.1;
    bool gkp_query_ctx = true;
    bool use_identifiers = true;
    std::string variant = "scape";
    uint64_t init_seed = 1;
    // data
    int categories = 100;
    double occlusion_p = 0.15;
    uint64_t data_seed = 1;
    // training
    int steps = 20000;
    int batch_size = 16;
    int epochs = 180;
    double base_lr = 2e-4;
    uint64_t train_seed = 1;
    int n_shot = 1;
    int threads = 2;
    // evaluation
    int eval_episodes = 300;
    uint64_t eval_seed = 1;
    double threshold = 0.2;
    std::string eval_split = "test";
    // ablation
    std::string ablation_variants = "scape,lite,no_gkp,no_kar,shared_qk,mask_kk,matching_head,map_regression_head";
    int ablation_seeds = 5;
    int ablation_steps = 6000;
    int ablation_batch = 4;
    double ablation_lr = 1e-3;
    int ablation_epochs = 18;
    int ablation_eval_episodes = 200;
    // paths
    std::string manifest = "manifest.txt";
    std::string checkpoint = "checkpoint.scpe";
    std::string out_dir = "out";

    ModelConfig model_config() const {
        ModelConfig m;
        m.image_size = image_size;
        m.patch_size = patch_size;
        m.d_model = d_model;
        m.n_heads = n_heads;
        m.n_gkp_layers = n_gkp_layers;
        m.n_interactor_layers = n_interactor_layers;
        m.k_max = k_max;
        m.n_filters = n_filters;
        m.af_hidden = af_hidden;
        m.ffn_hidden = ffn_hidden;
        m.head_hidden = head_hidden;
        m.token_sigma = token_sigma;
        m.dropout_p = dropout;
        m.gkp_query_ctx = gkp_query_ctx;
        m.use_identifiers = use_identifiers;
        m.variant = variant_from_name(variant);
        m.init_seed = init_seed;
        return m;
    }

    DataConfig data_config() const {
        DataConfig d;
        d.image_size = image_size;
        d.n_categories = categories;
        d.k_max = k_max;
        d.occlusion_p = occlusion_p;
        d.seed = data_seed;
        return d;
    }

    TrainSettings train_settings() const {
        TrainSettings t;
        t.steps = steps;
        t.batch_size = batch_size;
        t.n_shot = n_shot;
        t.base_lr = base_lr;
        t.epochs = epochs;
        t.seed = train_seed;
        t.n_threads = threads;
        return t;
    }
};

namespace runconfig_detail {

template <class F> void visit_fields(RunConfig& c, F&& f) {
    f("image_size", c.image_size);
    f("patch_size", c.patch_size);
    f("d_model", c.d_model);
    f("n_heads", c.n_heads);
    f("n_gkp_layers", c.n_gkp_layers);
    f("n_interactor_layers", c.n_interactor_layers);
    f("k_max", c.k_max);
    f("n_filters", c.n_filters);
    f("af_hidden", c.af_hidden);
    f("ffn_hidden", c.ffn_hidden);
    f("head_hidden", c.head_hidden);
    f("token_sigma", c.token_sigma);
    f("dropout", c.dropout);
    f("gkp_query_ctx", c.gkp_query_ctx);
    f("use_identifiers", c.use_identifiers);
    f("variant", c.variant);
    f("init_seed", c.init_seed);
    f("categories", c.categories);
    f("occlusion_p", c.occlusion_p);
    f("data_seed", c.data_seed);
    f("steps", c.steps);
    f("batch_size", c.batch_size);
    f("epochs", c.epochs);
    f("base_lr", c.base_lr);
    f("train_seed", c.train_seed);
    f("n_shot", c.n_shot);
    f("threads", c.threads);
    f("eval_episodes", c.eval_episodes);
    f("eval_seed", c.eval_seed);
    f("threshold", c.threshold);
    f("eval_split", c.eval_split);
    f("ablation_variants", c.ablation_variants);
    f("ablation_seeds", c.ablation_seeds);
    f("ablation_steps", c.ablation_steps);
    f("ablation_batch", c.ablation_batch);
    f("ablation_lr", c.ablation_lr);
    f("ablation_epochs", c.ablation_epochs);
    f("ablation_eval_episodes", c.ablation_eval_episodes);
    f("manifest", c.manifest);
    f("checkpoint", c.checkpoint);
    f("out_dir", c.out_dir);
}

inline std::string field_to_string(const int& v) { return std::to_string(v); }
inline std::string field_to_string(const uint64_t& v) { return std::to_string(v); }
inline std::string field_to_string(const bool& v) { return v ? "1" : "0"; }
inline std::string field_to_string(const double& v) { return fmt_double(v); }
inline std::string field_to_string(const std::string& v) { return v; }

inline void field_from_string(int& v, const std::string& s) { v = std::stoi(s); }
inline void field_from_string(uint64_t& v, const std::string& s) { v = std::stoull(s); }
inline void field_from_string(bool& v, const std::string& s) {
    if (s == "1" || s == "true") v = true;
    else if (s == "0" || s == "false") v = false;
    else throw std::invalid_argument("config: bad boolean value '" + s + "'");
}
inline void field_from_string(double& v, const std::string& s) { v = std::stod(s); }
inline void field_from_string(std::string& v, const std::string& s) { v = s; }

} // namespace runconfig_detail

inline std::string echo_run_config(const RunConfig& cfg) {
    std::map<std::string, std::string> kv;
    runconfig_detail::visit_fields(const_cast<RunConfig&>(cfg), [&](const char* name, auto& field) {
        kv[name] = runconfig_detail::field_to_string(field);
    });
    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
    return os.str();
}

// key=value lines, '#' comments; unknown keys are an error
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto ltrim = line.find_first_not_of(" \t\r");
        if (ltrim == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        bool found = false;
        runconfig_detail::visit_fields(cfg, [&](const char* name, auto& field) {
            if (key == name) {
                runconfig_detail::field_from_string(field, value);
                found = true;
            }
        });
        if (!found) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
}

inline RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    apply_config_text(cfg, text);
    return cfg;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    return echo_run_config(a) == echo_run_config(b);
}

} // namespace scape
