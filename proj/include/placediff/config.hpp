#pragma once

// Run configuration: JSON file with nested sections, strict unknown-key
// rejection, and flat dotted-path overrides (--set train.lr=2e-3).

#include <json.hpp>

#include <set>
#include <string>
#include <vector>

#include "io.hpp"

namespace placediff {

struct RunConfig {
    // world
    int places = 32;
    int n_scenes = 96;
    int views = 3;
    int image = 32;
    std::uint64_t world_seed = 2024;
    // schedule; beta_end is high enough that alpha_bar(T) is a few 1e-3,
    // otherwise sampling starts from a point the forward process never reaches
    int T = 100;
    double beta_start = 1e-4;
    double beta_end = 0.12;
    // model
    int d_model = 32;
    int blocks = 1;
    int d_place = 64;
    int place_tokens = 4;
    int perceiver_layers = 3;
    int perceiver_inner = 64;
    int proj_hidden = 128;
    std::string projector = "two_linear_tanh";
    // recognizer
    int recog_steps = 500;
    int recog_batch = 16;
    double recog_lr = 3e-3;
    // base stage
    int base_steps = 16000;
    int base_batch = 2;
    double base_lr = 1e-3;
    double base_loss_cap = 100.0;   // cap on the clean-image reweighting
    // controller stage
    int ctrl_steps = 4000;
    int ctrl_batch = 4;
    double ctrl_lr = 1e-3;
    double warmup_frac = 0.1;
    double ctrl_t_lo = 0.6;   // lowest controller-loss timestep, as a fraction of T
    double weight_decay = 0.01;
    double lambda = 0.1;
    double tau = 0.07;
    std::string reference = "other_frame";   // or same_frame
    // generation / eval
    int gen_count = 0;   // 0 = every val condition
    std::uint64_t seed = 1;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& section,
                           const std::set<std::string>& known) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw std::invalid_argument("config: unknown key '" + section + it.key() + "'");
        }
    }
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["world"] = {{"places", c.places}, {"n_scenes", c.n_scenes}, {"views", c.views},
                  {"image", c.image},   {"seed", c.world_seed}};
    j["schedule"] = {{"T", c.T}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
    j["model"] = {{"d_model", c.d_model},
                  {"blocks", c.blocks},
                  {"d_place", c.d_place},
                  {"place_tokens", c.place_tokens},
                  {"perceiver_layers", c.perceiver_layers},
                  {"perceiver_inner", c.perceiver_inner},
                  {"proj_hidden", c.proj_hidden},
                  {"projector", c.projector}};
    j["recognizer"] = {{"steps", c.recog_steps}, {"batch", c.recog_batch}, {"lr", c.recog_lr}};
    j["base"] = {{"steps", c.base_steps},
                 {"batch", c.base_batch},
                 {"lr", c.base_lr},
                 {"loss_cap", c.base_loss_cap}};
    j["controller"] = {{"steps", c.ctrl_steps},     {"batch", c.ctrl_batch},
                       {"lr", c.ctrl_lr},           {"warmup_frac", c.warmup_frac},
                       {"t_lo", c.ctrl_t_lo},
                       {"weight_decay", c.weight_decay}, {"lambda", c.lambda},
                       {"tau", c.tau},              {"reference", c.reference}};
    j["generate"] = {{"count", c.gen_count}};
    j["seed"] = c.seed;
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    using detail::reject_unknown;
    using detail::take;
    RunConfig c;
    reject_unknown(j, "", {"world", "schedule", "model", "recognizer", "base", "controller",
                           "generate", "seed"});
    if (j.contains("world")) {
        const auto& w = j.at("world");
        reject_unknown(w, "world.", {"places", "n_scenes", "views", "image", "seed"});
        take(w, "places", c.places);
        take(w, "n_scenes", c.n_scenes);
        take(w, "views", c.views);
        take(w, "image", c.image);
        take(w, "seed", c.world_seed);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        reject_unknown(s, "schedule.", {"T", "beta_start", "beta_end"});
        take(s, "T", c.T);
        take(s, "beta_start", c.beta_start);
        take(s, "beta_end", c.beta_end);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown(m, "model.", {"d_model", "blocks", "d_place", "place_tokens", "perceiver_layers",
                                     "perceiver_inner", "proj_hidden", "projector"});
        take(m, "d_model", c.d_model);
        take(m, "blocks", c.blocks);
        take(m, "d_place", c.d_place);
        take(m, "place_tokens", c.place_tokens);
        take(m, "perceiver_layers", c.perceiver_layers);
        take(m, "perceiver_inner", c.perceiver_inner);
        take(m, "proj_hidden", c.proj_hidden);
        take(m, "projector", c.projector);
    }
    if (j.contains("recognizer")) {
        const auto& r = j.at("recognizer");
        reject_unknown(r, "recognizer.", {"steps", "batch", "lr"});
        take(r, "steps", c.recog_steps);
        take(r, "batch", c.recog_batch);
        take(r, "lr", c.recog_lr);
    }
    if (j.contains("base")) {
        const auto& b = j.at("base");
        reject_unknown(b, "base.", {"steps", "batch", "lr", "loss_cap"});
        take(b, "steps", c.base_steps);
        take(b, "batch", c.base_batch);
        take(b, "lr", c.base_lr);
        take(b, "loss_cap", c.base_loss_cap);
    }
    if (j.contains("controller")) {
        const auto& t = j.at("controller");
        reject_unknown(t, "controller.", {"steps", "batch", "lr", "warmup_frac", "t_lo",
                                          "weight_decay", "lambda", "tau", "reference"});
        take(t, "steps", c.ctrl_steps);
        take(t, "batch", c.ctrl_batch);
        take(t, "lr", c.ctrl_lr);
        take(t, "warmup_frac", c.warmup_frac);
        take(t, "t_lo", c.ctrl_t_lo);
        take(t, "weight_decay", c.weight_decay);
        take(t, "lambda", c.lambda);
        take(t, "tau", c.tau);
        take(t, "reference", c.reference);
    }
    if (j.contains("generate")) {
        const auto& g = j.at("generate");
        reject_unknown(g, "generate.", {"count"});
        take(g, "count", c.gen_count);
    }
    take(j, "seed", c.seed);

    auto require = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("config: ") + what);
    };
    require(c.places >= 2, "world.places must be >= 2");
    require(c.n_scenes >= c.places, "world.n_scenes must cover every place");
    require(c.views >= 2 && c.views <= 3, "world.views must be 2 or 3");
    require(c.image >= 8 && (c.image & (c.image - 1)) == 0, "world.image must be a power of two >= 8");
    require(c.T >= 1, "schedule.T must be >= 1");
    require(c.beta_start > 0 && c.beta_end < 1 && c.beta_start <= c.beta_end,
            "schedule betas must satisfy 0 < start <= end < 1");
    require(c.d_model >= 8 && c.d_model % 4 == 0, "model.d_model must be a multiple of 4, >= 8");
    require(c.blocks >= 1, "model.blocks must be >= 1");
    require(c.d_place >= 4, "model.d_place must be >= 4");
    require(c.place_tokens >= 1, "model.place_tokens must be >= 1");
    require(c.perceiver_layers >= 1, "model.perceiver_layers must be >= 1");
    require(c.recog_steps > 0 && c.base_steps > 0 && c.ctrl_steps > 0, "step counts must be positive");
    require(c.recog_batch > 0 && c.base_batch > 0 && c.ctrl_batch > 0, "batch sizes must be positive");
    require(c.ctrl_batch >= 2, "controller.batch must be >= 2 (SoftCLIP needs a batch)");
    require(c.recog_lr > 0 && c.base_lr > 0 && c.ctrl_lr > 0, "learning rates must be positive");
    require(c.base_loss_cap >= 0, "base.loss_cap must be >= 0");
    require(c.warmup_frac >= 0 && c.warmup_frac < 1, "controller.warmup_frac must be in [0, 1)");
    require(c.ctrl_t_lo >= 0 && c.ctrl_t_lo < 1, "controller.t_lo must be in [0, 1)");
    require(c.weight_decay >= 0, "controller.weight_decay must be >= 0");
    require(c.lambda >= 0, "controller.lambda must be >= 0");
    require(c.tau > 0, "controller.tau must be positive");
    require(c.reference == "other_frame" || c.reference == "same_frame",
            "controller.reference must be other_frame or same_frame");
    require(c.gen_count >= 0, "generate.count must be >= 0");
    // valid projector name or throws
    (void)c.projector;
    if (c.projector != "two_linear_tanh" && c.projector != "pure_linear" &&
        c.projector != "cascaded_mlp") {
        throw std::invalid_argument("config: model.projector unknown: " + c.projector);
    }
    return c;
}

// "a.b.c=value" applied onto the JSON tree; value parsed as JSON when possible
inline void apply_override(nlohmann::json& j, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("override must be key=value: " + kv);
    const std::string path = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    nlohmann::json val;
    try {
        val = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
        val = raw;   // bare string
    }
    nlohmann::json* node = &j;
    std::size_t at = 0;
    while (true) {
        const auto dot = path.find('.', at);
        const std::string key = path.substr(at, dot == std::string::npos ? dot : dot - at);
        if (key.empty()) throw std::invalid_argument("override has empty path segment: " + kv);
        if (dot == std::string::npos) {
            (*node)[key] = val;
            return;
        }
        node = &(*node)[key];
        at = dot + 1;
    }
}

inline RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
    nlohmann::json j = nlohmann::json::parse(read_file(path));
    for (const auto& kv : overrides) apply_override(j, kv);
    return config_from_json(j);
}

}  // namespace placediff
