// placediff command-line pipeline:
//   gen-data -> train-recognizer -> train-base -> train-controller
//   -> generate -> eval, plus ablate and augment loops.

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "placediff/pipeline.hpp"

using namespace placediff;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "run";
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_path, "JSON config file (defaults used when omitted)");
    cmd->add_option("--set", a.overrides, "override config entries, e.g. --set controller.lr=2e-3");
    cmd->add_option("--out", a.out_dir, "run directory");
    cmd->add_option("--seed", a.seed, "override the run seed");
}

RunConfig resolve(const CommonArgs& a) {
    RunConfig cfg;
    if (!a.config_path.empty()) {
        cfg = load_config(a.config_path, a.overrides);
    } else {
        nlohmann::json j = config_to_json(RunConfig{});
        for (const auto& kv : a.overrides) apply_override(j, kv);
        cfg = config_from_json(j);
    }
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    return cfg;
}

AblationArm arm_from(const std::string& s) {
    for (AblationArm a : {AblationArm::no_perceiver, AblationArm::no_softclip,
                          AblationArm::cascaded_mlps, AblationArm::full}) {
        if (s == ablation_arm_name(a)) return a;
    }
    throw CLI::ValidationError("--variant", "unknown controller variant: " + s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"placediff: multi-view diffusion with place-ID control on a toy street world"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string variant = "full";
    std::string tag = "default";
    bool unconditioned = false;
    std::int64_t gen_seed = 1;

    auto* c_data = app.add_subcommand("gen-data", "render the procedural dataset splits");
    add_common(c_data, args);
    auto* c_recog = app.add_subcommand("train-recognizer", "train and freeze the place recognizer");
    add_common(c_recog, args);
    auto* c_base = app.add_subcommand("train-base", "train the base conditional diffusion model");
    add_common(c_base, args);
    auto* c_ctrl = app.add_subcommand("train-controller", "train the place-ID controller (base frozen)");
    add_common(c_ctrl, args);
    c_ctrl->add_option("--variant", variant, "full|no_perceiver|no_softclip|cascaded_mlps");
    auto* c_gen = app.add_subcommand("generate", "sample scenes for the validation conditions");
    add_common(c_gen, args);
    c_gen->add_option("--tag", tag, "output tag (gen_<tag>/)");
    c_gen->add_option("--variant", variant, "controller variant checkpoint to use");
    c_gen->add_flag("--unconditioned", unconditioned, "drop the place tokens (base model only)");
    c_gen->add_option("--gen-seed", gen_seed, "sampling seed");
    auto* c_eval = app.add_subcommand("eval", "fidelity + retrieval metrics for a generated set");
    add_common(c_eval, args);
    c_eval->add_option("--tag", tag, "generated set tag to evaluate");
    auto* c_ablate = app.add_subcommand("ablate", "train and score all controller variants");
    add_common(c_ablate, args);
    auto* c_augment = app.add_subcommand("augment", "recognizer retraining with synthetic data");
    add_common(c_augment, args);

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig cfg = resolve(args);
        const fs::path dir = args.out_dir;
        if (c_data->parsed()) {
            stage_gen_data(cfg, dir);
        } else if (c_recog->parsed()) {
            stage_train_recognizer(cfg, dir);
        } else if (c_base->parsed()) {
            stage_train_base(cfg, dir);
        } else if (c_ctrl->parsed()) {
            stage_train_controller(cfg, dir, arm_from(variant));
        } else if (c_gen->parsed()) {
            GenOptions opt;
            opt.tag = tag;
            opt.conditioned = !unconditioned;
            opt.arm = arm_from(variant);
            opt.seed = static_cast<std::uint64_t>(gen_seed);
            stage_generate(cfg, dir, opt);
        } else if (c_eval->parsed()) {
            const EvalReport rep = stage_eval(cfg, dir, tag);
            std::printf("frechet=%.6f ar1=%.4f ar5=%.4f\n", rep.frechet, rep.ar1, rep.ar5);
        } else if (c_ablate->parsed()) {
            for (const auto& row : stage_ablate(cfg, dir)) {
                std::printf("%-14s %s ar1=%.4f ar5=%.4f\n", row.arm.c_str(),
                            row.failed ? "FAILED" : "ok    ", row.ar1, row.ar5);
            }
        } else if (c_augment->parsed()) {
            for (const auto& row : stage_augment(cfg, dir)) {
                std::printf("%-10s ar1=%.4f ar5=%.4f\n", row.arm.c_str(), row.ar1, row.ar5);
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
