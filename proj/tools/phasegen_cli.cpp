// Command-line front end. Every subcommand loads a config, runs one pipeline
// stage, and leaves a run_record.json in the output directory.

#include <CLI11.hpp>

#include "phasegen/pipeline.hpp"
#include "phasegen/report.hpp"

using namespace phasegen;

namespace {

struct CommonArgs {
    std::string config;
    std::string out;
    uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool need_config = true) {
    auto* copt = cmd->add_option("--config", a.config, "experiment config (json)");
    if (need_config) copt->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", a.out, "output directory")->required();
    cmd->add_option("--seed", a.seed, "override the config's global seed")
        ->each([&a](const std::string&) { a.seed_set = true; });
}

ExperimentConfig load_with_overrides(const CommonArgs& a) {
    ExperimentConfig cfg = load_config(a.config);
    if (a.seed_set) cfg.seed = a.seed;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"joint micrograph/mask synthesis and segmentation pipeline"};
    app.require_subcommand(1);

    CommonArgs toy_a, prep_a, tdiff_a, tsr_a, gen_a, up_a, tseg_a, egen_a, eseg_a, rep_a;
    std::string tiles, ckpt, synth_dir, records_root, mode;
    int ratio = -1, steps = 0;

    auto* toy_cmd = app.add_subcommand("toy", "generate a procedural corpus");
    add_common(toy_cmd, toy_a);

    auto* prep = app.add_subcommand("prepare", "ingest and tile a real corpus");
    add_common(prep, prep_a);

    auto* tdiff = app.add_subcommand("train-diff", "train the base diffusion model");
    add_common(tdiff, tdiff_a);
    tdiff->add_option("--tiles", tiles, "tile store directory")->required();
    tdiff->add_option("--steps", steps, "override optimizer step count");

    auto* tsr = app.add_subcommand("train-sr", "train the super-resolution stage");
    add_common(tsr, tsr_a);
    tsr->add_option("--tiles", tiles, "tile store directory (HR tiles)")->required();
    tsr->add_option("--steps", steps, "override optimizer step count");

    auto* gen = app.add_subcommand("gen", "sample synthetic image/mask pairs");
    add_common(gen, gen_a);
    gen->add_option("--tiles", tiles, "tile store directory")->required();
    gen->add_option("--ckpt", ckpt, "diffusion checkpoint")->required();
    gen->add_option("--steps", steps, "override inference step count");
    gen->add_option("--mode", mode, "sampler mode")
        ->check(CLI::IsMember({"paper_stochastic", "deterministic"}));

    auto* up = app.add_subcommand("upscale", "super-resolve a generation run");
    add_common(up, up_a);
    up->add_option("--synth", synth_dir, "generation output directory")->required();
    up->add_option("--ckpt", ckpt, "SR checkpoint")->required();
    up->add_option("--steps", steps, "override inference step count");
    up->add_option("--mode", mode, "sampler mode")
        ->check(CLI::IsMember({"paper_stochastic", "deterministic"}));

    auto* tseg = app.add_subcommand("train-seg", "train a segmenter on a real+synthetic mix");
    add_common(tseg, tseg_a);
    tseg->add_option("--tiles", tiles, "tile store directory")->required();
    tseg->add_option("--synth", synth_dir, "generation output directory");
    tseg->add_option("--ratio", ratio, "synthetic-to-real multiplier");
    tseg->add_option("--steps", steps, "override optimizer step count");

    auto* egen = app.add_subcommand("eval-gen", "score a generation run");
    add_common(egen, egen_a);
    egen->add_option("--tiles", tiles, "tile store directory")->required();
    egen->add_option("--synth", synth_dir, "generation output directory")->required();

    auto* eseg = app.add_subcommand("eval-seg", "evaluate a segmenter on the test split");
    add_common(eseg, eseg_a);
    eseg->add_option("--tiles", tiles, "tile store directory")->required();
    eseg->add_option("--ckpt", ckpt, "segmenter checkpoint")->required();

    auto* rep = app.add_subcommand("report", "aggregate run records into a report");
    add_common(rep, rep_a, /*need_config=*/false);
    rep->add_option("--records", records_root, "directory scanned for run records")
        ->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*toy_cmd) {
            run_toy(load_with_overrides(toy_a), toy_a.out);
        } else if (*prep) {
            run_prepare(load_with_overrides(prep_a), prep_a.out);
        } else if (*tdiff) {
            ExperimentConfig cfg = load_with_overrides(tdiff_a);
            if (steps > 0) cfg.diff_train.steps = steps;
            run_train_diff(cfg, tiles, tdiff_a.out);
        } else if (*tsr) {
            ExperimentConfig cfg = load_with_overrides(tsr_a);
            if (steps > 0) cfg.sr_train.steps = steps;
            run_train_sr(cfg, tiles, tsr_a.out);
        } else if (*gen) {
            ExperimentConfig cfg = load_with_overrides(gen_a);
            if (steps > 0) cfg.sampler.t_infer = steps;
            if (!mode.empty()) cfg.sampler.mode = sample_mode_from_string(mode);
            run_gen(cfg, tiles, ckpt, gen_a.out);
        } else if (*up) {
            ExperimentConfig cfg = load_with_overrides(up_a);
            if (steps > 0) cfg.sampler.t_infer = steps;
            if (!mode.empty()) cfg.sampler.mode = sample_mode_from_string(mode);
            run_upscale(cfg, synth_dir, ckpt, up_a.out);
        } else if (*tseg) {
            ExperimentConfig cfg = load_with_overrides(tseg_a);
            if (steps > 0) cfg.seg_train.steps = steps;
            const int r = ratio >= 0 ? ratio : cfg.mix_ratio;
            if (r > 0 && synth_dir.empty())
                throw Error("train-seg with ratio > 0 needs --synth");
            run_train_seg(cfg, tiles, synth_dir, r, 0, tseg_a.out);
        } else if (*egen) {
            run_eval_gen(load_with_overrides(egen_a), tiles, synth_dir, egen_a.out);
        } else if (*eseg) {
            run_eval_seg(load_with_overrides(eseg_a), tiles, ckpt, eseg_a.out);
        } else if (*rep) {
            emit_report(records_root, rep_a.out);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
