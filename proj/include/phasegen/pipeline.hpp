#pragma once
// Experiment orchestration: configuration schema, tile stores on disk,
// run records, seed fan-out, and the stage runners behind the CLI.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/corpus.hpp"
#include "phasegen/diffusion.hpp"
#include "phasegen/evalgen.hpp"
#include "phasegen/fractions.hpp"
#include "phasegen/segment.hpp"
#include "phasegen/toygen.hpp"

namespace phasegen {

inline constexpr int kRecordVersion = 1;

// ---------------------------------------------------------------------------
// JSON bindings for the config types
// ---------------------------------------------------------------------------

struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::cosine;
    int t_train = 1000;
};

inline void to_json(json& j, const ScheduleConfig& s) {
    j = json{{"kind", to_string(s.kind)}, {"t_train", s.t_train}};
}
inline void from_json(const json& j, ScheduleConfig& s) {
    s.kind = schedule_kind_from_string(j.at("kind").get<std::string>());
    j.at("t_train").get_to(s.t_train);
}

inline void to_json(json& j, const SamplerConfig& s) {
    j = json{{"t_infer", s.t_infer}, {"mode", to_string(s.mode)}, {"seed", s.seed}};
}
inline void from_json(const json& j, SamplerConfig& s) {
    j.at("t_infer").get_to(s.t_infer);
    s.mode = sample_mode_from_string(j.at("mode").get<std::string>());
    j.at("seed").get_to(s.seed);
}

inline void to_json(json& j, const JitterConfig& c) {
    j = json{{"sigma", c.sigma}, {"eps_floor", c.eps_floor}};
}
inline void from_json(const json& j, JitterConfig& c) {
    j.at("sigma").get_to(c.sigma);
    j.at("eps_floor").get_to(c.eps_floor);
}

inline void to_json(json& j, const MixtureConfig& c) {
    j = json{{"w_uniform", c.w_uniform},         {"w_ma_rich", c.w_ma_rich},
             {"w_defect_rich", c.w_defect_rich}, {"rich_quantile", c.rich_quantile},
             {"ma_class", c.ma_class},           {"defect_class", c.defect_class}};
}
inline void from_json(const json& j, MixtureConfig& c) {
    j.at("w_uniform").get_to(c.w_uniform);
    j.at("w_ma_rich").get_to(c.w_ma_rich);
    j.at("w_defect_rich").get_to(c.w_defect_rich);
    j.at("rich_quantile").get_to(c.rich_quantile);
    j.at("ma_class").get_to(c.ma_class);
    j.at("defect_class").get_to(c.defect_class);
}

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"steps", c.steps},
             {"batch_size", c.batch_size},
             {"lr", c.lr},
             {"weight_decay", c.weight_decay},
             {"cosine_lr", c.cosine_lr},
             {"lambda_l1", c.loss.lambda},
             {"log_every", c.log_every},
             {"checkpoint_every", c.checkpoint_every}};
}
inline void from_json(const json& j, TrainConfig& c) {
    j.at("steps").get_to(c.steps);
    j.at("batch_size").get_to(c.batch_size);
    j.at("lr").get_to(c.lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("cosine_lr").get_to(c.cosine_lr);
    j.at("lambda_l1").get_to(c.loss.lambda);
    j.at("log_every").get_to(c.log_every);
    j.at("checkpoint_every").get_to(c.checkpoint_every);
}

inline void to_json(json& j, const SegTrainConfig& c) {
    j = json{{"steps", c.steps},   {"batch_size", c.batch_size},
             {"lr", c.lr},         {"weight_decay", c.weight_decay},
             {"cosine_lr", c.cosine_lr}, {"log_every", c.log_every}};
}
inline void from_json(const json& j, SegTrainConfig& c) {
    j.at("steps").get_to(c.steps);
    j.at("batch_size").get_to(c.batch_size);
    j.at("lr").get_to(c.lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("cosine_lr").get_to(c.cosine_lr);
    j.at("log_every").get_to(c.log_every);
}

inline void to_json(json& j, const ToyConfig& c) {
    j = json{{"num_classes", c.num_classes},   {"image_size", c.image_size},
             {"num_samples", c.num_samples},   {"abundance", c.abundance},
             {"concentration", c.concentration}, {"smoothness", c.smoothness},
             {"texture_amp", c.texture_amp},   {"noise_amp", c.noise_amp},
             {"test_fraction", c.test_fraction}};
}
inline void from_json(const json& j, ToyConfig& c) {
    j.at("num_classes").get_to(c.num_classes);
    j.at("image_size").get_to(c.image_size);
    j.at("num_samples").get_to(c.num_samples);
    j.at("abundance").get_to(c.abundance);
    j.at("concentration").get_to(c.concentration);
    j.at("smoothness").get_to(c.smoothness);
    j.at("texture_amp").get_to(c.texture_amp);
    j.at("noise_amp").get_to(c.noise_amp);
    j.at("test_fraction").get_to(c.test_fraction);
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    std::string manifest;  // corpus manifest path ("" for procedural corpora)
    int tile_size = 128;   // base diffusion resolution
    int sr_size = 256;     // super-resolution target
    int seg_window = 128;
    double seg_overlap = 0.5;
    int gen_count = 200;   // synthetic pairs per generation run
    int mix_ratio = 4;     // synthetic-to-real multiplier for train-seg

    ScheduleConfig schedule;
    DenoiserSpec denoiser;
    SRSpec sr;
    DenoiserSpec segmenter;
    SamplerConfig sampler;
    JitterConfig jitter;
    MixtureConfig mixture;
    TrainConfig diff_train;
    TrainConfig sr_train;
    SegTrainConfig seg_train;
    ToyConfig toy;
    uint64_t seed = 0;

    ExperimentConfig() {
        sr.lr_size = 128;
        sr.hr_size = 256;
        sr.net.in_channels = 8;
        sr.net.out_channels = 4;
        sr.net.condition_dim = 0;
        sr.net.stage_widths = {64, 64, 128};
        sr.net.attention = AttentionMode::none;
        segmenter = default_segmenter_spec(4);
    }

    void validate() const {
        require(tile_size > 0, "tile_size must be positive");
        require(sr_size == 2 * tile_size, "sr_size must be twice tile_size");
        require(sr.lr_size == tile_size && sr.hr_size == sr_size,
                "sr stage sizes must match tile_size/sr_size");
        const int diff_div = 1 << (static_cast<int>(denoiser.stage_widths.size()) - 1);
        require(tile_size % diff_div == 0, "tile_size must be divisible by 2^(stages-1)");
        const int sr_div = 1 << (static_cast<int>(sr.net.stage_widths.size()) - 1);
        require(sr_size % sr_div == 0, "sr_size must be divisible by SR 2^(stages-1)");
        require(seg_window > 0, "seg_window must be positive");
        require(seg_overlap >= 0 && seg_overlap < 1, "seg_overlap must be in [0,1)");
        require(gen_count >= 1, "gen_count must be >= 1");
        require(mix_ratio >= 0, "mix_ratio must be >= 0");
        require(schedule.t_train >= 2, "t_train must be >= 2");
        denoiser.validate();
        sr.validate();
        segmenter.validate();
        sampler.validate(schedule.t_train);
        jitter.validate();
        mixture.validate();
        diff_train.validate();
        sr_train.validate();
        seg_train.validate();
    }
};

inline void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"manifest", c.manifest},
             {"tile_size", c.tile_size},
             {"sr_size", c.sr_size},
             {"seg_window", c.seg_window},
             {"seg_overlap", c.seg_overlap},
             {"gen_count", c.gen_count},
             {"mix_ratio", c.mix_ratio},
             {"schedule", c.schedule},
             {"denoiser", c.denoiser},
             {"sr", c.sr},
             {"segmenter", c.segmenter},
             {"sampler", c.sampler},
             {"jitter", c.jitter},
             {"mixture", c.mixture},
             {"diff_train", c.diff_train},
             {"sr_train", c.sr_train},
             {"seg_train", c.seg_train},
             {"toy", c.toy},
             {"seed", c.seed}};
}
inline void from_json(const json& j, ExperimentConfig& c) {
    j.at("manifest").get_to(c.manifest);
    j.at("tile_size").get_to(c.tile_size);
    j.at("sr_size").get_to(c.sr_size);
    j.at("seg_window").get_to(c.seg_window);
    j.at("seg_overlap").get_to(c.seg_overlap);
    j.at("gen_count").get_to(c.gen_count);
    j.at("mix_ratio").get_to(c.mix_ratio);
    j.at("schedule").get_to(c.schedule);
    j.at("denoiser").get_to(c.denoiser);
    j.at("sr").get_to(c.sr);
    j.at("segmenter").get_to(c.segmenter);
    j.at("sampler").get_to(c.sampler);
    j.at("jitter").get_to(c.jitter);
    j.at("mixture").get_to(c.mixture);
    j.at("diff_train").get_to(c.diff_train);
    j.at("sr_train").get_to(c.sr_train);
    j.at("seg_train").get_to(c.seg_train);
    j.at("toy").get_to(c.toy);
    j.at("seed").get_to(c.seed);
}

inline ExperimentConfig load_config(const fs::path& path) {
    json j = json::parse(read_text_file(path));
    ExperimentConfig c = j.get<ExperimentConfig>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Tile store: a directory of PGM pairs plus an index file. The `prepare` and
// `toy` stages write one; training and evaluation stages read it back.
// ---------------------------------------------------------------------------

struct TileStore {
    std::vector<Tile> tiles;
    std::vector<std::string> class_names;
    Palette palette;
    int num_classes = 0;

    std::vector<Tile> split(const std::string& tag) const {
        std::vector<Tile> out;
        for (const auto& t : tiles)
            if (t.split == tag) out.push_back(t);
        return out;
    }
};

inline void save_tile_store(const fs::path& dir, const TileStore& store) {
    fs::create_directories(dir);
    json index;
    index["format_version"] = kRecordVersion;
    index["classes"] = store.class_names;
    json pal = json::array();
    for (const auto& e : store.palette.entries) pal.push_back({e[0], e[1], e[2]});
    index["palette"] = pal;
    json tiles = json::array();
    for (size_t i = 0; i < store.tiles.size(); ++i) {
        const Tile& t = store.tiles[i];
        char name[32];
        std::snprintf(name, sizeof(name), "tile_%05zu", i);
        std::string img = std::string(name) + "_img.pgm";
        std::string mask = std::string(name) + "_mask.pgm";
        write_image_pgm(dir / img, t.image);
        write_mask_pgm(dir / mask, t.mask);
        tiles.push_back({{"image", img},
                         {"mask", mask},
                         {"split", t.split},
                         {"source", t.source_id},
                         {"row", t.row_offset},
                         {"col", t.col_offset}});
    }
    index["tiles"] = tiles;
    write_text_file(dir / "tiles.json", index.dump(2));
}

inline TileStore load_tile_store(const fs::path& dir) {
    json index = json::parse(read_text_file(dir / "tiles.json"));
    TileStore store;
    store.class_names = index.at("classes").get<std::vector<std::string>>();
    store.num_classes = static_cast<int>(store.class_names.size());
    for (const auto& row : index.at("palette"))
        store.palette.entries.push_back(
            {row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
    for (const auto& tj : index.at("tiles")) {
        Tile t;
        t.image = image_from_raw(read_pgm(dir / tj.at("image").get<std::string>()));
        t.mask = read_mask_pgm(dir / tj.at("mask").get<std::string>(), store.num_classes);
        t.split = tj.at("split").get<std::string>();
        t.source_id = tj.at("source").get<std::string>();
        t.row_offset = tj.at("row").get<int>();
        t.col_offset = tj.at("col").get<int>();
        store.tiles.push_back(std::move(t));
    }
    return store;
}

/// Class count implied by a generation run's sidecar (length of the targets).
inline int synthetic_num_classes(const fs::path& dir) {
    std::ifstream f(dir / "records.jsonl");
    require(f.good(), "cannot open synthetic records in " + dir.string());
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        return static_cast<int>(json::parse(line).at("target").size());
    }
    throw Error("no synthetic records found in " + dir.string());
}

/// Load a generation run's output (records.jsonl + PGM pairs).
inline SyntheticCorpus load_synthetic(const fs::path& dir, int num_classes) {
    std::ifstream f(dir / "records.jsonl");
    require(f.good(), "cannot open synthetic records in " + dir.string());
    SyntheticCorpus out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        SynthRecord rec;
        rec.index = j.at("index").get<int>();
        rec.target = PhaseFraction(j.at("target").get<std::vector<double>>());
        rec.seed = j.at("seed").get<uint64_t>();
        rec.realized = PhaseFraction(j.at("realized").get<std::vector<double>>());
        rec.image_path = j.at("image").get<std::string>();
        rec.mask_path = j.at("mask").get<std::string>();
        std::string b = j.at("branch").get<std::string>();
        rec.branch = b == "ma_rich"       ? Branch::ma_rich
                     : b == "defect_rich" ? Branch::defect_rich
                                          : Branch::uniform;
        Tile t;
        t.image = image_from_raw(read_pgm(rec.image_path));
        t.mask = read_mask_pgm(rec.mask_path, num_classes);
        t.split = "synthetic";
        t.source_id = "synthetic-" + std::to_string(rec.index);
        out.tiles.push_back(std::move(t));
        out.records.push_back(std::move(rec));
    }
    require(!out.records.empty(), "no synthetic records found in " + dir.string());
    return out;
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

inline std::string hardware_descriptor() {
    std::ifstream f("/proc/cpuinfo");
    std::string line;
    while (std::getline(f, line)) {
        auto pos = line.find("model name");
        if (pos != std::string::npos) {
            auto colon = line.find(':');
            if (colon != std::string::npos) return line.substr(colon + 2);
        }
    }
    return "unknown cpu";
}

struct RunRecord {
    std::string stage;
    json config;
    uint64_t global_seed = 0;
    uint64_t stage_seed = 0;
    std::string seed_stream;
    json timings = json::object();
    json checkpoints = json::object();
    json metrics = json::object();
    std::string hardware = hardware_descriptor();
};

inline json record_json(const RunRecord& r) {
    return json{{"format_version", kRecordVersion},
                {"stage", r.stage},
                {"config", r.config},
                {"global_seed", r.global_seed},
                {"stage_seed", r.stage_seed},
                {"seed_stream", r.seed_stream},
                {"timings", r.timings},
                {"checkpoints", r.checkpoints},
                {"metrics", r.metrics},
                {"hardware", r.hardware}};
}

inline void write_run_record(const fs::path& out_dir, const RunRecord& r) {
    fs::create_directories(out_dir);
    write_text_file(out_dir / "run_record.json", record_json(r).dump(2));
}

class StageTimer {
public:
    StageTimer() : t0_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

private:
    std::chrono::steady_clock::time_point t0_;
};

/// Stage seed = substream of the global seed named after the stage.
inline uint64_t stage_seed(const ExperimentConfig& cfg, const std::string& stage) {
    return derive_seed(cfg.seed, stage);
}

// ---------------------------------------------------------------------------
// Denoiser instrumentation
// ---------------------------------------------------------------------------

template <typename S>
class CountingDenoiser : public Denoiser<S> {
public:
    explicit CountingDenoiser(Denoiser<S>& inner) : inner_(&inner) {}

    Tensor<S> predict(const Tensor<S>& x_t, int t, const std::vector<S>& cond) override {
        ++calls_;
        return inner_->predict(x_t, t, cond);
    }
    int in_channels() const override { return inner_->in_channels(); }
    int out_channels() const override { return inner_->out_channels(); }

    size_t calls() const { return calls_; }
    void reset() { calls_ = 0; }

private:
    Denoiser<S>* inner_;
    size_t calls_ = 0;
};

struct GenTiming {
    double mean_seconds = 0.0;
    double std_seconds = 0.0;
    size_t calls_per_pair = 0;
    std::string hardware = hardware_descriptor();
};

/// Wall-clock mean/std over n sampled pairs plus the denoiser call count.
template <typename S>
GenTiming measure_generation_time(Denoiser<S>& den, const NoiseSchedule& sched,
                                  const PhaseFraction& cond, const SamplerConfig& cfg,
                                  const Palette& palette, int height, int width, int n,
                                  uint64_t seed) {
    require(n >= 1, "timing needs n >= 1");
    CountingDenoiser<S> counted(den);
    std::vector<double> times;
    for (int i = 0; i < n; ++i) {
        Rng rng = make_rng(derive_seed(seed, "timing", static_cast<uint64_t>(i)));
        StageTimer timer;
        (void)sample_pair(counted, sched, cond, cfg, palette, height, width, rng);
        times.push_back(timer.seconds());
    }
    GenTiming out;
    for (double t : times) out.mean_seconds += t;
    out.mean_seconds /= n;
    double var = 0;
    for (double t : times) var += (t - out.mean_seconds) * (t - out.mean_seconds);
    out.std_seconds = std::sqrt(var / n);
    out.calls_per_pair = counted.calls() / static_cast<size_t>(n);
    return out;
}

// ---------------------------------------------------------------------------
// Stage runners (shared by the CLI and the end-to-end tests)
// ---------------------------------------------------------------------------

/// `toy`: procedural corpus written as a tile store.
inline RunRecord run_toy(const ExperimentConfig& cfg, const fs::path& out_dir) {
    StageTimer timer;
    const uint64_t seed = stage_seed(cfg, "toy");
    Corpus corpus = generate_toy_corpus(cfg.toy, seed);
    TileStore store;
    store.class_names = corpus.class_names;
    store.palette = corpus.palette;
    store.num_classes = corpus.num_classes;
    for (const auto& s : corpus.sources) {
        Tile t;
        t.image = s.image;
        t.mask = s.mask;
        t.source_id = s.id;
        t.split = s.split;
        store.tiles.push_back(std::move(t));
    }
    save_tile_store(out_dir / "tiles", store);

    RunRecord rec;
    rec.stage = "toy";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = seed;
    rec.seed_stream = "toy";
    rec.timings["stage_seconds"] = timer.seconds();
    rec.metrics["tile_count"] = store.tiles.size();
    rec.metrics["train_count"] = store.split("train").size();
    rec.metrics["test_count"] = store.split("test").size();
    write_run_record(out_dir, rec);
    return rec;
}

/// `prepare`: manifest-driven ingestion + tiling + corpus statistics.
inline RunRecord run_prepare(const ExperimentConfig& cfg, const fs::path& out_dir) {
    require(!cfg.manifest.empty(), "prepare requires a corpus manifest");
    StageTimer timer;
    CorpusManifest manifest = CorpusManifest::load(cfg.manifest);
    Corpus corpus = ingest_corpus(manifest);
    std::vector<Tile> tiles = tile_corpus(corpus, cfg.tile_size);

    TileStore store;
    store.class_names = corpus.class_names;
    store.palette = corpus.palette;
    store.num_classes = corpus.num_classes;
    store.tiles = std::move(tiles);
    save_tile_store(out_dir / "tiles", store);

    PhaseFraction ratio = class_ratio(corpus);
    RunRecord rec;
    rec.stage = "prepare";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = stage_seed(cfg, "prepare");
    rec.seed_stream = "prepare";
    rec.timings["stage_seconds"] = timer.seconds();
    rec.metrics["source_count"] = corpus.sources.size();
    rec.metrics["train_sources"] = corpus.count_split("train");
    rec.metrics["test_sources"] = corpus.count_split("test");
    rec.metrics["tile_count"] = store.tiles.size();
    size_t train_tiles = 0;
    for (const auto& t : store.tiles) train_tiles += (t.split == "train");
    rec.metrics["train_tiles"] = train_tiles;
    rec.metrics["class_ratio"] = ratio.f;
    write_run_record(out_dir, rec);
    return rec;
}

/// `train-diff`: base-stage diffusion training on the train split.
inline RunRecord run_train_diff(const ExperimentConfig& cfg, const fs::path& tiles_dir,
                                const fs::path& out_dir) {
    StageTimer timer;
    TileStore store = load_tile_store(tiles_dir);
    std::vector<Tile> train = store.split("train");
    require(!train.empty(), "tile store has no train tiles");

    DenoiserSpec spec = cfg.denoiser;
    spec.condition_dim = store.num_classes;
    CondUNet<float> net(spec);
    const uint64_t seed = stage_seed(cfg, "train-diff");
    Rng rng = make_rng(seed);
    net.init(rng);

    NoiseSchedule sched = build_schedule(cfg.schedule.kind, cfg.schedule.t_train);
    TrainConfig tc = cfg.diff_train;
    tc.seed = seed;
    fs::create_directories(out_dir);
    tc.checkpoint_path = (out_dir / "diffusion.ckpt").string();
    tc.loss_log_path = (out_dir / "loss.jsonl").string();
    TrainReport report = train_diffusion(train, store.palette, net, sched, tc);

    RunRecord rec;
    rec.stage = "train-diff";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = seed;
    rec.seed_stream = "train-diff";
    rec.timings["stage_seconds"] = timer.seconds();
    rec.checkpoints["diffusion"] = report.checkpoint_path;
    rec.metrics["final_loss"] = report.final_loss;
    rec.metrics["steps"] = tc.steps;
    write_run_record(out_dir, rec);
    return rec;
}

/// `train-sr`: super-resolution stage on HR tiles (tile store at sr_size).
inline RunRecord run_train_sr(const ExperimentConfig& cfg, const fs::path& tiles_dir,
                              const fs::path& out_dir) {
    StageTimer timer;
    TileStore store = load_tile_store(tiles_dir);
    std::vector<Tile> train = store.split("train");
    require(!train.empty(), "tile store has no train tiles");

    CondUNet<float> net(cfg.sr.net);
    const uint64_t seed = stage_seed(cfg, "train-sr");
    Rng rng = make_rng(seed);
    net.init(rng);

    NoiseSchedule sched = build_schedule(cfg.schedule.kind, cfg.schedule.t_train);
    TrainConfig tc = cfg.sr_train;
    tc.seed = seed;
    fs::create_directories(out_dir);
    tc.checkpoint_path = (out_dir / "sr.ckpt").string();
    tc.loss_log_path = (out_dir / "loss.jsonl").string();
    TrainReport report = train_sr(train, store.palette, cfg.sr, net, sched, tc);

    RunRecord rec;
    rec.stage = "train-sr";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = seed;
    rec.seed_stream = "train-sr";
    rec.timings["stage_seconds"] = timer.seconds();
    rec.checkpoints["sr"] = report.checkpoint_path;
    rec.metrics["final_loss"] = report.final_loss;
    write_run_record(out_dir, rec);
    return rec;
}

/// `gen`: sample cfg.gen_count pairs conditioned on jittered real fractions.
inline RunRecord run_gen(const ExperimentConfig& cfg, const fs::path& tiles_dir,
                         const fs::path& checkpoint, const fs::path& out_dir) {
    require(fs::exists(checkpoint), "missing diffusion checkpoint: " + checkpoint.string());
    StageTimer timer;
    TileStore store = load_tile_store(tiles_dir);
    std::vector<Tile> train = store.split("train");
    require(!train.empty(), "tile store has no train tiles");
    std::vector<PhaseFraction> real_fracs;
    for (const auto& t : train) real_fracs.push_back(extract_fraction(t.mask));

    json ckpt_extra;
    auto net = load_denoiser<float>(checkpoint.string(), &ckpt_extra);
    NoiseSchedule sched = build_schedule(cfg.schedule.kind, cfg.schedule.t_train);

    const uint64_t seed = stage_seed(cfg, "gen");
    GenerationConfig gc;
    gc.sampler = cfg.sampler;
    gc.jitter = cfg.jitter;
    gc.mixture = cfg.mixture;
    gc.height = cfg.tile_size;
    gc.width = cfg.tile_size;
    gc.out_dir = (out_dir / "synthetic").string();

    CountingDenoiser<float> counted(*net);
    SyntheticCorpus synth =
        full_generation_run(counted, sched, real_fracs, cfg.gen_count, gc, store.palette, seed);
    const double total = timer.seconds();

    RunRecord rec;
    rec.stage = "gen";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = seed;
    rec.seed_stream = "gen";
    rec.timings["stage_seconds"] = total;
    rec.timings["mean_pair_seconds"] = total / cfg.gen_count;
    rec.timings["denoiser_calls_per_pair"] =
        counted.calls() / static_cast<size_t>(cfg.gen_count);
    rec.metrics["pairs"] = synth.records.size();
    json branches = json::object();
    for (const auto& r : synth.records) {
        std::string b = to_string(r.branch);
        branches[b] = branches.value(b, 0) + 1;
    }
    rec.metrics["branches"] = branches;
    rec.checkpoints["diffusion"] = checkpoint.string();
    write_run_record(out_dir, rec);
    return rec;
}

/// `upscale`: run the SR model over every pair of a generation output.
inline RunRecord run_upscale(const ExperimentConfig& cfg, const fs::path& synth_dir,
                             const fs::path& sr_checkpoint, const fs::path& out_dir) {
    require(fs::exists(sr_checkpoint), "missing SR checkpoint: " + sr_checkpoint.string());
    StageTimer timer;
    const int num_classes = synthetic_num_classes(synth_dir / "synthetic");
    SyntheticCorpus synth = load_synthetic(synth_dir / "synthetic", num_classes);
    Palette palette = default_palette(num_classes);

    auto net = load_denoiser<float>(sr_checkpoint.string());
    NoiseSchedule sched = build_schedule(cfg.schedule.kind, cfg.schedule.t_train);
    const uint64_t seed = stage_seed(cfg, "upscale");

    fs::path hr_dir = out_dir / "upscaled";
    fs::create_directories(hr_dir);
    std::ofstream sidecar(hr_dir / "records.jsonl");
    for (size_t i = 0; i < synth.tiles.size(); ++i) {
        Tensor<float> lr = make_pair_tensor<float>(synth.tiles[i].image, synth.tiles[i].mask,
                                                   palette);
        Rng rng = make_rng(derive_seed(seed, "pair", static_cast<uint64_t>(i)));
        SampledPair hr = upscale_pair(*net, sched, lr, cfg.sampler, palette, rng);
        char name[64];
        std::snprintf(name, sizeof(name), "pair_%05zu", i);
        std::string img = (hr_dir / (std::string(name) + "_img.pgm")).string();
        std::string mask = (hr_dir / (std::string(name) + "_mask.pgm")).string();
        write_image_pgm(img, hr.image);
        write_mask_pgm(mask, hr.mask);
        json j = record_to_json(synth.records[i]);
        j["image"] = img;
        j["mask"] = mask;
        j["realized"] = extract_fraction(hr.mask).f;
        sidecar << j.dump() << "\n";
    }

    RunRecord rec;
    rec.stage = "upscale";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = seed;
    rec.seed_stream = "upscale";
    rec.timings["stage_seconds"] = timer.seconds();
    rec.metrics["pairs"] = synth.tiles.size();
    rec.checkpoints["sr"] = sr_checkpoint.string();
    write_run_record(out_dir, rec);
    return rec;
}

/// `train-seg`: real + ratio x synthetic mix, Dice-trained segmenter.
inline RunRecord run_train_seg(const ExperimentConfig& cfg, const fs::path& tiles_dir,
                               const fs::path& synth_dir, int ratio, uint64_t seed_override,
                               const fs::path& out_dir) {
    StageTimer timer;
    TileStore store = load_tile_store(tiles_dir);
    std::vector<Tile> real = store.split("train");
    require(!real.empty(), "tile store has no train tiles");

    std::vector<Tile> synthetic;
    if (ratio > 0) {
        SyntheticCorpus synth = load_synthetic(synth_dir / "synthetic", store.num_classes);
        synthetic = std::move(synth.tiles);
    }
    const uint64_t seed =
        seed_override ? seed_override : stage_seed(cfg, "train-seg");
    Rng rng = make_rng(seed);
    Rng mix_rng = rng.substream("mix");
    MixResult mix = build_training_mix(real, synthetic, ratio, mix_rng);
    if (mix.truncated)
        std::fprintf(stderr, "warning: requested %d synthetic tiles, only %d available\n",
                     mix.synthetic_requested, mix.synthetic_used);

    DenoiserSpec seg_spec = cfg.segmenter;
    seg_spec.out_channels = store.num_classes;
    Segmenter<float> seg(seg_spec);
    Rng init_rng = rng.substream("init");
    seg.net.init(init_rng);
    SegTrainConfig tc = cfg.seg_train;
    tc.seed = derive_seed(seed, "seg-train");
    SegTrainReport report = train_segmenter(seg, mix.dataset, tc);

    fs::create_directories(out_dir);
    nn::ParamList<float> params;
    seg.net.collect(params);
    std::string ckpt = (out_dir / "segmenter.ckpt").string();
    save_checkpoint(ckpt, seg_spec, params,
                    json{{"stage", "segmenter"}, {"ratio", ratio}, {"seed", seed}});

    RunRecord rec;
    rec.stage = "train-seg";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = seed;
    rec.seed_stream = "train-seg";
    rec.timings["stage_seconds"] = timer.seconds();
    rec.checkpoints["segmenter"] = ckpt;
    rec.metrics["final_loss"] = report.final_loss;
    rec.metrics["ratio"] = ratio;
    rec.metrics["real_tiles"] = real.size();
    rec.metrics["synthetic_used"] = mix.synthetic_used;
    write_run_record(out_dir, rec);
    return rec;
}

inline json metrics_json(const SegMetrics& m) {
    return json{{"iou", m.iou}, {"miou", m.miou}, {"acc", m.acc}};
}

/// `eval-seg`: sliding-window inference + metrics on the test split.
inline RunRecord run_eval_seg(const ExperimentConfig& cfg, const fs::path& tiles_dir,
                              const fs::path& seg_checkpoint, const fs::path& out_dir) {
    require(fs::exists(seg_checkpoint), "missing segmenter checkpoint: " + seg_checkpoint.string());
    StageTimer timer;
    TileStore store = load_tile_store(tiles_dir);
    std::vector<Tile> test = store.split("test");
    require(!test.empty(), "tile store has no test tiles");

    json extra;
    auto net = load_denoiser<float>(seg_checkpoint.string(), &extra);
    Segmenter<float> seg(net->spec);
    {
        nn::ParamList<float> dst, src;
        seg.net.collect(dst);
        net->collect(src);
        for (size_t i = 0; i < dst.size(); ++i) *dst[i].data = *src[i].data;
    }

    const int window = std::min({cfg.seg_window, test[0].image.height, test[0].image.width});
    LogitFn fn = [&seg](const Image& win) { return seg.logits(win); };

    fs::create_directories(out_dir / "predictions");
    EvalResult result;
    SegCounts pooled(store.num_classes);
    for (size_t i = 0; i < test.size(); ++i) {
        ClassMap pred = sliding_window_infer(fn, test[i].image, window, cfg.seg_overlap,
                                             store.num_classes);
        result.per_item.push_back(seg_metrics(pred, test[i].mask, store.num_classes));
        pooled.add(pred, test[i].mask);
        char name[32];
        std::snprintf(name, sizeof(name), "pred_%04zu.pgm", i);
        write_mask_pgm(out_dir / "predictions" / name, pred);
    }
    result.aggregate = metrics_from_counts(pooled);

    RunRecord rec;
    rec.stage = "eval-seg";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = stage_seed(cfg, "eval-seg");
    rec.seed_stream = "eval-seg";
    rec.timings["stage_seconds"] = timer.seconds();
    rec.metrics["aggregate"] = metrics_json(result.aggregate);
    json items = json::array();
    for (const auto& m : result.per_item) items.push_back(metrics_json(m));
    rec.metrics["per_item"] = items;
    rec.metrics["ratio"] = extra.value("ratio", -1);
    rec.metrics["train_seed"] = extra.value("seed", 0ull);
    rec.checkpoints["segmenter"] = seg_checkpoint.string();
    write_run_record(out_dir, rec);
    return rec;
}

}  // namespace phasegen
