#pragma once
// Synthetic conditioning vectors: jitter real fractions and oversample
// minority-rich compositions, then drive the sampler over the result.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/corpus.hpp"
#include "phasegen/diffusion.hpp"

namespace phasegen {

struct JitterConfig {
    double sigma = 0.02;
    double eps_floor = 0.01;
    int max_attempts = 100;

    void validate() const {
        require(sigma >= 0.0, "sigma must be >= 0");
        require(eps_floor > 0.0, "eps_floor must be > 0");
    }
};

struct MixtureConfig {
    double w_uniform = 0.70;
    double w_ma_rich = 0.20;
    double w_defect_rich = 0.10;
    double rich_quantile = 0.8;
    int ma_class = 2;      // index within the fraction vector
    int defect_class = 3;

    void validate() const {
        require(w_uniform >= 0 && w_ma_rich >= 0 && w_defect_rich >= 0,
                "mixture weights must be non-negative");
        require(std::abs(w_uniform + w_ma_rich + w_defect_rich - 1.0) < 1e-9,
                "mixture weights must sum to 1");
        require(rich_quantile > 0 && rich_quantile < 1, "rich_quantile must be in (0,1)");
    }
};

enum class Branch { uniform, ma_rich, defect_rich };

inline std::string to_string(Branch b) {
    switch (b) {
        case Branch::uniform: return "uniform";
        case Branch::ma_rich: return "ma_rich";
        case Branch::defect_rich: return "defect_rich";
    }
    throw Error("bad branch");
}

struct ConditionDraw {
    PhaseFraction target;
    Branch branch = Branch::uniform;
};

/// Perturb each component proportionally to its size (plus a floor so zero
/// components can move), clamp negatives at zero, renormalize. All-zero
/// outcomes are resampled a bounded number of times.
inline PhaseFraction jitter_fraction(const PhaseFraction& c, const JitterConfig& cfg,
                                     Rng& rng) {
    c.validate();
    cfg.validate();
    if (cfg.sigma == 0.0) return c;
    const size_t k = c.f.size();
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        PhaseFraction out;
        out.f.resize(k);
        double sum = 0.0;
        for (size_t i = 0; i < k; ++i) {
            double v = c.f[i] + cfg.sigma * (c.f[i] + cfg.eps_floor) * rng.normal();
            out.f[i] = std::max(0.0, v);
            sum += out.f[i];
        }
        if (sum <= 0.0) continue;
        for (auto& v : out.f) v /= sum;
        return out;
    }
    throw Error("jitter_fraction: all components clamped to zero after " +
                std::to_string(cfg.max_attempts) + " attempts");
}

/// Empirical quantile with linear interpolation between order statistics.
inline double empirical_quantile(std::vector<double> xs, double q) {
    require(!xs.empty(), "quantile of empty set");
    require(q >= 0.0 && q <= 1.0, "quantile must be in [0,1]");
    std::sort(xs.begin(), xs.end());
    const double h = q * (xs.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(h));
    const size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo]);
}

namespace detail {

/// Indices of real vectors whose class-i fraction exceeds the q-quantile;
/// falls back to the single largest vector when the strict subset is empty.
inline std::vector<size_t> rich_subset(const std::vector<PhaseFraction>& real, int cls,
                                       double q) {
    std::vector<double> vals(real.size());
    for (size_t i = 0; i < real.size(); ++i) {
        require(cls >= 0 && cls < static_cast<int>(real[i].f.size()),
                "rich class index out of range");
        vals[i] = real[i].f[cls];
    }
    const double cut = empirical_quantile(vals, q);
    std::vector<size_t> idx;
    for (size_t i = 0; i < real.size(); ++i)
        if (vals[i] > cut) idx.push_back(i);
    if (idx.empty()) {
        size_t best = 0;
        for (size_t i = 1; i < real.size(); ++i)
            if (vals[i] > vals[best]) best = i;
        idx.push_back(best);
    }
    return idx;
}

}  // namespace detail

/// Exact branch allocation, then per-draw jitter. round(w_ma*n) and
/// round(w_d*n) go to the rich branches; the residue goes to the uniform one.
inline std::vector<ConditionDraw> sample_conditions(const std::vector<PhaseFraction>& real,
                                                    int n, const MixtureConfig& mix,
                                                    const JitterConfig& jitter, Rng& rng) {
    require(!real.empty(), "sample_conditions needs real fractions");
    require(n >= 1, "sample_conditions needs n >= 1");
    mix.validate();
    jitter.validate();

    const int n_ma = static_cast<int>(std::llround(mix.w_ma_rich * n));
    const int n_d = static_cast<int>(std::llround(mix.w_defect_rich * n));
    const int n_u = n - n_ma - n_d;
    require(n_u >= 0, "mixture weights incompatible with n");

    std::vector<size_t> ma_idx = detail::rich_subset(real, mix.ma_class, mix.rich_quantile);
    std::vector<size_t> d_idx =
        detail::rich_subset(real, mix.defect_class, mix.rich_quantile);

    std::vector<ConditionDraw> out;
    out.reserve(n);
    auto draw_from = [&](const std::vector<size_t>* subset, Branch br) {
        size_t pick;
        if (subset) {
            pick = (*subset)[rng.uniform_int(0, static_cast<int>(subset->size()) - 1)];
        } else {
            pick = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(real.size()) - 1));
        }
        ConditionDraw d;
        d.target = jitter_fraction(real[pick], jitter, rng);
        d.branch = br;
        out.push_back(std::move(d));
    };
    for (int i = 0; i < n_u; ++i) draw_from(nullptr, Branch::uniform);
    for (int i = 0; i < n_ma; ++i) draw_from(&ma_idx, Branch::ma_rich);
    for (int i = 0; i < n_d; ++i) draw_from(&d_idx, Branch::defect_rich);
    return out;
}

// ---------------------------------------------------------------------------
// Full generation run: conditions -> sampled pairs -> files + sidecar records
// ---------------------------------------------------------------------------

struct SynthRecord {
    int index = 0;
    PhaseFraction target;
    Branch branch = Branch::uniform;
    uint64_t seed = 0;
    PhaseFraction realized;
    std::string image_path;
    std::string mask_path;
};

struct SyntheticCorpus {
    std::vector<Tile> tiles;
    std::vector<SynthRecord> records;
};

struct GenerationConfig {
    SamplerConfig sampler;
    JitterConfig jitter;
    MixtureConfig mixture;
    int height = 32, width = 32;
    std::string out_dir;  // empty = keep in memory only
};

inline json record_to_json(const SynthRecord& r) {
    return json{{"index", r.index},          {"target", r.target.f},
                {"branch", to_string(r.branch)}, {"seed", r.seed},
                {"realized", r.realized.f},  {"image", r.image_path},
                {"mask", r.mask_path}};
}

/// Draw n conditions, run the sampler per condition, extract realized
/// fractions, optionally persist PGM pairs plus a JSONL sidecar.
template <typename S>
SyntheticCorpus full_generation_run(Denoiser<S>& den, const NoiseSchedule& sched,
                                    const std::vector<PhaseFraction>& real_fracs, int n,
                                    const GenerationConfig& cfg, const Palette& palette,
                                    uint64_t seed) {
    require(n >= 1, "generation run needs n >= 1");
    Rng base = make_rng(seed);
    Rng cond_rng = base.substream("conditions");
    std::vector<ConditionDraw> draws =
        sample_conditions(real_fracs, n, cfg.mixture, cfg.jitter, cond_rng);

    SyntheticCorpus out;
    out.tiles.reserve(n);
    out.records.reserve(n);
    if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);

    std::ofstream sidecar;
    if (!cfg.out_dir.empty()) {
        sidecar.open(cfg.out_dir + "/records.jsonl");
        require(sidecar.good(), "cannot open sidecar record file");
    }
    for (int i = 0; i < n; ++i) {
        SynthRecord rec;
        rec.index = i;
        rec.target = draws[i].target;
        rec.branch = draws[i].branch;
        rec.seed = derive_seed(seed, "pair", static_cast<uint64_t>(i));
        Rng pair_rng = make_rng(rec.seed);
        SampledPair p = sample_pair(den, sched, rec.target, cfg.sampler, palette,
                                    cfg.height, cfg.width, pair_rng);
        rec.realized = extract_fraction(p.mask);

        Tile tile;
        tile.image = p.image;
        tile.mask = p.mask;
        tile.source_id = "synthetic-" + std::to_string(i);
        tile.split = "synthetic";
        if (!cfg.out_dir.empty()) {
            char name[64];
            std::snprintf(name, sizeof(name), "pair_%05d", i);
            rec.image_path = cfg.out_dir + "/" + name + "_img.pgm";
            rec.mask_path = cfg.out_dir + "/" + name + "_mask.pgm";
            write_image_pgm(rec.image_path, p.image);
            write_mask_pgm(rec.mask_path, p.mask);
            sidecar << record_to_json(rec).dump() << "\n";
        }
        out.tiles.push_back(std::move(tile));
        out.records.push_back(std::move(rec));
    }
    return out;
}

}  // namespace phasegen
