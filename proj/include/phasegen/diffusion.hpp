#pragma once
// Training objective, DDIM sampling for joint image+mask generation, and the
// 2x super-resolution refinement stage.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/corpus.hpp"
#include "phasegen/denoiser.hpp"
#include "phasegen/nn.hpp"
#include "phasegen/schedule.hpp"

namespace phasegen {

struct LossConfig {
    double lambda = 1.0;  // L1 weight; 0 reduces to plain MSE
    void validate() const { require(lambda >= 0.0, "lambda must be >= 0"); }
};

enum class SampleMode { paper_stochastic, deterministic };

inline std::string to_string(SampleMode m) {
    return m == SampleMode::paper_stochastic ? "paper_stochastic" : "deterministic";
}

inline SampleMode sample_mode_from_string(const std::string& s) {
    if (s == "paper_stochastic") return SampleMode::paper_stochastic;
    if (s == "deterministic") return SampleMode::deterministic;
    throw Error("unknown sample mode: " + s);
}

struct SamplerConfig {
    int t_infer = 50;
    SampleMode mode = SampleMode::paper_stochastic;
    uint64_t seed = 0;

    void validate(int t_train) const {
        require(t_infer >= 1 && t_infer <= t_train, "need 1 <= T_infer <= T_train");
    }
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <typename S>
double diffusion_loss(const Tensor<S>& pred, const Tensor<S>& true_noise,
                      const LossConfig& cfg) {
    require(pred.same_shape(true_noise), "loss shape mismatch");
    cfg.validate();
    double mse = 0, l1 = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        double d = static_cast<double>(pred.v[i]) - static_cast<double>(true_noise.v[i]);
        mse += d * d;
        l1 += std::abs(d);
    }
    double n = static_cast<double>(pred.size());
    return mse / n + cfg.lambda * (l1 / n);
}

/// Gradient of diffusion_loss w.r.t. pred, scaled by `weight` (e.g. 1/batch).
template <typename S>
Tensor<S> diffusion_loss_grad(const Tensor<S>& pred, const Tensor<S>& true_noise,
                              const LossConfig& cfg, double weight) {
    require(pred.same_shape(true_noise), "loss shape mismatch");
    Tensor<S> g(pred.channels, pred.height, pred.width);
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    for (size_t i = 0; i < pred.size(); ++i) {
        double d = static_cast<double>(pred.v[i]) - static_cast<double>(true_noise.v[i]);
        double sgn = (d > 0) - (d < 0);
        g.v[i] = static_cast<S>((2.0 * d + cfg.lambda * sgn) * inv_n * weight);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Reverse-process algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> predict_x0(const Tensor<S>& x_t, const Tensor<S>& eps_hat, int t,
                     const NoiseSchedule& sched) {
    require(x_t.same_shape(eps_hat), "predict_x0 shape mismatch");
    require(t >= 1 && t <= sched.num_steps, "t out of range");
    const double ab = sched.alpha_bar_at(t);
    require(ab > 0.0, "alpha_bar must be positive");
    const double inv_sqrt_ab = 1.0 / std::sqrt(ab);
    const double sqrt_1mab = std::sqrt(1.0 - ab);
    Tensor<S> x0(x_t.channels, x_t.height, x_t.width);
    for (size_t i = 0; i < x_t.size(); ++i)
        x0.v[i] = static_cast<S>((x_t.v[i] - sqrt_1mab * eps_hat.v[i]) * inv_sqrt_ab);
    return x0;
}

/// One reverse jump t -> t_prev. t_prev = 0 returns the clean estimate.
/// paper_stochastic re-noises with fresh Gaussian noise; deterministic reuses
/// eps_hat, giving reproducible trajectories at fixed seed.
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& x_t, const Tensor<S>& eps_hat, int t, int t_prev,
                    const NoiseSchedule& sched, const SamplerConfig& cfg, Rng& rng) {
    require(t_prev < t, "ddim_step requires t_prev < t");
    require(t_prev >= 0, "t_prev must be >= 0");
    Tensor<S> x0 = predict_x0(x_t, eps_hat, t, sched);
    if (t_prev == 0) return x0;
    const double ab_prev = sched.alpha_bar_at(t_prev);
    const double a = std::sqrt(ab_prev);
    const double b = std::sqrt(1.0 - ab_prev);
    Tensor<S> out(x_t.channels, x_t.height, x_t.width);
    if (cfg.mode == SampleMode::paper_stochastic) {
        for (size_t i = 0; i < out.size(); ++i)
            out.v[i] = static_cast<S>(a * x0.v[i] + b * rng.normal());
    } else {
        for (size_t i = 0; i < out.size(); ++i)
            out.v[i] = static_cast<S>(a * x0.v[i] + b * eps_hat.v[i]);
    }
    return out;
}

/// Decreasing subsequence of [1, t_train] with uniform stride, endpoints kept.
inline std::vector<int> inference_steps(int t_train, int t_infer) {
    require(t_infer >= 1 && t_infer <= t_train, "need 1 <= T_infer <= T_train");
    std::vector<int> taus;
    if (t_infer == 1) {
        taus.push_back(t_train);
        return taus;
    }
    for (int k = t_infer; k >= 1; --k) {
        double pos = 1.0 + (static_cast<double>(k - 1) * (t_train - 1)) / (t_infer - 1);
        taus.push_back(static_cast<int>(std::llround(pos)));
    }
    for (size_t i = 1; i < taus.size(); ++i)
        require(taus[i] < taus[i - 1], "inference steps must strictly decrease");
    require(taus.front() == t_train && taus.back() == 1, "endpoints must be kept");
    return taus;
}

/// Full reverse trajectory from pure noise; invokes the denoiser exactly
/// cfg.t_infer times. `extra_channels`, when non-null, is concatenated to the
/// noisy state before every denoiser call (used by the SR stage).
template <typename S>
Tensor<S> sample_tensor(Denoiser<S>& den, const NoiseSchedule& sched,
                        const std::vector<S>& cond, const SamplerConfig& cfg, int channels,
                        int height, int width, Rng& rng,
                        const Tensor<S>* extra_channels = nullptr) {
    cfg.validate(sched.num_steps);
    Tensor<S> x(channels, height, width);
    for (auto& v : x.v) v = static_cast<S>(rng.normal());
    std::vector<int> taus = inference_steps(sched.num_steps, cfg.t_infer);
    for (size_t i = 0; i < taus.size(); ++i) {
        const int t = taus[i];
        const int t_prev = (i + 1 < taus.size()) ? taus[i + 1] : 0;
        Tensor<S> eps_hat;
        if (extra_channels) {
            Tensor<S> in = detail::concat_channels(x, *extra_channels);
            eps_hat = den.predict(in, t, cond);
        } else {
            eps_hat = den.predict(x, t, cond);
        }
        require(eps_hat.same_shape(x), "denoiser output shape mismatch");
        // Clean samples live in [-1, 1]; project the clean estimate back onto
        // that range and re-derive the noise direction for projected elements.
        // Near t = T alpha_bar is ~1e-9 and predict_x0 amplifies model error
        // by 1/sqrt(alpha_bar); without the projection the trajectory leaves
        // the training distribution at the first step and never recovers.
        const double ab = sched.alpha_bar_at(t);
        const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        Tensor<S> x0_hat = predict_x0(x, eps_hat, t, sched);
        for (size_t j = 0; j < x0_hat.size(); ++j) {
            if (x0_hat.v[j] >= S(-1) && x0_hat.v[j] <= S(1)) continue;
            x0_hat.v[j] = clamp(x0_hat.v[j], S(-1), S(1));
            eps_hat.v[j] = static_cast<S>((x.v[j] - sa * x0_hat.v[j]) / sb);
        }
        x = ddim_step(x, eps_hat, t, t_prev, sched, cfg, rng);
    }
    return x;
}

struct SampledPair {
    Image image;
    ClassMap mask;
    Tensor<float> pair;
};

/// Joint image+mask generation for one condition vector.
template <typename S>
SampledPair sample_pair(Denoiser<S>& den, const NoiseSchedule& sched, const PhaseFraction& c,
                        const SamplerConfig& cfg, const Palette& palette, int height,
                        int width, Rng& rng) {
    c.validate();
    std::vector<S> cond(c.f.begin(), c.f.end());
    Tensor<S> x =
        sample_tensor(den, sched, cond, cfg, den.in_channels(), height, width, rng);
    Tensor<float> pair = x.template cast<float>();
    SampledPair out;
    std::tie(out.image, out.mask) = split_pair_tensor(pair, palette);
    out.pair = std::move(pair);
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int steps = 2000;
    int batch_size = 8;
    double lr = 1e-4;
    double weight_decay = 0.0;
    bool cosine_lr = true;
    LossConfig loss;
    uint64_t seed = 0;
    int log_every = 25;
    int checkpoint_every = 0;  // 0 = final only
    std::string checkpoint_path;
    std::string loss_log_path;

    void validate() const {
        require(steps > 0 && batch_size > 0, "steps and batch_size must be positive");
        require(lr >= 0.0, "lr must be >= 0");
        loss.validate();
    }
};

struct TrainReport {
    std::vector<std::pair<int, double>> loss_log;  // (step, batch loss)
    double final_loss = 0.0;
    std::string checkpoint_path;
};

template <typename S>
struct TrainSample {
    Tensor<S> x0;            // clean 4-channel pair
    std::vector<S> cond;     // fraction vector (empty when condition_dim = 0)
    Tensor<S> extra;         // channels appended to x_t (SR conditioning)
    bool has_extra = false;
};

namespace detail {

template <typename S>
void write_loss_log(const std::string& path, const std::vector<std::pair<int, double>>& log) {
    if (path.empty()) return;
    std::ofstream f(path);
    require(f.good(), "cannot open loss log: " + path);
    for (const auto& [step, loss] : log)
        f << json{{"step", step}, {"loss", loss}}.dump() << "\n";
}

/// Core optimization loop shared by the base and SR trainers.
template <typename S>
TrainReport train_loop(CondUNet<S>& net, const NoiseSchedule& sched,
                       const std::vector<TrainSample<S>>& samples, const TrainConfig& cfg,
                       const json& checkpoint_extra_base) {
    cfg.validate();
    require(!samples.empty(), "training set must be non-empty");
    for (const auto& s : samples)
        require(s.x0.same_shape(samples[0].x0), "training tensors must share one shape");

    CondUNet<S> grads = net;  // same structure; values overwritten by zero_params
    nn::ParamList<S> params, gparams;
    net.collect(params);
    grads.collect(gparams);

    nn::OptimizerConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.cosine_lr = cfg.cosine_lr;
    ocfg.total_steps = cfg.steps;
    nn::AdamW<S> opt(params, ocfg);

    Rng rng = make_rng(cfg.seed);
    Rng batch_rng = rng.substream("batch");
    Rng t_rng = rng.substream("t");
    Rng noise_rng = rng.substream("noise");

    TrainReport report;
    const double inv_batch = 1.0 / cfg.batch_size;
    double running = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        nn::zero_params(gparams);
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& s = samples[batch_rng.uniform_int(0, static_cast<int>(samples.size()) - 1)];
            const int t = t_rng.uniform_int(1, sched.num_steps);
            Tensor<S> noise = sample_noise<S>(s.x0.channels, s.x0.height, s.x0.width, noise_rng);
            Tensor<S> x_t = forward_diffuse(s.x0, t, noise, sched);
            typename CondUNet<S>::Cache cache;
            Tensor<S> pred;
            if (s.has_extra) {
                Tensor<S> in = concat_channels(x_t, s.extra);
                pred = net.forward(in, t, s.cond, cache);
            } else {
                pred = net.forward(x_t, t, s.cond, cache);
            }
            batch_loss += diffusion_loss(pred, noise, cfg.loss) * inv_batch;
            Tensor<S> gpred = diffusion_loss_grad(pred, noise, cfg.loss, inv_batch);
            net.backward(gpred, cache, grads);
        }
        if (!std::isfinite(batch_loss))
            throw Error("non-finite loss at step " + std::to_string(step) +
                        " (loss=" + std::to_string(batch_loss) + ")");
        opt.step(params, gparams);
        running = batch_loss;
        if (step % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps)
            report.loss_log.emplace_back(step, batch_loss);
        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
            (step + 1) % cfg.checkpoint_every == 0 && step + 1 != cfg.steps) {
            json extra = checkpoint_extra_base;
            extra["step"] = step + 1;
            save_checkpoint(cfg.checkpoint_path + ".step" + std::to_string(step + 1),
                            net.spec, params, extra);
        }
    }
    report.final_loss = running;
    if (!cfg.checkpoint_path.empty()) {
        json extra = checkpoint_extra_base;
        extra["step"] = cfg.steps;
        save_checkpoint(cfg.checkpoint_path, net.spec, params, extra);
        report.checkpoint_path = cfg.checkpoint_path;
    }
    write_loss_log<S>(cfg.loss_log_path, report.loss_log);
    return report;
}

inline json schedule_meta(const NoiseSchedule& sched) {
    return json{{"kind", to_string(sched.kind)}, {"num_steps", sched.num_steps}};
}

}  // namespace detail

/// Base-stage trainer: each tile conditions on its own extracted fraction.
template <typename S>
TrainReport train_diffusion(const std::vector<Tile>& tiles, const Palette& palette,
                            CondUNet<S>& net, const NoiseSchedule& sched,
                            const TrainConfig& cfg) {
    require(!tiles.empty(), "no training tiles");
    const int k = static_cast<int>(palette.entries.size());
    require(net.spec.condition_dim == k, "denoiser condition_dim must equal class count");
    std::vector<TrainSample<S>> samples;
    samples.reserve(tiles.size());
    for (const auto& tile : tiles) {
        TrainSample<S> s;
        s.x0 = make_pair_tensor<S>(tile.image, tile.mask, palette);
        PhaseFraction c = extract_fraction(tile.mask);
        s.cond.assign(c.f.begin(), c.f.end());
        samples.push_back(std::move(s));
    }
    json extra = {{"stage", "base"}, {"schedule", detail::schedule_meta(sched)}};
    return detail::train_loop(net, sched, samples, cfg, extra);
}

// ---------------------------------------------------------------------------
// Super-resolution stage
// ---------------------------------------------------------------------------

struct SRSpec {
    int scale = 2;
    int lr_size = 0;
    int hr_size = 0;
    DenoiserSpec net;

    void validate() const {
        require(scale == 2, "only 2x super-resolution is supported");
        require(lr_size > 0 && hr_size == 2 * lr_size, "need hr_size = 2 * lr_size");
        require(net.in_channels == 8, "SR denoiser takes 8 input channels");
        require(net.out_channels == 4, "SR denoiser predicts 4 channels");
        require(net.condition_dim == 0, "SR conditioning is channelwise, not vector");
        net.validate();
    }
};

inline void to_json(json& j, const SRSpec& s) {
    j = json{{"scale", s.scale}, {"lr_size", s.lr_size}, {"hr_size", s.hr_size}, {"net", s.net}};
}

inline void from_json(const json& j, SRSpec& s) {
    j.at("scale").get_to(s.scale);
    j.at("lr_size").get_to(s.lr_size);
    j.at("hr_size").get_to(s.hr_size);
    j.at("net").get_to(s.net);
}

/// Downscale an HR pair 2x: image channel by 2x2 area mean, encoded mask
/// channels by nearest sampling so palette vectors stay exact.
template <typename S>
Tensor<S> lr_from_hr(const Tensor<S>& hr) {
    require(hr.height % 2 == 0 && hr.width % 2 == 0, "HR size must be even");
    Tensor<S> lr(hr.channels, hr.height / 2, hr.width / 2);
    for (int c = 0; c < hr.channels; ++c) {
        for (int y = 0; y < lr.height; ++y) {
            for (int x = 0; x < lr.width; ++x) {
                if (c == 0) {
                    double m = (static_cast<double>(hr.at(c, 2 * y, 2 * x)) +
                                hr.at(c, 2 * y, 2 * x + 1) + hr.at(c, 2 * y + 1, 2 * x) +
                                hr.at(c, 2 * y + 1, 2 * x + 1)) /
                               4.0;
                    lr.at(c, y, x) = static_cast<S>(m);
                } else {
                    lr.at(c, y, x) = hr.at(c, 2 * y, 2 * x);
                }
            }
        }
    }
    return lr;
}

/// Bilinear 2x upsample with half-pixel centers (align_corners = false).
template <typename S>
Tensor<S> bilinear_upsample2x(const Tensor<S>& x) {
    Tensor<S> y(x.channels, x.height * 2, x.width * 2);
    for (int c = 0; c < x.channels; ++c) {
        for (int yy = 0; yy < y.height; ++yy) {
            double sy = (yy + 0.5) / 2.0 - 0.5;
            int y0 = static_cast<int>(std::floor(sy));
            double fy = sy - y0;
            int y0c = clamp(y0, 0, x.height - 1), y1c = clamp(y0 + 1, 0, x.height - 1);
            for (int xx = 0; xx < y.width; ++xx) {
                double sx = (xx + 0.5) / 2.0 - 0.5;
                int x0 = static_cast<int>(std::floor(sx));
                double fx = sx - x0;
                int x0c = clamp(x0, 0, x.width - 1), x1c = clamp(x0 + 1, 0, x.width - 1);
                double v = (1 - fy) * ((1 - fx) * x.at(c, y0c, x0c) + fx * x.at(c, y0c, x1c)) +
                           fy * ((1 - fx) * x.at(c, y1c, x0c) + fx * x.at(c, y1c, x1c));
                y.at(c, yy, xx) = static_cast<S>(v);
            }
        }
    }
    return y;
}

/// SR trainer: the LR pair (derived from each HR tile) is bilinearly upsampled
/// and concatenated to the noisy HR sample; plain MSE objective.
template <typename S>
TrainReport train_sr(const std::vector<Tile>& hr_tiles, const Palette& palette,
                     const SRSpec& sr, CondUNet<S>& net, const NoiseSchedule& sched,
                     TrainConfig cfg) {
    sr.validate();
    require(!hr_tiles.empty(), "no SR training tiles");
    require(net.spec.in_channels == 8 && net.spec.out_channels == 4,
            "SR network channel mismatch");
    cfg.loss.lambda = 0.0;  // the refinement stage trains with plain MSE
    std::vector<TrainSample<S>> samples;
    samples.reserve(hr_tiles.size());
    for (const auto& tile : hr_tiles) {
        require(tile.image.height == sr.hr_size && tile.image.width == sr.hr_size,
                "HR tile size mismatch");
        TrainSample<S> s;
        s.x0 = make_pair_tensor<S>(tile.image, tile.mask, palette);
        s.extra = bilinear_upsample2x(lr_from_hr(s.x0));
        s.has_extra = true;
        samples.push_back(std::move(s));
    }
    json extra = {{"stage", "sr"},
                  {"schedule", detail::schedule_meta(sched)},
                  {"sr", json(sr)}};
    return detail::train_loop(net, sched, samples, cfg, extra);
}

/// Conditional DDIM upscaling of one LR pair to 2x resolution.
template <typename S>
SampledPair upscale_pair(Denoiser<S>& sr_net, const NoiseSchedule& sched,
                         const Tensor<S>& lr_pair, const SamplerConfig& cfg,
                         const Palette& palette, Rng& rng) {
    require(lr_pair.channels == 4, "LR pair must have 4 channels");
    require(sr_net.in_channels() == 8, "SR denoiser takes 8 channels");
    Tensor<S> cond_up = bilinear_upsample2x(lr_pair);
    std::vector<S> no_cond;
    Tensor<S> x = sample_tensor(sr_net, sched, no_cond, cfg, 4, cond_up.height,
                                cond_up.width, rng, &cond_up);
    Tensor<float> pair = x.template cast<float>();
    SampledPair out;
    std::tie(out.image, out.mask) = split_pair_tensor(pair, palette);
    out.pair = std::move(pair);
    return out;
}

}  // namespace phasegen
