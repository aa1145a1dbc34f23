#pragma once
// Segmentation side of the toolkit: real+synthetic training mixes, a small
// U-shaped segmenter, Dice training, sliding-window inference, and metrics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/corpus.hpp"
#include "phasegen/denoiser.hpp"
#include "phasegen/nn.hpp"

namespace phasegen {

// ---------------------------------------------------------------------------
// Training mixes
// ---------------------------------------------------------------------------

struct MixResult {
    std::vector<Tile> dataset;
    int synthetic_requested = 0;
    int synthetic_used = 0;
    bool truncated = false;
};

/// Real set plus ratio*|real| synthetic tiles sampled without replacement.
/// Fewer available than requested truncates (flagged) rather than failing.
inline MixResult build_training_mix(const std::vector<Tile>& real,
                                    const std::vector<Tile>& synthetic, int ratio,
                                    Rng& rng) {
    require(!real.empty(), "mix needs a non-empty real set");
    require(ratio >= 0, "ratio must be >= 0");
    MixResult out;
    out.dataset = real;
    if (ratio == 0) return out;
    require(!synthetic.empty(), "ratio > 0 requires synthetic tiles");

    out.synthetic_requested = ratio * static_cast<int>(real.size());
    std::vector<size_t> idx(synthetic.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    // Fisher-Yates so the subset is uniform without replacement
    for (size_t i = idx.size() - 1; i > 0; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i)));
        std::swap(idx[i], idx[j]);
    }
    out.synthetic_used =
        std::min<int>(out.synthetic_requested, static_cast<int>(synthetic.size()));
    out.truncated = out.synthetic_used < out.synthetic_requested;
    for (int i = 0; i < out.synthetic_used; ++i) out.dataset.push_back(synthetic[idx[i]]);
    return out;
}

// ---------------------------------------------------------------------------
// Dice loss over per-pixel class distributions
// ---------------------------------------------------------------------------

inline constexpr double kDiceSmooth = 1e-6;

template <typename S>
Tensor<S> softmax_channels(const Tensor<S>& logits) {
    Tensor<S> p(logits.channels, logits.height, logits.width);
    const int hw = logits.plane_size();
    for (int i = 0; i < hw; ++i) {
        S mx = logits.v[i];
        for (int c = 1; c < logits.channels; ++c)
            mx = std::max(mx, logits.v[static_cast<size_t>(c) * hw + i]);
        double denom = 0;
        for (int c = 0; c < logits.channels; ++c) {
            double e = std::exp(static_cast<double>(logits.v[static_cast<size_t>(c) * hw + i] - mx));
            p.v[static_cast<size_t>(c) * hw + i] = static_cast<S>(e);
            denom += e;
        }
        for (int c = 0; c < logits.channels; ++c)
            p.v[static_cast<size_t>(c) * hw + i] =
                static_cast<S>(p.v[static_cast<size_t>(c) * hw + i] / denom);
    }
    return p;
}

/// Backprop through per-pixel softmax: g_logit = p * (g_p - sum_c g_p[c]*p[c]).
template <typename S>
Tensor<S> softmax_backward(const Tensor<S>& gp, const Tensor<S>& p) {
    Tensor<S> gl(p.channels, p.height, p.width);
    const int hw = p.plane_size();
    for (int i = 0; i < hw; ++i) {
        double dot = 0;
        for (int c = 0; c < p.channels; ++c) {
            const size_t idx = static_cast<size_t>(c) * hw + i;
            dot += static_cast<double>(gp.v[idx]) * p.v[idx];
        }
        for (int c = 0; c < p.channels; ++c) {
            const size_t idx = static_cast<size_t>(c) * hw + i;
            gl.v[idx] = static_cast<S>(p.v[idx] * (gp.v[idx] - dot));
        }
    }
    return gl;
}

/// 1 - mean_k (2*sum p_k*g_k + s) / (sum p_k + sum g_k + s), IGNORE excluded.
template <typename S>
double dice_loss(const Tensor<S>& probs, const ClassMap& target) {
    require(probs.height == target.height && probs.width == target.width,
            "dice shape mismatch");
    const int k = probs.channels;
    const int hw = probs.plane_size();
    double acc = 0;
    for (int c = 0; c < k; ++c) {
        double num = 0, psum = 0, gsum = 0;
        const S* plane = probs.plane(c);
        for (int i = 0; i < hw; ++i) {
            const uint8_t g = target.labels[i];
            if (g == ClassMap::kIgnore) continue;
            psum += plane[i];
            if (g == c) {
                gsum += 1.0;
                num += plane[i];
            }
        }
        acc += (2.0 * num + kDiceSmooth) / (psum + gsum + kDiceSmooth);
    }
    return 1.0 - acc / k;
}

/// Gradient of dice_loss w.r.t. probs, scaled by `weight`.
template <typename S>
Tensor<S> dice_loss_grad(const Tensor<S>& probs, const ClassMap& target, double weight) {
    require(probs.height == target.height && probs.width == target.width,
            "dice shape mismatch");
    const int k = probs.channels;
    const int hw = probs.plane_size();
    Tensor<S> g(probs.channels, probs.height, probs.width, S(0));
    for (int c = 0; c < k; ++c) {
        double num = 0, psum = 0, gsum = 0;
        const S* plane = probs.plane(c);
        for (int i = 0; i < hw; ++i) {
            const uint8_t gt = target.labels[i];
            if (gt == ClassMap::kIgnore) continue;
            psum += plane[i];
            if (gt == c) {
                gsum += 1.0;
                num += plane[i];
            }
        }
        const double n = 2.0 * num + kDiceSmooth;
        const double d = psum + gsum + kDiceSmooth;
        S* gplane = g.plane(c);
        for (int i = 0; i < hw; ++i) {
            const uint8_t gt = target.labels[i];
            if (gt == ClassMap::kIgnore) continue;
            const double dterm = ((gt == c ? 2.0 : 0.0) * d - n) / (d * d);
            gplane[i] = static_cast<S>(-dterm / k * weight);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Segmenter wrapper (U-shaped net; timestep pinned to zero)
// ---------------------------------------------------------------------------

inline DenoiserSpec default_segmenter_spec(int num_classes, int base_width = 24) {
    DenoiserSpec s;
    s.stage_widths = {base_width, base_width * 2};
    s.blocks_per_stage = 1;
    s.in_channels = 1;
    s.out_channels = num_classes;
    s.condition_dim = 0;
    s.embed_dim = 4 * base_width;
    s.attention = AttentionMode::none;
    return s;
}

template <typename S>
struct Segmenter {
    CondUNet<S> net;
    int num_classes;

    explicit Segmenter(const DenoiserSpec& spec)
        : net(spec), num_classes(spec.out_channels) {
        require(spec.condition_dim == 0, "segmenter takes no condition vector");
    }

    Tensor<S> logits(const Image& window) {
        Tensor<S> in(1, window.height, window.width);
        for (size_t i = 0; i < window.v.size(); ++i) in.v[i] = static_cast<S>(window.v[i]);
        return net.predict(in, 0, {});
    }
};

struct SegTrainConfig {
    int steps = 2000;
    int batch_size = 8;
    double lr = 3e-4;
    double weight_decay = 0.0;
    bool cosine_lr = true;
    uint64_t seed = 0;
    int log_every = 50;

    void validate() const {
        require(steps > 0 && batch_size > 0, "steps and batch_size must be positive");
        require(lr >= 0.0, "lr must be >= 0");
    }
};

struct SegTrainReport {
    std::vector<std::pair<int, double>> loss_log;
    double final_loss = 0.0;
};

template <typename S>
SegTrainReport train_segmenter(Segmenter<S>& seg, const std::vector<Tile>& dataset,
                               const SegTrainConfig& cfg) {
    cfg.validate();
    require(!dataset.empty(), "segmenter training set must be non-empty");

    CondUNet<S> grads = seg.net;
    nn::ParamList<S> params, gparams;
    seg.net.collect(params);
    grads.collect(gparams);

    nn::OptimizerConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.cosine_lr = cfg.cosine_lr;
    ocfg.total_steps = cfg.steps;
    nn::AdamW<S> opt(params, ocfg);

    Rng rng = make_rng(cfg.seed);
    Rng batch_rng = rng.substream("seg-batch");

    SegTrainReport report;
    const double inv_batch = 1.0 / cfg.batch_size;
    for (int step = 0; step < cfg.steps; ++step) {
        nn::zero_params(gparams);
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const Tile& tile =
                dataset[batch_rng.uniform_int(0, static_cast<int>(dataset.size()) - 1)];
            Tensor<S> in(1, tile.image.height, tile.image.width);
            for (size_t i = 0; i < tile.image.v.size(); ++i)
                in.v[i] = static_cast<S>(tile.image.v[i]);
            typename CondUNet<S>::Cache cache;
            Tensor<S> logit = seg.net.forward(in, 0, {}, cache);
            Tensor<S> probs = softmax_channels(logit);
            batch_loss += dice_loss(probs, tile.mask) * inv_batch;
            Tensor<S> gp = dice_loss_grad(probs, tile.mask, inv_batch);
            Tensor<S> gl = softmax_backward(gp, probs);
            seg.net.backward(gl, cache, grads);
        }
        if (!std::isfinite(batch_loss))
            throw Error("non-finite segmentation loss at step " + std::to_string(step));
        opt.step(params, gparams);
        report.final_loss = batch_loss;
        if (step % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.steps)
            report.loss_log.emplace_back(step, batch_loss);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Sliding-window inference
// ---------------------------------------------------------------------------

/// Window start offsets: stride steps, last placement snapped to the edge.
inline std::vector<int> window_starts(int size, int window, int stride) {
    require(window <= size, "window larger than image");
    require(stride >= 1, "stride must be >= 1");
    std::vector<int> starts;
    for (int y = 0;; y += stride) {
        if (y + window >= size) {
            starts.push_back(size - window);
            break;
        }
        starts.push_back(y);
    }
    return starts;
}

using LogitFn = std::function<Tensor<float>(const Image&)>;

/// Coverage-averaged per-pixel class distribution over all placements.
inline Tensor<double> sliding_window_probs(const LogitFn& model, const Image& image,
                                           int window, double overlap_frac,
                                           int num_classes) {
    require(overlap_frac >= 0.0 && overlap_frac < 1.0, "overlap must be in [0,1)");
    require(window <= image.height && window <= image.width, "window larger than image");
    const int stride =
        std::max(1, static_cast<int>(std::llround(window * (1.0 - overlap_frac))));
    std::vector<int> ys = window_starts(image.height, window, stride);
    std::vector<int> xs = window_starts(image.width, window, stride);

    Tensor<double> acc(num_classes, image.height, image.width, 0.0);
    Grid<double> cover(image.height, image.width, 0.0);
    for (int y0 : ys) {
        for (int x0 : xs) {
            Image win = image.crop(y0, x0, window, window);
            Tensor<float> logit = model(win);
            require(logit.channels == num_classes && logit.height == window &&
                        logit.width == window,
                    "model output shape mismatch");
            Tensor<float> probs = softmax_channels(logit);
            for (int c = 0; c < num_classes; ++c)
                for (int y = 0; y < window; ++y)
                    for (int x = 0; x < window; ++x)
                        acc.at(c, y0 + y, x0 + x) += probs.at(c, y, x);
            for (int y = 0; y < window; ++y)
                for (int x = 0; x < window; ++x) cover.at(y0 + y, x0 + x) += 1.0;
        }
    }
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            require(cover.at(y, x) >= 1.0, "uncovered pixel");
            for (int c = 0; c < num_classes; ++c) acc.at(c, y, x) /= cover.at(y, x);
        }
    }
    return acc;
}

inline ClassMap argmax_map(const Tensor<double>& probs) {
    ClassMap out(probs.height, probs.width, probs.channels);
    for (int y = 0; y < probs.height; ++y) {
        for (int x = 0; x < probs.width; ++x) {
            int best = 0;
            double bv = probs.at(0, y, x);
            for (int c = 1; c < probs.channels; ++c) {
                if (probs.at(c, y, x) > bv) {
                    bv = probs.at(c, y, x);
                    best = c;
                }
            }
            out.at(y, x) = static_cast<uint8_t>(best);
        }
    }
    return out;
}

inline ClassMap sliding_window_infer(const LogitFn& model, const Image& image, int window,
                                     double overlap_frac, int num_classes) {
    return argmax_map(sliding_window_probs(model, image, window, overlap_frac, num_classes));
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct SegMetrics {
    std::vector<double> iou;  // per class; 1.0 when the class is absent in both
    double miou = 0.0;        // mean over classes present in ground truth
    double acc = 0.0;
    std::vector<bool> present;  // class appears in ground truth
};

struct SegCounts {
    std::vector<int64_t> inter, pred, gt;
    int64_t correct = 0, total = 0;

    explicit SegCounts(int k = 0) : inter(k, 0), pred(k, 0), gt(k, 0) {}

    void add(const ClassMap& pred_map, const ClassMap& gt_map) {
        require(pred_map.height == gt_map.height && pred_map.width == gt_map.width,
                "seg_metrics shape mismatch");
        const int k = static_cast<int>(inter.size());
        for (size_t i = 0; i < gt_map.labels.size(); ++i) {
            const uint8_t g = gt_map.labels[i];
            if (g == ClassMap::kIgnore) continue;
            const uint8_t p = pred_map.labels[i];
            require(g < k && p < k, "label out of range in seg_metrics");
            ++total;
            if (p == g) ++correct;
            ++pred[p];
            ++gt[g];
            if (p == g) ++inter[p];
        }
    }
};

inline SegMetrics metrics_from_counts(const SegCounts& c) {
    const int k = static_cast<int>(c.inter.size());
    require(c.total > 0, "no labeled pixels to score");
    SegMetrics m;
    m.iou.resize(k);
    m.present.resize(k);
    double sum = 0;
    int n_present = 0;
    for (int i = 0; i < k; ++i) {
        const int64_t uni = c.pred[i] + c.gt[i] - c.inter[i];
        m.iou[i] = (uni == 0) ? 1.0 : static_cast<double>(c.inter[i]) / uni;
        m.present[i] = c.gt[i] > 0;
        if (m.present[i]) {
            sum += m.iou[i];
            ++n_present;
        }
    }
    require(n_present > 0, "ground truth contains no classes");
    m.miou = sum / n_present;
    m.acc = static_cast<double>(c.correct) / c.total;
    return m;
}

inline SegMetrics seg_metrics(const ClassMap& pred, const ClassMap& gt, int k) {
    SegCounts c(k);
    c.add(pred, gt);
    return metrics_from_counts(c);
}

// ---------------------------------------------------------------------------
// Test-set evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    std::vector<SegMetrics> per_item;
    SegMetrics aggregate;  // pixel-weighted: pooled counts across items
};

inline EvalResult evaluate_on_test(const LogitFn& model, const std::vector<Tile>& test,
                                   int window, double overlap_frac, int num_classes) {
    require(!test.empty(), "empty test corpus");
    EvalResult out;
    SegCounts pooled(num_classes);
    for (const auto& item : test) {
        ClassMap pred =
            sliding_window_infer(model, item.image, window, overlap_frac, num_classes);
        out.per_item.push_back(seg_metrics(pred, item.mask, num_classes));
        pooled.add(pred, item.mask);
    }
    out.aggregate = metrics_from_counts(pooled);
    return out;
}

}  // namespace phasegen
