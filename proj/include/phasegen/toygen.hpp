#pragma once
// Procedural multiphase toy corpus: smoothed random fields carved into
// class regions with exact per-sample compositions, plus a rendered
// grayscale texture per class. Deterministic for a fixed seed.

#include <algorithm>
#include <numeric>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/corpus.hpp"

namespace phasegen {

struct ToyConfig {
    int num_classes = 4;
    int image_size = 32;
    int num_samples = 200;
    /// Expected pooled composition; need not be normalized on input.
    std::vector<double> abundance = {0.52, 0.37, 0.08, 0.03};
    /// Dirichlet concentration controlling sample-to-sample composition spread.
    double concentration = 12.0;
    /// Blur radius of the region fields; larger -> coarser blobs.
    int smoothness = 3;
    /// Image rendering: per-class gray separation and texture/noise amplitudes.
    double texture_amp = 0.12;
    double noise_amp = 0.04;
    double test_fraction = 0.1;
};

namespace detail {

/// Zero-mean smooth field: white noise put through three separable box blurs.
inline Grid<float> smooth_field(int h, int w, Rng& rng, int radius) {
    Grid<float> f(h, w);
    for (auto& v : f.v) v = static_cast<float>(rng.normal());
    if (radius < 1) return f;
    Grid<float> tmp(h, w);
    for (int pass = 0; pass < 3; ++pass) {
        // horizontal
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float acc = 0;
                int n = 0;
                for (int d = -radius; d <= radius; ++d) {
                    int xx = x + d;
                    if (xx < 0 || xx >= w) continue;
                    acc += f.at(y, xx);
                    ++n;
                }
                tmp.at(y, x) = acc / static_cast<float>(n);
            }
        }
        // vertical
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float acc = 0;
                int n = 0;
                for (int d = -radius; d <= radius; ++d) {
                    int yy = y + d;
                    if (yy < 0 || yy >= h) continue;
                    acc += tmp.at(yy, x);
                    ++n;
                }
                f.at(y, x) = acc / static_cast<float>(n);
            }
        }
    }
    float mean = std::accumulate(f.v.begin(), f.v.end(), 0.0f) / static_cast<float>(f.size());
    float var = 0;
    for (float v : f.v) var += (v - mean) * (v - mean);
    float inv_std = var > 0 ? 1.0f / std::sqrt(var / static_cast<float>(f.size())) : 1.0f;
    for (auto& v : f.v) v = (v - mean) * inv_std;
    return f;
}

/// Dirichlet draw with alpha_i = concentration * abundance_i; zero-weight
/// classes stay exactly zero.
inline std::vector<double> dirichlet(const std::vector<double>& abundance, double concentration,
                                     Rng& rng) {
    std::vector<double> w(abundance.size(), 0.0);
    double total = 0;
    for (size_t i = 0; i < abundance.size(); ++i) {
        if (abundance[i] <= 0) continue;
        std::gamma_distribution<double> gamma(concentration * abundance[i], 1.0);
        w[i] = gamma(rng.engine());
        total += w[i];
    }
    if (total <= 0) {
        // pathological draw; fall back to the configured means
        double s = std::accumulate(abundance.begin(), abundance.end(), 0.0);
        for (size_t i = 0; i < w.size(); ++i) w[i] = abundance[i] / s;
        return w;
    }
    for (auto& x : w) x /= total;
    return w;
}

/// Carve the pixel grid into class regions with exact target counts.
/// Minority classes claim the top pixels of their own smooth field first,
/// so they come out as compact islands; the largest class absorbs the rest.
inline ClassMap carve_mask(int size, int num_classes, const std::vector<double>& weights,
                           int smoothness, Rng& rng) {
    const int hw = size * size;
    std::vector<int> targets(num_classes);
    int assigned_total = 0;
    for (int k = 0; k < num_classes; ++k) {
        targets[k] = static_cast<int>(std::floor(weights[k] * hw));
        assigned_total += targets[k];
    }
    // largest-weight class absorbs the rounding remainder
    int largest = static_cast<int>(std::max_element(weights.begin(), weights.end()) -
                                   weights.begin());
    targets[largest] += hw - assigned_total;

    std::vector<Grid<float>> fields;
    fields.reserve(num_classes);
    for (int k = 0; k < num_classes; ++k) {
        // minority classes get finer fields -> smaller islands
        int radius = weights[k] < 0.15 ? std::max(1, smoothness - 2) : smoothness;
        fields.push_back(smooth_field(size, size, rng, radius));
    }

    // assignment order: smallest target first, remainder class last
    std::vector<int> order(num_classes);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (a == largest) return false;
        if (b == largest) return true;
        if (targets[a] != targets[b]) return targets[a] < targets[b];
        return a < b;
    });

    ClassMap mask(size, size, num_classes, ClassMap::kIgnore);
    std::vector<int> unassigned(hw);
    std::iota(unassigned.begin(), unassigned.end(), 0);
    for (size_t oi = 0; oi + 1 < order.size(); ++oi) {
        int k = order[oi];
        if (targets[k] <= 0) continue;
        const auto& field = fields[k].v;
        std::stable_sort(unassigned.begin(), unassigned.end(),
                         [&field](int a, int b) { return field[a] > field[b]; });
        int take = std::min<int>(targets[k], static_cast<int>(unassigned.size()));
        for (int i = 0; i < take; ++i) mask.labels[unassigned[i]] = static_cast<uint8_t>(k);
        unassigned.erase(unassigned.begin(), unassigned.begin() + take);
    }
    for (int idx : unassigned) mask.labels[idx] = static_cast<uint8_t>(largest);
    return mask;
}

/// Render a grayscale texture from the mask: class base level plus a smooth
/// modulation field and fine noise.
inline Image render_image(const ClassMap& mask, const ToyConfig& cfg, Rng& rng) {
    const int k = mask.num_classes;
    std::vector<float> base(k);
    for (int i = 0; i < k; ++i)
        base[i] = -0.75f + 1.6f * static_cast<float>(i) / static_cast<float>(std::max(1, k - 1));

    Grid<float> tex = smooth_field(mask.height, mask.width, rng, std::max(1, cfg.smoothness - 1));
    Image img(mask.height, mask.width);
    for (size_t i = 0; i < img.size(); ++i) {
        float v = base[mask.labels[i]];
        v += static_cast<float>(cfg.texture_amp) * tex.v[i];
        v += static_cast<float>(cfg.noise_amp) * static_cast<float>(rng.normal());
        img.v[i] = clamp(v, -1.0f, 1.0f);
    }
    return img;
}

}  // namespace detail

/// Procedural stand-in corpus: multiphase textures with exact label maps.
/// Realized pooled class ratio tracks the configured abundance weights.
inline Corpus generate_toy_corpus(const ToyConfig& cfg, uint64_t seed) {
    require(cfg.num_classes >= 2 && cfg.num_classes <= 8, "toy corpus supports 2..8 classes");
    require(cfg.image_size >= 8, "toy image size too small");
    require(cfg.num_samples >= 1, "toy corpus needs at least one sample");
    require(static_cast<int>(cfg.abundance.size()) == cfg.num_classes,
            "abundance weights must have one entry per class");
    double total = 0;
    for (double a : cfg.abundance) {
        require(a >= 0, "abundance weights must be non-negative");
        total += a;
    }
    require(total > 0, "abundance weights must not all be zero");
    std::vector<double> abundance = cfg.abundance;
    for (auto& a : abundance) a /= total;

    Corpus corpus;
    corpus.num_classes = cfg.num_classes;
    corpus.palette = default_palette(cfg.num_classes);
    for (int k = 0; k < cfg.num_classes; ++k)
        corpus.class_names.push_back("class" + std::to_string(k));

    Rng base = make_rng(seed);
    const int num_test = static_cast<int>(std::floor(cfg.test_fraction * cfg.num_samples));
    for (int i = 0; i < cfg.num_samples; ++i) {
        Rng rng = base.substream("toy-sample", static_cast<uint64_t>(i));
        SourcePair src;
        src.id = "toy-" + std::to_string(i);
        src.split = (i < cfg.num_samples - num_test) ? "train" : "test";
        std::vector<double> w = detail::dirichlet(abundance, cfg.concentration, rng);
        src.mask = detail::carve_mask(cfg.image_size, cfg.num_classes, w, cfg.smoothness, rng);
        src.image = detail::render_image(src.mask, cfg, rng);
        corpus.sources.push_back(std::move(src));
    }
    return corpus;
}

}  // namespace phasegen
