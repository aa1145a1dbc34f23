#pragma once
// Generative-quality metrics: Frechet distance on feature embeddings,
// inception-style score, k-NN precision/recall, conditioning fidelity, and
// fraction-distribution analyses.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/corpus.hpp"
#include "phasegen/fractions.hpp"

namespace phasegen {

using FeatVec = std::vector<double>;

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

namespace detail {

inline void mean_and_cov(const std::vector<FeatVec>& feats, Eigen::VectorXd& mu,
                         Eigen::MatrixXd& sigma) {
    const int n = static_cast<int>(feats.size());
    const int d = static_cast<int>(feats[0].size());
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i) {
        require(static_cast<int>(feats[i].size()) == d, "feature dimension mismatch");
        for (int j = 0; j < d; ++j) x(i, j) = feats[i][j];
    }
    mu = x.colwise().mean();
    Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    sigma = (c.transpose() * c) / std::max(1, n - 1);
}

/// Symmetric PSD square root via eigendecomposition, negatives clipped.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu_r - mu_s||^2 + tr(S_r + S_s - 2 (S_r S_s)^{1/2}). The cross term uses
/// tr sqrt(S_r S_s) = tr sqrt(A S_s A) with A = sqrt(S_r), which is symmetric,
/// so one self-adjoint eigendecomposition with clipping suffices.
inline double frechet_distance(const std::vector<FeatVec>& real,
                               const std::vector<FeatVec>& synth) {
    require(real.size() >= 2 && synth.size() >= 2, "need at least 2 samples per side");
    require(real[0].size() == synth[0].size(), "feature dimension mismatch");
    Eigen::VectorXd mu_r, mu_s;
    Eigen::MatrixXd sig_r, sig_s;
    detail::mean_and_cov(real, mu_r, sig_r);
    detail::mean_and_cov(synth, mu_s, sig_s);

    Eigen::MatrixXd a = detail::psd_sqrt(sig_r);
    Eigen::MatrixXd m = a * sig_s * a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double dist = (mu_r - mu_s).squaredNorm() + sig_r.trace() + sig_s.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, dist);
}

// ---------------------------------------------------------------------------
// Inception-style score
// ---------------------------------------------------------------------------

struct ScoreStat {
    double mean = 0.0;
    double std = 0.0;
};

/// Per split: exp(mean_x KL(p(y|x) || p(y))), p(y) the split marginal.
inline ScoreStat inception_score(const std::vector<FeatVec>& probs, int splits = 10) {
    require(!probs.empty(), "inception_score needs samples");
    require(splits >= 1 && splits <= static_cast<int>(probs.size()),
            "invalid split count");
    const int k = static_cast<int>(probs[0].size());
    for (const auto& p : probs) {
        require(static_cast<int>(p.size()) == k, "probability dimension mismatch");
        double s = 0;
        for (double x : p) {
            require(x >= 0.0, "negative probability");
            s += x;
        }
        require(std::abs(s - 1.0) <= 1e-6, "probability vector does not sum to 1");
    }

    const int n = static_cast<int>(probs.size());
    std::vector<double> scores;
    for (int s = 0; s < splits; ++s) {
        const int lo = s * n / splits;
        const int hi = (s + 1) * n / splits;
        require(hi > lo, "empty split");
        std::vector<double> marginal(k, 0.0);
        for (int i = lo; i < hi; ++i)
            for (int j = 0; j < k; ++j) marginal[j] += probs[i][j];
        for (auto& m : marginal) m /= (hi - lo);
        double kl_mean = 0.0;
        for (int i = lo; i < hi; ++i) {
            double kl = 0.0;
            for (int j = 0; j < k; ++j) {
                const double p = probs[i][j];
                if (p > 0.0) kl += p * std::log(p / marginal[j]);
            }
            kl_mean += kl;
        }
        kl_mean /= (hi - lo);
        scores.push_back(std::exp(kl_mean));
    }
    ScoreStat out;
    for (double v : scores) out.mean += v;
    out.mean /= scores.size();
    double var = 0.0;
    for (double v : scores) var += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(var / scores.size());
    return out;
}

// ---------------------------------------------------------------------------
// Precision / recall via k-NN manifolds
// ---------------------------------------------------------------------------

namespace detail {

inline double dist2(const FeatVec& a, const FeatVec& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// Squared radius of each point's k-th nearest neighbor within its own set.
inline std::vector<double> knn_radii2(const std::vector<FeatVec>& pts, int k) {
    const int n = static_cast<int>(pts.size());
    std::vector<double> radii(n);
    std::vector<double> d(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) d[j] = dist2(pts[i], pts[j]);
        d[i] = std::numeric_limits<double>::infinity();  // exclude self
        std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
        radii[i] = d[k - 1];
    }
    return radii;
}

/// Fraction of query points inside the union of the reference k-NN balls.
inline double manifold_coverage(const std::vector<FeatVec>& queries,
                                const std::vector<FeatVec>& refs,
                                const std::vector<double>& ref_radii2) {
    int hits = 0;
    for (const auto& q : queries) {
        for (size_t i = 0; i < refs.size(); ++i) {
            if (dist2(q, refs[i]) <= ref_radii2[i]) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / queries.size();
}

}  // namespace detail

/// precision = synth coverage by real manifold; recall = the converse.
inline std::pair<double, double> precision_recall(const std::vector<FeatVec>& real,
                                                  const std::vector<FeatVec>& synth,
                                                  int k = 3) {
    require(k >= 1, "k must be >= 1");
    require(static_cast<int>(real.size()) >= k + 1 &&
                static_cast<int>(synth.size()) >= k + 1,
            "need at least k+1 samples per side");
    require(real[0].size() == synth[0].size(), "feature dimension mismatch");
    std::vector<double> rr = detail::knn_radii2(real, k);
    std::vector<double> sr = detail::knn_radii2(synth, k);
    double precision = detail::manifold_coverage(synth, real, rr);
    double recall = detail::manifold_coverage(real, synth, sr);
    return {precision, recall};
}

// ---------------------------------------------------------------------------
// Conditioning fidelity
// ---------------------------------------------------------------------------

struct ClassFidelity {
    std::optional<double> r2;  // absent when target variance is zero
    double mae_pp = 0.0;       // mean abs error in percentage points
};

inline std::vector<ClassFidelity> fraction_fidelity(const std::vector<PhaseFraction>& targets,
                                                    const std::vector<PhaseFraction>& realized) {
    require(targets.size() == realized.size(), "target/realized length mismatch");
    require(targets.size() >= 2, "need at least 2 pairs");
    const size_t k = targets[0].f.size();
    const size_t n = targets.size();
    std::vector<ClassFidelity> out(k);
    for (size_t c = 0; c < k; ++c) {
        double mean_t = 0;
        for (size_t i = 0; i < n; ++i) mean_t += targets[i].f[c];
        mean_t /= n;
        double ss_tot = 0, ss_res = 0, mae = 0;
        for (size_t i = 0; i < n; ++i) {
            const double t = targets[i].f[c];
            const double r = realized[i].f[c];
            ss_tot += (t - mean_t) * (t - mean_t);
            ss_res += (r - t) * (r - t);
            mae += std::abs(r - t);
        }
        out[c].mae_pp = mae / n * 100.0;
        if (ss_tot > 0) out[c].r2 = 1.0 - ss_res / ss_tot;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fraction histograms + tail coverage
// ---------------------------------------------------------------------------

struct ClassHistogram {
    std::vector<double> edges;         // bins+1 shared edges
    std::vector<double> real_density;  // bins entries, integrates to 1
    std::vector<double> synth_density;
    double real_tail_mass = 0.0;   // sample mass above the real 95th percentile
    double synth_tail_mass = 0.0;
    std::optional<double> tail_ratio;  // synth/real; absent when real mass is 0
};

inline std::vector<ClassHistogram> fraction_histograms(
    const std::vector<PhaseFraction>& real, const std::vector<PhaseFraction>& synth,
    int bins = 20, double tail_quantile = 0.95) {
    require(!real.empty() && !synth.empty(), "histograms need non-empty sets");
    require(bins >= 1, "need at least one bin");
    const size_t k = real[0].f.size();
    std::vector<ClassHistogram> out(k);
    for (size_t c = 0; c < k; ++c) {
        std::vector<double> rv, sv;
        for (const auto& f : real) rv.push_back(f.f[c]);
        for (const auto& f : synth) sv.push_back(f.f[c]);
        double lo = std::min(*std::min_element(rv.begin(), rv.end()),
                             *std::min_element(sv.begin(), sv.end()));
        double hi = std::max(*std::max_element(rv.begin(), rv.end()),
                             *std::max_element(sv.begin(), sv.end()));
        if (hi <= lo) hi = lo + 1e-12;
        ClassHistogram& h = out[c];
        h.edges.resize(bins + 1);
        for (int b = 0; b <= bins; ++b) h.edges[b] = lo + (hi - lo) * b / bins;
        const double bw = (hi - lo) / bins;
        auto fill = [&](const std::vector<double>& vals, std::vector<double>& dens) {
            dens.assign(bins, 0.0);
            for (double v : vals) {
                int b = static_cast<int>((v - lo) / bw);
                b = clamp(b, 0, bins - 1);
                dens[b] += 1.0;
            }
            for (auto& d : dens) d /= (vals.size() * bw);
        };
        fill(rv, h.real_density);
        fill(sv, h.synth_density);

        const double p95 = empirical_quantile(rv, tail_quantile);
        auto tail = [&](const std::vector<double>& vals) {
            int n_above = 0;
            for (double v : vals) n_above += (v > p95);
            return static_cast<double>(n_above) / vals.size();
        };
        h.real_tail_mass = tail(rv);
        h.synth_tail_mass = tail(sv);
        if (h.real_tail_mass > 0) h.tail_ratio = h.synth_tail_mass / h.real_tail_mass;
    }
    return out;
}

// ---------------------------------------------------------------------------
// PCA projection of fraction vectors
// ---------------------------------------------------------------------------

struct PcaResult {
    std::vector<std::array<double, 2>> points;
    std::array<double, 2> explained{0.0, 0.0};  // variance fractions of PC1, PC2
    std::vector<std::array<double, 2>> axes;    // per input dim: (PC1, PC2) loading
};

inline PcaResult pca_project(const std::vector<PhaseFraction>& fracs) {
    require(fracs.size() >= 3, "PCA needs at least 3 vectors");
    const int n = static_cast<int>(fracs.size());
    const int d = static_cast<int>(fracs[0].f.size());
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i) {
        require(static_cast<int>(fracs[i].f.size()) == d, "fraction dimension mismatch");
        for (int j = 0; j < d; ++j) x(i, j) = fracs[i].f[j];
    }
    Eigen::VectorXd mu = x.colwise().mean();
    Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = (c.transpose() * c) / std::max(1, n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);

    // eigenvalues ascend; take the top two, fix signs for reproducibility
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    const double total = std::max(ev.sum(), 1e-300);
    PcaResult out;
    Eigen::MatrixXd axes(d, 2);
    for (int a = 0; a < 2; ++a) {
        const int idx = d - 1 - a;
        Eigen::VectorXd v = es.eigenvectors().col(idx);
        int arg = 0;
        for (int j = 1; j < d; ++j)
            if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
        if (v(arg) < 0) v = -v;
        axes.col(a) = v;
        out.explained[a] = ev(idx) / total;
    }
    Eigen::MatrixXd proj = c * axes;
    out.points.resize(n);
    for (int i = 0; i < n; ++i) out.points[i] = {proj(i, 0), proj(i, 1)};
    out.axes.resize(d);
    for (int j = 0; j < d; ++j) out.axes[j] = {axes(j, 0), axes(j, 1)};
    return out;
}

// ---------------------------------------------------------------------------
// Desk-scale feature extractor: adaptive average pooling, a fixed-seed random
// projection, and an optional softmax-regression head for class probabilities.
// Full-scale users can plug a pretrained embedding instead; only the metric
// formulas above are load-bearing.
// ---------------------------------------------------------------------------

class RandomProjectionExtractor {
public:
    RandomProjectionExtractor(int in_channels, int pool = 8, int feature_dim = 16,
                              uint64_t seed = 17)
        : in_channels_(in_channels), pool_(pool), dim_(feature_dim) {
        Rng rng = make_rng(derive_seed(seed, "feature-proj"));
        const int in_dim = in_channels * pool * pool;
        w_.resize(static_cast<size_t>(dim_) * in_dim);
        const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
        for (auto& v : w_) v = rng.normal() * scale;
    }

    int feature_dim() const { return dim_; }
    int in_channels() const { return in_channels_; }

    FeatVec features(const Tensor<float>& x) const {
        require(x.channels == in_channels_, "extractor channel mismatch");
        std::vector<double> pooled = adaptive_pool(x);
        FeatVec out(dim_, 0.0);
        const size_t in_dim = pooled.size();
        for (int i = 0; i < dim_; ++i) {
            double acc = 0;
            for (size_t j = 0; j < in_dim; ++j) acc += w_[i * in_dim + j] * pooled[j];
            // tanh on the second half adds a nonlinear view of the same stats
            out[i] = (i < dim_ / 2) ? acc : std::tanh(acc);
        }
        return out;
    }

    FeatVec features(const Image& img) const {
        Tensor<float> t(1, img.height, img.width);
        std::copy(img.v.begin(), img.v.end(), t.v.begin());
        return features(t);
    }

    /// Fit a softmax-regression head on (features, label) pairs.
    void fit_head(const std::vector<FeatVec>& feats, const std::vector<int>& labels,
                  int num_classes, int iters = 300, double lr = 0.5) {
        require(feats.size() == labels.size() && !feats.empty(), "bad head training data");
        num_classes_ = num_classes;
        head_w_.assign(static_cast<size_t>(num_classes) * dim_, 0.0);
        head_b_.assign(num_classes, 0.0);
        const int n = static_cast<int>(feats.size());
        std::vector<double> gw(head_w_.size()), gb(head_b_.size());
        for (int it = 0; it < iters; ++it) {
            std::fill(gw.begin(), gw.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            for (int i = 0; i < n; ++i) {
                std::vector<double> p = head_probs(feats[i]);
                for (int c = 0; c < num_classes; ++c) {
                    const double err = p[c] - (labels[i] == c ? 1.0 : 0.0);
                    gb[c] += err;
                    for (int j = 0; j < dim_; ++j) gw[c * dim_ + j] += err * feats[i][j];
                }
            }
            for (size_t j = 0; j < head_w_.size(); ++j) head_w_[j] -= lr * gw[j] / n;
            for (size_t j = 0; j < head_b_.size(); ++j) head_b_[j] -= lr * gb[j] / n;
        }
    }

    bool has_head() const { return num_classes_ > 0; }

    FeatVec class_probs(const Tensor<float>& x) const {
        require(has_head(), "classifier head not fitted");
        return head_probs(features(x));
    }

private:
    std::vector<double> adaptive_pool(const Tensor<float>& x) const {
        std::vector<double> out(static_cast<size_t>(in_channels_) * pool_ * pool_, 0.0);
        for (int c = 0; c < in_channels_; ++c) {
            for (int py = 0; py < pool_; ++py) {
                const int y0 = py * x.height / pool_;
                const int y1 = std::max(y0 + 1, (py + 1) * x.height / pool_);
                for (int px = 0; px < pool_; ++px) {
                    const int x0 = px * x.width / pool_;
                    const int x1 = std::max(x0 + 1, (px + 1) * x.width / pool_);
                    double acc = 0;
                    for (int y = y0; y < y1; ++y)
                        for (int xx = x0; xx < x1; ++xx) acc += x.at(c, y, xx);
                    out[(static_cast<size_t>(c) * pool_ + py) * pool_ + px] =
                        acc / ((y1 - y0) * (x1 - x0));
                }
            }
        }
        return out;
    }

    std::vector<double> head_probs(const FeatVec& f) const {
        std::vector<double> z(num_classes_);
        for (int c = 0; c < num_classes_; ++c) {
            double acc = head_b_[c];
            for (int j = 0; j < dim_; ++j) acc += head_w_[c * dim_ + j] * f[j];
            z[c] = acc;
        }
        const double mx = *std::max_element(z.begin(), z.end());
        double denom = 0;
        for (auto& v : z) {
            v = std::exp(v - mx);
            denom += v;
        }
        for (auto& v : z) v /= denom;
        return z;
    }

    int in_channels_, pool_, dim_;
    std::vector<double> w_;
    int num_classes_ = 0;
    std::vector<double> head_w_, head_b_;
};

// ---------------------------------------------------------------------------
// Metric bundle over real / synthetic tile sets
// ---------------------------------------------------------------------------

struct GenMetrics {
    double fid_image = 0, fid_mask = 0;
    ScoreStat is_image, is_mask;
    double precision = 0, recall = 0;
};

inline int dominant_class(const ClassMap& mask) {
    std::vector<int64_t> counts(mask.num_classes, 0);
    for (uint8_t l : mask.labels)
        if (l != ClassMap::kIgnore) ++counts[l];
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

inline GenMetrics compute_gen_metrics(const std::vector<Tile>& real,
                                      const std::vector<Tile>& synth,
                                      const Palette& palette, uint64_t seed,
                                      int knn_k = 3, int is_splits = 10) {
    require(real.size() >= 2 && synth.size() >= 2, "need at least 2 tiles per side");
    const int k = static_cast<int>(palette.entries.size());
    RandomProjectionExtractor img_ex(1, 8, 16, derive_seed(seed, "img-extractor"));
    RandomProjectionExtractor mask_ex(3, 8, 16, derive_seed(seed, "mask-extractor"));

    auto img_feats = [&](const std::vector<Tile>& ts) {
        std::vector<FeatVec> out;
        for (const auto& t : ts) out.push_back(img_ex.features(t.image));
        return out;
    };
    auto mask_feats = [&](const std::vector<Tile>& ts) {
        std::vector<FeatVec> out;
        for (const auto& t : ts) out.push_back(mask_ex.features(encode_mask<float>(t.mask, palette)));
        return out;
    };

    std::vector<FeatVec> rif = img_feats(real), sif = img_feats(synth);
    std::vector<FeatVec> rmf = mask_feats(real), smf = mask_feats(synth);

    std::vector<int> labels;
    for (const auto& t : real) labels.push_back(dominant_class(t.mask));
    img_ex.fit_head(rif, labels, k);
    mask_ex.fit_head(rmf, labels, k);

    GenMetrics m;
    m.fid_image = frechet_distance(rif, sif);
    m.fid_mask = frechet_distance(rmf, smf);

    std::vector<FeatVec> ip, mp;
    for (const auto& t : synth) {
        Tensor<float> ti(1, t.image.height, t.image.width);
        std::copy(t.image.v.begin(), t.image.v.end(), ti.v.begin());
        ip.push_back(img_ex.class_probs(ti));
        mp.push_back(mask_ex.class_probs(encode_mask<float>(t.mask, palette)));
    }
    const int splits = std::min<int>(is_splits, static_cast<int>(ip.size()));
    m.is_image = inception_score(ip, splits);
    m.is_mask = inception_score(mp, splits);
    std::tie(m.precision, m.recall) = precision_recall(rif, sif, knn_k);
    return m;
}

}  // namespace phasegen
