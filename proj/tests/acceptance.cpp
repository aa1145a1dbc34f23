// Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and exits
// nonzero if anything failed.
//
//   acceptance fast   criteria with second-scale runtimes (1-7, 10, 12)
//   acceptance e2e    end-to-end training criteria (8, 9, 11)
//   acceptance all    everything, in numeric order
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "phasegen/report.hpp"

using namespace phasegen;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void expect(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

void run_criterion(int id, const char* name, const std::function<std::string()>& body) {
    try {
        std::string detail = body();
        std::printf("PASS  criterion %2d: %s (%s)\n", id, name, detail.c_str());
    } catch (const std::exception& e) {
        ++g_failures;
        std::printf("FAIL  criterion %2d: %s (%s)\n", id, name, e.what());
    }
    std::fflush(stdout);
}

void note(const std::string& msg) {
    std::printf("      ... %s\n", msg.c_str());
    std::fflush(stdout);
}

// Ideal noise predictor for a known clean pair: lets sampler structure be
// tested without training a network.
struct OracleDenoiser : Denoiser<double> {
    Tensor<double> x0;
    const NoiseSchedule& sched;
    OracleDenoiser(Tensor<double> clean, const NoiseSchedule& s)
        : x0(std::move(clean)), sched(s) {}
    Tensor<double> predict(const Tensor<double>& x_t, int t,
                           const std::vector<double>&) override {
        const double ab = sched.alpha_bar_at(t);
        const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
        Tensor<double> eps(x_t.channels, x_t.height, x_t.width);
        for (size_t i = 0; i < x_t.size(); ++i) eps.v[i] = (x_t.v[i] - a * x0.v[i]) / b;
        return eps;
    }
    int in_channels() const override { return x0.channels; }
    int out_channels() const override { return x0.channels; }
};

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// 1. forward/inverse algebra
// ---------------------------------------------------------------------------

std::string criterion_1() {
    NoiseSchedule sched = build_schedule(ScheduleKind::cosine, 1000);
    Rng rng = make_rng(101);
    double max_err = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor<double> x0(2, 3, 3), noise(2, 3, 3);
        for (auto& v : x0.v) v = rng.uniform() * 2.0 - 1.0;
        for (auto& v : noise.v) v = rng.normal();
        const int t = rng.uniform_int(1, 1000);
        Tensor<double> x_t = forward_diffuse(x0, t, noise, sched);
        Tensor<double> back = predict_x0(x_t, noise, t, sched);
        for (size_t i = 0; i < x0.size(); ++i)
            max_err = std::max(max_err, std::abs(back.v[i] - x0.v[i]));
    }
    expect(max_err < 1e-5, "max reconstruction error " + fmt(max_err) + " >= 1e-5");
    return "1000 triples, max err " + fmt(max_err);
}

// ---------------------------------------------------------------------------
// 2. forward marginals
// ---------------------------------------------------------------------------

std::string criterion_2() {
    NoiseSchedule sched = build_schedule(ScheduleKind::cosine, 1000);
    Rng rng = make_rng(202);
    const double x0v = 0.7;
    const int n = 10000;
    double worst_sigmas = 0.0;
    for (int t : {1, 250, 500, 750, 1000}) {
        const double ab = sched.alpha_bar_at(t);
        const double want_mean = std::sqrt(ab) * x0v;
        const double want_var = 1.0 - ab;
        Tensor<double> x0(1, 1, 1), noise(1, 1, 1);
        x0.v[0] = x0v;
        double sum = 0, sum2 = 0;
        for (int i = 0; i < n; ++i) {
            noise.v[0] = rng.normal();
            const double y = forward_diffuse(x0, t, noise, sched).v[0];
            sum += y;
            sum2 += y * y;
        }
        const double mean = sum / n;
        const double var = (sum2 - n * mean * mean) / (n - 1);
        const double se_mean = std::sqrt(want_var) / std::sqrt(double(n));
        const double se_var = want_var * std::sqrt(2.0 / (n - 1));
        const double z_mean = std::abs(mean - want_mean) / se_mean;
        const double z_var = std::abs(var - want_var) / se_var;
        worst_sigmas = std::max({worst_sigmas, z_mean, z_var});
        expect(z_mean < 3.0, "t=" + std::to_string(t) + " mean off by " + fmt(z_mean) + " SE");
        expect(z_var < 3.0, "t=" + std::to_string(t) + " var off by " + fmt(z_var) + " SE");
    }
    return "5 timesteps x 10000 draws, worst deviation " + fmt(worst_sigmas) + " SE";
}

// ---------------------------------------------------------------------------
// 3. mask codec
// ---------------------------------------------------------------------------

std::string criterion_3() {
    Rng rng = make_rng(303);
    int flips = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = 2 + trial % 7;  // 2..8 classes
        Palette palette = default_palette(k);
        ClassMap mask(6, 7, k);
        for (auto& l : mask.labels) l = static_cast<uint8_t>(rng.uniform_int(0, k - 1));

        Tensor<double> ch = encode_mask<double>(mask, palette);
        ClassMap clean = decode_mask(ch, palette);
        expect(clean.labels == mask.labels, "clean decode is not the identity");

        // perturb each channel below d_min/(2*sqrt(3)) so the per-pixel
        // palette-space displacement stays below d_min/2
        const double r = 0.9 * palette.min_distance() / (2.0 * std::sqrt(3.0));
        for (auto& v : ch.v) v += (rng.uniform() * 2.0 - 1.0) * r;
        ClassMap noisy = decode_mask(ch, palette);
        for (size_t i = 0; i < mask.labels.size(); ++i)
            flips += (noisy.labels[i] != mask.labels[i]);
    }
    expect(flips == 0, std::to_string(flips) + " label flips under sub-threshold noise");
    return "1000 encode/decode identities, 0 flips under noise";
}

// ---------------------------------------------------------------------------
// 4. fraction sampler
// ---------------------------------------------------------------------------

std::string criterion_4() {
    Rng rng = make_rng(404);

    // sigma = 0 is exactly the identity
    JitterConfig zero;
    zero.sigma = 0.0;
    PhaseFraction base({0.55, 0.3, 0.1, 0.05});
    expect(jitter_fraction(base, zero, rng).f == base.f, "sigma=0 is not the identity");

    // validity over 100k draws
    JitterConfig jit;
    jit.sigma = 0.1;
    for (int i = 0; i < 100000; ++i) {
        PhaseFraction d = jitter_fraction(base, jit, rng);
        double sum = 0;
        for (double v : d.f) {
            expect(v >= 0.0, "negative component");
            sum += v;
        }
        expect(std::abs(sum - 1.0) <= 1e-12, "draw does not sum to 1");
    }

    // exact 70/20/10 branch allocation
    std::vector<PhaseFraction> pool;
    Rng pr = make_rng(405);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> f(4);
        double s = 0;
        for (auto& v : f) {
            v = -std::log(1.0 - pr.uniform());
            s += v;
        }
        for (auto& v : f) v /= s;
        pool.emplace_back(f);
    }
    MixtureConfig mix;  // defaults: 0.7/0.2/0.1, ma_class 2, defect_class 3
    for (int n : {10, 100, 5000}) {
        std::vector<ConditionDraw> draws = sample_conditions(pool, n, mix, jit, rng);
        int cnt[3] = {0, 0, 0};
        for (const auto& d : draws) ++cnt[static_cast<int>(d.branch)];
        const int want_ma = static_cast<int>(std::llround(0.2 * n));
        const int want_d = static_cast<int>(std::llround(0.1 * n));
        expect(cnt[static_cast<int>(Branch::uniform)] == n - want_ma - want_d &&
                   cnt[static_cast<int>(Branch::ma_rich)] == want_ma &&
                   cnt[static_cast<int>(Branch::defect_rich)] == want_d,
               "branch counts wrong for n=" + std::to_string(n));
    }

    // minority enrichment on a procedural real set
    ToyConfig tc;
    tc.num_classes = 4;
    tc.image_size = 16;
    tc.num_samples = 150;
    tc.abundance = {0.55, 0.3, 0.1, 0.05};
    tc.concentration = 6.0;
    tc.smoothness = 2;
    Corpus toy = generate_toy_corpus(tc, 406);
    std::vector<PhaseFraction> real;
    for (const auto& s : toy.sources) real.push_back(extract_fraction(s.mask));
    double real_ma = 0, real_d = 0;
    for (const auto& f : real) {
        real_ma += f.f[2];
        real_d += f.f[3];
    }
    real_ma /= real.size();
    real_d /= real.size();

    std::vector<ConditionDraw> draws = sample_conditions(real, 20000, mix, jit, rng);
    double mean_ma = 0, mean_d = 0;
    for (const auto& d : draws) {
        mean_ma += d.target.f[2];
        mean_d += d.target.f[3];
    }
    mean_ma /= draws.size();
    mean_d /= draws.size();
    expect(mean_ma > real_ma, "MA-class mean not enriched");
    expect(mean_d > real_d, "defect-class mean not enriched");
    return "identity/validity/counts ok; enrichment " + fmt(real_ma) + "->" + fmt(mean_ma) +
           " and " + fmt(real_d) + "->" + fmt(mean_d);
}

// ---------------------------------------------------------------------------
// 5. metric oracles
// ---------------------------------------------------------------------------

std::string criterion_5() {
    Rng rng = make_rng(505);

    // FID: zero on identical sets, analytic value under a pure mean shift
    std::vector<FeatVec> a;
    for (int i = 0; i < 60; ++i) {
        FeatVec f(5);
        for (auto& v : f) v = rng.normal();
        a.push_back(f);
    }
    const double self_fid = frechet_distance(a, a);
    expect(std::abs(self_fid) < 1e-9, "self FID " + fmt(self_fid));
    const FeatVec delta = {0.5, -0.3, 0.2, 0.1, 0.05};
    std::vector<FeatVec> b = a;
    double want = 0;
    for (size_t j = 0; j < delta.size(); ++j) {
        for (auto& f : b) f[j] += delta[j];
        want += delta[j] * delta[j];
    }
    const double shift_fid = frechet_distance(a, b);
    expect(std::abs(shift_fid - want) < 1e-8,
           "mean-shift FID " + fmt(shift_fid) + " vs analytic " + fmt(want));

    // IS: analytic extremes and an independent KL recomputation
    std::vector<FeatVec> same(20, FeatVec{0.4, 0.3, 0.2, 0.1});
    ScoreStat is1 = inception_score(same, 4);
    expect(std::abs(is1.mean - 1.0) < 1e-10 && std::abs(is1.std) < 1e-10,
           "identical-distribution IS is not 1");
    std::vector<FeatVec> onehot;
    for (int i = 0; i < 40; ++i) {
        FeatVec f(4, 0.0);
        f[i % 4] = 1.0;
        onehot.push_back(f);
    }
    ScoreStat isk = inception_score(onehot, 1);
    expect(std::abs(isk.mean - 4.0) < 1e-10, "one-hot IS " + fmt(isk.mean) + " != K");

    std::vector<FeatVec> probs;
    for (int i = 0; i < 30; ++i) {
        FeatVec f(5);
        double s = 0;
        for (auto& v : f) {
            v = -std::log(1.0 - rng.uniform());
            s += v;
        }
        for (auto& v : f) v /= s;
        probs.push_back(f);
    }
    const int splits = 3;
    ScoreStat impl = inception_score(probs, splits);
    std::vector<double> scores;
    const int n = static_cast<int>(probs.size());
    for (int s = 0; s < splits; ++s) {
        const int lo = s * n / splits, hi = (s + 1) * n / splits;
        FeatVec marg(5, 0.0);
        for (int i = lo; i < hi; ++i)
            for (int j = 0; j < 5; ++j) marg[j] += probs[i][j];
        for (auto& v : marg) v /= (hi - lo);
        double kl = 0;
        for (int i = lo; i < hi; ++i)
            for (int j = 0; j < 5; ++j)
                if (probs[i][j] > 0) kl += probs[i][j] * std::log(probs[i][j] / marg[j]);
        scores.push_back(std::exp(kl / (hi - lo)));
    }
    double om = 0;
    for (double s : scores) om += s;
    om /= scores.size();
    expect(std::abs(impl.mean - om) < 1e-10,
           "IS " + fmt(impl.mean) + " vs KL oracle " + fmt(om));

    // precision/recall at the two analytic extremes
    auto pr_same = precision_recall(a, a, 3);
    expect(pr_same.first == 1.0 && pr_same.second == 1.0, "identical sets not (1,1)");
    std::vector<FeatVec> far = a;
    for (auto& f : far)
        for (auto& v : f) v += 1000.0;
    auto pr_far = precision_recall(a, far, 3);
    expect(pr_far.first == 0.0 && pr_far.second == 0.0, "separated clusters not (0,0)");

    // segmentation metrics against an independent counting oracle
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 2 + trial % 4;
        ClassMap gt(8, 8, k), pred(8, 8, k);
        bool labeled = false;
        for (size_t i = 0; i < gt.labels.size(); ++i) {
            if (rng.uniform() < 0.1) {
                gt.labels[i] = ClassMap::kIgnore;
            } else {
                gt.labels[i] = static_cast<uint8_t>(rng.uniform_int(0, k - 1));
                labeled = true;
            }
            pred.labels[i] = static_cast<uint8_t>(rng.uniform_int(0, k - 1));
        }
        if (!labeled) gt.labels[0] = 0;
        SegMetrics m = seg_metrics(pred, gt, k);

        std::vector<int64_t> tp(k, 0), pc(k, 0), gc(k, 0);
        int64_t correct = 0, total = 0;
        for (size_t i = 0; i < gt.labels.size(); ++i) {
            if (gt.labels[i] == ClassMap::kIgnore) continue;
            ++total;
            ++pc[pred.labels[i]];
            ++gc[gt.labels[i]];
            if (pred.labels[i] == gt.labels[i]) {
                ++correct;
                ++tp[pred.labels[i]];
            }
        }
        double sum = 0;
        int present = 0;
        for (int c = 0; c < k; ++c) {
            const int64_t uni = pc[c] + gc[c] - tp[c];
            const double iou = uni == 0 ? 1.0 : static_cast<double>(tp[c]) / uni;
            expect(m.iou[c] == iou, "IoU mismatch");
            expect(m.present[c] == (gc[c] > 0), "presence mismatch");
            if (gc[c] > 0) {
                sum += iou;
                ++present;
            }
        }
        expect(m.miou == sum / present, "MIoU mismatch");
        expect(m.acc == static_cast<double>(correct) / total, "accuracy mismatch");
    }
    return "FID/IS/PR extremes analytic, 100 seg cases exact";
}

// ---------------------------------------------------------------------------
// 6. sliding-window equivalence
// ---------------------------------------------------------------------------

std::string criterion_6() {
    const int size = 512, window = 256, k = 3;
    const double overlap = 0.5;
    Rng rng = make_rng(606);
    Image img(size, size);
    for (auto& v : img.v) v = static_cast<float>(rng.uniform() * 2.0 - 1.0);

    LogitFn fn = [k](const Image& win) {
        Tensor<float> logit(k, win.height, win.width);
        for (int c = 0; c < k; ++c)
            for (int y = 0; y < win.height; ++y)
                for (int x = 0; x < win.width; ++x)
                    logit.at(c, y, x) = win.at(y, x) * (c + 1) * 0.5f + 0.1f * c;
        return logit;
    };

    Tensor<double> impl = sliding_window_probs(fn, img, window, overlap, k);
    ClassMap impl_map = sliding_window_infer(fn, img, window, overlap, k);

    // brute force: every placement's softmax, averaged per pixel
    const int stride = static_cast<int>(std::llround(window * (1.0 - overlap)));
    std::vector<int> ys = window_starts(size, window, stride);
    std::vector<int> xs = window_starts(size, window, stride);
    struct Placement {
        int y0, x0;
        Tensor<float> probs;
    };
    std::vector<Placement> placements;
    for (int y0 : ys)
        for (int x0 : xs)
            placements.push_back(
                {y0, x0, softmax_channels(fn(img.crop(y0, x0, window, window)))});

    double max_diff = 0.0;
    int label_mismatch = 0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            std::vector<double> acc(k, 0.0);
            int cover = 0;
            for (const auto& p : placements) {
                if (y < p.y0 || y >= p.y0 + window || x < p.x0 || x >= p.x0 + window)
                    continue;
                for (int c = 0; c < k; ++c) acc[c] += p.probs.at(c, y - p.y0, x - p.x0);
                ++cover;
            }
            int best = 0;
            for (int c = 0; c < k; ++c) {
                acc[c] /= cover;
                max_diff = std::max(max_diff, std::abs(acc[c] - impl.at(c, y, x)));
                if (acc[c] > acc[best]) best = c;
            }
            if (best != impl_map.at(y, x)) ++label_mismatch;
        }
    }
    expect(max_diff == 0.0, "probability mismatch " + fmt(max_diff));
    expect(label_mismatch == 0, std::to_string(label_mismatch) + " label mismatches");

    // a constant model is invariant to the windowing
    LogitFn constant = [k](const Image& win) {
        Tensor<float> logit(k, win.height, win.width);
        const float vals[3] = {0.2f, 1.7f, -0.4f};
        for (int c = 0; c < k; ++c)
            for (int y = 0; y < win.height; ++y)
                for (int x = 0; x < win.width; ++x) logit.at(c, y, x) = vals[c];
        return logit;
    };
    ClassMap const_map = sliding_window_infer(constant, img, window, overlap, k);
    for (uint8_t l : const_map.labels)
        expect(l == 1, "constant model produced a non-constant map");
    return "512x512, 9 placements, bit-exact; constant model invariant";
}

// ---------------------------------------------------------------------------
// 7. one-stage structural claim
// ---------------------------------------------------------------------------

std::string criterion_7() {
    const int k = 3, hw = 16;
    Palette palette = default_palette(k);
    NoiseSchedule sched = build_schedule(ScheduleKind::cosine, 1000);
    Rng mk = make_rng(707);
    Image image(hw, hw);
    ClassMap mask(hw, hw, k);
    for (auto& v : image.v) v = static_cast<float>(mk.normal() * 0.2);
    for (auto& l : mask.labels) l = static_cast<uint8_t>(mk.uniform_int(0, k - 1));
    Tensor<double> x0 = make_pair_tensor<float>(image, mask, palette).cast<double>();

    OracleDenoiser oracle(x0, sched);
    CountingDenoiser<double> counted(oracle);
    SamplerConfig sc;
    sc.t_infer = 50;
    sc.mode = SampleMode::deterministic;
    Rng rng = make_rng(708);
    SampledPair pair =
        sample_pair(counted, sched, PhaseFraction({0.4, 0.4, 0.2}), sc, palette, hw, hw, rng);

    expect(counted.calls() == 50,
           "expected 50 denoiser calls, saw " + std::to_string(counted.calls()));
    expect(pair.image.height == hw && pair.image.width == hw, "image shape wrong");
    expect(pair.mask.height == hw && pair.mask.width == hw, "mask shape wrong");
    for (uint8_t l : pair.mask.labels) expect(l < k, "mask label out of range");
    expect(pair.pair.channels == 4, "joint trajectory should carry 4 channels");
    return "one denoiser, exactly 50 calls, image+mask from a single trajectory";
}

// ---------------------------------------------------------------------------
// 10. gradient check
// ---------------------------------------------------------------------------

std::string criterion_10() {
    DenoiserSpec spec;
    spec.stage_widths = {6, 8};
    spec.blocks_per_stage = 1;
    spec.in_channels = 4;
    spec.out_channels = 4;
    spec.condition_dim = 3;
    spec.embed_dim = 12;
    spec.attention = AttentionMode::self_cross;
    spec.attn_heads = 2;

    CondUNet<double> net(spec), grads(spec);
    Rng rng = make_rng(1001);
    net.init(rng);
    nn::ParamList<double> params, gparams;
    net.collect(params);
    grads.collect(gparams);
    Rng pert = make_rng(1002);
    for (auto& p : params)
        for (auto& v : *p.data) v = pert.normal() * 0.2;
    nn::zero_params(gparams);

    Tensor<double> x(4, 4, 4);
    Rng xr = make_rng(1003);
    for (auto& v : x.v) v = xr.normal();
    std::vector<double> cond = {0.5, 0.25, 0.25};
    const int t = 37;
    std::vector<double> w(x.size());
    for (auto& v : w) v = xr.normal();

    auto loss = [&] {
        typename CondUNet<double>::Cache cc;
        Tensor<double> y = net.forward(x, t, cond, cc);
        double s = 0;
        for (size_t i = 0; i < y.v.size(); ++i) s += w[i] * y.v[i];
        return s;
    };
    typename CondUNet<double>::Cache cc;
    net.forward(x, t, cond, cc);
    Tensor<double> gy(4, 4, 4);
    std::copy(w.begin(), w.end(), gy.v.begin());
    net.backward(gy, cc, grads);

    const double h = 1e-5;
    int checked = 0;
    double worst_rel = 0.0;
    for (size_t p = 0; p < params.size(); p += 3) {
        auto& vec = *params[p].data;
        auto& gvec = *gparams[p].data;
        for (size_t i : {size_t(0), vec.size() / 2}) {
            if (i >= vec.size()) continue;
            const double orig = vec[i];
            vec[i] = orig + h;
            const double fp = loss();
            vec[i] = orig - h;
            const double fm = loss();
            vec[i] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double scale = std::max({1.0, std::abs(gvec[i]), std::abs(numeric)});
            const double rel = std::abs(gvec[i] - numeric) / scale;
            worst_rel = std::max(worst_rel, rel);
            expect(rel <= 1e-3, params[p].name + " analytic " + fmt(gvec[i]) +
                                    " vs numeric " + fmt(numeric));
            ++checked;
        }
    }
    expect(checked >= 20, "only " + std::to_string(checked) + " parameters probed");
    return std::to_string(checked) + " parameters, worst rel err " + fmt(worst_rel);
}

// ---------------------------------------------------------------------------
// 12. dataset fidelity (conditional on a locally provided corpus)
// ---------------------------------------------------------------------------

std::string criterion_12(const char* manifest_path) {
    CorpusManifest manifest = CorpusManifest::load(manifest_path);
    Corpus corpus = ingest_corpus(manifest);
    PhaseFraction ratio = class_ratio(corpus);
    const std::vector<double> published = {0.3186, 0.5826, 0.0896, 0.0024, 0.0068};
    expect(ratio.f.size() == published.size(),
           "expected 5 classes, got " + std::to_string(ratio.f.size()));
    double worst = 0;
    for (size_t i = 0; i < published.size(); ++i)
        worst = std::max(worst, std::abs(ratio.f[i] - published[i]));
    expect(worst <= 0.0005, "class ratio off by " + fmt(worst * 100) + " pp");

    std::vector<Tile> tiles = tile_corpus(corpus, 128);
    size_t train_tiles = 0;
    for (const auto& t : tiles) train_tiles += (t.split == "train");
    // the dataset documentation lists both 400 and 500 train tiles
    expect(train_tiles == 400 || train_tiles == 500,
           "train tile count " + std::to_string(train_tiles) + " not in {400, 500}");
    return "ratios within " + fmt(worst * 100) + " pp, " + std::to_string(train_tiles) +
           " train tiles";
}

// ---------------------------------------------------------------------------
// End-to-end context shared by criteria 8, 9, 11
// ---------------------------------------------------------------------------

struct E2EContext {
    fs::path root;
    ExperimentConfig cfg;
    fs::path tiles_dir, seg_tiles_dir, diff_ckpt, aug_a, aug_b;
    SyntheticCorpus synth200;
    int minority = 2;
    double minority_pixel_fraction = 0.0;

    E2EContext() {
        root = fs::current_path() / "acceptance_e2e";
        fs::remove_all(root);
        fs::create_directories(root);

        cfg.tile_size = 32;
        cfg.sr_size = 64;
        cfg.sr.lr_size = 32;
        cfg.sr.hr_size = 64;
        cfg.seg_window = 32;
        cfg.seg_overlap = 0.5;
        cfg.gen_count = 200;
        cfg.seed = 811;

        cfg.denoiser.stage_widths = {24, 48};
        cfg.denoiser.blocks_per_stage = 1;
        cfg.denoiser.embed_dim = 96;
        cfg.denoiser.attention = AttentionMode::self_cross;
        cfg.denoiser.attn_heads = 4;

        cfg.schedule.kind = ScheduleKind::cosine;
        cfg.schedule.t_train = 1000;
        cfg.sampler.t_infer = 50;
        cfg.sampler.mode = SampleMode::deterministic;

        cfg.jitter.sigma = 0.05;
        cfg.mixture.ma_class = 1;
        cfg.mixture.defect_class = 2;

        cfg.diff_train.steps = 10000;
        cfg.diff_train.batch_size = 8;
        cfg.diff_train.lr = 1.5e-3;
        cfg.diff_train.log_every = 250;

        cfg.segmenter = default_segmenter_spec(3, 8);
        cfg.seg_train.steps = 400;
        cfg.seg_train.batch_size = 4;
        cfg.seg_train.lr = 3e-3;
        cfg.seg_train.log_every = 200;

        cfg.toy.num_classes = 3;
        cfg.toy.image_size = 32;
        cfg.toy.num_samples = 2000;
        cfg.toy.abundance = {0.60, 0.32, 0.08};
        cfg.toy.concentration = 5.0;
        cfg.toy.smoothness = 3;
        cfg.toy.test_fraction = 0.015;
        cfg.validate();

        note("generating procedural corpus (2000 tiles at 32x32)");
        run_toy(cfg, root / "toy");
        tiles_dir = root / "toy" / "tiles";

        note("training the joint denoiser (" + std::to_string(cfg.diff_train.steps) +
             " steps; this is the long stage)");
        run_train_diff(cfg, tiles_dir, root / "diff");
        diff_ckpt = root / "diff" / "diffusion.ckpt";

        note("sampling 200 conditioned pairs");
        run_gen(cfg, tiles_dir, diff_ckpt, root / "gen");
        synth200 = load_synthetic(root / "gen" / "synthetic", 3);

        // small imbalanced segmentation task: 10 train tiles whose minority
        // share sits in [1%, 9%], plus the untouched test split
        TileStore big = load_tile_store(tiles_dir);
        TileStore seg;
        seg.class_names = big.class_names;
        seg.palette = big.palette;
        seg.num_classes = big.num_classes;
        int64_t minority_px = 0, total_px = 0;
        for (const auto& t : big.tiles) {
            if (t.split == "train") {
                if (seg.split("train").size() >= 10) continue;
                const double f = extract_fraction(t.mask).f[minority];
                if (f < 0.01 || f > 0.07) continue;
                seg.tiles.push_back(t);
                for (uint8_t l : t.mask.labels) {
                    minority_px += (l == minority);
                    ++total_px;
                }
            } else {
                seg.tiles.push_back(t);
            }
        }
        require(seg.split("train").size() == 10, "could not assemble 10 seg train tiles");
        minority_pixel_fraction = static_cast<double>(minority_px) / total_px;
        seg_tiles_dir = root / "seg_tiles";
        save_tile_store(seg_tiles_dir, seg);

        note("sampling 40 augmentation pairs, twice with one seed");
        ExperimentConfig aug_cfg = cfg;
        aug_cfg.gen_count = 40;
        aug_a = root / "aug_a";
        aug_b = root / "aug_b";
        run_gen(aug_cfg, seg_tiles_dir, diff_ckpt, aug_a);
        run_gen(aug_cfg, seg_tiles_dir, diff_ckpt, aug_b);
    }
};

E2EContext& e2e() {
    static std::unique_ptr<E2EContext> ctx;
    static std::exception_ptr err;
    if (err) std::rethrow_exception(err);
    if (!ctx) {
        try {
            ctx = std::make_unique<E2EContext>();
        } catch (...) {
            err = std::current_exception();
            std::rethrow_exception(err);
        }
    }
    return *ctx;
}

// ---------------------------------------------------------------------------
// 8. toy end-to-end fraction control
// ---------------------------------------------------------------------------

std::string criterion_8() {
    E2EContext& c = e2e();
    std::vector<PhaseFraction> targets, realized;
    for (const auto& r : c.synth200.records) {
        targets.push_back(r.target);
        realized.push_back(r.realized);
    }
    expect(targets.size() == 200, "expected 200 sampled pairs");
    std::vector<ClassFidelity> fid = fraction_fidelity(targets, realized);
    std::ostringstream oss;
    for (size_t cls = 0; cls < fid.size(); ++cls) {
        expect(fid[cls].r2.has_value(), "class " + std::to_string(cls) + " has no r2");
        if (cls) oss << ", ";
        oss << "class " << cls << " r2 " << fmt(*fid[cls].r2) << " mae "
            << fmt(fid[cls].mae_pp) << "pp";
    }
    for (size_t cls = 0; cls < fid.size(); ++cls) {
        expect(*fid[cls].r2 >= 0.7,
               "class " + std::to_string(cls) + " r2 " + fmt(*fid[cls].r2) + " < 0.7");
        expect(fid[cls].mae_pp <= 8.0,
               "class " + std::to_string(cls) + " mae " + fmt(fid[cls].mae_pp) + "pp > 8pp");
    }
    return oss.str();
}

// ---------------------------------------------------------------------------
// 9. toy augmentation direction
// ---------------------------------------------------------------------------

std::string criterion_9() {
    E2EContext& c = e2e();
    expect(c.minority_pixel_fraction <= 0.05,
           "seg task minority share " + fmt(c.minority_pixel_fraction) + " > 5%");

    std::vector<double> base_miou, aug_miou, base_min, aug_min;
    for (int s = 1; s <= 3; ++s) {
        for (int ratio : {0, 4}) {
            const fs::path dir =
                c.root / ("seg_r" + std::to_string(ratio) + "_s" + std::to_string(s));
            note("segmenter ratio " + std::to_string(ratio) + " seed " + std::to_string(s));
            run_train_seg(c.cfg, c.seg_tiles_dir, c.aug_a, ratio,
                          derive_seed(2025, "seg-seed", static_cast<uint64_t>(s)), dir);
            RunRecord ev =
                run_eval_seg(c.cfg, c.seg_tiles_dir, dir / "segmenter.ckpt", dir / "eval");
            const double miou = ev.metrics.at("aggregate").at("miou").get<double>();
            const double miniou =
                ev.metrics.at("aggregate").at("iou")[c.minority].get<double>();
            (ratio == 0 ? base_miou : aug_miou).push_back(miou);
            (ratio == 0 ? base_min : aug_min).push_back(miniou);
        }
    }
    const double bm = vec_mean(base_miou), am = vec_mean(aug_miou);
    const double bi = vec_mean(base_min), ai = vec_mean(aug_min);
    std::ostringstream oss;
    oss << "miou " << fmt(bm) << "->" << fmt(am) << ", minority iou " << fmt(bi) << "->"
        << fmt(ai) << ", minority share " << fmt(c.minority_pixel_fraction * 100) << "%";
    expect(am >= bm, "mean MIoU dropped with augmentation: " + oss.str());
    expect(ai - bi >= 0.0, "minority IoU dropped with augmentation: " + oss.str());
    return oss.str();
}

// ---------------------------------------------------------------------------
// 11. determinism
// ---------------------------------------------------------------------------

std::string criterion_11() {
    E2EContext& c = e2e();
    SyntheticCorpus sa = load_synthetic(c.aug_a / "synthetic", 3);
    SyntheticCorpus sb = load_synthetic(c.aug_b / "synthetic", 3);
    expect(sa.records.size() == sb.records.size(), "run sizes differ");
    for (size_t i = 0; i < sa.records.size(); ++i) {
        expect(sa.records[i].target.f == sb.records[i].target.f, "targets differ");
        expect(sa.records[i].realized.f == sb.records[i].realized.f, "realized differ");
        expect(sa.records[i].seed == sb.records[i].seed, "seeds differ");
        expect(sa.records[i].branch == sb.records[i].branch, "branches differ");
        expect(read_text_file(sa.records[i].image_path) ==
                   read_text_file(sb.records[i].image_path),
               "image bytes differ at pair " + std::to_string(i));
        expect(read_text_file(sa.records[i].mask_path) ==
                   read_text_file(sb.records[i].mask_path),
               "mask bytes differ at pair " + std::to_string(i));
    }

    TileStore seg = load_tile_store(c.seg_tiles_dir);
    std::vector<Tile> real = seg.split("train");
    GenMetrics ga = compute_gen_metrics(real, sa.tiles, seg.palette, 909, 3);
    GenMetrics gb = compute_gen_metrics(real, sb.tiles, seg.palette, 909, 3);
    expect(ga.fid_image == gb.fid_image && ga.fid_mask == gb.fid_mask &&
               ga.is_image.mean == gb.is_image.mean && ga.is_image.std == gb.is_image.std &&
               ga.is_mask.mean == gb.is_mask.mean && ga.is_mask.std == gb.is_mask.std &&
               ga.precision == gb.precision && ga.recall == gb.recall,
           "metric values differ between identical runs");
    return std::to_string(sa.records.size()) +
           " pairs byte-identical, all metric values bit-equal";
}

}  // namespace

int main(int argc, char** argv) {
    const std::string mode = argc > 1 ? argv[1] : "all";
    if (mode != "fast" && mode != "e2e" && mode != "all") {
        std::fprintf(stderr, "usage: %s [fast|e2e|all]\n", argv[0]);
        return 2;
    }
    const bool fast = mode != "e2e";
    const bool slow = mode != "fast";

    if (fast) {
        run_criterion(1, "forward/inverse algebra", criterion_1);
        run_criterion(2, "forward marginals", criterion_2);
        run_criterion(3, "mask codec", criterion_3);
        run_criterion(4, "fraction sampler", criterion_4);
        run_criterion(5, "metric oracles", criterion_5);
        run_criterion(6, "sliding-window equivalence", criterion_6);
        run_criterion(7, "one-stage structural claim", criterion_7);
    }
    if (slow) {
        run_criterion(8, "toy end-to-end fraction control", criterion_8);
        run_criterion(9, "toy augmentation direction", criterion_9);
    }
    if (fast) run_criterion(10, "gradient check", criterion_10);
    if (slow) run_criterion(11, "determinism", criterion_11);
    if (fast) {
        const char* manifest = std::getenv("PHASEGEN_METALDAM_MANIFEST");
        if (manifest == nullptr) {
            std::printf(
                "SKIP  criterion 12: dataset fidelity (set PHASEGEN_METALDAM_MANIFEST to "
                "run against the real corpus)\n");
        } else {
            run_criterion(12, "dataset fidelity",
                          [manifest] { return criterion_12(manifest); });
        }
    }

    if (g_failures == 0) {
        std::printf("all criteria passed (%s mode)\n", mode.c_str());
        return 0;
    }
    std::printf("%d criteria FAILED (%s mode)\n", g_failures, mode.c_str());
    return 1;
}
