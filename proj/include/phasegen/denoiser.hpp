#pragma once
// Conditional U-Net noise predictor.
//
// The network predicts the noise component of a 4-channel joint tensor given
// the timestep and a global phase-fraction vector. The fraction vector maps
// through an affine layer to the embedding width, is summed with the
// sinusoidal timestep embedding, and the result modulates every residual
// block. At the deepest scale the feature map runs through self-attention and
// then cross-attention, where the condition embedding supplies the single
// key/value token.

#include <nlohmann/json.hpp>

#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/nn.hpp"
#include "phasegen/tensor.hpp"

namespace phasegen {

using nlohmann::json;

enum class AttentionMode { none, self_only, self_cross };

inline std::string to_string(AttentionMode m) {
    switch (m) {
        case AttentionMode::none: return "none";
        case AttentionMode::self_only: return "self";
        case AttentionMode::self_cross: return "self_cross";
    }
    throw Error("bad attention mode");
}

inline AttentionMode attention_mode_from_string(const std::string& s) {
    if (s == "none") return AttentionMode::none;
    if (s == "self") return AttentionMode::self_only;
    if (s == "self_cross") return AttentionMode::self_cross;
    throw Error("unknown attention mode: " + s);
}

struct DenoiserSpec {
    std::vector<int> stage_widths{128, 128, 256, 256, 512, 512};
    int blocks_per_stage = 2;
    int in_channels = 4;
    int out_channels = 4;
    int condition_dim = 4;  // 0 disables the condition pathway
    int embed_dim = 0;      // 0 means 4 * stage_widths[0]
    AttentionMode attention = AttentionMode::self_cross;
    int attn_heads = 4;

    int effective_embed_dim() const {
        return embed_dim > 0 ? embed_dim : 4 * stage_widths.at(0);
    }

    void validate() const {
        require(!stage_widths.empty(), "stage_widths must be non-empty");
        for (int w : stage_widths) require(w > 0, "stage widths must be positive");
        require(blocks_per_stage > 0, "blocks_per_stage must be positive");
        require(in_channels > 0 && out_channels > 0, "channel counts must be positive");
        require(condition_dim >= 0, "condition_dim must be non-negative");
        require(attn_heads > 0, "attn_heads must be positive");
        if (attention != AttentionMode::none)
            require(stage_widths.back() % attn_heads == 0,
                    "deepest width must be divisible by attn_heads");
        require(effective_embed_dim() % 2 == 0, "embed dim must be even");
    }
};

inline void to_json(json& j, const DenoiserSpec& s) {
    j = json{{"stage_widths", s.stage_widths},
             {"blocks_per_stage", s.blocks_per_stage},
             {"in_channels", s.in_channels},
             {"out_channels", s.out_channels},
             {"condition_dim", s.condition_dim},
             {"embed_dim", s.embed_dim},
             {"attention", to_string(s.attention)},
             {"attn_heads", s.attn_heads}};
}

inline void from_json(const json& j, DenoiserSpec& s) {
    j.at("stage_widths").get_to(s.stage_widths);
    j.at("blocks_per_stage").get_to(s.blocks_per_stage);
    j.at("in_channels").get_to(s.in_channels);
    j.at("out_channels").get_to(s.out_channels);
    j.at("condition_dim").get_to(s.condition_dim);
    j.at("embed_dim").get_to(s.embed_dim);
    s.attention = attention_mode_from_string(j.at("attention").get<std::string>());
    j.at("attn_heads").get_to(s.attn_heads);
}

/// Anything that maps (noisy tensor, timestep, condition) -> prediction.
/// Sampling code only sees this interface, so tests can substitute doubles.
template <typename S>
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual Tensor<S> predict(const Tensor<S>& x_t, int t, const std::vector<S>& cond) = 0;
    virtual int in_channels() const = 0;
    virtual int out_channels() const = 0;
};

namespace detail {

/// Classic sinusoidal embedding of an integer timestep.
template <typename S>
std::vector<S> sinusoid_embedding(int t, int dim) {
    const int half = dim / 2;
    std::vector<S> e(dim);
    for (int i = 0; i < half; ++i) {
        double freq = (half > 1) ? std::exp(-std::log(10000.0) * i / (half - 1)) : 1.0;
        e[i] = static_cast<S>(std::sin(t * freq));
        e[half + i] = static_cast<S>(std::cos(t * freq));
    }
    return e;
}

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.height == b.height && a.width == b.width, "concat shape mismatch");
    Tensor<S> out(a.channels + b.channels, a.height, a.width);
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
    return out;
}

template <typename S>
void split_channels(const Tensor<S>& g, int ca, Tensor<S>& ga, Tensor<S>& gb) {
    ga = Tensor<S>(ca, g.height, g.width);
    gb = Tensor<S>(g.channels - ca, g.height, g.width);
    std::copy(g.v.begin(), g.v.begin() + ga.v.size(), ga.v.begin());
    std::copy(g.v.begin() + ga.v.size(), g.v.end(), gb.v.begin());
}

}  // namespace detail

template <typename S>
class CondUNet : public Denoiser<S> {
public:
    DenoiserSpec spec;

    nn::Dense<S> cond_embed;
    nn::Dense<S> time1, time2;
    nn::Conv2d<S> stem;
    std::vector<nn::ResBlock<S>> down;
    std::vector<nn::Conv2d<S>> down_conv;
    nn::ResBlock<S> mid1, mid2;
    nn::Attention<S> mid_self, mid_cross;
    std::vector<nn::ResBlock<S>> up;
    std::vector<nn::Conv2d<S>> up_conv;
    nn::GroupNorm<S> out_norm;
    nn::Conv2d<S> out_conv;

    struct Cache {
        typename nn::Dense<S>::Cache condc, t1c, t2c;
        std::vector<S> cond_vec;     // condition embedding (kv token source)
        std::vector<S> emb0;         // sinusoid (+ cond)
        std::vector<S> e1;           // time1 output, silu input
        std::vector<S> emb;          // final embedding fed to blocks
        typename nn::Conv2d<S>::Cache stemc;
        std::vector<typename nn::ResBlock<S>::Cache> downc;
        std::vector<typename nn::Conv2d<S>::Cache> down_convc;
        typename nn::ResBlock<S>::Cache mid1c, mid2c;
        typename nn::Attention<S>::Cache selfc, crossc;
        std::vector<typename nn::ResBlock<S>::Cache> upc;
        std::vector<typename nn::Conv2d<S>::Cache> up_convc;
        std::vector<Tensor<S>> cat_skip;  // skip tensor consumed by each up block
        typename nn::GroupNorm<S>::Cache out_normc;
        Tensor<S> out_pre;  // silu input of the head
        typename nn::Conv2d<S>::Cache out_convc;
    };

    explicit CondUNet(DenoiserSpec sp) : spec(std::move(sp)) { configure(); }

    void configure() {
        spec.validate();
        const int d = spec.effective_embed_dim();
        const int stages = static_cast<int>(spec.stage_widths.size());
        const int bps = spec.blocks_per_stage;

        if (spec.condition_dim > 0) cond_embed.configure(spec.condition_dim, d);
        time1.configure(d, d);
        time2.configure(d, d);
        stem.configure(spec.in_channels, spec.stage_widths[0], 3, 1);

        down.clear();
        down_conv.clear();
        int ch = spec.stage_widths[0];
        for (int s = 0; s < stages; ++s) {
            const int w = spec.stage_widths[s];
            for (int b = 0; b < bps; ++b) {
                nn::ResBlock<S> rb;
                rb.configure(b == 0 ? ch : w, w, d);
                down.push_back(std::move(rb));
            }
            ch = w;
            if (s + 1 < stages) {
                nn::Conv2d<S> dc;
                dc.configure(w, w, 3, 2);
                down_conv.push_back(std::move(dc));
            }
        }

        const int deep = spec.stage_widths.back();
        mid1.configure(deep, deep, d);
        mid2.configure(deep, deep, d);
        if (spec.attention != AttentionMode::none)
            mid_self.configure(deep, spec.attn_heads, deep, true);
        if (spec.attention == AttentionMode::self_cross && spec.condition_dim > 0)
            mid_cross.configure(deep, spec.attn_heads, d, false);

        up.clear();
        up_conv.clear();
        for (int s = stages - 1; s >= 0; --s) {
            const int w = spec.stage_widths[s];
            for (int b = 0; b < bps; ++b) {
                nn::ResBlock<S> rb;
                rb.configure(2 * w, w, d);
                up.push_back(std::move(rb));
            }
            if (s > 0) {
                nn::Conv2d<S> uc;
                uc.configure(w, spec.stage_widths[s - 1], 3, 1);
                up_conv.push_back(std::move(uc));
            }
        }

        out_norm.configure(spec.stage_widths[0]);
        out_conv.configure(spec.stage_widths[0], spec.out_channels, 3, 1);
    }

    void init(Rng& rng) {
        if (spec.condition_dim > 0) cond_embed.init(rng);
        time1.init(rng);
        time2.init(rng);
        stem.init(rng);
        for (auto& b : down) b.init(rng);
        for (auto& c : down_conv) c.init(rng);
        mid1.init(rng);
        mid2.init(rng);
        if (spec.attention != AttentionMode::none) mid_self.init(rng);
        if (has_cross()) mid_cross.init(rng);
        for (auto& b : up) b.init(rng);
        for (auto& c : up_conv) c.init(rng);
        // out_conv stays zero so the untrained net predicts zero noise
    }

    bool has_cross() const {
        return spec.attention == AttentionMode::self_cross && spec.condition_dim > 0;
    }

    void collect(nn::ParamList<S>& out) {
        if (spec.condition_dim > 0) cond_embed.collect("cond_embed", out);
        time1.collect("time1", out);
        time2.collect("time2", out);
        stem.collect("stem", out);
        for (size_t i = 0; i < down.size(); ++i) down[i].collect("down." + std::to_string(i), out);
        for (size_t i = 0; i < down_conv.size(); ++i)
            down_conv[i].collect("down_conv." + std::to_string(i), out);
        mid1.collect("mid1", out);
        if (spec.attention != AttentionMode::none) mid_self.collect("mid_self", out);
        if (has_cross()) mid_cross.collect("mid_cross", out);
        mid2.collect("mid2", out);
        for (size_t i = 0; i < up.size(); ++i) up[i].collect("up." + std::to_string(i), out);
        for (size_t i = 0; i < up_conv.size(); ++i)
            up_conv[i].collect("up_conv." + std::to_string(i), out);
        out_norm.collect("out_norm", out);
        out_conv.collect("out_conv", out);
    }

    Tensor<S> forward(const Tensor<S>& x, int t, const std::vector<S>& cond, Cache& cc) const {
        require(x.channels == spec.in_channels, "denoiser input channel mismatch");
        const int d = spec.effective_embed_dim();
        const int stages = static_cast<int>(spec.stage_widths.size());
        const int bps = spec.blocks_per_stage;
        require((x.height % (1 << (stages - 1))) == 0 && (x.width % (1 << (stages - 1))) == 0,
                "input size must be divisible by the downsampling factor");

        cc.emb0 = detail::sinusoid_embedding<S>(t, d);
        if (spec.condition_dim > 0) {
            require(static_cast<int>(cond.size()) == spec.condition_dim,
                    "condition size mismatch");
            cc.cond_vec = cond_embed.forward(cond, cc.condc);
            for (int i = 0; i < d; ++i) cc.emb0[i] += cc.cond_vec[i];
        }
        cc.e1 = time1.forward(cc.emb0, cc.t1c);
        std::vector<S> e1a(d);
        for (int i = 0; i < d; ++i) e1a[i] = nn::silu(cc.e1[i]);
        cc.emb = time2.forward(e1a, cc.t2c);

        Tensor<S> h = stem.forward(x, cc.stemc);
        cc.downc.resize(down.size());
        cc.down_convc.resize(down_conv.size());
        std::vector<Tensor<S>> skips;
        int bi = 0;
        for (int s = 0; s < stages; ++s) {
            for (int b = 0; b < bps; ++b, ++bi) {
                h = down[bi].forward(h, cc.emb, cc.downc[bi]);
                skips.push_back(h);
            }
            if (s + 1 < stages) h = down_conv[s].forward(h, cc.down_convc[s]);
        }

        h = mid1.forward(h, cc.emb, cc.mid1c);
        if (spec.attention != AttentionMode::none) {
            nn::MatCM<S> empty;
            h = mid_self.forward(h, empty, cc.selfc);
        }
        if (has_cross()) {
            nn::MatCM<S> token(d, 1);
            for (int i = 0; i < d; ++i) token(i, 0) = cc.cond_vec[i];
            h = mid_cross.forward(h, token, cc.crossc);
        }
        h = mid2.forward(h, cc.emb, cc.mid2c);

        cc.upc.resize(up.size());
        cc.up_convc.resize(up_conv.size());
        cc.cat_skip.resize(up.size());
        bi = 0;
        for (int s = stages - 1; s >= 0; --s) {
            for (int b = 0; b < bps; ++b, ++bi) {
                cc.cat_skip[bi] = skips.back();
                skips.pop_back();
                Tensor<S> cat = detail::concat_channels(h, cc.cat_skip[bi]);
                h = up[bi].forward(cat, cc.emb, cc.upc[bi]);
            }
            if (s > 0) {
                Tensor<S> upd = nn::upsample2x(h);
                h = up_conv[stages - 1 - s].forward(upd, cc.up_convc[stages - 1 - s]);
            }
        }

        cc.out_pre = out_norm.forward(h, cc.out_normc);
        return out_conv.forward(nn::silu_forward(cc.out_pre), cc.out_convc);
    }

    /// Accumulates parameter gradients into `g` (a zero-initialized clone).
    void backward(const Tensor<S>& gy, const Cache& cc, CondUNet& g) const {
        const int d = spec.effective_embed_dim();
        const int stages = static_cast<int>(spec.stage_widths.size());
        const int bps = spec.blocks_per_stage;
        std::vector<S> g_emb(d, S(0));

        Tensor<S> gh = out_conv.backward(gy, cc.out_convc, g.out_conv);
        gh = nn::silu_backward(gh, cc.out_pre);
        gh = out_norm.backward(gh, cc.out_normc, g.out_norm);

        // up path, reversed
        std::vector<Tensor<S>> skip_grads(up.size());
        int bi = static_cast<int>(up.size()) - 1;
        for (int s = 0; s < stages; ++s) {
            if (s > 0) {
                const int ci = stages - 1 - s;
                Tensor<S> gupd = up_conv[ci].backward(gh, cc.up_convc[ci], g.up_conv[ci]);
                gh = nn::upsample2x_backward(gupd);
            }
            for (int b = 0; b < bps; ++b, --bi) {
                Tensor<S> gcat = up[bi].backward(gh, cc.upc[bi], g.up[bi], g_emb);
                const int hc = gcat.channels - cc.cat_skip[bi].channels;
                Tensor<S> gskip;
                detail::split_channels(gcat, hc, gh, gskip);
                skip_grads[bi] = std::move(gskip);
            }
        }

        gh = mid2.backward(gh, cc.mid2c, g.mid2, g_emb);
        std::vector<S> g_cond_vec(d, S(0));
        if (has_cross()) {
            nn::MatCM<S> gtoken = mid_cross.kv_grad(gh, cc.crossc, g.mid_cross);
            for (int i = 0; i < d; ++i) g_cond_vec[i] += gtoken(i, 0);
            gh = mid_cross.backward(gh, cc.crossc, g.mid_cross);
        }
        if (spec.attention != AttentionMode::none)
            gh = mid_self.backward(gh, cc.selfc, g.mid_self);
        gh = mid1.backward(gh, cc.mid1c, g.mid1, g_emb);

        // down path, reversed; skip gradients re-enter where they were saved
        bi = static_cast<int>(down.size()) - 1;
        for (int s = stages - 1; s >= 0; --s) {
            if (s + 1 < stages) {
                Tensor<S> gdc = down_conv[s].backward(gh, cc.down_convc[s], g.down_conv[s]);
                gh = std::move(gdc);
            }
            for (int b = bps - 1; b >= 0; --b, --bi) {
                // skip index: up block that consumed this activation
                const int up_index = static_cast<int>(up.size()) - 1 - bi;
                gh += skip_grads[up_index];
                gh = down[bi].backward(gh, cc.downc[bi], g.down[bi], g_emb);
            }
        }
        stem.backward(gh, cc.stemc, g.stem);

        // embedding pathway
        std::vector<S> ge1a = time2.backward(g_emb, cc.t2c, g.time2);
        std::vector<S> ge1(d);
        for (int i = 0; i < d; ++i) ge1[i] = ge1a[i] * nn::silu_grad(cc.e1[i]);
        std::vector<S> gemb0 = time1.backward(ge1, cc.t1c, g.time1);
        if (spec.condition_dim > 0) {
            for (int i = 0; i < d; ++i) g_cond_vec[i] += gemb0[i];
            cond_embed.backward(g_cond_vec, cc.condc, g.cond_embed);
        }
    }

    // Denoiser interface
    Tensor<S> predict(const Tensor<S>& x_t, int t, const std::vector<S>& cond) override {
        Cache cc;
        return forward(x_t, t, cond, cc);
    }
    int in_channels() const override { return spec.in_channels; }
    int out_channels() const override { return spec.out_channels; }
};

// ---------------------------------------------------------------------------
// Checkpoints: JSON header + raw little-endian parameter data.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[9] = "PHGCKPT1";

template <typename S>
void save_checkpoint(const std::string& path, const DenoiserSpec& spec,
                     nn::ParamList<S>& params, const json& extra = json::object()) {
    json header;
    header["format_version"] = kCheckpointVersion;
    header["spec"] = spec;
    header["dtype"] = sizeof(S) == 4 ? "f32" : "f64";
    header["extra"] = extra;
    json plist = json::array();
    for (const auto& p : params) plist.push_back({{"name", p.name}, {"count", p.data->size()}});
    header["params"] = plist;
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint for writing: " + path);
    f.write(kCheckpointMagic, 8);
    uint64_t len = hs.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& p : params)
        f.write(reinterpret_cast<const char*>(p.data->data()),
                static_cast<std::streamsize>(p.data->size() * sizeof(S)));
    require(f.good(), "checkpoint write failed: " + path);
}

template <typename S>
json load_checkpoint(const std::string& path, DenoiserSpec& spec_out,
                     nn::ParamList<S>& params) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    require(f.good() && std::string(magic, 8) == kCheckpointMagic,
            "not a checkpoint file: " + path);
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    std::string hs(len, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(len));
    require(f.good(), "truncated checkpoint header: " + path);
    json header = json::parse(hs);
    require(header.at("format_version").get<int>() == kCheckpointVersion,
            "unsupported checkpoint version");
    std::string want = sizeof(S) == 4 ? "f32" : "f64";
    require(header.at("dtype").get<std::string>() == want,
            "checkpoint dtype mismatch (expected " + want + ")");
    spec_out = header.at("spec").get<DenoiserSpec>();

    const json& plist = header.at("params");
    require(plist.size() == params.size(), "checkpoint parameter list mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        require(plist[i].at("name").get<std::string>() == params[i].name,
                "checkpoint parameter name mismatch at " + params[i].name);
        require(plist[i].at("count").get<size_t>() == params[i].data->size(),
                "checkpoint parameter size mismatch at " + params[i].name);
        f.read(reinterpret_cast<char*>(params[i].data->data()),
               static_cast<std::streamsize>(params[i].data->size() * sizeof(S)));
    }
    require(f.good(), "truncated checkpoint data: " + path);
    return header.at("extra");
}

/// Construct a network from a checkpoint written by save_checkpoint.
template <typename S>
std::unique_ptr<CondUNet<S>> load_denoiser(const std::string& path, json* extra_out = nullptr) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    require(f.good() && std::string(magic, 8) == kCheckpointMagic,
            "not a checkpoint file: " + path);
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    std::string hs(len, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(len));
    require(f.good(), "truncated checkpoint header: " + path);
    json header = json::parse(hs);
    DenoiserSpec spec = header.at("spec").get<DenoiserSpec>();

    auto net = std::make_unique<CondUNet<S>>(spec);
    nn::ParamList<S> params;
    net->collect(params);
    DenoiserSpec dummy;
    json extra = load_checkpoint<S>(path, dummy, params);
    if (extra_out) *extra_out = extra;
    return net;
}

}  // namespace phasegen
