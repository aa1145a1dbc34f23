#pragma once
// Corpus handling: manifest-driven ingestion of micrograph/mask pairs,
// tiling, the mask <-> channel codec used by the diffusion process, and
// phase-fraction extraction.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phasegen/common.hpp"
#include "phasegen/grid.hpp"
#include "phasegen/io.hpp"
#include "phasegen/tensor.hpp"

namespace phasegen {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Global composition vector: per-class pixel fraction, non-negative, unit sum.
struct PhaseFraction {
    std::vector<double> f;

    PhaseFraction() = default;
    explicit PhaseFraction(std::vector<double> values) : f(std::move(values)) {}

    size_t size() const { return f.size(); }
    double operator[](size_t i) const { return f[i]; }
    double& operator[](size_t i) { return f[i]; }

    double sum() const {
        double s = 0;
        for (double x : f) s += x;
        return s;
    }

    void validate(double tol = 1e-6) const {
        require(!f.empty(), "phase fraction is empty");
        for (double x : f) require(x >= 0.0, "phase fraction has a negative component");
        require(std::abs(sum() - 1.0) <= tol, "phase fraction does not sum to 1");
    }
};

/// Per-class 3-vector codes used to embed masks into diffusion channels.
/// Entries live in [-1,1]^3 and must be pairwise separated for robust decoding.
struct Palette {
    std::vector<std::array<double, 3>> entries;

    size_t size() const { return entries.size(); }

    double min_distance() const {
        double dmin = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < entries.size(); ++i)
            for (size_t j = i + 1; j < entries.size(); ++j) {
                double d2 = 0;
                for (int k = 0; k < 3; ++k) {
                    double d = entries[i][k] - entries[j][k];
                    d2 += d * d;
                }
                dmin = std::min(dmin, std::sqrt(d2));
            }
        return dmin;
    }

    void validate(double d_min = 1.0) const {
        require(!entries.empty(), "palette is empty");
        for (const auto& e : entries)
            for (double c : e) require(c >= -1.0 && c <= 1.0, "palette component outside [-1,1]");
        if (entries.size() > 1)
            require(min_distance() >= d_min, "palette entries closer than required separation");
    }
};

/// Maximally separated 4-entry palette; vertices of the signal cube.
inline Palette default_palette(int num_classes = 4) {
    static const std::array<std::array<double, 3>, 8> corners = {{
        {-1, -1, -1}, {1, 1, 1}, {1, -1, -1}, {-1, 1, 1},
        {-1, 1, -1}, {1, -1, 1}, {-1, -1, 1}, {1, 1, -1},
    }};
    require(num_classes >= 1 && num_classes <= 8, "default palette supports up to 8 classes");
    Palette p;
    for (int i = 0; i < num_classes; ++i) p.entries.push_back(corners[i]);
    return p;
}

/// One fixed-size crop of a source micrograph together with its mask.
struct Tile {
    Image image;
    ClassMap mask;
    std::string source_id;
    int row_offset = 0;
    int col_offset = 0;
    std::string split;  // inherited from the source
};

/// A loaded source micrograph with its mask and split tag.
struct SourcePair {
    std::string id;
    Image image;
    ClassMap mask;
    std::string split;  // "train" or "test"
};

struct Corpus {
    std::vector<SourcePair> sources;
    std::vector<std::string> class_names;
    Palette palette;
    int num_classes = 0;

    size_t count_split(const std::string& split) const {
        size_t n = 0;
        for (const auto& s : sources) n += (s.split == split);
        return n;
    }
};

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Structured description of a corpus on disk: image/mask file pairs with
/// split tags, class names, the palette, and ignore-code handling.
struct CorpusManifest {
    struct Entry {
        std::string image_path;
        std::string mask_path;
        std::string split = "train";
    };

    std::vector<Entry> entries;
    std::vector<std::string> class_names;
    Palette palette;
    std::vector<int> ignore_codes;          // raw mask codes relabeled to IGNORE
    std::map<int, int> code_map;            // raw mask code -> class index (identity if absent)
    fs::path base_dir;                      // resolved relative to the manifest file

    static CorpusManifest from_json(const json& j, const fs::path& base_dir = {}) {
        CorpusManifest m;
        m.base_dir = base_dir;
        require(j.contains("classes"), "manifest missing 'classes'");
        m.class_names = j.at("classes").get<std::vector<std::string>>();
        require(!m.class_names.empty(), "manifest declares no classes");

        if (j.contains("palette")) {
            for (const auto& row : j.at("palette")) {
                require(row.size() == 3, "palette entries must have 3 components");
                m.palette.entries.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
            }
        } else {
            m.palette = default_palette(static_cast<int>(m.class_names.size()));
        }
        require(m.palette.size() == m.class_names.size(), "palette size must match class count");

        if (j.contains("ignore_codes"))
            m.ignore_codes = j.at("ignore_codes").get<std::vector<int>>();
        if (j.contains("code_map"))
            for (const auto& [k, v] : j.at("code_map").items())
                m.code_map[std::stoi(k)] = v.get<int>();

        if (j.contains("entries")) {
            for (const auto& e : j.at("entries")) {
                Entry entry;
                entry.image_path = e.at("image").get<std::string>();
                entry.mask_path = e.at("mask").get<std::string>();
                if (e.contains("split")) entry.split = e.at("split").get<std::string>();
                m.entries.push_back(std::move(entry));
            }
        }
        return m;
    }

    static CorpusManifest load(const fs::path& path) {
        json j = json::parse(read_text_file(path));
        return from_json(j, path.parent_path());
    }

    json to_json() const {
        json j;
        j["classes"] = class_names;
        json pal = json::array();
        for (const auto& e : palette.entries) pal.push_back({e[0], e[1], e[2]});
        j["palette"] = pal;
        if (!ignore_codes.empty()) j["ignore_codes"] = ignore_codes;
        if (!code_map.empty()) {
            json cm;
            for (const auto& [k, v] : code_map) cm[std::to_string(k)] = v;
            j["code_map"] = cm;
        }
        json es = json::array();
        for (const auto& e : entries)
            es.push_back({{"image", e.image_path}, {"mask", e.mask_path}, {"split", e.split}});
        j["entries"] = es;
        return j;
    }
};

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Load every referenced image/mask pair, rescale images to [-1,1], apply
/// ignore-code relabeling, and validate mask codes against the declaration.
inline Corpus ingest_corpus(const CorpusManifest& manifest) {
    require(!manifest.entries.empty(), "manifest lists no image/mask pairs");
    const int k = static_cast<int>(manifest.class_names.size());
    manifest.palette.validate();

    Corpus corpus;
    corpus.class_names = manifest.class_names;
    corpus.palette = manifest.palette;
    corpus.num_classes = k;

    for (const auto& entry : manifest.entries) {
        fs::path img_path = manifest.base_dir / entry.image_path;
        fs::path mask_path = manifest.base_dir / entry.mask_path;
        require(fs::exists(img_path), "missing image file: " + img_path.string());
        require(fs::exists(mask_path), "missing mask file: " + mask_path.string());

        SourcePair src;
        src.id = entry.image_path;
        src.split = entry.split;
        src.image = image_from_raw(read_pgm(img_path));

        RawImage raw_mask = read_pgm(mask_path);
        require(raw_mask.height == src.image.height && raw_mask.width == src.image.width,
                "image/mask size mismatch for " + entry.image_path);
        src.mask = ClassMap(raw_mask.height, raw_mask.width, k);
        for (size_t i = 0; i < raw_mask.pixels.size(); ++i) {
            int code = raw_mask.pixels[i];
            bool ignored = std::find(manifest.ignore_codes.begin(), manifest.ignore_codes.end(),
                                     code) != manifest.ignore_codes.end();
            if (ignored) {
                src.mask.labels[i] = ClassMap::kIgnore;
                continue;
            }
            int cls = code;
            if (!manifest.code_map.empty()) {
                auto it = manifest.code_map.find(code);
                require(it != manifest.code_map.end() || code < k,
                        "undeclared mask code " + std::to_string(code) + " in " + entry.mask_path +
                            " at pixel " + std::to_string(i));
                if (it != manifest.code_map.end()) cls = it->second;
            }
            require(cls >= 0 && cls < k, "undeclared mask code " + std::to_string(code) + " in " +
                                             entry.mask_path + " at pixel " + std::to_string(i));
            src.mask.labels[i] = static_cast<uint8_t>(cls);
        }
        corpus.sources.push_back(std::move(src));
    }

    // splits must be disjoint by source micrograph
    std::map<std::string, std::string> seen;
    for (const auto& s : corpus.sources) {
        auto it = seen.find(s.id);
        require(it == seen.end() || it->second == s.split,
                "source " + s.id + " appears in more than one split");
        seen[s.id] = s.split;
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

/// Non-overlapping grid crops; border remainders are discarded. Tiles carry
/// their source id and split, so train/test never mix at tile level.
inline std::vector<Tile> tile_corpus(const Corpus& corpus, int tile_size) {
    require(tile_size > 0, "tile size must be positive");
    std::vector<std::string> undersized;
    for (const auto& s : corpus.sources)
        if (s.image.height < tile_size || s.image.width < tile_size) undersized.push_back(s.id);
    if (!undersized.empty()) {
        std::string msg = "tile size " + std::to_string(tile_size) + " exceeds source dimensions of:";
        for (const auto& id : undersized) msg += " " + id;
        throw Error(msg);
    }

    std::vector<Tile> tiles;
    for (const auto& s : corpus.sources) {
        int rows = s.image.height / tile_size;
        int cols = s.image.width / tile_size;
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                Tile t;
                t.source_id = s.id;
                t.split = s.split;
                t.row_offset = r * tile_size;
                t.col_offset = c * tile_size;
                t.image = s.image.crop(t.row_offset, t.col_offset, tile_size, tile_size);
                t.mask = s.mask.crop(t.row_offset, t.col_offset, tile_size, tile_size);
                tiles.push_back(std::move(t));
            }
        }
    }
    return tiles;
}

// ---------------------------------------------------------------------------
// Mask codec
// ---------------------------------------------------------------------------

/// Embed a label map into 3 real channels via palette lookup. Ignore pixels
/// borrow class 0's entry so the tensor stays dense; fraction accounting
/// excludes them separately.
template <typename S = float>
Tensor<S> encode_mask(const ClassMap& mask, const Palette& palette) {
    Tensor<S> out(3, mask.height, mask.width);
    const size_t hw = mask.size();
    for (size_t i = 0; i < hw; ++i) {
        uint8_t label = mask.labels[i];
        if (label == ClassMap::kIgnore) label = 0;
        require(label < palette.size(), "mask label outside palette");
        const auto& e = palette.entries[label];
        for (int c = 0; c < 3; ++c) out.v[c * hw + i] = static_cast<S>(e[c]);
    }
    return out;
}

/// Nearest-palette-entry decode; ties resolve to the lowest class index.
/// Total on arbitrary real inputs.
template <typename S>
ClassMap decode_mask(const Tensor<S>& channels, const Palette& palette) {
    require(channels.channels == 3, "mask decode expects 3 channels");
    ClassMap mask(channels.height, channels.width, static_cast<int>(palette.size()));
    const size_t hw = mask.size();
    for (size_t i = 0; i < hw; ++i) {
        double best = std::numeric_limits<double>::infinity();
        uint8_t best_class = 0;
        for (size_t k = 0; k < palette.size(); ++k) {
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                double d = static_cast<double>(channels.v[c * hw + i]) - palette.entries[k][c];
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                best_class = static_cast<uint8_t>(k);
            }
        }
        mask.labels[i] = best_class;
    }
    return mask;
}

/// Concatenate image (channel 0) and encoded mask (channels 1-3).
template <typename S = float>
Tensor<S> make_pair_tensor(const Image& image, const ClassMap& mask, const Palette& palette) {
    require(image.height == mask.height && image.width == mask.width,
            "image/mask size mismatch");
    Tensor<S> pair(4, image.height, image.width);
    const size_t hw = image.size();
    for (size_t i = 0; i < hw; ++i) pair.v[i] = static_cast<S>(image.v[i]);
    Tensor<S> enc = encode_mask<S>(mask, palette);
    std::copy(enc.v.begin(), enc.v.end(), pair.v.begin() + hw);
    return pair;
}

/// Split a pair tensor back into a clamped image and a decoded mask.
template <typename S>
std::pair<Image, ClassMap> split_pair_tensor(const Tensor<S>& pair, const Palette& palette) {
    require(pair.channels == 4, "pair tensor must have 4 channels");
    Image image(pair.height, pair.width);
    const size_t hw = image.size();
    for (size_t i = 0; i < hw; ++i)
        image.v[i] = clamp(static_cast<float>(pair.v[i]), -1.0f, 1.0f);
    Tensor<S> enc(3, pair.height, pair.width);
    std::copy(pair.v.begin() + hw, pair.v.end(), enc.v.begin());
    return {std::move(image), decode_mask(enc, palette)};
}

// ---------------------------------------------------------------------------
// Fractions
// ---------------------------------------------------------------------------

/// Per-class pixel fraction over non-ignored pixels.
inline PhaseFraction extract_fraction(const ClassMap& mask) {
    std::vector<int64_t> counts(mask.num_classes, 0);
    int64_t total = 0;
    for (uint8_t l : mask.labels) {
        if (l == ClassMap::kIgnore) continue;
        require(l < mask.num_classes, "class map contains label >= num_classes");
        ++counts[l];
        ++total;
    }
    require(total > 0, "mask has no labeled pixels");
    PhaseFraction out;
    out.f.resize(mask.num_classes);
    for (int k = 0; k < mask.num_classes; ++k)
        out.f[k] = static_cast<double>(counts[k]) / static_cast<double>(total);
    return out;
}

/// Pixel-weighted pooled fraction across all masks in the corpus.
inline PhaseFraction class_ratio(const Corpus& corpus) {
    require(!corpus.sources.empty(), "corpus is empty");
    std::vector<int64_t> counts(corpus.num_classes, 0);
    int64_t total = 0;
    for (const auto& s : corpus.sources) {
        for (uint8_t l : s.mask.labels) {
            if (l == ClassMap::kIgnore) continue;
            ++counts[l];
            ++total;
        }
    }
    require(total > 0, "corpus has no labeled pixels");
    PhaseFraction out;
    out.f.resize(corpus.num_classes);
    for (int k = 0; k < corpus.num_classes; ++k)
        out.f[k] = static_cast<double>(counts[k]) / static_cast<double>(total);
    return out;
}

}  // namespace phasegen
