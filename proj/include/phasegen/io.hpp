#pragma once
// File I/O: binary PGM (P5) images for micrographs and index masks, plus
// small filesystem helpers. Mask files store the raw class code per pixel.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/grid.hpp"

namespace phasegen {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

/// 8-bit single-channel raster.
struct RawImage {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> pixels;
};

inline RawImage read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: " + path.string());

    std::string magic;
    in >> magic;
    require(magic == "P5", "not a binary PGM (P5) file: " + path.string());

    auto next_int = [&in, &path]() {
        // skip whitespace and '#' comment lines
        int c = in.peek();
        while (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '#') {
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else {
                in.get();
            }
            c = in.peek();
        }
        long v = -1;
        in >> v;
        require(in.good() && v >= 0, "malformed PGM header: " + path.string());
        return v;
    };

    long w = next_int();
    long h = next_int();
    long maxval = next_int();
    require(w > 0 && h > 0, "PGM has degenerate size: " + path.string());
    require(maxval > 0 && maxval <= 255, "only 8-bit PGM supported: " + path.string());
    in.get();  // single whitespace byte before raster

    RawImage img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.pixels.resize(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    require(in.gcount() == static_cast<std::streamsize>(img.pixels.size()),
            "PGM raster truncated: " + path.string());
    return img;
}

inline void write_pgm(const fs::path& path, const RawImage& img) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot write file: " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    require(out.good(), "failed writing PGM: " + path.string());
}

/// Linear 8-bit -> [-1, 1] over the fixed corpus-wide range (0 -> -1, 255 -> +1).
inline Image image_from_raw(const RawImage& raw) {
    Image img(raw.height, raw.width);
    for (size_t i = 0; i < raw.pixels.size(); ++i)
        img.v[i] = static_cast<float>(raw.pixels[i]) / 255.0f * 2.0f - 1.0f;
    return img;
}

/// Inverse of image_from_raw with rounding and clamping.
inline RawImage raw_from_image(const Image& img) {
    RawImage raw;
    raw.height = img.height;
    raw.width = img.width;
    raw.pixels.resize(img.size());
    for (size_t i = 0; i < img.size(); ++i) {
        float u = (clamp(img.v[i], -1.0f, 1.0f) + 1.0f) * 0.5f * 255.0f;
        raw.pixels[i] = static_cast<uint8_t>(u + 0.5f);
    }
    return raw;
}

inline void write_image_pgm(const fs::path& path, const Image& img) {
    write_pgm(path, raw_from_image(img));
}

inline void write_mask_pgm(const fs::path& path, const ClassMap& mask) {
    RawImage raw;
    raw.height = mask.height;
    raw.width = mask.width;
    raw.pixels = mask.labels;
    write_pgm(path, raw);
}

inline ClassMap read_mask_pgm(const fs::path& path, int num_classes) {
    RawImage raw = read_pgm(path);
    ClassMap mask(raw.height, raw.width, num_classes);
    mask.labels = raw.pixels;
    return mask;
}

// ---------------------------------------------------------------------------
// Small file helpers
// ---------------------------------------------------------------------------

inline std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot write file: " + path.string());
    out << text;
    require(out.good(), "failed writing file: " + path.string());
}

}  // namespace phasegen
