#pragma once
// 2-D grids: grayscale images and per-pixel class maps.

#include <array>
#include <cstdint>
#include <vector>

#include "phasegen/common.hpp"

namespace phasegen {

/// Row-major H x W grid of T.
template <typename T>
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<T> v;

    Grid() = default;
    Grid(int h, int w, T fill = T{}) : height(h), width(w), v(static_cast<size_t>(h) * w, fill) {
        require(h > 0 && w > 0, "grid dimensions must be positive");
    }

    T& at(int y, int x) { return v[static_cast<size_t>(y) * width + x]; }
    const T& at(int y, int x) const { return v[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return v.size(); }

    bool same_shape(const Grid& o) const { return height == o.height && width == o.width; }

    Grid crop(int y0, int x0, int h, int w) const {
        require(y0 >= 0 && x0 >= 0 && y0 + h <= height && x0 + w <= width, "crop out of bounds");
        Grid out(h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(y, x) = at(y0 + y, x0 + x);
        return out;
    }
};

/// Grayscale image, values in [-1, 1] once normalized.
using Image = Grid<float>;

/// Per-pixel class labels in {0..num_classes-1} plus an ignore sentinel.
struct ClassMap {
    static constexpr uint8_t kIgnore = 255;

    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<uint8_t> labels;

    ClassMap() = default;
    ClassMap(int h, int w, int k, uint8_t fill = 0)
        : height(h), width(w), num_classes(k), labels(static_cast<size_t>(h) * w, fill) {
        require(h > 0 && w > 0, "class map dimensions must be positive");
        require(k >= 1 && k < kIgnore, "class count out of range");
    }

    uint8_t& at(int y, int x) { return labels[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return labels.size(); }
    bool same_shape(const ClassMap& o) const { return height == o.height && width == o.width; }

    /// Every non-ignore label must be < num_classes.
    void validate() const {
        for (uint8_t l : labels)
            require(l == kIgnore || l < num_classes, "class map contains label >= num_classes");
    }

    ClassMap crop(int y0, int x0, int h, int w) const {
        require(y0 >= 0 && x0 >= 0 && y0 + h <= height && x0 + w <= width, "crop out of bounds");
        ClassMap out(h, w, num_classes);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(y, x) = at(y0 + y, x0 + x);
        return out;
    }
};

}  // namespace phasegen
