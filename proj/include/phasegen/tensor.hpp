#pragma once
// Dense C x H x W tensor. The diffusion process runs on 4-channel tensors
// (channel 0 image, channels 1-3 encoded mask); the nn layers use the same
// type for activations.

#include <cstddef>
#include <vector>

#include "phasegen/common.hpp"

namespace phasegen {

template <typename S = float>
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<S> v;

    Tensor() = default;
    Tensor(int c, int h, int w, S fill = S(0))
        : channels(c), height(h), width(w), v(static_cast<size_t>(c) * h * w, fill) {
        require(c > 0 && h > 0 && w > 0, "tensor dimensions must be positive");
    }

    S& at(int c, int y, int x) {
        return v[(static_cast<size_t>(c) * height + y) * width + x];
    }
    S at(int c, int y, int x) const {
        return v[(static_cast<size_t>(c) * height + y) * width + x];
    }
    S* plane(int c) { return v.data() + static_cast<size_t>(c) * height * width; }
    const S* plane(int c) const { return v.data() + static_cast<size_t>(c) * height * width; }

    size_t size() const { return v.size(); }
    int plane_size() const { return height * width; }
    bool same_shape(const Tensor& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }

    Tensor& operator+=(const Tensor& o) {
        require(same_shape(o), "tensor shape mismatch");
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
        return *this;
    }
    Tensor& operator*=(S s) {
        for (auto& x : v) x *= s;
        return *this;
    }

    void fill(S s) { std::fill(v.begin(), v.end(), s); }

    template <typename T2>
    Tensor<T2> cast() const {
        Tensor<T2> out(channels, height, width);
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T2>(v[i]);
        return out;
    }
};

}  // namespace phasegen
