#pragma once

#include <cstddef>
#include <vector>

#include "memtrace/errors.hpp"

namespace memtrace {

// Dense row-major tensor. Image batches are (B, C, H, W); flat feature
// batches are (B, D). Shape is kept as an explicit dim vector.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), T(0));
    }

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d < 0) throw InputError("negative tensor dim");
            n *= static_cast<size_t>(d);
        }
        return s.empty() ? 0 : n;
    }

    size_t numel() const { return data.size(); }
    int dim(size_t i) const { return shape.at(i); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Tensor = TensorT<float>;

}  // namespace memtrace
