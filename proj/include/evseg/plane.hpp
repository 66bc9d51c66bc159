#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace evseg {

// Row-major 2-D grid. Used for images, uncertainty maps and binary masks.
template <class T>
struct Plane {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Plane() = default;
    Plane(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}
    Plane(std::size_t r, std::size_t c, std::vector<T> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) {
            throw std::invalid_argument("plane " + std::to_string(r) + "x" + std::to_string(c) + " given " +
                                        std::to_string(data.size()) + " values");
        }
    }

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::size_t size() const noexcept { return data.size(); }

    friend bool operator==(const Plane&, const Plane&) = default;
};

using BinaryMask = Plane<std::uint8_t>;
using FloatMap = Plane<double>;

template <class A, class B>
void require_same_shape(const Plane<A>& a, const Plane<B>& b, const char* what) {
    if (a.rows != b.rows || a.cols != b.cols) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + std::to_string(a.rows) + "x" +
                                    std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                    std::to_string(b.cols));
    }
}

inline std::size_t count_foreground(const BinaryMask& m) {
    std::size_t n = 0;
    for (auto v : m.data) n += v != 0;
    return n;
}

}  // namespace evseg
