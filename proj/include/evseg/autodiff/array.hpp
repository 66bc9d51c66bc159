#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace evseg::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major array of doubles. A shape of [] denotes a scalar holding one element.
struct Array {
    Shape shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(Shape s, double fill = 0.0) : shape(std::move(s)), data(element_count(shape), fill) {}
    Array(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (element_count(shape) != data.size()) {
            throw std::invalid_argument("array shape " + to_string(shape) + " does not match " +
                                        std::to_string(data.size()) + " values");
        }
    }

    static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    bool empty() const noexcept { return data.empty(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // Convenience accessor for rank-3 [C,H,W] arrays.
    double& at(std::size_t c, std::size_t r, std::size_t col) {
        return data[(c * shape[1] + r) * shape[2] + col];
    }
    double at(std::size_t c, std::size_t r, std::size_t col) const {
        return data[(c * shape[1] + r) * shape[2] + col];
    }

    double item() const {
        if (data.size() != 1) throw std::invalid_argument("item() on array of shape " + to_string(shape));
        return data[0];
    }

    friend bool operator==(const Array&, const Array&) = default;
};

}  // namespace evseg::ad
