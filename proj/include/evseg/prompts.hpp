#pragma once

#include "evseg/autodiff/array.hpp"
#include "evseg/plane.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace evseg {

enum class Polarity : std::uint8_t { Positive, Negative };

struct Pixel {
    std::size_t row = 0;
    std::size_t col = 0;
    friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

struct ClickPoint {
    std::size_t row = 0;
    std::size_t col = 0;
    Polarity polarity = Polarity::Positive;
    friend bool operator==(const ClickPoint&, const ClickPoint&) = default;
};

// Clicks in acquisition order; a pixel appears at most once.
class ClickSet {
public:
    void add(const ClickPoint& p) {
        if (!taken_.insert(Pixel{p.row, p.col}).second) {
            throw std::invalid_argument("ClickSet: duplicate click at (" + std::to_string(p.row) + "," +
                                        std::to_string(p.col) + ")");
        }
        points_.push_back(p);
    }
    void append(const ClickSet& other) {
        for (const auto& p : other.points()) add(p);
    }
    bool contains(std::size_t row, std::size_t col) const { return taken_.count(Pixel{row, col}) != 0; }
    const std::vector<ClickPoint>& points() const noexcept { return points_; }
    std::size_t size() const noexcept { return points_.size(); }
    bool empty() const noexcept { return points_.empty(); }

private:
    std::vector<ClickPoint> points_;
    std::set<Pixel> taken_;
};

struct SampledPixels {
    std::vector<Pixel> pixels;
    bool shortfall = false;  // fewer eligible pixels than requested
    bool fallback = false;   // random sampler found no error region and drew from the whole image
};

enum class SamplerKind { TopK, RandomError, Grid };

inline SamplerKind parse_sampler(const std::string& s) {
    if (s == "topk") return SamplerKind::TopK;
    if (s == "random") return SamplerKind::RandomError;
    if (s == "grid") return SamplerKind::Grid;
    throw std::invalid_argument("unknown sampler '" + s + "' (expected topk, random or grid)");
}

inline std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::TopK: return "topk";
        case SamplerKind::RandomError: return "random";
        case SamplerKind::Grid: return "grid";
    }
    return "?";
}

// Greedy highest-uncertainty selection with Chebyshev suppression; ties in row-major order.
inline SampledPixels sample_topk_uncertainty(const FloatMap& u, std::size_t k, const ClickSet& exclude,
                                             std::size_t nms_radius) {
    if (k == 0) throw std::invalid_argument("sample_topk_uncertainty: k must be >= 1");
    std::vector<std::size_t> order(u.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return u.data[a] > u.data[b]; });
    SampledPixels out;
    const auto r = static_cast<long>(nms_radius);
    for (std::size_t idx : order) {
        if (out.pixels.size() == k) break;
        const Pixel p{idx / u.cols, idx % u.cols};
        if (exclude.contains(p.row, p.col)) continue;
        const bool suppressed = std::any_of(out.pixels.begin(), out.pixels.end(), [&](const Pixel& q) {
            return std::abs(static_cast<long>(q.row) - static_cast<long>(p.row)) <= r &&
                   std::abs(static_cast<long>(q.col) - static_cast<long>(p.col)) <= r;
        });
        if (!suppressed) out.pixels.push_back(p);
    }
    out.shortfall = out.pixels.size() < k;
    return out;
}

// Uniform draws without replacement from pred XOR gt (minus exclusions); whole image when
// that region is empty.
template <class Rng>
SampledPixels sample_random_error(const BinaryMask& pred, const BinaryMask& gt, std::size_t k, Rng& rng,
                                  const ClickSet& exclude = {}) {
    require_same_shape(pred, gt, "sample_random_error");
    if (k == 0) throw std::invalid_argument("sample_random_error: k must be >= 1");
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if ((pred.data[i] != 0) != (gt.data[i] != 0) && !exclude.contains(i / pred.cols, i % pred.cols)) {
            pool.push_back(i);
        }
    }
    SampledPixels out;
    if (pool.empty()) {
        out.fallback = true;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (!exclude.contains(i / pred.cols, i % pred.cols)) pool.push_back(i);
        }
    }
    const std::size_t take = std::min(k, pool.size());
    for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
        out.pixels.push_back(Pixel{pool[i] / pred.cols, pool[i] % pred.cols});
    }
    out.shortfall = take < k;
    return out;
}

// Model-agnostic baseline: cell centres of successively finer g x g lattices (g = 1, 2, ...),
// row-major within a lattice, skipping excluded or already chosen pixels.
inline SampledPixels sample_grid(std::size_t rows, std::size_t cols, std::size_t k, const ClickSet& exclude) {
    if (k == 0) throw std::invalid_argument("sample_grid: k must be >= 1");
    SampledPixels out;
    std::set<Pixel> chosen;
    for (std::size_t g = 1; out.pixels.size() < k && g <= std::max(rows, cols); ++g) {
        for (std::size_t i = 0; i < g && out.pixels.size() < k; ++i) {
            for (std::size_t j = 0; j < g && out.pixels.size() < k; ++j) {
                const Pixel p{std::min(rows - 1, (2 * i + 1) * rows / (2 * g)), std::min(cols - 1, (2 * j + 1) * cols / (2 * g))};
                if (exclude.contains(p.row, p.col) || !chosen.insert(p).second) continue;
                out.pixels.push_back(p);
            }
        }
    }
    out.shortfall = out.pixels.size() < k;
    return out;
}

// Oracle user: positive on ground-truth foreground, negative elsewhere.
inline ClickSet assign_polarity(const std::vector<Pixel>& pixels, const BinaryMask& gt) {
    ClickSet out;
    for (const auto& p : pixels) {
        if (p.row >= gt.rows || p.col >= gt.cols) throw std::out_of_range("assign_polarity: click outside mask");
        out.add(ClickPoint{p.row, p.col, gt(p.row, p.col) ? Polarity::Positive : Polarity::Negative});
    }
    return out;
}

inline constexpr double kDefaultClickSigma = 2.0;

// Two channels [positive, negative] of unit-peak Gaussians, each clamped to [0, 1].
inline ad::Array rasterize(const ClickSet& clicks, std::size_t rows, std::size_t cols,
                           double sigma = kDefaultClickSigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("rasterize: sigma must be > 0");
    ad::Array out(ad::Shape{2, rows, cols}, 0.0);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (const auto& p : clicks.points()) {
        const std::size_t ch = p.polarity == Polarity::Positive ? 0 : 1;
        for (std::size_t r = 0; r < rows; ++r) {
            const double dr = static_cast<double>(r) - static_cast<double>(p.row);
            for (std::size_t c = 0; c < cols; ++c) {
                const double dc = static_cast<double>(c) - static_cast<double>(p.col);
                out.at(ch, r, c) += std::exp(-(dr * dr + dc * dc) * inv);
            }
        }
    }
    for (double& v : out.data) v = std::min(v, 1.0);
    return out;
}

}  // namespace evseg
