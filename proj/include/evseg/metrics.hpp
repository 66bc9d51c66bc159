#pragma once

#include "evseg/plane.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace evseg::metrics {

inline double dice(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "dice");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a.data[i] != 0, y = b.data[i] != 0;
        inter += x && y;
        na += x;
        nb += y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline double jaccard(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "jaccard");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a.data[i] != 0, y = b.data[i] != 0;
        inter += x && y;
        uni += x || y;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// Mask minus its 4-connected erosion (pixels outside the image count as background).
inline BinaryMask boundary(const BinaryMask& m) {
    BinaryMask out(m.rows, m.cols, 0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            if (!m(r, c)) continue;
            const bool interior = r > 0 && c > 0 && r + 1 < m.rows && c + 1 < m.cols && m(r - 1, c) && m(r + 1, c) &&
                                  m(r, c - 1) && m(r, c + 1);
            out(r, c) = !interior;
        }
    }
    return out;
}

namespace detail {

// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
inline void edt_1d(const double* f, double* d, std::size_t n, std::vector<int>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    int k = -1;
    for (std::size_t qi = 0; qi < n; ++qi) {
        if (f[qi] == inf) continue;
        const double q = static_cast<double>(qi);
        double s = -inf;
        while (k >= 0) {
            const double p = v[static_cast<std::size_t>(k)];
            s = ((f[qi] + q * q) - (f[static_cast<std::size_t>(p)] + p * p)) / (2.0 * q - 2.0 * p);
            if (s > z[static_cast<std::size_t>(k)]) break;
            --k;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = static_cast<int>(qi);
        z[static_cast<std::size_t>(k)] = k == 0 ? -inf : s;
        z[static_cast<std::size_t>(k) + 1] = inf;
    }
    if (k < 0) {
        std::fill(d, d + n, inf);
        return;
    }
    int j = 0;
    for (std::size_t qi = 0; qi < n; ++qi) {
        const double q = static_cast<double>(qi);
        while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
        const double p = v[static_cast<std::size_t>(j)];
        d[qi] = (q - p) * (q - p) + f[static_cast<std::size_t>(p)];
    }
}

}  // namespace detail

// Exact squared Euclidean distance from every pixel to the nearest set pixel of `sites`.
inline FloatMap squared_distance_transform(const BinaryMask& sites) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    const std::size_t h = sites.rows, w = sites.cols;
    FloatMap d(h, w, inf);
    for (std::size_t i = 0; i < sites.size(); ++i) d.data[i] = sites.data[i] ? 0.0 : inf;
    std::vector<int> v;
    std::vector<double> z, f(std::max(h, w)), out(std::max(h, w));
    for (std::size_t c = 0; c < w; ++c) {
        for (std::size_t r = 0; r < h; ++r) f[r] = d(r, c);
        detail::edt_1d(f.data(), out.data(), h, v, z);
        for (std::size_t r = 0; r < h; ++r) d(r, c) = out[r];
    }
    for (std::size_t r = 0; r < h; ++r) {
        detail::edt_1d(&d(r, 0), out.data(), w, v, z);
        std::copy(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(w), &d(r, 0));
    }
    return d;
}

// Linear interpolation between order statistics; sorts in place.
inline double percentile(std::vector<double>& values, double q) {
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] + (rank - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

inline double hd95(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "hd95");
    const BinaryMask ba = boundary(a), bb = boundary(b);
    const std::size_t na = count_foreground(ba), nb = count_foreground(bb);
    if (na == 0 && nb == 0) return 0.0;
    if (na == 0 || nb == 0) {
        return std::hypot(static_cast<double>(a.rows) - 1.0, static_cast<double>(a.cols) - 1.0);
    }
    const FloatMap to_b = squared_distance_transform(bb), to_a = squared_distance_transform(ba);
    std::vector<double> pooled;
    pooled.reserve(na + nb);
    for (std::size_t i = 0; i < ba.size(); ++i) {
        if (ba.data[i]) pooled.push_back(std::sqrt(to_b.data[i]));
        if (bb.data[i]) pooled.push_back(std::sqrt(to_a.data[i]));
    }
    return percentile(pooled, 0.95);
}

// Mann-Whitney AUROC with errors (pred != gt) as positives and u as the score. NaN when
// either class is empty.
inline double auroc(std::span<const double> score, std::span<const std::uint8_t> positive) {
    const std::size_t n = score.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return score[x] < score[y]; });
    double rank_sum = 0.0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && score[order[j]] == score[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t) {
            if (positive[order[t]]) {
                rank_sum += midrank;
                ++pos;
            }
        }
        i = j;
    }
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
    const double p = static_cast<double>(pos);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

inline std::vector<std::uint8_t> error_indicator(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "error_indicator");
    std::vector<std::uint8_t> err(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) err[i] = (pred.data[i] != 0) != (gt.data[i] != 0);
    return err;
}

inline double auroc_uncertainty_error(const FloatMap& u, const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(u, pred, "auroc_uncertainty_error");
    const auto err = error_indicator(pred, gt);
    return auroc(u.data, err);
}

struct MetricsReport {
    double dice = 0.0;
    double jaccard = 0.0;
    double hd95 = 0.0;
    double auroc = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> dice_per_sample;
    std::vector<double> jaccard_per_sample;
    std::vector<double> hd95_per_sample;
    std::size_t samples = 0;
};

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Segmentation metrics for each (prediction, ground truth) pair and their means.
inline MetricsReport summarize(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts) {
    if (preds.size() != gts.size()) throw std::invalid_argument("summarize: prediction/ground-truth count mismatch");
    MetricsReport r;
    r.samples = preds.size();
    for (std::size_t i = 0; i < preds.size(); ++i) {
        r.dice_per_sample.push_back(dice(preds[i], gts[i]));
        r.jaccard_per_sample.push_back(jaccard(preds[i], gts[i]));
        r.hd95_per_sample.push_back(hd95(preds[i], gts[i]));
    }
    r.dice = mean_of(r.dice_per_sample);
    r.jaccard = mean_of(r.jaccard_per_sample);
    r.hd95 = mean_of(r.hd95_per_sample);
    return r;
}

}  // namespace evseg::metrics
