#pragma once

#include "evseg/autodiff/tape.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace evseg {

struct SegModelConfig {
    std::size_t input_channels = 3;  // image + positive/negative click channels
    std::size_t base_width = 8;
    std::size_t depth = 3;
    std::size_t num_classes = 2;
    std::size_t num_heads = 3;
    std::uint64_t seed = 1;
};

inline void validate(const SegModelConfig& c) {
    if (c.input_channels != 3) throw std::invalid_argument("model: input_channels must be 3 (image + 2 click channels)");
    if (c.base_width == 0) throw std::invalid_argument("model: base_width must be >= 1");
    if (c.depth == 0) throw std::invalid_argument("model: depth must be >= 1");
    if (c.depth > 12) throw std::invalid_argument("model: depth must be <= 12");
    if (c.num_classes < 2) throw std::invalid_argument("model: num_classes must be >= 2");
    if (c.num_heads == 0) throw std::invalid_argument("model: num_heads must be >= 1");
}

// One parameter tensor in the stable ordering.
struct ParamSpec {
    std::string name;
    ad::Shape shape;
    std::size_t fan_in = 0;
    bool is_bias = false;
};

// Layer table. Level l has width base_width * 2^l and runs at 1/2^l resolution.
//   enc{l}.conv{1,2}  3x3 encoder pair (level 0 reads the image channel)
//   prompt{l}         3x3 conv of the click channels (max-pooled to level l), added to enc{l}
//   up{l}             nearest upsample of level l+1, then 3x3 conv down to level-l width
//   dec{l}            3x3 conv after the skip addition
//   head{k}           1x1 conv to per-class logits
inline std::vector<ParamSpec> parameter_layout(const SegModelConfig& c) {
    validate(c);
    std::vector<ParamSpec> out;
    auto conv = [&](const std::string& name, std::size_t o, std::size_t i, std::size_t k) {
        out.push_back({name + ".w", ad::Shape{o, i, k, k}, i * k * k, false});
        out.push_back({name + ".b", ad::Shape{o}, i * k * k, true});
    };
    auto width = [&](std::size_t l) { return c.base_width << l; };
    for (std::size_t l = 0; l < c.depth; ++l) {
        const std::string p = "enc" + std::to_string(l);
        conv(p + ".conv1", width(l), l == 0 ? 1 : width(l - 1), 3);
        conv(p + ".conv2", width(l), width(l), 3);
    }
    for (std::size_t l = 0; l < c.depth; ++l) conv("prompt" + std::to_string(l), width(l), 2, 3);
    for (std::size_t l = c.depth - 1; l-- > 0;) {
        conv("up" + std::to_string(l), width(l), width(l + 1), 3);
        conv("dec" + std::to_string(l), width(l), width(l), 3);
    }
    for (std::size_t k = 0; k < c.num_heads; ++k) conv("head" + std::to_string(k), c.num_classes, width(0), 1);
    return out;
}

inline std::size_t parameter_count(const SegModelConfig& c) {
    std::size_t n = 0;
    for (const auto& p : parameter_layout(c)) n += ad::element_count(p.shape);
    return n;
}

struct SegModel {
    SegModelConfig config;
    std::vector<ParamSpec> layout;
    std::vector<ad::Array> params;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.size();
        return n;
    }
};

// Kaiming-uniform weights (bound sqrt(6 / fan_in)), biases uniform in +-1/sqrt(fan_in).
inline SegModel init(const SegModelConfig& c) {
    SegModel m{c, parameter_layout(c), {}};
    std::mt19937_64 rng(c.seed);
    for (const auto& spec : m.layout) {
        const double bound = spec.is_bias ? 1.0 / std::sqrt(double(spec.fan_in)) : std::sqrt(6.0 / double(spec.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        ad::Array a(spec.shape);
        for (double& v : a.data) v = dist(rng);
        m.params.push_back(std::move(a));
    }
    return m;
}

// Parameters placed on a tape, as trainable variables or as constants.
struct BoundModel {
    const SegModelConfig* config = nullptr;
    std::vector<ad::Var> params;
};

inline BoundModel bind(const SegModel& m, ad::Tape& tape, bool trainable) {
    BoundModel b{&m.config, {}};
    b.params.reserve(m.params.size());
    for (const auto& p : m.params) b.params.push_back(trainable ? tape.variable(p) : tape.constant(p));
    return b;
}

// Encoder activations per level; computed once per image and reused while clicks change.
struct EncoderFeatures {
    std::vector<ad::Var> levels;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

inline void check_divisible(const SegModelConfig& c, std::size_t rows, std::size_t cols) {
    const std::size_t multiple = std::size_t{1} << c.depth;
    if (rows == 0 || cols == 0 || rows % multiple != 0 || cols % multiple != 0) {
        throw std::invalid_argument("model: input " + std::to_string(rows) + "x" + std::to_string(cols) +
                                    " must have both sides divisible by " + std::to_string(multiple) + " (2^depth)");
    }
}

inline EncoderFeatures encode(const BoundModel& m, const ad::Var& image) {
    const auto& s = image.shape();
    if (s.size() != 3 || s[0] != 1) throw std::invalid_argument("model: image must be [1,H,W], got " + ad::to_string(s));
    check_divisible(*m.config, s[1], s[2]);
    EncoderFeatures f{{}, s[1], s[2]};
    ad::Var h = image;
    for (std::size_t l = 0; l < m.config->depth; ++l) {
        if (l > 0) h = ad::maxpool2(h);
        const auto* p = &m.params[4 * l];
        h = ad::relu(ad::conv2d(h, p[0], p[1]));
        h = ad::relu(ad::conv2d(h, p[2], p[3]));
        f.levels.push_back(h);
    }
    return f;
}

// Per-head logits [N,H,W] from cached encoder features and [2,H,W] click channels.
inline std::vector<ad::Var> decode(const BoundModel& m, const EncoderFeatures& f, const ad::Var& clicks) {
    const auto& c = *m.config;
    const auto& s = clicks.shape();
    if (s != ad::Shape{2, f.rows, f.cols}) {
        throw std::invalid_argument("model: clicks must be [2," + std::to_string(f.rows) + "," + std::to_string(f.cols) +
                                    "], got " + ad::to_string(s));
    }
    const std::size_t prompt_base = 4 * c.depth;
    const std::size_t up_base = prompt_base + 2 * c.depth;
    std::vector<ad::Var> fused;
    ad::Var k = clicks;
    for (std::size_t l = 0; l < c.depth; ++l) {
        if (l > 0) k = ad::maxpool2(k);
        const auto* p = &m.params[prompt_base + 2 * l];
        fused.push_back(ad::relu(ad::add(f.levels[l], ad::conv2d(k, p[0], p[1]))));
    }
    ad::Var h = fused.back();
    std::size_t idx = up_base;
    for (std::size_t l = c.depth - 1; l-- > 0;) {
        const auto* p = &m.params[idx];
        h = ad::relu(ad::add(ad::conv2d(ad::upsample2(h), p[0], p[1]), fused[l]));
        h = ad::relu(ad::conv2d(h, p[2], p[3]));
        idx += 4;
    }
    std::vector<ad::Var> heads;
    for (std::size_t i = 0; i < c.num_heads; ++i, idx += 2) heads.push_back(ad::conv2d(h, m.params[idx], m.params[idx + 1]));
    return heads;
}

inline std::vector<ad::Var> forward(const BoundModel& m, const ad::Var& image, const ad::Var& clicks) {
    return decode(m, encode(m, image), clicks);
}

// ---- weight blob: "EUGW1\n", config line, little-endian float64 parameters ----

inline std::string config_line(const SegModelConfig& c) {
    std::ostringstream s;
    s << "input_channels=" << c.input_channels << " base_width=" << c.base_width << " depth=" << c.depth
      << " num_classes=" << c.num_classes << " num_heads=" << c.num_heads << "\n";
    return s.str();
}

inline constexpr const char* kWeightMagic = "EUGW1\n";

inline std::string export_weights(const SegModel& m) {
    std::string blob = kWeightMagic + config_line(m.config);
    for (const auto& p : m.params) {
        for (double v : p.data) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
            char bytes[8];
            std::memcpy(bytes, &bits, 8);
            blob.append(bytes, 8);
        }
    }
    return blob;
}

// Reads the architecture line of a blob so a model can be built to receive it.
inline SegModelConfig blob_config(const std::string& blob) {
    const std::string magic = kWeightMagic;
    if (blob.compare(0, magic.size(), magic) != 0) throw std::runtime_error("weights: missing EUGW1 header");
    const auto eol = blob.find('\n', magic.size());
    if (eol == std::string::npos) throw std::runtime_error("weights: truncated config line");
    std::istringstream line(blob.substr(magic.size(), eol - magic.size()));
    SegModelConfig c;
    std::string tok;
    int seen = 0;
    while (line >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw std::runtime_error("weights: bad config token '" + tok + "'");
        const std::string key = tok.substr(0, eq);
        const std::size_t value = std::stoul(tok.substr(eq + 1));
        if (key == "input_channels") c.input_channels = value;
        else if (key == "base_width") c.base_width = value;
        else if (key == "depth") c.depth = value;
        else if (key == "num_classes") c.num_classes = value;
        else if (key == "num_heads") c.num_heads = value;
        else throw std::runtime_error("weights: unknown config key '" + key + "'");
        ++seen;
    }
    if (seen != 5) throw std::runtime_error("weights: config line must have 5 fields");
    return c;
}

inline void import_weights(SegModel& m, const std::string& blob) {
    const SegModelConfig stored = blob_config(blob);
    if (config_line(stored) != config_line(m.config)) {
        throw std::runtime_error("weights: config mismatch, blob has '" +
                                 config_line(stored).substr(0, config_line(stored).size() - 1) + "' but model has '" +
                                 config_line(m.config).substr(0, config_line(m.config).size() - 1) + "'");
    }
    const std::size_t offset = std::string(kWeightMagic).size() + config_line(stored).size();
    const std::size_t expected = 8 * m.parameter_count();
    if (blob.size() - offset != expected) {
        throw std::runtime_error("weights: payload " + std::to_string(blob.size() - offset) + " bytes, expected " +
                                 std::to_string(expected));
    }
    std::size_t pos = offset;
    for (auto& p : m.params) {
        for (double& v : p.data) {
            std::uint64_t bits;
            std::memcpy(&bits, blob.data() + pos, 8);
            if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
            v = std::bit_cast<double>(bits);
            pos += 8;
        }
    }
}

// ---- AdamW ----

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

class AdamW {
public:
    AdamW(const SegModel& m, AdamWConfig cfg) : cfg_(cfg) {
        if (!(cfg.lr > 0.0)) throw std::invalid_argument("optimizer: learning rate must be > 0");
        for (const auto& p : m.params) {
            m_.emplace_back(p.shape, 0.0);
            v_.emplace_back(p.shape, 0.0);
        }
    }

    void step(SegModel& m, const std::vector<ad::Array>& grads) {
        if (grads.size() != m.params.size()) throw std::invalid_argument("optimizer: gradient count mismatch");
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t i = 0; i < m.params.size(); ++i) {
            auto& p = m.params[i].data;
            const auto& g = grads[i].data;
            auto& mi = m_[i].data;
            auto& vi = v_[i].data;
            for (std::size_t j = 0; j < p.size(); ++j) {
                mi[j] = cfg_.beta1 * mi[j] + (1.0 - cfg_.beta1) * g[j];
                vi[j] = cfg_.beta2 * vi[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                p[j] -= cfg_.lr * cfg_.weight_decay * p[j];
                p[j] -= cfg_.lr * (mi[j] / c1) / (std::sqrt(vi[j] / c2) + cfg_.eps);
            }
        }
    }

    std::size_t steps() const noexcept { return t_; }

private:
    AdamWConfig cfg_;
    std::vector<ad::Array> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace evseg
