#pragma once

#include "evseg/plane.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace evseg {

struct GenConfig {
    std::size_t rows = 64;
    std::size_t cols = 64;
    std::size_t n_samples = 200;
    std::size_t blobs_min = 1;
    std::size_t blobs_max = 3;
    double blur_sigma = 1.5;        // boundary blur, pixels; 0 disables
    std::size_t speckle_looks = 4;  // looks averaged per pixel; 0 disables speckle
    double speckle_corr = 1.0;      // low-pass sigma of the complex field, pixels
    double contrast_min = 0.15;
    double contrast_max = 0.35;
    std::uint64_t seed = 1;
};

inline constexpr double kMinForeground = 0.03;
inline constexpr double kMaxForeground = 0.6;
inline constexpr int kMaxRejections = 100;

struct Sample {
    FloatMap image;
    BinaryMask mask;
    std::size_t index = 0;
    std::string provenance;
};

inline void validate(const GenConfig& c) {
    if (c.rows == 0 || c.cols == 0) throw std::invalid_argument("gen: rows and cols must be positive");
    if (c.blobs_min == 0 || c.blobs_min > c.blobs_max) throw std::invalid_argument("gen: need 1 <= blobs_min <= blobs_max");
    if (c.blur_sigma < 0.0 || c.speckle_corr < 0.0) throw std::invalid_argument("gen: sigmas must be >= 0");
    if (!(c.contrast_min > 0.0) || c.contrast_min > c.contrast_max || c.contrast_max >= 0.5) {
        throw std::invalid_argument("gen: need 0 < contrast_min <= contrast_max < 0.5");
    }
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
    const auto radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += k[static_cast<std::size_t>(i + radius)];
    }
    for (double& v : k) v /= total;
    return k;
}

inline std::size_t reflect(long i, std::size_t n) {
    const long m = static_cast<long>(n);
    while (i < 0 || i >= m) i = i < 0 ? -i - 1 : 2 * m - i - 1;
    return static_cast<std::size_t>(i);
}

// Separable Gaussian filter with symmetric boundary extension.
inline FloatMap blur(const FloatMap& in, double sigma) {
    if (sigma <= 0.0) return in;
    const auto k = gaussian_kernel(sigma);
    const long radius = static_cast<long>(k.size() / 2);
    FloatMap tmp(in.rows, in.cols), out(in.rows, in.cols);
    for (std::size_t r = 0; r < in.rows; ++r) {
        for (std::size_t c = 0; c < in.cols; ++c) {
            double s = 0.0;
            for (long d = -radius; d <= radius; ++d) {
                s += k[static_cast<std::size_t>(d + radius)] * in(r, reflect(static_cast<long>(c) + d, in.cols));
            }
            tmp(r, c) = s;
        }
    }
    for (std::size_t r = 0; r < in.rows; ++r) {
        for (std::size_t c = 0; c < in.cols; ++c) {
            double s = 0.0;
            for (long d = -radius; d <= radius; ++d) {
                s += k[static_cast<std::size_t>(d + radius)] * tmp(reflect(static_cast<long>(r) + d, in.rows), c);
            }
            out(r, c) = s;
        }
    }
    return out;
}

// Unit-mean speckle: average of `looks` squared magnitudes of low-pass filtered complex
// Gaussian fields.
template <class Rng>
FloatMap speckle_field(std::size_t rows, std::size_t cols, std::size_t looks, double corr, Rng& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    FloatMap out(rows, cols, 0.0);
    double kernel_energy = 1.0;
    if (corr > 0.0) {
        kernel_energy = 0.0;
        for (double a : gaussian_kernel(corr))
            for (double b : gaussian_kernel(corr)) kernel_energy += a * a * b * b;
    }
    for (std::size_t l = 0; l < looks; ++l) {
        FloatMap re(rows, cols), im(rows, cols);
        for (std::size_t i = 0; i < re.size(); ++i) {
            re.data[i] = n01(rng);
            im.data[i] = n01(rng);
        }
        re = blur(re, corr);
        im = blur(im, corr);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.data[i] += (re.data[i] * re.data[i] + im.data[i] * im.data[i]) / (2.0 * kernel_energy);
        }
    }
    for (double& v : out.data) v /= static_cast<double>(looks);
    return out;
}

struct Ellipse {
    double cr, cc, a, b, theta;
    bool contains(double r, double c) const {
        const double dr = r - cr, dc = c - cc;
        const double u = dc * std::cos(theta) + dr * std::sin(theta);
        const double v = -dc * std::sin(theta) + dr * std::cos(theta);
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
};

}  // namespace detail

// Independent stream per (seed, index) so samples can be produced in any order.
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::uint64_t(index) >> 32),
                      0x5eedu};
    return std::mt19937_64(seq);
}

inline Sample generate_sample(const GenConfig& cfg, std::size_t index) {
    validate(cfg);
    auto rng = sample_rng(cfg.seed, index);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double h = static_cast<double>(cfg.rows), w = static_cast<double>(cfg.cols);

    BinaryMask mask(cfg.rows, cfg.cols, 0);
    int attempt = 0;
    for (;; ++attempt) {
        if (attempt == kMaxRejections) {
            throw std::runtime_error("gen: sample " + std::to_string(index) + " violates the foreground-fraction bounds after " +
                                     std::to_string(kMaxRejections) + " retries");
        }
        std::uniform_int_distribution<std::size_t> count(cfg.blobs_min, cfg.blobs_max);
        std::vector<detail::Ellipse> blobs(count(rng));
        // Blobs after the first are placed near it so they overlap into one lesion.
        for (std::size_t i = 0; i < blobs.size(); ++i) {
            auto& e = blobs[i];
            e.a = (0.08 + 0.17 * unit(rng)) * std::min(h, w);
            e.b = (0.08 + 0.17 * unit(rng)) * std::min(h, w);
            e.theta = std::numbers::pi * unit(rng);
            if (i == 0) {
                e.cr = h * (0.3 + 0.4 * unit(rng));
                e.cc = w * (0.3 + 0.4 * unit(rng));
            } else {
                const double ang = 2.0 * std::numbers::pi * unit(rng);
                const double dist = 0.8 * blobs[0].a * unit(rng);
                e.cr = blobs[0].cr + dist * std::sin(ang);
                e.cc = blobs[0].cc + dist * std::cos(ang);
            }
        }
        for (std::size_t r = 0; r < cfg.rows; ++r) {
            for (std::size_t c = 0; c < cfg.cols; ++c) {
                const bool in = std::any_of(blobs.begin(), blobs.end(),
                                            [&](const auto& e) { return e.contains(double(r), double(c)); });
                mask(r, c) = in;
            }
        }
        const double frac = static_cast<double>(count_foreground(mask)) / static_cast<double>(mask.size());
        if (frac >= kMinForeground && frac <= kMaxForeground) break;
    }

    const double background = 0.35 + 0.1 * unit(rng);
    const double contrast = cfg.contrast_min + (cfg.contrast_max - cfg.contrast_min) * unit(rng);
    const bool darker = unit(rng) < 0.75;  // lesions are mostly hypoechoic
    const double foreground = darker ? background - contrast : background + contrast;

    FloatMap image(cfg.rows, cfg.cols);
    for (std::size_t i = 0; i < image.size(); ++i) image.data[i] = mask.data[i] ? foreground : background;
    image = detail::blur(image, cfg.blur_sigma);
    if (cfg.speckle_looks > 0) {
        const FloatMap s = detail::speckle_field(cfg.rows, cfg.cols, cfg.speckle_looks, cfg.speckle_corr, rng);
        for (std::size_t i = 0; i < image.size(); ++i) image.data[i] *= s.data[i];
    }
    for (double& v : image.data) v = std::clamp(v, 0.0, 1.0);

    std::ostringstream prov;
    prov << "seed=" << cfg.seed << " index=" << index << " retries=" << attempt << " bg=" << background
         << " fg=" << foreground;
    return Sample{std::move(image), std::move(mask), index, prov.str()};
}

inline std::vector<Sample> generate(const GenConfig& cfg) {
    std::vector<Sample> out;
    out.reserve(cfg.n_samples);
    for (std::size_t i = 0; i < cfg.n_samples; ++i) out.push_back(generate_sample(cfg, i));
    return out;
}

// ---- 8-bit binary PGM ----

inline void write_pgm_bytes(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                            const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "P5\n" << cols << " " << rows << "\n255\n";
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Images are quantized to 8 bits (lossy).
inline void write_pgm(const std::filesystem::path& path, const FloatMap& image) {
    std::vector<std::uint8_t> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = quantize(image.data[i]);
    write_pgm_bytes(path, image.rows, image.cols, bytes);
}

inline void write_pgm(const std::filesystem::path& path, const BinaryMask& mask) {
    std::vector<std::uint8_t> bytes(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
    write_pgm_bytes(path, mask.rows, mask.cols, bytes);
}

inline Plane<std::uint8_t> parse_pgm(const std::string& buf, const std::string& name = "<memory>") {
    std::size_t pos = 0;
    auto fail = [&](const std::string& what) -> void {
        throw std::runtime_error(name + ": malformed PGM at byte " + std::to_string(pos) + ": " + what);
    };
    auto skip_space = [&] {
        while (pos < buf.size()) {
            if (buf[pos] == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&](const char* what) {
        skip_space();
        const std::size_t start = pos;
        unsigned long long v = 0;
        while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
            v = v * 10 + static_cast<unsigned>(buf[pos] - '0');
            if (v > (1ull << 32)) fail(std::string(what) + " too large");
            ++pos;
        }
        if (pos == start) fail(std::string("expected ") + what);
        return static_cast<std::size_t>(v);
    };
    if (buf.compare(0, 2, "P5") != 0) fail("missing P5 magic");
    pos = 2;
    const std::size_t cols = number("width");
    const std::size_t rows = number("height");
    const std::size_t maxval = number("maxval");
    if (maxval != 255) fail("maxval " + std::to_string(maxval) + " unsupported (need 255)");
    if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) fail("expected whitespace after maxval");
    ++pos;
    if (rows == 0 || cols == 0) fail("zero dimension");
    if (buf.size() - pos != rows * cols) {
        fail("payload has " + std::to_string(buf.size() - pos) + " bytes, expected " + std::to_string(rows * cols));
    }
    Plane<std::uint8_t> out(rows, cols);
    std::memcpy(out.data.data(), buf.data() + pos, rows * cols);
    return out;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

inline Plane<std::uint8_t> read_pgm(const std::filesystem::path& path) {
    return parse_pgm(read_file(path), path.string());
}

inline FloatMap read_pgm_image(const std::filesystem::path& path) {
    const auto raw = read_pgm(path);
    FloatMap out(raw.rows, raw.cols);
    for (std::size_t i = 0; i < raw.size(); ++i) out.data[i] = raw.data[i] / 255.0;
    return out;
}

inline BinaryMask read_pgm_mask(const std::filesystem::path& path) {
    auto raw = read_pgm(path);
    for (auto& v : raw.data) v = v >= 128;
    return raw;
}

// ---- UMAP1 float maps ----

inline void write_float_map(const std::filesystem::path& path, const FloatMap& map) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "UMAP1\n" << map.rows << " " << map.cols << "\n";
    for (double v : map.data) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        f.write(reinterpret_cast<const char*>(&bits), 4);
    }
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline FloatMap read_float_map(const std::filesystem::path& path) {
    const std::string buf = read_file(path);
    const std::string magic = "UMAP1\n";
    if (buf.compare(0, magic.size(), magic) != 0) throw std::runtime_error(path.string() + ": missing UMAP1 header");
    const auto eol = buf.find('\n', magic.size());
    if (eol == std::string::npos) throw std::runtime_error(path.string() + ": truncated header");
    std::istringstream dims(buf.substr(magic.size(), eol - magic.size()));
    std::size_t rows = 0, cols = 0;
    if (!(dims >> rows >> cols)) throw std::runtime_error(path.string() + ": bad dimension line");
    const std::size_t payload = buf.size() - eol - 1;
    if (payload != rows * cols * 4) {
        throw std::runtime_error(path.string() + ": payload " + std::to_string(payload) + " bytes does not match " +
                                 std::to_string(rows) + "x" + std::to_string(cols));
    }
    FloatMap out(rows, cols);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, buf.data() + eol + 1 + 4 * i, 4);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        out.data[i] = std::bit_cast<float>(bits);
    }
    return out;
}

// ---- dataset directories ----

inline constexpr const char* kManifestName = "manifest.txt";

inline void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / kManifestName);
    if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
    for (const auto& s : samples) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "%04zu", s.index);
        const std::string img = std::string("img_") + stem + ".pgm", msk = std::string("mask_") + stem + ".pgm";
        write_pgm(dir / img, s.image);
        write_pgm(dir / msk, s.mask);
        manifest << "image=" << img << " mask=" << msk << "\n";
    }
}

// Reads `manifest.txt`; relative paths resolve against the directory.
inline std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / kManifestName);
    if (!manifest) throw std::runtime_error("no " + std::string(kManifestName) + " in " + dir.string());
    std::vector<Sample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(manifest, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string a, b;
        ls >> a >> b;
        if (a.rfind("image=", 0) != 0 || b.rfind("mask=", 0) != 0) {
            throw std::runtime_error("manifest line " + std::to_string(lineno) + ": expected image=<path> mask=<path>");
        }
        auto resolve = [&](const std::string& p) {
            const std::filesystem::path q(p);
            return q.is_absolute() ? q : dir / q;
        };
        Sample s;
        s.image = read_pgm_image(resolve(a.substr(6)));
        s.mask = read_pgm_mask(resolve(b.substr(5)));
        require_same_shape(s.image, s.mask, "manifest entry");
        s.index = out.size();
        s.provenance = line;
        out.push_back(std::move(s));
    }
    if (out.empty()) throw std::runtime_error("empty dataset in " + dir.string());
    return out;
}

}  // namespace evseg
