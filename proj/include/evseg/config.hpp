#pragma once

#include "evseg/evidential.hpp"
#include "evseg/losses.hpp"
#include "evseg/model.hpp"
#include "evseg/prompts.hpp"
#include "evseg/synthdata.hpp"

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace evseg {

struct TrainConfig {
    int epochs_stage1 = 50;
    int epochs_stage2 = 50;
    std::size_t iterations = 3;       // M
    std::size_t clicks_per_iter = 1;  // k
    double lr = 1e-4;
    double weight_decay = 1e-4;
    std::size_t batch_size = 1;
    std::uint64_t seed = 1;
    double val_fraction = 0.2;
    bool stage1_all_heads = true;  // false: stage I loss only on the confidence-selected head
};

struct PromptConfig {
    SamplerKind sampler = SamplerKind::TopK;
    std::size_t nms_radius = 2;
    double sigma = kDefaultClickSigma;
    bool refresh_in_loop = false;  // re-derive the top-k map after every iteration
};

struct ExperimentConfig {
    GenConfig gen;
    SegModelConfig model;
    EvidenceActivation evidence = EvidenceActivation::Relu;
    TrainConfig train;
    PromptConfig prompt;
    LossConfig loss;
    AnnealConfig anneal;  // total_epochs is derived from the two stage lengths

    AnnealConfig effective_anneal() const {
        AnnealConfig a = anneal;
        a.total_epochs = train.epochs_stage1 + train.epochs_stage2;
        return a;
    }
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec != std::errc{} || r.ptr != text.data() + text.size()) {
        throw ConfigError("config: bad value '" + text + "' for " + key);
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("config: bad boolean '" + text + "' for " + key + " (use true/false)");
}

struct Entry {
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

template <class T, class Owner>
Entry number_entry(const std::string& key, Owner ExperimentConfig::*owner, T Owner::*field) {
    return {[=](ExperimentConfig& c, const std::string& v) { (c.*owner).*field = parse_number<T>(key, v); },
            [=](const ExperimentConfig& c) {
                if constexpr (std::is_floating_point_v<T>) return format_double((c.*owner).*field);
                else return std::to_string((c.*owner).*field);
            }};
}

inline const std::map<std::string, Entry>& registry() {
    static const std::map<std::string, Entry> table = [] {
        std::map<std::string, Entry> t;
        using C = ExperimentConfig;
        t["gen.rows"] = number_entry("gen.rows", &C::gen, &GenConfig::rows);
        t["gen.cols"] = number_entry("gen.cols", &C::gen, &GenConfig::cols);
        t["gen.n_samples"] = number_entry("gen.n_samples", &C::gen, &GenConfig::n_samples);
        t["gen.blobs_min"] = number_entry("gen.blobs_min", &C::gen, &GenConfig::blobs_min);
        t["gen.blobs_max"] = number_entry("gen.blobs_max", &C::gen, &GenConfig::blobs_max);
        t["gen.blur_sigma"] = number_entry("gen.blur_sigma", &C::gen, &GenConfig::blur_sigma);
        t["gen.speckle_looks"] = number_entry("gen.speckle_looks", &C::gen, &GenConfig::speckle_looks);
        t["gen.speckle_corr"] = number_entry("gen.speckle_corr", &C::gen, &GenConfig::speckle_corr);
        t["gen.contrast_min"] = number_entry("gen.contrast_min", &C::gen, &GenConfig::contrast_min);
        t["gen.contrast_max"] = number_entry("gen.contrast_max", &C::gen, &GenConfig::contrast_max);
        t["gen.seed"] = number_entry("gen.seed", &C::gen, &GenConfig::seed);

        t["model.base_width"] = number_entry("model.base_width", &C::model, &SegModelConfig::base_width);
        t["model.depth"] = number_entry("model.depth", &C::model, &SegModelConfig::depth);
        t["model.num_classes"] = number_entry("model.num_classes", &C::model, &SegModelConfig::num_classes);
        t["model.num_heads"] = number_entry("model.num_heads", &C::model, &SegModelConfig::num_heads);
        t["model.seed"] = number_entry("model.seed", &C::model, &SegModelConfig::seed);
        t["model.evidence"] = {[](C& c, const std::string& v) {
                                   try {
                                       c.evidence = parse_activation(v);
                                   } catch (const std::invalid_argument& e) {
                                       throw ConfigError(std::string("config: model.evidence: ") + e.what());
                                   }
                               },
                               [](const C& c) { return std::string(to_string(c.evidence)); }};

        t["train.epochs_stage1"] = number_entry("train.epochs_stage1", &C::train, &TrainConfig::epochs_stage1);
        t["train.epochs_stage2"] = number_entry("train.epochs_stage2", &C::train, &TrainConfig::epochs_stage2);
        t["train.iterations"] = number_entry("train.iterations", &C::train, &TrainConfig::iterations);
        t["train.clicks_per_iter"] = number_entry("train.clicks_per_iter", &C::train, &TrainConfig::clicks_per_iter);
        t["train.lr"] = number_entry("train.lr", &C::train, &TrainConfig::lr);
        t["train.weight_decay"] = number_entry("train.weight_decay", &C::train, &TrainConfig::weight_decay);
        t["train.batch_size"] = number_entry("train.batch_size", &C::train, &TrainConfig::batch_size);
        t["train.seed"] = number_entry("train.seed", &C::train, &TrainConfig::seed);
        t["train.val_fraction"] = number_entry("train.val_fraction", &C::train, &TrainConfig::val_fraction);
        t["train.stage1_heads"] = {[](C& c, const std::string& v) {
                                       if (v == "selected") c.train.stage1_all_heads = false;
                                       else if (v == "all") c.train.stage1_all_heads = true;
                                       else throw ConfigError("config: train.stage1_heads must be selected or all");
                                   },
                                   [](const C& c) { return std::string(c.train.stage1_all_heads ? "all" : "selected"); }};

        t["prompt.sampler"] = {[](C& c, const std::string& v) {
                                   try {
                                       c.prompt.sampler = parse_sampler(v);
                                   } catch (const std::invalid_argument& e) {
                                       throw ConfigError(std::string("config: prompt.sampler: ") + e.what());
                                   }
                               },
                               [](const C& c) { return to_string(c.prompt.sampler); }};
        t["prompt.nms_radius"] = number_entry("prompt.nms_radius", &C::prompt, &PromptConfig::nms_radius);
        t["prompt.sigma"] = number_entry("prompt.sigma", &C::prompt, &PromptConfig::sigma);
        t["prompt.refresh_in_loop"] = {
            [](C& c, const std::string& v) { c.prompt.refresh_in_loop = parse_bool("prompt.refresh_in_loop", v); },
            [](const C& c) { return std::string(c.prompt.refresh_in_loop ? "true" : "false"); }};

        auto weight = [](const char* key, double LossWeights::*field) {
            return Entry{[=](C& c, const std::string& v) { c.loss.weights.*field = parse_number<double>(key, v); },
                         [=](const C& c) { return format_double(c.loss.weights.*field); }};
        };
        t["loss.lambda1"] = weight("loss.lambda1", &LossWeights::lambda1);
        t["loss.lambda2"] = weight("loss.lambda2", &LossWeights::lambda2);
        t["loss.beta1"] = weight("loss.beta1", &LossWeights::beta1);
        t["loss.beta2"] = weight("loss.beta2", &LossWeights::beta2);
        t["loss.ceu"] = {[](C& c, const std::string& v) { c.loss.ceu_enabled = parse_bool("loss.ceu", v); },
                         [](const C& c) { return std::string(c.loss.ceu_enabled ? "true" : "false"); }};
        t["loss.dice_form"] = {[](C& c, const std::string& v) {
                                   if (v == "aggregate") c.loss.dice_form = DiceForm::Aggregate;
                                   else if (v == "per_pixel") c.loss.dice_form = DiceForm::PerPixel;
                                   else throw ConfigError("config: loss.dice_form must be aggregate or per_pixel");
                               },
                               [](const C& c) {
                                   return std::string(c.loss.dice_form == DiceForm::Aggregate ? "aggregate" : "per_pixel");
                               }};
        t["loss.seg_term"] = {[](C& c, const std::string& v) {
                                  if (v == "sum") c.loss.seg_term = SegTermForm::SumOverIterations;
                                  else if (v == "final_times_m") c.loss.seg_term = SegTermForm::FinalTimesIterations;
                                  else throw ConfigError("config: loss.seg_term must be sum or final_times_m");
                              },
                              [](const C& c) {
                                  return std::string(c.loss.seg_term == SegTermForm::SumOverIterations ? "sum"
                                                                                                       : "final_times_m");
                              }};

        t["anneal.alpha0"] = number_entry("anneal.alpha0", &C::anneal, &AnnealConfig::alpha0);
        t["anneal.schedule"] = {[](C& c, const std::string& v) {
                                    if (v == "decay") c.anneal.schedule = AnnealSchedule::AsWrittenDecay;
                                    else if (v == "growth") c.anneal.schedule = AnnealSchedule::ReversedGrowth;
                                    else throw ConfigError("config: anneal.schedule must be decay or growth");
                                },
                                [](const C& c) {
                                    return std::string(c.anneal.schedule == AnnealSchedule::AsWrittenDecay ? "decay"
                                                                                                           : "growth");
                                }};
        return t;
    }();
    return table;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, _] : detail::registry()) keys.push_back(k);
    return keys;
}

// Applies one `key=value` assignment. Unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
    const auto& reg = detail::registry();
    const auto it = reg.find(key);
    if (it == reg.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(c, value);
}

inline void apply_assignment(ExperimentConfig& c, const std::string& assignment, const std::string& where) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + assignment + "'");
    try {
        set_config_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
    } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

inline void parse_config_text(ExperimentConfig& c, const std::string& text, const std::string& source = "<config>") {
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        apply_assignment(c, line, source + ":" + std::to_string(n));
    }
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot read " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    ExperimentConfig c;
    parse_config_text(c, buf.str(), path);
    return c;
}

// Every key in sorted order; parsing the dump reproduces the configuration.
inline std::string dump_config(const ExperimentConfig& c) {
    std::string out;
    for (const auto& [k, e] : detail::registry()) out += k + "=" + e.get(c) + "\n";
    return out;
}

// FNV-1a over the dump, printed as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : dump_config(c)) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void validate(const ExperimentConfig& c) {
    validate(c.gen);
    validate(c.model);
    const auto& t = c.train;
    if (t.epochs_stage1 < 1 || t.epochs_stage2 < 0) throw ConfigError("config: need epochs_stage1 >= 1, epochs_stage2 >= 0");
    if (t.iterations < 1 || t.clicks_per_iter < 1 || t.batch_size < 1) {
        throw ConfigError("config: iterations, clicks_per_iter and batch_size must be >= 1");
    }
    if (!(t.lr > 0.0)) throw ConfigError("config: train.lr must be > 0");
    if (t.weight_decay < 0.0) throw ConfigError("config: train.weight_decay must be >= 0");
    if (!(t.val_fraction > 0.0 && t.val_fraction < 1.0)) throw ConfigError("config: train.val_fraction must be in (0,1)");
    if (!(c.prompt.sigma > 0.0)) throw ConfigError("config: prompt.sigma must be > 0");
    if (c.model.num_classes != 2) throw ConfigError("config: binary masks need model.num_classes=2");
    if (!(c.anneal.alpha0 > 0.0 && c.anneal.alpha0 <= 1.0)) throw ConfigError("config: anneal.alpha0 must be in (0,1]");
    const std::size_t multiple = std::size_t{1} << c.model.depth;
    if (c.gen.rows % multiple != 0 || c.gen.cols % multiple != 0) {
        throw ConfigError("config: gen.rows and gen.cols must be divisible by 2^model.depth = " + std::to_string(multiple));
    }
}

}  // namespace evseg
