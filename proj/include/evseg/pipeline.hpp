#pragma once

#include "evseg/config.hpp"
#include "evseg/evidential.hpp"
#include "evseg/losses.hpp"
#include "evseg/metrics.hpp"
#include "evseg/model.hpp"
#include "evseg/prompts.hpp"
#include "evseg/synthdata.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace evseg {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---- data split ----

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

// Seeded shuffle; the first round(n * val_fraction) indices (at least one) validate. Both lists
// are returned in ascending order.
inline Split split_dataset(std::size_t n, double val_fraction, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("split: need at least 2 samples");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto nval = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(double(n) * val_fraction)), 1, n - 1);
    Split s{std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end()),
            std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval))};
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

inline ad::Array image_tensor(const Sample& s) { return ad::Array(ad::Shape{1, s.image.rows, s.image.cols}, s.image.data); }

inline ad::Array empty_clicks(std::size_t rows, std::size_t cols) { return ad::Array(ad::Shape{2, rows, cols}, 0.0); }

// ---- run record ----

struct EpochRecord {
    int epoch = 0;
    double loss_ce = 0, loss_ceu = 0, loss_kl = 0, loss_dice = 0;
    double val_dice = 0, val_jaccard = 0, val_hd95 = 0, auroc = 0;
};

inline std::string format_record(const EpochRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "epoch=%d loss_ce=%.17g loss_ceu=%.17g loss_kl=%.17g loss_dice=%.17g val_dice=%.17g "
                  "val_jaccard=%.17g val_hd95=%.17g auroc=%.17g",
                  r.epoch, r.loss_ce, r.loss_ceu, r.loss_kl, r.loss_dice, r.val_dice, r.val_jaccard, r.val_hd95,
                  r.auroc);
    return buf;
}

// Append-only. Wall-clock time is kept out of the serialized form so that two identical runs
// produce identical files.
struct RunRecord {
    std::string config_hash;
    std::vector<EpochRecord> epochs;
    double wall_seconds = 0.0;

    std::string to_text() const {
        std::string out = "# config_hash=" + config_hash + "\n";
        for (const auto& e : epochs) out += format_record(e) + "\n";
        return out;
    }
};

// ---- inference ----

struct Prediction {
    BinaryMask mask;
    FloatMap uncertainty;
    std::size_t head = 0;
};

// Without ground truth the head with the lowest mean uncertainty is used.
inline std::size_t least_uncertain_head(const std::vector<EvidentialOutputs>& outs) {
    std::size_t best = 0;
    double best_u = 0.0;
    for (std::size_t k = 0; k < outs.size(); ++k) {
        const auto& u = outs[k].uncertainty.value().data;
        const double mean = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size());
        if (k == 0 || mean < best_u) {
            best = k;
            best_u = mean;
        }
    }
    return best;
}

inline std::vector<EvidentialOutputs> head_outputs(const std::vector<ad::Var>& logits, EvidenceActivation act) {
    std::vector<EvidentialOutputs> outs;
    outs.reserve(logits.size());
    for (const auto& l : logits) outs.push_back(evidential_outputs(l, act));
    return outs;
}

inline Prediction prediction_of(const EvidentialOutputs& head, std::size_t index) {
    return {foreground_mask(predicted_labels(head)), to_plane(head.uncertainty.value()), index};
}

inline Prediction predict_from_logits(const std::vector<ad::Var>& logits, EvidenceActivation act) {
    const auto outs = head_outputs(logits, act);
    const std::size_t k = least_uncertain_head(outs);
    return prediction_of(outs[k], k);
}

inline Prediction predict(const SegModel& m, const Sample& s, const ClickSet& clicks, EvidenceActivation act,
                          double sigma = kDefaultClickSigma) {
    ad::Tape t;
    const auto b = bind(m, t, false);
    const auto logits = forward(b, t.constant(image_tensor(s)), t.constant(rasterize(clicks, s.image.rows, s.image.cols, sigma)));
    return predict_from_logits(logits, act);
}

// Uncertainty map of the stage-I view: the network with empty click channels.
inline FloatMap uncertainty_map(const SegModel& m, const Sample& s, EvidenceActivation act) {
    return predict(m, s, ClickSet{}, act).uncertainty;
}

struct ValidationResult {
    metrics::MetricsReport report;
    double auroc = 0.0;
};

// Zero-click predictions on the given samples; AUROC pools every pixel of every sample.
inline ValidationResult validate_model(const SegModel& m, const std::vector<Sample>& data,
                                       const std::vector<std::size_t>& indices, EvidenceActivation act) {
    std::vector<BinaryMask> preds, gts;
    std::vector<double> scores;
    std::vector<std::uint8_t> errors;
    for (std::size_t i : indices) {
        const Prediction p = predict(m, data[i], ClickSet{}, act);
        const auto err = metrics::error_indicator(p.mask, data[i].mask);
        scores.insert(scores.end(), p.uncertainty.data.begin(), p.uncertainty.data.end());
        errors.insert(errors.end(), err.begin(), err.end());
        preds.push_back(p.mask);
        gts.push_back(data[i].mask);
    }
    ValidationResult r{metrics::summarize(preds, gts), metrics::auroc(scores, errors)};
    r.report.auroc = r.auroc;
    return r;
}

// ---- click selection shared by training and evaluation ----

struct ClickContext {
    const FloatMap* uncertainty = nullptr;  // top-k source
    const BinaryMask* prediction = nullptr;  // random-error source
    const BinaryMask* truth = nullptr;
};

template <class Rng>
SampledPixels select_clicks(SamplerKind kind, const ClickContext& ctx, std::size_t k, const ClickSet& exclude,
                            std::size_t nms_radius, Rng& rng) {
    switch (kind) {
        case SamplerKind::TopK: return sample_topk_uncertainty(*ctx.uncertainty, k, exclude, nms_radius);
        case SamplerKind::RandomError: return sample_random_error(*ctx.prediction, *ctx.truth, k, rng, exclude);
        case SamplerKind::Grid: return sample_grid(ctx.truth->rows, ctx.truth->cols, k, exclude);
    }
    throw std::logic_error("select_clicks: unknown sampler");
}

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(a),
                      static_cast<std::uint32_t>(b), 0xc11cu};
    return std::mt19937_64(seq);
}

// ---- training ----

namespace detail {

struct GradAccumulator {
    std::vector<ad::Array> sum;
    std::size_t count = 0;

    explicit GradAccumulator(const SegModel& m) {
        for (const auto& p : m.params) sum.emplace_back(p.shape, 0.0);
    }
    void add(const ad::Gradients& g, const BoundModel& b) {
        for (std::size_t i = 0; i < sum.size(); ++i) {
            if (!g.has(b.params[i])) continue;
            const ad::Array gi = g[b.params[i]];
            for (std::size_t j = 0; j < gi.size(); ++j) sum[i].data[j] += gi.data[j];
        }
        ++count;
    }
    std::vector<ad::Array> mean_and_reset() {
        std::vector<ad::Array> out = sum;
        for (auto& a : out)
            for (double& v : a.data) v /= static_cast<double>(count);
        for (auto& a : sum) std::fill(a.data.begin(), a.data.end(), 0.0);
        count = 0;
        return out;
    }
};

inline std::size_t selected_head(const std::vector<EvidentialOutputs>& outs, const LabelMap& y) {
    std::vector<ad::Array> probs;
    for (const auto& o : outs) probs.push_back(o.probability.value());
    return confidence_select(probs, y).index;
}

// Every component averaged over the K heads.
inline LossParts mean_over_heads(const std::vector<EvidentialOutputs>& outs, const LabelMap& y, double a_t,
                                 const LossConfig& cfg) {
    LossParts sum = stage1_total(outs[0], y, a_t, cfg);
    for (std::size_t k = 1; k < outs.size(); ++k) {
        const LossParts p = stage1_total(outs[k], y, a_t, cfg);
        sum = {ad::add(sum.total, p.total), ad::add(sum.ce, p.ce), ad::add(sum.ceu, p.ceu), ad::add(sum.kl, p.kl),
               ad::add(sum.dice, p.dice)};
    }
    const double w = 1.0 / static_cast<double>(outs.size());
    return {ad::scale(sum.total, w), ad::scale(sum.ce, w), ad::scale(sum.ceu, w), ad::scale(sum.kl, w),
            ad::scale(sum.dice, w)};
}

struct LossTotals {
    double ce = 0, ceu = 0, kl = 0, dice = 0;
    std::size_t n = 0;
    void add(const LossParts& p, double dice_scale) {
        ce += p.ce.value().item();
        ceu += p.ceu.value().item();
        kl += p.kl.value().item();
        dice += p.dice.value().item() * dice_scale;
        ++n;
    }
};

inline void check_finite(const ad::Var& loss, int epoch, std::size_t batch) {
    if (!std::isfinite(loss.value().item())) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
    }
}

inline EpochRecord close_epoch(int epoch, const LossTotals& t, const ValidationResult& v) {
    const double n = static_cast<double>(std::max<std::size_t>(t.n, 1));
    return EpochRecord{epoch, t.ce / n, t.ceu / n, t.kl / n, t.dice / n, v.report.dice, v.report.jaccard, v.report.hd95,
                       v.auroc};
}

inline std::vector<LabelMap> labels_of(const std::vector<Sample>& data) {
    std::vector<LabelMap> y;
    for (const auto& s : data) y.push_back(one_hot(s.mask));
    return y;
}

}  // namespace detail

struct TrainState {
    SegModel model;
    Split split;
    std::vector<Prediction> maps;  // stage-I view outputs per dataset index (training samples only)
    RunRecord record;
};

using ProgressSink = std::ostream*;

inline void refresh_maps(TrainState& st, const std::vector<Sample>& data, EvidenceActivation act) {
    st.maps.assign(data.size(), Prediction{});
    for (std::size_t i : st.split.train) st.maps[i] = predict(st.model, data[i], ClickSet{}, act);
}

inline void report_epoch(ProgressSink log, const char* stage, const EpochRecord& r, double seconds) {
    if (!log) return;
    char buf[256];
    std::snprintf(buf, sizeof buf, "[%s] epoch %d  ce %.4f ceu %.4f kl %.4f dice %.4f | val dice %.4f hd95 %.2f auroc %.4f  (%.1fs)\n",
                  stage, r.epoch, r.loss_ce, r.loss_ceu, r.loss_kl, r.loss_dice, r.val_dice, r.val_hd95, r.auroc, seconds);
    *log << buf << std::flush;
}

// Stage I: evidential training with empty click channels. The head that confidence_select picks
// for each sample carries that sample's loss, or with train.stage1_heads=all every head does.
inline TrainState train_stage1(const std::vector<Sample>& data, const ExperimentConfig& cfg, ProgressSink log = nullptr) {
    validate(cfg);
    if (data.empty()) throw std::invalid_argument("train_stage1: empty dataset");
    const auto start = std::chrono::steady_clock::now();
    TrainState st{init(cfg.model), split_dataset(data.size(), cfg.train.val_fraction, cfg.train.seed), {}, {}};
    st.record.config_hash = config_hash(cfg);
    const auto labels = detail::labels_of(data);
    AdamW opt(st.model, AdamWConfig{cfg.train.lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay});
    const AnnealConfig anneal = cfg.effective_anneal();
    std::mt19937_64 order_rng(cfg.train.seed);

    for (int epoch = 0; epoch < cfg.train.epochs_stage1; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double a_t = annealing_factor(epoch, anneal);
        std::vector<std::size_t> order = st.split.train;
        std::shuffle(order.begin(), order.end(), order_rng);
        detail::GradAccumulator acc(st.model);
        detail::LossTotals totals;
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            const std::size_t i = order[pos];
            ad::Tape tape;
            const auto bound = bind(st.model, tape, true);
            const auto logits = forward(bound, tape.constant(image_tensor(data[i])),
                                        tape.constant(empty_clicks(data[i].image.rows, data[i].image.cols)));
            const auto outs = head_outputs(logits, cfg.evidence);
            const LossParts parts = cfg.train.stage1_all_heads
                                        ? detail::mean_over_heads(outs, labels[i], a_t, cfg.loss)
                                        : stage1_total(outs[detail::selected_head(outs, labels[i])], labels[i], a_t, cfg.loss);
            detail::check_finite(parts.total, epoch + 1, pos / cfg.train.batch_size);
            acc.add(tape.backward(parts.total), bound);
            totals.add(parts, 1.0);
            if (acc.count == cfg.train.batch_size || pos + 1 == order.size()) opt.step(st.model, acc.mean_and_reset());
        }
        const auto val = validate_model(st.model, data, st.split.val, cfg.evidence);
        st.record.epochs.push_back(detail::close_epoch(epoch + 1, totals, val));
        report_epoch(log, "stage1", st.record.epochs.back(),
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    refresh_maps(st, data, cfg.evidence);
    st.record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return st;
}

// Click bookkeeping of one stage-II sample-epoch, exposed for protocol tests.
struct IterationTrace {
    std::size_t sample = 0;
    std::vector<ClickSet> per_iteration;
    bool shortfall = false;
};

// Stage II: M click iterations per sample on cached encoder features, loss stage2_total, then
// weight sync into the stage-I view and map regeneration at every epoch end.
inline TrainState train_stage2(const std::vector<Sample>& data, TrainState st, const ExperimentConfig& cfg,
                               ProgressSink log = nullptr, std::vector<std::vector<IterationTrace>>* traces = nullptr) {
    validate(cfg);
    if (st.maps.size() != data.size()) throw std::invalid_argument("train_stage2: stage-I maps missing");
    const auto start = std::chrono::steady_clock::now();
    const auto labels = detail::labels_of(data);
    AdamW opt(st.model, AdamWConfig{cfg.train.lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay});
    const AnnealConfig anneal = cfg.effective_anneal();
    std::mt19937_64 order_rng(cfg.train.seed + 1);
    SegModel view = st.model;  // stage-I view, synchronised by weight export/import
    const std::size_t M = cfg.train.iterations;

    for (int e = 0; e < cfg.train.epochs_stage2; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        const int epoch = cfg.train.epochs_stage1 + e;
        const double a_t = annealing_factor(epoch, anneal);
        std::vector<std::size_t> order = st.split.train;
        std::shuffle(order.begin(), order.end(), order_rng);
        detail::GradAccumulator acc(st.model);
        detail::LossTotals totals;
        std::vector<IterationTrace> epoch_traces;
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            const std::size_t i = order[pos];
            const Sample& s = data[i];
            auto rng = stream_rng(cfg.train.seed, static_cast<std::uint64_t>(epoch), i);
            ad::Tape tape;
            const auto bound = bind(st.model, tape, true);
            const auto features = encode(bound, tape.constant(image_tensor(s)));
            ClickSet clicks;
            FloatMap map = st.maps[i].uncertainty;
            BinaryMask pred = st.maps[i].mask;
            std::vector<ad::Var> segs;
            std::vector<EvidentialOutputs> outs;
            std::size_t chosen = 0;
            IterationTrace trace;
            trace.sample = i;
            for (std::size_t m = 0; m < M; ++m) {
                const ClickContext ctx{&map, &pred, &s.mask};
                const auto picked = select_clicks(cfg.prompt.sampler, ctx, cfg.train.clicks_per_iter, clicks,
                                                  cfg.prompt.nms_radius, rng);
                trace.shortfall |= picked.shortfall;
                const ClickSet added = assign_polarity(picked.pixels, s.mask);
                clicks.append(added);
                trace.per_iteration.push_back(added);
                const auto logits =
                    decode(bound, features, tape.constant(rasterize(clicks, s.image.rows, s.image.cols, cfg.prompt.sigma)));
                outs = head_outputs(logits, cfg.evidence);
                std::vector<ad::Array> probs;
                for (const auto& o : outs) probs.push_back(o.probability.value());
                chosen = confidence_select(probs, labels[i]).index;
                segs.push_back(bayes_dice(outs[chosen].probability, labels[i], cfg.loss.weights, cfg.loss.dice_form));
                pred = foreground_mask(predicted_labels(outs[chosen]));
                if (cfg.prompt.refresh_in_loop) map = to_plane(outs[chosen].uncertainty.value());
            }
            const LossParts parts = stage2_total(segs, outs[chosen], labels[i], a_t, cfg.loss);
            detail::check_finite(parts.total, epoch + 1, pos / cfg.train.batch_size);
            acc.add(tape.backward(parts.total), bound);
            totals.add(parts, 1.0 / static_cast<double>(M));
            if (traces) epoch_traces.push_back(std::move(trace));
            if (acc.count == cfg.train.batch_size || pos + 1 == order.size()) opt.step(st.model, acc.mean_and_reset());
        }
        import_weights(view, export_weights(st.model));
        st.maps.assign(data.size(), Prediction{});
        for (std::size_t i : st.split.train) st.maps[i] = predict(view, data[i], ClickSet{}, cfg.evidence);
        const auto val = validate_model(view, data, st.split.val, cfg.evidence);
        st.record.epochs.push_back(detail::close_epoch(epoch + 1, totals, val));
        if (traces) traces->push_back(std::move(epoch_traces));
        report_epoch(log, "stage2", st.record.epochs.back(),
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    st.record.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return st;
}

// ---- evaluation ----

struct EvalOptions {
    SamplerKind sampler = SamplerKind::TopK;
    std::vector<std::size_t> budgets{1};     // clicks added per iteration
    std::vector<std::size_t> iterations{1};  // M
    std::vector<std::uint64_t> seeds{1};
    std::size_t nms_radius = 2;
    double sigma = kDefaultClickSigma;
    bool refresh_in_loop = false;
};

struct EvalCell {
    SamplerKind sampler = SamplerKind::TopK;
    std::size_t budget = 0;
    std::size_t iterations = 0;
    double dice_mean = 0, dice_std = 0;
    double jaccard_mean = 0, jaccard_std = 0;
    double hd95_mean = 0, hd95_std = 0;
    std::vector<double> dice_per_seed;  // mean over samples for each seed
    std::vector<metrics::MetricsReport> per_seed;
    std::size_t shortfalls = 0;
};

struct EvalPanel {
    std::size_t index = 0;
    FloatMap image;
    BinaryMask truth;
    BinaryMask prediction;
    FloatMap uncertainty;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    const double m = metrics::mean_of(v);
    if (v.size() < 2) return {m, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

// One row per (budget, M). Budget b adds b clicks per iteration; top-k reads the empty-click
// uncertainty map (frozen unless refresh_in_loop), random-error reads the latest prediction.
// Budget 0 is the plain empty-click forward pass.
inline std::vector<EvalCell> evaluate(const SegModel& model, const std::vector<Sample>& samples, EvidenceActivation act,
                                      const EvalOptions& opt, std::vector<EvalPanel>* panels = nullptr) {
    if (opt.budgets.empty() || opt.iterations.empty() || opt.seeds.empty()) {
        throw std::invalid_argument("evaluate: budgets, iterations and seeds must be non-empty");
    }
    std::vector<EvalCell> cells;
    for (std::size_t b : opt.budgets) {
        if (b == 0) {
            cells.push_back(EvalCell{opt.sampler, 0, 0});  // no clicks, so M is irrelevant
            continue;
        }
        for (std::size_t M : opt.iterations) cells.push_back(EvalCell{opt.sampler, b, M});
    }

    // preds[cell][seed][sample]
    std::vector<std::vector<std::vector<BinaryMask>>> preds(cells.size(),
                                                            std::vector<std::vector<BinaryMask>>(opt.seeds.size()));
    std::vector<BinaryMask> gts;
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const Sample& s = samples[n];
        gts.push_back(s.mask);
        ad::Tape tape;
        const auto bound = bind(model, tape, false);
        const auto features = encode(bound, tape.constant(image_tensor(s)));
        const Prediction base =
            predict_from_logits(decode(bound, features, tape.constant(empty_clicks(s.image.rows, s.image.cols))), act);
        for (std::size_t c = 0; c < cells.size(); ++c) {
            for (std::size_t si = 0; si < opt.seeds.size(); ++si) {
                if (cells[c].budget == 0) {
                    preds[c][si].push_back(base.mask);
                    continue;
                }
                auto rng = stream_rng(opt.seeds[si], 0xe7a1u, s.index);
                ClickSet clicks;
                FloatMap map = base.uncertainty;
                Prediction current = base;
                for (std::size_t m = 0; m < cells[c].iterations; ++m) {
                    const ClickContext ctx{&map, &current.mask, &s.mask};
                    const auto picked = select_clicks(opt.sampler, ctx, cells[c].budget, clicks, opt.nms_radius, rng);
                    cells[c].shortfalls += picked.shortfall;
                    clicks.append(assign_polarity(picked.pixels, s.mask));
                    current = predict_from_logits(
                        decode(bound, features, tape.constant(rasterize(clicks, s.image.rows, s.image.cols, opt.sigma))), act);
                    if (opt.refresh_in_loop) map = current.uncertainty;
                }
                preds[c][si].push_back(current.mask);
                if (panels && c == 0 && si == 0) {
                    panels->push_back(EvalPanel{s.index, s.image, s.mask, current.mask, base.uncertainty});
                }
            }
        }
        if (panels && cells[0].budget == 0) panels->push_back(EvalPanel{s.index, s.image, s.mask, base.mask, base.uncertainty});
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
        std::vector<double> d, j, h;
        for (std::size_t si = 0; si < opt.seeds.size(); ++si) {
            auto rep = metrics::summarize(preds[c][si], gts);
            d.push_back(rep.dice);
            j.push_back(rep.jaccard);
            h.push_back(rep.hd95);
            cells[c].per_seed.push_back(std::move(rep));
        }
        cells[c].dice_per_seed = d;
        std::tie(cells[c].dice_mean, cells[c].dice_std) = detail::mean_std(d);
        std::tie(cells[c].jaccard_mean, cells[c].jaccard_std) = detail::mean_std(j);
        std::tie(cells[c].hd95_mean, cells[c].hd95_std) = detail::mean_std(h);
    }
    return cells;
}

inline std::vector<Sample> subset(const std::vector<Sample>& data, const std::vector<std::size_t>& indices) {
    std::vector<Sample> out;
    for (std::size_t i : indices) out.push_back(data[i]);
    return out;
}

}  // namespace evseg
