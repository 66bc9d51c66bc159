#pragma once

#include "evseg/autodiff/tape.hpp"
#include "evseg/evidential.hpp"
#include "evseg/plane.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace evseg {

// One-hot labels, [N,H,W].
using LabelMap = ad::Array;

inline LabelMap one_hot(const Plane<int>& labels, std::size_t classes) {
    LabelMap y(ad::Shape{classes, labels.rows, labels.cols}, 0.0);
    for (std::size_t r = 0; r < labels.rows; ++r) {
        for (std::size_t c = 0; c < labels.cols; ++c) {
            const int k = labels(r, c);
            if (k < 0 || static_cast<std::size_t>(k) >= classes) throw std::invalid_argument("one_hot: label out of range");
            y.at(static_cast<std::size_t>(k), r, c) = 1.0;
        }
    }
    return y;
}

// Binary mask -> two-class one-hot (class 1 is foreground).
inline LabelMap one_hot(const BinaryMask& mask, std::size_t classes = 2) {
    Plane<int> labels(mask.rows, mask.cols, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) labels.data[i] = mask.data[i] ? 1 : 0;
    return one_hot(labels, classes);
}

inline Plane<int> label_indices(const LabelMap& y) { return argmax_classes(y); }

enum class AnnealSchedule { AsWrittenDecay, ReversedGrowth };

struct AnnealConfig {
    double alpha0 = 1.0;
    int total_epochs = 100;
    AnnealSchedule schedule = AnnealSchedule::AsWrittenDecay;
};

inline double annealing_factor(int epoch, const AnnealConfig& cfg) {
    if (!(cfg.alpha0 > 0.0 && cfg.alpha0 <= 1.0)) throw std::invalid_argument("annealing: alpha0 must lie in (0, 1]");
    if (cfg.total_epochs < 1) throw std::invalid_argument("annealing: total epochs must be >= 1");
    if (epoch < 0 || epoch > cfg.total_epochs) throw std::invalid_argument("annealing: epoch outside [0, T]");
    const double ratio = static_cast<double>(epoch) / static_cast<double>(cfg.total_epochs);
    if (cfg.schedule == AnnealSchedule::AsWrittenDecay) return cfg.alpha0 * std::exp(-ratio);
    const double grown = cfg.alpha0 * (1.0 - std::exp(-ratio)) / (1.0 - std::exp(-1.0));
    return std::clamp(grown, 0.0, cfg.alpha0);
}

struct LossWeights {
    double lambda1 = 0.2;
    double lambda2 = 1.0;
    double beta1 = 1e-5;
    double beta2 = 1e-5;
};

enum class DiceForm { Aggregate, PerPixel };
enum class SegTermForm { SumOverIterations, FinalTimesIterations };

struct LossConfig {
    LossWeights weights;
    DiceForm dice_form = DiceForm::Aggregate;
    SegTermForm seg_term = SegTermForm::SumOverIterations;
    bool ceu_enabled = true;
};

namespace detail {

inline void require_label_shape(const ad::Var& v, const LabelMap& y, const char* what) {
    if (v.shape() != y.shape) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + ad::to_string(v.shape()) + " vs labels " +
                                    ad::to_string(y.shape));
    }
}

inline double pixel_count(const LabelMap& y) { return static_cast<double>(y.shape[1] * y.shape[2]); }

inline ad::Array channel(const LabelMap& y, std::size_t n) {
    const std::size_t plane = y.shape[1] * y.shape[2];
    return ad::Array(ad::Shape{y.shape[1], y.shape[2]},
                     std::vector<double>(y.data.begin() + static_cast<long>(n * plane),
                                         y.data.begin() + static_cast<long>((n + 1) * plane)));
}

}  // namespace detail

// Pixel mean of sum_n y_n (digamma(S) - digamma(alpha_n)).
inline ad::Var expected_ce(const DirichletMap& d, const LabelMap& y) {
    detail::require_label_shape(d.alpha, y, "expected_ce");
    ad::Var labels = ad::constant_like(d.alpha, y);
    ad::Var psi_s = ad::broadcast_axis0(ad::digamma(d.strength), d.classes());
    ad::Var per_class = ad::mul(labels, ad::sub(psi_s, ad::digamma(d.alpha)));
    return ad::scale(ad::sum(per_class), 1.0 / detail::pixel_count(y));
}

inline BinaryMask correctness_mask(const Plane<int>& predicted, const LabelMap& y) {
    const Plane<int> truth = label_indices(y);
    require_same_shape(predicted, truth, "correctness_mask");
    BinaryMask m(truth.rows, truth.cols, 0);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = predicted.data[i] == truth.data[i];
    return m;
}

// Calibration loss: correct pixels are pushed toward low uncertainty with weight a_t,
// incorrect ones toward high uncertainty with weight 1 - a_t. The correctness mask is a constant.
inline ad::Var ceu_loss(const ad::Var& belief, const ad::Var& uncertainty, const Plane<int>& predicted,
                        const LabelMap& y, double a_t) {
    detail::require_label_shape(belief, y, "ceu_loss");
    const BinaryMask correct = correctness_mask(predicted, y);
    ad::Array correct_w(uncertainty.shape()), wrong_w(uncertainty.shape());
    for (std::size_t i = 0; i < correct.size(); ++i) {
        correct_w.data[i] = correct.data[i] ? 1.0 : 0.0;
        wrong_w.data[i] = correct.data[i] ? 0.0 : 1.0;
    }
    ad::Var u = ad::clamp(uncertainty, kProbEpsilon, 1.0 - kProbEpsilon);
    ad::Var belief_sum = ad::sum_axis0(belief);
    ad::Var disbelief_sum = ad::sum_axis0(ad::one_minus(belief));

    ad::Var confident = ad::sum(ad::mul(ad::constant_like(u, correct_w), ad::mul(belief_sum, ad::log(ad::one_minus(u)))));
    ad::Var doubtful = ad::sum(ad::mul(ad::constant_like(u, wrong_w), ad::mul(disbelief_sum, ad::log(u))));
    ad::Var total = ad::add(ad::scale(confident, a_t), ad::scale(doubtful, 1.0 - a_t));
    return ad::scale(total, -1.0 / detail::pixel_count(y));
}

// KL(Dir(alpha~) || Dir(1)) with alpha~ = y + (1 - y) * alpha, averaged over pixels.
inline ad::Var kl_to_uniform(const DirichletMap& d, const LabelMap& y) {
    detail::require_label_shape(d.alpha, y, "kl_to_uniform");
    ad::Array off_label(y.shape);
    for (std::size_t i = 0; i < y.size(); ++i) off_label.data[i] = 1.0 - y.data[i];
    ad::Var adjusted = ad::add(ad::mul(d.alpha, ad::constant_like(d.alpha, off_label)), ad::constant_like(d.alpha, y));
    ad::Var adjusted_sum = ad::sum_axis0(adjusted);
    const std::size_t n = d.classes();

    ad::Var log_norm = ad::sub(ad::add_scalar(ad::lgamma(adjusted_sum), -ad::special::log_gamma(static_cast<double>(n))),
                               ad::sum_axis0(ad::lgamma(adjusted)));
    ad::Var psi_gap = ad::sub(ad::digamma(adjusted), ad::broadcast_axis0(ad::digamma(adjusted_sum), n));
    ad::Var moment = ad::sum_axis0(ad::mul(ad::add_scalar(adjusted, -1.0), psi_gap));
    return ad::scale(ad::sum(ad::add(log_norm, moment)), 1.0 / detail::pixel_count(y));
}

// Soft dice on expected probabilities, averaged over the non-background classes.
inline ad::Var bayes_dice(const ad::Var& probability, const LabelMap& y, const LossWeights& w,
                          DiceForm form = DiceForm::Aggregate) {
    detail::require_label_shape(probability, y, "bayes_dice");
    const std::size_t n = y.shape[0];
    if (n < 2) throw std::invalid_argument("bayes_dice: need a background and at least one foreground class");
    ad::Var total;
    for (std::size_t k = 1; k < n; ++k) {
        ad::Var p = ad::select_axis0(probability, k);
        const ad::Array yk = detail::channel(y, k);
        ad::Var labels = ad::constant_like(p, yk);
        ad::Var overlap = ad::scale(ad::mul(p, labels), 2.0);
        ad::Var loss;
        if (form == DiceForm::Aggregate) {
            double label_mass = 0.0;
            for (double v : yk.data) label_mass += v;
            ad::Var numer = ad::add_scalar(ad::sum(overlap), w.beta1);
            ad::Var denom = ad::add_scalar(ad::sum(p), label_mass + w.beta2);
            loss = ad::one_minus(ad::div(numer, denom));
        } else {
            ad::Var numer = ad::add_scalar(overlap, w.beta1);
            ad::Var denom = ad::add_scalar(ad::add(p, labels), w.beta2);
            loss = ad::one_minus(ad::sum(ad::div(numer, denom)));
        }
        total = total.valid() ? ad::add(total, loss) : loss;
    }
    return ad::scale(total, 1.0 / static_cast<double>(n - 1));
}

struct LossParts {
    ad::Var total;
    ad::Var ce;
    ad::Var ceu;
    ad::Var kl;
    ad::Var dice;  // stage II: sum of per-iteration segmentation losses
};

inline Plane<int> predicted_labels(const EvidentialOutputs& head) { return argmax_classes(head.probability.value()); }

// L_CE + L_CEU + lambda1 L_KL + lambda2 L_Dice.
inline LossParts stage1_total(const EvidentialOutputs& head, const LabelMap& y, double a_t, const LossConfig& cfg) {
    LossParts parts;
    parts.ce = expected_ce(head.dirichlet, y);
    parts.ceu = cfg.ceu_enabled ? ceu_loss(head.belief, head.uncertainty, predicted_labels(head), y, a_t)
                                : ad::constant_like(head.dirichlet.alpha, ad::Array::scalar(0.0));
    parts.kl = kl_to_uniform(head.dirichlet, y);
    parts.dice = bayes_dice(head.probability, y, cfg.weights, cfg.dice_form);
    parts.total = ad::add(ad::add(parts.ce, parts.ceu),
                          ad::add(ad::scale(parts.kl, cfg.weights.lambda1), ad::scale(parts.dice, cfg.weights.lambda2)));
    return parts;
}

// (sum_m L_seg_m + L_CE + L_CEU + lambda1 L_KL) / M, evidential terms taken from the final
// iteration's selected head.
inline LossParts stage2_total(std::span<const ad::Var> seg_losses, const EvidentialOutputs& final_head,
                              const LabelMap& y, double a_t, const LossConfig& cfg) {
    if (seg_losses.empty()) throw std::invalid_argument("stage2_total: need at least one iteration");
    const double m = static_cast<double>(seg_losses.size());
    LossParts parts;
    if (cfg.seg_term == SegTermForm::SumOverIterations) {
        parts.dice = seg_losses[0];
        for (std::size_t i = 1; i < seg_losses.size(); ++i) parts.dice = ad::add(parts.dice, seg_losses[i]);
    } else {
        parts.dice = ad::scale(seg_losses.back(), m);
    }
    parts.ce = expected_ce(final_head.dirichlet, y);
    parts.ceu = cfg.ceu_enabled
                    ? ceu_loss(final_head.belief, final_head.uncertainty, predicted_labels(final_head), y, a_t)
                    : ad::constant_like(final_head.dirichlet.alpha, ad::Array::scalar(0.0));
    parts.kl = kl_to_uniform(final_head.dirichlet, y);
    ad::Var evidential = ad::add(ad::add(parts.ce, parts.ceu), ad::scale(parts.kl, cfg.weights.lambda1));
    parts.total = ad::scale(ad::add(parts.dice, evidential), 1.0 / m);
    return parts;
}

struct HeadSelection {
    std::size_t index = 0;
    std::vector<double> mse;
};

// Picks the head whose foreground probability (1 - p_background) has the lowest mean squared
// error against the labels. Ties go to the lowest index.
inline HeadSelection confidence_select(std::span<const ad::Array> head_probabilities, const LabelMap& y) {
    if (head_probabilities.empty()) throw std::invalid_argument("confidence_select: no heads");
    const std::size_t plane = y.shape[1] * y.shape[2];
    HeadSelection sel;
    for (std::size_t k = 0; k < head_probabilities.size(); ++k) {
        const ad::Array& p = head_probabilities[k];
        if (p.shape != y.shape) {
            throw std::invalid_argument("confidence_select: shape mismatch " + ad::to_string(p.shape) + " vs " +
                                        ad::to_string(y.shape));
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            const double diff = (1.0 - p.data[i]) - (1.0 - y.data[i]);
            acc += diff * diff;
        }
        sel.mse.push_back(acc / static_cast<double>(plane));
        if (sel.mse[k] < sel.mse[sel.index]) sel.index = k;
    }
    return sel;
}

}  // namespace evseg
