#pragma once

#include "evseg/autodiff/tape.hpp"
#include "evseg/plane.hpp"

#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

// Evidential (Dirichlet) view of per-pixel class logits.
//
// Shapes follow [N, H, W] for per-class maps and [H, W] for per-pixel maps:
//   evidence  e = activation(logits) >= 0
//   alpha       = e + 1
//   strength  S = sum_n alpha
//   belief    b = e / S,   uncertainty u = N / S,   so u + sum_n b = 1
//   expected probability p = alpha / S

namespace evseg {

enum class EvidenceActivation { Relu, Softplus, Exp };

inline EvidenceActivation parse_activation(std::string_view name) {
    if (name == "relu") return EvidenceActivation::Relu;
    if (name == "softplus") return EvidenceActivation::Softplus;
    if (name == "exp") return EvidenceActivation::Exp;
    throw std::invalid_argument("unknown evidence activation '" + std::string(name) + "'");
}

inline std::string_view to_string(EvidenceActivation a) {
    switch (a) {
        case EvidenceActivation::Relu: return "relu";
        case EvidenceActivation::Softplus: return "softplus";
        case EvidenceActivation::Exp: return "exp";
    }
    return "relu";
}

// Clamp interval applied to probabilities and uncertainties before any logarithm.
inline constexpr double kProbEpsilon = 1e-7;

struct DirichletMap {
    ad::Var alpha;     // [N,H,W], every entry >= 1
    ad::Var strength;  // [H,W]

    std::size_t classes() const { return alpha.shape()[0]; }
};

struct BeliefAndUncertainty {
    ad::Var belief;       // [N,H,W]
    ad::Var uncertainty;  // [H,W]
};

inline ad::Var evidence_from_logits(const ad::Var& logits, EvidenceActivation activation = EvidenceActivation::Relu) {
    switch (activation) {
        case EvidenceActivation::Relu: return ad::relu(logits);
        case EvidenceActivation::Softplus: return ad::softplus(logits);
        case EvidenceActivation::Exp: return ad::exp(logits);
    }
    return ad::relu(logits);
}

inline DirichletMap dirichlet_from_evidence(const ad::Var& evidence) {
    if (evidence.shape().size() != 3) {
        throw std::invalid_argument("dirichlet_from_evidence: expected [N,H,W], got " + ad::to_string(evidence.shape()));
    }
    ad::Var alpha = ad::add_scalar(evidence, 1.0);
    return {alpha, ad::sum_axis0(alpha)};
}

inline BeliefAndUncertainty belief_and_uncertainty(const DirichletMap& d) {
    const std::size_t n = d.classes();
    ad::Var strength_per_class = ad::broadcast_axis0(d.strength, n);
    ad::Var belief = ad::div(ad::add_scalar(d.alpha, -1.0), strength_per_class);
    ad::Var numer = ad::constant_like(d.strength, ad::Array(d.strength.shape(), static_cast<double>(n)));
    return {belief, ad::div(numer, d.strength)};
}

inline ad::Var expected_probability(const DirichletMap& d) {
    return ad::div(d.alpha, ad::broadcast_axis0(d.strength, d.classes()));
}

// Everything derived from one head's logits.
struct EvidentialOutputs {
    ad::Var evidence;
    DirichletMap dirichlet;
    ad::Var belief;
    ad::Var uncertainty;
    ad::Var probability;
};

inline EvidentialOutputs evidential_outputs(const ad::Var& logits,
                                            EvidenceActivation activation = EvidenceActivation::Relu) {
    EvidentialOutputs out;
    out.evidence = evidence_from_logits(logits, activation);
    out.dirichlet = dirichlet_from_evidence(out.evidence);
    auto bu = belief_and_uncertainty(out.dirichlet);
    out.belief = bu.belief;
    out.uncertainty = bu.uncertainty;
    out.probability = expected_probability(out.dirichlet);
    return out;
}

// Per-pixel argmax over classes of an [N,H,W] array; ties go to the lower class index.
inline Plane<int> argmax_classes(const ad::Array& per_class) {
    const std::size_t n = per_class.shape[0], h = per_class.shape[1], w = per_class.shape[2];
    Plane<int> out(h, w, 0);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            int best = 0;
            for (std::size_t k = 1; k < n; ++k) {
                if (per_class.at(k, r, c) > per_class.at(static_cast<std::size_t>(best), r, c)) best = static_cast<int>(k);
            }
            out(r, c) = best;
        }
    }
    return out;
}

// Foreground = any non-background class.
inline BinaryMask foreground_mask(const Plane<int>& labels) {
    BinaryMask m(labels.rows, labels.cols, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels.data[i] != 0;
    return m;
}

inline FloatMap to_plane(const ad::Array& hw) {
    if (hw.shape.size() != 2) throw std::invalid_argument("to_plane: expected [H,W], got " + ad::to_string(hw.shape));
    return FloatMap(hw.shape[0], hw.shape[1], hw.data);
}

// Draws one probability vector from Dir(alpha) by normalising independent Gamma(alpha_n, 1)
// draws. Only the Monte-Carlo test oracles use this.
template <class Rng>
std::vector<double> sample_dirichlet(std::span<const double> alpha, Rng& rng) {
    std::vector<double> p(alpha.size());
    double total = 0.0;
    for (std::size_t n = 0; n < alpha.size(); ++n) {
        if (!(alpha[n] >= 1.0)) throw std::invalid_argument("sample_dirichlet: alpha must be >= 1");
        std::gamma_distribution<double> gamma(alpha[n], 1.0);
        p[n] = gamma(rng);
        total += p[n];
    }
    for (double& v : p) v /= total;
    return p;
}

}  // namespace evseg
