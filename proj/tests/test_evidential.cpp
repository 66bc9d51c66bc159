#include "evseg/evidential.hpp"
#include "evseg/testing/oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace evseg;
using evseg::ad::Array;
using evseg::ad::Shape;
using evseg::ad::Tape;
using evseg::ad::Var;

namespace {

// One pixel, N classes: values laid out as [N,1,1].
Array pixel(std::vector<double> v) {
    const std::size_t n = v.size();
    return Array(Shape{n, 1, 1}, std::move(v));
}

}  // namespace

TEST(Evidence, ReluOfLogits) {
    Tape t;
    EXPECT_EQ(evidence_from_logits(t.constant(pixel({-3, 2}))).value().data, (std::vector<double>{0, 2}));
    EXPECT_EQ(evidence_from_logits(t.constant(pixel({0, 0}))).value().data, (std::vector<double>{0, 0}));
    EXPECT_EQ(evidence_from_logits(t.constant(pixel({0.5, -0.5}))).value().data, (std::vector<double>{0.5, 0}));
}

TEST(Evidence, AlternativeActivationsAreNonNegative) {
    Tape t;
    Var logits = t.constant(pixel({-30, 0, 4}));
    for (auto a : {EvidenceActivation::Softplus, EvidenceActivation::Exp}) {
        for (double v : evidence_from_logits(logits, a).value().data) EXPECT_GE(v, 0.0);
    }
    EXPECT_EQ(parse_activation("softplus"), EvidenceActivation::Softplus);
    EXPECT_THROW(parse_activation("tanh"), std::invalid_argument);
}

TEST(Dirichlet, FromEvidence) {
    Tape t;
    auto d0 = dirichlet_from_evidence(t.constant(pixel({0, 0})));
    EXPECT_EQ(d0.alpha.value().data, (std::vector<double>{1, 1}));
    EXPECT_EQ(d0.strength.value().item(), 2.0);
    auto d1 = dirichlet_from_evidence(t.constant(pixel({1, 3})));
    EXPECT_EQ(d1.alpha.value().data, (std::vector<double>{2, 4}));
    EXPECT_EQ(d1.strength.value().item(), 6.0);
    EXPECT_EQ(dirichlet_from_evidence(t.constant(pixel({998, 0}))).strength.value().item(), 1000.0);
}

TEST(Dirichlet, BeliefAndUncertainty) {
    Tape t;
    auto zero = belief_and_uncertainty(dirichlet_from_evidence(t.constant(pixel({0, 0}))));
    EXPECT_EQ(zero.belief.value().data, (std::vector<double>{0, 0}));
    EXPECT_EQ(zero.uncertainty.value().item(), 1.0);

    auto some = belief_and_uncertainty(dirichlet_from_evidence(t.constant(pixel({1, 3}))));
    EXPECT_NEAR(some.belief.value()[0], 1.0 / 6.0, 1e-15);
    EXPECT_NEAR(some.belief.value()[1], 0.5, 1e-15);
    EXPECT_NEAR(some.uncertainty.value().item(), 1.0 / 3.0, 1e-15);

    auto strong = belief_and_uncertainty(dirichlet_from_evidence(t.constant(pixel({998, 0}))));
    EXPECT_NEAR(strong.uncertainty.value().item(), 0.002, 1e-15);
}

TEST(Dirichlet, ExpectedProbability) {
    Tape t;
    EXPECT_EQ(expected_probability(dirichlet_from_evidence(t.constant(pixel({0, 0})))).value().data,
              (std::vector<double>{0.5, 0.5}));
    auto p = expected_probability(dirichlet_from_evidence(t.constant(pixel({1, 3})))).value();
    EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(p[1], 2.0 / 3.0, 1e-15);
    for (double v : expected_probability(dirichlet_from_evidence(t.constant(pixel({0, 0, 0})))).value().data) {
        EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    }
}

TEST(Dirichlet, MassConservationOnRandomEvidence) {
    std::mt19937_64 rng(11);
    std::exponential_distribution<double> ev(0.1);
    Tape t;
    Array e(Shape{3, 16, 16});
    for (double& v : e.data) v = ev(rng);
    auto out = evidential_outputs(t.constant(e));
    const Array& b = out.belief.value();
    const Array& u = out.uncertainty.value();
    const Array& p = out.probability.value();
    for (std::size_t i = 0; i < 256; ++i) {
        double total = u[i], psum = 0.0;
        for (std::size_t n = 0; n < 3; ++n) {
            total += b[n * 256 + i];
            psum += p[n * 256 + i];
            EXPECT_GE(b[n * 256 + i], 0.0);
            EXPECT_LT(b[n * 256 + i], 1.0);
        }
        EXPECT_NEAR(total, 1.0, 1e-10);
        EXPECT_NEAR(psum, 1.0, 1e-10);
        EXPECT_GT(u[i], 0.0);
        EXPECT_LE(u[i], 1.0);
    }
}

TEST(Dirichlet, UncertaintyStrictlyDecreasesWithEvidence) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ev(0.0, 20.0), bump(1e-6, 5.0);
    std::uniform_int_distribution<int> cls(0, 1);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> e{ev(rng), ev(rng)};
        Tape t;
        const double before = belief_and_uncertainty(dirichlet_from_evidence(t.constant(pixel(e)))).uncertainty.value().item();
        e[static_cast<std::size_t>(cls(rng))] += bump(rng);
        const double after = belief_and_uncertainty(dirichlet_from_evidence(t.constant(pixel(e)))).uncertainty.value().item();
        EXPECT_LT(after, before);
    }
}

TEST(Dirichlet, ArgmaxAgreesAcrossRepresentations) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> logit(-2.0, 6.0);
    for (int trial = 0; trial < 200; ++trial) {
        Array l(Shape{3, 1, 1});
        for (double& v : l.data) v = logit(rng);
        Tape t;
        auto out = evidential_outputs(t.constant(l));
        const auto& e = out.evidence.value();
        const double top = std::max({e[0], e[1], e[2]});
        if (std::count(e.data.begin(), e.data.end(), top) != 1) continue;
        const int from_e = argmax_classes(e)(0, 0);
        EXPECT_EQ(argmax_classes(out.probability.value())(0, 0), from_e);
        EXPECT_EQ(argmax_classes(out.dirichlet.alpha.value())(0, 0), from_e);
    }
}

TEST(DirichletSampler, DrawsLieOnSimplex) {
    std::mt19937_64 rng(1);
    std::vector<double> alpha{1.5, 2.0, 7.0};
    for (int i = 0; i < 1000; ++i) {
        auto p = sample_dirichlet(std::span<const double>(alpha), rng);
        double s = 0.0;
        for (double v : p) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(DirichletSampler, RejectsAlphaBelowOne) {
    std::mt19937_64 rng(1);
    std::vector<double> alpha{0.5, 2.0};
    EXPECT_THROW(sample_dirichlet(std::span<const double>(alpha), rng), std::invalid_argument);
}

TEST(DirichletSampler, MonteCarloMeanMatchesExpectedProbability) {
    const std::vector<std::vector<double>> grid{{1, 1}, {2, 4}, {5, 1}, {3, 3, 3}, {1.05, 7.5}};
    std::mt19937_64 rng(2024);
    for (const auto& alpha : grid) {
        auto mc = oracle::dirichlet_mean_monte_carlo(std::span<const double>(alpha), 100000, rng);
        Tape t;
        std::vector<double> e;
        for (double a : alpha) e.push_back(a - 1.0);
        auto p = expected_probability(dirichlet_from_evidence(t.constant(pixel(e)))).value();
        for (std::size_t n = 0; n < alpha.size(); ++n) {
            EXPECT_LE(std::abs(mc[n].mean - p[n]), 3.0 * mc[n].standard_error)
                << "alpha[" << n << "]=" << alpha[n] << " mc " << mc[n].mean << " closed form " << p[n];
        }
    }
}
