#include "evseg/autodiff/gradcheck.hpp"
#include "evseg/losses.hpp"
#include "evseg/model.hpp"
#include "evseg/prompts.hpp"
#include "evseg/synthdata.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace evseg;
using ad::Array;
using ad::Shape;
using ad::Tape;
using ad::Var;

namespace {

Array image_of(const Sample& s) { return Array(Shape{1, s.image.rows, s.image.cols}, s.image.data); }

Array zero_clicks(std::size_t h, std::size_t w) { return Array(Shape{2, h, w}, 0.0); }

std::vector<Array> run(const SegModel& m, const Array& image, const Array& clicks) {
    Tape t;
    auto b = bind(m, t, false);
    std::vector<Array> out;
    for (const auto& v : forward(b, t.constant(image), t.constant(clicks))) out.push_back(v.value());
    return out;
}

double stage1_loss(const SegModel& m, const Array& image, const LabelMap& y) {
    Tape t;
    auto b = bind(m, t, false);
    auto heads = forward(b, t.constant(image), t.constant(zero_clicks(image.shape[1], image.shape[2])));
    return stage1_total(evidential_outputs(heads[0]), y, 0.5, LossConfig{}).total.value().item();
}

std::vector<Array> stage1_grads(const SegModel& m, const Array& image, const LabelMap& y) {
    Tape t;
    auto b = bind(m, t, true);
    auto heads = forward(b, t.constant(image), t.constant(zero_clicks(image.shape[1], image.shape[2])));
    auto g = t.backward(stage1_total(evidential_outputs(heads[0]), y, 0.5, LossConfig{}).total);
    std::vector<Array> out;
    for (const auto& p : b.params) out.push_back(g[p]);
    return out;
}

}  // namespace

TEST(ModelInit, SeedDeterminesParameters) {
    SegModelConfig c;
    EXPECT_EQ(init(c).params, init(c).params);
    SegModelConfig d = c;
    d.seed = 2;
    EXPECT_NE(init(c).params, init(d).params);
}

TEST(ModelInit, ParameterCountFollowsLayerTable) {
    // base 8, depth 3, N 2, K 3 (see README layer table)
    EXPECT_EQ(parameter_count(SegModelConfig{}), 27846u);
    EXPECT_EQ(init(SegModelConfig{}).parameter_count(), 27846u);
    SegModelConfig one{3, 4, 1, 2, 1, 1};
    // enc0: 4*9+4 + 4*36+4 ; prompt0: 4*18+4 ; head0: 2*4+2
    EXPECT_EQ(parameter_count(one), 40u + 148u + 76u + 10u);
}

TEST(ModelInit, RejectsInvalidConfig) {
    EXPECT_THROW(init(SegModelConfig{3, 8, 3, 1, 3, 1}), std::invalid_argument);
    EXPECT_THROW(init(SegModelConfig{3, 8, 3, 2, 0, 1}), std::invalid_argument);
    EXPECT_THROW(init(SegModelConfig{3, 8, 0, 2, 3, 1}), std::invalid_argument);
}

TEST(ModelForward, ShapesAndFiniteness) {
    const SegModel m = init(SegModelConfig{});
    const auto out = run(m, Array(Shape{1, 16, 24}, 0.0), zero_clicks(16, 24));
    ASSERT_EQ(out.size(), 3u);
    for (const auto& o : out) {
        EXPECT_EQ(o.shape, (Shape{2, 16, 24}));
        for (double v : o.data) EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(ModelForward, DivisibilityError) {
    const SegModel m = init(SegModelConfig{});
    try {
        run(m, Array(Shape{1, 12, 16}, 0.0), zero_clicks(12, 16));
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("divisible by 8"), std::string::npos) << e.what();
    }
}

TEST(ModelForward, CachedEncoderMatchesFullPath) {
    const SegModel m = init(SegModelConfig{});
    const Sample s = generate_sample(GenConfig{}, 3);
    ClickSet clicks;
    clicks.add({20, 20, Polarity::Positive});
    const Array k = rasterize(clicks, 64, 64);

    Tape t;
    auto b = bind(m, t, false);
    const auto features = encode(b, t.constant(image_of(s)));
    decode(b, features, t.constant(zero_clicks(64, 64)));  // an earlier iteration on the same features
    const auto cached = decode(b, features, t.constant(k));
    const auto full = run(m, image_of(s), k);
    for (std::size_t i = 0; i < full.size(); ++i) EXPECT_EQ(cached[i].value(), full[i]);
}

TEST(ModelForward, ClickChannelsReachTheLogits) {
    const SegModel m = init(SegModelConfig{});
    const Sample s = generate_sample(GenConfig{}, 4);
    Array k = zero_clicks(64, 64);
    const auto before = run(m, image_of(s), k);
    k.at(1, 40, 10) = 1.0;
    const auto after = run(m, image_of(s), k);
    bool changed = false;
    for (std::size_t i = 0; i < before.size(); ++i) changed |= before[i] != after[i];
    EXPECT_TRUE(changed);
}

TEST(Weights, ExportImportRoundTrip) {
    SegModelConfig c;
    const SegModel a = init(c);
    c.seed = 9;
    SegModel b = init(c);
    import_weights(b, export_weights(a));
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(export_weights(a), export_weights(b));
    const std::string blob = export_weights(a);
    EXPECT_EQ(blob.substr(0, 6), "EUGW1\n");
    EXPECT_EQ(blob.size(), 6 + config_line(a.config).size() + 8 * 27846);
}

TEST(Weights, ConfigMismatchRejected) {
    const SegModel a = init(SegModelConfig{});
    SegModel deeper = init(SegModelConfig{3, 8, 4, 2, 3, 1});
    EXPECT_THROW(import_weights(deeper, export_weights(a)), std::runtime_error);
    SegModel b = init(SegModelConfig{});
    std::string truncated = export_weights(a);
    truncated.pop_back();
    EXPECT_THROW(import_weights(b, truncated), std::runtime_error);
    EXPECT_THROW(import_weights(b, "XXXX"), std::runtime_error);
}

TEST(Weights, SyncedStageOneViewMatchesEmptyClickMap) {
    SegModelConfig c;
    const SegModel stage2 = init(c);
    c.seed = 77;
    SegModel stage1 = init(c);
    import_weights(stage1, export_weights(stage2));
    const Sample s = generate_sample(GenConfig{}, 5);
    const auto a = run(stage1, image_of(s), zero_clicks(64, 64));
    const auto b = run(stage2, image_of(s), zero_clicks(64, 64));
    for (std::size_t i = 0; i < a.size(); ++i) {
        Tape t;
        EXPECT_EQ(evidential_outputs(t.constant(a[i])).uncertainty.value(),
                  evidential_outputs(t.constant(b[i])).uncertainty.value());
    }
}

TEST(ModelGradients, MatchFiniteDifferencesOnSmallNetwork) {
    const SegModelConfig c{3, 2, 2, 2, 2, 5};
    const SegModel m = init(c);
    GenConfig g;
    g.rows = g.cols = 8;
    g.blobs_min = g.blobs_max = 1;
    const Sample s = generate_sample(g, 1);
    const LabelMap y = one_hot(s.mask);
    ClickSet clicks;
    clicks.add({2, 3, Polarity::Positive});
    const Array k = rasterize(clicks, 8, 8);
    for (std::size_t which : {std::size_t{0}, std::size_t{5}, std::size_t{9}, m.params.size() - 2}) {
        ad::ScalarFunction f = [&](Tape& t, const Var& p) {
            auto b = bind(m, t, false);
            b.params[which] = p;
            auto heads = forward(b, t.constant(image_of(s)), t.constant(k));
            return stage1_total(evidential_outputs(heads[1]), y, 0.4, LossConfig{}).total;
        };
        const auto r = ad::check_gradients(f, m.params[which], 1e-6);
        EXPECT_LE(r.max_relative_error, 1e-4) << m.layout[which].name << " analytic " << r.analytic << " numeric "
                                              << r.numeric;
    }
}

TEST(Optimizer, OneStepIsDeterministic) {
    const SegModel m0 = init(SegModelConfig{});
    const Sample s = generate_sample(GenConfig{}, 6);
    const auto grads = stage1_grads(m0, image_of(s), one_hot(s.mask));
    SegModel a = m0, b = m0;
    AdamW oa(a, AdamWConfig{}), ob(b, AdamWConfig{});
    oa.step(a, grads);
    ob.step(b, stage1_grads(m0, image_of(s), one_hot(s.mask)));
    EXPECT_EQ(a.params, b.params);
    EXPECT_NE(a.params, m0.params);
}

TEST(Optimizer, OneStepDecreasesStageOneLoss) {
    int decreased = 0;
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        SegModelConfig c;
        c.seed = 100 + trial;
        SegModel m = init(c);
        const Sample s = generate_sample(GenConfig{}, trial);
        const Array img = image_of(s);
        const LabelMap y = one_hot(s.mask);
        const double before = stage1_loss(m, img, y);
        AdamW opt(m, AdamWConfig{});
        opt.step(m, stage1_grads(m, img, y));
        decreased += stage1_loss(m, img, y) < before;
    }
    EXPECT_GE(decreased, 19);
}

TEST(Optimizer, RejectsBadLearningRate) {
    const SegModel m = init(SegModelConfig{});
    EXPECT_THROW(AdamW(m, AdamWConfig{0.0}), std::invalid_argument);
}
