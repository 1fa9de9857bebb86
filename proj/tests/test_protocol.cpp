#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "facl/protocol.hpp"
#include "test_support.hpp"

using namespace facl;
using facl::testing::random_matrix;

namespace {

DatasetSpec tiny_data() {
    DatasetSpec s;
    s.base_classes = 4;
    s.inc_classes = 4;
    s.sessions = 2;
    s.ways = 2;
    s.shots = 3;
    s.input_dim = 6;
    s.train_per_class = 16;
    s.test_per_class = 5;
    return s;
}

ProtocolConfig tiny_config(const std::string& variant = "facl") {
    ProtocolConfig c;
    c.hidden_dims = {8};
    c.feature_dim = 6;
    c.projection_dim = 4;
    c.epochs_base = 2;
    c.batch = 16;
    c.queue = 32;
    c.variant = parse_variant(variant);
    return c;
}

std::vector<Session> tiny_sessions(std::uint64_t seed = 1) {
    const DatasetSpec spec = tiny_data();
    return split_sessions(gen_synthetic(spec, seed, 3.0), spec, seed);
}

std::vector<std::vector<double>> rows_of(const Tensor& t, const std::vector<std::size_t>& idx) {
    std::vector<std::vector<double>> out;
    for (std::size_t i : idx) out.emplace_back(t.row(i).begin(), t.row(i).end());
    return out;
}

SessionState state_with(const std::vector<int>& classes, const std::vector<std::vector<std::vector<double>>>& slots) {
    SessionState s;
    s.factor = static_cast<int>(slots.front().size());
    s.register_session(classes);
    for (std::size_t c = 0; c < classes.size(); ++c) s.prototypes[classes[c]] = slots[c];
    return s;
}

}  // namespace

TEST(AblationVariant, ParseAndPrint) {
    for (const AblationVariant& v : ablation_grid()) EXPECT_EQ(parse_variant(to_string(v)), v);
    EXPECT_EQ(ablation_grid().size(), 10u);
    EXPECT_EQ(parse_variant("facl"), AblationVariant::full());
    EXPECT_EQ(parse_variant("ce"), AblationVariant::ce_only());
    EXPECT_EQ(to_string(parse_variant("facl@ori+noise")), "ce+sscl+pc+fa@ori+noise");
    EXPECT_THROW(parse_variant("ce+fa"), ValueError);
    EXPECT_THROW(parse_variant("sscl+pc"), ValueError);
    EXPECT_THROW(parse_variant("ce+pc@ori+ori"), ValueError);
    EXPECT_THROW(parse_variant("ce+xyz"), ValueError);
}

TEST(ProtocolConfig, Validation) {
    ProtocolConfig c = tiny_config();
    EXPECT_NO_THROW(c.validate());
    c.delta = 1.5;
    EXPECT_THROW(c.validate(), ValueError);
    c = tiny_config();
    c.transforms = 0;
    EXPECT_THROW(c.validate(), ValueError);
    c.variant = AblationVariant::ce_only();
    EXPECT_NO_THROW(c.validate());
    c.image_channels = 3;
    EXPECT_THROW(c.validate(), ValueError);
}

TEST(TrainBase, LossFallsOnSeparableClasses) {
    Session base;
    base.classes = {0, 1};
    std::mt19937_64 rng(4);
    base.train_rows = random_matrix(40, 6, rng, 0.3);
    for (std::size_t i = 0; i < 40; ++i) {
        base.train_labels.push_back(static_cast<int>(i % 2));
        base.train_rows(i, 0) += i % 2 ? 3.0 : -3.0;
    }
    for (const char* v : {"ce", "facl"}) {
        ProtocolConfig cfg = tiny_config(v);
        cfg.epochs_base = 30;
        cfg.lr = 0.05;
        const auto r = train_base(cfg, base, make_pipeline(cfg, 6));
        ASSERT_EQ(r.epoch_loss.size(), 30u);
        EXPECT_LT(r.epoch_loss.back(), 0.7 * r.epoch_loss.front()) << v;
    }
}

TEST(TrainBase, ZeroEpochsLeavesInitialisation) {
    ProtocolConfig cfg = tiny_config();
    cfg.epochs_base = 0;
    const auto sessions = tiny_sessions();
    const auto r = train_base(cfg, sessions[0], make_pipeline(cfg, 6));
    const ModelParams init = init_params(cfg.encoder_spec(6), cfg.seed, 8, cfg.ema);
    EXPECT_TRUE(r.params.online == init.online);
    EXPECT_EQ(r.params.classifier, init.classifier);
    EXPECT_EQ(r.queue.size(), 0u);
}

TEST(TrainBase, Deterministic) {
    const ProtocolConfig cfg = tiny_config();
    const auto sessions = tiny_sessions();
    const auto a = train_base(cfg, sessions[0], make_pipeline(cfg, 6));
    const auto b = train_base(cfg, sessions[0], make_pipeline(cfg, 6));
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
    EXPECT_EQ(frozen_checksum(a.params, 8), frozen_checksum(b.params, 8));
}

TEST(BuildPrototypes, SingleSampleIsItsNormalisedFeature) {
    const ProtocolConfig cfg = tiny_config("ce");
    const Pipeline pipe = make_pipeline(cfg, 6);
    const ModelParams p = init_params(cfg.encoder_spec(6), 3, 2);
    std::mt19937_64 rng(1);
    const Tensor x = random_matrix(2, 6, rng);
    SessionState st;
    st.factor = 1;
    build_prototypes(st, p, pipe, x, std::vector<int>{0, 1}, {0, 1}, 9);
    const Tensor f = forward_features(p, x);
    for (int y : {0, 1}) {
        const auto want = facl::testing::unit_mean_oracle(rows_of(f, {static_cast<std::size_t>(y)}));
        for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(st.prototype(y)[k], want[k], 1e-14);
    }
}

TEST(BuildPrototypes, TwoSamplesGiveTheNormalisedMean) {
    const ProtocolConfig cfg = tiny_config("ce");
    const Pipeline pipe = make_pipeline(cfg, 6);
    const ModelParams p = init_params(cfg.encoder_spec(6), 3, 2);
    std::mt19937_64 rng(2);
    const Tensor x = random_matrix(2, 6, rng);
    SessionState st;
    st.factor = 1;
    build_prototypes(st, p, pipe, x, std::vector<int>{5, 5}, {5}, 9);
    const auto want = facl::testing::unit_mean_oracle(rows_of(forward_features(p, x), {0, 1}));
    for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(st.prototype(5)[k], want[k], 1e-14);
}

TEST(BuildPrototypes, FiveShotSlotsMatchBruteForce) {
    ProtocolConfig cfg = tiny_config();
    cfg.delta = 1.0;  // slot 1 then averages every expanded row of the class
    const Pipeline pipe = make_pipeline(cfg, 6);
    const ModelParams p = init_params(cfg.encoder_spec(6), 4, 8);
    std::mt19937_64 rng(3);
    const Tensor x = random_matrix(10, 6, rng);
    std::vector<int> y;
    for (int i = 0; i < 10; ++i) y.push_back(4 + i % 2);
    SessionState st;
    st.register_session({0, 1, 2, 3});
    build_prototypes(st, p, pipe, x, y, {4, 5}, 11);

    Tensor moved = Tensor::matrix(10, 6);
    for (std::size_t i = 0; i < 10; ++i) pipe.transforms[1].apply(x.row(i), moved.row(i));
    const Tensor f = forward_features(p, x), g = forward_features(p, moved);
    for (int c : {4, 5}) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < 10; ++i)
            if (y[i] == c) idx.push_back(i);
        auto originals = rows_of(f, idx);
        auto everything = originals;
        for (auto& r : rows_of(g, idx)) everything.push_back(r);
        const auto slot0 = facl::testing::unit_mean_oracle(originals);
        const auto slot1 = facl::testing::unit_mean_oracle(everything);
        for (std::size_t k = 0; k < 6; ++k) {
            EXPECT_NEAR(st.prototype(2 * c)[k], slot0[k], 1e-12);
            EXPECT_NEAR(st.prototype(2 * c + 1)[k], slot1[k], 1e-12);
        }
    }
}

TEST(BuildPrototypes, RejectsForeignLabelsAndReusedClasses) {
    const ProtocolConfig cfg = tiny_config("ce");
    const Pipeline pipe = make_pipeline(cfg, 6);
    const ModelParams p = init_params(cfg.encoder_spec(6), 3, 2);
    const Tensor x = Tensor::matrix(2, 6, 1.0);
    SessionState st;
    st.factor = 1;
    EXPECT_THROW(build_prototypes(st, p, pipe, x, std::vector<int>{0, 2}, {0, 1}, 1), ValueError);
    build_prototypes(st, p, pipe, x, std::vector<int>{0, 1}, {0, 1}, 1);
    EXPECT_THROW(build_prototypes(st, p, pipe, x, std::vector<int>{1, 2}, {1, 2}, 1), ValueError);
    EXPECT_THROW(st.register_session({3, 3}), ValueError);
}

TEST(NcmPredict, SingleClassAlwaysWins) {
    const SessionState st = state_with({7}, {{{1.0, 0.0}, {0.0, 1.0}}});
    std::mt19937_64 rng(5);
    for (int y : ncm_integrated_predict(st, random_matrix(20, 2, rng))) EXPECT_EQ(y, 7);
}

TEST(NcmPredict, OrthogonalPrototypes) {
    std::vector<std::vector<std::vector<double>>> slots;
    for (std::size_t c = 0; c < 4; ++c) {
        std::vector<double> e(4, 0.0);
        e[c] = 1.0;
        slots.push_back({e});
    }
    const SessionState st = state_with({0, 1, 2, 3}, slots);
    Tensor q = Tensor::matrix({{0.1, 2, 0.3, 0}, {-1, -1, -1, 0.5}, {5, 0, 0, 0}});
    EXPECT_EQ(ncm_integrated_predict(st, q), (std::vector<int>{1, 3, 0}));
}

TEST(NcmPredict, MatchesBruteForceAndIsScaleInvariant) {
    std::mt19937_64 rng(6);
    const std::vector<int> classes{0, 3, 4, 9, 10, 11};
    std::vector<std::vector<std::vector<double>>> slots;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        const Tensor u = facl::testing::random_unit_rows(2, 5, rng);
        slots.push_back(rows_of(u, {0, 1}));
    }
    const SessionState st = state_with(classes, slots);
    const Tensor q = random_matrix(200, 5, rng);
    for (bool use_max : {false, true}) {
        const Aggregation agg = use_max ? Aggregation::Max : Aggregation::Sum;
        const auto got = ncm_integrated_predict(st, q, agg);
        EXPECT_EQ(got, facl::testing::ncm_oracle(classes, slots, q, use_max));
        Tensor scaled = q;
        for (double& v : scaled.data()) v *= 3.7;
        EXPECT_EQ(ncm_integrated_predict(st, scaled, agg), got);
    }
}

TEST(NcmPredict, TiesGoToTheSmallestClass) {
    const SessionState st = state_with({2, 8, 5}, {{{1.0, 0.0}}, {{1.0, 0.0}}, {{1.0, 0.0}}});
    EXPECT_EQ(ncm_integrated_predict(st, Tensor::matrix({{1.0, 1.0}})), (std::vector<int>{2}));
}

namespace {

// Test set whose rows are the prototype sources themselves.
struct EvalFixture {
    ModelParams params = init_params(EncoderSpec{5, {7}, 4, 3}, 8);
    Tensor rows;
    SessionState state;

    EvalFixture() {
        std::mt19937_64 rng(9);
        rows = random_matrix(6, 5, rng);
        const Tensor f = forward_features(params, rows);
        std::vector<std::vector<std::vector<double>>> slots;
        for (std::size_t i = 0; i < 6; ++i) slots.push_back({facl::testing::unit_mean_oracle(rows_of(f, {i}))});
        state = state_with({0, 1, 2, 3, 4, 5}, slots);
    }
};

}  // namespace

TEST(EvaluateSession, AllCorrectAndAllWrong) {
    EvalFixture fx;
    const std::vector<int> right{0, 1, 2, 3, 4, 5};
    const EvalResult a = evaluate_session(fx.state, fx.params, fx.rows, right);
    EXPECT_EQ(a.accuracy, 100.0);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(a.confusion[k][k], 1u);
    const std::vector<int> wrong{1, 2, 3, 4, 5, 0};
    const EvalResult b = evaluate_session(fx.state, fx.params, fx.rows, wrong);
    EXPECT_EQ(b.accuracy, 0.0);
    EXPECT_EQ(b.confusion[1][0], 1u);
    EXPECT_THROW(evaluate_session(fx.state, fx.params, fx.rows, std::vector<int>{0, 1, 2, 3, 4, 6}), ValueError);
}

TEST(EvaluateSession, MatchesBruteForceOracle) {
    std::mt19937_64 rng(10);
    const ModelParams p = init_params(EncoderSpec{5, {7}, 4, 3}, 8);
    const std::vector<int> classes{0, 1, 2, 3};
    std::vector<std::vector<std::vector<double>>> slots;
    for (std::size_t c = 0; c < 4; ++c) slots.push_back(rows_of(facl::testing::random_unit_rows(2, 4, rng), {0, 1}));
    SessionState st = state_with(classes, slots);
    const Tensor x = random_matrix(150, 5, rng);
    const auto y = facl::testing::random_labels(150, 4, rng);
    const auto oracle = facl::testing::ncm_oracle(classes, slots, forward_features(p, x), false);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) correct += oracle[i] == y[i];
    const EvalResult r = evaluate_session(st, p, x, y);
    EXPECT_EQ(r.correct, correct);
    EXPECT_DOUBLE_EQ(r.accuracy, 100.0 * static_cast<double>(correct) / 150.0);
    std::size_t cells = 0;
    for (const auto& row : r.confusion)
        for (std::size_t v : row) cells += v;
    EXPECT_EQ(cells, 150u);
}

TEST(ComputeMetrics, ReferenceRow) {
    const std::vector<double> facl_row{86.20, 81.55, 76.95, 72.50, 68.75, 65.68, 63.16, 60.62, 58.20};
    const MetricsReport m = compute_metrics(facl_row, 2.65);
    EXPECT_NEAR(m.average_acc, 70.40, 0.005);
    EXPECT_NEAR(m.pd, 28.00, 1e-9);
    ASSERT_TRUE(m.delta_fi.has_value());
    EXPECT_NEAR(*m.delta_fi, 55.55, 1e-9);
    EXPECT_FALSE(compute_metrics(facl_row).delta_fi.has_value());
    EXPECT_EQ(compute_metrics({50.0}).pd, 0.0);
    EXPECT_THROW(compute_metrics({}), ValueError);
    EXPECT_THROW(compute_metrics({101.0}), ValueError);
}

TEST(RunProtocol, ClassifierGrowsByTwoRowsPerClass) {
    DatasetSpec spec = DatasetSpec::cifar100();
    spec.input_dim = 4;
    const auto sessions = split_sessions(gen_synthetic(spec, 1, 2.0), spec, 1);
    ProtocolConfig cfg = tiny_config();
    cfg.epochs_base = 0;
    const RunResult r = run_protocol(sessions, cfg);
    ASSERT_EQ(r.classifier_rows.size(), 9u);
    for (std::size_t s = 0; s < 9; ++s) EXPECT_EQ(r.classifier_rows[s], 2 * (60 + 5 * s));
    EXPECT_EQ(r.final_eval.labels.size(), 100u);
    EXPECT_EQ(r.final_eval.total, 200u);
    EXPECT_EQ(r.metrics.accuracies.size(), 9u);
    EXPECT_TRUE(r.frozen_ok());
}

TEST(RunProtocol, CeOnlyHeadHasOneRowPerClass) {
    ProtocolConfig cfg = tiny_config("ce");
    const RunResult r = run_protocol(tiny_sessions(), cfg);
    EXPECT_EQ(r.classifier_rows, (std::vector<std::size_t>{4, 6, 8}));
}

TEST(RunProtocol, IncrementalSessionsKeepOldWeightsFrozen) {
    for (bool finetune : {false, true}) {
        ProtocolConfig cfg = tiny_config();
        cfg.finetune_incremental = finetune;
        cfg.epochs_incremental = 3;
        const RunResult r = run_protocol(tiny_sessions(), cfg);
        EXPECT_EQ(r.frozen_before.size(), 2u);
        EXPECT_TRUE(r.frozen_ok());
    }
}

TEST(RunProtocol, FinetuneMovesOnlyTheNewRows) {
    ProtocolConfig cfg = tiny_config();
    const RunResult plain = run_protocol(tiny_sessions(), cfg);
    cfg.finetune_incremental = true;
    cfg.epochs_incremental = 5;
    const RunResult tuned = run_protocol(tiny_sessions(), cfg);
    const std::size_t d = cfg.feature_dim, base_rows = 8;
    for (std::size_t i = 0; i < base_rows * d; ++i) EXPECT_EQ(plain.params.classifier[i], tuned.params.classifier[i]);
    EXPECT_NE(plain.params.classifier, tuned.params.classifier);
}

TEST(RunProtocol, SameSeedSameMetrics) {
    const ProtocolConfig cfg = tiny_config();
    EXPECT_EQ(run_protocol(tiny_sessions(), cfg).metrics, run_protocol(tiny_sessions(), cfg).metrics);
}

TEST(Ablation, BaselineRowAndDeltaFi) {
    const auto sessions = tiny_sessions();
    const ProtocolConfig cfg = tiny_config();
    const auto rows = run_ablation(sessions, cfg, {parse_variant("ce"), parse_variant("facl")});
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_FALSE(rows[0].metrics.delta_fi.has_value());
    ASSERT_TRUE(rows[1].metrics.delta_fi.has_value());
    EXPECT_DOUBLE_EQ(*rows[1].metrics.delta_fi, rows[1].metrics.accuracies.back() - rows[0].metrics.accuracies.back());
}

TEST(Ablation, AugAugIsTheFullMethod) {
    const auto sessions = tiny_sessions();
    const auto rows = run_ablation(sessions, tiny_config(), {parse_variant("facl"), parse_variant("facl@aug+aug")});
    EXPECT_EQ(rows[0].metrics, rows[1].metrics);
}

TEST(Ablation, ScaleZeroNoiseAtUnitDeltaMatchesPlainMixing) {
    const auto sessions = tiny_sessions();
    ProtocolConfig cfg = tiny_config();
    cfg.delta = 1.0;
    cfg.noise_scale = 0.0;
    const auto rows = run_ablation(sessions, cfg, {parse_variant("facl"), parse_variant("facl@aug+noise")});
    EXPECT_EQ(rows[0].metrics, rows[1].metrics);
}

TEST(SweepDelta, SingleDeltaMatchesDirectRun) {
    ProtocolConfig cfg = tiny_config();
    const auto rows = sweep_delta({0.5}, {3}, cfg, [](std::uint64_t s) { return tiny_sessions(s); });
    ASSERT_EQ(rows.size(), 1u);
    cfg.delta = 0.5;
    cfg.seed = 3;
    EXPECT_EQ(rows[0].final_acc, (std::vector<double>{run_protocol(tiny_sessions(3), cfg).metrics.accuracies.back()}));
    EXPECT_EQ(rows[0].sd, 0.0);
}

TEST(SweepDelta, UnitDeltaEqualsNoMixRun) {
    ProtocolConfig cfg = tiny_config();
    cfg.delta = 1.0;
    const RunResult mixed = run_protocol(tiny_sessions(), cfg);
    cfg.variant = parse_variant("facl@aug+none");
    const RunResult none = run_protocol(tiny_sessions(), cfg);
    EXPECT_EQ(mixed.metrics, none.metrics);
    EXPECT_EQ(mixed.params.classifier, none.params.classifier);
    cfg.variant = parse_variant("ce+sscl+pc");
    EXPECT_EQ(run_protocol(tiny_sessions(), cfg).metrics, mixed.metrics);
}

TEST(SweepDelta, MeanAndSampleDeviation) {
    const auto rows = sweep_delta({0.0, 1.0}, {1, 2}, tiny_config(), [](std::uint64_t s) { return tiny_sessions(s); });
    for (const SweepRow& r : rows) {
        ASSERT_EQ(r.final_acc.size(), 2u);
        EXPECT_DOUBLE_EQ(r.mean, 0.5 * (r.final_acc[0] + r.final_acc[1]));
        EXPECT_NEAR(r.sd, std::abs(r.final_acc[0] - r.final_acc[1]) / std::sqrt(2.0), 1e-12);
    }
    EXPECT_THROW(sweep_delta({1.2}, {1}, tiny_config(), [](std::uint64_t s) { return tiny_sessions(s); }), ValueError);
}
