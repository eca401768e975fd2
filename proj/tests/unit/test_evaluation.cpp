#include "adaptivek/evaluation.hpp"
#include "adaptivek/synthetic.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>

using namespace adaptivek;

namespace {

Matrix randn(std::uint64_t seed, Eigen::Index r, Eigen::Index c) {
    Rng rng(seed);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
}

struct SmallData {
    std::shared_ptr<const Dataset> train;
    Dataset test;
};

SmallData small_data() {
    SyntheticSpec spec;
    spec.d = 16;
    spec.M_true = 24;
    spec.support_min = 2;
    spec.support_max = 6;
    spec.seed = 3;
    const auto dict = gen_dictionary(spec);
    return {std::make_shared<const Dataset>(gen_samples(spec, dict, 1500, 0).data), gen_samples(spec, dict, 300, 1).data};
}

TrainConfig small_base() {
    TrainConfig cfg;
    cfg.dict_size = 48;
    cfg.schedule.total_steps = 300;
    cfg.schedule.batch_size = 64;
    cfg.schedule.base_lr = 3e-3;
    cfg.seed = 11;
    return cfg;
}

} // namespace

TEST(Metrics, L2Loss) {
    const Matrix X = randn(1, 5, 3);
    EXPECT_EQ(l2_loss(X, X), 0.0);
    Matrix x(1, 2), z = Matrix::Zero(1, 2);
    x << 3, 4;
    EXPECT_NEAR(l2_loss(x, z), 25.0, 1e-12);
    const Matrix Y = randn(2, 5, 3);
    double s = 0.0;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) s += (X(i, j) - Y(i, j)) * (X(i, j) - Y(i, j));
    EXPECT_NEAR(l2_loss(X, Y), s / 5.0, 1e-12);
    EXPECT_THROW(l2_loss(X, Matrix(5, 2)), DimensionMismatch);
}

TEST(Metrics, VarianceUnexplained) {
    const Matrix X = randn(3, 20, 4);
    EXPECT_EQ(variance_unexplained(X, X), 0.0);
    const Matrix mean = X.colwise().mean().replicate(20, 1);
    EXPECT_NEAR(variance_unexplained(X, mean), 1.0, 1e-12);

    Matrix A(3, 2), B(3, 2);
    A << 1, 0, 2, 2, 3, 4;
    B << 1, 1, 2, 2, 2, 4;
    // residual columns (0,0,1) and (-1,0,0): variances 2/9 + 2/9; X variances 2/3 + 8/3
    EXPECT_NEAR(variance_unexplained(A, B), (4.0 / 9.0) / (10.0 / 3.0), 1e-12);

    const Matrix Y = randn(4, 20, 4);
    const RowVector shift = RowVector::LinSpaced(4, -3.0, 5.0);
    EXPECT_NEAR(variance_unexplained(X, Y), variance_unexplained(X.rowwise() + shift, Y.rowwise() + shift), 1e-12);

    EXPECT_THROW(variance_unexplained(Matrix::Ones(3, 2), Matrix::Zero(3, 2)), NumericError);
    EXPECT_THROW(variance_unexplained(Matrix::Ones(1, 2), Matrix::Zero(1, 2)), InvalidArgument);
}

TEST(Metrics, CosineLoss) {
    const Matrix X = randn(5, 6, 3);
    EXPECT_NEAR(cosine_loss(X, 2.0 * X), 0.0, 1e-12);
    Matrix a(1, 2), b(1, 2);
    a << 1, 0;
    b << 0, 1;
    EXPECT_NEAR(cosine_loss(a, b), 1.0, 1e-12);
    b << 1, 1;
    EXPECT_NEAR(cosine_loss(a, b), 1.0 - 1.0 / std::sqrt(2.0), 1e-12);
    EXPECT_EQ(cosine_loss(a, Matrix::Zero(1, 2)), 1.0);

    const Matrix Y = randn(6, 6, 3);
    const Vector scale = (randn(7, 6, 1).array().abs() + 0.1).matrix();
    EXPECT_NEAR(cosine_loss(X, Y), cosine_loss(X, scale.asDiagonal() * Y), 1e-12);
}

TEST(Metrics, L2Ratio) {
    const Matrix X = randn(8, 7, 5);
    EXPECT_NEAR(l2_ratio(X, X), 1.0, 1e-12);
    EXPECT_NEAR(l2_ratio(X, X / 2.0), 0.5, 1e-12);
    for (double a : {0.1, 1.7, 40.0}) EXPECT_NEAR(l2_ratio(X, a * X), a, 1e-12 * a);
    EXPECT_THROW(l2_ratio(Matrix::Zero(2, 2), Matrix::Ones(2, 2)), NumericError);
}

TEST(BinnedK, ConstantKAndMonotoneSupport) {
    Vector c(6);
    c << 0.5, 1.5, 3.2, 9.99, 10.0, 4.0;
    const auto flat = k_by_complexity(c, {7, 7, 7, 7, 7, 7}, {5, 6, 7, 7, 7, 7});
    for (int b = 0; b < complexity_bins; ++b) {
        if (flat.count[b] == 0) {
            EXPECT_TRUE(std::isnan(flat.mean_k[b]));
        } else {
            EXPECT_EQ(flat.mean_k[b], 7.0);
        }
    }
    EXPECT_EQ(flat.count[9], 2u);  // c = 10 lands in the last bin
    EXPECT_EQ(flat.mean_l0[0], 5.0);

    SyntheticSpec spec;
    spec.seed = 4;
    const auto dict = gen_dictionary(spec);
    const auto data = gen_samples(spec, dict, 3000);
    std::vector<int> sizes;
    for (const auto& s : data.supports) sizes.push_back(static_cast<int>(s.size()));
    const auto bins = k_by_complexity(data.data.complexity_vector(), sizes, sizes);
    for (int b = 1; b < complexity_bins; ++b) EXPECT_GE(bins.mean_k[b], bins.mean_k[b - 1]);
}

TEST(Evaluate, MatchesDirectComputation) {
    const auto d = small_data();
    SaeCheckpoint ck{VariantConfig::make_topk(4), SaeParams::init(16, 48, false, 2)};
    const auto m = evaluate(ck, nullptr, d.test);
    const Matrix X = d.test.activation_matrix();
    const auto enc = encode_batch(X, ck.params, ck.config, nullptr);
    const Matrix X_hat = decode_rows(enc.Z, ck.params);
    EXPECT_NEAR(m.l2_loss, l2_loss(X, X_hat), 1e-12);
    EXPECT_NEAR(m.cosine_loss, cosine_loss(X, X_hat), 1e-12);
    EXPECT_LE(m.mean_l0, 4.0);
    EXPECT_EQ(m.rows, 300u);
    const auto j = metrics_to_json(m);
    EXPECT_NEAR(j["var_explained"].get<double>() + j["var_unexplained"].get<double>(), 1.0, 1e-12);
}

TEST(Sweep, PresetsAndLabels) {
    const auto grid = sweep_preset("paper-k-grid");
    ASSERT_EQ(grid.size(), 6u);
    EXPECT_EQ(grid.front().setting, "k=20");
    EXPECT_EQ(grid.back().setting, "k=640");
    const auto penalties = sweep_preset("penalty-grid");
    EXPECT_EQ(penalties.size(), 24u);
    EXPECT_EQ(sweep_setting_label(VariantConfig::make_penalty(Variant::relu, 0.6)), "lambda=0.6");
    EXPECT_EQ(sweep_setting_label(VariantConfig::make_adaptive({4, 26, 48, 0.6, 0, 10, KMapping::sigmoid_range})),
              "k=4..48");
    EXPECT_THROW(sweep_preset("nope"), InvalidArgument);
}

TEST(Sweep, SingletonMatchesStandaloneRun) {
    const auto d = small_data();
    SweepSpec spec;
    spec.base = small_base();
    spec.points = {{VariantConfig::make_topk(4), "k=4"}};
    const auto rows = pareto_sweep(spec, d.train, d.test, 1);
    ASSERT_EQ(rows.size(), 1u);
    ASSERT_TRUE(rows[0].metrics) << rows[0].error;

    TrainConfig cfg = spec.base;
    cfg.variant = VariantConfig::make_topk(4);
    TrainInputs in;
    in.data = std::make_shared<MemorySource>(d.train);
    const auto r = train(in, cfg);
    const auto m = evaluate(r.sae, nullptr, d.test);
    EXPECT_EQ(rows[0].metrics->l2_loss, m.l2_loss);
    EXPECT_EQ(rows[0].metrics->mean_l0, m.mean_l0);
    EXPECT_EQ(rows[0].steps, 300);
    EXPECT_EQ(rows[0].seed, 11u);
}

TEST(Sweep, CapacityAndDeterminismAcrossThreadCounts) {
    const auto d = small_data();
    SweepSpec spec;
    spec.base = small_base();
    spec.points = {{VariantConfig::make_topk(1), "k=1"}, {VariantConfig::make_topk(6), "k=6"}};
    const auto one = sweep_csv(pareto_sweep(spec, d.train, d.test, 1));
    const auto two = sweep_csv(pareto_sweep(spec, d.train, d.test, 2));
    EXPECT_EQ(one, two);
    const auto rows = pareto_sweep(spec, d.train, d.test, 2);
    EXPECT_LE(rows[1].metrics->l2_loss, rows[0].metrics->l2_loss);
    EXPECT_EQ(one.substr(0, one.find('\n')), "variant,setting,mean_l0,l2_loss,var_unexplained,cosine_loss,l2_ratio,seed,steps");
}

TEST(Sweep, FailedRunIsRecordedAndOthersContinue) {
    const auto d = small_data();
    SweepSpec spec;
    spec.base = small_base();
    spec.base.schedule.total_steps = 20;
    spec.points = {{VariantConfig::make_topk(100), "k=100"}, {VariantConfig::make_topk(2), "k=2"}};
    const auto rows = pareto_sweep(spec, d.train, d.test, 1);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_FALSE(rows[0].metrics.has_value());
    EXPECT_FALSE(rows[0].error.empty());
    EXPECT_TRUE(rows[1].metrics.has_value());
    const auto csv = sweep_csv(rows);
    EXPECT_NE(csv.find("topk,k=100,nan,nan,nan,nan,nan,11,20\n"), std::string::npos) << csv;
    const auto j = sweep_json(rows);
    EXPECT_TRUE(j[0].contains("error"));
}

TEST(Sweep, ThreadCountFromEnvironment) {
    ::setenv("ADAPTIVEK_THREADS", "3", 1);
    EXPECT_EQ(default_thread_count(), 3u);
    ::setenv("ADAPTIVEK_THREADS", "0", 1);
    EXPECT_GE(default_thread_count(), 1u);
    ::unsetenv("ADAPTIVEK_THREADS");
}
