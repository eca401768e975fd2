#include "adaptivek/sae_models.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace adaptivek;

namespace {

Matrix randn(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
    return m;
}

SaeParams random_params(Eigen::Index d, Eigen::Index M, std::uint64_t seed, bool gated = false) {
    Rng rng(seed);
    SaeParams p;
    p.W_enc = randn(rng, M, d);
    p.W_dec = randn(rng, d, M);
    p.b_pre = randn(rng, d, 1, 0.3);
    p.b_enc = randn(rng, M, 1, 0.3);
    if (gated) {
        p.r = randn(rng, M, 1, 0.3);
        p.b_gate = randn(rng, M, 1, 0.3);
        p.b_mag = randn(rng, M, 1, 0.3);
    }
    return p;
}

std::vector<long> support(const Vector& z) {
    std::vector<long> s;
    for (Eigen::Index i = 0; i < z.size(); ++i)
        if (z(i) != 0.0) s.push_back(i);
    return s;
}

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

} // namespace

TEST(Decode, Examples) {
    const SaeParams p = random_params(3, 5, 1);
    EXPECT_EQ(decode(Vector::Zero(5), p), p.b_pre);
    Vector e = Vector::Zero(5);
    e(2) = 1.0;
    EXPECT_TRUE(decode(e, p).isApprox(p.W_dec.col(2) + p.b_pre, 1e-15));

    Rng rng(2);
    const Vector z = randn(rng, 5, 1);
    const Vector got = decode(z, p);
    for (int i = 0; i < 3; ++i) {
        double s = p.b_pre(i);
        for (int j = 0; j < 5; ++j) s += p.W_dec(i, j) * z(j);
        EXPECT_NEAR(got(i), s, 1e-12);
    }
    EXPECT_THROW(decode(Vector::Zero(4), p), DimensionMismatch);
}

TEST(Decode, IsAffine) {
    const SaeParams p = random_params(4, 9, 3);
    Rng rng(4);
    const Vector z1 = randn(rng, 9, 1), z2 = randn(rng, 9, 1);
    const Vector lhs = decode(z1 + z2, p) - p.b_pre;
    const Vector rhs = (decode(z1, p) - p.b_pre) + (decode(z2, p) - p.b_pre);
    EXPECT_LT((lhs - rhs).norm(), 1e-12);
}

TEST(EncodeRelu, Examples) {
    SaeParams p;
    p.W_enc = Matrix::Identity(3, 3);
    p.W_dec = Matrix::Identity(3, 3);
    p.b_pre = Vector::Zero(3);
    p.b_enc = vec({2, -1, 0.5});
    EXPECT_EQ(encode_relu(Vector::Zero(3), p), vec({2, 0, 0.5}));
    EXPECT_EQ(encode_relu(Vector::Constant(3, -10.0), p), Vector::Zero(3));
}

TEST(EncodeRelu, MatchesDefinition) {
    const SaeParams p = random_params(6, 12, 5);
    Rng rng(6);
    const Vector x = randn(rng, 6, 1);
    const Vector z = encode_relu(x, p);
    for (int j = 0; j < 12; ++j) {
        double s = p.b_enc(j);
        for (int i = 0; i < 6; ++i) s += p.W_enc(j, i) * (x(i) - p.b_pre(i));
        EXPECT_NEAR(z(j), std::max(0.0, s), 1e-12);
    }
    EXPECT_THROW(encode_relu(Vector::Zero(5), p), DimensionMismatch);
}

TEST(TopK, Examples) {
    EXPECT_EQ(topk_select(vec({3, 1, 4, 1, 5}), 2), vec({0, 0, 4, 0, 5}));
    EXPECT_EQ(topk_select(vec({-1, -2, -3}), 2), Vector::Zero(3));
    // tie at the k-th value goes to the lower index
    EXPECT_EQ(topk_select(vec({1, 2, 2, 2}), 2), vec({0, 2, 2, 0}));
    // fewer positives than k keeps all of them
    EXPECT_EQ(topk_select(vec({0.5, -1, 0, 3}), 3), vec({0.5, 0, 0, 3}));
    EXPECT_THROW(topk_select(vec({1, 2}), 0), InvalidArgument);
    EXPECT_THROW(topk_select(vec({1, 2}), 3), InvalidArgument);
}

TEST(TopK, MatchesSortOracle) {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const Vector pre = randn(rng, 64, 1);
        const int k = 1 + static_cast<int>(rng.below(64));
        const Vector z = topk_select(pre, k);
        const auto want = oracle::topk_by_sort(pre, k);
        EXPECT_EQ(support(z), want);
        EXPECT_LE(static_cast<int>(want.size()), k);
        for (long i : want) EXPECT_EQ(z(i), pre(i));
        if ((pre.array() > 0.0).count() >= k) EXPECT_EQ(static_cast<int>(want.size()), k);
    }
}

TEST(BatchTopK, Examples) {
    Matrix pre(2, 2);
    pre << 10, 9, 1, 2;
    Matrix want(2, 2);
    want << 10, 9, 0, 0;
    EXPECT_EQ(batch_topk_select(pre, 1), want);
}

TEST(BatchTopK, SingleRowEqualsTopK) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix pre = randn(rng, 1, 32);
        const int k = 1 + static_cast<int>(rng.below(32));
        EXPECT_EQ(Vector(batch_topk_select(pre, k).row(0).transpose()), topk_select(pre.row(0).transpose(), k));
    }
}

TEST(BatchTopK, MatchesGlobalSortOracle) {
    Rng rng(9);
    const Matrix pre = randn(rng, 8, 32);
    const int k = 5;
    const Matrix z = batch_topk_select(pre, k);
    const Eigen::Map<const Vector> flat_pre(pre.data(), pre.size());
    std::vector<double> kept, want;
    for (Eigen::Index i = 0; i < z.size(); ++i)
        if (z.data()[i] != 0.0) kept.push_back(z.data()[i]);
    for (long i : oracle::topk_by_sort(flat_pre, 8 * k)) want.push_back(flat_pre(i));
    std::sort(kept.begin(), kept.end());
    std::sort(want.begin(), want.end());
    EXPECT_EQ(kept, want);
    EXPECT_LE(static_cast<int>(kept.size()), 8 * k);
}

TEST(AdaptiveK, DefaultMappingValues) {
    const AdaptiveKConfig cfg;
    EXPECT_EQ(adaptive_k(5.0, cfg), 170);
    EXPECT_EQ(adaptive_k(0.0, cfg), 148);
    EXPECT_EQ(adaptive_k(10.0, cfg), 192);
    EXPECT_EQ(oracle::k_of_c(0.0, 20, 320, 0.6), 148);
    EXPECT_EQ(oracle::k_of_c(10.0, 20, 320, 0.6), 192);
}

TEST(AdaptiveK, MonotoneClampedAndMatchesDirectSigmoid) {
    const AdaptiveKConfig cfg;
    int prev = 0;
    for (double c = -3.0; c <= 13.0; c += 0.25) {
        const int k = adaptive_k(c, cfg);
        EXPECT_GE(k, prev);
        EXPECT_GE(k, cfg.k_min);
        EXPECT_LE(k, cfg.k_max);
        EXPECT_EQ(k, oracle::k_of_c(c, 20, 320, 0.6)) << c;
        prev = k;
    }
    AdaptiveKConfig steep = cfg;
    steep.s = 40.0;
    EXPECT_EQ(adaptive_k(-1e9, steep), 20);
    EXPECT_EQ(adaptive_k(1e9, steep), 320);
}

TEST(AdaptiveK, BaseKCenteredMapping) {
    AdaptiveKConfig cfg;
    cfg.mapping = KMapping::base_k_centered;
    EXPECT_EQ(adaptive_k(0.0, cfg), 20);
    EXPECT_EQ(adaptive_k(5.0, cfg), 80);
    EXPECT_EQ(adaptive_k(10.0, cfg), 320);
    int prev = 0;
    for (double c = 0.0; c <= 10.0; c += 0.5) {
        EXPECT_GE(adaptive_k(c, cfg), prev);
        prev = adaptive_k(c, cfg);
    }
}

TEST(AdaptiveK, ConfigValidation) {
    AdaptiveKConfig cfg;
    EXPECT_NO_THROW(cfg.validate(1024));
    EXPECT_THROW(cfg.validate(200), InvalidArgument);
    cfg.base_k = 10;
    EXPECT_THROW(cfg.validate(1024), InvalidArgument);
    cfg = {};
    cfg.s = 0.0;
    EXPECT_THROW(cfg.validate(1024), InvalidArgument);
    cfg = {};
    cfg.c_max = cfg.c_min;
    EXPECT_THROW(cfg.validate(1024), InvalidArgument);
}

TEST(EncodeAdaptive, ConstantProbeIsFixedTopK) {
    const SaeParams p = random_params(16, 400, 10);
    const ProbeModel probe{Vector::Zero(16), 5.0, 0.0};
    const AdaptiveKConfig cfg;
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const Vector x = randn(rng, 16, 1);
        const auto enc = encode_adaptive(x, p, probe, cfg);
        EXPECT_EQ(enc.k, 170);
        EXPECT_EQ(enc.c, 5.0);
        EXPECT_EQ(enc.z, topk_select(pre_activation(x, p, false), 170));
    }
}

TEST(EncodeAdaptive, ToyLowAndHighComplexity) {
    const SaeParams p = random_params(4, 8, 12);
    AdaptiveKConfig cfg{1, 3, 6, 0.6, 0.0, 10.0, KMapping::sigmoid_range};
    // c = x_0, so x_0 = 0 and x_0 = 10 give the two ends of the range
    ProbeModel probe{vec({1, 0, 0, 0}), 0.0, 0.0};
    const auto low = encode_adaptive(vec({0, 1, -1, 0.5}), p, probe, cfg);
    const auto high = encode_adaptive(vec({10, 1, -1, 0.5}), p, probe, cfg);
    EXPECT_EQ(low.k, oracle::k_of_c(0.0, 1, 6, 0.6));
    EXPECT_EQ(high.k, oracle::k_of_c(10.0, 1, 6, 0.6));
    EXPECT_LE(low.k, high.k);
    EXPECT_LE(support(low.z).size(), static_cast<std::size_t>(low.k));
    EXPECT_LE(support(high.z).size(), static_cast<std::size_t>(high.k));

    const AdaptiveKConfig def;
    const SaeParams big = random_params(4, 400, 13);
    ProbeModel big_probe{vec({1, 0, 0, 0}), 0.0, 0.0};
    const auto lo = encode_adaptive(vec({0, 1, 1, 1}), big, big_probe, def);
    const auto hi = encode_adaptive(vec({10, 1, 1, 1}), big, big_probe, def);
    EXPECT_EQ(lo.k, 148);
    EXPECT_EQ(hi.k, 192);
    EXPECT_LE(support(lo.z).size(), 148u);
    EXPECT_LE(support(hi.z).size(), 192u);

    EXPECT_THROW(encode_adaptive(Vector::Zero(4), p, ProbeModel{Vector::Zero(3), 0, 0}, cfg), DimensionMismatch);
}

TEST(EncodeGated, Examples) {
    SaeParams p;
    p.W_enc = Matrix::Zero(2, 1);
    p.W_dec = Matrix::Zero(1, 2);
    p.b_pre = Vector::Zero(1);
    p.b_enc = Vector::Zero(2);
    p.r = Vector::Zero(2);
    p.b_gate = vec({1, -1});
    p.b_mag = vec({2, 3});
    EXPECT_EQ(encode_gated(Vector::Zero(1), p), vec({2, 0}));
    p.b_gate = vec({-1, -2});
    EXPECT_EQ(encode_gated(Vector::Zero(1), p), Vector::Zero(2));
    p.r.resize(0);
    EXPECT_THROW(encode_gated(Vector::Zero(1), p), InvalidArgument);
}

TEST(EncodeGated, MatchesDefinition) {
    const SaeParams p = random_params(5, 10, 14, true);
    Rng rng(15);
    const Vector x = randn(rng, 5, 1);
    const Vector z = encode_gated(x, p);
    for (int j = 0; j < 10; ++j) {
        double base = 0.0;
        for (int i = 0; i < 5; ++i) base += p.W_enc(j, i) * (x(i) - p.b_pre(i));
        const double gate = base + p.b_gate(j);
        const double mag = std::exp(p.r(j)) * base + p.b_mag(j);
        EXPECT_NEAR(z(j), gate > 0.0 ? std::max(0.0, mag) : 0.0, 1e-12);
    }
}

TEST(Matryoshka, SinglePrefixIsBatchTopK) {
    const SaeParams p = random_params(4, 12, 16);
    Rng rng(17);
    const Matrix X = randn(rng, 5, 4);
    const auto out = matryoshka_forward(X, p, {12}, 3);
    ASSERT_EQ(out.size(), 1u);
    const Matrix want = decode_rows(batch_topk_select(pre_activation_rows(X, p, true), 3), p);
    EXPECT_LT((out[0] - want).norm(), 1e-12);
}

TEST(Matryoshka, PrefixUsesOnlyItsLatents) {
    SaeParams p = random_params(3, 4, 18);
    Rng rng(19);
    const Matrix X = randn(rng, 2, 3);
    const auto out = matryoshka_forward(X, p, {2, 4}, 2);
    // scrambling latents 2..3 must not change the prefix-2 reconstruction
    SaeParams q = p;
    q.W_enc.bottomRows(2) *= -5.0;
    q.W_dec.rightCols(2) *= 7.0;
    q.b_enc.tail(2).array() += 3.0;
    const auto out2 = matryoshka_forward(X, q, {2, 4}, 2);
    EXPECT_EQ(out[0], out2[0]);

    EXPECT_THROW(matryoshka_forward(X, p, {4, 2}, 2), InvalidArgument);
    EXPECT_THROW(matryoshka_forward(X, p, {2, 3}, 2), InvalidArgument);
    EXPECT_THROW(matryoshka_forward(X, p, {}, 2), InvalidArgument);
}

TEST(Matryoshka, WiderPrefixKeepsCandidates) {
    const SaeParams p = random_params(4, 16, 20);
    Rng rng(21);
    const Matrix X = randn(rng, 3, 4);
    const Matrix pre = pre_activation_rows(X, p, true);
    const Matrix z4 = batch_topk_select(pre.leftCols(4), 2);
    for (Eigen::Index i = 0; i < z4.rows(); ++i)
        for (Eigen::Index j = 0; j < z4.cols(); ++j)
            if (z4(i, j) != 0.0) EXPECT_LT(j, 8);
}

TEST(NormalizeDecoder, UnitColumnsAreUntouched) {
    SaeParams p = random_params(5, 7, 22);
    for (Eigen::Index j = 0; j < 7; ++j) p.W_dec.col(j).normalize();
    const SaeParams before = p;
    Rng rng(1);
    normalize_decoder(p, rng);
    EXPECT_LT((p.W_dec - before.W_dec).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((p.W_enc - before.W_enc).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(NormalizeDecoder, ScalesEncoderInversely) {
    SaeParams p = random_params(3, 4, 23);
    p.W_dec.col(1) = vec({0, 4, 0});
    const Vector enc_row = p.W_enc.row(1).transpose();
    Rng rng(1);
    normalize_decoder(p, rng);
    EXPECT_NEAR(p.W_dec.col(1).norm(), 1.0, 1e-12);
    EXPECT_LT((Vector(p.W_enc.row(1).transpose()) - 4.0 * enc_row).norm(), 1e-12);
}

TEST(NormalizeDecoder, ReconstructionOfReluCodeIsPreserved) {
    SaeParams p = random_params(6, 20, 24);
    Rng rng(25);
    const Vector x = randn(rng, 6, 1);
    const Vector before = decode(encode_relu(x, p), p);
    Rng fix(1);
    normalize_decoder(p, fix);
    for (Eigen::Index j = 0; j < 20; ++j) EXPECT_NEAR(p.W_dec.col(j).norm(), 1.0, 1e-9);
    const Vector after = decode(encode_relu(x, p), p);
    EXPECT_LE((after - before).norm(), 1e-6 * before.norm());
}

TEST(NormalizeDecoder, ZeroColumnIsReseeded) {
    SaeParams a = random_params(5, 3, 26), b = a;
    a.W_dec.col(0).setZero();
    b.W_dec.col(0).setZero();
    Rng r1(77), r2(77);
    normalize_decoder(a, r1);
    normalize_decoder(b, r2);
    EXPECT_NEAR(a.W_dec.col(0).norm(), 1.0, 1e-12);
    EXPECT_EQ(a.W_dec, b.W_dec);
}

TEST(SaeParams, InitHasUnitDecoderColumns) {
    const SaeParams p = SaeParams::init(8, 32, true, 3);
    EXPECT_EQ(p.d(), 8);
    EXPECT_EQ(p.M(), 32);
    EXPECT_TRUE(p.has_gate());
    for (Eigen::Index j = 0; j < 32; ++j) EXPECT_NEAR(p.W_dec.col(j).norm(), 1.0, 1e-12);
    EXPECT_EQ(p.W_dec, SaeParams::init(8, 32, true, 3).W_dec);
    EXPECT_NE(p.W_dec, SaeParams::init(8, 32, true, 4).W_dec);
}

TEST(VariantConfig, ValidationAndNames) {
    EXPECT_NO_THROW(VariantConfig::make_topk(4).validate(16));
    EXPECT_THROW(VariantConfig::make_topk(17).validate(16), InvalidArgument);
    EXPECT_THROW(VariantConfig::make_matryoshka(4, {8, 4, 16}).validate(16), InvalidArgument);
    EXPECT_NO_THROW(VariantConfig::make_matryoshka(4, {4, 8, 16}).validate(16));
    EXPECT_THROW(VariantConfig::make_penalty(Variant::relu, -1.0).validate(16), InvalidArgument);
    VariantConfig extra = VariantConfig::make_topk(4);
    extra.lambda_s = 0.1;
    EXPECT_THROW(extra.validate(16), InvalidArgument);
    for (auto v : {Variant::relu, Variant::relu_new, Variant::topk, Variant::batch_topk, Variant::gated,
                   Variant::p_anneal, Variant::matryoshka, Variant::adaptive_k})
        EXPECT_EQ(parse_variant(variant_name(v)), v);
    EXPECT_THROW(parse_variant("jumprelu"), InvalidArgument);
}

TEST(EncodeBatch, AgreesWithPerVectorEncoders) {
    const SaeParams p = random_params(6, 24, 27, true);
    Rng rng(28);
    const Matrix X = randn(rng, 4, 6);
    const auto relu = encode_batch(X, p, VariantConfig::make_penalty(Variant::relu, 0.1), nullptr);
    const auto topk = encode_batch(X, p, VariantConfig::make_topk(5), nullptr);
    const auto gated = encode_batch(X, p, VariantConfig::make_penalty(Variant::gated, 0.1), nullptr);
    for (Eigen::Index i = 0; i < 4; ++i) {
        const Vector x = X.row(i).transpose();
        EXPECT_LT((Vector(relu.Z.row(i).transpose()) - encode_relu(x, p)).norm(), 1e-12);
        EXPECT_LT((Vector(topk.Z.row(i).transpose()) - topk_select(pre_activation(x, p, true), 5)).norm(), 1e-12);
        EXPECT_LT((Vector(gated.Z.row(i).transpose()) - encode_gated(x, p)).norm(), 1e-12);
        EXPECT_EQ(topk.k[i], 5);
    }
    AdaptiveKConfig cfg{2, 4, 10, 0.6, 0.0, 10.0, KMapping::sigmoid_range};
    EXPECT_THROW(encode_batch(X, p, VariantConfig::make_adaptive(cfg), nullptr), InvalidArgument);
}

TEST(SaeFile, RoundTripStoresFloat32) {
    testutil::TempDir dir;
    SaeCheckpoint ck{VariantConfig::make_penalty(Variant::gated, 0.5), random_params(5, 11, 29, true)};
    save_sae(ck, dir / "m.aksa");
    const auto back = load_sae(dir / "m.aksa");
    EXPECT_EQ(back.config.variant, Variant::gated);
    EXPECT_EQ(back.config.lambda_s, 0.5);
    auto f32 = [](const Matrix& m) { return Matrix(m.cast<float>().cast<double>()); };
    EXPECT_EQ(back.params.W_enc, f32(ck.params.W_enc));
    EXPECT_EQ(back.params.W_dec, f32(ck.params.W_dec));
    EXPECT_EQ(back.params.b_pre, f32(ck.params.b_pre));
    EXPECT_EQ(back.params.r, f32(ck.params.r));
    EXPECT_EQ(back.params.b_mag, f32(ck.params.b_mag));

    const std::string bytes = testutil::slurp(dir / "m.aksa");
    EXPECT_EQ(bytes.substr(0, 4), "AKSA");
    testutil::spit(dir / "t.aksa", bytes.substr(0, bytes.size() - 1));
    EXPECT_THROW(load_sae(dir / "t.aksa"), FormatError);
    EXPECT_EQ(sae_manifest(ck)["config"]["variant"], "gated");
    EXPECT_EQ(sae_manifest(ck)["M"], 11);
}

TEST(SaeFile, AdaptiveConfigSurvives) {
    testutil::TempDir dir;
    AdaptiveKConfig cfg{4, 26, 48, 0.6, 0.0, 10.0, KMapping::base_k_centered};
    SaeCheckpoint ck{VariantConfig::make_adaptive(cfg), random_params(4, 64, 30)};
    save_sae(ck, dir / "a.aksa");
    const auto back = load_sae(dir / "a.aksa");
    ASSERT_TRUE(back.config.adaptive.has_value());
    EXPECT_EQ(back.config.adaptive->k_max, 48);
    EXPECT_EQ(back.config.adaptive->base_k, 26);
    EXPECT_EQ(back.config.adaptive->mapping, KMapping::base_k_centered);
}
