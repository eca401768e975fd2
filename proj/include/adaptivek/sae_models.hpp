#pragma once

// Sparse autoencoder forward passes. One parameter set serves every variant:
//   pre  = W_enc (x - b_pre) + b_enc
//   x̂    = W_dec z + b_pre
// The AdaptiveK encoder drops b_enc and picks k per input from a linear
// complexity probe. Gated adds a magnitude rescale r and two biases.

#include "adaptivek/common.hpp"
#include "adaptivek/complexity_probe.hpp"
#include "adaptivek/rng.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

namespace adaptivek {

enum class Variant : std::uint32_t {
    relu = 0,
    relu_new = 1,
    topk = 2,
    batch_topk = 3,
    gated = 4,
    p_anneal = 5,
    matryoshka = 6,
    adaptive_k = 7,
};

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

/// Variants whose sparsity comes from a top-k selection rather than a penalty.
bool is_topk_family(Variant v);

enum class KMapping : std::uint32_t {
    sigmoid_range = 0,    // k_min + sigmoid(...) (k_max - k_min)
    base_k_centered = 1,  // same sigmoid, rescaled piecewise so the midpoint lands on base_k
};

std::string_view k_mapping_name(KMapping m);
KMapping parse_k_mapping(std::string_view name);

struct AdaptiveKConfig {
    int k_min = 20;
    int base_k = 80;
    int k_max = 320;
    double s = 0.6;
    double c_min = 0.0;
    double c_max = 10.0;
    KMapping mapping = KMapping::sigmoid_range;

    void validate(Eigen::Index dict_size) const;
};

struct VariantConfig {
    Variant variant = Variant::topk;
    std::optional<int> k;                 // topk, batch_topk, matryoshka
    std::optional<double> lambda_s;       // relu, relu_new, gated, p_anneal
    std::optional<double> p_end;          // p_anneal
    std::vector<int> prefixes;            // matryoshka, ascending, last == M
    std::optional<AdaptiveKConfig> adaptive;

    static VariantConfig make_topk(int k) { return {Variant::topk, k, {}, {}, {}, {}}; }
    static VariantConfig make_batch_topk(int k) { return {Variant::batch_topk, k, {}, {}, {}, {}}; }
    static VariantConfig make_matryoshka(int k, std::vector<int> prefixes) {
        return {Variant::matryoshka, k, {}, {}, std::move(prefixes), {}};
    }
    static VariantConfig make_penalty(Variant v, double lambda_s, double p_end = 0.2) {
        VariantConfig c{v, {}, lambda_s, {}, {}, {}};
        if (v == Variant::p_anneal) c.p_end = p_end;
        return c;
    }
    static VariantConfig make_adaptive(AdaptiveKConfig cfg) { return {Variant::adaptive_k, {}, {}, {}, {}, cfg}; }

    /// Checks that exactly the fields relevant to the variant are set.
    void validate(Eigen::Index dict_size) const;
};

nlohmann::json variant_config_to_json(const VariantConfig& cfg);

struct SaeParams {
    Matrix W_enc;  // M x d
    Matrix W_dec;  // d x M
    Vector b_pre;  // d
    Vector b_enc;  // M
    Vector r;      // M, gated magnitude rescale (log scale)
    Vector b_gate; // M, gated
    Vector b_mag;  // M, gated

    Eigen::Index d() const { return W_dec.rows(); }
    Eigen::Index M() const { return W_dec.cols(); }
    bool has_gate() const { return r.size() > 0; }

    void validate() const;

    /// Gaussian decoder with unit columns, encoder tied to the decoder transpose,
    /// zero biases.
    static SaeParams init(Eigen::Index d, Eigen::Index M, bool gated, std::uint64_t seed);
};

Vector decode(const Eigen::Ref<const Vector>& z, const SaeParams& params);
/// Row-wise decode of an N x M code matrix.
Matrix decode_rows(const Matrix& Z, const SaeParams& params);

/// W_enc (x - b_pre), plus b_enc when with_bias.
Vector pre_activation(const Eigen::Ref<const Vector>& x, const SaeParams& params, bool with_bias);
Matrix pre_activation_rows(const Matrix& X, const SaeParams& params, bool with_bias);

Vector encode_relu(const Eigen::Ref<const Vector>& x, const SaeParams& params);

/// Indices kept by top-k over ReLU(pre): largest first, ties to the lower index.
std::vector<Eigen::Index> topk_indices(const Eigen::Ref<const Vector>& pre, int k);
Vector topk_select(const Eigen::Ref<const Vector>& pre, int k);

/// Keeps the N*k largest post-ReLU values pooled over the batch. Ties go to the
/// lower row-major position.
Matrix batch_topk_select(const Matrix& pre, int k);

int adaptive_k(double c, const AdaptiveKConfig& cfg);

struct AdaptiveEncoding {
    Vector z;
    int k = 0;
    double c = 0.0;
};

AdaptiveEncoding encode_adaptive(const Eigen::Ref<const Vector>& x, const SaeParams& params,
                                 const ProbeModel& probe, const AdaptiveKConfig& cfg);

Vector encode_gated(const Eigen::Ref<const Vector>& x, const SaeParams& params);

/// One reconstruction per prefix; each prefix m runs BatchTopK over latents [0, m).
std::vector<Matrix> matryoshka_forward(const Matrix& X, const SaeParams& params, const std::vector<int>& prefixes,
                                       int k);

/// Scales every decoder column to unit norm and the matching encoder row (and
/// per-latent biases) by the inverse factor, so each latent's contribution to x̂
/// is unchanged. Zero columns are replaced by random unit vectors from rng.
void normalize_decoder(SaeParams& params, Rng& rng);

struct BatchEncoding {
    Matrix Z;                 // N x M
    std::vector<int> k;       // allocated k per row (0 for penalty variants)
    Vector c;                 // predicted complexity per row (adaptive only)
};

/// Inference-time encoding of a batch for any variant. The probe is required
/// for adaptive_k.
BatchEncoding encode_batch(const Matrix& X, const SaeParams& params, const VariantConfig& cfg,
                           const ProbeModel* probe);

struct SaeCheckpoint {
    VariantConfig config;
    SaeParams params;
};

void save_sae(const SaeCheckpoint& ckpt, const std::filesystem::path& path);
SaeCheckpoint load_sae(const std::filesystem::path& path);
nlohmann::json sae_manifest(const SaeCheckpoint& ckpt);

} // namespace adaptivek
