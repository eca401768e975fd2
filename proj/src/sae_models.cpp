#include "adaptivek/sae_models.hpp"
#include "binary_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

namespace adaptivek {

namespace {

using detail::get_f32;
using detail::get_f64;
using detail::get_le;
using detail::put_f32;
using detail::put_f64;
using detail::put_le;

constexpr char sae_magic[4] = {'A', 'K', 'S', 'A'};
constexpr std::uint32_t sae_version = 1;

constexpr std::array<std::pair<Variant, std::string_view>, 8> variant_names = {{
    {Variant::relu, "relu"},
    {Variant::relu_new, "relu_new"},
    {Variant::topk, "topk"},
    {Variant::batch_topk, "batch_topk"},
    {Variant::gated, "gated"},
    {Variant::p_anneal, "p_anneal"},
    {Variant::matryoshka, "matryoshka"},
    {Variant::adaptive_k, "adaptive_k"},
}};

double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// Selection order: larger value first, lower index on ties.
struct ValueIndex {
    double value;
    Eigen::Index index;
    bool operator<(const ValueIndex& o) const { return value > o.value || (value == o.value && index < o.index); }
};

std::vector<Eigen::Index> select_largest(std::vector<ValueIndex>& cands, std::size_t keep) {
    if (cands.size() > keep) {
        std::nth_element(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end());
        cands.resize(keep);
    }
    std::vector<Eigen::Index> out;
    out.reserve(cands.size());
    for (const auto& c : cands) out.push_back(c.index);
    std::sort(out.begin(), out.end());
    return out;
}

void write_vector(std::ostream& out, const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) put_f32(out, v(i));
}

Vector read_vector(std::istream& in, Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = get_f32(in);
    return v;
}

void write_matrix_row_major(std::ostream& out, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) put_f32(out, m(i, j));
}

Matrix read_matrix_row_major(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = get_f32(in);
    return m;
}

} // namespace

std::string_view variant_name(Variant v) {
    for (const auto& [tag, name] : variant_names)
        if (tag == v) return name;
    throw InvalidArgument("unknown variant tag");
}

Variant parse_variant(std::string_view name) {
    for (const auto& [tag, n] : variant_names)
        if (n == name) return tag;
    throw InvalidArgument("unknown variant '" + std::string(name) + "'");
}

bool is_topk_family(Variant v) {
    return v == Variant::topk || v == Variant::batch_topk || v == Variant::matryoshka || v == Variant::adaptive_k;
}

std::string_view k_mapping_name(KMapping m) { return m == KMapping::sigmoid_range ? "sigmoid_range" : "base_k_centered"; }

KMapping parse_k_mapping(std::string_view name) {
    if (name == "sigmoid_range") return KMapping::sigmoid_range;
    if (name == "base_k_centered") return KMapping::base_k_centered;
    throw InvalidArgument("unknown k mapping '" + std::string(name) + "'");
}

void AdaptiveKConfig::validate(Eigen::Index dict_size) const {
    require(k_min >= 1, "k_min must be >= 1");
    require(k_min <= base_k && base_k <= k_max, "need k_min <= base_k <= k_max");
    require(dict_size <= 0 || k_max <= dict_size, "k_max exceeds dictionary size");
    require(c_min < c_max, "need c_min < c_max");
    require(s > 0.0 && std::isfinite(s), "steepness must be positive");
}

void VariantConfig::validate(Eigen::Index dict_size) const {
    const bool wants_k = variant == Variant::topk || variant == Variant::batch_topk || variant == Variant::matryoshka;
    const bool wants_lambda = variant == Variant::relu || variant == Variant::relu_new || variant == Variant::gated ||
                              variant == Variant::p_anneal;
    const std::string name(variant_name(variant));
    require(wants_k == k.has_value(), name + (wants_k ? ": k is required" : ": k does not apply"));
    require(wants_lambda == lambda_s.has_value(),
            name + (wants_lambda ? ": lambda_s is required" : ": lambda_s does not apply"));
    require((variant == Variant::p_anneal) == p_end.has_value(), name + ": p_end applies to p_anneal only");
    require((variant == Variant::matryoshka) == !prefixes.empty(), name + ": prefixes apply to matryoshka only");
    require((variant == Variant::adaptive_k) == adaptive.has_value(), name + ": adaptive config mismatch");

    if (k) require(*k >= 1 && (dict_size <= 0 || *k <= dict_size), name + ": k out of range [1, M]");
    if (lambda_s) require(*lambda_s >= 0.0 && std::isfinite(*lambda_s), name + ": lambda_s must be >= 0");
    if (p_end) require(*p_end > 0.0 && *p_end <= 1.0, "p_end must be in (0, 1]");
    if (!prefixes.empty()) {
        require(prefixes.front() >= 1, "matryoshka prefixes must be >= 1");
        for (std::size_t i = 1; i < prefixes.size(); ++i)
            require(prefixes[i] > prefixes[i - 1], "matryoshka prefixes must be strictly ascending");
        require(dict_size <= 0 || prefixes.back() == dict_size, "last matryoshka prefix must equal M");
    }
    if (adaptive) adaptive->validate(dict_size);
}

nlohmann::json variant_config_to_json(const VariantConfig& cfg) {
    nlohmann::json j{{"variant", variant_name(cfg.variant)}};
    if (cfg.k) j["k"] = *cfg.k;
    if (cfg.lambda_s) j["lambda_s"] = *cfg.lambda_s;
    if (cfg.p_end) j["p_end"] = *cfg.p_end;
    if (!cfg.prefixes.empty()) j["prefixes"] = cfg.prefixes;
    if (cfg.adaptive) {
        const auto& a = *cfg.adaptive;
        j["adaptive"] = {{"k_min", a.k_min},   {"base_k", a.base_k}, {"k_max", a.k_max},
                         {"steepness", a.s},   {"c_min", a.c_min},   {"c_max", a.c_max},
                         {"k_mapping", k_mapping_name(a.mapping)}};
    }
    return j;
}

// ---------------------------------------------------------------------------

void SaeParams::validate() const {
    const auto dd = d(), m = M();
    require_dims(W_enc.rows() == m && W_enc.cols() == dd, "W_enc must be M x d");
    require_dims(b_pre.size() == dd, "b_pre must have length d");
    require_dims(b_enc.size() == m, "b_enc must have length M");
    if (has_gate())
        require_dims(r.size() == m && b_gate.size() == m && b_mag.size() == m, "gate vectors must have length M");
}

SaeParams SaeParams::init(Eigen::Index d, Eigen::Index M, bool gated, std::uint64_t seed) {
    require(d >= 1 && M >= 1, "SAE dimensions must be >= 1");
    Rng rng(seed);
    SaeParams p;
    p.W_dec.resize(d, M);
    for (Eigen::Index j = 0; j < M; ++j) {
        for (Eigen::Index i = 0; i < d; ++i) p.W_dec(i, j) = rng.normal();
        p.W_dec.col(j).normalize();
    }
    p.W_enc = p.W_dec.transpose();
    p.b_pre = Vector::Zero(d);
    p.b_enc = Vector::Zero(M);
    if (gated) {
        p.r = Vector::Zero(M);
        p.b_gate = Vector::Zero(M);
        p.b_mag = Vector::Zero(M);
    }
    return p;
}

Vector decode(const Eigen::Ref<const Vector>& z, const SaeParams& params) {
    require_dims(z.size() == params.M(), "decode: code length must equal M");
    return params.W_dec * z + params.b_pre;
}

Matrix decode_rows(const Matrix& Z, const SaeParams& params) {
    require_dims(Z.cols() == params.M(), "decode: code width must equal M");
    return (Z * params.W_dec.transpose()).rowwise() + params.b_pre.transpose();
}

Vector pre_activation(const Eigen::Ref<const Vector>& x, const SaeParams& params, bool with_bias) {
    require_dims(x.size() == params.d(), "encode: input length must equal d");
    Vector pre = params.W_enc * (x - params.b_pre);
    if (with_bias) pre += params.b_enc;
    return pre;
}

Matrix pre_activation_rows(const Matrix& X, const SaeParams& params, bool with_bias) {
    require_dims(X.cols() == params.d(), "encode: input width must equal d");
    Matrix pre = (X.rowwise() - params.b_pre.transpose()) * params.W_enc.transpose();
    if (with_bias) pre.rowwise() += params.b_enc.transpose();
    return pre;
}

Vector encode_relu(const Eigen::Ref<const Vector>& x, const SaeParams& params) {
    return pre_activation(x, params, true).cwiseMax(0.0);
}

std::vector<Eigen::Index> topk_indices(const Eigen::Ref<const Vector>& pre, int k) {
    require(k >= 1 && k <= pre.size(), "top-k: k out of range [1, M]");
    std::vector<ValueIndex> cands;
    for (Eigen::Index j = 0; j < pre.size(); ++j)
        if (pre(j) > 0.0) cands.push_back({pre(j), j});
    return select_largest(cands, static_cast<std::size_t>(k));
}

Vector topk_select(const Eigen::Ref<const Vector>& pre, int k) {
    Vector z = Vector::Zero(pre.size());
    for (auto j : topk_indices(pre, k)) z(j) = pre(j);
    return z;
}

Matrix batch_topk_select(const Matrix& pre, int k) {
    require(pre.rows() >= 1, "batch top-k needs at least one row");
    require(k >= 1 && k <= pre.cols(), "batch top-k: k out of range [1, M]");
    const Eigen::Index M = pre.cols();
    std::vector<ValueIndex> cands;
    for (Eigen::Index i = 0; i < pre.rows(); ++i)
        for (Eigen::Index j = 0; j < M; ++j)
            if (pre(i, j) > 0.0) cands.push_back({pre(i, j), i * M + j});
    Matrix z = Matrix::Zero(pre.rows(), M);
    for (auto flat : select_largest(cands, static_cast<std::size_t>(pre.rows()) * static_cast<std::size_t>(k)))
        z(flat / M, flat % M) = pre(flat / M, flat % M);
    return z;
}

int adaptive_k(double c, const AdaptiveKConfig& cfg) {
    if (std::isnan(c)) c = cfg.c_min;
    const double cc = std::clamp(c, cfg.c_min, cfg.c_max);
    const double u = (cc - cfg.c_min) / (cfg.c_max - cfg.c_min);
    const double sig = sigmoid(cfg.s * (u - 0.5));
    double k = 0.0;
    if (cfg.mapping == KMapping::sigmoid_range) {
        k = cfg.k_min + sig * (cfg.k_max - cfg.k_min);
    } else {
        const double lo = sigmoid(-0.5 * cfg.s), hi = sigmoid(0.5 * cfg.s);
        const double t = (sig - lo) / (hi - lo);
        k = t <= 0.5 ? cfg.k_min + 2.0 * t * (cfg.base_k - cfg.k_min)
                     : cfg.base_k + (2.0 * t - 1.0) * (cfg.k_max - cfg.base_k);
    }
    const long rounded = std::lround(k);
    return static_cast<int>(std::clamp<long>(rounded, cfg.k_min, cfg.k_max));
}

AdaptiveEncoding encode_adaptive(const Eigen::Ref<const Vector>& x, const SaeParams& params, const ProbeModel& probe,
                                 const AdaptiveKConfig& cfg) {
    require_dims(probe.d_model() == params.d(), "probe and SAE disagree on d");
    AdaptiveEncoding out;
    out.c = predict(probe, x);
    out.k = std::min<int>(adaptive_k(out.c, cfg), static_cast<int>(params.M()));
    out.z = topk_select(pre_activation(x, params, false), out.k);
    return out;
}

Vector encode_gated(const Eigen::Ref<const Vector>& x, const SaeParams& params) {
    if (!params.has_gate()) throw InvalidArgument("gated encoding needs gate parameters");
    const Vector base = pre_activation(x, params, false);
    const Vector gate = base + params.b_gate;
    const Vector mag = base.cwiseProduct(params.r.array().exp().matrix()) + params.b_mag;
    return (gate.array() > 0.0).select(mag.cwiseMax(0.0), 0.0);
}

std::vector<Matrix> matryoshka_forward(const Matrix& X, const SaeParams& params, const std::vector<int>& prefixes,
                                       int k) {
    require(!prefixes.empty(), "matryoshka needs at least one prefix");
    for (std::size_t i = 1; i < prefixes.size(); ++i)
        require(prefixes[i] > prefixes[i - 1], "matryoshka prefixes must be strictly ascending");
    require(prefixes.front() >= 1 && prefixes.back() == params.M(), "matryoshka prefixes must end at M");

    const Matrix pre = pre_activation_rows(X, params, true);
    std::vector<Matrix> out;
    for (int m : prefixes) {
        const Matrix z = batch_topk_select(pre.leftCols(m), std::min(k, m));
        out.push_back((z * params.W_dec.leftCols(m).transpose()).rowwise() + params.b_pre.transpose());
    }
    return out;
}

void normalize_decoder(SaeParams& params, Rng& rng) {
    for (Eigen::Index j = 0; j < params.M(); ++j) {
        const double n = params.W_dec.col(j).norm();
        if (!(n > 1e-30) || !std::isfinite(n)) {
            for (Eigen::Index i = 0; i < params.d(); ++i) params.W_dec(i, j) = rng.normal();
            params.W_dec.col(j).normalize();
            continue;
        }
        params.W_dec.col(j) /= n;
        params.W_enc.row(j) *= n;
        params.b_enc(j) *= n;
        if (params.has_gate()) {
            params.b_gate(j) *= n;
            params.b_mag(j) *= n;
        }
    }
}

BatchEncoding encode_batch(const Matrix& X, const SaeParams& params, const VariantConfig& cfg,
                           const ProbeModel* probe) {
    BatchEncoding out;
    const auto N = X.rows();
    out.k.assign(static_cast<std::size_t>(N), 0);
    switch (cfg.variant) {
    case Variant::relu:
    case Variant::relu_new:
    case Variant::p_anneal:
        out.Z = pre_activation_rows(X, params, true).cwiseMax(0.0);
        break;
    case Variant::topk: {
        const Matrix pre = pre_activation_rows(X, params, true);
        out.Z = Matrix::Zero(N, params.M());
        for (Eigen::Index i = 0; i < N; ++i) out.Z.row(i) = topk_select(pre.row(i).transpose(), *cfg.k).transpose();
        std::fill(out.k.begin(), out.k.end(), *cfg.k);
        break;
    }
    case Variant::batch_topk:
    case Variant::matryoshka:
        out.Z = batch_topk_select(pre_activation_rows(X, params, true), *cfg.k);
        std::fill(out.k.begin(), out.k.end(), *cfg.k);
        break;
    case Variant::gated: {
        out.Z.resize(N, params.M());
        for (Eigen::Index i = 0; i < N; ++i) out.Z.row(i) = encode_gated(X.row(i).transpose(), params).transpose();
        break;
    }
    case Variant::adaptive_k: {
        if (!probe) throw InvalidArgument("adaptive_k encoding requires a probe");
        out.Z.resize(N, params.M());
        out.c.resize(N);
        for (Eigen::Index i = 0; i < N; ++i) {
            const auto e = encode_adaptive(X.row(i).transpose(), params, *probe, *cfg.adaptive);
            out.Z.row(i) = e.z.transpose();
            out.k[static_cast<std::size_t>(i)] = e.k;
            out.c(i) = e.c;
        }
        break;
    }
    }
    return out;
}

// ---------------------------------------------------------------------------
// AKSA checkpoints:
//   magic | version u32 | variant u32 | d u32 | M u32
//   W_enc (M x d) | W_dec (d x M) | b_pre | b_enc      all f32, row-major
//   gated: r | b_gate | b_mag                          f32
//   k i32 (0 = unset) | lambda_s f64 (NaN = unset) | p_end f64 (NaN = unset)
//   n_prefixes u32 | prefixes u32...
//   has_adaptive u8 [k_min u32 | base_k u32 | k_max u32 | s f64 | c_min f64 | c_max f64 | mapping u32]

void save_sae(const SaeCheckpoint& ckpt, const std::filesystem::path& path) {
    const auto& p = ckpt.params;
    p.validate();
    ckpt.config.validate(p.M());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(sae_magic, 4);
    put_le(out, sae_version);
    put_le(out, static_cast<std::uint32_t>(ckpt.config.variant));
    put_le(out, static_cast<std::uint32_t>(p.d()));
    put_le(out, static_cast<std::uint32_t>(p.M()));
    write_matrix_row_major(out, p.W_enc);
    write_matrix_row_major(out, p.W_dec);
    write_vector(out, p.b_pre);
    write_vector(out, p.b_enc);
    if (ckpt.config.variant == Variant::gated) {
        write_vector(out, p.r);
        write_vector(out, p.b_gate);
        write_vector(out, p.b_mag);
    }
    const auto& c = ckpt.config;
    put_le(out, static_cast<std::uint32_t>(c.k.value_or(0)));
    put_f64(out, c.lambda_s.value_or(std::nan("")));
    put_f64(out, c.p_end.value_or(std::nan("")));
    put_le(out, static_cast<std::uint32_t>(c.prefixes.size()));
    for (int m : c.prefixes) put_le(out, static_cast<std::uint32_t>(m));
    out.put(c.adaptive ? 1 : 0);
    if (c.adaptive) {
        const auto& a = *c.adaptive;
        put_le(out, static_cast<std::uint32_t>(a.k_min));
        put_le(out, static_cast<std::uint32_t>(a.base_k));
        put_le(out, static_cast<std::uint32_t>(a.k_max));
        put_f64(out, a.s);
        put_f64(out, a.c_min);
        put_f64(out, a.c_max);
        put_le(out, static_cast<std::uint32_t>(a.mapping));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

SaeCheckpoint load_sae(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || !std::equal(magic, magic + 4, sae_magic))
        throw FormatError(path.string() + ": not an AKSA checkpoint");
    if (get_le<std::uint32_t>(in) != sae_version) throw FormatError(path.string() + ": unsupported checkpoint version");
    const auto tag = get_le<std::uint32_t>(in);
    if (tag > static_cast<std::uint32_t>(Variant::adaptive_k)) throw FormatError(path.string() + ": bad variant tag");
    const Eigen::Index d = get_le<std::uint32_t>(in);
    const Eigen::Index M = get_le<std::uint32_t>(in);
    if (d < 1 || M < 1) throw FormatError(path.string() + ": bad dimensions");

    SaeCheckpoint ckpt;
    ckpt.config.variant = static_cast<Variant>(tag);
    auto& p = ckpt.params;
    p.W_enc = read_matrix_row_major(in, M, d);
    p.W_dec = read_matrix_row_major(in, d, M);
    p.b_pre = read_vector(in, d);
    p.b_enc = read_vector(in, M);
    if (ckpt.config.variant == Variant::gated) {
        p.r = read_vector(in, M);
        p.b_gate = read_vector(in, M);
        p.b_mag = read_vector(in, M);
    }
    auto& c = ckpt.config;
    if (const auto k = get_le<std::uint32_t>(in); k > 0) c.k = static_cast<int>(k);
    if (const double l = get_f64(in); !std::isnan(l)) c.lambda_s = l;
    if (const double pe = get_f64(in); !std::isnan(pe)) c.p_end = pe;
    const auto n_prefix = get_le<std::uint32_t>(in);
    if (n_prefix > static_cast<std::uint32_t>(M)) throw FormatError(path.string() + ": bad prefix count");
    for (std::uint32_t i = 0; i < n_prefix; ++i) c.prefixes.push_back(static_cast<int>(get_le<std::uint32_t>(in)));
    if (get_le<std::uint8_t>(in) == 1) {
        AdaptiveKConfig a;
        a.k_min = static_cast<int>(get_le<std::uint32_t>(in));
        a.base_k = static_cast<int>(get_le<std::uint32_t>(in));
        a.k_max = static_cast<int>(get_le<std::uint32_t>(in));
        a.s = get_f64(in);
        a.c_min = get_f64(in);
        a.c_max = get_f64(in);
        const auto mapping = get_le<std::uint32_t>(in);
        if (mapping > 1) throw FormatError(path.string() + ": bad k mapping");
        a.mapping = static_cast<KMapping>(mapping);
        c.adaptive = a;
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
    try {
        p.validate();
        c.validate(M);
    } catch (const InvalidArgument& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return ckpt;
}

nlohmann::json sae_manifest(const SaeCheckpoint& ckpt) {
    const auto& p = ckpt.params;
    nlohmann::json shapes{{"W_enc", {p.M(), p.d()}}, {"W_dec", {p.d(), p.M()}}, {"b_pre", {p.d()}}, {"b_enc", {p.M()}}};
    if (ckpt.config.variant == Variant::gated) {
        shapes["r"] = {p.M()};
        shapes["b_gate"] = {p.M()};
        shapes["b_mag"] = {p.M()};
    }
    return {{"format", "AKSA"}, {"version", sae_version}, {"d", p.d()},
            {"M", p.M()},       {"shapes", shapes},       {"config", variant_config_to_json(ckpt.config)}};
}

} // namespace adaptivek
