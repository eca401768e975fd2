#include "adaptivek/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace adaptivek {

namespace {

constexpr std::uint64_t atoms_stream = 0xA70;
constexpr std::uint64_t direction_stream = 0xD1E;
constexpr std::uint64_t sample_stream_base = 0x5A30;

Vector random_unit(Rng& rng, int d) {
    Vector v(d);
    for (;;) {
        for (int i = 0; i < d; ++i) v(i) = rng.normal();
        const double n = v.norm();
        if (n > 1e-12) return v / n;
    }
}

} // namespace

void SyntheticSpec::validate() const {
    require(d >= 1, "synthetic d must be >= 1");
    require(M_true >= 1, "M_true must be >= 1");
    require(support_min >= 1 && support_min <= support_max && support_max <= M_true,
            "need 1 <= support_min <= support_max <= M_true");
    require(coeff_low > 0.0 && coeff_low <= coeff_high, "need 0 < coeff_low <= coeff_high");
    require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), "noise_sigma must be >= 0");
    require(std::isfinite(probe_direction_scale), "probe_direction_scale must be finite");
}

nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s) {
    return {{"d", s.d},
            {"M_true", s.M_true},
            {"support_min", s.support_min},
            {"support_max", s.support_max},
            {"coeff_low", s.coeff_low},
            {"coeff_high", s.coeff_high},
            {"noise_sigma", s.noise_sigma},
            {"probe_direction_scale", s.probe_direction_scale},
            {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    try {
        s.d = j.value("d", s.d);
        s.M_true = j.value("M_true", s.M_true);
        s.support_min = j.value("support_min", s.support_min);
        s.support_max = j.value("support_max", s.support_max);
        s.coeff_low = j.value("coeff_low", s.coeff_low);
        s.coeff_high = j.value("coeff_high", s.coeff_high);
        s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
        s.probe_direction_scale = j.value("probe_direction_scale", s.probe_direction_scale);
        s.seed = j.value("seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("synthetic spec: ") + e.what());
    }
    return s;
}

SyntheticDictionary gen_dictionary(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticDictionary dict;
    Rng rng(derive_seed(spec.seed, atoms_stream));
    dict.atoms.resize(spec.d, spec.M_true);
    for (int j = 0; j < spec.M_true; ++j) dict.atoms.col(j) = random_unit(rng, spec.d);
    Rng vrng(derive_seed(spec.seed, direction_stream));
    dict.direction = random_unit(vrng, spec.d);
    if (spec.M_true > 1) {
        Matrix gram = (dict.atoms.transpose() * dict.atoms).cwiseAbs();
        gram.diagonal().setZero();
        dict.coherence = gram.maxCoeff();
    }
    return dict;
}

int support_size(const SyntheticSpec& spec, double c) {
    const double t = std::clamp(c, 0.0, 10.0) / 10.0;
    return static_cast<int>(std::lround(spec.support_min + t * (spec.support_max - spec.support_min)));
}

SyntheticSample sample_record(const SyntheticSpec& spec, const SyntheticDictionary& dict, Rng& rng,
                              std::optional<double> forced_c) {
    require_dims(dict.atoms.rows() == spec.d && dict.atoms.cols() == spec.M_true, "dictionary does not match spec");
    SyntheticSample s;
    s.c = forced_c ? *forced_c : rng.uniform(0.0, 10.0);
    require(s.c >= 0.0 && s.c <= 10.0, "complexity must lie in [0, 10]");
    const int n = support_size(spec, s.c);

    // Partial Fisher-Yates for n distinct atoms.
    std::vector<int> pool(static_cast<std::size_t>(spec.M_true));
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < n; ++i) {
        const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.M_true - i)));
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    s.support.assign(pool.begin(), pool.begin() + n);
    std::sort(s.support.begin(), s.support.end());

    s.coefficients.resize(n);
    s.x = Vector::Zero(spec.d);
    for (int i = 0; i < n; ++i) {
        s.coefficients(i) = rng.uniform(spec.coeff_low, spec.coeff_high);
        s.x += s.coefficients(i) * dict.atoms.col(s.support[static_cast<std::size_t>(i)]);
    }
    s.x += (spec.probe_direction_scale * s.c) * dict.direction;
    if (spec.noise_sigma > 0.0)
        for (int i = 0; i < spec.d; ++i) s.x(i) += spec.noise_sigma * rng.normal();
    return s;
}

SyntheticData gen_samples(const SyntheticSpec& spec, const SyntheticDictionary& dict, std::uint64_t n,
                          std::uint64_t stream) {
    spec.validate();
    SyntheticData out{Dataset(static_cast<std::uint32_t>(spec.d), true), {}};
    out.supports.reserve(n);
    Rng rng(derive_seed(spec.seed, sample_stream_base + stream));
    std::vector<float> row(static_cast<std::size_t>(spec.d));
    for (std::uint64_t i = 0; i < n; ++i) {
        SyntheticSample s = sample_record(spec, dict, rng);
        for (int j = 0; j < spec.d; ++j) row[static_cast<std::size_t>(j)] = static_cast<float>(s.x(j));
        out.data.push_back(row, static_cast<float>(s.c));
        out.supports.push_back(std::move(s.support));
    }
    return out;
}

SyntheticData gen_dataset(const SyntheticSpec& spec, std::uint64_t n, const std::filesystem::path& path,
                          std::uint64_t stream) {
    const SyntheticDictionary dict = gen_dictionary(spec);
    SyntheticData out = gen_samples(spec, dict, n, stream);
    write_dataset(out.data, path);

    nlohmann::json atoms = nlohmann::json::array();
    for (int j = 0; j < spec.M_true; ++j)
        atoms.push_back(std::vector<double>(dict.atoms.col(j).data(), dict.atoms.col(j).data() + spec.d));
    write_sidecar(path, {{"generator", "synthetic"},
                         {"spec", synthetic_spec_to_json(spec)},
                         {"stream", stream},
                         {"count", n},
                         {"coherence", dict.coherence},
                         {"direction", std::vector<double>(dict.direction.data(), dict.direction.data() + spec.d)},
                         {"dictionary", atoms}});
    return out;
}

} // namespace adaptivek
