#pragma once

// Planted sparse-dictionary data with a known complexity signal: support size
// grows linearly with c and c is also added along a fixed direction v.

#include "adaptivek/activation_store.hpp"
#include "adaptivek/common.hpp"
#include "adaptivek/rng.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <vector>

namespace adaptivek {

struct SyntheticSpec {
    int d = 64;
    int M_true = 96;
    int support_min = 4;
    int support_max = 24;
    double coeff_low = 0.5;
    double coeff_high = 1.5;
    double noise_sigma = 0.01;
    double probe_direction_scale = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s);
/// Missing keys keep their defaults.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

struct SyntheticDictionary {
    Matrix atoms;      // d x M_true, unit columns
    Vector direction;  // planted complexity direction v, unit norm
    double coherence = 0.0;  // max |<a_i, a_j>| over i != j
};

SyntheticDictionary gen_dictionary(const SyntheticSpec& spec);

struct SyntheticSample {
    Vector x;
    double c = 0.0;
    std::vector<int> support;  // ascending atom indices
    Vector coefficients;       // aligned with support
};

int support_size(const SyntheticSpec& spec, double c);

SyntheticSample sample_record(const SyntheticSpec& spec, const SyntheticDictionary& dict, Rng& rng,
                              std::optional<double> forced_c = std::nullopt);

struct SyntheticData {
    Dataset data;
    std::vector<std::vector<int>> supports;
};

/// n records drawn from an independent stream per `stream` id, so train and
/// test splits from the same spec never share samples.
SyntheticData gen_samples(const SyntheticSpec& spec, const SyntheticDictionary& dict, std::uint64_t n,
                          std::uint64_t stream = 0);

/// Writes n records and a sidecar holding the generator settings, dictionary and direction.
SyntheticData gen_dataset(const SyntheticSpec& spec, std::uint64_t n, const std::filesystem::path& path,
                          std::uint64_t stream = 0);

} // namespace adaptivek
