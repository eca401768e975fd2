#pragma once

// Reconstruction metrics, per-complexity-bin k statistics and the sparsity
// sweep harness.

#include "adaptivek/activation_store.hpp"
#include "adaptivek/complexity_probe.hpp"
#include "adaptivek/sae_models.hpp"
#include "adaptivek/training.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace adaptivek {

double l2_loss(const Matrix& X, const Matrix& X_hat);
/// Summed per-dimension variance of X - X_hat over that of X (smaller is better).
double variance_unexplained(const Matrix& X, const Matrix& X_hat);
/// Mean of 1 - cos(x, x_hat); rows with a zero reconstruction contribute 1.
double cosine_loss(const Matrix& X, const Matrix& X_hat);
double l2_ratio(const Matrix& X, const Matrix& X_hat);

struct BinStats {
    std::array<std::uint64_t, complexity_bins> count{};
    std::array<double, complexity_bins> mean_k{};   // NaN for empty bins
    std::array<double, complexity_bins> mean_l0{};  // NaN for empty bins
};

/// Groups (c, k, L0) triples into unit-width bins over [0, 10].
BinStats k_by_complexity(const Vector& c, const std::vector<int>& k, const std::vector<int>& l0);

struct MetricsReport {
    double l2_loss = 0.0;
    double variance_unexplained = 0.0;
    double cosine_loss = 0.0;
    double l2_ratio = 0.0;
    double mean_l0 = 0.0;
    std::optional<BinStats> bins;  // binned on predicted c (adaptive) or labels
    std::uint64_t rows = 0;
};

nlohmann::json metrics_to_json(const MetricsReport& m);

/// Encodes and reconstructs the dataset in fixed chunks and reports metrics.
MetricsReport evaluate(const SaeCheckpoint& sae, const ProbeModel* probe, const Dataset& data);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepPoint {
    VariantConfig variant;
    std::string setting;  // k value, lambda_s, or the adaptive range
};

std::string sweep_setting_label(const VariantConfig& v);

struct SweepSpec {
    std::vector<SweepPoint> points;
    TrainConfig base;  // everything but the variant; shared by all runs
    std::optional<ProbeModel> probe;  // reused by adaptive runs when set
};

/// Named grids: "paper-k-grid" (TopK) and "penalty-grid" (penalty baselines).
std::vector<SweepPoint> sweep_preset(const std::string& name);

struct SweepRow {
    std::string variant;
    std::string setting;
    std::optional<MetricsReport> metrics;  // empty when the run failed
    std::string error;
    std::uint64_t seed = 0;
    int steps = 0;
};

/// Number of worker threads: ADAPTIVEK_THREADS if set and positive, else the
/// hardware concurrency.
unsigned default_thread_count();

/// Trains and evaluates every point with the same seed and data order. Runs
/// execute on up to `threads` workers; rows come back in spec order. A failed
/// run is recorded in its row and does not stop the sweep.
std::vector<SweepRow> pareto_sweep(const SweepSpec& spec, std::shared_ptr<const Dataset> train_data,
                                   const Dataset& test_data, unsigned threads = 0);

std::string sweep_csv(const std::vector<SweepRow>& rows);
nlohmann::json sweep_json(const std::vector<SweepRow>& rows);
void write_text(const std::filesystem::path& path, const std::string& text);

} // namespace adaptivek
