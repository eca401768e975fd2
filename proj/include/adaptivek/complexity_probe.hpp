#pragma once

// Linear complexity probe: closed-form ridge regression on mean-centered data,
// k-fold cross-validation over a regularization grid, and probe quality metrics.

#include "adaptivek/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <vector>

namespace adaptivek {

struct ProbeModel {
    Vector w;
    double b = 0.0;
    double lambda = 0.0;

    Eigen::Index d_model() const { return w.size(); }
};

/// Ridge fit. The bias is recovered from the column means, so lambda never
/// penalizes it: w = (Ac'Ac + lambda I)^-1 Ac'yc, b = mean(y) - w'mean(A).
ProbeModel fit_ridge(const Matrix& A, const Vector& y, double lambda);

double predict(const ProbeModel& probe, const Eigen::Ref<const Vector>& x);
Vector predict_rows(const ProbeModel& probe, const Matrix& X);

inline const std::vector<double> default_lambda_grid = {0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0};

struct CvTable {
    std::vector<double> lambdas;
    std::vector<double> mean_rmse;
    double selected_lambda = 0.0;
    ProbeModel model;  // refit on all rows at selected_lambda
};

/// Folds are contiguous blocks of a seeded shuffle of the rows. Ties in mean
/// RMSE go to the larger lambda.
CvTable cross_validate(const Matrix& A, const Vector& y, const std::vector<double>& lambda_grid,
                       int folds = 5, std::uint64_t seed = 0);

struct ProbeMetrics {
    double rmse = 0.0;
    std::optional<double> pearson;   // empty when either input has zero variance
    std::optional<double> spearman;
};

ProbeMetrics probe_metrics(const Vector& predicted, const Vector& actual);

/// Fractional ranks, ties share their average rank (1-based).
Vector fractional_ranks(const Vector& v);

void save_probe(const ProbeModel& probe, const std::filesystem::path& path);
ProbeModel load_probe(const std::filesystem::path& path);
nlohmann::json probe_to_json(const ProbeModel& probe);

} // namespace adaptivek
