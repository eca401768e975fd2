#include "adaptivek/complexity_probe.hpp"
#include "adaptivek/rng.hpp"
#include "binary_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

namespace adaptivek {

namespace {

using detail::get_le;
using detail::put_le;

constexpr char probe_magic[4] = {'A', 'K', 'P', 'B'};
constexpr std::uint32_t probe_version = 1;

void check_finite(const Matrix& A, const Vector& y) {
    if (!A.allFinite() || !y.allFinite()) throw NumericError("ridge inputs must be finite");
}

double pearson_raw(const Vector& a, const Vector& b, bool& defined) {
    const Vector ac = a.array() - a.mean();
    const Vector bc = b.array() - b.mean();
    const double na = ac.norm(), nb = bc.norm();
    defined = na > 0.0 && nb > 0.0;
    return defined ? ac.dot(bc) / (na * nb) : 0.0;
}

} // namespace

ProbeModel fit_ridge(const Matrix& A, const Vector& y, double lambda) {
    require(A.rows() >= 1, "ridge needs at least one row");
    require_dims(A.rows() == y.size(), "ridge: A rows and y length differ");
    require(lambda >= 0.0 && std::isfinite(lambda), "ridge: lambda must be finite and >= 0");
    check_finite(A, y);

    const RowVector a_mean = A.colwise().mean();
    const double y_mean = y.mean();
    const Matrix Ac = A.rowwise() - a_mean;
    const Vector yc = y.array() - y_mean;

    Matrix gram = Ac.transpose() * Ac;
    gram.diagonal().array() += lambda;
    const Eigen::LLT<Matrix> llt(gram);
    if (llt.info() != Eigen::Success || (lambda == 0.0 && llt.rcond() < 1e-13))
        throw NumericError("ridge system is ill-conditioned (rank-deficient activations at lambda = " +
                           std::to_string(lambda) + ")");

    ProbeModel m;
    m.w = llt.solve(Ac.transpose() * yc);
    m.b = y_mean - a_mean.dot(m.w);
    m.lambda = lambda;
    if (!m.w.allFinite() || !std::isfinite(m.b)) throw NumericError("ridge solution is not finite");
    return m;
}

double predict(const ProbeModel& probe, const Eigen::Ref<const Vector>& x) {
    require_dims(x.size() == probe.w.size(), "probe dimension mismatch");
    return probe.w.dot(x) + probe.b;
}

Vector predict_rows(const ProbeModel& probe, const Matrix& X) {
    require_dims(X.cols() == probe.w.size(), "probe dimension mismatch");
    return (X * probe.w).array() + probe.b;
}

CvTable cross_validate(const Matrix& A, const Vector& y, const std::vector<double>& lambda_grid, int folds,
                       std::uint64_t seed) {
    require(folds >= 2, "cross-validation needs at least 2 folds");
    require(!lambda_grid.empty(), "lambda grid is empty");
    require_dims(A.rows() == y.size(), "A rows and y length differ");
    const auto n = static_cast<std::size_t>(A.rows());
    require(n >= static_cast<std::size_t>(folds), "fewer rows than folds");

    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    Rng rng(seed);
    rng.shuffle(std::span<std::uint32_t>(perm));

    CvTable table;
    table.lambdas = lambda_grid;
    table.mean_rmse.assign(lambda_grid.size(), 0.0);

    for (int f = 0; f < folds; ++f) {
        const std::size_t lo = n * static_cast<std::size_t>(f) / static_cast<std::size_t>(folds);
        const std::size_t hi = n * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(folds);
        if (hi == lo) throw InvalidArgument("fold " + std::to_string(f) + " has no test points");

        Matrix A_train(static_cast<Eigen::Index>(n - (hi - lo)), A.cols());
        Vector y_train(A_train.rows());
        Matrix A_test(static_cast<Eigen::Index>(hi - lo), A.cols());
        Vector y_test(A_test.rows());
        Eigen::Index tr = 0, te = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = static_cast<Eigen::Index>(perm[i]);
            if (i >= lo && i < hi) {
                A_test.row(te) = A.row(row);
                y_test(te++) = y(row);
            } else {
                A_train.row(tr) = A.row(row);
                y_train(tr++) = y(row);
            }
        }
        for (std::size_t l = 0; l < lambda_grid.size(); ++l) {
            const ProbeModel m = fit_ridge(A_train, y_train, lambda_grid[l]);
            const Vector resid = predict_rows(m, A_test) - y_test;
            table.mean_rmse[l] += std::sqrt(resid.squaredNorm() / static_cast<double>(resid.size()));
        }
    }
    for (double& r : table.mean_rmse) r /= folds;

    const double best = *std::min_element(table.mean_rmse.begin(), table.mean_rmse.end());
    const double tie_tol = 1e-12 * std::max(1.0, std::abs(best));
    bool found = false;
    for (std::size_t l = 0; l < lambda_grid.size(); ++l) {
        if (table.mean_rmse[l] - best <= tie_tol && (!found || lambda_grid[l] > table.selected_lambda)) {
            table.selected_lambda = lambda_grid[l];
            found = true;
        }
    }
    table.model = fit_ridge(A, y, table.selected_lambda);
    return table;
}

Vector fractional_ranks(const Vector& v) {
    const auto n = static_cast<std::size_t>(v.size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v(a) < v(b); });
    Vector ranks(v.size());
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v(idx[j + 1]) == v(idx[i])) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks(idx[k]) = avg;
        i = j + 1;
    }
    return ranks;
}

ProbeMetrics probe_metrics(const Vector& predicted, const Vector& actual) {
    require_dims(predicted.size() == actual.size(), "metric vectors differ in length");
    require(predicted.size() >= 2, "metrics need at least two points");
    ProbeMetrics m;
    m.rmse = std::sqrt((predicted - actual).squaredNorm() / static_cast<double>(predicted.size()));
    bool defined = false;
    const double p = pearson_raw(predicted, actual, defined);
    if (defined) m.pearson = p;
    const double s = pearson_raw(fractional_ranks(predicted), fractional_ranks(actual), defined);
    if (defined) m.spearman = s;
    return m;
}

void save_probe(const ProbeModel& probe, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(probe_magic, 4);
    put_le(out, probe_version);
    put_le(out, static_cast<std::uint32_t>(probe.w.size()));
    put_le(out, std::bit_cast<std::uint64_t>(probe.lambda));
    put_le(out, std::bit_cast<std::uint64_t>(probe.b));
    for (Eigen::Index i = 0; i < probe.w.size(); ++i) put_le(out, std::bit_cast<std::uint64_t>(probe.w(i)));
    if (!out) throw IoError("write failed for " + path.string());
}

ProbeModel load_probe(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || !std::equal(magic, magic + 4, probe_magic))
        throw FormatError(path.string() + ": not an AKPB probe file");
    if (get_le<std::uint32_t>(in) != probe_version) throw FormatError(path.string() + ": unsupported probe version");
    const auto d = get_le<std::uint32_t>(in);
    ProbeModel m;
    m.lambda = std::bit_cast<double>(get_le<std::uint64_t>(in));
    m.b = std::bit_cast<double>(get_le<std::uint64_t>(in));
    m.w.resize(d);
    for (std::uint32_t i = 0; i < d; ++i) m.w(i) = std::bit_cast<double>(get_le<std::uint64_t>(in));
    if (in.peek() != EOF) throw FormatError(path.string() + ": trailing bytes after probe");
    if (!m.w.allFinite() || m.lambda < 0.0) throw FormatError(path.string() + ": invalid probe values");
    return m;
}

nlohmann::json probe_to_json(const ProbeModel& probe) {
    return {{"d_model", probe.w.size()},
            {"lambda", probe.lambda},
            {"b", probe.b},
            {"w", std::vector<double>(probe.w.data(), probe.w.data() + probe.w.size())}};
}

} // namespace adaptivek
