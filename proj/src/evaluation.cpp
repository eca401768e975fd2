#include "adaptivek/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

namespace adaptivek {

namespace {

constexpr Eigen::Index eval_chunk = 4096;

void check_shapes(const Matrix& X, const Matrix& X_hat) {
    require_dims(X.rows() == X_hat.rows() && X.cols() == X_hat.cols(), "metric inputs differ in shape");
}

double summed_variance(const Matrix& A) {
    const Matrix centered = A.rowwise() - A.colwise().mean();
    return centered.squaredNorm() / static_cast<double>(A.rows());
}

std::string fmt(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

} // namespace

double l2_loss(const Matrix& X, const Matrix& X_hat) {
    check_shapes(X, X_hat);
    require(X.rows() >= 1, "l2_loss needs at least one row");
    return (X - X_hat).rowwise().squaredNorm().mean();
}

double variance_unexplained(const Matrix& X, const Matrix& X_hat) {
    check_shapes(X, X_hat);
    require(X.rows() >= 2, "variance_unexplained needs at least two rows");
    const double total = summed_variance(X);
    if (!(total > 0.0)) throw NumericError("input has zero variance");
    return summed_variance(X - X_hat) / total;
}

double cosine_loss(const Matrix& X, const Matrix& X_hat) {
    check_shapes(X, X_hat);
    require(X.rows() >= 1, "cosine_loss needs at least one row");
    double s = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double nx = X.row(i).norm(), nh = X_hat.row(i).norm();
        s += (nx > 0.0 && nh > 0.0) ? 1.0 - X.row(i).dot(X_hat.row(i)) / (nx * nh) : 1.0;
    }
    return s / static_cast<double>(X.rows());
}

double l2_ratio(const Matrix& X, const Matrix& X_hat) {
    check_shapes(X, X_hat);
    require(X.rows() >= 1, "l2_ratio needs at least one row");
    double s = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double nx = X.row(i).norm();
        if (!(nx > 0.0)) throw NumericError("l2_ratio: input row " + std::to_string(i) + " has zero norm");
        s += X_hat.row(i).norm() / nx;
    }
    return s / static_cast<double>(X.rows());
}

BinStats k_by_complexity(const Vector& c, const std::vector<int>& k, const std::vector<int>& l0) {
    require(c.size() >= 1, "k_by_complexity: empty run");
    require_dims(k.size() == static_cast<std::size_t>(c.size()) && l0.size() == k.size(),
                 "k_by_complexity: length mismatch");
    BinStats out;
    std::array<double, complexity_bins> sk{}, sl{};
    for (Eigen::Index i = 0; i < c.size(); ++i) {
        const int b = complexity_bin(std::clamp(c(i), 0.0, 10.0));
        ++out.count[b];
        sk[b] += k[static_cast<std::size_t>(i)];
        sl[b] += l0[static_cast<std::size_t>(i)];
    }
    for (int b = 0; b < complexity_bins; ++b) {
        const double n = static_cast<double>(out.count[b]);
        out.mean_k[b] = n > 0 ? sk[b] / n : std::numeric_limits<double>::quiet_NaN();
        out.mean_l0[b] = n > 0 ? sl[b] / n : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

nlohmann::json metrics_to_json(const MetricsReport& m) {
    nlohmann::json j{{"rows", m.rows},
                     {"mean_l0", m.mean_l0},
                     {"l2_loss", m.l2_loss},
                     {"var_unexplained", m.variance_unexplained},
                     {"var_explained", 1.0 - m.variance_unexplained},
                     {"cosine_loss", m.cosine_loss},
                     {"cosine_similarity", 1.0 - m.cosine_loss},
                     {"l2_ratio", m.l2_ratio}};
    if (m.bins) {
        nlohmann::json bins = nlohmann::json::array();
        for (int b = 0; b < complexity_bins; ++b)
            bins.push_back({{"bin", b},
                            {"count", m.bins->count[b]},
                            {"mean_k", finite_or_null(m.bins->mean_k[b])},
                            {"mean_l0", finite_or_null(m.bins->mean_l0[b])}});
        j["per_bin"] = bins;
    }
    return j;
}

MetricsReport evaluate(const SaeCheckpoint& sae, const ProbeModel* probe, const Dataset& data) {
    require(data.size() >= 2, "evaluation needs at least two records");
    require_dims(data.d_model() == static_cast<std::uint32_t>(sae.params.d()), "dataset width differs from SAE");
    const bool adaptive = sae.config.variant == Variant::adaptive_k;
    if (adaptive && !probe) throw InvalidArgument("evaluating adaptive_k needs a probe");

    const Matrix X = data.activation_matrix();
    Matrix X_hat(X.rows(), X.cols());
    Vector c(X.rows());
    std::vector<int> k(static_cast<std::size_t>(X.rows())), l0(k.size());
    for (Eigen::Index first = 0; first < X.rows(); first += eval_chunk) {
        const Eigen::Index n = std::min(eval_chunk, X.rows() - first);
        const BatchEncoding enc = encode_batch(X.middleRows(first, n), sae.params, sae.config, probe);
        X_hat.middleRows(first, n) = decode_rows(enc.Z, sae.params);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto r = static_cast<std::size_t>(first + i);
            l0[r] = static_cast<int>((enc.Z.row(i).array() != 0.0).count());
            k[r] = adaptive || is_topk_family(sae.config.variant) ? enc.k[static_cast<std::size_t>(i)] : l0[r];
            c(first + i) = adaptive ? enc.c(i) : data.complexity(static_cast<std::uint64_t>(first + i));
        }
    }

    MetricsReport m;
    m.rows = data.size();
    m.l2_loss = l2_loss(X, X_hat);
    m.variance_unexplained = variance_unexplained(X, X_hat);
    m.cosine_loss = cosine_loss(X, X_hat);
    m.l2_ratio = l2_ratio(X, X_hat);
    double s = 0.0;
    for (int v : l0) s += v;
    m.mean_l0 = s / static_cast<double>(l0.size());
    if (adaptive || data.score_present()) m.bins = k_by_complexity(c, k, l0);
    return m;
}

// ---------------------------------------------------------------------------

std::string sweep_setting_label(const VariantConfig& v) {
    switch (v.variant) {
    case Variant::topk:
    case Variant::batch_topk:
    case Variant::matryoshka:
        return "k=" + std::to_string(*v.k);
    case Variant::adaptive_k:
        return "k=" + std::to_string(v.adaptive->k_min) + ".." + std::to_string(v.adaptive->k_max);
    default:
        return "lambda=" + fmt(*v.lambda_s);
    }
}

std::vector<SweepPoint> sweep_preset(const std::string& name) {
    std::vector<SweepPoint> out;
    auto add = [&](VariantConfig v) { out.push_back({v, sweep_setting_label(v)}); };
    if (name == "paper-k-grid") {
        for (int k : {20, 40, 80, 160, 320, 640}) add(VariantConfig::make_topk(k));
    } else if (name == "penalty-grid") {
        for (Variant v : {Variant::gated, Variant::relu, Variant::relu_new})
            for (double l : {0.6, 0.9, 1.2, 2.0, 3.0, 4.0}) add(VariantConfig::make_penalty(v, l));
        for (double l : {0.3, 0.45, 0.6, 1.0, 1.5, 2.0}) add(VariantConfig::make_penalty(Variant::p_anneal, l));
    } else {
        throw InvalidArgument("unknown sweep preset '" + name + "' (expected paper-k-grid or penalty-grid)");
    }
    return out;
}

unsigned default_thread_count() {
    if (const char* env = std::getenv("ADAPTIVEK_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<SweepRow> pareto_sweep(const SweepSpec& spec, std::shared_ptr<const Dataset> train_data,
                                   const Dataset& test_data, unsigned threads) {
    require(!spec.points.empty(), "sweep has no points");
    require(train_data != nullptr, "sweep needs training data");
    std::vector<SweepRow> rows(spec.points.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i = next++; i < spec.points.size(); i = next++) {
            const SweepPoint& pt = spec.points[i];
            SweepRow& row = rows[i];
            row.variant = std::string(variant_name(pt.variant.variant));
            row.setting = pt.setting;
            row.seed = spec.base.seed;
            row.steps = spec.base.schedule.total_steps;
            try {
                TrainConfig cfg = spec.base;
                cfg.variant = pt.variant;
                TrainInputs in;
                in.data = std::make_shared<MemorySource>(train_data);
                in.probe_data = train_data.get();
                if (spec.probe) in.pretrained_probe = spec.probe;
                const TrainResult r = train(in, cfg);
                row.steps = static_cast<int>(r.log.size());
                row.metrics = evaluate(r.sae, r.probe ? &*r.probe : nullptr, test_data);
            } catch (const std::exception& e) {
                row.metrics.reset();
                row.error = e.what();
            }
        }
    };

    const unsigned n = std::max(1u, std::min<unsigned>(threads ? threads : default_thread_count(),
                                                       static_cast<unsigned>(spec.points.size())));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "variant,setting,mean_l0,l2_loss,var_unexplained,cosine_loss,l2_ratio,seed,steps\n";
    for (const auto& r : rows) {
        out << r.variant << ',' << r.setting << ',';
        if (r.metrics) {
            const auto& m = *r.metrics;
            out << fmt(m.mean_l0) << ',' << fmt(m.l2_loss) << ',' << fmt(m.variance_unexplained) << ','
                << fmt(m.cosine_loss) << ',' << fmt(m.l2_ratio);
        } else {
            out << "nan,nan,nan,nan,nan";
        }
        out << ',' << r.seed << ',' << r.steps << '\n';
    }
    return out.str();
}

nlohmann::json sweep_json(const std::vector<SweepRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j{{"variant", r.variant}, {"setting", r.setting}, {"seed", r.seed}, {"steps", r.steps}};
        if (r.metrics) {
            j["metrics"] = metrics_to_json(*r.metrics);
            j["ok"] = true;
        } else {
            j["ok"] = false;
            j["error"] = r.error;
        }
        arr.push_back(j);
    }
    return arr;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

} // namespace adaptivek
