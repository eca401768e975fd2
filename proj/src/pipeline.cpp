#include "adaptivek/pipeline.hpp"
#include "adaptivek/activation_store.hpp"
#include "adaptivek/complexity_probe.hpp"
#include "adaptivek/evaluation.hpp"
#include "adaptivek/synthetic.hpp"

#include <openssl/evp.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <memory>

namespace adaptivek {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* library_version = "1.0.0";

json train_defaults() {
    return {{"seed", 0},
            {"variant", "topk"},
            {"k", 80},
            {"lambda_s", nullptr},
            {"p_end", 0.2},
            {"prefixes", json::array()},
            {"k_min", 20},
            {"base_k", 80},
            {"k_max", 320},
            {"steepness", 0.6},
            {"c_min", 0.0},
            {"c_max", 10.0},
            {"k_mapping", "sigmoid_range"},
            {"dict_size", 16384},
            {"total_steps", 0},
            {"batch_size", 2048},
            {"phase_ratio", 0.9},
            {"warmup_steps", 15},
            {"decay_start_fraction", 0.7},
            {"lr", 1e-3},
            {"alpha", 0.005},
            {"beta", 1.0 / 32.0},
            {"gamma", 0.9},
            {"delta", 0.2},
            {"dead_threshold", 64},
            {"buffer_capacity", 0},
            {"probe_lambda", nullptr},
            {"folds", 5},
            {"lambda_grid", default_lambda_grid}};
}

bool same_kind(const json& def, const json& val) {
    if (def.is_null()) return true;
    if (def.is_number_integer()) return val.is_number_integer();
    if (def.is_number()) return val.is_number();
    return def.type() == val.type();
}

const json& required(const json& cfg, const char* key) {
    if (!cfg.contains(key) || cfg.at(key).is_null())
        throw InvalidArgument(std::string("missing required setting '") + key + "'");
    return cfg.at(key);
}

std::string required_path(const json& cfg, const char* key) {
    const json& v = required(cfg, key);
    if (!v.is_string()) throw InvalidArgument(std::string("setting '") + key + "' must be a path string");
    return v.get<std::string>();
}

std::optional<std::string> optional_path(const json& cfg, const char* key) {
    if (!cfg.contains(key) || cfg.at(key).is_null()) return std::nullopt;
    if (!cfg.at(key).is_string()) throw InvalidArgument(std::string("setting '") + key + "' must be a path string");
    return cfg.at(key).get<std::string>();
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json dataset_entry(const fs::path& p) { return {{"path", p.string()}, {"sha256", file_sha256(p)}}; }

void begin_run(const json& cfg, const fs::path& run_dir) {
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw IoError("cannot create run directory " + run_dir.string() + ": " + ec.message());
    write_json(run_dir / "config.json", cfg);
}

void finish_run(const std::string& subcommand, const json& cfg, const fs::path& run_dir, json datasets,
                json outputs) {
    write_json(run_dir / "manifest.json", {{"subcommand", subcommand},
                                           {"seed", cfg.at("seed")},
                                           {"version", library_version},
                                           {"datasets", std::move(datasets)},
                                           {"outputs", std::move(outputs)}});
}

json cv_json(const CvTable& cv) {
    json rows = json::array();
    for (std::size_t i = 0; i < cv.lambdas.size(); ++i)
        rows.push_back({{"lambda", cv.lambdas[i]}, {"mean_rmse", cv.mean_rmse[i]}});
    return {{"folds", rows}, {"selected_lambda", cv.selected_lambda}};
}

json probe_metrics_json(const ProbeMetrics& m) {
    json j{{"rmse", m.rmse}};
    j["pearson"] = m.pearson ? json(*m.pearson) : json(nullptr);
    j["spearman"] = m.spearman ? json(*m.spearman) : json(nullptr);
    return j;
}

Dataset load_labelled(const fs::path& p, const char* what) {
    Dataset d = read_dataset(p);
    if (!d.score_present())
        throw InvalidArgument(std::string(what) + " " + p.string() +
                              " has no complexity scores (score_present = false); a labelled dataset is required");
    return d;
}

} // namespace

json default_config(const std::string& sub) {
    if (sub == "probe-train")
        return {{"seed", 0},
                {"data", nullptr},
                {"test_data", nullptr},
                {"folds", 5},
                {"lambda_grid", default_lambda_grid},
                {"lambda", nullptr}};
    if (sub == "sae-train") {
        json j = train_defaults();
        j["data"] = nullptr;
        j["probe"] = nullptr;
        j["probe_data"] = nullptr;
        j["eval_data"] = nullptr;
        return j;
    }
    if (sub == "evaluate") return {{"seed", 0}, {"sae", nullptr}, {"probe", nullptr}, {"data", nullptr}};
    if (sub == "sweep") {
        json j = train_defaults();
        j["train_data"] = nullptr;
        j["test_data"] = nullptr;
        j["probe"] = nullptr;
        j["preset"] = nullptr;
        j["points"] = nullptr;
        j["threads"] = 0;
        return j;
    }
    if (sub == "synth-gen") {
        json j = synthetic_spec_to_json(SyntheticSpec{});
        j["out"] = nullptr;
        j["n"] = 10000;
        j["stream"] = 0;
        return j;
    }
    if (sub == "inspect") return {{"path", nullptr}};
    throw InvalidArgument("unknown subcommand '" + sub + "'");
}

json resolve_config(const std::string& sub, const json& user) {
    json cfg = default_config(sub);
    if (user.is_null()) return cfg;
    if (!user.is_object()) throw InvalidArgument("config must be a JSON object");
    for (const auto& [key, val] : user.items()) {
        if (!cfg.contains(key)) throw InvalidArgument("unknown setting '" + key + "' for " + sub);
        if (!val.is_null() && !same_kind(cfg[key], val))
            throw InvalidArgument("setting '" + key + "' has the wrong type (expected like " + cfg[key].dump() + ")");
        cfg[key] = val;
    }
    return cfg;
}

VariantConfig variant_from_config(const json& cfg) {
    const Variant v = parse_variant(cfg.at("variant").get<std::string>());
    const auto M = cfg.at("dict_size").get<long long>();
    switch (v) {
    case Variant::topk:
        return VariantConfig::make_topk(cfg.at("k").get<int>());
    case Variant::batch_topk:
        return VariantConfig::make_batch_topk(cfg.at("k").get<int>());
    case Variant::matryoshka: {
        auto prefixes = cfg.at("prefixes").get<std::vector<int>>();
        if (prefixes.empty()) {
            for (long long m : {M / 4, M / 2, M})
                if (m >= 1 && (prefixes.empty() || m > prefixes.back())) prefixes.push_back(static_cast<int>(m));
        }
        return VariantConfig::make_matryoshka(cfg.at("k").get<int>(), prefixes);
    }
    case Variant::adaptive_k: {
        AdaptiveKConfig a;
        a.k_min = cfg.at("k_min").get<int>();
        a.base_k = cfg.at("base_k").get<int>();
        a.k_max = cfg.at("k_max").get<int>();
        a.s = cfg.at("steepness").get<double>();
        a.c_min = cfg.at("c_min").get<double>();
        a.c_max = cfg.at("c_max").get<double>();
        a.mapping = parse_k_mapping(cfg.at("k_mapping").get<std::string>());
        return VariantConfig::make_adaptive(a);
    }
    default: {
        if (cfg.at("lambda_s").is_null())
            throw InvalidArgument("variant " + std::string(variant_name(v)) + " needs lambda_s");
        return VariantConfig::make_penalty(v, cfg.at("lambda_s").get<double>(), cfg.at("p_end").get<double>());
    }
    }
}

TrainConfig train_config_from(const json& cfg, const std::optional<VariantConfig>& variant) {
    TrainConfig t;
    t.dict_size = cfg.at("dict_size").get<long long>();
    t.variant = variant ? *variant : variant_from_config(cfg);
    t.schedule.total_steps = cfg.at("total_steps").get<int>();
    t.schedule.batch_size = cfg.at("batch_size").get<int>();
    t.schedule.phase_ratio = cfg.at("phase_ratio").get<double>();
    t.schedule.warmup_steps = cfg.at("warmup_steps").get<int>();
    t.schedule.decay_start_fraction = cfg.at("decay_start_fraction").get<double>();
    t.schedule.base_lr = cfg.at("lr").get<double>();
    t.weights.alpha = cfg.at("alpha").get<double>();
    t.weights.beta = cfg.at("beta").get<double>();
    t.weights.gamma = cfg.at("gamma").get<double>();
    t.weights.delta = cfg.at("delta").get<double>();
    t.dead_threshold = cfg.at("dead_threshold").get<int>();
    t.seed = cfg.at("seed").get<std::uint64_t>();
    t.buffer_capacity = cfg.at("buffer_capacity").get<std::uint64_t>();
    t.folds = cfg.at("folds").get<int>();
    t.lambda_grid = cfg.at("lambda_grid").get<std::vector<double>>();
    if (!cfg.at("probe_lambda").is_null()) t.probe_lambda = cfg.at("probe_lambda").get<double>();
    t.validate();
    return t;
}

std::string file_sha256(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for hashing");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("SHA-256 init failed");
    std::array<char, 1 << 16> buf;
    while (in) {
        in.read(buf.data(), buf.size());
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    std::string hex;
    char two[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(two, sizeof two, "%02x", md[i]);
        hex += two;
    }
    return hex;
}

fs::path make_run_dir(const fs::path& root, std::uint64_t seed) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    const std::string base = std::string(stamp) + "-seed" + std::to_string(seed);
    fs::path dir = root / base;
    for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
    return dir;
}

// ---------------------------------------------------------------------------

json run_probe_train(const json& cfg, const fs::path& run_dir) {
    const fs::path data_path = required_path(cfg, "data");
    const Dataset data = load_labelled(data_path, "dataset");
    const auto test_path = optional_path(cfg, "test_data");
    begin_run(cfg, run_dir);

    const Matrix A = data.activation_matrix();
    const Vector y = data.complexity_vector();
    json summary;
    ProbeModel probe;
    if (!cfg.at("lambda").is_null()) {
        probe = fit_ridge(A, y, cfg.at("lambda").get<double>());
    } else {
        const CvTable cv = cross_validate(A, y, cfg.at("lambda_grid").get<std::vector<double>>(),
                                          cfg.at("folds").get<int>(), cfg.at("seed").get<std::uint64_t>());
        probe = cv.model;
        summary["cv"] = cv_json(cv);
        write_json(run_dir / "cv.json", summary["cv"]);
    }
    save_probe(probe, run_dir / "probe.akpb");

    json datasets{{"data", dataset_entry(data_path)}};
    summary["lambda"] = probe.lambda;
    summary["train_metrics"] = probe_metrics_json(probe_metrics(predict_rows(probe, A), y));
    if (test_path) {
        const Dataset test = load_labelled(*test_path, "test dataset");
        summary["test_metrics"] =
            probe_metrics_json(probe_metrics(predict_rows(probe, test.activation_matrix()), test.complexity_vector()));
        datasets["test_data"] = dataset_entry(*test_path);
    }
    write_json(run_dir / "metrics.json", summary);
    finish_run("probe-train", cfg, run_dir, datasets, {"probe.akpb", "metrics.json"});
    summary["run_dir"] = run_dir.string();
    return summary;
}

json run_sae_train(const json& cfg, const fs::path& run_dir) {
    const fs::path data_path = required_path(cfg, "data");
    const TrainConfig tc = train_config_from(cfg);
    TrainInputs in;
    in.data = open_source(data_path);
    require_dims(in.data->count() >= 1, "training dataset is empty");
    json datasets{{"data", dataset_entry(data_path)}};
    if (auto p = optional_path(cfg, "probe")) {
        in.pretrained_probe = load_probe(*p);
        datasets["probe"] = dataset_entry(*p);
    }
    std::optional<Dataset> probe_data;
    if (auto p = optional_path(cfg, "probe_data")) {
        probe_data = load_labelled(*p, "probe dataset");
        in.probe_data = &*probe_data;
        datasets["probe_data"] = dataset_entry(*p);
    }
    if (tc.variant.variant == Variant::adaptive_k && !in.pretrained_probe && !in.probe_data &&
        !in.data->score_present())
        throw InvalidArgument("adaptive_k training needs complexity labels or a pretrained probe");
    const auto eval_path = optional_path(cfg, "eval_data");

    begin_run(cfg, run_dir);
    std::ofstream log(run_dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot open training log in " + run_dir.string());
    in.on_step = [&log](const TrainLogEntry& e) { log << log_entry_json(e).dump() << '\n'; };
    in.divergence_dump = run_dir / "diverged.aksa";

    const TrainResult r = train(in, tc);
    log.close();

    json outputs{"sae.aksa", "train_log.jsonl"};
    save_sae(r.sae, run_dir / "sae.aksa");
    write_json(run_dir / "sae.json", sae_manifest(r.sae));
    if (r.probe) {
        save_probe(*r.probe, run_dir / "probe.akpb");
        outputs.push_back("probe.akpb");
    }
    if (r.probe_snapshot) {
        save_probe(*r.probe_snapshot, run_dir / "probe_snapshot.akpb");
        outputs.push_back("probe_snapshot.akpb");
    }
    json summary{{"steps", r.log.size()}, {"phase2_steps", r.phase2_steps}, {"phase3_steps", r.phase3_steps}};
    if (r.cv) {
        write_json(run_dir / "cv.json", cv_json(*r.cv));
        summary["probe_lambda"] = r.cv->selected_lambda;
    }
    if (!r.log.empty()) {
        summary["first"] = log_entry_json(r.log.front());
        summary["last"] = log_entry_json(r.log.back());
    }
    if (eval_path) {
        // evaluate the checkpoint as stored (float32), so the numbers match a later `evaluate`
        const Dataset test = read_dataset(*eval_path);
        const SaeCheckpoint stored = load_sae(run_dir / "sae.aksa");
        summary["eval"] = metrics_to_json(evaluate(stored, r.probe ? &*r.probe : nullptr, test));
        write_json(run_dir / "metrics.json", summary["eval"]);
        datasets["eval_data"] = dataset_entry(*eval_path);
        outputs.push_back("metrics.json");
    }
    finish_run("sae-train", cfg, run_dir, datasets, outputs);
    summary["run_dir"] = run_dir.string();
    return summary;
}

json run_evaluate(const json& cfg, const fs::path& run_dir) {
    const fs::path sae_path = required_path(cfg, "sae");
    const fs::path data_path = required_path(cfg, "data");
    const SaeCheckpoint sae = load_sae(sae_path);
    std::optional<ProbeModel> probe;
    json datasets{{"sae", dataset_entry(sae_path)}, {"data", dataset_entry(data_path)}};
    if (auto p = optional_path(cfg, "probe")) {
        probe = load_probe(*p);
        datasets["probe"] = dataset_entry(*p);
    } else if (sae.config.variant == Variant::adaptive_k) {
        throw InvalidArgument("evaluating an adaptive_k checkpoint needs --probe");
    }
    const Dataset data = read_dataset(data_path);
    begin_run(cfg, run_dir);
    json summary = metrics_to_json(evaluate(sae, probe ? &*probe : nullptr, data));
    summary["variant"] = variant_name(sae.config.variant);
    write_json(run_dir / "metrics.json", summary);
    finish_run("evaluate", cfg, run_dir, datasets, {"metrics.json"});
    summary["run_dir"] = run_dir.string();
    return summary;
}

json run_sweep(const json& cfg, const fs::path& run_dir) {
    const fs::path train_path = required_path(cfg, "train_data");
    const fs::path test_path = required_path(cfg, "test_data");
    const Eigen::Index dict_size = cfg.at("dict_size").get<long long>();
    SweepSpec spec;
    if (cfg.at("points").is_array()) {
        for (const auto& pt : cfg.at("points")) {
            if (!pt.is_object()) throw InvalidArgument("sweep points must be objects");
            json merged = cfg;
            for (const auto& [k, v] : pt.items()) {
                if (!cfg.contains(k)) throw InvalidArgument("unknown setting '" + k + "' in sweep point");
                merged[k] = v;
            }
            const VariantConfig vc = variant_from_config(merged);
            spec.points.push_back({vc, sweep_setting_label(vc)});
        }
    } else if (cfg.at("points").is_null()) {
        spec.points = sweep_preset(cfg.at("preset").is_null() ? "paper-k-grid" : cfg.at("preset").get<std::string>());
    } else {
        throw InvalidArgument("setting 'points' must be an array of objects");
    }
    require(!spec.points.empty(), "sweep has no points");
    for (const auto& pt : spec.points) pt.variant.validate(dict_size);
    // the top-level variant settings are not used by a sweep
    spec.base = train_config_from(cfg, spec.points.front().variant);

    json datasets{{"train_data", dataset_entry(train_path)}, {"test_data", dataset_entry(test_path)}};
    if (auto p = optional_path(cfg, "probe")) {
        spec.probe = load_probe(*p);
        datasets["probe"] = dataset_entry(*p);
    }

    auto train_data = std::make_shared<const Dataset>(read_dataset(train_path));
    const Dataset test_data = read_dataset(test_path);
    begin_run(cfg, run_dir);

    const auto rows = pareto_sweep(spec, train_data, test_data, cfg.at("threads").get<unsigned>());
    write_text(run_dir / "sweep.csv", sweep_csv(rows));
    write_json(run_dir / "sweep.json", sweep_json(rows));
    int failed = 0;
    for (const auto& r : rows) failed += r.metrics ? 0 : 1;
    finish_run("sweep", cfg, run_dir, datasets, {"sweep.csv", "sweep.json"});
    return {{"rows", rows.size()}, {"failed", failed}, {"run_dir", run_dir.string()}, {"results", sweep_json(rows)}};
}

json run_synth_gen(const json& cfg) {
    const fs::path out = required_path(cfg, "out");
    SyntheticSpec spec = synthetic_spec_from_json(cfg);
    spec.validate();
    const auto n = cfg.at("n").get<std::uint64_t>();
    const SyntheticData d = gen_dataset(spec, n, out, cfg.at("stream").get<std::uint64_t>());
    const auto h = complexity_histogram(d.data.raw_complexities());
    return {{"path", out.string()},
            {"d_model", spec.d},
            {"count", d.data.size()},
            {"histogram", h},
            {"sidecar", sidecar_path(out).string()},
            {"sha256", file_sha256(out)}};
}

json inspect_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    const std::string m(magic, static_cast<std::size_t>(in.gcount()));
    in.close();

    if (m == "AKSA") {
        const SaeCheckpoint c = load_sae(path);
        json j = sae_manifest(c);
        j["path"] = path.string();
        return j;
    }
    if (m == "AKPB") {
        const ProbeModel p = load_probe(path);
        return {{"format", "AKPB"}, {"path", path.string()}, {"d_model", p.w.size()}, {"lambda", p.lambda},
                {"b", p.b}, {"w_norm", p.w.norm()}};
    }
    const Dataset d = read_dataset(path);
    json j{{"format", path.extension() == ".jsonl" ? "JSONL" : "AKDS"},
           {"path", path.string()},
           {"version", dataset_version},
           {"d_model", d.d_model()},
           {"count", d.size()},
           {"score_present", d.score_present()}};
    if (d.score_present()) j["histogram"] = complexity_histogram(d.raw_complexities());
    const json side = read_sidecar(path);
    if (!side.is_null()) {
        json brief = side;
        brief.erase("dictionary");
        brief.erase("direction");
        j["sidecar"] = brief;
    }
    return j;
}

} // namespace adaptivek
