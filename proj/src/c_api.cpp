#include "adaptivek/adaptivek.h"

#include "adaptivek/activation_store.hpp"
#include "adaptivek/complexity_probe.hpp"
#include "adaptivek/pipeline.hpp"
#include "adaptivek/sae_models.hpp"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

struct ak_dataset {
    adaptivek::Dataset data;
};
struct ak_buffer {
    std::unique_ptr<adaptivek::Buffer> buffer;
    std::uint32_t d_model = 0;
};
struct ak_probe {
    adaptivek::ProbeModel model;
};
struct ak_sae {
    adaptivek::SaeCheckpoint ckpt;
};

namespace {

thread_local std::string last_error;

ak_status fail(ak_status s, const std::string& msg) {
    last_error = msg;
    return s;
}

template <typename F>
ak_status guarded(F&& f) {
    try {
        last_error.clear();
        f();
        return AK_OK;
    } catch (const adaptivek::Error& e) {
        return fail(static_cast<ak_status>(static_cast<int>(e.code())), e.what());
    } catch (const nlohmann::json::exception& e) {
        return fail(AK_ERR_INVALID_ARGUMENT, std::string("invalid JSON: ") + e.what());
    } catch (const std::bad_alloc&) {
        return fail(AK_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(AK_ERR_INTERNAL, e.what());
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void need(const void* p, const char* name) {
    if (!p) throw adaptivek::InvalidArgument(std::string(name) + " is NULL");
}

} // namespace

extern "C" {

const char* ak_version(void) { return "1.0.0"; }
const char* ak_last_error(void) { return last_error.c_str(); }
void ak_string_free(char* s) { std::free(s); }

const char* ak_status_string(ak_status s) {
    switch (s) {
    case AK_OK: return "ok";
    case AK_ERR_INVALID_ARGUMENT: return "invalid argument";
    case AK_ERR_DIMENSION: return "dimension mismatch";
    case AK_ERR_IO: return "I/O error";
    case AK_ERR_FORMAT: return "format error";
    case AK_ERR_NUMERIC: return "numeric error";
    case AK_ERR_EXHAUSTED: return "exhausted";
    case AK_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

ak_status ak_dataset_load(const char* path, ak_dataset** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new ak_dataset{adaptivek::read_dataset(path)};
    });
}

void ak_dataset_free(ak_dataset* ds) { delete ds; }

ak_status ak_dataset_info(const ak_dataset* ds, uint32_t* d_model, uint64_t* count, int* score_present) {
    return guarded([&] {
        need(ds, "dataset");
        if (d_model) *d_model = ds->data.d_model();
        if (count) *count = ds->data.size();
        if (score_present) *score_present = ds->data.score_present() ? 1 : 0;
    });
}

ak_status ak_dataset_histogram(const ak_dataset* ds, uint64_t* counts) {
    return guarded([&] {
        need(ds, "dataset");
        need(counts, "counts");
        const auto h = adaptivek::complexity_histogram(ds->data.raw_complexities());
        std::copy(h.begin(), h.end(), counts);
    });
}

ak_status ak_dataset_record(const ak_dataset* ds, uint64_t index, float* complexity, float* activation) {
    return guarded([&] {
        need(ds, "dataset");
        if (index >= ds->data.size()) throw adaptivek::InvalidArgument("record index out of range");
        if (complexity) *complexity = ds->data.complexity(index);
        if (activation) {
            const auto a = ds->data.activation(index);
            std::copy(a.begin(), a.end(), activation);
        }
    });
}

ak_status ak_dataset_write(const char* path, uint32_t d_model, uint64_t count, int score_present,
                           const float* complexities, const float* activations) {
    return guarded([&] {
        need(path, "path");
        if (count > 0) {
            need(activations, "activations");
            need(complexities, "complexities");
        }
        adaptivek::Dataset d(d_model, score_present != 0);
        for (uint64_t i = 0; i < count; ++i)
            d.push_back({activations + i * d_model, d_model}, complexities[i]);
        adaptivek::write_dataset(d, path);
    });
}

ak_status ak_buffer_open(const char* path, uint64_t capacity, uint64_t seed, ak_buffer** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        auto src = adaptivek::open_source(path);
        const auto d = src->d_model();
        auto b = std::make_unique<adaptivek::Buffer>(src, capacity == 0 ? src->count() : capacity, seed);
        *out = new ak_buffer{std::move(b), d};
    });
}

void ak_buffer_free(ak_buffer* buf) { delete buf; }

ak_status ak_buffer_read_batch(ak_buffer* buf, size_t batch_size, double* activations, double* complexities,
                               size_t* rows) {
    return guarded([&] {
        need(buf, "buffer");
        need(activations, "activations");
        need(rows, "rows");
        const adaptivek::Batch b = buf->buffer->read_batch(batch_size);
        for (Eigen::Index i = 0; i < b.rows(); ++i) {
            for (Eigen::Index j = 0; j < b.x.cols(); ++j) activations[i * b.x.cols() + j] = b.x(i, j);
            if (complexities) complexities[i] = b.c.size() ? b.c(i) : 0.0;
        }
        *rows = static_cast<size_t>(b.rows());
    });
}

ak_status ak_probe_load(const char* path, ak_probe** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new ak_probe{adaptivek::load_probe(path)};
    });
}

ak_status ak_probe_save(const ak_probe* probe, const char* path) {
    return guarded([&] {
        need(probe, "probe");
        need(path, "path");
        adaptivek::save_probe(probe->model, path);
    });
}

void ak_probe_free(ak_probe* probe) { delete probe; }

ak_status ak_probe_dim(const ak_probe* probe, uint32_t* d_model) {
    return guarded([&] {
        need(probe, "probe");
        need(d_model, "d_model");
        *d_model = static_cast<uint32_t>(probe->model.w.size());
    });
}

ak_status ak_probe_predict(const ak_probe* probe, const double* x, size_t d, double* c) {
    return guarded([&] {
        need(probe, "probe");
        need(x, "x");
        need(c, "c");
        *c = adaptivek::predict(probe->model, Eigen::Map<const adaptivek::Vector>(x, static_cast<Eigen::Index>(d)));
    });
}

ak_status ak_sae_load(const char* path, ak_sae** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new ak_sae{adaptivek::load_sae(path)};
    });
}

void ak_sae_free(ak_sae* sae) { delete sae; }

ak_status ak_sae_dims(const ak_sae* sae, uint32_t* d, uint32_t* dict_size) {
    return guarded([&] {
        need(sae, "sae");
        if (d) *d = static_cast<uint32_t>(sae->ckpt.params.d());
        if (dict_size) *dict_size = static_cast<uint32_t>(sae->ckpt.params.M());
    });
}

ak_status ak_sae_encode(const ak_sae* sae, const ak_probe* probe, const double* x, size_t d, double* z, int* k) {
    return guarded([&] {
        need(sae, "sae");
        need(x, "x");
        need(z, "z");
        const auto& p = sae->ckpt.params;
        if (static_cast<Eigen::Index>(d) != p.d())
            throw adaptivek::DimensionMismatch("input length " + std::to_string(d) + " != d " + std::to_string(p.d()));
        const adaptivek::Matrix X = Eigen::Map<const adaptivek::Vector>(x, p.d()).transpose();
        const auto enc = adaptivek::encode_batch(X, p, sae->ckpt.config, probe ? &probe->model : nullptr);
        for (Eigen::Index j = 0; j < p.M(); ++j) z[j] = enc.Z(0, j);
        if (k) *k = enc.k[0];
    });
}

ak_status ak_sae_decode(const ak_sae* sae, const double* z, size_t dict_size, double* x_hat) {
    return guarded([&] {
        need(sae, "sae");
        need(z, "z");
        need(x_hat, "x_hat");
        const auto& p = sae->ckpt.params;
        if (static_cast<Eigen::Index>(dict_size) != p.M())
            throw adaptivek::DimensionMismatch("code length " + std::to_string(dict_size) + " != dict size");
        const adaptivek::Vector out =
            adaptivek::decode(Eigen::Map<const adaptivek::Vector>(z, p.M()), p);
        std::copy(out.data(), out.data() + out.size(), x_hat);
    });
}

ak_status ak_config_resolve(const char* subcommand, const char* json_config, char** resolved) {
    return guarded([&] {
        need(subcommand, "subcommand");
        need(resolved, "resolved");
        const nlohmann::json user =
            json_config && *json_config ? nlohmann::json::parse(json_config) : nlohmann::json(nullptr);
        *resolved = dup_string(adaptivek::resolve_config(subcommand, user).dump(2));
    });
}

ak_status ak_run(const char* subcommand, const char* json_config, const char* run_dir, char** result) {
    return guarded([&] {
        need(subcommand, "subcommand");
        need(result, "result");
        const std::string sub = subcommand;
        const nlohmann::json user =
            json_config && *json_config ? nlohmann::json::parse(json_config) : nlohmann::json(nullptr);
        const nlohmann::json cfg = adaptivek::resolve_config(sub, user);
        nlohmann::json out;
        if (sub == "synth-gen") {
            out = adaptivek::run_synth_gen(cfg);
        } else if (sub == "inspect") {
            if (!cfg.at("path").is_string()) throw adaptivek::InvalidArgument("missing required setting 'path'");
            out = adaptivek::inspect_file(cfg.at("path").get<std::string>());
        } else {
            const std::filesystem::path dir =
                run_dir && *run_dir ? std::filesystem::path(run_dir)
                                    : adaptivek::make_run_dir("runs", cfg.at("seed").get<std::uint64_t>());
            if (sub == "probe-train") out = adaptivek::run_probe_train(cfg, dir);
            else if (sub == "sae-train") out = adaptivek::run_sae_train(cfg, dir);
            else if (sub == "evaluate") out = adaptivek::run_evaluate(cfg, dir);
            else if (sub == "sweep") out = adaptivek::run_sweep(cfg, dir);
        }
        *result = dup_string(out.dump(2));
    });
}

ak_status ak_inspect(const char* path, char** result) {
    return guarded([&] {
        need(path, "path");
        need(result, "result");
        *result = dup_string(adaptivek::inspect_file(path).dump(2));
    });
}

} // extern "C"
