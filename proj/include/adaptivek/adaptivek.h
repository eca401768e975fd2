#ifndef ADAPTIVEK_H
#define ADAPTIVEK_H

/* C interface to the adaptivek library. Objects are opaque handles released
 * with their *_free function. Every call returns an ak_status; on failure the
 * message is available from ak_last_error() on the same thread until the next
 * call. Strings returned through char** are heap copies owned by the caller
 * and released with ak_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define AK_API __declspec(dllexport)
#else
#define AK_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ak_status {
    AK_OK = 0,
    AK_ERR_INVALID_ARGUMENT = 1,
    AK_ERR_DIMENSION = 2,
    AK_ERR_IO = 3,
    AK_ERR_FORMAT = 4,
    AK_ERR_NUMERIC = 5,
    AK_ERR_EXHAUSTED = 6,
    AK_ERR_INTERNAL = 7
} ak_status;

typedef struct ak_dataset ak_dataset;
typedef struct ak_buffer ak_buffer;
typedef struct ak_probe ak_probe;
typedef struct ak_sae ak_sae;

AK_API const char* ak_version(void);
AK_API const char* ak_last_error(void);
AK_API const char* ak_status_string(ak_status status);
AK_API void ak_string_free(char* s);

/* Datasets (AKDS, or JSONL by extension). */
AK_API ak_status ak_dataset_load(const char* path, ak_dataset** out);
AK_API void ak_dataset_free(ak_dataset* ds);
AK_API ak_status ak_dataset_info(const ak_dataset* ds, uint32_t* d_model, uint64_t* count, int* score_present);
/* counts must hold 10 entries, one per unit-width complexity bin. */
AK_API ak_status ak_dataset_histogram(const ak_dataset* ds, uint64_t* counts);
/* activation must hold d_model floats. */
AK_API ak_status ak_dataset_record(const ak_dataset* ds, uint64_t index, float* complexity, float* activation);
/* Writes count records (row-major activations) to path. */
AK_API ak_status ak_dataset_write(const char* path, uint32_t d_model, uint64_t count, int score_present,
                                  const float* complexities, const float* activations);

/* Shuffling buffer over a dataset file. */
AK_API ak_status ak_buffer_open(const char* path, uint64_t capacity, uint64_t seed, ak_buffer** out);
AK_API void ak_buffer_free(ak_buffer* buf);
/* Fills up to batch_size rows; activations needs batch_size * d_model doubles,
 * complexities batch_size doubles. The row count is written to rows. */
AK_API ak_status ak_buffer_read_batch(ak_buffer* buf, size_t batch_size, double* activations,
                                      double* complexities, size_t* rows);

/* Complexity probe (AKPB). */
AK_API ak_status ak_probe_load(const char* path, ak_probe** out);
AK_API ak_status ak_probe_save(const ak_probe* probe, const char* path);
AK_API void ak_probe_free(ak_probe* probe);
AK_API ak_status ak_probe_dim(const ak_probe* probe, uint32_t* d_model);
AK_API ak_status ak_probe_predict(const ak_probe* probe, const double* x, size_t d, double* c);

/* Sparse autoencoder checkpoint (AKSA). */
AK_API ak_status ak_sae_load(const char* path, ak_sae** out);
AK_API void ak_sae_free(ak_sae* sae);
AK_API ak_status ak_sae_dims(const ak_sae* sae, uint32_t* d, uint32_t* dict_size);
/* Encodes one vector; z needs dict_size doubles. probe may be NULL except for
 * adaptive_k checkpoints. k receives the allocated k (may be NULL). */
AK_API ak_status ak_sae_encode(const ak_sae* sae, const ak_probe* probe, const double* x, size_t d, double* z,
                               int* k);
AK_API ak_status ak_sae_decode(const ak_sae* sae, const double* z, size_t dict_size, double* x_hat);

/* Pipelines. Configs are flat JSON objects; ak_config_resolve fills defaults
 * and rejects unknown settings. run_dir may be NULL or empty to create
 * runs/<timestamp>-seed<seed>. Results are JSON documents. */
AK_API ak_status ak_config_resolve(const char* subcommand, const char* json_config, char** resolved);
AK_API ak_status ak_run(const char* subcommand, const char* json_config, const char* run_dir, char** result);
AK_API ak_status ak_inspect(const char* path, char** result);

#ifdef __cplusplus
}
#endif

#endif
