#ifndef MFLOW_C_API_H
#define MFLOW_C_API_H

/*
 * C interface to the multi-flow toy diffusion library.
 *
 * Every function returns an mflow_status. On failure the message of the most
 * recent error on the calling thread is available from mflow_last_error().
 * Handles are opaque and owned by the caller; destroy them exactly once.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MFLOW_API __declspec(dllexport)
#else
#define MFLOW_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mflow_status {
  MFLOW_OK = 0,
  MFLOW_ERR_SHAPE = 10,
  MFLOW_ERR_DOMAIN = 11,
  MFLOW_ERR_PARAMETER = 12,
  MFLOW_ERR_FORMAT = 13,
  MFLOW_ERR_INTEGRITY = 14,
  MFLOW_ERR_COVERAGE = 15,
  MFLOW_ERR_USAGE = 16,
  MFLOW_ERR_IO = 17,
  MFLOW_ERR_NUMERIC = 18,
  MFLOW_ERR_PLAN = 19,
  MFLOW_ERR_NULL_ARGUMENT = 20,
  MFLOW_ERR_INTERNAL = 99
} mflow_status;

typedef struct mflow_config mflow_config;
typedef struct mflow_system mflow_system;

MFLOW_API const char* mflow_version(void);
/* Message of the last failed call on this thread ("" when none). */
MFLOW_API const char* mflow_last_error(void);
/* Short stable name of a status code, e.g. "coverage". */
MFLOW_API const char* mflow_status_name(mflow_status status);
/* True for errors caused by the caller's input or configuration. */
MFLOW_API int mflow_status_is_usage(mflow_status status);

/* ---- configuration ---------------------------------------------------- */

/* Built-in defaults. */
MFLOW_API mflow_status mflow_config_create(mflow_config** out);
/* Defaults overridden by a key=value file. */
MFLOW_API mflow_status mflow_config_load(const char* path, mflow_config** out);
MFLOW_API mflow_status mflow_config_set(mflow_config* cfg, const char* key, const char* value);
/* Copies the value into buf (NUL terminated); *needed receives the full
 * length including the terminator. */
MFLOW_API mflow_status mflow_config_get(const mflow_config* cfg, const char* key, char* buf,
                                        size_t size, size_t* needed);
MFLOW_API void mflow_config_destroy(mflow_config* cfg);

/* ---- model state ------------------------------------------------------ */

/* Freshly initialised model for the configuration (seeded by "seed"). */
MFLOW_API mflow_status mflow_system_create(const mflow_config* cfg, mflow_system** out);
MFLOW_API void mflow_system_destroy(mflow_system* sys);
MFLOW_API mflow_status mflow_system_save(const mflow_system* sys, const char* path);
MFLOW_API mflow_status mflow_system_load(mflow_system* sys, const char* path);
MFLOW_API mflow_status mflow_system_param_count(const mflow_system* sys, size_t* count);

/* ---- pipeline stages -------------------------------------------------- */

/* Writes one dataset file "<dir>/<a>-<b>.tsv" per configured pair. */
MFLOW_API mflow_status mflow_generate_data(const mflow_config* cfg, const char* dir);
/* The stages below read paired data from the "data.<a>-<b>" config entries
 * (MFLOW_ERR_COVERAGE naming the pair when one is missing) and write
 * "step,loss_name,value" rows to log_csv when it is non-NULL. */
MFLOW_API mflow_status mflow_align(mflow_system* sys, const mflow_config* cfg,
                                   const char* log_csv);
MFLOW_API mflow_status mflow_pretrain(mflow_system* sys, const mflow_config* cfg,
                                      const char* log_csv);
/* Writes "<checkpoint_prefix>.round<k>.mm2g" after each round when the prefix
 * is non-NULL. */
MFLOW_API mflow_status mflow_train_flows(mflow_system* sys, const mflow_config* cfg,
                                         const char* log_csv, const char* checkpoint_prefix);

/* ---- generation ------------------------------------------------------- */

/* Generates `count` samples of `target`. With a non-NULL `source` every sample
 * is conditioned on the held-out source sample of validation scene i.
 * Images are written as "<dir>/<target>_<i>.pgm", text as "<dir>/<target>.txt". */
MFLOW_API mflow_status mflow_sample(const mflow_system* sys, const char* target,
                                    const char* source, size_t count, const char* dir);
/* Joint generation of the comma-separated modalities. Writes per-modality
 * outputs as mflow_sample does, plus "<dir>/joint_<i>.ppm" with up to three
 * image modalities as the red, green and blue planes. */
MFLOW_API mflow_status mflow_joint_sample(const mflow_system* sys, const char* modalities,
                                          size_t count, const char* dir);

/* ---- evaluation ------------------------------------------------------- */

/* Writes "metric,value" rows: retrieval for every modality pair, matched and
 * null conditional losses for every flow pair, and xray|text fidelity. */
MFLOW_API mflow_status mflow_evaluate(const mflow_system* sys, const char* metrics_csv);
/* "t,beta,alpha_bar,snr" with one row per diffusion step; NULL or "-"
 * writes to standard output. */
MFLOW_API mflow_status mflow_write_schedule(const mflow_config* cfg, const char* csv_path);

/* Image metrics on row-major [0, 1] images of equal size. */
MFLOW_API mflow_status mflow_psnr(const double* a, const double* b, size_t height, size_t width,
                                  double peak, double* out);
MFLOW_API mflow_status mflow_ssim(const double* a, const double* b, size_t height, size_t width,
                                  double peak, double* out);

#ifdef __cplusplus
}
#endif

#endif /* MFLOW_C_API_H */
