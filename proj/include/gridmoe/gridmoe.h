/* Copyright 2026 The gridmoe Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to gridmoe. All objects are opaque handles owned by the
 * caller and released with the matching *_free function. Every call that can
 * fail returns a gm_status; on failure gm_last_error() describes the problem
 * and gm_last_error_field() names the offending config field, if any. Both
 * strings are thread-local and valid until the next failing call on the
 * same thread.
 */

#ifndef GRIDMOE_GRIDMOE_H_
#define GRIDMOE_GRIDMOE_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define GM_API __declspec(dllexport)
#else
#define GM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gm_status {
    GM_OK = 0,
    GM_ERR_INVALID_ARGUMENT = 1, /* null pointer or misuse of a handle */
    GM_ERR_CONFIG = 2,           /* config or shape validation failed */
    GM_ERR_RUNTIME = 3,          /* training aborted or another runtime failure */
    GM_ERR_IO = 4,
    GM_ERR_OUTPUT_EXISTS = 5,    /* output directory not empty and force not set */
} gm_status;

GM_API const char* gm_version(void);
GM_API const char* gm_last_error(void);
GM_API const char* gm_last_error_field(void);

/* Strings returned through char** out-parameters. */
GM_API void gm_free_string(char* s);

/* ---- run configuration ---- */

typedef struct gm_config gm_config;

GM_API gm_status gm_config_load(const char* path, gm_config** out);
GM_API gm_status gm_config_parse(const char* json_text, gm_config** out);
/* Dotted-key override; value is JSON text (a bare word is taken as a string).
 * Revalidates the whole config. */
GM_API gm_status gm_config_set(gm_config* cfg, const char* key, const char* value);
GM_API gm_status gm_config_set_seed(gm_config* cfg, uint64_t seed);
/* Canonical resolved JSON. */
GM_API gm_status gm_config_to_json(const gm_config* cfg, char** out);
GM_API gm_status gm_config_hash(const gm_config* cfg, char** out);
GM_API void gm_config_free(gm_config* cfg);

enum {
    GM_TRAIN_NO_DSO = 1u << 0,
    GM_TRAIN_NO_MOE = 1u << 1,
    GM_TRAIN_FORCE = 1u << 2,
};

/* Resolves the output directory: out_dir if non-null and non-empty, then
 * run.out_dir, then $GRIDMOE_OUT/<default_name>, then runs/<default_name>. */
GM_API gm_status gm_resolve_out_dir(const gm_config* cfg, const char* out_dir, const char* default_name,
                                    char** resolved);

/* Trains and writes all artifacts to out_dir (resolved as above with the
 * default name "train"). *resolved_out, when non-null, receives the directory used.
 * A training abort returns GM_ERR_RUNTIME after writing abort_dump.csv. */
GM_API gm_status gm_train(const gm_config* cfg, const char* out_dir, unsigned flags, char** resolved_out);

/* grid: "section.key=v1,v2 section.key=v3". */
GM_API gm_status gm_sweep(const char* config_path, const char* grid, const char* out_dir, unsigned flags,
                          size_t* cells, char** resolved_out);

/* modality: "A", "B" or "C". checkpoint: checkpoint.bin or a run directory
 * containing it. summary receives a human-readable report. */
GM_API gm_status gm_inspect_gates(const gm_config* cfg, const char* checkpoint, const char* modality, size_t n,
                                  const char* out_dir, unsigned flags, char** summary);

/* 1 when the manifest's config hash matches config.json in run_dir, 0 when
 * it does not. */
GM_API gm_status gm_verify_manifest(const char* run_dir, int* ok);

/* ---- single MoE layer ---- */

typedef struct gm_moe_layer gm_moe_layer;

typedef struct gm_moe_options {
    size_t n_experts;
    size_t top_k;
    double gate_temperature;
    size_t in_channels;
    size_t out_channels;
    size_t gate_dim;
    uint64_t seed;
    double init_std;
    int identical_embeddings;
} gm_moe_options;

GM_API void gm_moe_default_options(gm_moe_options* options);

/* weight: out x in row-major, bias: out (may be null for zero bias). */
GM_API gm_status gm_moe_create_from_pretrained(const gm_moe_options* options, const double* weight,
                                               const double* bias, gm_moe_layer** out);

/* Routes one feature vector of in_channels values. selected and weights
 * receive top_k entries each, most probable expert first. */
GM_API gm_status gm_moe_gate(const gm_moe_layer* layer, const double* x, size_t* selected, double* weights);

/* x: height x width x in_channels; out: height x width x out_channels.
 * expert_applications, when non-null, receives the number of expert
 * evaluations performed. */
GM_API gm_status gm_moe_forward(const gm_moe_layer* layer, const double* x, size_t height, size_t width,
                                double* out, size_t* expert_applications);
GM_API void gm_moe_free(gm_moe_layer* layer);

/* ---- DSO governor ---- */

typedef struct gm_dso gm_dso;

typedef struct gm_dso_options {
    double alpha;
    double theta;
    double tau;
    double bias_b;
    size_t n_tasks;
} gm_dso_options;

GM_API void gm_dso_default_options(gm_dso_options* options);
GM_API gm_status gm_dso_create(const gm_dso_options* options, gm_dso** out);

/* lambdas receives n_tasks values. skipped, when non-null, is set to 1 when
 * the losses were rejected (non-finite or non-positive). */
GM_API gm_status gm_dso_step(gm_dso* dso, const double* losses, double* lambdas, double* gamma, double* consistency,
                             int* skipped);
GM_API void gm_dso_free(gm_dso* dso);

#ifdef __cplusplus
}
#endif

#endif /* GRIDMOE_GRIDMOE_H_ */
