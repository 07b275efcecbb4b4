#ifndef SPECPAR_H
#define SPECPAR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpecparDraft {
  SPECPAR_DRAFT_NONE = 0,
  SPECPAR_DRAFT_AUTOREGRESSIVE = 1,
  SPECPAR_DRAFT_RETRIEVAL = 2,
} SpecparDraft;

typedef enum SpecparSchedule {
  SPECPAR_SCHEDULE_PIPELINED = 0,
  SPECPAR_SCHEDULE_SERIAL = 1,
} SpecparSchedule;

typedef enum SpecparStatus {
  SPECPAR_STATUS_OK = 0,
  SPECPAR_STATUS_NULL_POINTER = 1,
  SPECPAR_STATUS_INVALID_UTF8 = 2,
  SPECPAR_STATUS_INVALID_ARGUMENT = 3,
  SPECPAR_STATUS_IO = 4,
  SPECPAR_STATUS_PARSE = 5,
  SPECPAR_STATUS_BUFFER_TOO_SMALL = 6,
  SPECPAR_STATUS_INTERNAL = 7,
} SpecparStatus;

// Hierarchical datastore handle.
typedef struct SpecparDatastore SpecparDatastore;

// Table model handle.
typedef struct SpecparModel SpecparModel;

// Finished run handle.
typedef struct SpecparRun SpecparRun;

// Decoding parameters for `specpar_generate`. Forward latencies are taken
// from the models' forward costs.
typedef struct SpecparParams {
  size_t gamma;
  size_t depth;
  enum SpecparDraft draft;
  enum SpecparSchedule schedule;
  bool target_retrieval;
  bool rejected_cache;
  bool concurrent;
  // 0 selects greedy decoding.
  double temperature;
  uint64_t seed;
  size_t max_new_tokens;
  double t_lookup;
  double t_sync;
} SpecparParams;

// Closed-form quantities for one `(alpha, gamma, C)` point.
typedef struct SpecparTheory {
  double e_single;
  double rounds;
  double e_multi;
  double speedup_sd;
  double speedup_psd;
  double psd_bound;
} SpecparTheory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *specpar_last_error(void);

// Library version as a static string.
const char *specpar_version(void);

// Loads a model in `model-v1` text format.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SpecparStatus specpar_model_load(const char *path,
                                      double forward_cost,
                                      struct SpecparModel **out);

// Parses a model from `model-v1` text.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum SpecparStatus specpar_model_from_text(const char *text,
                                           double forward_cost,
                                           struct SpecparModel **out);

// Vocabulary size, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t specpar_model_vocab_size(const struct SpecparModel *model);

// Writes the next-token distribution for `context` into `probs`, which must
// hold at least the vocabulary size.
//
// # Safety
// `model` must be a live handle, `context` must point to `len` tokens and
// `probs` to `cap` doubles.
enum SpecparStatus specpar_model_forward(const struct SpecparModel *model,
                                         const uint32_t *context,
                                         size_t len,
                                         double *probs,
                                         size_t cap);

// # Safety
// `model` must be null or a handle not yet freed.
void specpar_model_free(struct SpecparModel *model);

// Creates a datastore, optionally with a prior index file.
//
// # Safety
// `prior_path` must be null or a NUL-terminated string; `out` must be valid.
enum SpecparStatus specpar_datastore_new(const char *prior_path,
                                         size_t max_order,
                                         size_t depth,
                                         struct SpecparDatastore **out);

// Retrieves up to `depth` continuation tokens for `context`. The number of
// candidates is stored in `out_len` even when `cap` is too small.
//
// # Safety
// `store` must be a live handle, `context` must point to `len` tokens,
// `buf` to `cap` slots and `out_len` must be null or valid.
enum SpecparStatus specpar_datastore_lookup(const struct SpecparDatastore *store,
                                            const uint32_t *context,
                                            size_t len,
                                            size_t depth,
                                            uint32_t *buf,
                                            size_t cap,
                                            size_t *out_len);

// Adds accepted tokens to the session layer.
//
// # Safety
// `store` must be a live handle and `tokens` must point to `len` tokens.
enum SpecparStatus specpar_datastore_record(struct SpecparDatastore *store,
                                            const uint32_t *tokens,
                                            size_t len,
                                            uint64_t step);

// # Safety
// `store` must be null or a handle not yet freed.
void specpar_datastore_free(struct SpecparDatastore *store);

// Greedy double-retrieval defaults.
//
// # Safety
// `out` must be a valid pointer.
enum SpecparStatus specpar_params_default(struct SpecparParams *out);

// Decodes after `prompt`. The datastore's session layers are reset when the
// call returns.
//
// # Safety
// All handles must be live, `prompt` must point to `len` tokens and `out`
// must be valid.
enum SpecparStatus specpar_generate(const struct SpecparModel *draft,
                                    const struct SpecparModel *target,
                                    struct SpecparDatastore *store,
                                    const uint32_t *prompt,
                                    size_t len,
                                    const struct SpecparParams *params,
                                    struct SpecparRun **out);

// Builds and runs the experiment described by config text.
//
// # Safety
// `config` must be a NUL-terminated string and `out` a valid pointer.
enum SpecparStatus specpar_run_config(const char *config, struct SpecparRun **out);

// Copies the generated tokens into `buf`.
//
// # Safety
// `run` must be a live handle, `buf` must point to `cap` slots and
// `out_len` must be null or valid.
enum SpecparStatus specpar_run_tokens(const struct SpecparRun *run,
                                      uint32_t *buf,
                                      size_t cap,
                                      size_t *out_len);

// Simulated speedup over target-only decoding; NaN for a null handle.
//
// # Safety
// `run` must be null or a live handle.
double specpar_run_speedup(const struct SpecparRun *run);

// Mean tokens committed between rejections; NaN for a null handle.
//
// # Safety
// `run` must be null or a live handle.
double specpar_run_mean_accepted(const struct SpecparRun *run);

// Simulated clock at the end of the run; NaN for a null handle.
//
// # Safety
// `run` must be null or a live handle.
double specpar_run_clock(const struct SpecparRun *run);

// Number of rounds; 0 for a null handle.
//
// # Safety
// `run` must be null or a live handle.
size_t specpar_run_rounds(const struct SpecparRun *run);

// # Safety
// `run` must be null or a handle not yet freed.
void specpar_run_free(struct SpecparRun *run);

// Closed forms at one parameter point. Fails when `alpha` is 1, since no
// round is ever rejected.
//
// # Safety
// `out` must be a valid pointer.
enum SpecparStatus specpar_analyze(double alpha, size_t gamma, double c, struct SpecparTheory *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECPAR_H */
