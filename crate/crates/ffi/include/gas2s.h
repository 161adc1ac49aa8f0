#ifndef GAS2S_H
#define GAS2S_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum Gas2sStatus {
  GAS2S_STATUS_OK = 0,
  GAS2S_STATUS_NULL_POINTER = 1,
  GAS2S_STATUS_INVALID_ARGUMENT = 2,
  GAS2S_STATUS_IO = 3,
  GAS2S_STATUS_PARSE = 4,
  GAS2S_STATUS_CHECKPOINT = 5,
  GAS2S_STATUS_CONFIG = 6,
  GAS2S_STATUS_NUMERIC = 7,
  GAS2S_STATUS_BUFFER_TOO_SMALL = 8,
  GAS2S_STATUS_PANIC = 9,
} Gas2sStatus;

typedef struct Gas2sGraph Gas2sGraph;

typedef struct Gas2sMetrics Gas2sMetrics;

typedef struct Gas2sModel Gas2sModel;

typedef struct Gas2sVocab Gas2sVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`) and returns the full message length
 * without the terminator; 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t gas2s_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void gas2s_string_free(char *s);

/**
 * Loads a dataset directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum Gas2sStatus gas2s_graph_load(const char *dir, struct Gas2sGraph **out);

/**
 * # Safety
 * `g` must be null or a handle from [`gas2s_graph_load`], freed once.
 */
void gas2s_graph_free(struct Gas2sGraph *g);

/**
 * # Safety
 * `g` must be a live graph handle; out-pointers must be writable.
 */
enum Gas2sStatus gas2s_graph_counts(const struct Gas2sGraph *g,
                                    size_t *entities,
                                    size_t *relations);

/**
 * Graph statistics as a JSON object.
 *
 * # Safety
 * `g` must be a live graph handle; `out` must be writable.
 */
enum Gas2sStatus gas2s_graph_stats_json(const struct Gas2sGraph *g, char **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum Gas2sStatus gas2s_vocab_load(const char *path, struct Gas2sVocab **out);

/**
 * Trains a tokenizer on the graph's entity and relation mentions.
 *
 * # Safety
 * `g` must be a live graph handle; `out` must be writable.
 */
enum Gas2sStatus gas2s_vocab_train(const struct Gas2sGraph *g,
                                   size_t vocab_size,
                                   struct Gas2sVocab **out);

/**
 * # Safety
 * `v` must be a live vocabulary handle; `path` a NUL-terminated string.
 */
enum Gas2sStatus gas2s_vocab_save(const struct Gas2sVocab *v, const char *path);

/**
 * # Safety
 * `v` must be a live vocabulary handle; `size` must be writable.
 */
enum Gas2sStatus gas2s_vocab_size(const struct Gas2sVocab *v, size_t *size);

/**
 * Encodes `text` (EOS appended). Writes up to `cap` ids and the full
 * length to `len`; returns `BUFFER_TOO_SMALL` when `cap` is short.
 *
 * # Safety
 * `ids` must be null or point to `cap` writable `u32`s.
 */
enum Gas2sStatus gas2s_vocab_encode(const struct Gas2sVocab *v,
                                    const char *text,
                                    uint32_t *ids,
                                    size_t cap,
                                    size_t *len);

/**
 * Decodes ids back to text.
 *
 * # Safety
 * `ids` must point to `n` readable `u32`s; `out` must be writable.
 */
enum Gas2sStatus gas2s_vocab_decode(const struct Gas2sVocab *v,
                                    const uint32_t *ids,
                                    size_t n,
                                    char **out);

/**
 * # Safety
 * `v` must be null or a vocabulary handle, freed once.
 */
void gas2s_vocab_free(struct Gas2sVocab *v);

/**
 * Loads a checkpoint and checks it against the graph and vocabulary.
 *
 * # Safety
 * Handles must be live; `path` NUL-terminated; `out` writable.
 */
enum Gas2sStatus gas2s_model_load(const char *path,
                                  const struct Gas2sGraph *g,
                                  const struct Gas2sVocab *v,
                                  struct Gas2sModel **out);

/**
 * # Safety
 * `m` must be null or a model handle, freed once.
 */
void gas2s_model_free(struct Gas2sModel *m);

/**
 * Ranks answers for `(entity, relation, ?)` (`direction` 0) or
 * `(?, relation, entity)` (`direction` 1). Entity and relation are raw
 * ids or mentions. Writes a JSON array of
 * `{"rank", "mention", "entity", "log_prob"}` objects, at most `top_k`.
 * With `filtered` nonzero, answers known in any split are skipped.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated; `out` writable.
 */
enum Gas2sStatus gas2s_predict(const struct Gas2sModel *m,
                               const struct Gas2sGraph *g,
                               const struct Gas2sVocab *v,
                               const char *entity,
                               const char *relation,
                               uint32_t direction,
                               size_t top_k,
                               size_t beam_width,
                               int32_t filtered,
                               uint64_t seed,
                               char **out);

/**
 * Filtered evaluation of a split (0 train, 1 valid, 2 test).
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum Gas2sStatus gas2s_evaluate(const struct Gas2sModel *m,
                                const struct Gas2sGraph *g,
                                const struct Gas2sVocab *v,
                                uint32_t split,
                                size_t beam_width,
                                uint64_t seed,
                                struct Gas2sMetrics **out);

/**
 * # Safety
 * `r` must be a live metrics handle; out-pointers writable.
 */
enum Gas2sStatus gas2s_metrics_get(const struct Gas2sMetrics *r,
                                   double *mrr,
                                   double *hits1,
                                   double *hits3,
                                   double *hits10,
                                   size_t *query_count);

/**
 * # Safety
 * `r` must be null or a metrics handle, freed once.
 */
void gas2s_metrics_free(struct Gas2sMetrics *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAS2S_H */
