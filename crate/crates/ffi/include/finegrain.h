#ifndef FINEGRAIN_H
#define FINEGRAIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_UTF8 = 2,
  FG_STATUS_IO = 3,
  FG_STATUS_INVALID_INPUT = 4,
  FG_STATUS_OUT_OF_RANGE = 5,
  FG_STATUS_UNDEFINED = 6,
  FG_STATUS_PANIC = 7,
} FgStatus;

/**
 * A loaded, validated corpus.
 */
typedef struct FgCorpus FgCorpus;

/**
 * A trained scorer checkpoint.
 */
typedef struct FgScorer FgScorer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *fg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fg_version(void);

/**
 * Parse JSONL corpus text. Fails on the first invalid line.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FgStatus fg_corpus_parse(const char *text, struct FgCorpus **out);

/**
 * Load a JSONL corpus file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FgStatus fg_corpus_load(const char *path, struct FgCorpus **out);

/**
 * Count the problems in JSONL corpus text without stopping at the first.
 * Returns `FG_STATUS_INVALID_INPUT` when any were found; the last error
 * then holds the first one.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out_issues` writable.
 */
enum FgStatus fg_corpus_validate(const char *text, size_t *out_issues);

/**
 * Number of records; 0 for a null handle.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t fg_corpus_len(const struct FgCorpus *corpus);

/**
 * Word-level hallucination rate of record `index`.
 *
 * # Safety
 * `corpus` must be a live handle and `out` writable.
 */
enum FgStatus fg_corpus_hallucination_rate(const struct FgCorpus *corpus,
                                           size_t index,
                                           double *out);

/**
 * # Safety
 * `corpus` must be null or a handle not yet freed.
 */
void fg_corpus_free(struct FgCorpus *corpus);

/**
 * Load a scorer checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FgStatus fg_scorer_load(const char *path, struct FgScorer **out);

/**
 * Number of classifier classes (2 or 3 for a reward model); 0 for null.
 *
 * # Safety
 * `scorer` must be null or a live handle.
 */
size_t fg_scorer_num_classes(const struct FgScorer *scorer);

/**
 * Score a passage. Writes the passage score to `out_score`, the sentence
 * count to `out_sentences`, and up to `capacity` sentence scores into
 * `sentence_scores` (which may be null when `capacity` is 0).
 *
 * # Safety
 * String arguments must be NUL-terminated; `sentence_scores` must have room
 * for `capacity` values; the out pointers must be writable.
 */
enum FgStatus fg_scorer_score_passage(const struct FgScorer *scorer,
                                      const char *prompt,
                                      const char *response,
                                      double *out_score,
                                      double *sentence_scores,
                                      size_t capacity,
                                      size_t *out_sentences);

/**
 * # Safety
 * `scorer` must be null or a handle not yet freed.
 */
void fg_scorer_free(struct FgScorer *scorer);

/**
 * Pearson correlation of two arrays of length `len`.
 *
 * # Safety
 * `xs` and `ys` must point to `len` readable values; `out` must be writable.
 */
enum FgStatus fg_pearson(const double *xs, const double *ys, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FINEGRAIN_H */
