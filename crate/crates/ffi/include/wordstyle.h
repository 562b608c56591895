#ifndef WORDSTYLE_H
#define WORDSTYLE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

// Number of feature channels per frame.
#define WS_N_CHANNELS 22

// Result codes of every fallible call.
typedef enum WsStatus {
  WS_STATUS_OK = 0,
  // A required pointer was null or a string was not UTF-8.
  WS_STATUS_NULL_OR_INVALID_ARGUMENT = 1,
  // Input failed validation (unknown phoneme, bad shape, out-of-range
  // index, malformed text).
  WS_STATUS_VALIDATION = 2,
  // A file could not be read or written.
  WS_STATUS_IO = 3,
  // A checkpoint is missing, corrupt or incompatible.
  WS_STATUS_CHECKPOINT = 4,
  // A caller-supplied buffer is too small.
  WS_STATUS_BUFFER_TOO_SMALL = 5,
  // Any other failure, including a caught panic.
  WS_STATUS_INTERNAL = 6,
} WsStatus;

// A loaded checkpoint.
typedef struct WsModel WsModel;

// Synthesized features with their phoneme durations.
typedef struct WsSynthesis WsSynthesis;

// Style bias applied to synthesized word embeddings.
typedef struct WsBias {
  uint32_t token;
  // Amount in standard deviations of the token's corpus weight.
  double amount_stds;
  // Word index, or a negative value for every word.
  int64_t word;
} WsBias;

// Corpus-level scores of one synthesized utterance.
typedef struct WsMetrics {
  double ffe;
  double vde;
  double gpe;
  double mcd;
  uintptr_t n_frames_compared;
} WsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *ws_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ws_version(void);

// Writes a synthetic corpus of `n_utterances` into `out_dir`.
//
// # Safety
// `out_dir` must be a valid NUL-terminated string.
enum WsStatus ws_generate_corpus(const char *out_dir, uint32_t n_utterances, uint64_t seed);

// Loads a checkpoint directory.
//
// # Safety
// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
enum WsStatus ws_model_load(const char *dir, struct WsModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`ws_model_load`] and not have been freed.
void ws_model_free(struct WsModel *model);

// Number of style tokens, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
uint32_t ws_model_n_tokens(const struct WsModel *model);

// Training steps recorded in the checkpoint, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
uint64_t ws_model_step(const struct WsModel *model);

// Synthesizes `text` (words separated by spaces, phonemes by `.`) with
// word styles predicted by the prior, then biased.
//
// # Safety
// `model` must be a live handle, `text` a valid NUL-terminated string,
// `biases` readable for `n_biases` elements (may be null when zero) and
// `out` a valid pointer.
enum WsStatus ws_synthesize_prior(const struct WsModel *model,
                                  const char *text,
                                  const struct WsBias *biases,
                                  uintptr_t n_biases,
                                  struct WsSynthesis **out);

// Synthesizes `text` with the word styles of utterance `reference_id` in
// `corpus_dir`, mixed with the prior by `alpha` (1 uses the reference
// alone), then biased.
//
// # Safety
// As for [`ws_synthesize_prior`]; `corpus_dir` and `reference_id` must be
// valid NUL-terminated strings.
enum WsStatus ws_synthesize_reference(const struct WsModel *model,
                                      const char *text,
                                      const char *corpus_dir,
                                      const char *reference_id,
                                      double alpha,
                                      const struct WsBias *biases,
                                      uintptr_t n_biases,
                                      struct WsSynthesis **out);

// Releases a synthesis result. Null is ignored.
//
// # Safety
// `synth` must come from a `ws_synthesize_*` call and not have been freed.
void ws_synthesis_free(struct WsSynthesis *synth);

// Number of frames, or 0 for a null handle.
//
// # Safety
// `synth` must be null or a live handle.
uintptr_t ws_synthesis_n_frames(const struct WsSynthesis *synth);

// Number of phonemes, or 0 for a null handle.
//
// # Safety
// `synth` must be null or a live handle.
uintptr_t ws_synthesis_n_phonemes(const struct WsSynthesis *synth);

// Copies the `n_frames x 22` row-major features into `buf`, which must
// hold `len >= n_frames * 22` floats.
//
// # Safety
// `synth` must be a live handle and `buf` writable for `len` floats.
enum WsStatus ws_synthesis_copy_features(const struct WsSynthesis *synth,
                                         float *buf,
                                         uintptr_t len);

// Copies the per-phoneme frame counts into `buf` (`len >= n_phonemes`).
//
// # Safety
// `synth` must be a live handle and `buf` writable for `len` elements.
enum WsStatus ws_synthesis_copy_durations(const struct WsSynthesis *synth,
                                          uint32_t *buf,
                                          uintptr_t len);

// DTW-aligns `estimate` to `reference` (both row-major `frames x 22`) and
// computes FFE, VDE, GPE and MCD.
//
// # Safety
// `reference` and `estimate` must be readable for `frames * 22` floats and
// `out` must be a valid pointer.
enum WsStatus ws_evaluate_pair(const float *reference,
                               uintptr_t reference_frames,
                               const float *estimate,
                               uintptr_t estimate_frames,
                               struct WsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WORDSTYLE_H */
