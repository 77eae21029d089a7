#ifndef LOWRANK_CME_H
#define LOWRANK_CME_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LrcmeStatus {
  LRCME_STATUS_OK = 0,
  LRCME_STATUS_NULL_POINTER = 1,
  LRCME_STATUS_INVALID_ARGUMENT = 2,
  LRCME_STATUS_INVALID_MODEL = 3,
  LRCME_STATUS_BUDGET_EXCEEDED = 4,
  LRCME_STATUS_INSTABILITY = 5,
  LRCME_STATUS_IO = 6,
  LRCME_STATUS_BUFFER_TOO_SMALL = 7,
  LRCME_STATUS_PANIC = 8,
} LrcmeStatus;

/**
 * A parsed reaction network.
 */
typedef struct LrcmeNetwork LrcmeNetwork;

/**
 * A low-rank state together with the integrator that advances it.
 */
typedef struct LrcmeSolver LrcmeSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *lrcme_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lrcme_version(void);

/**
 * Parses a JSON model document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LrcmeStatus lrcme_network_from_json(const char *json, struct LrcmeNetwork **out);

/**
 * Number of species, or 0 for a null handle.
 *
 * # Safety
 * `network` must be null or a live handle.
 */
size_t lrcme_network_species(const struct LrcmeNetwork *network);

/**
 * Number of reaction channels, or 0 for a null handle.
 *
 * # Safety
 * `network` must be null or a live handle.
 */
size_t lrcme_network_reactions(const struct LrcmeNetwork *network);

/**
 * # Safety
 * `network` must be null or a handle not yet freed.
 */
void lrcme_network_free(struct LrcmeNetwork *network);

/**
 * Builds a solver from a JSON description:
 * `{"space": {...}?, "initial": {...}, "rank": r, "order": 1|2?,
 * "substeps": k?, "scheme": "euler"|"rk4"?}`. Without `space` the model's
 * own truncation is used.
 *
 * # Safety
 * `network` must be a live handle, `config` a NUL-terminated string and
 * `out` a valid pointer.
 */
enum LrcmeStatus lrcme_solver_new(const struct LrcmeNetwork *network,
                                  const char *config,
                                  struct LrcmeSolver **out);

/**
 * Advances the state by one splitting step of size `tau`.
 *
 * # Safety
 * `solver` must be a live handle.
 */
enum LrcmeStatus lrcme_solver_step(struct LrcmeSolver *solver, double tau);

/**
 * Current time of the solver.
 *
 * # Safety
 * `solver` must be a live handle and `out` a valid pointer.
 */
enum LrcmeStatus lrcme_solver_time(const struct LrcmeSolver *solver, double *out);

/**
 * Total probability of the current state.
 *
 * # Safety
 * `solver` must be a live handle and `out` a valid pointer.
 */
enum LrcmeStatus lrcme_solver_mass(const struct LrcmeSolver *solver, double *out);

/**
 * Writes the marginal of `species` (0-based) into `buf`. `written` receives
 * the required length, also when the buffer is too small.
 *
 * # Safety
 * `solver` must be a live handle, `buf` must hold `len` doubles and
 * `written` must be a valid pointer.
 */
enum LrcmeStatus lrcme_solver_marginal(const struct LrcmeSolver *solver,
                                       size_t species,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

/**
 * # Safety
 * `solver` must be null or a handle not yet freed.
 */
void lrcme_solver_free(struct LrcmeSolver *solver);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOWRANK_CME_H */
