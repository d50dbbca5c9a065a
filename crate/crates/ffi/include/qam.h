#ifndef QAM_H
#define QAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QamStatus {
  QAM_STATUS_OK = 0,
  QAM_STATUS_INVALID_INPUT = 1,
  QAM_STATUS_NOT_COPRIME = 2,
  QAM_STATUS_NOT_RESONANT = 3,
  QAM_STATUS_DEGENERATE = 4,
  QAM_STATUS_TRUNCATION = 5,
  QAM_STATUS_IO = 6,
  QAM_STATUS_NULL_POINTER = 7,
  QAM_STATUS_BUFFER_TOO_SMALL = 8,
  QAM_STATUS_PANIC = 9,
} QamStatus;

/**
 * Periodic orbits of one map for a fixed period and jumping index.
 */
typedef struct QamCatalog QamCatalog;

/**
 * A period map `F^(T)_0` on the torus.
 */
typedef struct QamMap QamMap;

/**
 * Quantum state of one quasi-momentum component.
 */
typedef struct QamRotor QamRotor;

/**
 * One catalog row as plain data.
 */
typedef struct QamOrbit {
  double theta0;
  double j0;
  double trace;
  double residue;
  bool stable;
  double a_predicted;
} QamOrbit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *qam_last_error(void);

/**
 * Writes the `q` Gauss coefficients of resonance `p/q` at quasi-momentum
 * `beta_num/beta_den` into `re`/`im`, which must hold `len >= q` values.
 *
 * # Safety
 * `re` and `im` must be valid for `len` writes.
 */
enum QamStatus qam_gauss_coefficients(int64_t p,
                                      int64_t q,
                                      int64_t beta_num,
                                      int64_t beta_den,
                                      double *re,
                                      double *im,
                                      size_t len);

/**
 * Plane wave `|m0>` at quasi-momentum `beta`, sized for kicks of strength `k`.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum QamStatus qam_rotor_new(int64_t m0, double beta, double k, struct QamRotor **out);

/**
 * # Safety
 * `rotor` must come from [`qam_rotor_new`] and not be used afterwards.
 */
void qam_rotor_free(struct QamRotor *rotor);

/**
 * Applies kicks `n_start .. n_start + n_kicks` of the gravity-kicked rotor.
 *
 * # Safety
 * `rotor` must be a live handle.
 */
enum QamStatus qam_rotor_evolve(struct QamRotor *rotor,
                                double k,
                                double tau,
                                double eta,
                                int64_t n_start,
                                size_t n_kicks);

/**
 * Lowest ladder index and number of amplitudes in the current window.
 *
 * # Safety
 * `rotor` must be a live handle; outputs valid for one write.
 */
enum QamStatus qam_rotor_window(const struct QamRotor *rotor, int64_t *m_min, size_t *len);

/**
 * Copies `|amplitude|^2` over the window returned by [`qam_rotor_window`].
 *
 * # Safety
 * `rotor` must be a live handle; `out` valid for `len` writes.
 */
enum QamStatus qam_rotor_probabilities(const struct QamRotor *rotor, double *out, size_t len);

/**
 * `<(m + beta)^2>`.
 *
 * # Safety
 * `rotor` must be a live handle; `out` valid for one write.
 */
enum QamStatus qam_rotor_second_moment(const struct QamRotor *rotor, double *out);

/**
 * Map with `delta_t = 2 pi d[t] / q`, `t < d_len`.
 *
 * # Safety
 * `d` must be valid for `d_len` reads; `out` for one write.
 */
enum QamStatus qam_map_new(double k_tilde,
                           double drift,
                           int64_t q,
                           const int64_t *d,
                           size_t d_len,
                           struct QamMap **out);

/**
 * # Safety
 * `map` must come from [`qam_map_new`] and not be used afterwards.
 */
void qam_map_free(struct QamMap *map);

/**
 * One application of the period map starting at step `t_start`, in place.
 *
 * # Safety
 * `map` must be a live handle; `theta` and `j` valid for read and write.
 */
enum QamStatus qam_map_apply(const struct QamMap *map, size_t t_start, double *theta, double *j);

/**
 * Searches periodic orbits of period `period_p` and jumping index `jump_j`
 * on a `grid x grid` seed lattice. `epsilon` sets the predicted
 * accelerations; pass 0 to leave them NaN.
 *
 * # Safety
 * `map` must be a live handle; `out` valid for one write.
 */
enum QamStatus qam_catalog_new(const struct QamMap *map,
                               size_t period_p,
                               int64_t jump_j,
                               double epsilon,
                               size_t grid,
                               struct QamCatalog **out);

/**
 * # Safety
 * `catalog` must come from [`qam_catalog_new`] and not be used afterwards.
 */
void qam_catalog_free(struct QamCatalog *catalog);

/**
 * Number of orbits, or 0 for a null handle.
 *
 * # Safety
 * `catalog` must be a live handle or null.
 */
size_t qam_catalog_len(const struct QamCatalog *catalog);

/**
 * # Safety
 * `catalog` must be a live handle; `out` valid for one write.
 */
enum QamStatus qam_catalog_get(const struct QamCatalog *catalog,
                               size_t index,
                               struct QamOrbit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QAM_H */
