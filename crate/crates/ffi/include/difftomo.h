#ifndef DIFFTOMO_H
#define DIFFTOMO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result codes.
typedef enum DtStatus {
  DT_STATUS_OK = 0,
  DT_STATUS_NULL_POINTER = 1,
  DT_STATUS_INVALID_ARGUMENT = 2,
  DT_STATUS_GRID_MISMATCH = 3,
  DT_STATUS_NON_FINITE = 4,
  DT_STATUS_OUT_OF_RANGE = 5,
  DT_STATUS_DIVERGED = 6,
  DT_STATUS_IO = 7,
  DT_STATUS_PANIC = 8,
  DT_STATUS_BUFFER_TOO_SMALL = 9,
} DtStatus;

// Acquisition geometry handle.
typedef struct DtGeometry DtGeometry;

// Measurement set handle.
typedef struct DtMeasurements DtMeasurements;

// Phase stack handle.
typedef struct DtStack DtStack;

// Fixed-step solver settings.
typedef struct DtSolverConfig {
  size_t iterations;
  double step;
  double tv_alpha;
  size_t tv_inner_iters;
} DtSolverConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *dt_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *dt_version(void);

// Default desk-scale geometry (128 x 128, 16 um pitch, 4 layers).
//
// # Safety
// `out` must be null or point to writable storage for a handle pointer.
enum DtStatus dt_geometry_default(struct DtGeometry **out);

// Default geometry with a custom grid and layer stack.
//
// # Safety
// `out` must be null or point to writable storage for a handle pointer.
enum DtStatus dt_geometry_new(size_t nx,
                              size_t ny,
                              double pitch,
                              size_t layers,
                              double dz,
                              struct DtGeometry **out);

// Set the detection model: photon flux per pixel and read-noise statistics.
//
// # Safety
// `geom` must be null or a live geometry handle.
enum DtStatus dt_geometry_set_detection(struct DtGeometry *geom,
                                        double photon_flux,
                                        double read_sigma,
                                        double read_mean);

// # Safety
// `geom` must be null or a handle not yet freed.
void dt_geometry_free(struct DtGeometry *geom);

// Random layered phantom with the default pattern statistics.
//
// # Safety
// `geom` must be null or a live handle; `out` null or writable.
enum DtStatus dt_stack_synthesize(const struct DtGeometry *geom,
                                  uint64_t seed,
                                  struct DtStack **out);

// Stack from `layers * ny * nx` row-major phase values, layer-major.
//
// # Safety
// `geom` must be null or a live handle; `data` must hold `len` values.
enum DtStatus dt_stack_from_data(const struct DtGeometry *geom,
                                 const double *data,
                                 size_t len,
                                 struct DtStack **out);

// Shape of a stack.
//
// # Safety
// `stack` must be null or a live handle; output pointers null or writable.
enum DtStatus dt_stack_dims(const struct DtStack *stack, size_t *layers, size_t *ny, size_t *nx);

// Copy all phase values (layer-major, row-major) into `buf`.
//
// # Safety
// `stack` must be null or a live handle; `buf` must hold `len` values.
enum DtStatus dt_stack_copy_data(const struct DtStack *stack, double *buf, size_t len);

// # Safety
// `stack` must be null or a handle not yet freed.
void dt_stack_free(struct DtStack *stack);

// Simulate `view_count` views of the standard tilt protocol (22 gives the
// default set). `noisy = 0` disables noise; otherwise noise is seeded by
// `noise_seed`.
//
// # Safety
// Handles must be null or live; `out` null or writable.
enum DtStatus dt_simulate(const struct DtStack *stack,
                          const struct DtGeometry *geom,
                          size_t view_count,
                          int32_t noisy,
                          uint64_t noise_seed,
                          struct DtMeasurements **out);

// Number of views in a measurement set, 0 for null.
//
// # Safety
// `meas` must be null or a live handle.
size_t dt_measurements_view_count(const struct DtMeasurements *meas);

// Copy one detected image (row-major, `ny * nx` counts) into `buf`.
//
// # Safety
// `meas` must be null or a live handle; `buf` must hold `len` values.
enum DtStatus dt_measurements_copy_view(const struct DtMeasurements *meas,
                                        size_t view,
                                        double *buf,
                                        size_t len);

// # Safety
// `meas` must be null or a handle not yet freed.
void dt_measurements_free(struct DtMeasurements *meas);

// Eight plain gradient steps of size 0.05.
struct DtSolverConfig dt_solver_config_approximant(void);

// 30 FISTA steps of size 0.05 with TV weight 0.04 and 20 inner iterations.
struct DtSolverConfig dt_solver_config_lt(void);

// Fixed-step gradient descent from zero. `final_cost` may be null.
//
// # Safety
// Handles must be null or live; `out` and `final_cost` null or writable.
enum DtStatus dt_approximant(const struct DtMeasurements *meas,
                             const struct DtSolverConfig *cfg,
                             struct DtStack **out,
                             double *final_cost);

// TV-regularised FISTA reconstruction. `final_cost` may be null.
//
// # Safety
// Handles must be null or live; `out` and `final_cost` null or writable.
enum DtStatus dt_lt_reconstruct(const struct DtMeasurements *meas,
                                const struct DtSolverConfig *cfg,
                                struct DtStack **out,
                                double *final_cost);

// Pearson correlation of two arrays of `len` values.
//
// # Safety
// `a` and `b` must hold `len` values; `out` must be writable.
enum DtStatus dt_pcc(const double *a, const double *b, size_t len, double *out);

// Per-layer PCC between two stacks of equal shape; `out` holds one value per layer.
//
// # Safety
// Handles must be null or live; `out` must hold `len` values.
enum DtStatus dt_stack_layer_pcc(const struct DtStack *recon,
                                 const struct DtStack *truth,
                                 double *out,
                                 size_t len);

// Fresnel number `a^2 / (lambda d)`.
//
// # Safety
// `out` must be writable.
enum DtStatus dt_fresnel_number(double feature_size,
                                double wavelength,
                                double distance,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFTOMO_H */
