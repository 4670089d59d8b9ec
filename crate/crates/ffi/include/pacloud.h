#ifndef PACLOUD_H
#define PACLOUD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values 2–8 match the command-line exit codes.
typedef enum PacloudStatus {
  PACLOUD_STATUS_OK = 0,
  PACLOUD_STATUS_ARGUMENT = 2,
  PACLOUD_STATUS_CONFIG = 3,
  PACLOUD_STATUS_IO = 4,
  PACLOUD_STATUS_FORMAT = 5,
  PACLOUD_STATUS_GEOMETRY = 6,
  PACLOUD_STATUS_SIMULATION = 7,
  PACLOUD_STATUS_OPTIMIZATION = 8,
  PACLOUD_STATUS_NULL_POINTER = 9,
  PACLOUD_STATUS_PANIC = 10,
} PacloudStatus;

// Gaussian-ball point cloud.
typedef struct PacloudCloud PacloudCloud;

// Sensor positions and sound speed.
typedef struct PacloudSensorArray PacloudSensorArray;

// Sensor-major signal matrix on a uniform time grid.
typedef struct PacloudSignals PacloudSignals;

// Scalar voxel grid, x fastest.
typedef struct PacloudVolume PacloudVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *pacloud_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *pacloud_version(void);

// Sensor array from `n` points given as `x, y, z` triples in meters.
//
// # Safety
// `xyz` must point to `3 * n` doubles; `out` must be writable.
enum PacloudStatus pacloud_array_new(const double *xyz,
                                     size_t n,
                                     double sound_speed,
                                     struct PacloudSensorArray **out);

// Reads a sensor CSV (`x,y,z[,nx,ny,nz]`).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PacloudStatus pacloud_array_read_csv(const char *path,
                                          double sound_speed,
                                          struct PacloudSensorArray **out);

// # Safety
// `array` must be NULL or a handle from this library, freed once.
void pacloud_array_free(struct PacloudSensorArray *array);

// # Safety
// `array` must be a valid handle.
size_t pacloud_array_len(const struct PacloudSensorArray *array);

// Cloud from `n` records of `x, y, z, p0, a0`.
//
// # Safety
// `balls` must point to `5 * n` doubles; `out` must be writable.
enum PacloudStatus pacloud_cloud_new(const double *balls, size_t n, struct PacloudCloud **out);

// # Safety
// `cloud` must be a valid handle.
size_t pacloud_cloud_len(const struct PacloudCloud *cloud);

// Copies the cloud as `x, y, z, p0, a0` records into `dst` (capacity
// `cap` doubles, at least `5 * len`).
//
// # Safety
// `cloud` must be valid; `dst` must hold `cap` doubles.
enum PacloudStatus pacloud_cloud_get(const struct PacloudCloud *cloud, double *dst, size_t cap);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PacloudStatus pacloud_cloud_read(const char *path, struct PacloudCloud **out);

// # Safety
// `cloud` must be valid; `path` must be a NUL-terminated string.
enum PacloudStatus pacloud_cloud_write(const struct PacloudCloud *cloud, const char *path);

// # Safety
// `cloud` must be NULL or a handle from this library, freed once.
void pacloud_cloud_free(struct PacloudCloud *cloud);

// Forward simulation of `cloud` at every sensor of `array` on the grid
// `t0 + n·dt`, `n < n_samples`.
//
// # Safety
// Handles must be valid; `out` must be writable.
enum PacloudStatus pacloud_simulate(const struct PacloudSensorArray *array,
                                    const struct PacloudCloud *cloud,
                                    double t0,
                                    double dt,
                                    size_t n_samples,
                                    struct PacloudSignals **out);

// Shape and time grid of a signal set. Any output pointer may be NULL.
//
// # Safety
// `signals` must be valid.
enum PacloudStatus pacloud_signals_info(const struct PacloudSignals *signals,
                                        size_t *n_sensors,
                                        size_t *n_samples,
                                        double *t0,
                                        double *dt);

// Copies samples sensor-major into `dst` (capacity `cap` doubles).
//
// # Safety
// `signals` must be valid; `dst` must hold `cap` doubles.
enum PacloudStatus pacloud_signals_get(const struct PacloudSignals *signals,
                                       double *dst,
                                       size_t cap);

// Signal set from sensor-major samples.
//
// # Safety
// `data` must point to `n_sensors * n_samples` doubles; `out` must be
// writable.
enum PacloudStatus pacloud_signals_new(const double *data,
                                       size_t n_sensors,
                                       size_t n_samples,
                                       double t0,
                                       double dt,
                                       struct PacloudSignals **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PacloudStatus pacloud_signals_read(const char *path, struct PacloudSignals **out);

// # Safety
// `signals` must be valid; `path` must be a NUL-terminated string.
enum PacloudStatus pacloud_signals_write(const struct PacloudSignals *signals, const char *path);

// # Safety
// `signals` must be NULL or a handle from this library, freed once.
void pacloud_signals_free(struct PacloudSignals *signals);

// Mean squared difference of two signal sets of the same shape.
//
// # Safety
// Handles must be valid; `out` must be writable.
enum PacloudStatus pacloud_loss(const struct PacloudSignals *sim,
                                const struct PacloudSignals *real,
                                double *out);

// Full reconstruction configured by TOML text (same keys as the command
// line's `--config` file; `[render]` or `[phantom]` must give the grid).
// `seed` overrides `init.seed` unless negative. Either output may be NULL.
//
// # Safety
// Handles must be valid; `config_toml` must be a NUL-terminated string.
enum PacloudStatus pacloud_reconstruct(const struct PacloudSensorArray *array,
                                       const struct PacloudSignals *signals,
                                       const char *config_toml,
                                       int64_t seed,
                                       struct PacloudCloud **out_cloud,
                                       struct PacloudVolume **out_volume);

// Splats `cloud` onto a `dims` grid whose voxel (0, 0, 0) is centered at
// `origin`.
//
// # Safety
// `cloud` must be valid; `dims` and `origin` must point to 3 values.
enum PacloudStatus pacloud_voxelize(const struct PacloudCloud *cloud,
                                    const size_t *dims,
                                    double spacing,
                                    const double *origin,
                                    struct PacloudVolume **out);

// Grid dimensions into `dims[3]`. Either pointer may be NULL.
//
// # Safety
// `volume` must be valid; `dims` must hold 3 values.
enum PacloudStatus pacloud_volume_info(const struct PacloudVolume *volume,
                                       size_t *dims,
                                       double *spacing);

// Copies voxel values (x fastest) into `dst` (capacity `cap` doubles).
//
// # Safety
// `volume` must be valid; `dst` must hold `cap` doubles.
enum PacloudStatus pacloud_volume_get(const struct PacloudVolume *volume, double *dst, size_t cap);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PacloudStatus pacloud_volume_read(const char *path, struct PacloudVolume **out);

// # Safety
// `volume` must be valid; `path` must be a NUL-terminated string.
enum PacloudStatus pacloud_volume_write(const struct PacloudVolume *volume, const char *path);

// # Safety
// `volume` must be NULL or a handle from this library, freed once.
void pacloud_volume_free(struct PacloudVolume *volume);

// MSE, PSNR and SSIM of `volume` against `reference` after max
// normalization. PSNR is +infinity for identical volumes. Any output may
// be NULL.
//
// # Safety
// Handles must be valid.
enum PacloudStatus pacloud_metrics(const struct PacloudVolume *volume,
                                   const struct PacloudVolume *reference,
                                   double *mse,
                                   double *psnr,
                                   double *ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PACLOUD_H */
