#ifndef STERF_H
#define STERF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SterfChannels {
  STERF_CHANNELS_SUM = 0,
  STERF_CHANNELS_MEAN = 1,
} SterfChannels;

typedef enum SterfReadAt {
  STERF_READ_AT_NETWORK_INPUT = 0,
  STERF_READ_AT_STAGE_INPUT = 1,
} SterfReadAt;

typedef enum SterfStatus {
  STERF_STATUS_OK = 0,
  STERF_STATUS_NULL_POINTER = 1,
  STERF_STATUS_INVALID_UTF8 = 2,
  STERF_STATUS_BUFFER_TOO_SMALL = 3,
  STERF_STATUS_SHAPE = 10,
  STERF_STATUS_DIMENSION = 11,
  STERF_STATUS_PARAMETER = 12,
  STERF_STATUS_REFERENCE = 13,
  STERF_STATUS_NUMERIC = 14,
  STERF_STATUS_CONFIG = 15,
  STERF_STATUS_SYNTAX = 16,
  STERF_STATUS_MODE = 17,
  STERF_STATUS_SIZE = 18,
  STERF_STATUS_DOMAIN = 19,
  STERF_STATUS_IO = 20,
  STERF_STATUS_FORMAT = 21,
  STERF_STATUS_PANIC = 99,
} SterfStatus;

/**
 * Opaque network handle.
 */
typedef struct SterfNetwork SterfNetwork;

typedef struct SterfErfOptions {
  size_t samples;
  uint64_t seed;
  enum SterfChannels channels;
  enum SterfReadAt read_at;
  /**
   * 0 selects STERF_THREADS or all cores.
   */
  size_t threads;
} SterfErfOptions;

typedef struct SterfSpread {
  double r95;
  double centroid_row;
  double centroid_col;
  double mass_entropy;
  bool zero_mass;
} SterfSpread;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Protocol defaults: 60 samples, seed 0, channel sum, read at the network
 * input, automatic threads.
 */
struct SterfErfOptions sterf_erf_options_default(void);

/**
 * Builds a preset network. `*out` is null on failure.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SterfStatus sterf_network_from_preset(const char *name, struct SterfNetwork **out);

/**
 * Builds a network from architecture config text.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SterfStatus sterf_network_from_config(const char *config, struct SterfNetwork **out);

/**
 * # Safety
 * `net` must be null or a handle from this library not yet freed.
 */
void sterf_network_free(struct SterfNetwork *net);

/**
 * Total number of scalar parameters.
 *
 * # Safety
 * `net` must be a live handle and `out` a valid pointer.
 */
enum SterfStatus sterf_network_param_count(const struct SterfNetwork *net, size_t *out);

/**
 * Input shape of one sample as (T, B, C, H, W).
 *
 * # Safety
 * `net` must be a live handle and `shape` point to 5 writable values.
 */
enum SterfStatus sterf_network_input_shape(const struct SterfNetwork *net, size_t *shape);

/**
 * Height and width of the spatial ERF grid for `probe` under `read_at`.
 *
 * # Safety
 * `net` must be a live handle, `probe` a NUL-terminated string, `h` and
 * `w` valid pointers.
 */
enum SterfStatus sterf_grid_shape(const struct SterfNetwork *net,
                                  const char *probe,
                                  enum SterfReadAt read_at,
                                  size_t *h,
                                  size_t *w);

/**
 * Spatial ERF of `probe`, written row-major into `out` (capacity `len`).
 * `opts` may be null for protocol defaults. `h` and `w` receive the grid
 * shape, also when the buffer is too small.
 *
 * # Safety
 * `net` must be a live handle, `probe` a NUL-terminated string, `out`
 * writable for `len` doubles, `h` and `w` valid pointers.
 */
enum SterfStatus sterf_spatial_erf(const struct SterfNetwork *net,
                                   const char *probe,
                                   const struct SterfErfOptions *opts,
                                   double *out,
                                   size_t len,
                                   size_t *h,
                                   size_t *w);

/**
 * Temporal ERF of `probe`: `T` values, index = delay. `written` receives
 * `T`, also when the buffer is too small.
 *
 * # Safety
 * `net` must be a live handle, `probe` a NUL-terminated string, `out`
 * writable for `len` doubles and `written` a valid pointer.
 */
enum SterfStatus sterf_temporal_erf(const struct SterfNetwork *net,
                                    const char *probe,
                                    const struct SterfErfOptions *opts,
                                    double *out,
                                    size_t len,
                                    size_t *written);

/**
 * Spread metrics of a row-major `h` x `w` grid.
 *
 * # Safety
 * `grid` must be readable for `h * w` doubles and `out` a valid pointer.
 */
enum SterfStatus sterf_spread(const double *grid, size_t h, size_t w, struct SterfSpread *out);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *sterf_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STERF_H */
