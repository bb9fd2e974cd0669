#ifndef LAYERSCOPE_H
#define LAYERSCOPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes for every fallible call.
typedef enum LsStatus {
  LS_STATUS_OK = 0,
  LS_STATUS_NULL_POINTER = 1,
  LS_STATUS_INVALID_UTF8 = 2,
  LS_STATUS_PARSE_ERROR = 3,
  LS_STATUS_INVALID_ARGUMENT = 4,
  LS_STATUS_NOT_FOUND = 5,
  LS_STATUS_PANIC = 6,
} LsStatus;

// Streaming first/second moment accumulator for one layer.
typedef struct LsCov LsCov;

// An architecture graph with its receptive fields.
typedef struct LsGraph LsGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer stays
// valid until the next call into the library from the same thread.
const char *ls_last_error(void);

// Library version as a static NUL-terminated string.
const char *ls_version(void);

// # Safety
// `s` must be NULL or a string returned by this library, not yet freed.
void ls_string_free(char *s);

// Parses an architecture description.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum LsStatus ls_graph_parse(const char *text, struct LsGraph **out);

// Builds a catalog architecture for 3-channel input and 10 classes.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum LsStatus ls_graph_builtin(const char *name, struct LsGraph **out);

// # Safety
// `g` must be NULL or a handle from this library, not yet freed.
void ls_graph_free(struct LsGraph *g);

// Number of nodes, or 0 for a NULL handle.
//
// # Safety
// `g` must be NULL or a live handle.
size_t ls_graph_num_nodes(const struct LsGraph *g);

// Number of conv layers, or 0 for a NULL handle.
//
// # Safety
// `g` must be NULL or a live handle.
size_t ls_graph_num_convs(const struct LsGraph *g);

// Receptive field and jump of the node called `name`.
//
// # Safety
// `g` must be a live handle, `name` NUL-terminated, and the outputs writable.
enum LsStatus ls_graph_rf(const struct LsGraph *g,
                          const char *name,
                          size_t *out_r,
                          size_t *out_jump);

// Receptive field of the last conv layer.
//
// # Safety
// `g` must be a live handle and `out_r` writable.
enum LsStatus ls_graph_final_rf(const struct LsGraph *g, size_t *out_r);

// Name of the border layer for a square input of side `input_size`. Writes
// NULL to `out_name` when no layer crosses the border. A non-NULL result is
// freed with `ls_string_free`.
//
// # Safety
// `g` must be a live handle and `out_name` writable.
enum LsStatus ls_graph_border(const struct LsGraph *g, size_t input_size, char **out_name);

// New accumulator over `dim` features, or NULL when `dim` is 0.
struct LsCov *ls_cov_new(size_t dim);

// # Safety
// `c` must be NULL or a handle from `ls_cov_new`/`ls_cov_merge`, not yet freed.
void ls_cov_free(struct LsCov *c);

// Number of samples seen so far (conv positions count individually).
//
// # Safety
// `c` must be NULL or a live handle.
uint64_t ls_cov_count(const struct LsCov *c);

// Adds a row-major block shaped `N×C` (`ndim` 2) or `N×C×H×W` (`ndim` 4).
//
// # Safety
// `c` must be a live handle, `shape` must hold `ndim` values and `data` the
// product of those values.
enum LsStatus ls_cov_accumulate(struct LsCov *c,
                                const float *data,
                                const size_t *shape,
                                size_t ndim);

// Combines two accumulators into a new handle; the inputs are left intact.
//
// # Safety
// `a` and `b` must be live handles and `out` writable.
enum LsStatus ls_cov_merge(const struct LsCov *a, const struct LsCov *b, struct LsCov **out);

// Saturation (`k / dim`) at explained-variance fraction `delta`, plus `k`.
//
// # Safety
// `c` must be a live handle and both outputs writable.
enum LsStatus ls_cov_saturation(const struct LsCov *c,
                                double delta,
                                double *out_value,
                                size_t *out_k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAYERSCOPE_H */
