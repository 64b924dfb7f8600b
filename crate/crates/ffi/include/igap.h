#ifndef IGAP_H
#define IGAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Nonzero values mirror the CLI exit codes.
typedef enum IgapStatus {
  IGAP_STATUS_OK = 0,
  // Null pointer, bad size or non-UTF-8 path.
  IGAP_STATUS_INVALID_ARGUMENT = 1,
  IGAP_STATUS_CONFIG = 2,
  IGAP_STATUS_IO = 3,
  IGAP_STATUS_GRAPH = 4,
  IGAP_STATUS_SPECTRAL = 5,
  IGAP_STATUS_MODEL = 6,
  IGAP_STATUS_TRAIN = 7,
  IGAP_STATUS_METRIC = 8,
  IGAP_STATUS_SPLIT = 9,
  IGAP_STATUS_CHECKPOINT = 10,
  // A Rust panic was caught at the boundary.
  IGAP_STATUS_PANIC = 11,
} IgapStatus;

// Solver for `igap_spectrum`.
typedef enum IgapSolver {
  IGAP_SOLVER_AUTO = 0,
  IGAP_SOLVER_DENSE = 1,
  IGAP_SOLVER_LANCZOS = 2,
} IgapSolver;

// Opaque set of Laplacian eigenpairs.
typedef struct IgapBasis IgapBasis;

// Opaque attributed graph.
typedef struct IgapGraph IgapGraph;

// Opaque pre-trained model.
typedef struct IgapModel IgapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *igap_last_error(void);

// Library version as a static NUL-terminated string.
const char *igap_version(void);

// Builds a graph from `num_edges` `(u, v)` pairs in `edges` (length
// `2 * num_edges`), an `n x f` signal matrix and optional per-node labels
// (`-1` for unlabeled; pass null for none).
//
// # Safety
// Pointers must be valid for the stated lengths; `out` must be writable.
enum IgapStatus igap_graph_new(size_t n,
                               const size_t *edges,
                               size_t num_edges,
                               const double *signals,
                               size_t f,
                               const int64_t *labels,
                               struct IgapGraph **out);

// Reads a graph in the text format.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum IgapStatus igap_graph_load(const char *path, struct IgapGraph **out);

// Writes a graph in the text format.
//
// # Safety
// `g` must be a live handle and `path` a NUL-terminated string.
enum IgapStatus igap_graph_save(const struct IgapGraph *g, const char *path);

// Stochastic block model with Gaussian block-conditioned signals.
//
// # Safety
// `out` must be writable.
enum IgapStatus igap_graph_gen_sbm(size_t blocks,
                                   size_t nodes_per_block,
                                   double p_in,
                                   double p_out,
                                   size_t dim,
                                   double mean_scale,
                                   double sigma,
                                   uint64_t seed,
                                   struct IgapGraph **out);

// # Safety
// `g` must be null or a handle not yet freed.
void igap_graph_free(struct IgapGraph *g);

// Node count, or 0 for a null handle.
//
// # Safety
// `g` must be null or a live handle.
size_t igap_graph_num_nodes(const struct IgapGraph *g);

// # Safety
// `g` must be null or a live handle.
size_t igap_graph_num_edges(const struct IgapGraph *g);

// # Safety
// `g` must be null or a live handle.
size_t igap_graph_signal_dim(const struct IgapGraph *g);

// The `k` smallest eigenpairs of the combinatorial Laplacian (`k = 0`
// means all of them).
//
// # Safety
// `g` must be a live handle; `out` must be writable.
enum IgapStatus igap_spectrum(const struct IgapGraph *g,
                              size_t k,
                              enum IgapSolver solver,
                              uint64_t seed,
                              struct IgapBasis **out);

// # Safety
// `b` must be null or a handle not yet freed.
void igap_basis_free(struct IgapBasis *b);

// Number of eigenpairs, or 0 for a null handle.
//
// # Safety
// `b` must be null or a live handle.
size_t igap_basis_k(const struct IgapBasis *b);

// Node count of the basis, or 0 for a null handle.
//
// # Safety
// `b` must be null or a live handle.
size_t igap_basis_n(const struct IgapBasis *b);

// Copies the `k` ascending eigenvalues into `buf`.
//
// # Safety
// `b` must be a live handle and `buf` writable for `len` doubles.
enum IgapStatus igap_basis_eigenvalues(const struct IgapBasis *b, double *buf, size_t len);

// Copies the `n x k` eigenvector matrix into `buf`, row-major.
//
// # Safety
// `b` must be a live handle and `buf` writable for `len` doubles.
enum IgapStatus igap_basis_eigenvectors(const struct IgapBasis *b, double *buf, size_t len);

// Per-component alignment and Sp_SNR of `rows` graph signals (`rows x n`,
// row-major). `alignment` and `sp_snr` receive `k` values each; `rho`
// receives the Spearman correlation of alignment with component index.
//
// # Safety
// `b` must be a live handle; buffers must be valid for the stated sizes.
enum IgapStatus igap_alignment_profile(const struct IgapBasis *b,
                                       const double *signals,
                                       size_t rows,
                                       double *alignment,
                                       double *sp_snr,
                                       size_t k,
                                       double *rho);

// Loads the model from a pre-training or fine-tuning checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum IgapStatus igap_model_load(const char *path, struct IgapModel **out);

// # Safety
// `m` must be null or a handle not yet freed.
void igap_model_free(struct IgapModel *m);

// Width of the node embeddings, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t igap_model_embedding_dim(const struct IgapModel *m);

// Node embeddings of `g` (`n x embedding_dim`, row-major) into `buf`.
//
// # Safety
// Handles must be live and `buf` writable for `len` doubles.
enum IgapStatus igap_model_embed(const struct IgapModel *m,
                                 const struct IgapGraph *g,
                                 double *buf,
                                 size_t len);

// Area under the ROC curve; `labels` are 0 or nonzero.
//
// # Safety
// `scores` and `labels` must hold `n` values; `out` must be writable.
enum IgapStatus igap_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IGAP_H */
