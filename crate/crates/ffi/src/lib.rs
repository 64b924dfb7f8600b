//! C ABI over the `igap` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`IgapStatus`]; on failure the message is available from
//! [`igap_last_error`] on the same thread until the next failing call.
//! Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use igap::analysis::{alignment_profile, roc_auc};
use igap::error::Error;
use igap::graph::{load_graph, save_graph, Laplacian};
use igap::harness::{gen_sbm, Checkpoint, FeatureModel, SbmConfig};
use igap::model::{spatial_forward, ModelParams};
use igap::spectral::{decompose, Solver};
use igap::{Graph, SpectralBasis};
use ndarray::{Array2, ArrayView2};

/// Result of every fallible call. Nonzero values mirror the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgapStatus {
    Ok = 0,
    /// Null pointer, bad size or non-UTF-8 path.
    InvalidArgument = 1,
    Config = 2,
    Io = 3,
    Graph = 4,
    Spectral = 5,
    Model = 6,
    Train = 7,
    Metric = 8,
    Split = 9,
    Checkpoint = 10,
    /// A Rust panic was caught at the boundary.
    Panic = 11,
}

/// Opaque attributed graph.
pub struct IgapGraph(Graph);
/// Opaque set of Laplacian eigenpairs.
pub struct IgapBasis(SpectralBasis);
/// Opaque pre-trained model.
pub struct IgapModel(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IgapStatus {
    match e.exit_code() {
        2 => IgapStatus::Config,
        3 => IgapStatus::Io,
        4 => IgapStatus::Graph,
        5 => IgapStatus::Spectral,
        6 => IgapStatus::Model,
        7 => IgapStatus::Train,
        8 => IgapStatus::Metric,
        9 => IgapStatus::Split,
        _ => IgapStatus::Checkpoint,
    }
}

enum Fail {
    Arg(String),
    Lib(Error),
}

impl<E: Into<Error>> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail::Lib(e.into())
    }
}

fn arg(msg: &str) -> Fail {
    Fail::Arg(msg.to_string())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IgapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IgapStatus::Ok,
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            IgapStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            IgapStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(arg("path is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg("path is not UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(Fail::Arg(format!("{what} is null"))),
        (false, _) => Ok(std::slice::from_raw_parts(p, len)),
    }
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::Arg(format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| arg("handle is null"))
}

/// Copies `src` into `dst[..len]`; `len` must equal `src.len()`.
unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Fail> {
    if len != src.len() {
        return Err(Fail::Arg(format!("buffer holds {len} values, {} needed", src.len())));
    }
    if len > 0 {
        if dst.is_null() {
            return Err(arg("output buffer is null"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn igap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn igap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a graph from `num_edges` `(u, v)` pairs in `edges` (length
/// `2 * num_edges`), an `n x f` signal matrix and optional per-node labels
/// (`-1` for unlabeled; pass null for none).
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn igap_graph_new(
    n: usize,
    edges: *const usize,
    num_edges: usize,
    signals: *const f64,
    f: usize,
    labels: *const i64,
    out: *mut *mut IgapGraph,
) -> IgapStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let flat = slice_arg(edges, 2 * num_edges, "edges")?;
        let edges = flat.chunks_exact(2).map(|e| (e[0], e[1])).collect();
        let x = slice_arg(signals, n * f, "signals")?;
        let x = Array2::from_shape_vec((n, f), x.to_vec()).map_err(|e| Fail::Arg(e.to_string()))?;
        let labels = if labels.is_null() {
            None
        } else {
            Some(slice_arg(labels, n, "labels")?.to_vec())
        };
        let g = Graph::new(n, edges, x, labels)?;
        *out = Box::into_raw(Box::new(IgapGraph(g)));
        Ok(())
    })
}

/// Reads a graph in the text format.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn igap_graph_load(path: *const c_char, out: *mut *mut IgapGraph) -> IgapStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let g = load_graph(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(IgapGraph(g)));
        Ok(())
    })
}

/// Writes a graph in the text format.
///
/// # Safety
/// `g` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn igap_graph_save(g: *const IgapGraph, path: *const c_char) -> IgapStatus {
    guard(|| {
        save_graph(&handle(g)?.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Stochastic block model with Gaussian block-conditioned signals.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn igap_graph_gen_sbm(
    blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    dim: usize,
    mean_scale: f64,
    sigma: f64,
    seed: u64,
    out: *mut *mut IgapGraph,
) -> IgapStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = SbmConfig {
            blocks,
            nodes_per_block,
            p_in,
            p_out,
            features: FeatureModel { dim, mean_scale, sigma },
        };
        *out = Box::into_raw(Box::new(IgapGraph(gen_sbm(&cfg, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn igap_graph_free(g: *mut IgapGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Node count, or 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn igap_graph_num_nodes(g: *const IgapGraph) -> usize {
    g.as_ref().map_or(0, |g| g.0.n_nodes())
}

/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn igap_graph_num_edges(g: *const IgapGraph) -> usize {
    g.as_ref().map_or(0, |g| g.0.n_edges())
}

/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn igap_graph_signal_dim(g: *const IgapGraph) -> usize {
    g.as_ref().map_or(0, |g| g.0.signal_dim())
}

/// Solver for `igap_spectrum`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgapSolver {
    Auto = 0,
    Dense = 1,
    Lanczos = 2,
}

/// The `k` smallest eigenpairs of the combinatorial Laplacian (`k = 0`
/// means all of them).
///
/// # Safety
/// `g` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn igap_spectrum(
    g: *const IgapGraph,
    k: usize,
    solver: IgapSolver,
    seed: u64,
    out: *mut *mut IgapBasis,
) -> IgapStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let g = &handle(g)?.0;
        let solver = match solver {
            IgapSolver::Auto => Solver::Auto,
            IgapSolver::Dense => Solver::Dense,
            IgapSolver::Lanczos => Solver::Lanczos,
        };
        let lap = Laplacian::new(g, igap::LaplacianKind::Combinatorial);
        let basis = decompose(&lap, (k > 0).then_some(k), solver, seed)?;
        *out = Box::into_raw(Box::new(IgapBasis(basis)));
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn igap_basis_free(b: *mut IgapBasis) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Number of eigenpairs, or 0 for a null handle.
///
/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn igap_basis_k(b: *const IgapBasis) -> usize {
    b.as_ref().map_or(0, |b| b.0.k())
}

/// Node count of the basis, or 0 for a null handle.
///
/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn igap_basis_n(b: *const IgapBasis) -> usize {
    b.as_ref().map_or(0, |b| b.0.n())
}

/// Copies the `k` ascending eigenvalues into `buf`.
///
/// # Safety
/// `b` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn igap_basis_eigenvalues(b: *const IgapBasis, buf: *mut f64, len: usize) -> IgapStatus {
    guard(|| copy_out(&handle(b)?.0.eigenvalues().to_vec(), buf, len))
}

/// Copies the `n x k` eigenvector matrix into `buf`, row-major.
///
/// # Safety
/// `b` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn igap_basis_eigenvectors(b: *const IgapBasis, buf: *mut f64, len: usize) -> IgapStatus {
    guard(|| {
        let v: Vec<f64> = handle(b)?.0.eigenvectors().iter().copied().collect();
        copy_out(&v, buf, len)
    })
}

/// Per-component alignment and Sp_SNR of `rows` graph signals (`rows x n`,
/// row-major). `alignment` and `sp_snr` receive `k` values each; `rho`
/// receives the Spearman correlation of alignment with component index.
///
/// # Safety
/// `b` must be a live handle; buffers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn igap_alignment_profile(
    b: *const IgapBasis,
    signals: *const f64,
    rows: usize,
    alignment: *mut f64,
    sp_snr: *mut f64,
    k: usize,
    rho: *mut f64,
) -> IgapStatus {
    guard(|| {
        let basis = &handle(b)?.0;
        let x = slice_arg(signals, rows * basis.n(), "signals")?;
        let view = ArrayView2::from_shape((rows, basis.n()), x).map_err(|e| Fail::Arg(e.to_string()))?;
        let p = alignment_profile(basis, view)?;
        copy_out(&p.alignment, alignment, k)?;
        copy_out(&p.sp_snr, sp_snr, k)?;
        *out_arg(rho, "rho")? = p.spearman_rho;
        Ok(())
    })
}

/// Loads the model from a pre-training or fine-tuning checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn igap_model_load(path: *const c_char, out: *mut *mut IgapModel) -> IgapStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = Checkpoint::load(path_arg(path)?)?.model_params()?;
        *out = Box::into_raw(Box::new(IgapModel(model)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn igap_model_free(m: *mut IgapModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Width of the node embeddings, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn igap_model_embedding_dim(m: *const IgapModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.embedding_dim())
}

/// Node embeddings of `g` (`n x embedding_dim`, row-major) into `buf`.
///
/// # Safety
/// Handles must be live and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn igap_model_embed(
    m: *const IgapModel,
    g: *const IgapGraph,
    buf: *mut f64,
    len: usize,
) -> IgapStatus {
    guard(|| {
        let model = &handle(m)?.0;
        let g = &handle(g)?.0;
        let lap = Laplacian::new(g, model.laplacian);
        let z = spatial_forward(&lap, model, g.signals())?;
        let v: Vec<f64> = z.iter().copied().collect();
        copy_out(&v, buf, len)
    })
}

/// Area under the ROC curve; `labels` are 0 or nonzero.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn igap_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> IgapStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let l: Vec<bool> = slice_arg(labels, n, "labels")?.iter().map(|&b| b != 0).collect();
        *out_arg(out, "out")? = roc_auc(s, &l)?;
        Ok(())
    })
}
