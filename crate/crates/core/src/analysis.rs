//! Spectral diagnostics and task metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::MetricError;
use crate::spectral::SpectralBasis;

/// Returned by [`sp_snr`] when the noise term `1 - |υᵢᵀx|` vanishes.
pub const SNR_INFINITY: f64 = f64::INFINITY;

const UNIT_NORM_TOL: f64 = 1e-8;
const NOISE_FLOOR: f64 = 1e-12;
const PROJECTION_FLOOR: f64 = 1e-12;

fn check_unit(basis: &SpectralBasis, x: ArrayView1<f64>) -> Result<(), MetricError> {
    if x.len() != basis.n() {
        return Err(MetricError::DimensionMismatch {
            expected: basis.n(),
            found: x.len(),
        });
    }
    let norm = x.dot(&x).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(MetricError::NotNormalized { norm });
    }
    Ok(())
}

/// `p / (1 - p)` for `p = |υᵢᵀx|`, with [`SNR_INFINITY`] once `1 - p < 1e-12`.
pub fn snr_from_projection(p: f64) -> f64 {
    let p = p.abs();
    let noise = 1.0 - p;
    if noise < NOISE_FLOOR {
        SNR_INFINITY
    } else {
        p / noise
    }
}

/// Signal-to-noise ratio of unit signal `x` on component `i`.
pub fn sp_snr(basis: &SpectralBasis, x: ArrayView1<f64>, i: usize) -> Result<f64, MetricError> {
    check_unit(basis, x)?;
    if i >= basis.k() {
        return Err(MetricError::ComponentOutOfRange { index: i, k: basis.k() });
    }
    Ok(snr_from_projection(basis.vector(i).dot(&x)))
}

/// Mean of [`sp_snr`] over all retained components.
pub fn graph_snr(basis: &SpectralBasis, x: ArrayView1<f64>) -> Result<f64, MetricError> {
    check_unit(basis, x)?;
    let proj = basis.eigenvectors().t().dot(&x);
    let total: f64 = proj.iter().map(|&p| snr_from_projection(p)).sum();
    Ok(total / basis.k() as f64)
}

/// Per-component alignment of a set of graph signals.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentProfile {
    /// `a_i` = mean over signals of `|υᵢᵀ x/|x||`.
    pub alignment: Vec<f64>,
    /// Mean [`sp_snr`] per component over the same normalized signals.
    pub sp_snr: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Spearman correlation between component index and `a_i`.
    pub spearman_rho: f64,
    /// Spearman correlation between component index and mean Sp_SNR.
    pub snr_rho: f64,
    /// Zero-norm signals that were skipped.
    pub skipped: usize,
}

/// Alignment profile of `signals`, one graph signal (length `n`) per row.
/// Node embeddings `Z` (`n x H`) are profiled as `Zᵀ`, one channel per signal.
pub fn alignment_profile(
    basis: &SpectralBasis,
    signals: ArrayView2<f64>,
) -> Result<AlignmentProfile, MetricError> {
    if signals.ncols() != basis.n() {
        return Err(MetricError::DimensionMismatch {
            expected: basis.n(),
            found: signals.ncols(),
        });
    }
    let k = basis.k();
    let mut align = vec![0.0; k];
    let mut snr = vec![0.0; k];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for row in signals.rows() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            skipped += 1;
            continue;
        }
        used += 1;
        let proj = basis.eigenvectors().t().dot(&row) / norm;
        for i in 0..k {
            // Round-off level projections count as exact zeros so ties rank together.
            let p = match proj[i].abs() {
                p if p < PROJECTION_FLOOR => 0.0,
                p => p.min(1.0),
            };
            align[i] += p;
            snr[i] += snr_from_projection(p);
        }
    }
    if used == 0 {
        return Err(MetricError::Empty);
    }
    align.iter_mut().for_each(|a| *a /= used as f64);
    snr.iter_mut().for_each(|a| *a /= used as f64);
    let index: Vec<f64> = (0..k).map(|i| i as f64).collect();
    Ok(AlignmentProfile {
        spearman_rho: spearman(&index, &align),
        snr_rho: spearman(&index, &snr),
        alignment: align,
        sp_snr: snr,
        eigenvalues: basis.eigenvalues().to_vec(),
        skipped,
    })
}

/// Profile of node embeddings, treating each channel as a graph signal.
pub fn embedding_profile(basis: &SpectralBasis, z: &Array2<f64>) -> Result<AlignmentProfile, MetricError> {
    alignment_profile(basis, z.t())
}

/// Ranks starting at 1, ties receiving their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). Zero when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman length mismatch");
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U with average ranks).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Writes one row per sample, space separated.
pub fn export_embeddings(z: &Array2<f64>, path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, format_matrix(z))
}

pub fn format_matrix(z: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in z.rows() {
        let mut first = true;
        for x in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Reads a matrix written by [`export_embeddings`].
pub fn load_matrix(path: impl AsRef<Path>) -> std::io::Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    parse_matrix(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn parse_matrix(text: &str) -> Result<Array2<f64>, String> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: bad number {t:?}", i + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(format!("line {}: expected {c} values, found {}", i + 1, vals.len()))
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| e.to_string())
}

/// CSV `component,lambda,alignment,sp_snr`.
pub fn profile_csv(profile: &AlignmentProfile) -> String {
    let mut out = String::from("component,lambda,alignment,sp_snr\n");
    for i in 0..profile.alignment.len() {
        writeln!(
            out,
            "{},{},{},{}",
            i, profile.eigenvalues[i], profile.alignment[i], profile.sp_snr[i]
        )
        .unwrap();
    }
    out
}
