//! Binary checkpoints: magic `IGAP`, a version, the config hash, the RNG
//! position and a list of named little-endian `f64` arrays.
//!
//! Every random stream is derived from `(seed, tag, epoch)`, so the RNG
//! state is fully described by the master seed and the epoch counter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::CheckpointError;
use crate::graph::LaplacianKind;
use crate::model::{AdamState, FilterKernel, Head, ModelParams, Parameters, SpectralLayer};
use crate::pretrain::PretrainState;
use crate::spectral::SpectralBasis;
use crate::prompt::{
    AlignFrame, AlignmentPrompt, Alpha, CheckpointRecord, FinetuneState, LabelPrompt, PromptSet, PtParams,
    SignalPrompt,
};

pub const MAGIC: &[u8; 4] = b"IGAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrain = 0,
    Finetune = 1,
    /// Eigenpairs from the `spectrum` subcommand.
    Spectrum = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_hash: u64,
    pub seed: u64,
    pub epoch: u64,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Array2<f64>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| CheckpointError::Malformed(format!("length {n}")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 string".into()))
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        for (k, v) in &self.meta {
            put_string(&mut out, k);
            put_string(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, a) in &self.arrays {
            put_string(&mut out, name);
            out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
            for x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let kind = match r.u8()? {
            0 => CheckpointKind::Pretrain,
            1 => CheckpointKind::Finetune,
            2 => CheckpointKind::Spectrum,
            k => return Err(CheckpointError::Malformed(format!("unknown kind {k}"))),
        };
        let config_hash = r.u64()?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.len()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let count = r.len()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.len()?;
            let cols = r.len()?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.buf.len()))
                .ok_or(CheckpointError::Truncated)?;
            let data: Vec<f64> = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Array2::from_shape_vec((rows, cols), data).unwrap()));
        }
        if !r.buf.is_empty() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint {
            kind,
            config_hash,
            seed,
            epoch,
            meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| io_error(path, source))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|source| io_error(path, source))?)
    }

    /// Warns when the checkpoint was written under a different config.
    pub fn check_hash(&self, expected: u64) -> bool {
        let ok = self.config_hash == expected;
        if !ok {
            log::warn!(
                "checkpoint config hash {:016x} differs from the current config {:016x}",
                self.config_hash,
                expected
            );
        }
        ok
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing metadata {key:?}")))
    }

    fn meta_usize(&self, key: &str) -> Result<usize, CheckpointError> {
        self.meta(key)?
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad metadata {key:?}")))
    }

    /// Pre-training state: model, optimizer moments and loss history.
    pub fn from_pretrain(state: &PretrainState, seed: u64, config_hash: u64) -> Self {
        let mut meta = model_meta(&state.params);
        meta.insert("adam.step".into(), state.adam.step.to_string());
        let mut arrays = model_arrays(&state.params, "model");
        push_adam(&mut arrays, &state.adam);
        arrays.push(("trace.loss".into(), row(&state.loss_trace)));
        Checkpoint {
            kind: CheckpointKind::Pretrain,
            config_hash,
            seed,
            epoch: state.epoch() as u64,
            meta,
            arrays,
        }
    }

    pub fn model_params(&self) -> Result<ModelParams, CheckpointError> {
        read_model(self, "model")
    }

    pub fn pretrain_state(&self) -> Result<PretrainState, CheckpointError> {
        let params = self.model_params()?;
        let adam = read_adam(self, params.named_arrays().len())?;
        Ok(PretrainState {
            params,
            adam,
            loss_trace: self.get("trace.loss")?.iter().copied().collect(),
        })
    }

    /// Eigenvalues as a `1 x k` row and eigenvectors as `n x k`.
    pub fn from_basis(basis: &SpectralBasis, seed: u64) -> Self {
        Checkpoint {
            kind: CheckpointKind::Spectrum,
            config_hash: 0,
            seed,
            epoch: 0,
            meta: BTreeMap::new(),
            arrays: vec![
                ("eigenvalues".into(), row(&basis.eigenvalues().to_vec())),
                ("eigenvectors".into(), basis.eigenvectors().clone()),
            ],
        }
    }

    pub fn basis(&self) -> Result<SpectralBasis, CheckpointError> {
        let vals = self.get("eigenvalues")?.row(0).to_owned();
        SpectralBasis::from_parts(vals, self.get("eigenvectors")?.clone())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    /// Fine-tuning state plus the frozen model it runs on.
    pub fn from_finetune(state: &FinetuneState, model: &ModelParams, seed: u64, config_hash: u64) -> Self {
        let mut meta = model_meta(model);
        meta.insert("adam.step".into(), state.adam.step.to_string());
        meta.insert("best.epoch".into(), state.best_epoch.to_string());
        prompt_meta(&state.prompts, &mut meta);
        let mut arrays = model_arrays(model, "model");
        push_prompts(&mut arrays, &state.prompts, "prompt");
        push_prompts(&mut arrays, &state.best, "best");
        push_adam(&mut arrays, &state.adam);
        arrays.push(("trace.loss".into(), row(&state.loss_trace)));
        let ck: Vec<f64> = state.checkpoints.iter().map(|c| c.epoch as f64).collect();
        arrays.push(("trace.checkpoint_epoch".into(), row(&ck)));
        let cv: Vec<f64> = state.checkpoints.iter().map(|c| c.val).collect();
        arrays.push(("trace.checkpoint_val".into(), row(&cv)));
        arrays.push(("best.val".into(), row(&[state.best_val])));
        Checkpoint {
            kind: CheckpointKind::Finetune,
            config_hash,
            seed,
            epoch: state.epoch() as u64,
            meta,
            arrays,
        }
    }

    pub fn finetune_state(&self) -> Result<FinetuneState, CheckpointError> {
        if self.kind != CheckpointKind::Finetune {
            return Err(CheckpointError::Malformed("not a fine-tuning checkpoint".into()));
        }
        let prompts = read_prompts(self, "prompt")?;
        let best = read_prompts(self, "best")?;
        let adam = read_adam(self, prompts.named_arrays().len())?;
        let epochs = self.get("trace.checkpoint_epoch")?;
        let vals = self.get("trace.checkpoint_val")?;
        if epochs.len() != vals.len() {
            return Err(CheckpointError::Malformed("checkpoint trace lengths differ".into()));
        }
        let checkpoints = epochs
            .iter()
            .zip(vals.iter())
            .map(|(&e, &val)| CheckpointRecord { epoch: e as usize, val })
            .collect();
        Ok(FinetuneState {
            prompts,
            adam,
            loss_trace: self.get("trace.loss")?.iter().copied().collect(),
            checkpoints,
            best_epoch: self.meta_usize("best.epoch")?,
            best_val: self.get("best.val")?[[0, 0]],
            best,
        })
    }
}

fn io_error(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

fn model_meta(p: &ModelParams) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("model.layers".into(), p.layers.len().to_string());
    m.insert("model.frozen".into(), p.frozen.to_string());
    let kind = match p.laplacian {
        LaplacianKind::Combinatorial => "combinatorial",
        LaplacianKind::SymNormalized => "sym-normalized",
    };
    m.insert("model.laplacian".into(), kind.into());
    m
}

fn model_arrays(p: &ModelParams, prefix: &str) -> Vec<(String, Array2<f64>)> {
    p.named_arrays()
        .into_iter()
        .map(|(n, a)| (format!("{prefix}.{n}"), a.clone()))
        .collect()
}

fn read_model(c: &Checkpoint, prefix: &str) -> Result<ModelParams, CheckpointError> {
    let layers = c.meta_usize("model.layers")?;
    let frozen = c.meta("model.frozen")? == "true";
    let laplacian = match c.meta("model.laplacian")? {
        "combinatorial" => LaplacianKind::Combinatorial,
        "sym-normalized" => LaplacianKind::SymNormalized,
        other => return Err(CheckpointError::Malformed(format!("unknown Laplacian {other:?}"))),
    };
    let mut names: Vec<String> = (0..layers)
        .flat_map(|i| [format!("layer{i}.filter"), format!("layer{i}.weight")])
        .collect();
    names.extend(["head.w1", "head.b1", "head.w2", "head.b2"].map(String::from));
    let arrays = names
        .iter()
        .map(|n| c.get(&format!("{prefix}.{n}")).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    ModelParams::from_arrays(&arrays, layers, frozen, laplacian).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

fn push_adam(arrays: &mut Vec<(String, Array2<f64>)>, adam: &AdamState) {
    for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
        arrays.push((format!("adam.m{i}"), m.clone()));
        arrays.push((format!("adam.v{i}"), v.clone()));
    }
}

fn read_adam(c: &Checkpoint, count: usize) -> Result<AdamState, CheckpointError> {
    let step = c
        .meta("adam.step")?
        .parse()
        .map_err(|_| CheckpointError::Malformed("bad adam.step".into()))?;
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for i in 0..count {
        m.push(c.get(&format!("adam.m{i}"))?.clone());
        v.push(c.get(&format!("adam.v{i}"))?.clone());
    }
    Ok(AdamState { step, m, v })
}

fn prompt_meta(p: &PromptSet, meta: &mut BTreeMap<String, String>) {
    let alpha = match p.signal.alpha {
        Alpha::PerNode(_) => "per-node",
        Alpha::Linear(_) => "linear",
    };
    meta.insert("prompt.alpha".into(), alpha.into());
    let frame = match p.alignment.frame {
        AlignFrame::Node => "node",
        AlignFrame::Spectral => "spectral",
    };
    meta.insert("prompt.frame".into(), frame.into());
    let pt = match p.alignment.params {
        PtParams::Dense(_) => "dense",
        PtParams::LowRank { .. } => "lowrank",
    };
    meta.insert("prompt.pt".into(), pt.into());
    meta.insert("prompt.label".into(), p.label.is_some().to_string());
    let tuned = p.backbone.as_ref().map_or(0, Vec::len);
    meta.insert("prompt.tuned_layers".into(), tuned.to_string());
}

fn push_prompts(arrays: &mut Vec<(String, Array2<f64>)>, p: &PromptSet, prefix: &str) {
    for (n, a) in p.named_arrays() {
        arrays.push((format!("{prefix}.{n}"), a.clone()));
    }
}

fn read_prompts(c: &Checkpoint, prefix: &str) -> Result<PromptSet, CheckpointError> {
    let get = |n: &str| c.get(&format!("{prefix}.{n}")).cloned();
    let alpha = match c.meta("prompt.alpha")? {
        "per-node" => Alpha::PerNode(get("ps.alpha")?),
        "linear" => Alpha::Linear(get("ps.alpha")?),
        other => return Err(CheckpointError::Malformed(format!("unknown alpha kind {other:?}"))),
    };
    let frame = match c.meta("prompt.frame")? {
        "node" => AlignFrame::Node,
        "spectral" => AlignFrame::Spectral,
        other => return Err(CheckpointError::Malformed(format!("unknown frame {other:?}"))),
    };
    let params = match c.meta("prompt.pt")? {
        "dense" => PtParams::Dense(get("pt")?),
        "lowrank" => PtParams::LowRank {
            a: get("pt.a")?,
            b: get("pt.b")?,
        },
        other => return Err(CheckpointError::Malformed(format!("unknown P_t kind {other:?}"))),
    };
    let label = match c.meta("prompt.label")? {
        "true" => Some(LabelPrompt { p: get("pl")? }),
        _ => None,
    };
    let head = Head {
        w1: get("task.head.w1")?,
        b1: get("task.head.b1")?,
        w2: get("task.head.w2")?,
        b2: get("task.head.b2")?,
    };
    let tuned = c.meta_usize("prompt.tuned_layers")?;
    let backbone = if tuned == 0 {
        None
    } else {
        let layers = (0..tuned)
            .map(|i| {
                let coeffs = get(&format!("tuned.layer{i}.filter"))?;
                Ok(SpectralLayer {
                    filter: FilterKernel::new(&coeffs.iter().copied().collect::<Vec<_>>()),
                    weight: get(&format!("tuned.layer{i}.weight"))?,
                })
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Some(layers)
    };
    Ok(PromptSet {
        signal: SignalPrompt {
            bank: get("ps.bank")?,
            alpha,
        },
        alignment: AlignmentPrompt { frame, params },
        label,
        head,
        backbone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn state() -> PretrainState {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dim: 4,
            head_hidden: 5,
            head_out: 2,
            ..ModelConfig::default()
        };
        let mut s = PretrainState::new(ModelParams::init(&cfg, 1));
        s.loss_trace = vec![1.5, 0.1 + 0.2, f64::MIN_POSITIVE];
        s.adam.step = 3;
        s.adam.m[0][[0, 1]] = -1e-300;
        s
    }

    #[test]
    fn pretrain_round_trip_is_exact() {
        let s = state();
        let c = Checkpoint::from_pretrain(&s, 7, 0xdead);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.pretrain_state().unwrap(), s);
        assert_eq!(back.epoch, 3);
        assert!(back.check_hash(0xdead));
        assert!(!back.check_hash(1));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_pretrain(&state(), 0, 0).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut old = bytes.clone();
        old[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&old), Err(CheckpointError::Version { found: 9, .. })));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn missing_array_is_reported() {
        let mut c = Checkpoint::from_pretrain(&state(), 0, 0);
        c.arrays.retain(|(n, _)| n != "model.head.w2");
        assert!(matches!(c.model_params(), Err(CheckpointError::MissingArray(_))));
    }

    #[test]
    fn basis_round_trip() {
        let g = crate::graph::Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let b = crate::spectral::eig_dense(&crate::graph::build_laplacian(&g)).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::from_basis(&b, 2).to_bytes()).unwrap();
        assert_eq!(back.kind, CheckpointKind::Spectrum);
        assert_eq!(back.basis().unwrap(), b);
    }
}
