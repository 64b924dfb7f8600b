//! Central finite-difference checks of every trainable array, on small
//! synthetic problems. Used by the `gradcheck` subcommand and the test suites.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::Result;
use crate::graph::{Graph, GraphSet, LaplacianKind};
use crate::harness::{gen_sbm, FeatureModel, SbmConfig};
use crate::model::{ModelConfig, ModelParams, Parameters};
use crate::pretrain::{batch_loss, sample_contrastive_batch, Framework, SamplerConfig};
use crate::prompt::{
    finetune_loss, init_label_prompt, init_prompts, Ablation, FinetuneTask, PromptConfig, PromptSet, PtMode,
};
use crate::rng;

/// Step of the central difference.
pub const STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-4;

/// `|fd − an| / max(|fd|, |an|, FLOOR)`.
pub fn relative_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR)
}

/// Result for one array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

impl ArrayCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares `grads` with central differences of `loss` on up to `coords`
/// coordinates of each array, sampled without replacement. Arrays without a
/// gradient are frozen and skipped.
pub fn check_arrays<P, F>(
    prefix: &str,
    params: &P,
    grads: &[Option<Array2<f64>>],
    loss: F,
    coords: usize,
    seed: u64,
) -> Result<Vec<ArrayCheck>>
where
    P: Parameters + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let names: Vec<String> = params.named_arrays().into_iter().map(|(n, _)| n).collect();
    let mut rng = rng::stream(seed, "gradcheck-coords");
    let mut out = Vec::new();
    for (a, name) in names.iter().enumerate() {
        let Some(g) = &grads[a] else { continue };
        let cols = g.ncols();
        let picked = sample(&mut rng, g.len(), coords.min(g.len()));
        let mut worst: f64 = 0.0;
        for flat in picked {
            let idx = (flat / cols, flat % cols);
            let mut plus = params.clone();
            plus.arrays_mut()[a][idx] += STEP;
            let mut minus = params.clone();
            minus.arrays_mut()[a][idx] -= STEP;
            let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * STEP);
            worst = worst.max(relative_error(fd, g[idx]));
        }
        out.push(ArrayCheck {
            name: format!("{prefix}{name}"),
            coords: coords.min(g.len()),
            max_rel_err: worst,
        });
    }
    Ok(out)
}

fn small_sbm(seed: u64) -> Result<Graph> {
    let cfg = SbmConfig {
        blocks: 3,
        nodes_per_block: 8,
        p_in: 0.6,
        p_out: 0.08,
        features: FeatureModel {
            dim: 6,
            mean_scale: 1.0,
            sigma: 0.5,
        },
    };
    Ok(gen_sbm(&cfg, seed)?)
}

fn small_model(seed: u64) -> ModelParams {
    let mut m = ModelParams::init(
        &ModelConfig {
            input_dim: 6,
            hidden_dim: 7,
            num_layers: 2,
            filter_degree: 2,
            head_hidden: 6,
            head_out: 5,
            laplacian: LaplacianKind::Combinatorial,
        },
        seed,
    );
    // Move filters off their identity start so every coefficient matters.
    let mut r = rng::stream(seed, "gradcheck-filters");
    for layer in &mut m.layers {
        layer.filter.coeffs_mut().mapv_inplace(|c| c + r.random_range(-0.2..0.2));
    }
    m
}

fn perturb<P: Parameters>(p: &mut P, seed: u64, scale: f64) {
    let mut r = rng::stream(seed, "gradcheck-perturb");
    for a in p.arrays_mut() {
        a.mapv_inplace(|x| x + r.random_range(-scale..scale));
    }
}

/// Filters, channel weights and head under each pre-training framework.
pub fn pretrain_checks(coords: usize, seed: u64) -> Result<Vec<ArrayCheck>> {
    let g = small_sbm(seed)?;
    let model = small_model(seed);
    let mut out = Vec::new();
    for fw in [Framework::Subgraph, Framework::LinkPred, Framework::LocalGlobal] {
        let batch = sample_contrastive_batch((&g).into(), fw, &SamplerConfig::default(), 4, seed)?;
        let (_, grads) = batch_loss(&batch, &model, 0.5)?;
        let loss = |m: &ModelParams| Ok(batch_loss(&batch, m, 0.5)?.0);
        out.extend(check_arrays(&format!("pretrain/{fw}/"), &model, &grads, loss, coords, seed)?);
    }
    Ok(out)
}

fn prompt_case(
    label: &str,
    model: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    ids: &[usize],
    coords: usize,
    seed: u64,
) -> Result<Vec<ArrayCheck>> {
    let mut p: PromptSet = init_prompts(model, task, cfg, seed);
    if cfg.ablation.uses_label_prompt() {
        p.label = Some(init_label_prompt(&p, model, task, cfg, ids, seed)?);
    }
    perturb(&mut p, seed, 0.1);
    let (_, grads) = finetune_loss(&p, model, task, cfg, ids)?;
    let loss = |q: &PromptSet| -> Result<f64> { Ok(finetune_loss(q, model, task, cfg, ids)?.0) };
    check_arrays(&format!("prompt/{label}/"), &p, &grads, loss, coords, seed)
}

/// Signal prompt, alpha, alignment prompt (dense and low rank), label prompt,
/// task head and the tunable backbone, on node and graph tasks.
pub fn prompt_checks(coords: usize, seed: u64) -> Result<Vec<ArrayCheck>> {
    let g = small_sbm(seed)?;
    let model = small_model(seed).frozen();
    let base = PromptConfig {
        l: 4,
        k: 10,
        head_hidden: 6,
        head_out: 5,
        ortho_penalty_weight: 0.1,
        ..PromptConfig::default()
    };
    let node = FinetuneTask::node(g.clone(), LaplacianKind::Combinatorial, base.k, seed)?;
    let ids: Vec<usize> = (0..g.n_nodes()).step_by(2).collect();
    let mut out = Vec::new();
    for (label, ablation, mode) in [
        ("full", Ablation::Full, PtMode::Dense),
        ("lowrank", Ablation::Full, PtMode::LowRank(3)),
        ("end2end", Ablation::EndToEnd, PtMode::Dense),
        ("linear-probe", Ablation::LinearProbe, PtMode::Dense),
    ] {
        let cfg = PromptConfig {
            ablation,
            pt_mode: mode,
            ..base.clone()
        };
        out.extend(prompt_case(label, &model, &node, &cfg, &ids, coords, seed)?);
    }
    let graphs: Vec<Graph> = (0..6).map(|i| small_sbm(seed + 100 + i)).collect::<Result<_>>()?;
    let labels = Array2::from_shape_fn((6, 1), |(i, _)| (i % 2) as f64);
    let set = GraphSet::new(graphs, Some(labels)).map_err(crate::Error::from)?;
    let gcfg = PromptConfig { k: 8, ..base };
    let gtask = FinetuneTask::graphs(&set, LaplacianKind::Combinatorial, gcfg.k, seed)?;
    out.extend(prompt_case("graph", &model, &gtask, &gcfg, &[0, 1, 2, 3], coords, seed)?);
    Ok(out)
}

/// Every check, pre-training first.
pub fn all_checks(coords: usize, seed: u64) -> Result<Vec<ArrayCheck>> {
    let mut out = pretrain_checks(coords, seed)?;
    out.extend(prompt_checks(coords, seed)?);
    Ok(out)
}
