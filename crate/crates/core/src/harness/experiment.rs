//! Pre-train, fine-tune and evaluate, once per seed and sweep point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{DataSource, ExperimentConfig};
use super::split::{make_splits, Setting, SplitConfig};
use super::synth::{gen_sbm, gen_transfer_pair};
use crate::error::{Error, Result};
use crate::graph::{load_graph, Graph};
use crate::model::{ModelConfig, ModelParams};
use crate::pretrain::pretrain_loop;
use crate::prompt::{finetune_loop, Ablation, FinetuneOutcome, FinetuneTask, PromptConfig, SampleSplit};
use crate::rng;

/// One fine-tuning run of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub ablation: Ablation,
    pub l: usize,
    pub k: usize,
    pub lr: f64,
    /// `accuracy` or `roc_auc`.
    pub metric: &'static str,
    pub best_epoch: usize,
    pub val: f64,
    pub test: f64,
    pub final_loss: f64,
    /// `(epoch, validation metric)` per checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ResultRow>,
    /// Pre-training loss per epoch, keyed by seed.
    pub pretrain_loss: BTreeMap<u64, Vec<f64>>,
}

impl Report {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("seed,ablation,L,K,lr,metric,best_epoch,val,test,final_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                r.seed, r.ablation, r.l, r.k, r.lr, r.metric, r.best_epoch, r.val, r.test, r.final_loss
            );
        }
        s
    }

    pub fn checkpoints_csv(&self) -> String {
        let mut s = String::from("seed,ablation,L,K,lr,epoch,val,chosen\n");
        for r in &self.rows {
            for &(epoch, val) in &r.checkpoints {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{:.6},{}",
                    r.seed,
                    r.ablation,
                    r.l,
                    r.k,
                    r.lr,
                    epoch,
                    val,
                    u8::from(epoch == r.best_epoch)
                );
            }
        }
        s
    }

    pub fn pretrain_csv(&self) -> String {
        let mut s = String::from("seed,epoch,loss\n");
        for (seed, trace) in &self.pretrain_loss {
            for (e, l) in trace.iter().enumerate() {
                let _ = writeln!(s, "{seed},{e},{l:.6}");
            }
        }
        s
    }

    /// Mean test metric per ablation mode, in first-seen order.
    pub fn mean_test_by_ablation(&self) -> Vec<(Ablation, f64)> {
        let mut acc: Vec<(Ablation, f64, usize)> = Vec::new();
        for r in &self.rows {
            match acc.iter_mut().find(|(a, _, _)| *a == r.ablation) {
                Some(e) => {
                    e.1 += r.test;
                    e.2 += 1;
                }
                None => acc.push((r.ablation, r.test, 1)),
            }
        }
        acc.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
    }
}

/// Graphs and split for one seed.
#[derive(Debug, Clone)]
pub struct StageData {
    pub pretrain: Graph,
    pub finetune: Graph,
    pub split: SampleSplit,
}

/// Builds the stage graphs. A transfer pair splits only the fine-tuning
/// graph's nodes; the other sources go through [`make_splits`].
pub fn stage_data(cfg: &ExperimentConfig, seed: u64) -> Result<StageData> {
    let split_seed = rng::derive_seed(seed, "experiment-split", 0);
    let data_seed = rng::derive_seed(seed, "experiment-data", 0);
    let (pretrain, finetune, split) = match cfg.data.source {
        DataSource::Pair => {
            let pair = gen_transfer_pair(&cfg.data.sbm, cfg.data.signal_shift, cfg.data.structure_shift, data_seed)?;
            let scfg = SplitConfig {
                setting: Setting::Transductive,
                ..cfg.split.clone()
            };
            let s = make_splits(&pair.finetune, &scfg, split_seed)?;
            (pair.pretrain, s.finetune, s.split)
        }
        DataSource::Sbm | DataSource::Graph => {
            let g = match cfg.data.source {
                DataSource::Sbm => gen_sbm(&cfg.data.sbm, data_seed)?,
                _ => load_graph(&cfg.data.path)?,
            };
            let s = make_splits(&g, &cfg.split, split_seed)?;
            (s.pretrain, s.finetune, s.split)
        }
    };
    Ok(StageData {
        pretrain,
        finetune,
        split: SampleSplit {
            train: split.train,
            val: split.val,
            test: split.test,
        },
    })
}

/// Pre-trains a fresh model on `g` and freezes it.
pub fn pretrain_stage(cfg: &ExperimentConfig, g: &Graph, seed: u64) -> Result<(ModelParams, Vec<f64>)> {
    let mcfg = ModelConfig {
        input_dim: g.signal_dim(),
        ..cfg.model.clone()
    };
    let init = ModelParams::init(&mcfg, rng::derive_seed(seed, "experiment-init", 0));
    let state = pretrain_loop(g.into(), init, &cfg.pretrain, rng::derive_seed(seed, "experiment-pretrain", 0))?;
    Ok((state.params.frozen(), state.loss_trace))
}

/// Fine-tunes once per learning rate in `lrs` and keeps the run with the best
/// validation metric (earliest on ties). An empty list uses `cfg.lr`.
pub fn finetune_best_lr(
    model: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    split: &SampleSplit,
    lrs: &[f64],
    seed: u64,
) -> Result<(f64, FinetuneOutcome)> {
    let single = [cfg.lr];
    let lrs = if lrs.is_empty() { &single[..] } else { lrs };
    let mut best: Option<(f64, FinetuneOutcome)> = None;
    for &lr in lrs {
        let run = PromptConfig { lr, ..cfg.clone() };
        let out = finetune_loop(model, task, &run, split, seed)?;
        if best.as_ref().is_none_or(|(_, b)| out.best_val > b.best_val) {
            best = Some((lr, out));
        }
    }
    Ok(best.expect("at least one learning rate"))
}

fn or_default<T: Copy>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

/// Runs every seed and sweep point. Writes `config.toml`, `summary.csv`,
/// `checkpoints.csv` and `pretrain_loss.csv` into `out_dir` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
    }
    let ablations = or_default(&cfg.sweep.ablations, cfg.prompt.ablation);
    let ls = or_default(&cfg.sweep.l, cfg.prompt.l);
    let ks = or_default(&cfg.sweep.k, cfg.prompt.k);
    let mut report = Report::default();
    for i in 0..cfg.seeds as u64 {
        let seed = cfg.seed + i;
        let data = stage_data(cfg, seed).map_err(|e| e.in_stage("data"))?;
        let (model, trace) = pretrain_stage(cfg, &data.pretrain, seed).map_err(|e| e.in_stage("pretrain"))?;
        report.pretrain_loss.insert(seed, trace);
        for &k in &ks {
            let task = FinetuneTask::node(
                data.finetune.clone(),
                cfg.model.laplacian,
                k,
                rng::derive_seed(seed, "experiment-basis", k as u64),
            )
            .map_err(|e| Error::from(e).in_stage("finetune"))?;
            for &l in &ls {
                for &ablation in &ablations {
                    let pcfg = PromptConfig {
                        l,
                        k,
                        ablation,
                        ..cfg.prompt.clone()
                    };
                    let ft_seed = rng::derive_seed(seed, "experiment-finetune", 0);
                    let (lr, out) = finetune_best_lr(&model, &task, &pcfg, &data.split, &cfg.sweep.lr, ft_seed)
                        .map_err(|e| e.in_stage("finetune"))?;
                    log::info!("seed {seed} {ablation} L={l} K={k} lr={lr}: val {:.4} test {:.4}", out.best_val, out.test);
                    report.rows.push(ResultRow {
                        seed,
                        ablation,
                        l,
                        k,
                        lr,
                        metric: if task.uses_auc() { "roc_auc" } else { "accuracy" },
                        best_epoch: out.best_epoch,
                        val: out.best_val,
                        test: out.test,
                        final_loss: out.loss_trace.last().copied().unwrap_or(f64::NAN),
                        checkpoints: out.checkpoints.iter().map(|c| (c.epoch, c.val)).collect(),
                    });
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::write(dir.join("summary.csv"), report.summary_csv())?;
        fs::write(dir.join("checkpoints.csv"), report.checkpoints_csv())?;
        fs::write(dir.join("pretrain_loss.csv"), report.pretrain_csv())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{FeatureModel, SbmConfig};

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.sbm = SbmConfig {
            blocks: 3,
            nodes_per_block: 12,
            p_in: 0.5,
            p_out: 0.05,
            features: FeatureModel {
                dim: 4,
                ..FeatureModel::default()
            },
        };
        cfg.model = ModelConfig {
            input_dim: 4,
            hidden_dim: 8,
            head_hidden: 8,
            head_out: 8,
            ..ModelConfig::default()
        };
        cfg.split.per_class_train = 3;
        cfg.pretrain.epochs = 2;
        cfg.pretrain.batch_size = 4;
        cfg.prompt.epochs = 3;
        cfg.prompt.k = 6;
        cfg.prompt.l = 2;
        cfg.prompt.head_hidden = 8;
        cfg.prompt.head_out = 8;
        cfg
    }

    #[test]
    fn ablation_sweep_gives_one_row_per_mode() {
        let mut cfg = tiny();
        cfg.sweep.ablations = Ablation::SWEEP.to_vec();
        let r = run_experiment(&cfg, None).unwrap();
        let modes: Vec<Ablation> = r.rows.iter().map(|x| x.ablation).collect();
        assert_eq!(modes, Ablation::SWEEP.to_vec());
        assert_eq!(r.summary_csv().lines().count(), 5);
    }

    #[test]
    fn l_sweep_and_determinism() {
        let mut cfg = tiny();
        cfg.sweep.l = vec![8, 16, 32, 64];
        let a = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.rows.iter().map(|r| r.l).collect::<Vec<_>>(), vec![8, 16, 32, 64]);
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.summary_csv(), b.summary_csv());
        assert_eq!(a, b);
    }

    #[test]
    fn writes_outputs_and_labels_stage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_experiment(&cfg, Some(dir.path())).unwrap();
        for f in ["config.toml", "summary.csv", "checkpoints.csv", "pretrain_loss.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = ExperimentConfig::load(dir.path().join("config.toml"), &[]).unwrap();
        assert_eq!(back, cfg);
        let mut bad = tiny();
        bad.split.per_class_train = 50;
        let err = run_experiment(&bad, None).unwrap_err();
        assert!(err.to_string().starts_with("data:"), "{err}");
    }
}
