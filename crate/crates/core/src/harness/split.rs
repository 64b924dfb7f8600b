//! Transductive, semi-inductive and inductive dataset splits.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::SplitError;
use crate::graph::{Graph, GraphSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Setting {
    Transductive,
    SemiInductive,
    #[default]
    Inductive,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Transductive => "transductive",
            Setting::SemiInductive => "semi-inductive",
            Setting::Inductive => "inductive",
        }
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transductive" => Ok(Setting::Transductive),
            "semi-inductive" | "semi" => Ok(Setting::SemiInductive),
            "inductive" => Ok(Setting::Inductive),
            other => Err(format!("unknown setting `{other}`")),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Setting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub setting: Setting,
    /// Training nodes drawn per fine-tuning class.
    pub per_class_train: usize,
    /// Share of the remaining labeled nodes used for validation (rest is test).
    pub val_fraction: f64,
    /// Share of the classes handed to fine-tuning (semi-inductive and inductive).
    pub finetune_class_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            setting: Setting::Inductive,
            per_class_train: 20,
            val_fraction: 0.2,
            finetune_class_fraction: 0.5,
        }
    }
}

/// Node ids refer to the source graph; `train`/`val`/`test` index the
/// fine-tuning graph, whose classes are renumbered `0..finetune_classes.len()`
/// in ascending order of the source class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub setting: Setting,
    pub pretrain_ids: Vec<usize>,
    pub finetune_ids: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub pretrain_classes: BTreeSet<usize>,
    pub finetune_classes: BTreeSet<usize>,
}

impl DatasetSplit {
    /// Disjointness and per-setting class/node invariants.
    pub fn check(&self) -> Result<(), SplitError> {
        let fail = |m: &str| Err(SplitError::Invariant(m.to_string()));
        let sets = [&self.train, &self.val, &self.test];
        let mut seen = BTreeSet::new();
        for s in sets {
            for &i in s {
                if i >= self.finetune_ids.len() {
                    return fail("split index outside the fine-tuning graph");
                }
                if !seen.insert(i) {
                    return fail("train/val/test overlap");
                }
            }
        }
        let pre: BTreeSet<usize> = self.pretrain_ids.iter().copied().collect();
        let ft: BTreeSet<usize> = self.finetune_ids.iter().copied().collect();
        match self.setting {
            Setting::Transductive => {
                if pre != ft {
                    return fail("transductive stages must share every node");
                }
            }
            Setting::SemiInductive => {
                if !ft.is_subset(&pre) {
                    return fail("semi-inductive fine-tuning nodes must be pre-training nodes");
                }
                if !(self.finetune_classes.is_subset(&self.pretrain_classes)
                    && self.finetune_classes.len() < self.pretrain_classes.len())
                {
                    return fail("semi-inductive fine-tuning classes must be a proper subset");
                }
            }
            Setting::Inductive => {
                if !pre.is_disjoint(&ft) {
                    return fail("inductive node sets overlap");
                }
                if !self.pretrain_classes.is_disjoint(&self.finetune_classes) {
                    return fail("inductive class sets overlap");
                }
            }
        }
        Ok(())
    }
}

/// A split plus the graphs each stage sees.
#[derive(Debug, Clone)]
pub struct SplitGraphs {
    pub split: DatasetSplit,
    pub pretrain: Graph,
    /// Labels renumbered to the fine-tuning classes.
    pub finetune: Graph,
}

fn class_count(total: usize, fraction: f64, reserve: usize) -> Result<usize, SplitError> {
    let needed = ((fraction * total as f64).round() as usize).max(1);
    if needed + reserve > total {
        return Err(SplitError::TooFewClasses {
            needed: needed + reserve,
            available: total,
        });
    }
    Ok(needed)
}

/// Builds the split for `cfg.setting`. Pre-training classes are the
/// complement of the sampled fine-tuning classes (inductive) or all classes
/// (transductive, semi-inductive). Unlabeled nodes only join pre-training.
pub fn make_splits(g: &Graph, cfg: &SplitConfig, seed: u64) -> Result<SplitGraphs, SplitError> {
    let labels = g.node_labels().ok_or(SplitError::Unlabeled)?;
    if !(0.0..=1.0).contains(&cfg.val_fraction) {
        return Err(SplitError::Invariant(format!("val_fraction {} outside [0, 1]", cfg.val_fraction)));
    }
    let present: Vec<usize> = g.classes_present().into_iter().collect();
    let mut rng = rng::stream(seed, "split-classes");
    let finetune_classes: BTreeSet<usize> = match cfg.setting {
        Setting::Transductive => present.iter().copied().collect(),
        Setting::SemiInductive | Setting::Inductive => {
            let take = class_count(present.len(), cfg.finetune_class_fraction, 1)?;
            let mut shuffled = present.clone();
            shuffled.shuffle(&mut rng);
            shuffled[..take].iter().copied().collect()
        }
    };
    let pretrain_classes: BTreeSet<usize> = match cfg.setting {
        Setting::Inductive => present.iter().copied().filter(|c| !finetune_classes.contains(c)).collect(),
        _ => present.iter().copied().collect(),
    };
    let in_ft = |i: usize| labels[i] >= 0 && finetune_classes.contains(&(labels[i] as usize));
    let all: Vec<usize> = (0..g.n_nodes()).collect();
    let finetune_ids: Vec<usize> = match cfg.setting {
        Setting::Transductive => all.clone(),
        _ => all.iter().copied().filter(|&i| in_ft(i)).collect(),
    };
    let pretrain_ids: Vec<usize> = match cfg.setting {
        Setting::Inductive => all.iter().copied().filter(|&i| !in_ft(i)).collect(),
        _ => all.clone(),
    };

    let remap: Vec<usize> = finetune_classes.iter().copied().collect();
    let local = |c: i64| remap.binary_search(&(c as usize)).ok();
    let ft_labels: Vec<i64> = finetune_ids
        .iter()
        .map(|&i| match labels[i] {
            l if l >= 0 => local(l).map_or(-1, |c| c as i64),
            _ => -1,
        })
        .collect();

    let mut by_class = vec![Vec::new(); remap.len()];
    for (pos, &l) in ft_labels.iter().enumerate() {
        if l >= 0 {
            by_class[l as usize].push(pos);
        }
    }
    let mut rng = rng::stream(seed, "split-nodes");
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for (c, nodes) in by_class.iter_mut().enumerate() {
        if nodes.len() < cfg.per_class_train {
            return Err(SplitError::ClassTooSmall {
                class: remap[c],
                available: nodes.len(),
                needed: cfg.per_class_train,
            });
        }
        nodes.shuffle(&mut rng);
        train.extend_from_slice(&nodes[..cfg.per_class_train]);
        rest.extend_from_slice(&nodes[cfg.per_class_train..]);
    }
    rest.shuffle(&mut rng);
    let n_val = (cfg.val_fraction * rest.len() as f64).round() as usize;
    let test = rest.split_off(n_val);
    let val = rest;
    train.sort_unstable();

    let split = DatasetSplit {
        setting: cfg.setting,
        pretrain_ids,
        finetune_ids,
        train,
        val,
        test,
        pretrain_classes,
        finetune_classes,
    };
    split.check()?;
    let pretrain = if split.pretrain_ids.len() == g.n_nodes() {
        g.clone()
    } else {
        g.induced_subgraph(&split.pretrain_ids)?
    };
    let finetune = if split.finetune_ids.len() == g.n_nodes() {
        g.clone()
    } else {
        g.induced_subgraph(&split.finetune_ids)?
    };
    let finetune = finetune.with_labels(ft_labels, remap.len())?;
    Ok(SplitGraphs { split, pretrain, finetune })
}

/// Random graph-level split: `train_fraction` of the graphs for training,
/// the rest divided by `val_fraction`.
pub fn split_graph_set(
    set: &GraphSet,
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), SplitError> {
    if set.class_labels().is_none() {
        return Err(SplitError::Unlabeled);
    }
    if !(0.0..=1.0).contains(&train_fraction) || !(0.0..=1.0).contains(&val_fraction) {
        return Err(SplitError::Invariant("fractions must lie in [0, 1]".into()));
    }
    let mut ids: Vec<usize> = (0..set.len()).collect();
    ids.shuffle(&mut rng::stream(seed, "split-graphs"));
    let n_train = ((train_fraction * set.len() as f64).round() as usize).max(1).min(set.len());
    let mut rest = ids.split_off(n_train);
    let n_val = (val_fraction * rest.len() as f64).round() as usize;
    let test = rest.split_off(n_val);
    Ok((ids, rest, test))
}
