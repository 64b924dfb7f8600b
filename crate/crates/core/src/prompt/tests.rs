use ndarray::{array, Array2};
use rand::Rng as _;

use super::*;
use crate::harness::{gen_sbm, FeatureModel, SbmConfig};
use crate::model::{spectral_forward, FilterKernel, ModelConfig};
use crate::spectral::eig_dense;

fn small_graph(seed: u64) -> Graph {
    let cfg = SbmConfig {
        blocks: 2,
        nodes_per_block: 6,
        p_in: 0.7,
        p_out: 0.1,
        features: FeatureModel {
            dim: 3,
            mean_scale: 1.0,
            sigma: 0.5,
        },
    };
    gen_sbm(&cfg, seed).unwrap()
}

fn small_model(seed: u64) -> ModelParams {
    ModelParams::init(
        &ModelConfig {
            input_dim: 3,
            hidden_dim: 5,
            num_layers: 2,
            filter_degree: 2,
            head_hidden: 4,
            head_out: 4,
            laplacian: LaplacianKind::Combinatorial,
        },
        seed,
    )
    .frozen()
}

fn with_filters(mut p: ModelParams) -> ModelParams {
    p.layers[0].filter = FilterKernel::new(&[0.9, -0.3, 0.05]);
    p.layers[1].filter = FilterKernel::new(&[1.1, 0.2, -0.04]);
    p
}

fn small_cfg(k: usize) -> PromptConfig {
    PromptConfig {
        l: 3,
        k,
        lr: 0.01,
        epochs: 5,
        checkpoint_every: 2,
        head_hidden: 6,
        head_out: 4,
        ..PromptConfig::default()
    }
}

fn split() -> SampleSplit {
    SampleSplit {
        train: vec![0, 1, 2, 6, 7, 8],
        val: vec![3, 9],
        test: vec![4, 5, 10, 11],
    }
}

fn randomize(p: &mut PromptSet, seed: u64, scale: f64) {
    let mut rng = rng::stream(seed, "test-randomize");
    for a in p.arrays_mut() {
        a.mapv_inplace(|x| x + rng.random_range(-scale..scale));
    }
}


fn fd_check(prompts: &PromptSet, model: &ModelParams, task: &FinetuneTask, cfg: &PromptConfig, ids: &[usize]) {
    let (_, grads) = finetune_loss(prompts, model, task, cfg, ids).unwrap();
    let names: Vec<String> = prompts.named_arrays().into_iter().map(|(n, _)| n).collect();
    let mask = prompts.trainable_mask(cfg.ablation);
    assert_eq!(grads.len(), names.len());
    let h = 1e-6;
    for (a, name) in names.iter().enumerate() {
        let Some(g) = &grads[a] else {
            assert!(!mask[a], "{name} should have a gradient");
            continue;
        };
        assert!(mask[a], "{name} is frozen but got a gradient");
        let len = g.len();
        for flat in (0..len).step_by((len / 7).max(1)) {
            let idx = (flat / g.ncols(), flat % g.ncols());
            let mut plus = prompts.clone();
            plus.arrays_mut()[a][idx] += h;
            let mut minus = prompts.clone();
            minus.arrays_mut()[a][idx] -= h;
            let lp = finetune_loss(&plus, model, task, cfg, ids).unwrap().0;
            let lm = finetune_loss(&minus, model, task, cfg, ids).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let an = g[idx];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "{name}{idx:?}: fd {fd} vs analytic {an}");
        }
    }
}

fn node_task(k: usize) -> FinetuneTask {
    FinetuneTask::node(small_graph(3), LaplacianKind::Combinatorial, k, 0).unwrap()
}

fn ready_prompts(model: &ModelParams, task: &FinetuneTask, cfg: &PromptConfig) -> PromptSet {
    let mut p = init_prompts(model, task, cfg, 9);
    if cfg.ablation.uses_label_prompt() {
        p.label = Some(init_label_prompt(&p, model, task, cfg, &split().train, 1).unwrap());
    }
    randomize(&mut p, 4, 0.1);
    p
}

#[test]
fn zero_alpha_leaves_signals_unchanged() {
    let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.5]];
    let sp = SignalPrompt::per_node(2, 4, 3, 7);
    assert!(sp.bank.iter().any(|&v| v != 0.0));
    assert_eq!(apply_signal_prompt(&x, &sp).unwrap(), x);
    let shared = SignalPrompt::shared(4, 3, 7);
    assert_eq!(apply_signal_prompt(&x, &shared).unwrap(), x);
}

#[test]
fn signal_prompt_mixes_bank() {
    let x = Array2::zeros((2, 2));
    let sp = SignalPrompt {
        bank: array![[1.0, 0.0], [0.0, 2.0]],
        alpha: Alpha::PerNode(array![[0.5, 0.0], [1.0, 1.0]]),
    };
    assert_eq!(apply_signal_prompt(&x, &sp).unwrap(), array![[0.5, 0.0], [1.0, 2.0]]);
    let bad = SignalPrompt {
        alpha: Alpha::PerNode(Array2::zeros((3, 2))),
        ..sp
    };
    assert!(apply_signal_prompt(&x, &bad).is_err());
}

#[test]
fn shared_bank_is_smaller_than_free_prompts() {
    let c = prompt_param_counts(100, 32, 16, 32, 4, 128, PtMode::Dense);
    assert_eq!(c.signal, 2112);
    assert_eq!(c.per_node_signal, 3200);
    assert_eq!(c.alignment, 10_000);
    assert_eq!(c.label, 512);
    assert_eq!(prompt_param_counts(100, 32, 16, 32, 4, 128, PtMode::LowRank(8)).alignment, 1600);
}

#[test]
fn pt_mode_parses() {
    assert_eq!("dense".parse::<PtMode>().unwrap(), PtMode::Dense);
    assert_eq!("lowrank:16".parse::<PtMode>().unwrap(), PtMode::LowRank(16));
    assert!("lowrank:0".parse::<PtMode>().is_err());
    assert!("sparse".parse::<PtMode>().is_err());
    assert_eq!(PtMode::LowRank(4).to_string(), "lowrank:4");
    assert_eq!("pl".parse::<Ablation>().unwrap(), Ablation::EndToEnd);
    assert_eq!("probe".parse::<Ablation>().unwrap(), Ablation::LinearProbe);
}

#[test]
fn identity_alignment_matches_truncated_forward() {
    let g = small_graph(1);
    let model = with_filters(small_model(2));
    let basis = eig_dense(&Laplacian::new(&g, LaplacianKind::Combinatorial)).unwrap().truncate(5).unwrap();
    let expected = spectral_forward(&basis, &model, g.signals()).unwrap();
    for mode in [PtMode::Dense, PtMode::LowRank(3)] {
        for (frame, dim) in [(AlignFrame::Node, 12), (AlignFrame::Spectral, 5)] {
            let ap = AlignmentPrompt::identity(dim, mode, frame, 1);
            let z = aligned_forward(&basis, &ap, &model, g.signals()).unwrap();
            let err = (&z - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "{mode} {frame:?}: {err}");
        }
    }
}

#[test]
fn aligned_forward_matches_dense_oracle() {
    let g = small_graph(5);
    let model = with_filters(small_model(6));
    let basis = eig_dense(&Laplacian::new(&g, LaplacianKind::Combinatorial)).unwrap().truncate(4).unwrap();
    let mut rng = rng::stream(3, "pt");
    let pt = Array2::from_shape_simple_fn((12, 12), || rng.random_range(-0.5..0.5)) + Array2::<f64>::eye(12);
    let ap = AlignmentPrompt {
        frame: AlignFrame::Node,
        params: PtParams::Dense(pt.clone()),
    };
    let v = pt.dot(basis.eigenvectors());
    let u = basis.eigenvectors();
    for right_pt in [true, false] {
        let mut z = g.signals().clone();
        for (i, layer) in model.layers.iter().enumerate() {
            let y = z.dot(&layer.weight);
            let right = if right_pt { v.t().dot(&y) } else { u.t().dot(&y) };
            let mut s = right;
            for (j, mut row) in s.rows_mut().into_iter().enumerate() {
                row *= layer.filter.response(basis.eigenvalues()[j]);
            }
            z = v.dot(&s);
            if i + 1 < model.layers.len() {
                z.mapv_inplace(|x| x.max(0.0));
            }
        }
        let got = aligned_forward_with(&basis, &ap, &model, g.signals(), right_pt).unwrap();
        let err = (&got - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "right_pt={right_pt}: {err}");
    }
}

#[test]
fn orthogonal_spectral_rotation_with_flat_filter_is_invisible() {
    let g = small_graph(8);
    let model = small_model(1);
    let basis = eig_dense(&Laplacian::new(&g, LaplacianKind::Combinatorial)).unwrap().truncate(2).unwrap();
    let (c, s) = (0.6f64, 0.8f64);
    let ap = AlignmentPrompt {
        frame: AlignFrame::Spectral,
        params: PtParams::Dense(array![[c, -s], [s, c]]),
    };
    let id = AlignmentPrompt::identity(2, PtMode::Dense, AlignFrame::Spectral, 0);
    let a = aligned_forward(&basis, &ap, &model, g.signals()).unwrap();
    let b = aligned_forward(&basis, &id, &model, g.signals()).unwrap();
    assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn aligned_forward_requires_frozen_backbone() {
    let g = small_graph(1);
    let mut model = small_model(2);
    model.frozen = false;
    let basis = eig_dense(&Laplacian::new(&g, LaplacianKind::Combinatorial)).unwrap();
    let ap = AlignmentPrompt::identity(12, PtMode::Dense, AlignFrame::Node, 0);
    assert_eq!(aligned_forward(&basis, &ap, &model, g.signals()), Err(ModelError::NotFrozen));
    let task = node_task(4);
    let cfg = small_cfg(4);
    assert!(matches!(
        finetune_loop(&model, &task, &cfg, &split(), 0),
        Err(TrainError::Model(ModelError::NotFrozen))
    ));
}

#[test]
fn identical_label_prompts_give_log_classes() {
    let out = array![[1.0, 2.0, 0.0], [-1.0, 0.5, 3.0]];
    let lp = LabelPrompt {
        p: array![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [0.5, 0.5, 0.5]],
    };
    let l = label_infonce(&out, &[0, 2], &lp, 0.3).unwrap();
    assert!((l - 3f64.ln()).abs() < 1e-12);
    assert!(label_infonce(&out, &[0, 3], &lp, 0.3).is_err());
}

#[test]
fn predict_picks_closest_prompt_lowest_on_ties() {
    let lp = LabelPrompt {
        p: array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
    };
    let out = array![[3.0, 0.1], [0.2, 5.0], [1.0, 1.0], [-1.0, 0.0]];
    assert_eq!(predict(&out, &lp).unwrap(), vec![0, 1, 0, 1]);
    let zero = LabelPrompt { p: Array2::zeros((2, 2)) };
    assert!(predict(&out, &zero).is_err());
}

#[test]
fn label_prompt_starts_at_class_means() {
    let model = small_model(2);
    let task = node_task(4);
    let cfg = small_cfg(4);
    let p = init_prompts(&model, &task, &cfg, 0);
    let train = split().train;
    let lp = init_label_prompt(&p, &model, &task, &cfg, &train, 0).unwrap();
    let out = task_outputs(&p, &model, &task, &cfg, &train);
    let mean0 = out.slice(ndarray::s![0..3, ..]).mean_axis(ndarray::Axis(0)).unwrap();
    assert!((&lp.p.row(0) - &mean0).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn node_gradients_match_finite_differences() {
    let model = with_filters(small_model(2));
    let task = node_task(5);
    for (ablation, mode, ortho) in [
        (Ablation::Full, PtMode::Dense, 0.0),
        (Ablation::Full, PtMode::LowRank(2), 0.3),
        (Ablation::Full, PtMode::Dense, 0.2),
        (Ablation::NoPs, PtMode::Dense, 0.0),
        (Ablation::NoPt, PtMode::Dense, 0.0),
        (Ablation::EndToEnd, PtMode::Dense, 0.0),
        (Ablation::LinearProbe, PtMode::Dense, 0.0),
    ] {
        let cfg = PromptConfig {
            ablation,
            pt_mode: mode,
            ortho_penalty_weight: ortho,
            ..small_cfg(5)
        };
        let p = ready_prompts(&model, &task, &cfg);
        fd_check(&p, &model, &task, &cfg, &split().train);
    }
    let cfg = PromptConfig {
        right_pt: false,
        ..small_cfg(5)
    };
    fd_check(&ready_prompts(&model, &task, &cfg), &model, &task, &cfg, &split().train);
}

fn graph_task() -> FinetuneTask {
    let graphs: Vec<Graph> = (0..6)
        .map(|i| {
            let g = small_graph(20 + i);
            let keep: Vec<usize> = (0..(3 + i as usize)).collect();
            g.induced_subgraph(&keep).unwrap()
        })
        .collect();
    let labels = Array2::from_shape_fn((6, 1), |(i, _)| (i % 2) as f64);
    let set = GraphSet::new(graphs, Some(labels)).unwrap();
    FinetuneTask::graphs(&set, LaplacianKind::Combinatorial, 4, 0).unwrap()
}

#[test]
fn graph_task_pads_bases_and_checks_gradients() {
    let task = graph_task();
    let FinetuneTask::Graphs(t) = &task else { unreachable!() };
    let (u, lam) = &t.bases[0];
    assert_eq!(u.dim(), (3, 4));
    assert!(u.column(3).iter().all(|&x| x == 0.0));
    assert_eq!(lam[3], lam[2]);
    assert!(task.uses_auc());
    let model = with_filters(small_model(2));
    let ids = [0, 1, 2, 3];
    for mode in [PtMode::Dense, PtMode::LowRank(2)] {
        let cfg = PromptConfig {
            pt_mode: mode,
            ortho_penalty_weight: 0.1,
            ..small_cfg(4)
        };
        let mut p = init_prompts(&model, &task, &cfg, 3);
        p.label = Some(init_label_prompt(&p, &model, &task, &cfg, &ids, 1).unwrap());
        randomize(&mut p, 5, 0.1);
        fd_check(&p, &model, &task, &cfg, &ids);
    }
}

#[test]
fn zero_epochs_return_initial_prompts() {
    let model = small_model(2);
    let task = node_task(4);
    let cfg = PromptConfig {
        epochs: 0,
        ..small_cfg(4)
    };
    let init = finetune_init(&model, &task, &cfg, &split(), 11).unwrap();
    let out = finetune_loop(&model, &task, &cfg, &split(), 11).unwrap();
    assert_eq!(out.best, init.prompts);
    assert_eq!(out.last, init.prompts);
    assert_eq!(out.best_epoch, 0);
    assert!(out.loss_trace.is_empty());
    assert!(out.test.is_finite());
}

#[test]
fn training_reduces_loss_and_keeps_backbone() {
    let model = small_model(2);
    let before = model.clone();
    let task = node_task(6);
    let cfg = PromptConfig {
        epochs: 40,
        lr: 0.01,
        ..small_cfg(6)
    };
    let out = finetune_loop(&model, &task, &cfg, &split(), 1).unwrap();
    assert_eq!(model, before);
    assert_eq!(out.loss_trace.len(), 40);
    assert!(out.loss_trace[39] < out.loss_trace[0]);
    let epochs: Vec<usize> = out.checkpoints.iter().map(|c| c.epoch).collect();
    assert_eq!(epochs, (0..=40).step_by(2).collect::<Vec<_>>());
    assert!(out.checkpoints.iter().all(|c| c.val <= out.best_val));
    let ap = out.last.alignment.matrix();
    assert!((&ap - &Array2::<f64>::eye(12)).iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn frozen_groups_stay_put() {
    let model = small_model(2);
    let task = node_task(4);
    for ablation in [Ablation::NoPs, Ablation::NoPt, Ablation::LinearProbe] {
        let cfg = PromptConfig {
            ablation,
            epochs: 4,
            ..small_cfg(4)
        };
        let init = finetune_init(&model, &task, &cfg, &split(), 2).unwrap();
        let out = finetune_loop(&model, &task, &cfg, &split(), 2).unwrap();
        if !ablation.train_signal() {
            assert_eq!(out.last.signal, init.prompts.signal);
        }
        if !ablation.train_alignment() {
            assert_eq!(out.last.alignment, init.prompts.alignment);
        }
        assert_ne!(out.last.head, init.prompts.head);
    }
}

#[test]
fn resumed_run_matches_straight_run() {
    let model = small_model(2);
    let task = node_task(4);
    let cfg = PromptConfig {
        epochs: 6,
        ..small_cfg(4)
    };
    let straight = finetune_loop(&model, &task, &cfg, &split(), 4).unwrap();
    let mut state = finetune_init(&model, &task, &cfg, &split(), 4).unwrap();
    finetune_epochs(&model, &task, &cfg, &split(), &mut state, 3).unwrap();
    finetune_epochs(&model, &task, &cfg, &split(), &mut state, 6).unwrap();
    let resumed = finish(&model, &task, &cfg, &split(), state).unwrap();
    assert_eq!(straight.last, resumed.last);
    assert_eq!(straight.loss_trace, resumed.loss_trace);
}

#[test]
fn rejects_bad_inputs() {
    let model = small_model(2);
    let task = node_task(4);
    let mut bad_split = split();
    bad_split.train.clear();
    assert!(matches!(
        finetune_loop(&model, &task, &small_cfg(4), &bad_split, 0),
        Err(TrainError::MissingLabels)
    ));
    assert!(finetune_loop(&model, &task, &small_cfg(5), &split(), 0).is_err());
    assert!(FinetuneTask::node(small_graph(1), LaplacianKind::Combinatorial, 13, 0).is_err());
    let mut s = split();
    s.test.push(40);
    assert!(finetune_loop(&model, &task, &small_cfg(4), &s, 0).is_err());
}
