use std::path::Path;
use std::process::Command;

use igap::graph::{load_graph, save_graph, LaplacianKind};
use igap::harness::{gen_sbm, make_splits, Checkpoint, FeatureModel, SbmConfig, Setting, SplitConfig};
use igap::model::{ModelConfig, ModelParams};
use igap::pretrain::{pretrain_epochs, pretrain_loop, PretrainConfig, PretrainState};
use igap::prompt::{finetune_epochs, finetune_init, finetune_loop, finish, FinetuneTask, PromptConfig, SampleSplit};

fn sbm(seed: u64) -> igap::Graph {
    let cfg = SbmConfig {
        blocks: 4,
        nodes_per_block: 15,
        p_in: 0.4,
        p_out: 0.03,
        features: FeatureModel {
            dim: 6,
            mean_scale: 1.3,
            sigma: 1.0,
        },
    };
    gen_sbm(&cfg, seed).unwrap()
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        hidden_dim: 8,
        head_hidden: 8,
        head_out: 8,
        ..ModelConfig::default()
    }
}

fn prompt_cfg() -> PromptConfig {
    PromptConfig {
        l: 4,
        k: 12,
        lr: 1e-2,
        epochs: 12,
        checkpoint_every: 3,
        head_hidden: 8,
        head_out: 8,
        ..PromptConfig::default()
    }
}

fn split_for(g: &igap::Graph) -> (igap::Graph, SampleSplit) {
    let cfg = SplitConfig {
        setting: Setting::Transductive,
        per_class_train: 4,
        ..SplitConfig::default()
    };
    let s = make_splits(g, &cfg, 3).unwrap();
    (
        s.finetune,
        SampleSplit {
            train: s.split.train,
            val: s.split.val,
            test: s.split.test,
        },
    )
}

#[test]
fn pretrain_resume_through_a_file_matches_a_straight_run() {
    let g = sbm(1);
    let cfg = PretrainConfig {
        epochs: 8,
        batch_size: 4,
        ..PretrainConfig::default()
    };
    let init = ModelParams::init(&model_cfg(), 2);
    let straight = pretrain_loop((&g).into(), init.clone(), &cfg, 5).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut state = PretrainState::new(init);
    pretrain_epochs((&g).into(), &mut state, &cfg, 5, 4).unwrap();
    Checkpoint::from_pretrain(&state, 5, 0).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), bytes, "save -> load -> save is byte-identical");
    let mut resumed = loaded.pretrain_state().unwrap();
    assert_eq!(resumed, state);
    pretrain_epochs((&g).into(), &mut resumed, &cfg, 5, 8).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn finetune_resume_through_a_file_matches_a_straight_run() {
    let g = sbm(4);
    let model = ModelParams::init(&model_cfg(), 6).frozen();
    let (ft, split) = split_for(&g);
    let cfg = prompt_cfg();
    let task = FinetuneTask::node(ft, LaplacianKind::Combinatorial, cfg.k, 1).unwrap();
    let straight = finetune_loop(&model, &task, &cfg, &split, 9).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ft.ckpt");
    let mut state = finetune_init(&model, &task, &cfg, &split, 9).unwrap();
    finetune_epochs(&model, &task, &cfg, &split, &mut state, 6).unwrap();
    Checkpoint::from_finetune(&state, &model, 9, 0).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.model_params().unwrap(), model);
    let mut resumed = loaded.finetune_state().unwrap();
    assert_eq!(resumed, state);
    finetune_epochs(&model, &task, &cfg, &split, &mut resumed, cfg.epochs).unwrap();
    let out = finish(&model, &task, &cfg, &split, resumed).unwrap();
    assert_eq!(out, straight);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let g = sbm(2);
    let model = ModelParams::init(&model_cfg(), 3);
    let pcfg = PretrainConfig {
        epochs: 3,
        lr: 0.0,
        batch_size: 4,
        ..PretrainConfig::default()
    };
    let s = pretrain_loop((&g).into(), model.clone(), &pcfg, 1).unwrap();
    assert_eq!(s.params, model);

    let frozen = model.frozen();
    let (ft, split) = split_for(&g);
    let cfg = PromptConfig { lr: 0.0, ..prompt_cfg() };
    let task = FinetuneTask::node(ft, LaplacianKind::Combinatorial, cfg.k, 1).unwrap();
    let init = finetune_init(&frozen, &task, &cfg, &split, 2).unwrap();
    let out = finetune_loop(&frozen, &task, &cfg, &split, 2).unwrap();
    assert_eq!(out.last, init.prompts);
}

fn igap(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_igap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = igap(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let graph = d.join("g.graph");
    ok(&["gen-sbm", "--blocks", "4", "--nodes-per-block", "20", "--p-in", "0.3", "--p-out", "0.02", "--dim", "6", "--out", s(&graph)]);
    let g = load_graph(&graph).unwrap();
    assert_eq!(g.n_nodes(), 80);

    let table = ok(&["spectrum", s(&graph), "--k", "6", "--lanczos", "--dump", s(&d.join("eig.bin"))]);
    assert_eq!(table.lines().next(), Some("index lambda residual"));
    assert_eq!(table.lines().count(), 7);
    let basis = Checkpoint::load(d.join("eig.bin")).unwrap().basis().unwrap();
    assert_eq!(basis.k(), 6);

    let split_dir = d.join("split");
    ok(&["split", "--graph", s(&graph), "--setting", "inductive", "--per-class-train", "4", "--seed", "1", "--out-dir", s(&split_dir)]);
    let ckpt = d.join("pt.ckpt");
    let small = ["--set", "model.hidden_dim=8", "--set", "model.head_hidden=8", "--set", "model.head_out=8"];
    let pre = split_dir.join("pretrain.graph");
    let loss = d.join("loss.csv");
    let mut a = vec!["pretrain", "--graph", s(&pre), "--epochs", "3", "--framework", "linkpred", "--out", s(&ckpt), "--loss-csv", s(&loss)];
    a.extend(small);
    ok(&a);
    assert_eq!(std::fs::read_to_string(&loss).unwrap().lines().count(), 4);

    let metrics = d.join("m.csv");
    let fine = split_dir.join("finetune.graph");
    let split_csv = split_dir.join("split.csv");
    let line = ok(&[
        "finetune", "--pretrained", s(&ckpt), "--graph", s(&fine), "--split", s(&split_csv), "--L", "4", "--K", "10",
        "--epochs", "10", "--ablate", "pt", "--seed", "2", "--metrics-csv", s(&metrics), "--out", s(&d.join("ft.ckpt")),
        "--set", "prompt.head_hidden=8", "--set", "prompt.head_out=8",
    ]);
    assert!(line.starts_with("ablation=no-pt metric=accuracy"), "{line}");
    let m = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(m.lines().next(), Some("epoch,loss,val,chosen"));
    assert_eq!(m.lines().count(), 1 + 2);
    assert_eq!(m.lines().filter(|l| l.ends_with(",1")).count(), 1);

    let csv = ok(&["eval", "--checkpoint", s(&ckpt), "--graph", s(&graph), "--k", "5"]);
    assert_eq!(csv.lines().next(), Some("component,lambda,alignment,sp_snr"));
    assert_eq!(csv.lines().count(), 6);
    let report = ok(&["spectrum-report", s(&graph)]);
    assert_eq!(report.lines().count(), 81);

    let run_dir = d.join("run");
    ok(&[
        "run", "--set", "pretrain.epochs=2", "--set", "prompt.epochs=2", "--set", "data.sbm.nodes_per_block=20",
        "--set", "data.sbm.features.dim=6", "--set", "model.input_dim=6", "--set", "model.hidden_dim=8",
        "--set", "sweep.L=[4, 8]", "--out-dir", s(&run_dir),
    ]);
    let summary = std::fs::read_to_string(run_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(igap(&["run", "--set", "prompt.L=0"]).status.code(), Some(2));
    assert_eq!(igap(&["run", "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(igap(&["spectrum", s(&d.join("missing.graph"))]).status.code(), Some(3));
    let bad = d.join("bad.graph");
    std::fs::write(&bad, "2 1 1 0\n0 5\n1.0\n2.0\n").unwrap();
    assert_eq!(igap(&["spectrum", s(&bad)]).status.code(), Some(4));
    let junk = d.join("junk.ckpt");
    std::fs::write(&junk, b"NOPE").unwrap();
    let g = d.join("g.graph");
    save_graph(&sbm(0), &g).unwrap();
    assert_eq!(igap(&["eval", "--checkpoint", s(&junk), "--graph", s(&g)]).status.code(), Some(10));
    let o = igap(&["split", "--graph", s(&g), "--per-class-train", "100", "--out-dir", s(&d.join("x"))]);
    assert_eq!(o.status.code(), Some(9));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    let o = igap(&["gradcheck", "--coords", "3"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).lines().skip(1).all(|l| l.ends_with(" pass")));
}
