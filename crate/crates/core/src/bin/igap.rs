use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use igap::analysis::{alignment_profile, embedding_profile, profile_csv};
use igap::error::{ConfigError, Error, Result};
use igap::gradcheck;
use igap::graph::{load_graph, load_graph_set, save_graph, Graph, GraphSet, Laplacian, LaplacianKind};
use igap::harness::{
    gen_sbm, gen_transfer_pair, make_splits, run_experiment, split_graph_set, Checkpoint, CheckpointKind,
    ExperimentConfig, FeatureModel, SbmConfig, Setting, SplitConfig,
};
use igap::model::{spatial_forward, ModelParams};
use igap::pretrain::{pretrain_epochs, Framework, PretrainData, PretrainState};
use igap::prompt::{
    finetune_epochs, finetune_init, finish, Ablation, FinetuneTask, PtMode, SampleSplit,
};
use igap::rng;
use igap::spectral::{decompose, Solver};

#[derive(Parser)]
#[command(name = "igap", version, about = "Spectral graph pre-training and inductive alignment prompts")]
struct Cli {
    /// Log level when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train a backbone with a contrastive framework.
    Pretrain(PretrainArgs),
    /// Fine-tune prompts on a frozen pre-trained backbone.
    Finetune(FinetuneArgs),
    /// Spectral alignment profile of a pre-trained model's embeddings.
    Eval(EvalArgs),
    /// Split a labeled graph into pre-training and fine-tuning graphs.
    Split(SplitArgs),
    /// Smallest Laplacian eigenpairs and their residuals.
    Spectrum(SpectrumArgs),
    /// Spectral alignment profile of a graph's own signals.
    SpectrumReport(ReportArgs),
    /// Generate a stochastic block model graph.
    GenSbm(GenSbmArgs),
    /// Generate a pre-training/fine-tuning pair with signal and structure gaps.
    GenPair(GenPairArgs),
    /// Finite-difference check of every trainable array.
    Gradcheck(GradcheckArgs),
    /// Full pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// Config without the cross-section checks, which depend on the graph in use.
    fn load(&self) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in &self.set {
            igap::harness::apply_override(&mut table, o)?;
        }
        Ok(toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, conflicts_with = "graphset", required_unless_present = "graphset")]
    graph: Option<PathBuf>,
    /// Directory with an `index.txt`.
    #[arg(long)]
    graphset: Option<PathBuf>,
    #[arg(long)]
    framework: Option<Framework>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss as `epoch,loss`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Continue from a pre-training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the checkpoint every N epochs as well as at the end (0: end only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pre-training checkpoint.
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long, conflicts_with = "graphset", required_unless_present = "graphset")]
    graph: Option<PathBuf>,
    #[arg(long)]
    graphset: Option<PathBuf>,
    /// `split.csv` from the `split` subcommand; otherwise nodes are split here.
    #[arg(long, conflicts_with = "graphset")]
    split: Option<PathBuf>,
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Prompt to drop: ps, pt, pl (end-to-end), probe, or none.
    #[arg(long)]
    ablate: Option<Ablation>,
    /// `dense` or `lowrank:R`.
    #[arg(long)]
    pt_mode: Option<PtMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Share of the graphs used for training with `--graphset`.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Fine-tuning checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validation metric per checkpoint as `epoch,loss,val,chosen`.
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Pre-training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Components to profile (default: all).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    graph: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "combinatorial")]
    laplacian: LapArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value = "inductive")]
    setting: Setting,
    #[arg(long, default_value_t = 20)]
    per_class_train: usize,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    class_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Receives `pretrain.graph`, `finetune.graph` and `split.csv`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LapArg {
    Combinatorial,
    SymNormalized,
}

impl From<LapArg> for LaplacianKind {
    fn from(l: LapArg) -> Self {
        match l {
            LapArg::Combinatorial => LaplacianKind::Combinatorial,
            LapArg::SymNormalized => LaplacianKind::SymNormalized,
        }
    }
}

#[derive(Args)]
struct SpectrumArgs {
    graph: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, conflicts_with = "lanczos")]
    dense: bool,
    #[arg(long)]
    lanczos: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "combinatorial")]
    laplacian: LapArg,
    /// Binary dump of the eigenpairs in checkpoint format.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct SbmArgs {
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 100)]
    nodes_per_block: usize,
    #[arg(long, default_value_t = 0.1)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Spread of the block means.
    #[arg(long, default_value_t = 1.3)]
    mean_scale: f64,
    /// Within-block standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SbmArgs {
    fn config(&self) -> SbmConfig {
        SbmConfig {
            blocks: self.blocks,
            nodes_per_block: self.nodes_per_block,
            p_in: self.p_in,
            p_out: self.p_out,
            features: FeatureModel {
                dim: self.dim,
                mean_scale: self.mean_scale,
                sigma: self.sigma,
            },
        }
    }
}

#[derive(Args)]
struct GenSbmArgs {
    #[command(flatten)]
    sbm: SbmArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenPairArgs {
    #[command(flatten)]
    sbm: SbmArgs,
    /// Feature mean shift in units of σ.
    #[arg(long, default_value_t = 1.5)]
    signal_shift: f64,
    #[arg(long, default_value_t = 0.3)]
    structure_shift: f64,
    /// Receives `pretrain.graph` and `finetune.graph`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Coordinates sampled per array.
    #[arg(long, default_value_t = 20)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Receives `config.toml`, `summary.csv`, `checkpoints.csv` and `pretrain_loss.csv`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(f) = a.framework {
        cfg.pretrain.framework = f;
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.pretrain.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (graph, set): (Option<Graph>, Option<GraphSet>) = match (&a.graph, &a.graphset) {
        (Some(g), _) => (Some(load_graph(g)?), None),
        (None, Some(d)) => (None, Some(load_graph_set(d)?)),
        (None, None) => unreachable!("clap requires one input"),
    };
    let data: PretrainData<'_> = match (&graph, &set) {
        (Some(g), _) => g.into(),
        (None, Some(s)) => s.into(),
        (None, None) => unreachable!(),
    };
    cfg.model.input_dim = data.signal_dim();
    log::info!("resolved config:\n{}", cfg.to_toml());
    // Extending a run changes only the epoch budget, which the hash ignores.
    let hash = {
        let mut c = cfg.clone();
        c.pretrain.epochs = 0;
        c.hash()
    };
    let mut state = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_hash(hash);
            ck.pretrain_state()?
        }
        None => PretrainState::new(ModelParams::init(&cfg.model, rng::derive_seed(cfg.seed, "cli-init", 0))),
    };
    let train_seed = rng::derive_seed(cfg.seed, "cli-pretrain", 0);
    let step = if a.checkpoint_every == 0 { cfg.pretrain.epochs.max(1) } else { a.checkpoint_every };
    loop {
        let until = (state.epoch() + step).min(cfg.pretrain.epochs);
        pretrain_epochs(data, &mut state, &cfg.pretrain, train_seed, until)?;
        Checkpoint::from_pretrain(&state, cfg.seed, hash).save(&a.out)?;
        if state.epoch() >= cfg.pretrain.epochs {
            break;
        }
    }
    if let Some(p) = &a.loss_csv {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in state.loss_trace.iter().enumerate() {
            let _ = writeln!(s, "{e},{l}");
        }
        fs::write(p, s)?;
    }
    println!(
        "epochs={} final_loss={:.6}",
        state.epoch(),
        state.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Reads `role,index` rows; roles other than train/val/test are ignored.
fn read_split(path: &Path) -> Result<SampleSplit> {
    let text = fs::read_to_string(path)?;
    let mut s = SampleSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Config(ConfigError::Invalid(format!("{}:{}: expected role,index", path.display(), i + 1)));
        let (role, idx) = line.split_once(',').ok_or_else(bad)?;
        let idx: usize = idx.trim().parse().map_err(|_| bad())?;
        match role.trim() {
            "train" => s.train.push(idx),
            "val" => s.val.push(idx),
            "test" => s.test.push(idx),
            _ => {}
        }
    }
    Ok(s)
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    let p = &mut cfg.prompt;
    if let Some(l) = a.l {
        p.l = l;
    }
    if let Some(k) = a.k {
        p.k = k;
    }
    if let Some(lr) = a.lr {
        p.lr = lr;
    }
    if let Some(e) = a.epochs {
        p.epochs = e;
    }
    if let Some(ab) = a.ablate {
        p.ablation = ab;
    }
    if let Some(m) = a.pt_mode {
        p.pt_mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ck = Checkpoint::load(&a.pretrained)?;
    if ck.kind != CheckpointKind::Pretrain {
        return Err(ConfigError::Invalid("--pretrained needs a pre-training checkpoint".into()).into());
    }
    let model = ck.model_params()?.frozen();
    let basis_seed = rng::derive_seed(cfg.seed, "cli-basis", 0);
    let split_seed = rng::derive_seed(cfg.seed, "cli-split", 0);
    let (task, split) = match (&a.graph, &a.graphset) {
        (Some(path), _) => {
            let g = load_graph(path)?;
            let split = match &a.split {
                Some(sp) => read_split(sp)?,
                None => {
                    let scfg = SplitConfig {
                        setting: Setting::Transductive,
                        ..cfg.split.clone()
                    };
                    let s = make_splits(&g, &scfg, split_seed)?.split;
                    SampleSplit {
                        train: s.train,
                        val: s.val,
                        test: s.test,
                    }
                }
            };
            (FinetuneTask::node(g, model.laplacian, cfg.prompt.k, basis_seed)?, split)
        }
        (None, Some(dir)) => {
            let set = load_graph_set(dir)?;
            let (train, val, test) = split_graph_set(&set, a.train_fraction, cfg.split.val_fraction, split_seed)?;
            (
                FinetuneTask::graphs(&set, model.laplacian, cfg.prompt.k, basis_seed)?,
                SampleSplit { train, val, test },
            )
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    log::info!("resolved config:\n{}", cfg.to_toml());
    let ft_seed = rng::derive_seed(cfg.seed, "cli-finetune", 0);
    let mut state = finetune_init(&model, &task, &cfg.prompt, &split, ft_seed)?;
    finetune_epochs(&model, &task, &cfg.prompt, &split, &mut state, cfg.prompt.epochs)?;
    if let Some(out) = &a.out {
        let mut c = Checkpoint::from_finetune(&state, &model, cfg.seed, cfg.hash());
        c.meta.insert("prompt.L".into(), cfg.prompt.l.to_string());
        c.meta.insert("prompt.K".into(), cfg.prompt.k.to_string());
        c.meta.insert("prompt.ablation".into(), cfg.prompt.ablation.to_string());
        c.save(out)?;
    }
    let out = finish(&model, &task, &cfg.prompt, &split, state)?;
    if let Some(p) = &a.metrics_csv {
        let mut s = String::from("epoch,loss,val,chosen\n");
        for c in &out.checkpoints {
            let loss = c.epoch.checked_sub(1).and_then(|e| out.loss_trace.get(e)).copied().unwrap_or(f64::NAN);
            let _ = writeln!(s, "{},{},{},{}", c.epoch, loss, c.val, u8::from(c.epoch == out.best_epoch));
        }
        fs::write(p, s)?;
    }
    let metric = if task.uses_auc() { "roc_auc" } else { "accuracy" };
    println!(
        "ablation={} metric={metric} best_epoch={} val={:.6} test={:.6}",
        cfg.prompt.ablation, out.best_epoch, out.best_val, out.test
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model_params()?;
    let g = load_graph(&a.graph)?;
    let lap = Laplacian::new(&g, model.laplacian);
    let basis = decompose(&lap, a.k, Solver::Auto, a.seed)?;
    let z = spatial_forward(&lap, &model, g.signals())?;
    let profile = embedding_profile(&basis, &z)?;
    eprintln!("spearman_rho={:.6} snr_rho={:.6}", profile.spearman_rho, profile.snr_rho);
    write_out(a.out.as_deref(), &profile_csv(&profile))
}

fn spectrum_report(a: &ReportArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let lap = Laplacian::new(&g, a.laplacian.into());
    let basis = decompose(&lap, a.k, Solver::Auto, a.seed)?;
    let profile = alignment_profile(&basis, g.signals().t())?;
    eprintln!("spearman_rho={:.6} snr_rho={:.6}", profile.spearman_rho, profile.snr_rho);
    write_out(a.out.as_deref(), &profile_csv(&profile))
}

fn split(a: &SplitArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let cfg = SplitConfig {
        setting: a.setting,
        per_class_train: a.per_class_train,
        val_fraction: a.val_fraction,
        finetune_class_fraction: a.class_fraction,
    };
    let s = make_splits(&g, &cfg, a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    save_graph(&s.pretrain, a.out_dir.join("pretrain.graph"))?;
    save_graph(&s.finetune, a.out_dir.join("finetune.graph"))?;
    let mut csv = String::from("role,index\n");
    let d = &s.split;
    for (role, ids) in [
        ("train", &d.train),
        ("val", &d.val),
        ("test", &d.test),
        ("pretrain_source", &d.pretrain_ids),
        ("finetune_source", &d.finetune_ids),
    ] {
        for i in ids {
            let _ = writeln!(csv, "{role},{i}");
        }
    }
    fs::write(a.out_dir.join("split.csv"), csv)?;
    println!(
        "setting={} pretrain_nodes={} finetune_nodes={} train={} val={} test={}",
        a.setting.name(),
        d.pretrain_ids.len(),
        d.finetune_ids.len(),
        d.train.len(),
        d.val.len(),
        d.test.len()
    );
    Ok(())
}

fn spectrum(a: &SpectrumArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let lap = Laplacian::new(&g, a.laplacian.into());
    let solver = match (a.dense, a.lanczos) {
        (true, _) => Solver::Dense,
        (_, true) => Solver::Lanczos,
        _ => Solver::Auto,
    };
    let basis = decompose(&lap, a.k, solver, a.seed)?;
    let res = basis.residuals(&lap);
    let mut out = String::from("index lambda residual\n");
    for (i, (l, r)) in basis.eigenvalues().iter().zip(res.iter()).enumerate() {
        let _ = writeln!(out, "{i} {l:.12e} {r:.3e}");
    }
    print!("{out}");
    if let Some(p) = &a.dump {
        Checkpoint::from_basis(&basis, a.seed).save(p)?;
    }
    Ok(())
}

fn gen_sbm_cmd(a: &GenSbmArgs) -> Result<()> {
    let g = gen_sbm(&a.sbm.config(), a.sbm.seed)?;
    save_graph(&g, &a.out)?;
    let (components, _) = g.connected_components();
    println!("nodes={} edges={} components={components}", g.n_nodes(), g.n_edges());
    if components > 1 {
        log::warn!("generated graph is disconnected ({components} components)");
    }
    Ok(())
}

fn gen_pair_cmd(a: &GenPairArgs) -> Result<()> {
    let pair = gen_transfer_pair(&a.sbm.config(), a.signal_shift, a.structure_shift, a.sbm.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    save_graph(&pair.pretrain, a.out_dir.join("pretrain.graph"))?;
    save_graph(&pair.finetune, a.out_dir.join("finetune.graph"))?;
    println!(
        "pretrain_edges={} finetune_edges={}",
        pair.pretrain.n_edges(),
        pair.finetune.n_edges()
    );
    Ok(())
}

/// Returns whether every array passed.
fn gradcheck_cmd(a: &GradcheckArgs) -> Result<bool> {
    let checks = gradcheck::all_checks(a.coords, a.seed)?;
    println!("array coords max_rel_err status");
    let mut ok = true;
    for c in &checks {
        let pass = c.passes(a.tol);
        ok &= pass;
        println!("{} {} {:.3e} {}", c.name, c.coords, c.max_rel_err, if pass { "pass" } else { "FAIL" });
    }
    Ok(ok)
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    cfg.validate()?;
    let report = run_experiment(&cfg, a.out_dir.as_deref())?;
    if a.out_dir.is_none() {
        print!("{}", report.summary_csv());
    }
    for (ablation, mean) in report.mean_test_by_ablation() {
        eprintln!("{ablation}: mean test {mean:.4}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    let result = match &cli.cmd {
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Finetune(a) => finetune(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Split(a) => split(a),
        Cmd::Spectrum(a) => spectrum(a),
        Cmd::SpectrumReport(a) => spectrum_report(a),
        Cmd::GenSbm(a) => gen_sbm_cmd(a),
        Cmd::GenPair(a) => gen_pair_cmd(a),
        Cmd::Gradcheck(a) => match gradcheck_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Cmd::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
