//! The `salb` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use salb_core::gradcheck::{check_gradients, LossSelector};
use salb_core::harness::{
    ablation_points, beta_points, gamma_points, logit_profile, retrieval_eval, run_point, Direction, ResultRow,
    SweepPoint,
};
use salb_core::objectives::{Divergence, SupervisionForm};
use salb_core::synthgen::{generate, NoiseSigma, SynthDataset};
use salb_core::trainer::{resume, RoiAggregation, TrainState};
use salb_core::Seed;
use serde::de::DeserializeOwned;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_file};
use crate::results::{profile_csv, step_log_csv, write_results};

/// Parses a value by its JSON/serde name, e.g. `symmetric_kl`.
fn serde_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "salb", version, about = "Soft cross-modal alignment experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    GenData(GenData),
    /// Train encoders and write a checkpoint
    Train(Train),
    /// Evaluate a checkpoint on the held-out split
    Eval(Eval),
    /// Run the five-variant ablation suite
    Ablate(Sweep),
    /// Train and evaluate across beta values
    SweepBeta(Sweep),
    /// Train and evaluate across gamma values on the mixed-guidance objective
    SweepGamma(Sweep),
    /// Compare analytic gradients with finite differences
    GradCheck(GradCheck),
    /// Mean sorted probability profile of a checkpoint
    LogitProfile(Profile),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for data generation, training and gradient checks [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SynthFlags {
    /// Number of samples [default: 2000]
    #[arg(long)]
    n_samples: Option<usize>,
    /// Number of latent concepts [default: 20]
    #[arg(long)]
    n_concepts: Option<usize>,
    /// Latent dimension [default: 32]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Concepts per sample [default: 3]
    #[arg(long)]
    concepts_per_sample: Option<usize>,
    /// Image feature dimension [default: 64]
    #[arg(long)]
    d_image: Option<usize>,
    /// Text feature dimension [default: 64]
    #[arg(long)]
    d_text: Option<usize>,
    /// ROI feature dimension [default: 2052]
    #[arg(long)]
    d_roi: Option<usize>,
    /// Tag feature dimension [default: 32]
    #[arg(long)]
    d_tag: Option<usize>,
    /// ROI features per image [default: 10]
    #[arg(long)]
    rois_per_image: Option<usize>,
    /// Fraction of pairs whose text describes an unrelated sample [default: 0.1]
    #[arg(long)]
    faulty_positive_rate: Option<f64>,
    /// Same noise standard deviation for every view [default: image 0.5, text 0.5, roi 0.5, tag 0.25]
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Optimizer steps [default: 2000]
    #[arg(long)]
    steps: Option<u64>,
    /// Batch size N [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: 0.002]
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of steps spent in linear warmup [default: 0.1]
    #[arg(long)]
    warmup_fraction: Option<f64>,
    /// AdamW decoupled weight decay [default: 0.2]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// ROI pooling: mean, max, min or attention [default: attention]
    #[arg(long, value_parser = serde_name::<RoiAggregation>)]
    roi_aggregation: Option<RoiAggregation>,
    /// Hidden width of every head [default: 64]
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Shared embedding dimension [default: 32]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Attention key dimension [default: 16]
    #[arg(long)]
    key_dim: Option<usize>,
    /// Trailing samples held out for evaluation [default: 200]
    #[arg(long)]
    holdout: Option<usize>,
    /// Global gradient-norm clip [default: off]
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Training objective: clip, soft, soft_re, total or mixed_gamma [default: total]
    #[arg(long, value_parser = serde_name::<LossSelector>)]
    objective: Option<LossSelector>,
}

#[derive(Debug, Args)]
struct LossFlags {
    /// Initial temperature tau [default: 0.07]
    #[arg(long)]
    tau: Option<f64>,
    /// Label-smoothing strength alpha [default: 0.2]
    #[arg(long)]
    alpha: Option<f64>,
    /// Guidance weight beta in the mixed targets [default: 0.3]
    #[arg(long)]
    beta: Option<f64>,
    /// ROI/tag share gamma of the mixed-guidance objective [default: 1.0]
    #[arg(long)]
    gamma: Option<f64>,
    /// Weight lambda of the relation-enhanced soft term [default: 1.0]
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight mu of the CLIP term [default: 0.5]
    #[arg(long)]
    mu: Option<f64>,
    /// Weight of the plain soft term [default: 1.0]
    #[arg(long)]
    soft_weight: Option<f64>,
    /// CLIP term uses label-smoothed targets [default: false]
    #[arg(long)]
    label_smoothing: Option<bool>,
    /// forward_kl, symmetric_kl or js [default: symmetric_kl]
    #[arg(long, value_parser = serde_name::<Divergence>)]
    divergence: Option<Divergence>,
    /// R2R_A2A, A2A_R2R, R2A_A2R or A2R_R2A [default: R2R_A2A]
    #[arg(long, value_parser = serde_name::<SupervisionForm>)]
    supervision_form: Option<SupervisionForm>,
    /// Detach the guidance distributions [default: true]
    #[arg(long)]
    stop_gradient_targets: Option<bool>,
    /// One temperature for all distributions [default: true]
    #[arg(long)]
    shared_temperature: Option<bool>,
}

#[derive(Debug, Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    synth: SynthFlags,
    /// Output dataset file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    loss: LossFlags,
    /// Dataset file
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output checkpoint file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint with its stored configuration
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    /// Stop after this many total steps [default: run to --steps]
    #[arg(long)]
    stop_at: Option<u64>,
    /// Per-step loss log as CSV
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    /// Dataset file
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output CSV; a JSON copy is written alongside
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Sweep {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    loss: LossFlags,
    /// Dataset file
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output CSV; a JSON copy is written alongside
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seeds for ablate [default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Values for sweep-beta [default: 0,0.1,...,1]
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// Values for sweep-gamma [default: 0,0.25,0.5,0.75,1]
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    /// Sweep points trained concurrently
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct GradCheck {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss_flags: LossFlags,
    /// clip, soft, soft_re, total or mixed_gamma [default: total]
    #[arg(long, value_parser = serde_name::<LossSelector>)]
    loss: Option<LossSelector>,
    /// Batch size [default: 4]
    #[arg(long)]
    n: Option<usize>,
    /// Embedding dimension [default: 8]
    #[arg(long)]
    d: Option<usize>,
    /// Pass threshold on relative (or tiny-gradient absolute) error [default: 1e-5]
    #[arg(long)]
    tolerance: Option<f64>,
    /// JSON report file [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Profile {
    #[command(flatten)]
    common: Common,
    /// Dataset file
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// image_to_text or text_to_image [default: image_to_text]
    #[arg(long, value_parser = serde_name::<Direction>)]
    direction: Option<Direction>,
    /// Output CSV (position, mean_probability)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) -> bool {
    value.map(|v| *slot = v).is_some()
}

impl SynthFlags {
    fn apply(self, c: &mut RunConfig) {
        let s = &mut c.synth;
        set(&mut s.n_samples, self.n_samples);
        set(&mut s.n_concepts, self.n_concepts);
        set(&mut s.latent_dim, self.latent_dim);
        set(&mut s.concepts_per_sample, self.concepts_per_sample);
        set(&mut s.d_image, self.d_image);
        set(&mut s.d_text, self.d_text);
        set(&mut s.d_roi, self.d_roi);
        set(&mut s.d_tag, self.d_tag);
        set(&mut s.rois_per_image, self.rois_per_image);
        set(&mut s.faulty_positive_rate, self.faulty_positive_rate);
        set(&mut s.noise_sigma, self.noise_sigma.map(NoiseSigma::uniform));
    }
}

impl TrainFlags {
    /// Applies the flags and reports whether any was given.
    fn apply(self, c: &mut RunConfig) -> bool {
        let t = &mut c.train;
        [
            set(&mut t.steps, self.steps),
            set(&mut t.batch_size, self.batch_size),
            set(&mut t.learning_rate, self.lr),
            set(&mut t.warmup_fraction, self.warmup_fraction),
            set(&mut t.weight_decay, self.weight_decay),
            set(&mut t.roi_aggregation, self.roi_aggregation),
            set(&mut t.hidden_dim, self.hidden_dim),
            set(&mut t.embed_dim, self.embed_dim),
            set(&mut t.key_dim, self.key_dim),
            set(&mut t.holdout, self.holdout),
            set(&mut t.grad_clip, self.grad_clip.map(Some)),
            set(&mut t.objective, self.objective),
        ]
        .contains(&true)
    }
}

impl LossFlags {
    fn apply(self, c: &mut RunConfig) -> bool {
        let l = &mut c.train.loss;
        [
            set(&mut l.tau_init, self.tau),
            set(&mut l.alpha, self.alpha),
            set(&mut l.beta, self.beta),
            set(&mut l.gamma, self.gamma),
            set(&mut l.lambda_re, self.lambda),
            set(&mut l.mu_clip, self.mu),
            set(&mut l.soft_weight, self.soft_weight),
            set(&mut l.label_smoothing, self.label_smoothing),
            set(&mut l.divergence, self.divergence),
            set(&mut l.supervision_form, self.supervision_form),
            set(&mut l.stop_gradient_targets, self.stop_gradient_targets),
            set(&mut l.shared_temperature, self.shared_temperature),
        ]
        .contains(&true)
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.override_seed(seed);
        }
        Ok(c)
    }
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone()).ok_or_else(|| Error::Config(format!("--{name} is required")))
}

fn check_output(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

fn check_results_output(path: &Path, force: bool) -> Result<()> {
    check_output(path, force)?;
    check_output(&path.with_extension("json"), force)
}

fn matching_checkpoint(state: &TrainState, dataset: &SynthDataset) -> Result<()> {
    if state.config.dims(dataset) != state.layout.dims {
        return Err(Error::Config("checkpoint dimensions do not match the dataset".into()));
    }
    Ok(())
}

fn eval_indices(state: &TrainState, dataset: &SynthDataset) -> Result<Vec<usize>> {
    Ok(state.config.split(dataset.len())?.1.collect())
}

fn gen_data(a: GenData) -> Result<()> {
    let mut c = a.common.load()?;
    a.synth.apply(&mut c);
    c.synth.validate()?;
    let out = required(a.out, &c.out, "out")?;
    check_output(&out, a.common.force)?;
    let d = generate(&c.synth)?;
    save_dataset(&out, &d, a.common.force)?;
    info!("wrote {} samples to {}", d.len(), out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut c = a.common.load()?;
    let overridden = a.train.apply(&mut c) | a.loss.apply(&mut c);
    let data = required(a.data, &c.data, "data")?;
    let out = required(a.out, &c.out, "out")?;
    check_output(&out, a.common.force)?;
    if let Some(m) = &a.metrics {
        check_output(m, a.common.force)?;
    }
    if a.resume.is_some() {
        if overridden || a.common.config.is_some() || a.common.seed.is_some() {
            return Err(Error::Config("--resume uses the checkpoint's configuration; drop the other settings".into()));
        }
    } else {
        c.validate()?;
    }
    let (dataset, hash) = load_dataset(&data)?;
    let state = match &a.resume {
        Some(path) => load_checkpoint(path)?,
        None => TrainState::init(&dataset, &c.train)?,
    };
    let until = a.stop_at.unwrap_or(state.config.steps);
    info!("training on {} ({}) from step {} to {}", data.display(), &hash[..12], state.step(), until.min(state.config.steps));
    let (state, log) = resume(state, &dataset, until)?;
    for l in log.iter().filter(|l| l.step % 100 == 0) {
        info!("step {} lr {:.3e} tau {:.4} loss {:.5}", l.step, l.lr, l.tau, l.loss);
    }
    save_checkpoint(&out, &state, a.common.force)?;
    if let Some(m) = &a.metrics {
        write_file(m, &step_log_csv(&log)?, a.common.force)?;
    }
    info!("wrote checkpoint at step {} to {}", state.step(), out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let c = a.common.load()?;
    let data = required(a.data, &c.data, "data")?;
    let ckpt = required(a.checkpoint, &c.checkpoint, "checkpoint")?;
    let out = required(a.out, &c.out, "out")?;
    check_results_output(&out, a.common.force)?;
    let (dataset, hash) = load_dataset(&data)?;
    let state = load_checkpoint(&ckpt)?;
    matching_checkpoint(&state, &dataset)?;
    let r = retrieval_eval(&state, &dataset, &eval_indices(&state, &dataset)?)?;
    let point = SweepPoint { variant: "eval".into(), config: state.config.clone() };
    let loss = salb_core::trainer::batch_loss(&state, &dataset, &eval_indices(&state, &dataset)?)?;
    write_results(&out, &[ResultRow::new(&point, &hash, r, loss)], &[], a.common.force)
}

fn run_sweep(dataset: &SynthDataset, points: &[SweepPoint], hash: &str, jobs: usize) -> Result<Vec<ResultRow>> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<Result<ResultRow>> = pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let o = run_point(dataset, p, hash)?;
                info!("{} beta={} gamma={} seed={}: spearman {:.4}", p.variant, o.row.beta, o.row.gamma, o.row.seed, o.row.spearman);
                Ok(o.row)
            })
            .collect()
    });
    rows.into_iter().collect()
}

#[derive(Clone, Copy)]
enum SweepKind {
    Ablate,
    Beta,
    Gamma,
}

fn sweep(a: Sweep, kind: SweepKind) -> Result<()> {
    let mut c = a.common.load()?;
    a.train.apply(&mut c);
    a.loss.apply(&mut c);
    set(&mut c.sweep.seeds, a.seeds);
    set(&mut c.sweep.betas, a.betas);
    set(&mut c.sweep.gammas, a.gammas);
    let data = required(a.data, &c.data, "data")?;
    let out = required(a.out, &c.out, "out")?;
    check_results_output(&out, a.common.force)?;
    let mut skipped = Vec::new();
    let points = match kind {
        SweepKind::Ablate => {
            c.validate()?;
            ablation_points(&c.train, &c.sweep.seeds.iter().map(|&s| Seed(s)).collect::<Vec<_>>())?
        }
        SweepKind::Beta => {
            let (points, skip) = beta_points(&c.train, &c.sweep.betas)?;
            for s in &skip {
                warn!("skipped {s}");
            }
            skipped = skip;
            points
        }
        SweepKind::Gamma => gamma_points(&c.train, &c.sweep.gammas)?,
    };
    let (dataset, hash) = load_dataset(&data)?;
    for p in &points {
        p.config.split(dataset.len())?;
    }
    let rows = run_sweep(&dataset, &points, &hash, a.jobs)?;
    write_results(&out, &rows, &skipped, a.common.force)
}

fn grad_check(a: GradCheck) -> Result<()> {
    let mut c = a.common.load()?;
    a.loss_flags.apply(&mut c);
    let g = &mut c.grad_check;
    set(&mut g.loss, a.loss);
    set(&mut g.n, a.n);
    set(&mut g.d, a.d);
    set(&mut g.tolerance, a.tolerance);
    c.validate()?;
    if let Some(out) = &a.out {
        check_output(out, a.common.force)?;
    }
    let g = &c.grad_check;
    let report = check_gradients(g.loss, Seed(g.seed), g.n, g.d, &c.train.loss, g.tolerance);
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    match &a.out {
        Some(out) => write_file(out, &json, a.common.force)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&json).map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    if report.pass {
        Ok(())
    } else {
        Err(Error::GradCheckFailed)
    }
}

fn profile(a: Profile) -> Result<()> {
    let c = a.common.load()?;
    let data = required(a.data, &c.data, "data")?;
    let ckpt = required(a.checkpoint, &c.checkpoint, "checkpoint")?;
    let out = required(a.out, &c.out, "out")?;
    check_output(&out, a.common.force)?;
    let (dataset, _) = load_dataset(&data)?;
    let state = load_checkpoint(&ckpt)?;
    matching_checkpoint(&state, &dataset)?;
    let p = logit_profile(&state, &dataset, &eval_indices(&state, &dataset)?, a.direction.unwrap_or(Direction::ImageToText))?;
    info!("top1 {:.4} top2-10 {:.4} top11-50 {:.4}", p.top1, p.top2_10, p.top11_50);
    write_file(&out, &profile_csv(&p)?, a.common.force)
}

fn init_logging() {
    let level = std::env::var("SALB_LOG").unwrap_or_else(|_| "info".into());
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => sweep(a, SweepKind::Ablate),
        Command::SweepBeta(a) => sweep(a, SweepKind::Beta),
        Command::SweepGamma(a) => sweep(a, SweepKind::Gamma),
        Command::GradCheck(a) => grad_check(a),
        Command::LogitProfile(a) => profile(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn help(sub: &str) -> String {
        let mut cmd = Cli::command();
        cmd.build();
        cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string()
    }

    #[test]
    fn help_lists_default_constants() {
        let text = help("train");
        for needle in ["--tau", "0.07", "--alpha", "0.2", "--beta", "0.3", "--lambda", "1.0", "--mu", "0.5", "--seed", "--force"] {
            assert!(text.contains(needle), "{needle} missing from train help");
        }
        let d = salb_core::LossConfig::default();
        assert_eq!((d.tau_init, d.alpha, d.beta, d.lambda_re, d.mu_clip), (0.07, 0.2, 0.3, 1.0, 0.5));
    }

    #[test]
    fn every_flag_documents_its_default() {
        let mut cmd = Cli::command();
        cmd.build();
        for sub in cmd.get_subcommands() {
            for arg in sub.get_arguments() {
                let name = arg.get_id().as_str();
                let text = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                let documented = text.contains("[default:") || !arg.get_default_values().is_empty();
                let exempt = matches!(name, "config" | "force" | "out" | "data" | "checkpoint" | "resume" | "metrics" | "help");
                assert!(documented || exempt, "{} --{name} lacks a default", sub.get_name());
            }
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn enum_flags_use_serde_names() {
        assert_eq!(serde_name::<Divergence>("symmetric_kl"), Ok(Divergence::SymmetricKl));
        assert_eq!(serde_name::<SupervisionForm>("A2R_R2A"), Ok(SupervisionForm::A2rR2a));
        assert!(serde_name::<Divergence>("kl").is_err());
    }
}
