//! Subcommands of the `mpscope` binary.
//!
//! Each `cmd_*` function echoes its resolved configuration as a single
//! `config {json}` line, writes human-readable results to `out`, and returns
//! the structured result so tests can inspect it.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mpscope::attention::{self, attention_entropy, attention_forward, AttentionConfig, AttentionWeights};
use mpscope::gram::{self, EigenMode, GramSpec};
use mpscope::io::{self, Dtype, MetricsRow};
use mpscope::mpstats::{self, aggregate_layers, MeanStd, SpectralMetrics};
use mpscope::synth::{self, Rng};
use mpscope::train::{self, TrainConfig, TrainSummary, DEFAULT_SEED};
use mpscope::{Error, Variant};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for unreadable or malformed inputs, 3 for configuration and tensor
    /// mismatches, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output(_) => 1,
            CliError::Core(e) => match e {
                Error::Format { .. } | Error::Io { .. } => 2,
                Error::Config(_)
                | Error::MissingTensor(_)
                | Error::TensorShape { .. }
                | Error::ShapeMismatch { .. }
                | Error::UnknownMetric(_)
                | Error::NoPointsAtStep(_)
                | Error::EmptySpectrum => 3,
                _ => 4,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mpscope", version, about = "Marchenko-Pastur diagnostics for attention query/key spectra")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Spectral metrics for every layer of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Train a toy model, logging checkpoints and diagnostics.
    Train(TrainArgs),
    /// Metrics of Wishart null spectra.
    NullSim(NullSimArgs),
    /// Metrics and detection rate for planted spikes.
    SpikeSim(SpikeSimArgs),
    /// Per-layer attention entropy of a checkpoint on seeded probe inputs.
    Entropy(EntropyArgs),
    /// Heatmap and aggregate CSVs from a metrics file.
    Report(ReportArgs),
    /// Wall-time cost of spectral logging during training.
    Overhead(OverheadArgs),
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ModelArgs {
    /// mha | mla-pre | mla-dec | mla-nope
    #[arg(long, default_value = "mha")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0.5)]
    pub rope_frac: f64,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_k: usize,
    #[arg(long, default_value_t = 8)]
    pub d_latent: usize,
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    #[arg(long, default_value_t = attention::DEFAULT_ROPE_BASE)]
    pub rope_base: f64,
}

impl ModelArgs {
    pub fn toy(variant: Variant) -> Self {
        Self::from_config(&AttentionConfig::toy(variant))
    }

    pub fn from_config(c: &AttentionConfig) -> Self {
        Self {
            variant: c.variant,
            rope_frac: c.rope_frac,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_k: c.d_k,
            d_latent: c.d_latent,
            seq_len: c.seq_len,
            rope_base: c.rope_base,
        }
    }

    pub fn config(&self) -> mpscope::Result<AttentionConfig> {
        let c = AttentionConfig {
            variant: self.variant,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_k: self.d_k,
            d_latent: self.d_latent,
            rope_frac: self.rope_frac,
            rope_base: self.rope_base,
            seq_len: self.seq_len,
            causal: true,
        };
        c.validate()?;
        Ok(c)
    }
}

fn echo(out: &mut impl Write, config: &impl Serialize) -> CliResult<()> {
    let json = serde_json::to_string(config).expect("configs serialize");
    writeln!(out, "config {json}")?;
    Ok(())
}

/// Step number encoded in a `ckpt_{step}.nt` file name.
pub fn step_from_path(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.strip_prefix("ckpt_")?.parse().ok()
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// singular | squared
    #[arg(long, default_value = "singular")]
    pub eigen_mode: EigenMode,
    /// Step recorded in the rows; defaults to the `ckpt_{step}` file name, else 0.
    #[arg(long)]
    pub step: Option<u64>,
    /// Metrics CSV to append rows to.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_analyze(args: &AnalyzeArgs, out: &mut impl Write) -> CliResult<Vec<MetricsRow>> {
    let mut resolved = args.clone();
    resolved.step = Some(args.step.or_else(|| step_from_path(&args.ckpt)).unwrap_or(0));
    echo(out, &resolved)?;
    let config = args.model.config()?;
    let store = io::read_tensors(&args.ckpt)?;
    let step = resolved.step.unwrap_or(0);
    let rows: Vec<MetricsRow> = gram::analyze_layers(&store, &config, args.eigen_mode)?
        .iter()
        .map(|a| MetricsRow::new(step, &a.spec, &a.metrics, None))
        .collect();
    if let Some(path) = &args.out {
        for r in &rows {
            io::append_metrics_row(path, r)?;
        }
    }
    write!(out, "{}", io::metrics_csv(&rows))?;
    Ok(rows)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    #[arg(long, default_value_t = 0.9)]
    pub sharpness: f64,
    #[arg(long, default_value_t = 20_000)]
    pub corpus_len: usize,
    #[arg(long, default_value_t = 2_048)]
    pub eval_len: usize,
    #[arg(long, default_value = "singular")]
    pub eigen_mode: EigenMode,
    /// Store checkpoints in 64-bit floats so offline analysis is exact.
    #[arg(long)]
    pub f64: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn toy(variant: Variant, out: PathBuf) -> Self {
        let t = TrainConfig::toy(variant);
        Self {
            model: ModelArgs::toy(variant),
            n_layers: t.n_layers,
            vocab: t.vocab_size,
            steps: t.steps,
            batch: t.batch_size,
            lr: t.learning_rate,
            seed: t.seed,
            log_every: t.log_every,
            sharpness: t.corpus_sharpness,
            corpus_len: t.corpus_len,
            eval_len: t.eval_len,
            eigen_mode: t.eigen_mode,
            f64: false,
            out,
        }
    }

    pub fn train_config(&self) -> mpscope::Result<TrainConfig> {
        let c = TrainConfig {
            model: self.model.config()?,
            n_layers: self.n_layers,
            vocab_size: self.vocab,
            steps: self.steps,
            batch_size: self.batch,
            learning_rate: self.lr,
            seed: self.seed,
            log_every: self.log_every,
            corpus_sharpness: self.sharpness,
            corpus_len: self.corpus_len,
            eval_len: self.eval_len,
            eigen_mode: self.eigen_mode,
            checkpoint_dtype: if self.f64 { Dtype::F64 } else { Dtype::F32 },
            spectral_logging: true,
        };
        c.validate()?;
        Ok(c)
    }
}

pub fn cmd_train(args: &TrainArgs, out: &mut impl Write) -> CliResult<TrainSummary> {
    let config = args.train_config()?;
    echo(out, &config)?;
    let summary = train::run_training(&config, &args.out)?;
    writeln!(out, "initial_loss {:.6}", summary.initial_loss)?;
    writeln!(out, "final_loss {:.6}", summary.final_loss)?;
    writeln!(out, "final_perplexity {:.6}", summary.final_perplexity)?;
    writeln!(out, "checkpoints {}", summary.logged_steps.len())?;
    writeln!(out, "metrics {}", args.out.join("metrics.csv").display())?;
    writeln!(out, "run {}", args.out.join("run.json").display())?;
    Ok(summary)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct NullSimArgs {
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 256)]
    pub d_in: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Trial `i` uses seed `seed + i`.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct SpikeSimArgs {
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 256)]
    pub d_in: usize,
    #[arg(long, default_value_t = 10.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 1)]
    pub rank: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Trial `i` uses seed `seed + i`.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimSummary {
    pub trials: Vec<SpectralMetrics>,
    pub mp_gap: MeanStd,
    pub outlier_count: MeanStd,
    pub outlier_energy: MeanStd,
    pub mp_soft_rank: MeanStd,
    pub stable_rank: MeanStd,
    /// Share of trials with at least one outlier.
    pub detection_rate: f64,
}

impl SimSummary {
    fn from_trials(trials: Vec<SpectralMetrics>) -> Self {
        let col = |f: fn(&SpectralMetrics) -> f64| MeanStd::of(trials.iter().map(f));
        Self {
            mp_gap: col(|m| m.mp_gap),
            outlier_count: col(|m| m.outlier_count as f64),
            outlier_energy: col(|m| m.outlier_energy),
            mp_soft_rank: col(|m| m.mp_soft_rank),
            stable_rank: col(|m| m.stable_rank),
            detection_rate: trials.iter().filter(|m| m.outlier_count >= 1).count() as f64 / trials.len() as f64,
            trials,
        }
    }

    fn print(&self, out: &mut impl Write, with_detection: bool) -> CliResult<()> {
        writeln!(out, "trial,lambda1,mp_gap,outlier_count,outlier_energy,mp_soft_rank,stable_rank")?;
        for (i, m) in self.trials.iter().enumerate() {
            writeln!(
                out,
                "{i},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
                m.lambda1, m.mp_gap, m.outlier_count, m.outlier_energy, m.mp_soft_rank, m.stable_rank
            )?;
        }
        for (name, v) in [
            ("mp_gap", self.mp_gap),
            ("outlier_count", self.outlier_count),
            ("outlier_energy", self.outlier_energy),
            ("mp_soft_rank", self.mp_soft_rank),
            ("stable_rank", self.stable_rank),
        ] {
            writeln!(out, "summary {name} mean {:.6} std {:.6}", v.mean, v.std)?;
        }
        if with_detection {
            writeln!(out, "detection_rate {:.4}", self.detection_rate)?;
        }
        Ok(())
    }
}

fn check_trials(trials: usize) -> mpscope::Result<()> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    Ok(())
}

fn run_trials(trials: usize, f: impl Fn(usize) -> mpscope::Result<SpectralMetrics> + Sync + Send) -> mpscope::Result<Vec<SpectralMetrics>> {
    use rayon::prelude::*;
    (0..trials).into_par_iter().map(f).collect()
}

pub fn cmd_null_sim(args: &NullSimArgs, out: &mut impl Write) -> CliResult<SimSummary> {
    echo(out, args)?;
    check_trials(args.trials)?;
    let edges = mpstats::mp_edges(args.m, args.d_in);
    let trials = run_trials(args.trials, |i| {
        let s = synth::wishart_null_spectrum(args.m, args.d_in, args.seed.wrapping_add(i as u64))?;
        mpstats::spectral_metrics(&s, &edges)
    })?;
    let summary = SimSummary::from_trials(trials);
    summary.print(out, false)?;
    Ok(summary)
}

pub fn cmd_spike_sim(args: &SpikeSimArgs, out: &mut impl Write) -> CliResult<SimSummary> {
    echo(out, args)?;
    check_trials(args.trials)?;
    let spec = GramSpec {
        variant: Variant::Mha,
        layer_index: 0,
        m: args.m,
        d_in: args.d_in,
        eigen_mode: EigenMode::Singular,
    };
    let trials = run_trials(args.trials, |i| {
        let (wq, wk) = synth::spiked_pair(args.m, args.d_in, args.theta, args.rank, args.seed.wrapping_add(i as u64))?;
        gram::gram_spectrum(&wq, &wk, &spec)?.metrics()
    })?;
    let summary = SimSummary::from_trials(trials);
    summary.print(out, true)?;
    Ok(summary)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct EntropyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `--seq-len` sets the probe length.
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value = "singular")]
    pub eigen_mode: EigenMode,
    #[arg(long)]
    pub step: Option<u64>,
    /// Metrics CSV to append rows (spectral metrics plus entropy) to.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Feeds the same seeded `N(0, 1/d_model)` probe sequence to every layer's
/// attention and reports the mean row entropy in bits.
pub fn cmd_entropy(args: &EntropyArgs, out: &mut impl Write) -> CliResult<Vec<f64>> {
    let mut resolved = args.clone();
    resolved.step = Some(args.step.or_else(|| step_from_path(&args.ckpt)).unwrap_or(0));
    echo(out, &resolved)?;
    let config = args.model.config()?;
    let store = io::read_tensors(&args.ckpt)?;
    let n_layers = store.layer_count();
    if n_layers == 0 {
        return Err(Error::MissingTensor(gram::tensor_name(0, "*")).into());
    }
    let probe = attention::probe_inputs(config.seq_len, config.d_model, args.seed);
    let mut entropies = Vec::with_capacity(n_layers);
    writeln!(out, "layer,attention_entropy_bits")?;
    for layer in 0..n_layers {
        let weights = AttentionWeights::load(&store, layer, &config)?;
        let (_, probs) = attention_forward(&weights, &probe, &config)?;
        let e = attention_entropy(&probs)?;
        writeln!(out, "{layer},{}", io::fmt_f64(e))?;
        entropies.push(e);
    }
    if let Some(path) = &args.out {
        let step = resolved.step.unwrap_or(0);
        for (a, e) in gram::analyze_layers(&store, &config, args.eigen_mode)?.iter().zip(&entropies) {
            io::append_metrics_row(path, &MetricsRow::new(step, &a.spec, &a.metrics, Some(*e)))?;
        }
    }
    Ok(entropies)
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportOutput {
    pub heatmaps: Vec<PathBuf>,
    pub aggregates: PathBuf,
}

pub fn cmd_report(args: &ReportArgs, out: &mut impl Write) -> CliResult<ReportOutput> {
    echo(out, args)?;
    let rows = io::read_metrics(&args.metrics)?;
    if rows.is_empty() {
        return Err(Error::Config(format!("{} has no rows", args.metrics.display())).into());
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let mut metrics: Vec<&str> = SpectralMetrics::HEADLINE.to_vec();
    if rows.iter().any(|r| r.attention_entropy_bits.is_some()) {
        metrics.push("attention_entropy_bits");
    }
    let mut heatmaps = Vec::new();
    for m in metrics {
        let path = args.out.join(format!("heatmap_{m}.csv"));
        io::export_heatmap(&rows, m, &path)?;
        writeln!(out, "heatmap {}", path.display())?;
        heatmaps.push(path);
    }
    let points: Vec<_> = rows.iter().map(MetricsRow::point).collect();
    let steps: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.step).collect();
    let aggs = steps
        .into_iter()
        .map(|s| aggregate_layers(&points, s))
        .collect::<mpscope::Result<Vec<_>>>()?;
    let aggregates = args.out.join("aggregates.csv");
    std::fs::write(&aggregates, io::aggregates_csv(&aggs)).map_err(|e| Error::Io {
        path: aggregates.clone(),
        source: e,
    })?;
    writeln!(out, "aggregates {}", aggregates.display())?;
    Ok(ReportOutput { heatmaps, aggregates })
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct OverheadArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Values above `--steps` disable logging, making both runs baselines.
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
    /// Scratch directory for the two runs; removed afterwards unless `--keep`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub keep: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadReport {
    pub baseline_seconds: f64,
    pub logged_seconds: f64,
    pub overhead_percent: f64,
    /// Time spent inside the logging hook of the logged run.
    pub logging_seconds: f64,
    pub logged_checkpoints: usize,
    /// One cross-Gram analysis (product plus singular values) at 768 x 768.
    pub svd_768_seconds: f64,
}

/// Times singular values of one 768 x 768 cross-Gram matrix.
pub fn time_svd_768(seed: u64) -> mpscope::Result<f64> {
    let mut rng = Rng::new(seed);
    let wq = rng.gaussian_matrix(768, 768, 1.0);
    let wk = rng.gaussian_matrix(768, 768, 1.0);
    let spec = GramSpec {
        variant: Variant::Mha,
        layer_index: 0,
        m: 768,
        d_in: 768,
        eigen_mode: EigenMode::Singular,
    };
    let t0 = Instant::now();
    gram::gram_spectrum(&wq, &wk, &spec)?;
    Ok(t0.elapsed().as_secs_f64())
}

pub fn cmd_overhead(args: &OverheadArgs, out: &mut impl Write) -> CliResult<OverheadReport> {
    let mut train_args = TrainArgs::toy(args.model.variant, PathBuf::new());
    train_args.model = args.model.clone();
    train_args.n_layers = args.n_layers;
    train_args.vocab = args.vocab;
    train_args.steps = args.steps;
    train_args.batch = args.batch;
    train_args.lr = args.lr;
    train_args.seed = args.seed;
    // An interval beyond the run length disables logging in both runs.
    let logs = args.log_every <= args.steps;
    train_args.log_every = args.log_every.min(args.steps);
    let mut logged_cfg = train_args.train_config()?;
    logged_cfg.spectral_logging = logs;
    echo(out, &logged_cfg)?;
    let baseline_cfg = TrainConfig {
        spectral_logging: false,
        ..logged_cfg.clone()
    };
    let root = args
        .out
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("mpscope-overhead-{}", std::process::id())));

    let t0 = Instant::now();
    train::run_training(&baseline_cfg, &root.join("baseline"))?;
    let baseline_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let logged = train::run_training(&logged_cfg, &root.join("logged"))?;
    let logged_seconds = t1.elapsed().as_secs_f64();
    if !args.keep {
        let _ = std::fs::remove_dir_all(&root);
    }

    let report = OverheadReport {
        baseline_seconds,
        logged_seconds,
        overhead_percent: 100.0 * (logged_seconds - baseline_seconds) / baseline_seconds,
        logging_seconds: logged.logging_seconds,
        logged_checkpoints: logged.logged_steps.len(),
        svd_768_seconds: time_svd_768(args.seed)?,
    };
    writeln!(out, "baseline_seconds {:.3}", report.baseline_seconds)?;
    writeln!(out, "logged_seconds {:.3}", report.logged_seconds)?;
    writeln!(out, "overhead_percent {:.2}", report.overhead_percent)?;
    writeln!(
        out,
        "logging_seconds {:.3} over {} checkpoints",
        report.logging_seconds, report.logged_checkpoints
    )?;
    writeln!(out, "svd_768_seconds {:.3}", report.svd_768_seconds)?;
    Ok(report)
}

pub fn run(cli: &Cli, out: &mut impl Write) -> CliResult<()> {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, out).map(drop),
        Command::Train(a) => cmd_train(a, out).map(drop),
        Command::NullSim(a) => cmd_null_sim(a, out).map(drop),
        Command::SpikeSim(a) => cmd_spike_sim(a, out).map(drop),
        Command::Entropy(a) => cmd_entropy(a, out).map(drop),
        Command::Report(a) => cmd_report(a, out).map(drop),
        Command::Overhead(a) => cmd_overhead(a, out).map(drop),
    }
}

/// Applies `MPSCOPE_THREADS` (unset or 0 means automatic).
pub fn configure_threads() {
    let n = std::env::var("MPSCOPE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_from_file_name() {
        assert_eq!(step_from_path(Path::new("/x/ckpt_250.nt")), Some(250));
        assert_eq!(step_from_path(Path::new("model.nt")), None);
    }

    #[test]
    fn exit_codes() {
        let fmt = CliError::Core(Error::Format {
            path: "x".into(),
            source: mpscope::FormatError::BadMagic(*b"XXXXXXXX"),
        });
        assert_eq!(fmt.exit_code(), 2);
        assert_eq!(CliError::Core(Error::MissingTensor("a".into())).exit_code(), 3);
        assert_eq!(CliError::Core(Error::NonFiniteLoss { step: 3 }).exit_code(), 4);
    }

    #[test]
    fn cli_parses_explicit_flags() {
        let cli = Cli::try_parse_from([
            "mpscope", "train", "--variant", "mla-dec", "--rope-frac", "0.25", "--steps", "10", "--log-every", "5",
            "--out", "/tmp/x",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.model.variant, Variant::MlaDec);
        assert_eq!(t.train_config().unwrap().model.rope_dim(), 4);
        assert!(Cli::try_parse_from(["mpscope", "train", "--variant", "gqa", "--out", "x"]).is_err());
    }
}
