//! The `msma` command line: one subcommand per pipeline stage, each writing
//! a `report.json` (resolved arguments, seed, results) plus CSV tables into
//! an output directory that appears atomically.

mod output;
mod report;

pub use output::{apply_config, recorded_args, OutDir};
pub use report::{merge_runs, Summary, TABLE_FILE};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::alignment::{
    default_grid, pool_scales, run_ablation, scale_labels, train_alignment, AblationGroup, AblationReport, AblationRow,
    AlignConfig, MapKind,
};
use crate::attention_profile::profile_stack;
use crate::boundary::{adjacent_mi_profile, detect_boundaries, mi_matrix, BoundaryConfig};
use crate::error::{MsmaError, Result};
use crate::estimators::{distance_correlation, representation_kl, DEFAULT_K, DEFAULT_MAX_N, DEFAULT_SHRINKAGE};
use crate::intervention::{
    apply_intervention, default_direction, paired_from_text_metrics, read_paired_csv, run_effect_study, target_layers,
    text_metrics, EffectConfig, InterventionKind, InterventionSpec, Lexicon,
};
use crate::numeric::derive_seed;
use crate::probing::{probe_stack, ProbeConfig};
use crate::repr_store::{generate_synthetic, read_stack, write_stack, LayerStack, Scale, SyntheticSpec};
use crate::svg;

pub const THREADS_ENV: &str = "MSMA_THREADS";
const REPORT_FILE: &str = "report.json";

#[derive(Parser, Debug)]
#[command(name = "msma", version, about = "Multi-scale manifold alignment over layerwise representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic layer stack with planted boundaries.
    GenSynth(GenSynthArgs),
    /// Per-layer attention span and entropy.
    ProfileAttention(ProfileArgs),
    /// MI, Gaussian KL and distance correlation between adjacent layers.
    LayerMetrics(LayerMetricsArgs),
    /// Linear probes for every layer and task.
    Probe(ProbeArgs),
    /// Locate the two scale boundaries.
    DetectBoundaries(DetectArgs),
    /// Train the cross-scale alignment maps.
    TrainAlign(TrainArgs),
    /// Run the ablation grid.
    Ablate(AblateArgs),
    /// Write a perturbed copy of a stack.
    Intervene(InterveneArgs),
    /// Paired effect statistics for intervention metrics.
    Stats(StatsArgs),
    /// Merge run directories into one Markdown + CSV summary.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Also write SVG plots.
    #[arg(long)]
    pub svg: bool,
    /// JSON object whose keys override the matching flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count)]
    #[serde(skip)]
    pub verbose: u8,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected L1,L2, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_map_kind(s: &str) -> std::result::Result<MapKind, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown map kind {s:?} (linear, procrustes, mlp)"))
}

fn parse_scale(s: &str) -> std::result::Result<Scale, String> {
    s.parse().map_err(|e: MsmaError| e.to_string())
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    /// Planted boundaries `l1,l2`.
    #[arg(long, value_parser = parse_pair, default_value = "2,8")]
    pub boundaries: (usize, usize),
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden_dim: usize,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub cross_scale_gain: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProfileArgs {
    /// Stack directory.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct LayerMetricsArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Neighbours for the KSG estimator.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    pub shrinkage: f64,
    /// Subsample size for distance correlation.
    #[arg(long, default_value_t = DEFAULT_MAX_N)]
    pub max_n: usize,
    /// Also write the full pairwise MI matrix.
    #[arg(long)]
    pub matrix: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated task names (default: every task in the manifest).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    /// Train/test splits averaged per cell.
    #[arg(long)]
    pub splits: Option<usize>,
    /// Full probe configuration (config file only); flags take precedence.
    #[arg(skip)]
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl ProbeArgs {
    fn probe_config(&self) -> ProbeConfig {
        let mut c = self.probe.clone().unwrap_or_default();
        set(&mut c.epochs, self.epochs);
        set(&mut c.lr, self.lr);
        set(&mut c.l2, self.l2);
        set(&mut c.test_frac, self.test_frac);
        set(&mut c.seeds, self.splits);
        c.seed = self.common.seed;
        c
    }
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Smoothing window (odd).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub min_separation: Option<usize>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated per-task weights for the probe channel.
    #[arg(long, value_delimiter = ',')]
    pub task_weights: Option<Vec<f64>>,
    /// Full detection configuration (config file only); flags take precedence.
    #[arg(skip)]
    #[serde(default)]
    pub boundary: Option<BoundaryConfig>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl DetectArgs {
    fn boundary_config(&self) -> BoundaryConfig {
        let mut c = self.boundary.clone().unwrap_or_default();
        set(&mut c.alpha, self.alpha);
        set(&mut c.beta, self.beta);
        set(&mut c.gamma, self.gamma);
        set(&mut c.window, self.window);
        set(&mut c.min_separation, self.min_separation);
        set(&mut c.cv_folds, self.cv_folds);
        set(&mut c.ksg_k, self.k);
        if self.task_weights.is_some() {
            c.task_weights = self.task_weights.clone();
        }
        c.seed = self.common.seed;
        c.probe.seed = self.common.seed;
        c
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AlignFlags {
    #[arg(long)]
    pub input: PathBuf,
    /// Scale boundaries `l1,l2`; detected from the stack when omitted.
    #[arg(long, value_parser = parse_pair)]
    pub boundaries: Option<(usize, usize)>,
    /// linear, procrustes or mlp.
    #[arg(long, value_parser = parse_map_kind)]
    pub map: Option<MapKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub k_nn: Option<usize>,
    #[arg(long)]
    pub critic_steps: Option<usize>,
    /// Disable the classifier heads.
    #[arg(long)]
    pub no_heads: bool,
    /// Train on the whole sample as one batch.
    #[arg(long)]
    pub full_batch: bool,
    /// Full alignment configuration (config file only); flags take precedence.
    #[arg(skip)]
    #[serde(default)]
    pub align: Option<AlignConfig>,
}

impl AlignFlags {
    fn align_config(&self, seed: u64) -> AlignConfig {
        let mut c = self.align.clone().unwrap_or_default();
        set(&mut c.map_kind, self.map);
        set(&mut c.loss.epochs, self.epochs);
        set(&mut c.loss.lr, self.lr);
        set(&mut c.loss.batch, self.batch);
        set(&mut c.k_nn, self.k_nn);
        set(&mut c.critic_steps, self.critic_steps);
        if self.no_heads {
            c.heads = false;
        }
        if self.full_batch {
            c.full_batch = true;
        }
        c.seed = seed;
        c
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flags: AlignFlags,
    #[arg(long)]
    pub lambda_geo: Option<f64>,
    #[arg(long)]
    pub lambda_info: Option<f64>,
    #[arg(long)]
    pub lambda_curv: Option<f64>,
    /// Row name in `table.csv`.
    #[arg(long, default_value = "run")]
    pub group: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flags: AlignFlags,
    /// Comma-separated subset of grid groups (default: all 18).
    #[arg(long, value_delimiter = ',')]
    pub groups: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct InterveneArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_pair)]
    pub boundaries: Option<(usize, usize)>,
    /// local, intermediate or global.
    #[arg(long, value_parser = parse_scale)]
    pub scale: Scale,
    /// translate, scale, noise or attention.
    #[arg(long)]
    pub kind: String,
    /// Translation vector (comma-separated); defaults to the top principal
    /// direction of the scale, of length `--magnitude`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta: Option<Vec<f64>>,
    #[arg(long)]
    pub magnitude: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct StatsArgs {
    /// Paired metric CSV `run_id,metric,baseline,intervened`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Baseline generations, one per line (paired with `--intervened` by line).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub intervened: Option<PathBuf>,
    /// `word,score` sentiment lexicon for text input.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap_reps: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Run directories containing `table.csv`.
    pub runs: Vec<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| MsmaError::validation(THREADS_ENV, format!("{v:?} is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| MsmaError::Precondition(format!("thread pool: {e}")))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth(a) => execute(a),
        Command::ProfileAttention(a) => execute(a),
        Command::LayerMetrics(a) => execute(a),
        Command::Probe(a) => execute(a),
        Command::DetectBoundaries(a) => execute(a),
        Command::TrainAlign(a) => execute(a),
        Command::Ablate(a) => execute(a),
        Command::Intervene(a) => execute(a),
        Command::Stats(a) => execute(a),
        Command::Report(a) => execute(a),
    }
}

trait Cmd: Serialize + DeserializeOwned + Sync {
    const NAME: &'static str;
    fn common(&self) -> &Common;
    /// Fill `out` and return the command-specific part of `report.json`.
    fn run(&self, out: &OutDir) -> Result<Value>;
}

fn execute<C: Cmd>(args: C) -> Result<()> {
    init_logging(args.common().verbose);
    let args = apply_config(&args, args.common().config.as_deref())?;
    let pool = thread_pool()?;
    let out = OutDir::create(&args.common().out, args.common().force)?;
    let payload = pool.install(|| args.run(&out))?;
    let mut report = Map::new();
    report.insert("command".into(), json!(C::NAME));
    report.insert("seed".into(), json!(args.common().seed));
    report.insert("args".into(), recorded_args(&args)?);
    if let Value::Object(p) = payload {
        report.extend(p);
    }
    out.write_json(REPORT_FILE, &Value::Object(report))?;
    let dir = out.commit()?;
    log::info!("wrote {}", dir.display());
    Ok(())
}

fn load(input: &Path) -> Result<LayerStack> {
    if !input.is_dir() {
        return Err(MsmaError::validation("input", format!("{} is not a directory", input.display())));
    }
    read_stack(input)
}

fn resolve_boundaries(stack: &LayerStack, given: Option<(usize, usize)>, seed: u64) -> Result<((usize, usize), &'static str)> {
    if let Some(b) = given {
        return Ok((b, "given"));
    }
    let mut cfg = BoundaryConfig {
        seed,
        ..BoundaryConfig::default()
    };
    cfg.probe.seed = seed;
    let r = detect_boundaries(stack, &cfg)?;
    log::info!("detected boundaries ({}, {})", r.l1, r.l2);
    Ok(((r.l1, r.l2), "detected"))
}

fn layer_series(name: &str, v: &[f64]) -> (String, Vec<(f64, f64)>) {
    (name.to_string(), v.iter().enumerate().map(|(i, &y)| ((i + 1) as f64, y)).collect())
}

impl Cmd for GenSynthArgs {
    const NAME: &'static str = "gen-synth";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let mut spec = SyntheticSpec::new(self.layers, self.boundaries, self.common.seed)
            .with_samples(self.samples)
            .with_hidden_dim(self.hidden_dim);
        set(&mut spec.seq_len, self.seq_len);
        set(&mut spec.n_heads, self.heads);
        set(&mut spec.noise_sigma, self.noise_sigma);
        set(&mut spec.cross_scale_gain, self.cross_scale_gain);
        let stack = generate_synthetic(&spec)?;
        write_stack(&stack, out.dir())?;
        Ok(json!({ "spec": spec }))
    }
}

impl Cmd for ProfileArgs {
    const NAME: &'static str = "profile-attention";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let stack = load(&self.input)?;
        let p = profile_stack(&stack)?;
        out.write_text("profile.csv", &p.to_csv())?;
        if self.common.svg {
            out.write_text(
                "span.svg",
                &svg::line_plot("Attention span", "layer", "tokens", &[layer_series("span", &p.span)]),
            )?;
            out.write_text(
                "entropy.svg",
                &svg::line_plot("Attention entropy", "layer", "nats", &[layer_series("entropy", &p.entropy)]),
            )?;
            let rows: Vec<String> = (1..=p.head_spans.len()).map(|l| l.to_string()).collect();
            let cols: Vec<String> = (0..p.head_spans.first().map_or(0, Vec::len)).map(|h| format!("h{h}")).collect();
            out.write_text("head_spans.svg", &svg::heatmap("Head span", &rows, &cols, &p.head_spans))?;
        }
        Ok(json!({ "profile": p }))
    }
}

#[derive(Debug, Serialize)]
struct AdjacentMetrics {
    layer: usize,
    mi: f64,
    kl: f64,
    dcor: f64,
}

impl Cmd for LayerMetricsArgs {
    const NAME: &'static str = "layer-metrics";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let stack = load(&self.input)?;
        let layers = stack.layer_matrices()?;
        let seed = self.common.seed;
        let mi = adjacent_mi_profile(&layers, self.k, seed)?;
        let rest: Vec<Result<(f64, f64)>> = (0..layers.len() - 1)
            .into_par_iter()
            .map(|l| {
                let kl = representation_kl(&layers[l + 1], &layers[l], self.shrinkage)?;
                let dc = distance_correlation(&layers[l], &layers[l + 1], self.max_n, derive_seed(seed, 10_000 + l as u64))?;
                Ok((kl, dc))
            })
            .collect();
        let rows: Vec<AdjacentMetrics> = rest
            .into_iter()
            .zip(&mi)
            .enumerate()
            .map(|(l, (r, &mi))| {
                r.map(|(kl, dcor)| AdjacentMetrics {
                    layer: l + 1,
                    mi,
                    kl,
                    dcor,
                })
            })
            .collect::<Result<_>>()?;
        let mut csv = String::from("layer,next,mi,kl,dcor\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.layer, r.layer + 1, r.mi, r.kl, r.dcor));
        }
        out.write_text("layer_metrics.csv", &csv)?;
        let matrix = if self.matrix {
            let m = mi_matrix(&layers, self.k, derive_seed(seed, 20_000))?;
            let mut csv = String::from("layer");
            for l in 1..=m.len() {
                csv.push_str(&format!(",{l}"));
            }
            csv.push('\n');
            for (i, row) in m.iter().enumerate() {
                csv.push_str(&(i + 1).to_string());
                for v in row {
                    csv.push_str(&format!(",{v:.6}"));
                }
                csv.push('\n');
            }
            out.write_text("mi_matrix.csv", &csv)?;
            if self.common.svg {
                let labels: Vec<String> = (1..=m.len()).map(|l| l.to_string()).collect();
                out.write_text("mi_matrix.svg", &svg::heatmap("Layer MI", &labels, &labels, &m))?;
            }
            Some(m)
        } else {
            None
        };
        if self.common.svg {
            let series = |name: &str, f: fn(&AdjacentMetrics) -> f64| {
                (name.to_string(), rows.iter().map(|r| (r.layer as f64, f(r))).collect::<Vec<_>>())
            };
            out.write_text(
                "adjacent_mi.svg",
                &svg::line_plot("Adjacent-layer MI", "layer", "nats", &[series("mi", |r| r.mi)]),
            )?;
            out.write_text(
                "adjacent_dcor.svg",
                &svg::line_plot("Adjacent-layer distance correlation", "layer", "dCor", &[series("dcor", |r| r.dcor)]),
            )?;
        }
        Ok(json!({ "adjacent": rows, "mi_matrix": matrix }))
    }
}

impl Cmd for ProbeArgs {
    const NAME: &'static str = "probe";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let stack = load(&self.input)?;
        let cfg = self.probe_config();
        let r = probe_stack(&stack, &self.tasks, &cfg)?;
        out.write_text("probe.csv", &r.to_csv())?;
        out.write_text("probe_matrix.csv", &r.heatmap_csv())?;
        if self.common.svg {
            let cols: Vec<String> = (1..=r.n_layers).map(|l| l.to_string()).collect();
            out.write_text("probe_heatmap.svg", &svg::heatmap("Probe accuracy", &r.tasks, &cols, &r.accuracy))?;
            let series: Vec<_> = r.tasks.iter().zip(&r.accuracy).map(|(t, a)| layer_series(t, a)).collect();
            out.write_text("probe_accuracy.svg", &svg::line_plot("Probe accuracy", "layer", "accuracy", &series))?;
        }
        let peaks: Map<String, Value> = r.tasks.iter().map(|t| (t.clone(), json!(r.peak_layer(t)))).collect();
        Ok(json!({ "config": cfg, "peak_layer": peaks, "result": r }))
    }
}

impl Cmd for DetectArgs {
    const NAME: &'static str = "detect-boundaries";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let stack = load(&self.input)?;
        let cfg = self.boundary_config();
        let r = detect_boundaries(&stack, &cfg)?;
        out.write_text("traces.csv", &r.traces_csv())?;
        if self.common.svg {
            out.write_text(
                "scores.svg",
                &svg::line_plot(
                    "Boundary score",
                    "position",
                    "score",
                    &[
                        layer_series("score", &r.scores),
                        layer_series("delta_span", &r.channels.delta_span),
                        layer_series("delta_mi", &r.channels.delta_mi),
                        layer_series("probe_gradient", &r.channels.probe_gradient),
                    ],
                ),
            )?;
        }
        Ok(json!({
            "config": cfg,
            "l1": r.l1,
            "l2": r.l2,
            "cv_std": r.cv_std,
            "stable": r.stable,
            "cv_boundaries": r.cv_boundaries,
            "traces": {
                "scores": r.scores,
                "channels": r.channels,
                "adjacent_mi": r.adjacent_mi,
            },
        }))
    }
}

impl Cmd for TrainArgs {
    const NAME: &'static str = "train-align";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let stack = load(&self.flags.input)?;
        let seed = self.common.seed;
        let ((l1, l2), source) = resolve_boundaries(&stack, self.flags.boundaries, seed)?;
        let mut cfg = self.flags.align_config(seed);
        set(&mut cfg.loss.lambda_geo, self.lambda_geo);
        set(&mut cfg.loss.lambda_info, self.lambda_info);
        set(&mut cfg.loss.lambda_curv, self.lambda_curv);
        let (_, rep) = train_alignment(&stack, (l1, l2), &cfg)?;

        let mut losses = String::from("epoch,geo,info,curv,cls,total\n");
        for s in &rep.epoch_losses {
            let cls = s.cls.map_or_else(|| "NA".into(), |c| format!("{c:.6}"));
            losses.push_str(&format!("{},{:.6},{:.6},{:.6},{cls},{:.6}\n", s.epoch, s.geo, s.info, s.curv, s.total));
        }
        out.write_text("losses.csv", &losses)?;
        let mut metrics = String::from("epoch,KL_gm,KL_ml,MI_gm,MI_ml,DC_gm,DC_ml\n");
        for m in &rep.metrics {
            metrics.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.epoch, m.gm.kl, m.ml.kl, m.gm.mi, m.ml.mi, m.gm.dc, m.ml.dc
            ));
        }
        out.write_text("metrics.csv", &metrics)?;
        let table = AblationReport {
            rows: vec![AblationRow {
                group: AblationGroup::new(&self.group, cfg.loss.lambda_geo, cfg.loss.lambda_info, cfg.loss.lambda_curv),
                seed,
                metrics: Some(rep.final_metrics.clone()),
                budget: Some(rep.budget.clone()),
                error: None,
            }],
            budget_c: rep.budget.c,
        };
        out.write_text(TABLE_FILE, &table.to_csv())?;
        if self.common.svg {
            let series = |name: &str, f: fn(&crate::alignment::StepLoss) -> f64| {
                (name.to_string(), rep.epoch_losses.iter().map(|s| (s.epoch as f64, f(s))).collect::<Vec<_>>())
            };
            out.write_text(
                "losses.svg",
                &svg::line_plot(
                    "Training loss",
                    "epoch",
                    "loss",
                    &[series("total", |s| s.total), series("geo", |s| s.geo), series("info", |s| s.info)],
                ),
            )?;
        }
        Ok(json!({
            "boundaries": [l1, l2],
            "boundaries_source": source,
            "report": rep,
        }))
    }
}

impl Cmd for AblateArgs {
    const NAME: &'static str = "ablate";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let stack = load(&self.flags.input)?;
        let seed = self.common.seed;
        let (b, source) = resolve_boundaries(&stack, self.flags.boundaries, seed)?;
        let cfg = self.flags.align_config(seed);
        cfg.validate()?;
        let mut grid = default_grid();
        if !self.groups.is_empty() {
            for g in &self.groups {
                if !grid.iter().any(|x| &x.name == g) {
                    return Err(MsmaError::validation("groups", format!("unknown group {g:?}")));
                }
            }
            grid.retain(|x| self.groups.contains(&x.name));
        }
        let scales = pool_scales(&stack, b)?;
        let labels = if cfg.heads { scale_labels(&stack) } else { None };
        let rep = run_ablation(&scales, labels.as_ref(), &cfg, &grid);
        for r in &rep.rows {
            if let Some(e) = &r.error {
                log::warn!("group {} failed: {e}", r.group.name);
            }
        }
        out.write_text(TABLE_FILE, &rep.to_csv())?;
        if self.common.svg {
            let sweep = |f: fn(&crate::alignment::EpochMetrics) -> f64| -> Vec<(f64, f64)> {
                rep.rows
                    .iter()
                    .filter(|r| r.group.name.starts_with("geo-"))
                    .filter_map(|r| r.metrics.as_ref().map(|m| (r.group.lambda_geo, f(m))))
                    .collect()
            };
            out.write_text(
                "geo_sweep.svg",
                &svg::line_plot(
                    "KL against lambda_geo",
                    "lambda_geo",
                    "KL",
                    &[("KL_gm".into(), sweep(|m| m.gm.kl)), ("KL_ml".into(), sweep(|m| m.ml.kl))],
                ),
            )?;
        }
        Ok(json!({
            "config": cfg,
            "boundaries": [b.0, b.1],
            "boundaries_source": source,
            "ablation": rep,
        }))
    }
}

impl InterveneArgs {
    fn kind(&self, stack: &LayerStack, b: (usize, usize)) -> Result<InterventionKind> {
        let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| MsmaError::validation(flag, format!("--{flag} is required for --kind {}", self.kind)));
        let kind = match self.kind.as_str() {
            "translate" => match &self.delta {
                Some(d) => {
                    if d.len() != stack.manifest.hidden_dim {
                        return Err(MsmaError::validation(
                            "delta",
                            format!("length {} != hidden_dim {}", d.len(), stack.manifest.hidden_dim),
                        ));
                    }
                    InterventionKind::Translate { delta: d.clone() }
                }
                None => InterventionKind::Translate {
                    delta: default_direction(stack, b, self.scale, self.magnitude.unwrap_or(1.0))?,
                },
            },
            "scale" => InterventionKind::Scale {
                alpha: need(self.alpha, "alpha")?,
            },
            "noise" => InterventionKind::Noise {
                sigma: need(self.sigma, "sigma")?,
            },
            "attention" => InterventionKind::Attention {
                tau: need(self.tau, "tau")?,
            },
            other => {
                return Err(MsmaError::validation(
                    "kind",
                    format!("unknown intervention {other:?} (translate, scale, noise, attention)"),
                ))
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl Cmd for InterveneArgs {
    const NAME: &'static str = "intervene";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let stack = load(&self.input)?;
        let seed = self.common.seed;
        let (b, source) = resolve_boundaries(&stack, self.boundaries, seed)?;
        let spec = InterventionSpec {
            scale: self.scale,
            kind: self.kind(&stack, b)?,
        };
        let moved = apply_intervention(&stack, b, &spec, seed)?;
        write_stack(&moved, out.dir())?;
        let (first, last) = target_layers(stack.n_layers(), b, self.scale)?;
        Ok(json!({
            "boundaries": [b.0, b.1],
            "boundaries_source": source,
            "intervention": spec,
            "target_layers": [first, last],
        }))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| MsmaError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

impl Cmd for StatsArgs {
    const NAME: &'static str = "stats";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let pairs = match (&self.pairs, &self.baseline, &self.intervened) {
            (Some(p), None, None) => read_paired_csv(p)?,
            (None, Some(b), Some(i)) => {
                let lexicon = self.lexicon.as_deref().map(Lexicon::read).transpose()?;
                let metrics = |p: &Path| -> Result<Vec<_>> {
                    read_lines(p)?.iter().map(|t| text_metrics(t, lexicon.as_ref())).collect()
                };
                paired_from_text_metrics(&metrics(b)?, &metrics(i)?)?
            }
            _ => {
                return Err(MsmaError::validation(
                    "pairs",
                    "give either --pairs or both --baseline and --intervened",
                ))
            }
        };
        let cfg = EffectConfig {
            bootstrap_reps: self.bootstrap_reps,
            level: self.level,
            seed: self.common.seed,
        };
        let rep = run_effect_study(&pairs, &cfg)?;
        out.write_text("effects.csv", &rep.to_csv())?;
        Ok(json!({ "effects": rep }))
    }
}

impl Cmd for ReportArgs {
    const NAME: &'static str = "report";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self, out: &OutDir) -> Result<Value> {
        let s = merge_runs(&self.runs)?;
        out.write_text("summary.csv", &s.to_csv())?;
        out.write_text("summary.md", &s.to_markdown())?;
        Ok(json!({ "runs": s.runs, "skipped": s.skipped, "rows": s.rows.len() }))
    }
}
