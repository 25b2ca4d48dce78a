//! Minibatch training of the two cross-scale maps under the combined loss.

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::curvature::{curvature_with_grad, DEFAULT_K_NN};
use super::ib::ib_objective_estimate;
use super::loss::{
    geo_loss, ClassifierHeads, HeadBatch, LossConfig, DEFAULT_HEAD_DIMS, DEFAULT_LABEL_SMOOTHING, DEFAULT_TAU,
};
use super::maps::{fit_linear_map, fit_procrustes, AlignmentMap, MapKind, MlpMap};
use super::{pool_scales, ScaleRepresentation};
use crate::error::{MsmaError, Result};
use crate::estimators::{
    distance_correlation, representation_kl, representation_mi, MineConfig, MineCritic, DEFAULT_K, DEFAULT_MAX_N,
    DEFAULT_SHRINKAGE,
};
use crate::nn::{Adam, AdamConfig};
use crate::numeric::{derive_seed, permutation, rng, select_rows, Standardizer};
use crate::repr_store::{LayerStack, Scale};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub loss: LossConfig,
    pub map_kind: MapKind,
    /// Start from the closed-form fit when `λ_geo > 0`; otherwise maps start
    /// at the identity.
    pub warm_start: bool,
    pub ridge: f64,
    pub heads: bool,
    /// Output sizes of the `[global, mid, local]` heads.
    pub head_dims: [usize; 3],
    pub tau: f64,
    pub label_smoothing: f64,
    pub k_nn: usize,
    pub critic: MineConfig,
    /// Critic updates per map update.
    pub critic_steps: usize,
    /// Use the whole sample as one batch.
    pub full_batch: bool,
    /// Evaluate the metric triple after every epoch (otherwise only at the end).
    pub metrics_every_epoch: bool,
    pub metric_k: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            loss: LossConfig::default(),
            map_kind: MapKind::Linear,
            warm_start: true,
            ridge: 1e-3,
            heads: true,
            head_dims: DEFAULT_HEAD_DIMS,
            tau: DEFAULT_TAU,
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            k_nn: DEFAULT_K_NN,
            critic: MineConfig::default(),
            critic_steps: 5,
            full_batch: false,
            metrics_every_epoch: true,
            metric_k: DEFAULT_K,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.ridge < 0.0 {
            return Err(MsmaError::validation("ridge", "must be ≥ 0"));
        }
        if self.head_dims.iter().any(|&k| k < 2) {
            return Err(MsmaError::validation("head_dims", "each head needs ≥ 2 outputs"));
        }
        if !(self.tau > 0.0) {
            return Err(MsmaError::validation("tau", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(MsmaError::validation("label_smoothing", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// The two mapping directions, in training order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `f_GI: h_G → h_I`
    GlobalToMid,
    /// `f_IL: h_I → h_L`
    MidToLocal,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::GlobalToMid, Direction::MidToLocal];

    pub fn short(self) -> &'static str {
        match self {
            Direction::GlobalToMid => "gm",
            Direction::MidToLocal => "ml",
        }
    }

    fn scales(self) -> (Scale, Scale) {
        match self {
            Direction::GlobalToMid => (Scale::Global, Scale::Intermediate),
            Direction::MidToLocal => (Scale::Intermediate, Scale::Local),
        }
    }
}

/// KL(target ‖ mapped), KSG MI(mapped; target) and distance correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub kl: f64,
    pub mi: f64,
    pub dc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 is the state before training.
    pub epoch: usize,
    pub gm: MetricTriple,
    pub ml: MetricTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub geo: f64,
    pub info: f64,
    pub curv: f64,
    pub cls: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// Final full-sample `L_geo` summed over both maps.
    pub eps_geo: f64,
    /// Target information lost by the maps, `Σ max(0, Î(src; dst) − Î(f(src); dst))`.
    pub eps_info: f64,
    /// `KL_gm + KL_ml` after training.
    pub total_kl: f64,
    /// `total_kl / (eps_geo + eps_info)` for this run.
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub config: AlignConfig,
    pub boundaries: Option<(usize, usize)>,
    pub n_samples: usize,
    /// Metrics of the untrained identity maps.
    pub baseline: EpochMetrics,
    pub steps: Vec<StepLoss>,
    /// Per-epoch means of the step losses.
    pub epoch_losses: Vec<StepLoss>,
    pub metrics: Vec<EpochMetrics>,
    pub final_metrics: EpochMetrics,
    pub budget: ErrorBudget,
    /// `[global, mid, local]` head accuracies on the training sample.
    pub head_accuracy: Option<[f64; 3]>,
    /// `Î(f(src); y) − β·Î(src; f(src))` per direction, when labels exist.
    pub ib: Option<[f64; 2]>,
}

impl AlignmentReport {
    pub fn triple(&self, d: Direction) -> MetricTriple {
        match d {
            Direction::GlobalToMid => self.final_metrics.gm,
            Direction::MidToLocal => self.final_metrics.ml,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMaps {
    pub gi: AlignmentMap,
    pub il: AlignmentMap,
    pub heads: Option<ClassifierHeads>,
}

/// Least-squares fit of `C` in `kl ≈ C·(ε_geo + ε_info)` over runs.
pub fn fit_budget_constant(points: &[(f64, f64)]) -> Option<f64> {
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    (sxx > 0.0 && sxy.is_finite()).then(|| sxy / sxx)
}

/// Training state for one mapping direction.
struct DirState<'a> {
    map: AlignmentMap,
    src: &'a DMatrix<f64>,
    dst: &'a DMatrix<f64>,
    critic: Option<MineCritic>,
    st_src: Standardizer,
    st_dst: Standardizer,
    /// Fixed marginal pairing in full-batch mode, so the objective is deterministic.
    fixed_marginal: Option<Vec<usize>>,
}

struct StepOut {
    geo: f64,
    info: f64,
    curv: f64,
    grads: Vec<f64>,
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn shuffled_rows<R: Rng + ?Sized>(x: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    select_rows(x, &permutation(rng, x.nrows()))
}

impl DirState<'_> {
    fn step<R: Rng + ?Sized>(&mut self, rows: &[usize], cfg: &AlignConfig, rng: &mut R) -> Result<StepOut> {
        let lc = &cfg.loss;
        let xb = select_rows(self.src, rows);
        let yb = select_rows(self.dst, rows);
        let (out, trace) = self.map.forward(&xb);
        let (geo, dgeo) = geo_loss(&out, &yb)?;
        let mut dy = if lc.lambda_geo > 0.0 {
            dgeo * lc.lambda_geo
        } else {
            DMatrix::zeros(out.nrows(), out.ncols())
        };
        let mut info = 0.0;
        if let (Some(critic), true) = (self.critic.as_mut(), lc.lambda_info > 0.0) {
            let xs = self.st_dst.apply(&out);
            let ss = self.st_src.apply(&xb);
            let fixed = self.fixed_marginal.as_ref().map(|p| select_rows(&ss, p));
            let marginal = |rng: &mut R| fixed.clone().unwrap_or_else(|| shuffled_rows(&ss, rng));
            for _ in 0..cfg.critic_steps {
                let marg = marginal(rng);
                critic.train_step(&xs, &ss, &marg);
            }
            let marg = marginal(rng);
            let (bound, gx) = critic.bound_grad_x(&xs, &ss, &marg);
            info = -bound;
            for (j, col) in gx.column_iter().enumerate() {
                let s = self.st_dst.scale[j];
                for (i, v) in col.iter().enumerate() {
                    dy[(i, j)] -= lc.lambda_info * v / s;
                }
            }
        }
        let mut grads = self.map.param_grads(&xb, &trace, &dy);
        let mut curv = 0.0;
        if lc.lambda_curv > 0.0 {
            let (full, tr) = self.map.forward(self.src);
            let (c, g) = curvature_with_grad(&full, cfg.k_nn, self.map.n_params() > 0)?;
            curv = c.value;
            if let Some(g) = g {
                add_into(&mut grads, &self.map.param_grads(self.src, &tr, &(g * lc.lambda_curv)));
            }
        }
        Ok(StepOut { geo, info, curv, grads })
    }
}

fn triple(mapped: &DMatrix<f64>, dst: &DMatrix<f64>, k: usize, seed: u64) -> Result<MetricTriple> {
    Ok(MetricTriple {
        kl: representation_kl(dst, mapped, DEFAULT_SHRINKAGE)?,
        mi: representation_mi(mapped, dst, k, seed)?.mi,
        dc: distance_correlation(mapped, dst, DEFAULT_MAX_N, seed)?,
    })
}

fn evaluate(
    epoch: usize,
    gi: &AlignmentMap,
    il: &AlignmentMap,
    s: &ScaleRepresentation,
    cfg: &AlignConfig,
) -> Result<EpochMetrics> {
    let seed = derive_seed(cfg.seed, 0xE7A1);
    Ok(EpochMetrics {
        epoch,
        gm: triple(&gi.apply(&s.global), &s.intermediate, cfg.metric_k, seed)?,
        ml: triple(&il.apply(&s.intermediate), &s.local, cfg.metric_k, seed)?,
    })
}

fn init_map<R: Rng + ?Sized>(
    src: &DMatrix<f64>,
    dst: &DMatrix<f64>,
    cfg: &AlignConfig,
    rng: &mut R,
) -> Result<AlignmentMap> {
    let (d_in, d_out) = (src.ncols(), dst.ncols());
    if !(cfg.warm_start && cfg.loss.lambda_geo > 0.0) {
        if cfg.map_kind == MapKind::Procrustes && d_in != d_out {
            return Ok(AlignmentMap::Procrustes(fit_procrustes(src, dst)?));
        }
        return AlignmentMap::identity(cfg.map_kind, d_in, d_out, rng);
    }
    Ok(match cfg.map_kind {
        MapKind::Linear => AlignmentMap::Linear(fit_linear_map(src, dst, cfg.ridge)?),
        MapKind::Procrustes => AlignmentMap::Procrustes(fit_procrustes(src, dst)?),
        MapKind::Mlp => AlignmentMap::Mlp(MlpMap::new(fit_linear_map(src, dst, cfg.ridge)?, rng)),
    })
}

fn dir_state<'a, R: Rng + ?Sized>(
    src: &'a DMatrix<f64>,
    dst: &'a DMatrix<f64>,
    cfg: &AlignConfig,
    rng: &mut R,
) -> Result<DirState<'a>> {
    let map = init_map(src, dst, cfg, rng)?;
    let critic = (cfg.loss.lambda_info > 0.0).then(|| MineCritic::new(dst.ncols(), src.ncols(), &cfg.critic, rng));
    Ok(DirState {
        map,
        src,
        dst,
        critic,
        st_src: Standardizer::fit(src),
        st_dst: Standardizer::fit(dst),
        fixed_marginal: cfg.full_batch.then(|| permutation(rng, src.nrows())),
    })
}

fn batches<R: Rng + ?Sized>(n: usize, cfg: &AlignConfig, rng: &mut R) -> Vec<Vec<usize>> {
    if cfg.full_batch {
        return vec![(0..n).collect()];
    }
    permutation(rng, n)
        .chunks(cfg.loss.batch.min(n))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn adam_for(n: usize, lc: &LossConfig) -> Adam {
    Adam::new(
        n,
        AdamConfig {
            lr: lc.lr,
            beta1: lc.beta1,
            beta2: lc.beta2,
            eps: lc.eps,
        },
    )
}

fn diverged(step: usize, reason: &str, steps: &[StepLoss]) -> MsmaError {
    MsmaError::Diverged {
        step,
        reason: reason.into(),
        trace: steps.iter().map(|s| s.total).collect(),
    }
}

fn epoch_mean(epoch: usize, steps: &[StepLoss]) -> StepLoss {
    let n = steps.len().max(1) as f64;
    let m = |f: &dyn Fn(&StepLoss) -> f64| steps.iter().map(f).sum::<f64>() / n;
    StepLoss {
        epoch,
        geo: m(&|s| s.geo),
        info: m(&|s| s.info),
        curv: m(&|s| s.curv),
        cls: steps.iter().all(|s| s.cls.is_some()).then(|| m(&|s| s.cls.unwrap_or(0.0))),
        total: m(&|s| s.total),
    }
}

/// Labels for the `[global, mid, local]` heads from the manifest tasks.
/// Label columns of the `[global, mid, local]` tasks, when the manifest has all three.
pub fn scale_labels(stack: &LayerStack) -> Option<[Vec<u32>; 3]> {
    let pick = |s: Scale| {
        let t = stack.manifest.tasks.iter().find(|t| t.scale == s)?;
        stack.label(&t.name).map(|c| c.values.clone())
    };
    Some([pick(Scale::Global)?, pick(Scale::Intermediate)?, pick(Scale::Local)?])
}

/// Pool the stack at `boundaries` and train both maps.
pub fn train_alignment(
    stack: &LayerStack,
    boundaries: (usize, usize),
    cfg: &AlignConfig,
) -> Result<(TrainedMaps, AlignmentReport)> {
    let scales = pool_scales(stack, boundaries)?;
    let labels = scale_labels(stack);
    if cfg.heads && labels.is_none() {
        warn!("stack lacks global/intermediate/local label columns; classifier heads disabled");
    }
    let (maps, mut report) = train_on_scales(&scales, labels.as_ref(), cfg)?;
    report.boundaries = Some(boundaries);
    Ok((maps, report))
}

/// Train `f_GI` and `f_IL` on pooled scales. `labels` feed the heads in
/// `[global, mid, local]` order.
pub fn train_on_scales(
    s: &ScaleRepresentation,
    labels: Option<&[Vec<u32>; 3]>,
    cfg: &AlignConfig,
) -> Result<(TrainedMaps, AlignmentReport)> {
    cfg.validate()?;
    let n = s.global.nrows();
    if s.intermediate.nrows() != n || s.local.nrows() != n {
        return Err(MsmaError::DimensionMismatch("scales have different sample counts".into()));
    }
    if n < 4 {
        return Err(MsmaError::Precondition(format!("alignment needs at least 4 samples, got {n}")));
    }
    let mut r = rng(cfg.seed);
    let mut dirs: Vec<DirState> = Direction::BOTH
        .iter()
        .map(|d| {
            let (a, b) = d.scales();
            dir_state(s.get(a), s.get(b), cfg, &mut r)
        })
        .collect::<Result<_>>()?;

    let head_labels = if cfg.heads { labels } else { None };
    let mut heads = match head_labels {
        Some(y) => {
            let h = ClassifierHeads::new(s.global.ncols(), cfg.head_dims, cfg.tau, cfg.label_smoothing);
            h.check_labels([&y[0], &y[1], &y[2]])?;
            Some(h)
        }
        None => None,
    };

    let identity = |sc: Scale, to: Scale, r: &mut rand_chacha::ChaCha8Rng| {
        AlignmentMap::identity(MapKind::Linear, s.get(sc).ncols(), s.get(to).ncols(), r)
    };
    let baseline = if s.global.ncols() == s.intermediate.ncols() && s.intermediate.ncols() == s.local.ncols() {
        let mut br = rng(0);
        evaluate(
            0,
            &identity(Scale::Global, Scale::Intermediate, &mut br)?,
            &identity(Scale::Intermediate, Scale::Local, &mut br)?,
            s,
            cfg,
        )?
    } else {
        return Err(MsmaError::DimensionMismatch("pooled scales must share a width".into()));
    };

    let n_map: usize = dirs.iter().map(|d| d.map.n_params()).sum();
    let mut map_opt = adam_for(n_map, &cfg.loss);
    let mut head_opt = heads.as_ref().map(|h| adam_for(h.n_params(), &cfg.loss));

    let mut metrics = vec![evaluate(0, &dirs[0].map, &dirs[1].map, s, cfg)?];
    let mut steps: Vec<StepLoss> = Vec::new();
    let mut epoch_losses = Vec::new();
    for epoch in 1..=cfg.loss.epochs {
        let first = steps.len();
        for rows in batches(n, cfg, &mut r) {
            // heads see this step's mapped inputs, detached from the maps
            let head_inputs = heads.as_ref().map(|_| {
                [
                    select_rows(&s.global, &rows),
                    dirs[0].map.apply(&select_rows(&s.global, &rows)),
                    dirs[1].map.apply(&select_rows(&s.intermediate, &rows)),
                ]
            });
            let mut geo = 0.0;
            let mut info = 0.0;
            let mut curv = 0.0;
            let mut grads = Vec::with_capacity(n_map);
            for d in dirs.iter_mut() {
                let o = d.step(&rows, cfg, &mut r)?;
                geo += o.geo;
                info += o.info;
                curv += o.curv;
                grads.extend(o.grads);
            }
            let mut cls = None;
            if let (Some(h), Some(opt), Some(inp), Some(y)) =
                (heads.as_mut(), head_opt.as_mut(), head_inputs.as_ref(), head_labels)
            {
                let yb: Vec<Vec<u32>> = y.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect();
                let (l, g) = h.loss_and_grads(&HeadBatch {
                    inputs: [&inp[0], &inp[1], &inp[2]],
                    labels: [&yb[0], &yb[1], &yb[2]],
                });
                let mut p = h.params();
                opt.step(&mut p, &g);
                h.set_params(&p);
                cls = Some(l);
            }
            let total = cfg.loss.total(geo, info, curv) + cls.unwrap_or(0.0);
            steps.push(StepLoss {
                epoch,
                geo,
                info,
                curv,
                cls,
                total,
            });
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(steps.len() - 1, "non-finite loss or gradient", &steps));
            }
            if n_map > 0 {
                let mut p: Vec<f64> = dirs.iter().flat_map(|d| d.map.params()).collect();
                map_opt.step(&mut p, &grads);
                let mut off = 0;
                for d in dirs.iter_mut() {
                    let k = d.map.n_params();
                    d.map.set_params(&p[off..off + k]);
                    off += k;
                }
            }
        }
        let em = epoch_mean(epoch, &steps[first..]);
        debug!("epoch {epoch}: total {:.6} geo {:.6} info {:.6}", em.total, em.geo, em.info);
        epoch_losses.push(em);
        if cfg.metrics_every_epoch || epoch == cfg.loss.epochs {
            metrics.push(evaluate(epoch, &dirs[0].map, &dirs[1].map, s, cfg)?);
        }
    }
    if dirs.iter().any(|d| !d.map.is_finite()) {
        return Err(diverged(steps.len(), "non-finite map parameters", &steps));
    }

    let final_metrics = metrics.last().cloned().expect("initial metrics present");
    let eps_geo: f64 = dirs
        .iter()
        .map(|d| geo_loss(&d.map.apply(d.src), d.dst).map(|(l, _)| l))
        .sum::<Result<f64>>()?;
    let eps_info = (baseline.gm.mi - final_metrics.gm.mi).max(0.0) + (baseline.ml.mi - final_metrics.ml.mi).max(0.0);
    let total_kl = final_metrics.gm.kl + final_metrics.ml.kl;
    let denom = eps_geo + eps_info;
    let budget = ErrorBudget {
        eps_geo,
        eps_info,
        total_kl,
        c: (denom > 0.0).then(|| total_kl / denom),
    };

    let head_accuracy = match (&heads, head_labels) {
        (Some(h), Some(y)) => {
            let inputs = [s.global.clone(), dirs[0].map.apply(&s.global), dirs[1].map.apply(&s.intermediate)];
            Some(h.accuracy(&HeadBatch {
                inputs: [&inputs[0], &inputs[1], &inputs[2]],
                labels: [&y[0], &y[1], &y[2]],
            }))
        }
        _ => None,
    };
    let ib = match labels {
        Some(y) => {
            let seed = derive_seed(cfg.seed, 0x1B);
            Some([
                ib_objective_estimate(&s.global, &dirs[0].map.apply(&s.global), &y[1], cfg.loss.ib_beta, seed)?,
                ib_objective_estimate(&s.intermediate, &dirs[1].map.apply(&s.intermediate), &y[2], cfg.loss.ib_beta, seed)?,
            ])
        }
        None => None,
    };

    let mut it = dirs.into_iter().map(|d| d.map);
    let maps = TrainedMaps {
        gi: it.next().expect("two maps"),
        il: it.next().expect("two maps"),
        heads,
    };
    let report = AlignmentReport {
        config: cfg.clone(),
        boundaries: None,
        n_samples: n,
        baseline,
        steps,
        epoch_losses,
        metrics,
        final_metrics,
        budget,
        head_accuracy,
        ib,
    };
    Ok((maps, report))
}

/// Train a single MLP map `src → dst` under the configured loss (no heads).
/// Returns the map and the per-epoch mean total loss.
pub fn train_mlp_map(src: &DMatrix<f64>, dst: &DMatrix<f64>, cfg: &AlignConfig) -> Result<(AlignmentMap, Vec<f64>)> {
    cfg.validate()?;
    if src.nrows() != dst.nrows() {
        return Err(MsmaError::DimensionMismatch(format!("{} vs {} rows", src.nrows(), dst.nrows())));
    }
    let cfg = AlignConfig {
        map_kind: MapKind::Mlp,
        ..cfg.clone()
    };
    let mut r = rng(cfg.seed);
    let mut d = dir_state(src, dst, &cfg, &mut r)?;
    let mut opt = adam_for(d.map.n_params(), &cfg.loss);
    let mut trace = Vec::with_capacity(cfg.loss.epochs);
    let mut step = 0;
    for _ in 0..cfg.loss.epochs {
        let mut acc = 0.0;
        let mut count = 0;
        for rows in batches(src.nrows(), &cfg, &mut r) {
            let o = d.step(&rows, &cfg, &mut r)?;
            let total = cfg.loss.total(o.geo, o.info, o.curv);
            if !total.is_finite() || o.grads.iter().any(|g| !g.is_finite()) {
                return Err(MsmaError::Diverged {
                    step,
                    reason: "non-finite loss or gradient".into(),
                    trace,
                });
            }
            let mut p = d.map.params();
            opt.step(&mut p, &o.grads);
            d.map.set_params(&p);
            acc += total;
            count += 1;
            step += 1;
        }
        trace.push(acc / count.max(1) as f64);
    }
    Ok((d.map, trace))
}
