//! The ablation grid: component removals plus the `λ_geo` sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{fit_budget_constant, train_on_scales, AlignConfig, EpochMetrics, ErrorBudget};
use super::ScaleRepresentation;
use crate::numeric::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGroup {
    pub name: String,
    pub lambda_geo: f64,
    pub lambda_info: f64,
    pub lambda_curv: f64,
}

impl AblationGroup {
    pub fn new(name: &str, geo: f64, info: f64, curv: f64) -> Self {
        AblationGroup {
            name: name.into(),
            lambda_geo: geo,
            lambda_info: info,
            lambda_curv: curv,
        }
    }
}

/// Eight component groups followed by `geo-0.1 … geo-1.0` (geometry only).
pub fn default_grid() -> Vec<AblationGroup> {
    let mut g = vec![
        AblationGroup::new("baseline", 0.0, 0.0, 0.0),
        AblationGroup::new("full_msma", 0.1, 0.1, 0.01),
        AblationGroup::new("no_geo", 0.0, 0.1, 0.01),
        AblationGroup::new("no_info", 0.1, 0.0, 0.01),
        AblationGroup::new("no_curv", 0.1, 0.1, 0.0),
        AblationGroup::new("only_geo", 0.1, 0.0, 0.0),
        AblationGroup::new("only_info", 0.0, 0.1, 0.0),
        AblationGroup::new("only_curv", 0.0, 0.0, 0.01),
    ];
    for i in 1..=10 {
        let lam = i as f64 / 10.0;
        g.push(AblationGroup::new(&format!("geo-{}", format_lambda(lam)), lam, 0.0, 0.0));
    }
    g
}

fn format_lambda(v: f64) -> String {
    if v == 1.0 {
        "1".into()
    } else {
        format!("{v:.1}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: AblationGroup,
    pub seed: u64,
    pub metrics: Option<EpochMetrics>,
    pub budget: Option<ErrorBudget>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// `C` fitted over all successful runs.
    pub budget_c: Option<f64>,
}

pub const TABLE_HEADER: &str = "group,KL_gm,KL_ml,MI_gm,MI_ml,DC_gm,DC_ml";

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.group.name == name)
    }

    /// One line per group; failed cells print `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            match &r.metrics {
                Some(m) => out.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    r.group.name, m.gm.kl, m.ml.kl, m.gm.mi, m.ml.mi, m.gm.dc, m.ml.dc
                )),
                None => out.push_str(&format!("{},NA,NA,NA,NA,NA,NA\n", r.group.name)),
            }
        }
        out
    }
}

/// Train every group on the same scales. Cells run in parallel with seeds
/// derived from `(cfg.seed, cell index)`; a failing cell is recorded and
/// the rest continue.
pub fn run_ablation(
    scales: &ScaleRepresentation,
    labels: Option<&[Vec<u32>; 3]>,
    cfg: &AlignConfig,
    grid: &[AblationGroup],
) -> AblationReport {
    let rows: Vec<AblationRow> = grid
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let seed = derive_seed(cfg.seed, i as u64);
            let mut c = cfg.clone();
            c.seed = seed;
            c.loss = c.loss.clone().with_lambdas(g.lambda_geo, g.lambda_info, g.lambda_curv);
            match train_on_scales(scales, labels, &c) {
                Ok((_, rep)) => AblationRow {
                    group: g.clone(),
                    seed,
                    metrics: Some(rep.final_metrics),
                    budget: Some(rep.budget),
                    error: None,
                },
                Err(e) => AblationRow {
                    group: g.clone(),
                    seed,
                    metrics: None,
                    budget: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.budget.as_ref())
        .map(|b| (b.eps_geo + b.eps_info, b.total_kl))
        .collect();
    AblationReport {
        budget_c: fit_budget_constant(&points),
        rows,
    }
}
