//! Multi-seed, multi-cell runs with per-run error isolation and
//! order-stable aggregation.

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::pipeline::{prepare_seed, run_finetune, CellSpec, RunOutput, SeedContext};
use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::numfmt::g17;

/// Runs `f` on a pool of `jobs` threads (0 means rayon's default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Cells implied by the sweep options: optional EnergyOE baseline, then one
/// balanced cell per gamma (or the four margin/weight cells per gamma).
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let mut cells = Vec::new();
    if cfg.sweep.include_baseline {
        cells.push(CellSpec::energy_oe());
    }
    for &g in &cfg.sweep.gammas {
        if cfg.sweep.ablation_grid {
            cells.extend(ablation_cells(g));
        } else {
            cells.push(CellSpec::balanced(g));
        }
    }
    cells
}

/// The four {margin, weight} x {on, off} cells at one gamma.
pub fn ablation_cells(gamma: f64) -> [CellSpec; 4] {
    let c = |margin_on, weight_on| CellSpec { margin_on, weight_on, ..CellSpec::balanced(gamma) };
    [c(true, true), c(true, false), c(false, true), c(false, false)]
}

fn variant_rank(v: Variant) -> u8 {
    match v {
        Variant::EnergyOe => 0,
        Variant::Oe => 1,
        Variant::BalancedEnergy => 2,
    }
}

/// Canonical cell order: gamma, then variant, then enabled components first.
pub fn cell_order(a: &CellSpec, b: &CellSpec) -> std::cmp::Ordering {
    a.gamma
        .total_cmp(&b.gamma)
        .then(variant_rank(a.variant).cmp(&variant_rank(b.variant)))
        .then(b.margin_on.cmp(&a.margin_on))
        .then(b.weight_on.cmp(&a.weight_on))
}

pub fn prepare_seeds(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<Result<SeedContext>>> {
    with_jobs(jobs, || cfg.seeds.par_iter().map(|&s| prepare_seed(cfg, s)).collect())
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub cell: CellSpec,
    pub seed: u64,
    pub outcome: std::result::Result<RunOutput, String>,
}

impl RunRecord {
    pub fn ok(&self) -> Option<&RunOutput> {
        self.outcome.as_ref().ok()
    }
}

/// Every (cell, seed) pair, sorted by cell then seed. A failing seed context
/// or run is recorded and does not stop the others.
pub fn run_cells(
    cfg: &ExperimentConfig,
    contexts: &[Result<SeedContext>],
    cells: &[CellSpec],
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    let mut cells = cells.to_vec();
    cells.sort_by(cell_order);
    cells.dedup();
    let pairs: Vec<(CellSpec, &Result<SeedContext>, u64)> =
        cells.iter().flat_map(|c| contexts.iter().zip(&cfg.seeds).map(move |(ctx, &s)| (*c, ctx, s))).collect();
    with_jobs(jobs, || {
        pairs
            .par_iter()
            .map(|(cell, ctx, seed)| {
                let outcome = match ctx {
                    Ok(ctx) => run_finetune(&cell.apply(cfg), ctx).map_err(|e| e.to_string()),
                    Err(e) => Err(format!("seed setup failed: {e}")),
                };
                if let Err(e) = &outcome {
                    log::warn!("{} seed {seed}: {e}", cell.label());
                }
                RunRecord { cell: *cell, seed: *seed, outcome }
            })
            .collect()
    })
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub cell: CellSpec,
    pub label: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub val_auroc: Stat,
    pub auroc: Stat,
    pub ap: Stat,
    pub fpr95: Stat,
    pub acc: Stat,
    pub sum_total_gap: Stat,
}

pub const AGGREGATE_CSV_HEADER: &str = "cell,variant,gamma,margin_on,weight_on,n_ok,n_failed,\
val_auroc_mean,val_auroc_std,auroc_mean,auroc_std,ap_mean,ap_std,fpr95_mean,fpr95_std,\
acc_mean,acc_std,sum_total_gap_mean,sum_total_gap_std";

fn opt(x: Option<f64>) -> String {
    x.map(g17).unwrap_or_default()
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Oe => "oe",
        Variant::EnergyOe => "energy_oe",
        Variant::BalancedEnergy => "balanced_energy",
    }
}

impl AggregateRow {
    pub fn csv_row(&self) -> String {
        let mut f = vec![
            self.label.clone(),
            variant_name(self.cell.variant).to_string(),
            g17(self.cell.gamma),
            self.cell.margin_on.to_string(),
            self.cell.weight_on.to_string(),
            self.n_ok.to_string(),
            self.n_failed.to_string(),
        ];
        for s in [&self.val_auroc, &self.auroc, &self.ap, &self.fpr95, &self.acc, &self.sum_total_gap] {
            f.push(opt(s.mean));
            f.push(opt(s.std));
        }
        f.join(",")
    }
}

/// One row per cell, in the order the cells first appear in `records`.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut cells: Vec<CellSpec> = Vec::new();
    for r in records {
        if !cells.contains(&r.cell) {
            cells.push(r.cell);
        }
    }
    cells
        .into_iter()
        .map(|cell| {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.cell == cell).collect();
            let ok: Vec<&RunOutput> = runs.iter().filter_map(|r| r.ok()).collect();
            let col = |f: &dyn Fn(&RunOutput) -> f64| Stat::of(&ok.iter().map(|o| f(o)).collect::<Vec<_>>());
            AggregateRow {
                cell,
                label: cell.label(),
                n_ok: ok.len(),
                n_failed: runs.len() - ok.len(),
                val_auroc: col(&|o| o.val.auroc),
                auroc: col(&|o| o.test.auroc),
                ap: col(&|o| o.test.ap),
                fpr95: col(&|o| o.test.fpr95),
                acc: col(&|o| o.test.acc),
                sum_total_gap: col(&|o| o.test.sum_total_gap),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from(AGGREGATE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Gamma of the fully enabled balanced cell with the highest mean validation
/// AUROC among `candidates`; only cells with no failed runs qualify, and ties
/// go to the smaller gamma.
pub fn select_gamma(rows: &[AggregateRow], candidates: &[f64]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    let mut eligible: Vec<&AggregateRow> = rows
        .iter()
        .filter(|r| {
            r.cell.variant == Variant::BalancedEnergy
                && r.cell.margin_on
                && r.cell.weight_on
                && r.n_failed == 0
                && candidates.contains(&r.cell.gamma)
        })
        .collect();
    eligible.sort_by(|a, b| a.cell.gamma.total_cmp(&b.cell.gamma));
    for r in eligible {
        if let Some(v) = r.val_auroc.mean {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((r.cell.gamma, v));
            }
        }
    }
    best.map(|(g, _)| g)
}
