//! OOD detection metrics, accuracy and the class-wise energy gap analysis.
//!
//! Orientation: OOD is the positive class and a higher score means "more
//! OOD". Energy is used as is; MSP is negated.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{energy_score, msp_score};
use crate::model::Mlp;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if id_scores.is_empty() || ood_scores.is_empty() {
            return Err(Error::empty("both ID and OOD scores are required"));
        }
        if id_scores.iter().chain(&ood_scores).any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(ScoreSet { id_scores, ood_scores })
    }
}

/// `(score, is_ood)` sorted by descending score; inside a tie, ID first.
fn ranked(s: &ScoreSet) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> =
        s.id_scores.iter().map(|&x| (x, false)).chain(s.ood_scores.iter().map(|&x| (x, true))).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    all
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half (Mann-Whitney U over `n_id * n_ood`).
pub fn auroc(s: &ScoreSet) -> f64 {
    let all = ranked(s);
    let (n_id, n_ood) = (s.id_scores.len() as f64, s.ood_scores.len() as f64);
    // walk tie groups from the top; count ID samples strictly below each OOD
    let mut u = 0.0;
    let mut id_above = 0usize;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut g_id, mut g_ood) = (0usize, 0usize);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                g_ood += 1;
            } else {
                g_id += 1;
            }
            j += 1;
        }
        let id_below = s.id_scores.len() - id_above - g_id;
        u += g_ood as f64 * (id_below as f64 + 0.5 * g_id as f64);
        id_above += g_id;
        i = j;
    }
    u / (n_id * n_ood)
}

/// Average precision of the OOD-positive ranking, ties resolved with ID
/// samples first (the conservative order).
pub fn average_precision(s: &ScoreSet) -> f64 {
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &(_, is_ood)) in ranked(s).iter().enumerate() {
        if is_ood {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    sum / s.ood_scores.len() as f64
}

/// FPR at the largest threshold `t` whose TPR(score >= t) reaches `level`.
pub fn fpr_at_tpr(s: &ScoreSet, level: f64) -> Result<f64> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::invalid(format!("TPR level must lie in (0, 1], got {level}")));
    }
    let mut ood = s.ood_scores.clone();
    ood.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let n = ood.len();
    // the k-th largest OOD score is the threshold once k / n >= level
    let k = (1..=n).find(|&k| k as f64 / n as f64 >= level).unwrap_or(n);
    let t = ood[k - 1];
    let fp = s.id_scores.iter().filter(|&&x| x >= t).count();
    Ok(fp as f64 / s.id_scores.len() as f64)
}

/// Fraction of argmax-correct predictions (ties to the lowest class).
pub fn accuracy(model: &Mlp, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::empty("accuracy of an empty dataset"));
    }
    let labels = d.class_labels()?;
    let mut correct = 0usize;
    for (x, &y) in d.features.iter().zip(&labels) {
        if model.forward(x)?.argmax() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / d.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub class: usize,
    pub n_id: usize,
    pub n_out: usize,
    pub mean_id_energy: Option<f64>,
    pub mean_ood_energy: Option<f64>,
    /// `mean_id - mean_ood`; `None` when the class has no ID or no OOD members.
    pub gap: Option<f64>,
    /// `gap * n_out`, zero when the gap is undefined.
    pub total_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyGapTable {
    pub rows: Vec<GapRow>,
    pub sum_total_gap: f64,
}

/// Energies of the ID samples grouped by label and of the OOD samples grouped
/// by predicted class.
pub fn energy_gap_table(
    model: &Mlp,
    id_test: &Dataset,
    ood_test: &Dataset,
    temperature: f64,
) -> Result<EnergyGapTable> {
    if id_test.is_empty() || ood_test.is_empty() {
        return Err(Error::empty("energy gap needs nonempty ID and OOD sets"));
    }
    let k = model.num_classes();
    let labels = id_test.class_labels()?;
    let mut id_sum = vec![0.0; k];
    let mut id_n = vec![0usize; k];
    for (x, &y) in id_test.features.iter().zip(&labels) {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for K = {k}")));
        }
        id_sum[y] += energy_score(&model.forward(x)?, temperature)?;
        id_n[y] += 1;
    }
    let mut ood_sum = vec![0.0; k];
    let mut ood_n = vec![0usize; k];
    for x in &ood_test.features {
        let logits = model.forward(x)?;
        let c = logits.argmax();
        ood_sum[c] += energy_score(&logits, temperature)?;
        ood_n[c] += 1;
    }
    let rows: Vec<GapRow> = (0..k)
        .map(|c| {
            let mean_id = (id_n[c] > 0).then(|| id_sum[c] / id_n[c] as f64);
            let mean_ood = (ood_n[c] > 0).then(|| ood_sum[c] / ood_n[c] as f64);
            let gap = mean_id.zip(mean_ood).map(|(a, b)| a - b);
            GapRow {
                class: c,
                n_id: id_n[c],
                n_out: ood_n[c],
                mean_id_energy: mean_id,
                mean_ood_energy: mean_ood,
                gap,
                total_gap: gap.map_or(0.0, |g| g * ood_n[c] as f64),
            }
        })
        .collect();
    let sum_total_gap = rows.iter().map(|r| r.total_gap).sum();
    Ok(EnergyGapTable { rows, sum_total_gap })
}

/// Per-class comparison of two gap tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDiffRow {
    pub class: usize,
    pub baseline_gap: Option<f64>,
    pub baseline_n_out: usize,
    pub baseline_total_gap: f64,
    pub ours_gap: Option<f64>,
    pub ours_n_out: usize,
    pub ours_total_gap: f64,
    /// `baseline_total_gap - ours_total_gap`. Gaps are ID minus OOD energy and
    /// negative when the two are separated, so a positive difference means
    /// ours separates the class more.
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapComparison {
    pub rows: Vec<GapDiffRow>,
    pub baseline_sum: f64,
    pub ours_sum: f64,
    pub sum_diff: f64,
}

pub const GAP_CSV_HEADER: &str =
    "class,baseline_gap,baseline_n_out,baseline_total_gap,ours_gap,ours_n_out,ours_total_gap,total_gap_diff";

pub fn compare_gaps(baseline: &EnergyGapTable, ours: &EnergyGapTable) -> Result<GapComparison> {
    if baseline.rows.len() != ours.rows.len() {
        return Err(Error::Validation(format!(
            "models disagree on the number of classes: {} vs {}",
            baseline.rows.len(),
            ours.rows.len()
        )));
    }
    let rows: Vec<GapDiffRow> = baseline
        .rows
        .iter()
        .zip(&ours.rows)
        .map(|(b, o)| GapDiffRow {
            class: b.class,
            baseline_gap: b.gap,
            baseline_n_out: b.n_out,
            baseline_total_gap: b.total_gap,
            ours_gap: o.gap,
            ours_n_out: o.n_out,
            ours_total_gap: o.total_gap,
            diff: b.total_gap - o.total_gap,
        })
        .collect();
    let sum_diff = rows.iter().map(|r| r.diff).sum();
    Ok(GapComparison { rows, baseline_sum: baseline.sum_total_gap, ours_sum: ours.sum_total_gap, sum_diff })
}

impl GapComparison {
    /// One row per class followed by a `sum` row.
    pub fn to_csv(&self) -> String {
        use crate::numfmt::g17;
        let opt = |x: Option<f64>| x.map(g17).unwrap_or_default();
        let mut s = format!("{GAP_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.class,
                opt(r.baseline_gap),
                r.baseline_n_out,
                g17(r.baseline_total_gap),
                opt(r.ours_gap),
                r.ours_n_out,
                g17(r.ours_total_gap),
                g17(r.diff)
            ));
        }
        s.push_str(&format!("sum,,,{},,,{},{}\n", g17(self.baseline_sum), g17(self.ours_sum), g17(self.sum_diff)));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Energy,
    Msp,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Energy => "energy",
            ScoreKind::Msp => "msp",
        }
    }
}

/// Detection scores for every sample of `d`, oriented higher = more OOD.
pub fn detection_scores(model: &Mlp, d: &Dataset, kind: ScoreKind, temperature: f64) -> Result<Vec<f64>> {
    d.features
        .iter()
        .map(|x| {
            let l = model.forward(x)?;
            match kind {
                ScoreKind::Energy => energy_score(&l, temperature),
                ScoreKind::Msp => Ok(-msp_score(&l)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGapRow {
    pub class: usize,
    pub gap: Option<f64>,
    pub n_out: usize,
    pub total_gap: f64,
}

/// Metrics of one model on one (ID test, OOD test) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score: ScoreKind,
    pub temperature: f64,
    pub auroc: f64,
    pub ap: f64,
    pub fpr95: f64,
    pub acc: f64,
    pub energy_gap: Vec<ReportGapRow>,
    pub sum_total_gap: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub const REPORT_CSV_HEADER: &str = "score,seed,auroc,ap,fpr95,acc,sum_total_gap";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        use crate::numfmt::g17;
        format!(
            "{},{},{},{},{},{},{}",
            self.score.name(),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            g17(self.auroc),
            g17(self.ap),
            g17(self.fpr95),
            g17(self.acc),
            g17(self.sum_total_gap)
        )
    }

    pub fn to_json(&self) -> Result<String> {
        crate::numfmt::to_json(self)
    }
}

/// All metrics plus the energy gap table. The gap table always uses energy,
/// whatever the detection score.
pub fn evaluate(
    model: &Mlp,
    id_test: &Dataset,
    ood_test: &Dataset,
    score: ScoreKind,
    temperature: f64,
) -> Result<EvalReport> {
    let scores = ScoreSet::new(
        detection_scores(model, id_test, score, temperature)?,
        detection_scores(model, ood_test, score, temperature)?,
    )?;
    let table = energy_gap_table(model, id_test, ood_test, temperature)?;
    Ok(EvalReport {
        score,
        temperature,
        auroc: auroc(&scores),
        ap: average_precision(&scores),
        fpr95: fpr_at_tpr(&scores, 0.95)?,
        acc: accuracy(model, id_test)?,
        energy_gap: table
            .rows
            .iter()
            .map(|r| ReportGapRow { class: r.class, gap: r.gap, n_out: r.n_out, total_gap: r.total_gap })
            .collect(),
        sum_total_gap: table.sum_total_gap,
        seed: None,
        config: serde_json::Value::Null,
        provenance: serde_json::Value::Null,
    })
}
