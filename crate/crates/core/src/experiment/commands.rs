//! File-level commands behind the CLI. Every command writes its artifacts
//! plus a JSON sidecar holding the resolved config and the SHA-256 of every
//! input and output file. Sidecars name files relative to their directory so
//! reruns elsewhere produce identical bytes.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::pipeline::{
    finetune_config, generate_data, pretrain_config, resolve_epsilon, resolve_loss, resolve_margins, DataBundle,
};
use super::sweep::{
    aggregate, aggregate_csv, prepare_seeds, run_cells, select_gamma, sweep_cells, AggregateRow, RunRecord,
};
use crate::data::{Dataset, Role};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, compare_gaps, energy_gap_table, evaluate, EvalReport, GapComparison, ScoreKind, REPORT_CSV_HEADER,
};
use crate::losses::Variant;
use crate::model::{finetune_balanced, pretrain_standard, Mlp};
use crate::numfmt::to_json;
use crate::prior::{count_predictions, estimate_prior, generalize_prior, OodPrior};

pub const PRETRAINED_MODEL: &str = "model_pretrained.json";
pub const FINETUNED_MODEL: &str = "model_finetuned.json";
pub const PRIOR_FILE: &str = "prior.json";

/// A file name and the SHA-256 of its contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(FileDigest { file: file_name(path), sha256: sha256_hex(&bytes) })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<FileDigest> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(FileDigest { file: name.to_string(), sha256: sha256_hex(contents.as_bytes()) })
}

/// Config with all defaults materialized and the seed list reduced to `seed`.
fn run_config(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig { seeds: vec![seed], ..cfg.clone() }
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.seeds.first().copied().ok_or_else(|| Error::Validation("seeds must list at least one seed".into()))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    seed: Option<u64>,
    config: Value,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
    details: Value,
}

#[allow(clippy::too_many_arguments)]
fn write_sidecar(
    dir: &Path,
    name: &str,
    command: &str,
    cfg: &ExperimentConfig,
    seed: Option<u64>,
    inputs: &[FileDigest],
    outputs: &[FileDigest],
    details: Value,
) -> Result<()> {
    let s = Sidecar { command, seed, config: cfg.to_value(), inputs, outputs, details };
    write_file(dir, name, &to_json(&s)?)?;
    Ok(())
}

fn check_model(model: &Mlp, cfg: &ExperimentConfig, what: &Path) -> Result<()> {
    if model.num_classes() != cfg.data.num_classes || model.input_dim() != cfg.data.dim {
        return Err(Error::Validation(format!(
            "{} has input dim {} and K = {}, config expects {} and {}",
            what.display(),
            model.input_dim(),
            model.num_classes(),
            cfg.data.dim,
            cfg.data.num_classes
        )));
    }
    Ok(())
}

fn load_split(dir: &Path, name: &str, cfg: &ExperimentConfig) -> Result<(Dataset, FileDigest)> {
    let path = dir.join(format!("{name}.csv"));
    load_dataset(&path, DataBundle::role_of(name), cfg)
}

fn load_dataset(path: &Path, role: Role, cfg: &ExperimentConfig) -> Result<(Dataset, FileDigest)> {
    let k = role.is_id().then_some(cfg.data.num_classes);
    let d = Dataset::load_csv(path, role, k)?;
    if d.dim() != cfg.data.dim {
        return Err(Error::Validation(format!(
            "{} has {} features, config expects {}",
            path.display(),
            d.dim(),
            cfg.data.dim
        )));
    }
    Ok((d, digest_file(path)?))
}

fn load_model(path: &Path) -> Result<(Mlp, FileDigest)> {
    Ok((Mlp::load(path)?, digest_file(path)?))
}

/// Writes every split as CSV plus `manifest.json`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<FileDigest>> {
    let seed = first_seed(cfg)?;
    let data = generate_data(cfg, seed)?;
    let mut files = Vec::new();
    let mut rows = serde_json::Map::new();
    for name in DataBundle::SPLITS {
        let d = data.split(name).expect("known split");
        files.push(write_file(out, &format!("{name}.csv"), &d.to_csv())?);
        rows.insert(name.to_string(), json!(d.len()));
    }
    let details = json!({
        "spec": data.spec,
        "affinity": data.affinity,
        "class_sizes": data.spec.class_sizes(),
        "rows": rows,
    });
    write_sidecar(out, "manifest.json", "gen-data", &run_config(cfg, seed), Some(seed), &[], &files, details)?;
    log::info!("wrote {} splits to {}", files.len(), out.display());
    Ok(files)
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub acc_id_test: f64,
    /// Accuracy on the ID test samples of classes 0 and 1.
    pub acc_head: f64,
    pub final_loss: Option<f64>,
}

/// Standard cross-entropy training on `id_train.csv` from `data_dir`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<PretrainSummary> {
    let seed = first_seed(cfg)?;
    let (train, d_train) = load_split(data_dir, "id_train", cfg)?;
    let (test, d_test) = load_split(data_dir, "id_test", cfg)?;
    let (model, trace) = pretrain_standard(&train, cfg.data.num_classes, &pretrain_config(cfg, seed))?;
    let head_idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] <= 1).collect();
    let acc_head = if head_idx.is_empty() {
        f64::NAN
    } else {
        let head = Dataset::new(
            head_idx.iter().map(|&i| test.features[i].clone()).collect(),
            head_idx.iter().map(|&i| test.labels[i]).collect(),
            Role::IdTest,
        )?;
        accuracy(&model, &head)?
    };
    let summary = PretrainSummary {
        acc_id_test: accuracy(&model, &test)?,
        acc_head,
        final_loss: trace.epochs.last().map(|e| e.loss),
    };
    let outputs = [
        write_file(out, PRETRAINED_MODEL, &model.to_json()?)?,
        write_file(out, "pretrain_trace.csv", &trace.to_csv())?,
    ];
    write_sidecar(
        out,
        "pretrain.meta.json",
        "pretrain",
        &run_config(cfg, seed),
        Some(seed),
        &[d_train, d_test],
        &outputs,
        serde_json::to_value(&summary)?,
    )?;
    log::info!("pretrained: id_test acc {:.4}, head acc {:.4}", summary.acc_id_test, summary.acc_head);
    Ok(summary)
}

/// Counts the pretrained model's predictions on the auxiliary outliers and
/// writes the generalized prior.
pub fn cmd_estimate_prior(
    cfg: &ExperimentConfig,
    model_path: &Path,
    aux_path: &Path,
    gamma: f64,
    epsilon: Option<f64>,
    out: &Path,
) -> Result<OodPrior> {
    let (model, d_model) = load_model(model_path)?;
    check_model(&model, cfg, model_path)?;
    let (aux, d_aux) = load_dataset(aux_path, Role::OodAux, cfg)?;
    let counts = count_predictions(&model, &aux.features)?;
    let p = estimate_prior(&counts)?;
    let eps = match epsilon {
        Some(e) => e,
        None => resolve_epsilon(cfg, gamma, counts.total()),
    };
    let mut prior = generalize_prior(&p, gamma, eps)?;
    prior.counts = Some(counts.0.clone());
    let outputs = [write_file(out, PRIOR_FILE, &prior.to_json()?)?];
    let mut cfg = cfg.clone();
    cfg.loss.gamma = gamma;
    cfg.prior.epsilon = Some(eps);
    write_sidecar(out, "prior.meta.json", "estimate-prior", &cfg, None, &[d_model, d_aux], &outputs, Value::Null)?;
    log::info!("prior counts {:?}, p_gamma {:?}", counts.0, prior.p_gamma);
    Ok(prior)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub m_in: f64,
    pub m_out: f64,
    pub loss: crate::losses::LossConfig,
    pub final_loss: Option<f64>,
}

/// Fine-tunes the pretrained model. BalancedEnergy needs the prior file and
/// takes gamma from it; the other variants ignore it.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    model_path: &Path,
    prior_path: Option<&Path>,
    data_dir: &Path,
    out: &Path,
) -> Result<TrainSummary> {
    let seed = first_seed(cfg)?;
    let mut cfg = run_config(cfg, seed);
    let (pretrained, d_model) = load_model(model_path)?;
    check_model(&pretrained, &cfg, model_path)?;
    let (id_train, d_train) = load_split(data_dir, "id_train", &cfg)?;
    let (ood_aux, d_aux) = load_split(data_dir, "ood_aux", &cfg)?;
    let mut inputs = vec![d_model, d_train, d_aux];

    let prior = match (cfg.loss.variant, prior_path) {
        (Variant::BalancedEnergy, None) => {
            return Err(Error::Validation("balanced_energy needs a prior file (run estimate-prior)".into()))
        }
        (Variant::BalancedEnergy, Some(p)) => {
            let prior = OodPrior::load(p)?;
            inputs.push(digest_file(p)?);
            if prior.num_classes != cfg.data.num_classes {
                return Err(Error::Validation(format!(
                    "{} has K = {}, config expects {}",
                    p.display(),
                    prior.num_classes,
                    cfg.data.num_classes
                )));
            }
            if prior.gamma != cfg.loss.gamma {
                log::info!("using gamma {} from {} (config has {})", prior.gamma, p.display(), cfg.loss.gamma);
                cfg.loss.gamma = prior.gamma;
            }
            cfg.prior.epsilon = Some(prior.epsilon);
            Some(prior)
        }
        (v, Some(p)) => {
            log::warn!("variant {v:?} does not use a prior; ignoring {}", p.display());
            None
        }
        (_, None) => None,
    };

    let (m_in, m_out) = resolve_margins(&cfg, &pretrained, &id_train, &ood_aux)?;
    let loss = resolve_loss(&cfg, m_in, m_out)?;
    if let Some(msg) = loss.lint() {
        log::warn!("{msg}");
    }
    let (model, trace) =
        finetune_balanced(&pretrained, &id_train, &ood_aux, prior.as_ref(), &loss, &finetune_config(&cfg, seed))?;
    let summary = TrainSummary { m_in, m_out, loss, final_loss: trace.epochs.last().map(|e| e.loss) };
    let outputs =
        [write_file(out, FINETUNED_MODEL, &model.to_json()?)?, write_file(out, "finetune_trace.csv", &trace.to_csv())?];
    write_sidecar(
        out,
        "train.meta.json",
        "train",
        &cfg,
        Some(seed),
        &inputs,
        &outputs,
        serde_json::to_value(&summary)?,
    )?;
    log::info!("fine-tuned with m_in {m_in:.4}, m_out {m_out:.4}, alpha {:.4}", summary.loss.alpha);
    Ok(summary)
}

/// One report per score kind, written as `<name>_<score>.json` and `.csv`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    model_path: &Path,
    id_path: &Path,
    ood_path: &Path,
    scores: &[ScoreKind],
    name: &str,
    out: &Path,
) -> Result<Vec<EvalReport>> {
    if scores.is_empty() {
        return Err(Error::Validation("at least one score kind is needed".into()));
    }
    let seed = first_seed(cfg)?;
    let cfg = run_config(cfg, seed);
    let (model, d_model) = load_model(model_path)?;
    check_model(&model, &cfg, model_path)?;
    let (id, d_id) = load_dataset(id_path, Role::IdTest, &cfg)?;
    let (ood, d_ood) = load_dataset(ood_path, Role::OodTest, &cfg)?;
    let provenance = json!({ "model": d_model, "id": d_id, "ood": d_ood });
    let mut reports = Vec::new();
    for &kind in scores {
        let mut r = evaluate(&model, &id, &ood, kind, cfg.loss.temperature)?;
        r.seed = Some(seed);
        r.config = cfg.to_value();
        r.provenance = provenance.clone();
        let stem = format!("{name}_{}", kind.name());
        write_file(out, &format!("{stem}.json"), &r.to_json()?)?;
        write_file(out, &format!("{stem}.csv"), &format!("{REPORT_CSV_HEADER}\n{}\n", r.csv_row()))?;
        log::info!("{stem}: auroc {:.4} ap {:.4} fpr95 {:.4} acc {:.4}", r.auroc, r.ap, r.fpr95, r.acc);
        reports.push(r);
    }
    Ok(reports)
}

/// Compares the class-wise total energy gaps of two models on one test pair.
pub fn cmd_gap_analysis(
    cfg: &ExperimentConfig,
    baseline_path: &Path,
    ours_path: &Path,
    id_path: &Path,
    ood_path: &Path,
    out: &Path,
) -> Result<GapComparison> {
    let (baseline, d_base) = load_model(baseline_path)?;
    let (ours, d_ours) = load_model(ours_path)?;
    if baseline.num_classes() != ours.num_classes() {
        return Err(Error::Validation(format!(
            "models disagree on K: {} vs {}",
            baseline.num_classes(),
            ours.num_classes()
        )));
    }
    check_model(&baseline, cfg, baseline_path)?;
    check_model(&ours, cfg, ours_path)?;
    let (id, d_id) = load_dataset(id_path, Role::IdTest, cfg)?;
    let (ood, d_ood) = load_dataset(ood_path, Role::OodTest, cfg)?;
    let t = cfg.loss.temperature;
    let cmp = compare_gaps(&energy_gap_table(&baseline, &id, &ood, t)?, &energy_gap_table(&ours, &id, &ood, t)?)?;
    let outputs = [write_file(out, "gap_analysis.csv", &cmp.to_csv())?];
    write_sidecar(
        out,
        "gap_analysis.meta.json",
        "gap-analysis",
        cfg,
        None,
        &[d_base, d_ours, d_id, d_ood],
        &outputs,
        json!({ "sum_diff": cmp.sum_diff }),
    )?;
    log::info!("sum of total-gap differences (baseline - ours): {:.4}", cmp.sum_diff);
    Ok(cmp)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub rows: Vec<AggregateRow>,
    pub best_gamma: Option<f64>,
}

const RUNS_CSV_HEADER: &str =
    "cell,gamma,margin_on,weight_on,seed,run_dir,status,val_auroc,auroc,ap,fpr95,acc,sum_total_gap,error";

/// Directory name of one run: a hash of its resolved config.
pub fn run_dir_name(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(to_json(&cfg.to_value())?.as_bytes())[..16].to_string())
}

/// Every sweep cell for every seed. Per-run outputs go to `runs/<hash>/`,
/// per-seed pretrained models to `seeds/<seed>/`, and `aggregate.csv`,
/// `runs.csv` and `sweep.meta.json` to the sweep root.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<SweepResult> {
    if cfg.sweep.gammas.is_empty() {
        return Err(Error::Validation("sweep.gammas must list at least one gamma".into()));
    }
    if cfg.sweep.gammas.iter().any(|g| !g.is_finite()) {
        return Err(Error::Validation("sweep.gammas must be finite".into()));
    }
    let contexts = prepare_seeds(cfg, jobs)?;
    for (ctx, seed) in contexts.iter().zip(&cfg.seeds) {
        match ctx {
            Ok(ctx) => {
                let dir = out.join("seeds").join(seed.to_string());
                write_file(&dir, PRETRAINED_MODEL, &ctx.pretrained.to_json()?)?;
                write_file(&dir, "pretrain_trace.csv", &ctx.pretrain_trace.to_csv())?;
                let details =
                    json!({ "counts": ctx.counts.0, "prior_p": ctx.prior_p, "m_in": ctx.m_in, "m_out": ctx.m_out });
                write_file(&dir, "seed.json", &to_json(&details)?)?;
            }
            Err(e) => log::warn!("seed {seed}: {e}"),
        }
    }
    let cells = sweep_cells(cfg);
    let records = run_cells(cfg, &contexts, &cells, jobs)?;

    let mut runs_csv = format!("{RUNS_CSV_HEADER}\n");
    for r in &records {
        let run_cfg = run_config(&r.cell.apply(cfg), r.seed);
        let name = run_dir_name(&run_cfg)?;
        let dir = out.join("runs").join(&name);
        write_file(&dir, "config.json", &run_cfg.to_json()?)?;
        let head = format!(
            "{},{},{},{},{},runs/{name}",
            r.cell.label(),
            crate::numfmt::g17(r.cell.gamma),
            r.cell.margin_on,
            r.cell.weight_on,
            r.seed
        );
        match &r.outcome {
            Ok(o) => {
                write_file(&dir, "model.json", &o.model.to_json()?)?;
                write_file(&dir, "trace.csv", &o.trace.to_csv())?;
                write_file(&dir, "loss.json", &to_json(&o.loss)?)?;
                if let Some(p) = &o.prior {
                    write_file(&dir, PRIOR_FILE, &p.to_json()?)?;
                }
                for (split, rep) in [("val", &o.val), ("test", &o.test)] {
                    let mut rep = rep.clone();
                    rep.seed = Some(r.seed);
                    rep.config = run_cfg.to_value();
                    rep.provenance = json!({ "cell": r.cell.label(), "split": split });
                    write_file(&dir, &format!("report_{split}.json"), &rep.to_json()?)?;
                }
                let g = crate::numfmt::g17;
                runs_csv.push_str(&format!(
                    "{head},ok,{},{},{},{},{},{},\n",
                    g(o.val.auroc),
                    g(o.test.auroc),
                    g(o.test.ap),
                    g(o.test.fpr95),
                    g(o.test.acc),
                    g(o.test.sum_total_gap)
                ));
            }
            Err(e) => {
                write_file(&dir, "error.txt", &format!("{e}\n"))?;
                runs_csv.push_str(&format!("{head},failed,,,,,,,\"{}\"\n", e.replace('"', "'")));
            }
        }
    }
    let rows = aggregate(&records);
    let best_gamma = select_gamma(&rows, &cfg.sweep.gammas);
    let outputs = [write_file(out, "aggregate.csv", &aggregate_csv(&rows))?, write_file(out, "runs.csv", &runs_csv)?];
    let failed = records.iter().filter(|r| r.ok().is_none()).count();
    write_sidecar(
        out,
        "sweep.meta.json",
        "sweep",
        cfg,
        None,
        &[],
        &outputs,
        json!({ "runs": records.len(), "failed": failed, "best_gamma_by_val_auroc": best_gamma }),
    )?;
    log::info!("sweep: {} runs, {failed} failed, best gamma by val AUROC {best_gamma:?}", records.len());
    Ok(SweepResult { records, rows, best_gamma })
}
