use std::fs;
use std::path::Path;

use balanced_energy::data::{Dataset, Role};
use balanced_energy::eval::ScoreKind;
use balanced_energy::experiment::*;
use balanced_energy::losses::Variant;
use balanced_energy::math::energy_score;
use balanced_energy::model::{Activation, Mlp};
use balanced_energy::prior::OodPrior;
use balanced_energy::Error;
use serde_json::Value;
use tempfile::TempDir;

/// Small enough that a full chain takes well under a second.
fn small() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
        "data": {"n_head": 200, "n_test_per_class": 40, "n_val_per_class": 20,
                 "aux": {"n": 400}, "n_test_ood": 200, "n_val_ood": 100},
        "model": {"hidden": [16]},
        "pretrain": {"epochs": 15, "batch_size": 64},
        "finetune": {"epochs": 3, "batch_in": 64, "batch_out": 64},
        "seeds": [7]
    }"#,
    )
    .unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&read(p)).unwrap()
}

/// Data plus pretrained model in one directory.
fn stage(cfg: &ExperimentConfig) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_data(cfg, dir.path()).unwrap();
    cmd_pretrain(cfg, dir.path(), dir.path()).unwrap();
    dir
}

fn rows(p: &Path) -> usize {
    read(p).lines().count() - 1
}

#[test]
fn gen_data_row_counts_follow_the_long_tail_rule() {
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_data(&cfg, dir.path()).unwrap();
    // K = 5, n_head = 1000, rho = 100: round(1000 * 100^(-i/4))
    let expected = [1000, 316, 100, 32, 10];
    let train = Dataset::load_csv(&dir.path().join("id_train.csv"), Role::IdTrain, Some(5)).unwrap();
    assert_eq!(train.class_sizes(5), expected);
    assert_eq!(rows(&dir.path().join("id_test.csv")), 5 * 200);
    assert_eq!(rows(&dir.path().join("id_val.csv")), 5 * 100);
    assert_eq!(rows(&dir.path().join("ood_aux.csv")), 2000);
    assert_eq!(rows(&dir.path().join("ood_test.csv")), 1000);
    assert_eq!(rows(&dir.path().join("ood_val.csv")), 500);
    let header = read(&dir.path().join("ood_aux.csv")).lines().next().unwrap().to_string();
    assert_eq!(header, "x0,x1,label");
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["details"]["rows"]["id_train"], 1458);
    assert_eq!(manifest["config"]["data"]["rho"], 100.0);
}

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let cfg = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_gen_data(&cfg, a.path()).unwrap();
    cmd_gen_data(&cfg, b.path()).unwrap();
    for name in DataBundle::SPLITS.iter().map(|s| format!("{s}.csv")).chain(["manifest.json".to_string()]) {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn rho_below_one_is_rejected() {
    let err = ExperimentConfig::from_json(r#"{"data": {"rho": 0.9}}"#).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn pretrain_reaches_head_accuracy_on_defaults() {
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_data(&cfg, dir.path()).unwrap();
    let s = cmd_pretrain(&cfg, dir.path(), dir.path()).unwrap();
    assert!(s.acc_head >= 0.90, "head accuracy {}", s.acc_head);
    let trace = read(&dir.path().join("pretrain_trace.csv"));
    assert_eq!(trace.lines().count(), 1 + cfg.pretrain.epochs);
}

#[test]
fn zero_pretrain_epochs_leaves_the_init() {
    let mut cfg = small();
    cfg.pretrain.epochs = 0;
    let dir = stage(&cfg);
    let got = Mlp::load(&dir.path().join(PRETRAINED_MODEL)).unwrap();
    let fresh = Mlp::init(&[2, 16, 5], Activation::Tanh, 7).unwrap();
    assert_eq!(got, fresh);
}

#[test]
fn missing_inputs_are_not_found() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_pretrain(&cfg, dir.path(), dir.path()).unwrap_err();
    assert!(matches!(&err, Error::NotFound(p) if p.ends_with("id_train.csv")), "{err}");
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("run the earlier pipeline stage"));
}

#[test]
fn one_hot_affinity_prior_points_at_its_class() {
    let mut cfg = small();
    cfg.data.aux.affinity = AffinityRule::Explicit(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    let dir = stage(&cfg);
    let prior = cmd_estimate_prior(
        &cfg,
        &dir.path().join(PRETRAINED_MODEL),
        &dir.path().join("ood_aux.csv"),
        1.0,
        None,
        dir.path(),
    )
    .unwrap();
    let argmax = (0..5).max_by(|&a, &b| prior.p[a].total_cmp(&prior.p[b])).unwrap();
    assert_eq!(argmax, 2, "{:?}", prior.p);
    assert_eq!(prior.counts.as_ref().unwrap().iter().sum::<u64>(), 400);
}

#[test]
fn zero_gamma_prior_is_exactly_uniform_on_disk() {
    let cfg = small();
    let dir = stage(&cfg);
    cmd_estimate_prior(
        &cfg,
        &dir.path().join(PRETRAINED_MODEL),
        &dir.path().join("ood_aux.csv"),
        0.0,
        None,
        dir.path(),
    )
    .unwrap();
    let v = json(&dir.path().join(PRIOR_FILE));
    for x in v["p_gamma"].as_array().unwrap() {
        assert_eq!(x.as_f64().unwrap(), 0.2);
    }
    let back = OodPrior::load(&dir.path().join(PRIOR_FILE)).unwrap();
    assert!(back.p_gamma.iter().all(|&x| x == 1.0 / 5.0));
}

#[test]
fn aux_file_with_class_labels_is_rejected() {
    let cfg = small();
    let dir = stage(&cfg);
    let err = cmd_estimate_prior(
        &cfg,
        &dir.path().join(PRETRAINED_MODEL),
        &dir.path().join("id_train.csv"),
        1.0,
        None,
        dir.path(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("not allowed for role"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

fn train_into(cfg: &ExperimentConfig, stage: &Path, prior: Option<&Path>) -> (TempDir, TrainSummary) {
    let out = tempfile::tempdir().unwrap();
    let s = cmd_train(cfg, &stage.join(PRETRAINED_MODEL), prior, stage, out.path()).unwrap();
    (out, s)
}

fn estimate(cfg: &ExperimentConfig, dir: &Path, gamma: f64) -> std::path::PathBuf {
    cmd_estimate_prior(cfg, &dir.join(PRETRAINED_MODEL), &dir.join("ood_aux.csv"), gamma, None, dir).unwrap();
    dir.join(PRIOR_FILE)
}

#[test]
fn oe_ignores_the_prior() {
    let mut cfg = small();
    cfg.loss.variant = Variant::Oe;
    let dir = stage(&cfg);
    let prior = estimate(&cfg, dir.path(), 1.0);
    let (with, _) = train_into(&cfg, dir.path(), Some(&prior));
    let (without, _) = train_into(&cfg, dir.path(), None);
    assert_eq!(read(&with.path().join(FINETUNED_MODEL)), read(&without.path().join(FINETUNED_MODEL)));
}

#[test]
fn balanced_without_a_prior_is_a_validation_error() {
    let cfg = small();
    let dir = stage(&cfg);
    let out = tempfile::tempdir().unwrap();
    let err = cmd_train(&cfg, &dir.path().join(PRETRAINED_MODEL), None, dir.path(), out.path()).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

#[test]
fn components_off_at_zero_gamma_reproduce_energy_oe() {
    let cfg = small();
    let dir = stage(&cfg);
    let mut base = cfg.clone();
    base.loss.variant = Variant::EnergyOe;
    base.loss.alpha = AlphaRule::Value(0.0);
    let mut off = base.clone();
    off.loss.variant = Variant::BalancedEnergy;
    off.loss.gamma = 0.0;
    off.loss.margin_on = false;
    off.loss.weight_on = false;
    let prior = estimate(&off, dir.path(), 0.0);
    let (a, _) = train_into(&base, dir.path(), None);
    let (b, sb) = train_into(&off, dir.path(), Some(&prior));
    assert_eq!(sb.loss.alpha, 0.0);
    assert_eq!(read(&a.path().join(FINETUNED_MODEL)), read(&b.path().join(FINETUNED_MODEL)));
    assert_eq!(read(&a.path().join("finetune_trace.csv")), read(&b.path().join("finetune_trace.csv")));
}

#[test]
fn training_is_deterministic() {
    let cfg = small();
    let dir = stage(&cfg);
    let prior = estimate(&cfg, dir.path(), cfg.loss.gamma);
    let (a, _) = train_into(&cfg, dir.path(), Some(&prior));
    let (b, _) = train_into(&cfg, dir.path(), Some(&prior));
    assert_eq!(fs::read(a.path().join(FINETUNED_MODEL)).unwrap(), fs::read(b.path().join(FINETUNED_MODEL)).unwrap());
    let meta = json(&a.path().join("train.meta.json"));
    assert_eq!(meta["config"]["loss"]["gamma"], cfg.loss.gamma);
    assert_eq!(meta["config"]["prior"]["epsilon"], 0.0);
}

/// Linear-interpolation percentile over a freshly sorted copy.
fn percentile_oracle(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[test]
fn percentile_margins_recompute_on_reload() {
    let cfg = small();
    let dir = stage(&cfg);
    let prior = estimate(&cfg, dir.path(), cfg.loss.gamma);
    let (_, s) = train_into(&cfg, dir.path(), Some(&prior));
    let model = Mlp::load(&dir.path().join(PRETRAINED_MODEL)).unwrap();
    let energies = |split: &str, role| -> Vec<f64> {
        let d = Dataset::load_csv(&dir.path().join(split), role, Some(5)).unwrap();
        d.features.iter().map(|x| energy_score(&model.forward(x).unwrap(), 1.0).unwrap()).collect()
    };
    assert_eq!(s.m_in, percentile_oracle(energies("id_train.csv", Role::IdTrain), 80.0));
    assert_eq!(s.m_out, percentile_oracle(energies("ood_aux.csv", Role::OodAux), 20.0));
    let (_, again) = train_into(&cfg, dir.path(), Some(&prior));
    assert_eq!((s.m_in, s.m_out), (again.m_in, again.m_out));
}

fn eval_into(cfg: &ExperimentConfig, dir: &Path, model: &str, scores: &[ScoreKind], name: &str) -> Vec<Value> {
    cmd_eval(cfg, &dir.join(model), &dir.join("id_test.csv"), &dir.join("ood_test.csv"), scores, name, dir).unwrap();
    scores.iter().map(|k| json(&dir.join(format!("{name}_{}.json", k.name())))).collect()
}

#[test]
fn energy_and_msp_reports_are_separate_files() {
    let cfg = small();
    let dir = stage(&cfg);
    let r = eval_into(&cfg, dir.path(), PRETRAINED_MODEL, &[ScoreKind::Energy, ScoreKind::Msp], "report");
    assert_eq!(r[0]["score"], "energy");
    assert_eq!(r[1]["score"], "msp");
    assert_ne!(read(&dir.path().join("report_energy.json")), read(&dir.path().join("report_msp.json")));
    let csv = read(&dir.path().join("report_msp.csv"));
    assert!(csv.starts_with("score,seed,auroc,ap,fpr95,acc,sum_total_gap\nmsp,7,"));
}

#[test]
fn pretrained_and_finetuned_reports_share_dataset_hashes() {
    let cfg = small();
    let dir = stage(&cfg);
    let prior = estimate(&cfg, dir.path(), cfg.loss.gamma);
    cmd_train(&cfg, &dir.path().join(PRETRAINED_MODEL), Some(&prior), dir.path(), dir.path()).unwrap();
    let pre = &eval_into(&cfg, dir.path(), PRETRAINED_MODEL, &[ScoreKind::Energy], "pre")[0];
    let fine = &eval_into(&cfg, dir.path(), FINETUNED_MODEL, &[ScoreKind::Energy], "fine")[0];
    for key in ["id", "ood"] {
        assert_eq!(pre["provenance"][key], fine["provenance"][key]);
        assert_eq!(pre["provenance"][key]["sha256"].as_str().unwrap().len(), 64);
    }
    assert_ne!(pre["provenance"]["model"], fine["provenance"]["model"]);
    assert_eq!(pre["config"]["seeds"], serde_json::json!([7]));
}

fn validator(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema").join(name);
    jsonschema::validator_for(&json(&path)).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn artifacts_validate_against_their_schemas() {
    let cfg = small();
    let dir = stage(&cfg);
    let prior = estimate(&cfg, dir.path(), cfg.loss.gamma);
    cmd_train(&cfg, &dir.path().join(PRETRAINED_MODEL), Some(&prior), dir.path(), dir.path()).unwrap();
    let reports = eval_into(&cfg, dir.path(), FINETUNED_MODEL, &[ScoreKind::Energy, ScoreKind::Msp], "report");
    let report_schema = validator("eval_report.schema.json");
    for r in &reports {
        assert_valid(&report_schema, r);
    }
    assert_valid(&validator("prior.schema.json"), &json(&prior));
    let model_schema = validator("model.schema.json");
    assert_valid(&model_schema, &json(&dir.path().join(PRETRAINED_MODEL)));
    assert_valid(&model_schema, &json(&dir.path().join(FINETUNED_MODEL)));

    let mut broken = reports[0].clone();
    broken.as_object_mut().unwrap().remove("fpr95");
    assert!(!report_schema.is_valid(&broken));
    broken = reports[0].clone();
    broken["energy_gap"][0]["n_out"] = Value::from(-1);
    assert!(!report_schema.is_valid(&broken));
}

fn hand_mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn sweep_over_two_gammas_and_six_seeds() {
    let mut cfg = small();
    cfg.seeds = (0..6).collect();
    cfg.sweep.gammas = vec![0.0, 0.75];
    cfg.sweep.include_baseline = false;
    let out = tempfile::tempdir().unwrap();
    let res = cmd_sweep(&cfg, out.path(), 3).unwrap();
    assert_eq!(res.records.len(), 12);
    assert!(res.records.iter().all(|r| r.ok().is_some()));
    assert_eq!(res.rows.len(), 2);
    for (row, gamma) in res.rows.iter().zip([0.0, 0.75]) {
        assert_eq!(row.cell.gamma, gamma);
        let vals: Vec<f64> =
            res.records.iter().filter(|r| r.cell.gamma == gamma).map(|r| r.ok().unwrap().test.auroc).collect();
        assert_eq!(vals.len(), 6);
        let (m, s) = hand_mean_std(&vals);
        assert!((row.auroc.mean.unwrap() - m).abs() < 1e-12);
        assert!((row.auroc.std.unwrap() - s).abs() < 1e-12);
    }
    let agg = read(&out.path().join("aggregate.csv"));
    assert_eq!(agg.lines().count(), 3);
    assert_eq!(rows(&out.path().join("runs.csv")), 12);
    let run_dirs = fs::read_dir(out.path().join("runs")).unwrap().count();
    assert_eq!(run_dirs, 12);
    let meta = json(&out.path().join("sweep.meta.json"));
    assert_eq!(meta["command"], "sweep");

    let serial = tempfile::tempdir().unwrap();
    cmd_sweep(&cfg, serial.path(), 1).unwrap();
    assert_eq!(agg, read(&serial.path().join("aggregate.csv")));
}

#[test]
fn sweep_needs_a_gamma() {
    let mut cfg = small();
    cfg.sweep.gammas.clear();
    let err = cmd_sweep(&cfg, tempfile::tempdir().unwrap().path(), 1).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

#[test]
fn singular_cells_fail_alone() {
    let mut cfg = small();
    cfg.seeds = vec![0, 1];
    // every aux sample sits next to class 0, so the other counts are zero
    cfg.data.aux.affinity = AffinityRule::Explicit(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    cfg.prior.epsilon = Some(0.0);
    cfg.sweep.gammas = vec![0.5, -0.5];
    let out = tempfile::tempdir().unwrap();
    let res = cmd_sweep(&cfg, out.path(), 2).unwrap();
    assert_eq!(res.records.len(), 6);
    for seed in [0, 1] {
        let counts = json(&out.path().join(format!("seeds/{seed}/seed.json")))["counts"].clone();
        assert!(counts.as_array().unwrap().iter().any(|c| c == 0), "seed {seed} counts {counts}");
    }
    for r in &res.records {
        match r.cell.gamma {
            g if g < 0.0 => {
                assert!(r.outcome.as_ref().unwrap_err().contains("singular"), "{:?}", r.outcome.as_ref().err())
            }
            _ => assert!(r.ok().is_some(), "{} seed {}", r.cell.label(), r.seed),
        }
    }
    let failed = res.rows.iter().find(|row| row.cell.gamma < 0.0).unwrap();
    assert_eq!((failed.n_ok, failed.n_failed), (0, 2));
    assert_eq!(res.best_gamma, Some(0.5));
    let errors = fs::read_dir(out.path().join("runs"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("error.txt").exists());
    assert_eq!(errors.count(), 2);
}

#[test]
fn gap_analysis_of_a_model_against_itself() {
    let cfg = small();
    let dir = stage(&cfg);
    let m = dir.path().join(PRETRAINED_MODEL);
    let cmp =
        cmd_gap_analysis(&cfg, &m, &m, &dir.path().join("id_test.csv"), &dir.path().join("ood_test.csv"), dir.path())
            .unwrap();
    assert!(cmp.rows.iter().all(|r| r.diff == 0.0));
    assert_eq!(cmp.sum_diff, 0.0);
    let csv = read(&dir.path().join("gap_analysis.csv"));
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("sum,"), "{last}");
    assert_eq!(csv.lines().count(), 1 + 5 + 1);
}

#[test]
fn gap_analysis_rejects_mismatched_class_counts() {
    let cfg = small();
    let dir = stage(&cfg);
    let other = dir.path().join("k3.json");
    Mlp::init(&[2, 16, 3], Activation::Tanh, 1).unwrap().save(&other).unwrap();
    let err = cmd_gap_analysis(
        &cfg,
        &dir.path().join(PRETRAINED_MODEL),
        &other,
        &dir.path().join("id_test.csv"),
        &dir.path().join("ood_test.csv"),
        dir.path(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}
