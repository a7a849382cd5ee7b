//! The five subcommands. Each resolves its configuration, runs the matching
//! core pipeline, prints a human-readable summary, and leaves machine-readable
//! artifacts (plus their SHA-256 hashes and the resolved config) in the run
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use mrn_core::gradcheck;
use mrn_core::metrics::MetricsReport;
use mrn_core::mrn::{ClassLabel, MaskPattern, PatientSample};
use mrn_core::synth::{load_manifest, load_sample, write_dataset};
use mrn_core::train::{
    ensemble_predict, evaluate, evaluate_segmentation, kfold, load_model, masking_ablation, train,
    SegReport,
};
use mrn_core::{metrics, MrnError, ParamSet, Result};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{echo_config, RunConfig};

// ---- shared plumbing -------------------------------------------------------------

fn load_dataset(dir: &Path) -> Result<Vec<PatientSample<f32>>> {
    let manifest = load_manifest(dir)?;
    manifest.patients.par_iter().map(|e| load_sample::<f32>(dir, e)).collect()
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| MrnError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(2 * digest.len());
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

/// Print and record `sha256 <hex>  <relative path>` for each artifact.
fn log_hashes(run_dir: &Path, files: &[PathBuf]) -> Result<()> {
    let mut lines = String::new();
    for file in files {
        let hex = sha256_hex(file)?;
        let shown = file.strip_prefix(run_dir).unwrap_or(file);
        let line = format!("{hex}  {}", shown.display());
        println!("sha256 {line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    let path = run_dir.join("hashes.txt");
    fs::write(&path, lines).map_err(|e| MrnError::io(&path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| MrnError::Data(format!("encode {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| MrnError::io(path, e))
}

fn create_run_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MrnError::io(dir, e))
}

fn auc_text(auc: Option<f64>) -> String {
    auc.map_or_else(|| "na".to_string(), |v| format!("{v:.4}"))
}

fn print_metrics(tag: &str, m: &MetricsReport) {
    println!(
        "{tag}: n={} accuracy={:.4} f1_macro={:.4} roc_auc={}",
        m.n,
        m.accuracy,
        m.f1_macro,
        auc_text(m.roc_auc)
    );
}

fn print_seg(tag: &str, s: &SegReport) {
    let per: Vec<String> = s
        .per_roi
        .iter()
        .map(|d| d.map_or_else(|| "na".to_string(), |v| format!("{v:.4}")))
        .collect();
    println!("{tag}: mean_dice={:.4} per_roi=[{}]", s.mean_dice, per.join(", "));
}

// ---- synth -----------------------------------------------------------------------

pub fn cmd_synth(run: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let model = run.resolve_model()?;
    let synth = run.resolve_synth()?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| MrnError::io(out, e))?;
        if entries.next().is_some() && !force {
            return Err(MrnError::Data(format!(
                "output directory {} is not empty (pass --force to write anyway)",
                out.display()
            )));
        }
    }
    create_run_dir(out)?;
    let manifest = write_dataset(&synth, &model.specs, model.res.encoder.patch_size, out)?;
    let echo = echo_config(run, out)?;

    let mut counts = [0usize; 2];
    for entry in &manifest.patients {
        counts[entry.class_label()?.index()] += 1;
    }
    println!(
        "wrote {} patients ({} hc, {} pd) to {}",
        manifest.patients.len(),
        counts[0],
        counts[1],
        out.display()
    );
    log_hashes(out, &[out.join("manifest.json"), echo])
}

// ---- train -----------------------------------------------------------------------

#[derive(Serialize)]
struct FoldSummary {
    fold: usize,
    n_train: usize,
    n_val: usize,
    metrics: MetricsReport,
}

pub fn cmd_train(
    run: &RunConfig,
    data: &Path,
    out: &Path,
    val_data: Option<&Path>,
    folds: Option<usize>,
) -> Result<()> {
    let model = run.resolve_model()?;
    let tcfg = run.resolve_train(&model)?;
    let dataset = load_dataset(data)?;
    create_run_dir(out)?;
    let echo = echo_config(run, out)?;
    let external_val = val_data.map(load_dataset).transpose()?;

    let mut artifacts = vec![echo];
    match folds {
        None => {
            let outcome =
                train(&dataset, external_val.as_deref(), &model, &tcfg, Some(out))?;
            if let Some(rec) = outcome.records.last() {
                println!(
                    "final epoch {} ({}): loss_total={:.6} loss_cls={:.6} loss_seg={:.6} loss_cl={:.6}",
                    rec.epoch, rec.stage, rec.loss_total, rec.loss_cls, rec.loss_seg, rec.loss_cl
                );
                if let Some(m) = &rec.val_metrics {
                    print_metrics("validation", m);
                }
            }
            artifacts.push(out.join("train_log.jsonl"));
            artifacts.extend(outcome.checkpoints.iter().cloned());
        }
        Some(k) => {
            let labels: Vec<ClassLabel> = dataset.iter().map(|s| s.label).collect();
            let splits = kfold(&labels, k, tcfg.seed)?;
            let mut models: Vec<ParamSet<f32>> = Vec::with_capacity(k);
            let mut summaries = Vec::with_capacity(k);
            for (fold, (tr, va)) in splits.iter().enumerate() {
                let tr_set: Vec<PatientSample<f32>> =
                    tr.iter().map(|&i| dataset[i].clone()).collect();
                let va_set: Vec<PatientSample<f32>> =
                    va.iter().map(|&i| dataset[i].clone()).collect();
                let fold_dir = out.join(format!("fold_{fold}"));
                create_run_dir(&fold_dir)?;
                let outcome = train(&tr_set, Some(&va_set), &model, &tcfg, Some(&fold_dir))?;
                let m = evaluate(&outcome.params, &model, &va_set)?;
                print_metrics(&format!("fold {fold}"), &m);
                summaries.push(FoldSummary {
                    fold,
                    n_train: tr_set.len(),
                    n_val: va_set.len(),
                    metrics: m,
                });
                artifacts.push(fold_dir.join("train_log.jsonl"));
                artifacts.extend(outcome.checkpoints.iter().cloned());
                models.push(outcome.params);
            }
            let cv_path = out.join("cv_metrics.json");
            write_json(&cv_path, &summaries)?;
            artifacts.push(cv_path);

            if let Some(val) = &external_val {
                let refs: Vec<&ParamSet<f32>> = models.iter().collect();
                let probs: Vec<[f64; 2]> = val
                    .iter()
                    .map(|s| ensemble_predict(&refs, &model, s))
                    .collect::<Result<_>>()?;
                let truths: Vec<ClassLabel> = val.iter().map(|s| s.label).collect();
                let m = metrics::report(&probs, &truths)?;
                print_metrics("ensemble", &m);
                let path = out.join("ensemble_metrics.json");
                write_json(&path, &m)?;
                artifacts.push(path);
            }
        }
    }
    log_hashes(out, &artifacts)
}

// ---- eval ------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    epoch: usize,
    stage: u8,
    config_hash: String,
    metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    segmentation: Option<SegReport>,
}

pub fn cmd_eval(
    run: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
    with_seg: bool,
) -> Result<()> {
    let model = run.resolve_model()?;
    let (params, meta) = load_model(checkpoint)?;
    let dataset = load_dataset(data)?;
    println!(
        "checkpoint {}: epoch {}, stage {}, config {}",
        checkpoint.display(),
        meta.epoch,
        meta.stage,
        meta.config_hash
    );
    let m = evaluate(&params, &model, &dataset)?;
    print_metrics("classification", &m);
    let seg = if with_seg {
        let s = evaluate_segmentation(&params, &model, &dataset)?;
        print_seg("segmentation", &s);
        Some(s)
    } else {
        None
    };
    if let Some(dir) = out {
        create_run_dir(dir)?;
        let echo = echo_config(run, dir)?;
        let report = EvalReport {
            checkpoint: checkpoint.display().to_string(),
            epoch: meta.epoch,
            stage: meta.stage,
            config_hash: meta.config_hash.clone(),
            metrics: m,
            segmentation: seg,
        };
        let path = dir.join("metrics.json");
        write_json(&path, &report)?;
        log_hashes(dir, &[path, echo])?;
    }
    Ok(())
}

// ---- ablate ----------------------------------------------------------------------

fn mask_flag(masked: bool) -> &'static str {
    if masked {
        "1"
    } else {
        "0"
    }
}

pub fn cmd_ablate(run: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = run.resolve_model()?;
    let (params, _) = load_model(checkpoint)?;
    let dataset = load_dataset(data)?;
    let patterns = MaskPattern::all_patterns();
    let rows = masking_ablation(&params, &model, &dataset, &patterns)?;

    // Row 0 is the unmasked baseline; the rest line up with `patterns`.
    let flags = std::iter::once(MaskPattern { nm: false, qsm1: false, qsm2: false, qsm3: false })
        .chain(patterns.iter().copied());
    let mut csv = String::from("setting,mask_nm,mask_qsm1,mask_qsm2,mask_qsm3,n,accuracy,f1_macro,roc_auc\n");
    for (row, pat) in rows.iter().zip(flags) {
        let m = &row.metrics;
        println!(
            "{:<24} accuracy={:.4} f1_macro={:.4} roc_auc={}",
            row.setting,
            m.accuracy,
            m.f1_macro,
            auc_text(m.roc_auc)
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{}\n",
            row.setting,
            mask_flag(pat.nm),
            mask_flag(pat.qsm1),
            mask_flag(pat.qsm2),
            mask_flag(pat.qsm3),
            m.n,
            m.accuracy,
            m.f1_macro,
            m.roc_auc.map_or_else(|| "na".to_string(), |v| format!("{v:.6}")),
        ));
    }
    println!("{} rows", rows.len());

    create_run_dir(out)?;
    let echo = echo_config(run, out)?;
    let csv_path = out.join("ablation.csv");
    fs::write(&csv_path, csv).map_err(|e| MrnError::io(&csv_path, e))?;
    log_hashes(out, &[csv_path, echo])
}

// ---- gradcheck -------------------------------------------------------------------

pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<()> {
    let reports = gradcheck::run_suites(seed, corrupt)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<12} {:>4} coordinates  worst rel {:.3e} at {}  [{status}]",
            r.suite, r.checked, r.worst_rel, r.worst_at
        );
        if !r.passed() {
            failed.push(r.suite.clone());
        }
    }
    println!("{} suites checked, tolerance {:.0e}", reports.len(), gradcheck::TOLERANCE);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(MrnError::Numeric(format!(
            "analytic gradients diverge from finite differences in: {}",
            failed.join(", ")
        )))
    }
}
