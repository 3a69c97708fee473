//! Deterministic evaluation: per-sequence and aggregate metrics with
//! CSV/JSON reports (schema-versioned, stamped with the config hash and
//! seed). No post-processing is applied to predictions; reports say so.

use std::path::Path;

use serde::Serialize;

use stremn_core::memory::PolicyKind;
use stremn_core::model::{PredModel, TaskKind, VosModel};
use stremn_core::scalar::Scalar;
use stremn_core::tensor::Tensor;
use stremn_tasks::metrics::{self, MetricsRecord};
use stremn_tasks::SequenceSample;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rollout::{pred_rollout, vos_rollout_multi, RolloutLog};
use crate::train::derive_seed;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub task: String,
    pub policy: String,
    pub config_hash: String,
    pub seed: u64,
    pub post_processing: &'static str,
    pub sequences: Vec<MetricsRecord>,
    pub aggregate: MetricsRecord,
}

/// Evaluate a VOS model over samples; J/F averaged over objects and over
/// frames 1..T (frame 0 carries the given ground truth).
pub fn evaluate_vos<T: Scalar>(
    model: &VosModel<T>,
    samples: &[SequenceSample],
    policy: PolicyKind,
    cfg: &RunConfig,
) -> Result<(EvalReport, Vec<RolloutLog>)> {
    let mut records = Vec::new();
    let mut logs = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        if !sample.fully_annotated() {
            return Err(Error::Contract(format!(
                "sequence '{}' lacks per-frame ground truth needed for J/F",
                sample.name
            )));
        }
        let seed = derive_seed(cfg.seed, "eval-roll", i as u64);
        let (pred_labels, log) = vos_rollout_multi(model, sample, policy, seed)?;
        logs.push(log);
        records.push(score_vos_sequence(sample, &pred_labels));
    }
    let aggregate = aggregate_records(&records, cfg.task);
    Ok((
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            task: cfg.task.name().to_string(),
            policy: policy.name().to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            post_processing: "none",
            sequences: records,
            aggregate,
        },
        logs,
    ))
}

/// J/F of predicted label maps (frames 1..T) against ground truth.
pub fn score_vos_sequence(sample: &SequenceSample, pred_labels: &[Vec<u8>]) -> MetricsRecord {
    let (h, w) = sample.spatial();
    let tol = metrics::default_boundary_tol(h, w);
    let mut j_total = 0.0;
    let mut f_total = 0.0;
    let mut per_frame = Vec::with_capacity(pred_labels.len());
    let mut count = 0usize;
    for (t, pred) in pred_labels.iter().enumerate() {
        let frame_idx = t + 1;
        let mut j_frame = 0.0;
        for label in 1..=sample.object_count as u8 {
            let gt = sample.object_mask(frame_idx, label).expect("annotated");
            let pm: Vec<bool> = pred.iter().map(|&v| v == label).collect();
            let j = metrics::metric_j(&pm, &gt);
            let f = metrics::metric_f(&pm, &gt, h, w, tol);
            j_total += j;
            f_total += f;
            j_frame += j;
            count += 1;
        }
        per_frame.push(j_frame / sample.object_count as f64);
    }
    MetricsRecord {
        name: sample.name.clone(),
        j_mean: Some(j_total / count as f64),
        f_mean: Some(f_total / count as f64),
        per_frame,
        ..Default::default()
    }
}

/// Evaluate a prediction model: per-sequence MSE/MAE/SSIM/PSNR over the
/// predicted horizon.
pub fn evaluate_pred<T: Scalar>(
    model: &PredModel<T>,
    samples: &[SequenceSample],
    policy: PolicyKind,
    cfg: &RunConfig,
) -> Result<(EvalReport, Vec<RolloutLog>)> {
    let mut records = Vec::new();
    let mut logs = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let seed = derive_seed(cfg.seed, "eval-roll", i as u64);
        let (preds, log) = pred_rollout(model, sample, cfg.eval_observed, policy, seed)?;
        logs.push(log);
        let preds32: Vec<Tensor<f32>> = preds.iter().map(|p| p.cast::<f32>()).collect();
        let gt: Vec<Tensor<f32>> = sample.frames[cfg.eval_observed..].to_vec();
        let (mse, mae, ssim, psnr) = metrics::metric_prediction(&preds32, &gt)?;
        let per_frame: Vec<f64> = preds32
            .iter()
            .zip(gt.iter())
            .map(|(p, g)| {
                p.data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / p.len() as f64
            })
            .collect();
        records.push(MetricsRecord {
            name: sample.name.clone(),
            mse: Some(mse),
            mae: Some(mae),
            ssim: Some(ssim),
            psnr: Some(psnr),
            per_frame,
            ..Default::default()
        });
    }
    let aggregate = aggregate_records(&records, cfg.task);
    Ok((
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            task: cfg.task.name().to_string(),
            policy: policy.name().to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            post_processing: "none",
            sequences: records,
            aggregate,
        },
        logs,
    ))
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = values.flatten().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn aggregate_records(records: &[MetricsRecord], _task: TaskKind) -> MetricsRecord {
    MetricsRecord {
        name: "aggregate".to_string(),
        j_mean: mean_of(records.iter().map(|r| r.j_mean)),
        f_mean: mean_of(records.iter().map(|r| r.f_mean)),
        mse: mean_of(records.iter().map(|r| r.mse)),
        mae: mean_of(records.iter().map(|r| r.mae)),
        ssim: mean_of(records.iter().map(|r| r.ssim)),
        psnr: mean_of(records.iter().map(|r| r.psnr)),
        per_frame: Vec::new(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.6}", x)).unwrap_or_default()
}

/// CSV: header, one row per sequence, one trailing aggregate row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("sequence,j,f,mse,mae,ssim,psnr\n");
    for rec in report.sequences.iter().chain(std::iter::once(&report.aggregate)) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.name,
            fmt_opt(rec.j_mean),
            fmt_opt(rec.f_mean),
            fmt_opt(rec.mse),
            fmt_opt(rec.mae),
            fmt_opt(rec.ssim),
            fmt_opt(rec.psnr),
        ));
    }
    out
}

pub fn write_reports(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), report_csv(report))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Contract(format!("report encode: {}", e)))?;
    std::fs::write(dir.join("report.json"), json)?;
    Ok(())
}

/// Slot-count sweep: evaluate the same weights with K in `k_range`,
/// returning `(k, mean J)` rows.
pub fn sweep_k<T: Scalar>(
    model: &VosModel<T>,
    samples: &[SequenceSample],
    cfg: &RunConfig,
    k_range: std::ops::RangeInclusive<usize>,
) -> Result<Vec<(usize, f64)>> {
    let mut rows = Vec::new();
    for k in k_range {
        let mut m = model.clone();
        m.cfg.k_slots = k;
        let mut sweep_cfg = cfg.clone();
        sweep_cfg.k_slots = k;
        let (report, _) = evaluate_vos(&m, samples, cfg.policy, &sweep_cfg)?;
        rows.push((k, report.aggregate.j_mean.unwrap_or(0.0)));
    }
    Ok(rows)
}
