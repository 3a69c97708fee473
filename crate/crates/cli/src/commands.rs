//! Subcommand bodies, kept in the library so tests can drive them.

use std::path::{Path, PathBuf};

use stremn_core::memory::snapshot::save_bank;
use stremn_core::model::{PredModel, TaskKind, VosModel};
use stremn_core::scalar::Scalar;
use stremn_core::Dtype;
use stremn_tasks::davis;
use stremn_tasks::SequenceSample;

use crate::analyze::{analyze_memory, histogram_csv};
use crate::bench::{bench_complexity, report_csv as bench_csv};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_pred, evaluate_vos, sweep_k, write_reports};
use crate::rollout::{load_logs, pred_rollout, save_log, vos_rollout_multi, RolloutLog};
use crate::train::{derive_seed, eval_pool, load_model_checkpoint, train};

/// Training or evaluation data per the config: a DAVIS-style tree when
/// `data.root` is set, synthetic sequences otherwise.
pub fn load_eval_dataset(cfg: &RunConfig) -> Result<Vec<SequenceSample>> {
    match &cfg.data_root {
        Some(root) => {
            let loaded = davis::load_davis_style(root)?;
            Ok(loaded.into_iter().map(|l| l.sample).collect())
        }
        None => eval_pool(cfg),
    }
}

pub fn cmd_train(config: &Path, sets: &[String]) -> Result<()> {
    let cfg = RunConfig::load(Some(config), sets)?;
    let report = match cfg.precision {
        Dtype::F32 => train::<f32>(&cfg, None)?,
        Dtype::F64 => train::<f64>(&cfg, None)?,
    };
    let first = report.loss_series.first().copied().unwrap_or(0.0);
    let last = report.loss_series.last().copied().unwrap_or(0.0);
    println!(
        "trained {} steps: loss {:.5} -> {:.5}; checkpoint {}",
        report.loss_series.len(),
        first,
        last,
        report.final_checkpoint.display()
    );
    Ok(())
}

fn eval_with<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, sweep: bool) -> Result<()> {
    let samples = load_eval_dataset(cfg)?;
    let (report, logs) = match cfg.task {
        TaskKind::Vos => {
            let mut model: VosModel<T> =
                VosModel::new(cfg.model_config(), derive_seed(cfg.seed, "init", 0))?;
            load_model_checkpoint(&mut model, checkpoint)?;
            let out = evaluate_vos(&model, &samples, cfg.policy, cfg)?;
            if sweep {
                let rows = sweep_k(&model, &samples, cfg, 3..=7)?;
                let mut csv = String::from("k,j_mean\n");
                for (k, j) in &rows {
                    csv.push_str(&format!("{},{:.6}\n", k, j));
                }
                std::fs::create_dir_all(&cfg.out_dir)?;
                std::fs::write(cfg.out_dir.join("sweep-k.csv"), csv)?;
            }
            out
        }
        TaskKind::Pred => {
            let mut model: PredModel<T> =
                PredModel::new(cfg.model_config(), derive_seed(cfg.seed, "init", 0))?;
            load_model_checkpoint(&mut model, checkpoint)?;
            if sweep {
                return Err(Error::Config("--sweep-k applies to the vos task".into()));
            }
            evaluate_pred(&model, &samples, cfg.policy, cfg)?
        }
    };
    write_reports(&report, &cfg.out_dir)?;
    if cfg.log_memory {
        write_log_bundle(&logs, &cfg.out_dir.join("memory-log.json"))?;
    }
    let agg = &report.aggregate;
    match cfg.task {
        TaskKind::Vos => println!(
            "evaluated {} sequences: J {:.4}, F {:.4}",
            report.sequences.len(),
            agg.j_mean.unwrap_or(0.0),
            agg.f_mean.unwrap_or(0.0)
        ),
        TaskKind::Pred => println!(
            "evaluated {} sequences: MSE {:.5}, MAE {:.5}, SSIM {:.4}, PSNR {:.2}",
            report.sequences.len(),
            agg.mse.unwrap_or(0.0),
            agg.mae.unwrap_or(0.0),
            agg.ssim.unwrap_or(0.0),
            agg.psnr.unwrap_or(0.0)
        ),
    }
    Ok(())
}

pub fn cmd_eval(config: &Path, checkpoint: &Path, sweep: bool, sets: &[String]) -> Result<()> {
    let cfg = RunConfig::load(Some(config), sets)?;
    match cfg.precision {
        Dtype::F32 => eval_with::<f32>(&cfg, checkpoint, sweep),
        Dtype::F64 => eval_with::<f64>(&cfg, checkpoint, sweep),
    }
}

fn predict_with<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let samples = load_eval_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let bank_dir = cfg.out_dir.join("banks");
    std::fs::create_dir_all(&bank_dir)?;
    let mut logs: Vec<RolloutLog> = Vec::new();
    match cfg.task {
        TaskKind::Vos => {
            let mut model: VosModel<T> =
                VosModel::new(cfg.model_config(), derive_seed(cfg.seed, "init", 0))?;
            load_model_checkpoint(&mut model, checkpoint)?;
            for (i, sample) in samples.iter().enumerate() {
                let seed = derive_seed(cfg.seed, "predict", i as u64);
                let (labels, log) = vos_rollout_multi(&model, sample, cfg.policy, seed)?;
                let (h, w) = sample.spatial();
                let dir = cfg.out_dir.join("Masks").join(&sample.name);
                std::fs::create_dir_all(&dir)?;
                write_mask_png(&dir.join("00000.png"), &sample.masks[0], h, w)?;
                for (t, mask) in labels.iter().enumerate() {
                    write_mask_png(&dir.join(format!("{:05}.png", t + 1)), mask, h, w)?;
                }
                save_final_bank(&model, sample, cfg, &bank_dir)?;
                logs.push(log);
            }
        }
        TaskKind::Pred => {
            let mut model: PredModel<T> =
                PredModel::new(cfg.model_config(), derive_seed(cfg.seed, "init", 0))?;
            load_model_checkpoint(&mut model, checkpoint)?;
            for (i, sample) in samples.iter().enumerate() {
                let seed = derive_seed(cfg.seed, "predict", i as u64);
                let (frames, log) = pred_rollout(&model, sample, cfg.eval_observed, cfg.policy, seed)?;
                let out = SequenceSample {
                    name: sample.name.clone(),
                    frames: frames.iter().map(|f| f.cast::<f32>()).collect(),
                    masks: vec![],
                    object_count: 0,
                    seed: sample.seed,
                };
                davis::save_sequence(&out, &cfg.out_dir)?;
                logs.push(log);
            }
        }
    }
    write_log_bundle(&logs, &cfg.out_dir.join("memory-log.json"))?;
    println!("wrote predictions for {} sequences under {}", samples.len(), cfg.out_dir.display());
    Ok(())
}

/// Run one eval rollout on the first object and snapshot the final bank
/// (container + JSON sidecar).
fn save_final_bank<T: Scalar>(
    model: &VosModel<T>,
    sample: &SequenceSample,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<()> {
    use stremn_core::memory::Mode;
    use stremn_core::model::StepRng;
    let mut rng = StepRng::new(derive_seed(cfg.seed, "bank-snap", 0));
    let frame0 = sample.frames[0].cast::<T>();
    let mask0 = sample
        .object_mask_tensor(0, 1)
        .ok_or_else(|| Error::Contract("missing frame-0 mask".into()))?
        .cast::<T>();
    let mut state = model.init_state(&frame0, &mask0, cfg.policy)?;
    for t in 1..sample.len() {
        let frame = sample.frames[t].cast::<T>();
        model.step(&mut state, &frame, Mode::Eval, &mut rng, None)?;
    }
    save_bank(&state.bank, cfg.policy, &dir.join(format!("{}.strm", sample.name)))?;
    Ok(())
}

fn write_mask_png(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let img = image_from_labels(mask, h, w)?;
    img.save(path).map_err(|e| Error::Contract(format!("cannot encode {}: {}", path.display(), e)))
}

fn image_from_labels(mask: &[u8], h: usize, w: usize) -> Result<image::GrayImage> {
    image::GrayImage::from_raw(w as u32, h as u32, mask.to_vec())
        .ok_or_else(|| Error::Contract("mask buffer size mismatch".into()))
}

pub fn cmd_predict(config: &Path, checkpoint: &Path, sets: &[String]) -> Result<()> {
    let cfg = RunConfig::load(Some(config), sets)?;
    match cfg.precision {
        Dtype::F32 => predict_with::<f32>(&cfg, checkpoint),
        Dtype::F64 => predict_with::<f64>(&cfg, checkpoint),
    }
}

pub fn cmd_bench(config: Option<&Path>, t_list: &[usize], sets: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config, sets)?;
    if t_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bench -t values must be strictly increasing".into()));
    }
    let report = bench_complexity(&cfg, t_list, 9)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("bench.csv"), bench_csv(&report))?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("bench encode: {}", e)))?;
    std::fs::write(cfg.out_dir.join("bench.json"), json)?;
    for row in &report.rows {
        println!(
            "{:<24} T={:<5} read {:>10.3} ms  update {:>10.3} ms  peak {} slots",
            row.variant,
            row.t,
            row.read_seconds * 1e3,
            row.update_seconds * 1e3,
            row.peak_slots
        );
    }
    Ok(())
}

pub fn cmd_analyze_memory(log: &Path, out: Option<&Path>) -> Result<()> {
    let logs = load_logs(log)?;
    let report = analyze_memory(&logs)?;
    let weights = report.histogram.normalized();
    println!("distance histogram over {} samples (K={})", report.histogram.total, report.histogram.k);
    for (d, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            println!("  t={:<4} weight {:.4}", d, w);
        }
    }
    for bank in &report.final_banks {
        println!(
            "final bank of '{}' at query {}: frames {:?}, distances {:?}",
            bank.video, bank.query_frame, bank.slot_frames, bank.distances
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("memory-histogram.csv"), histogram_csv(&report))?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Contract(format!("analysis encode: {}", e)))?;
        std::fs::write(dir.join("memory-analysis.json"), json)?;
    }
    Ok(())
}

pub fn cmd_gen_data(
    seed: u64,
    out: &Path,
    count: usize,
    config: Option<&Path>,
    sets: &[String],
) -> Result<()> {
    let mut cfg = RunConfig::load(config, sets)?;
    cfg.seed = seed;
    let synth = cfg.synth_config();
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let sample = stremn_tasks::gen_moving_shapes(&synth, derive_seed(seed, "gen-data", i as u64))?;
        davis::save_sequence(&sample, out)?;
    }
    let meta = serde_json::json!({
        "seed": seed,
        "count": count,
        "canvas": synth.canvas,
        "frames": synth.frames,
        "objects": synth.object_count,
        "appearance_switches": synth.appearance_switches,
        "occlusions": synth.occlusions,
        "noise": synth.noise,
    });
    std::fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta).unwrap())?;
    println!("wrote {} sequences under {}", count, out.display());
    Ok(())
}

pub fn cmd_gradcheck(precision: u32, seed: u64) -> Result<()> {
    if precision != 64 {
        return Err(Error::Config(format!(
            "gradcheck contract requires 64-bit precision (finite differences drown in {}-bit rounding)",
            precision
        )));
    }
    let rows = stremn_core::gradcheck::full_suite(seed, 5);
    let mut all_pass = true;
    println!("{:<32} {:>14} {:>10}  status", "operation", "max_rel_err", "tolerance");
    for row in &rows {
        println!(
            "{:<32} {:>14.3e} {:>10.0e}  {}",
            row.name,
            row.max_rel_err,
            row.tolerance,
            if row.pass { "pass" } else { "FAIL" }
        );
        all_pass &= row.pass;
    }
    if !all_pass {
        return Err(Error::Contract("gradient suite has failures".into()));
    }
    println!("all {} checks pass", rows.len());
    Ok(())
}

fn write_log_bundle(logs: &[RolloutLog], path: &Path) -> Result<()> {
    if logs.len() == 1 {
        return save_log(&logs[0], path);
    }
    let json = serde_json::to_string_pretty(logs)
        .map_err(|e| Error::Contract(format!("log encode: {}", e)))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Parse `--t 50,200,500` style lists.
pub fn parse_t_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad -t entry '{}'", s)))
        })
        .collect()
}

pub fn default_out_dir(base: &Path, sub: &str) -> PathBuf {
    base.join(sub)
}
