//! Training loops: Adam over sampled clips, per-pixel cross entropy for
//! segmentation tracking and an L1+L2 composite for next-frame
//! prediction, with a fixed-lr phase followed by a cosine fine-tune phase.
//! Fully seeded: the loss series is reproducible bit for bit.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stremn_core::checkpoint::Checkpoint;
use stremn_core::memory::Mode;
use stremn_core::model::{PredModel, StepRng, TaskKind, VosModel, CLIP_FRAMES};
use stremn_core::nn::{load_params, save_params, track_params, HasParams};
use stremn_core::optim::{collect_grads, param_sq_norm, Adam};
use stremn_core::scalar::Scalar;
use stremn_core::tensor::{ops, GradientTape, Tensor};
use stremn_tasks::{gen_moving_shapes, metrics, SequenceSample};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rollout::pred_rollout;

pub struct TrainReport {
    pub loss_series: Vec<f64>,
    pub final_checkpoint: PathBuf,
    pub intermediate_checkpoints: Vec<PathBuf>,
}

/// Derive a purpose-specific seed from the run seed.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Training pool: synthetic sequences with seeds derived from the run seed.
pub fn train_pool(cfg: &RunConfig) -> Result<Vec<SequenceSample>> {
    let synth = cfg.synth_config();
    (0..cfg.train_sequences)
        .map(|i| Ok(gen_moving_shapes(&synth, derive_seed(cfg.seed, "train-data", i as u64))?))
        .collect()
}

/// Evaluation pool: disjoint seed stream from the training pool.
pub fn eval_pool(cfg: &RunConfig) -> Result<Vec<SequenceSample>> {
    let synth = cfg.synth_config();
    (0..cfg.eval_sequences)
        .map(|i| Ok(gen_moving_shapes(&synth, derive_seed(cfg.seed, "eval-data", i as u64))?))
        .collect()
}

fn learning_rate(cfg: &RunConfig, step: usize) -> f64 {
    if step < cfg.steps {
        cfg.lr
    } else {
        let i = (step - cfg.steps) as f64;
        let n = cfg.finetune_steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * i / n).cos());
        cfg.finetune_lr_lo + (cfg.finetune_lr_hi - cfg.finetune_lr_lo) * cos
    }
}

fn save_model<T: Scalar, M: HasParams<T>>(
    model: &M,
    cfg: &RunConfig,
    extra: &[(&str, f64)],
    path: &Path,
) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    save_params(model, &mut ckpt)?;
    ckpt.insert_scalar::<f64>("meta.task", if cfg.task == TaskKind::Vos { 0.0 } else { 1.0 })?;
    ckpt.insert_scalar::<f64>("meta.seed", cfg.seed as f64)?;
    for (name, v) in extra {
        ckpt.insert_scalar::<f64>(&format!("meta.{}", name), *v)?;
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    ckpt.save(path)?;
    Ok(())
}

pub fn load_model_checkpoint<T: Scalar, M: HasParams<T>>(model: &mut M, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    load_params(model, &ckpt).map_err(|e| Error::Manifest(e.to_string()))
}

/// Train on the given pool (or a freshly generated one) and write
/// checkpoints under `cfg.out_dir`.
pub fn train<T: Scalar>(cfg: &RunConfig, pool: Option<&[SequenceSample]>) -> Result<TrainReport> {
    cfg.validate()?;
    match cfg.task {
        TaskKind::Vos => train_vos::<T>(cfg, pool),
        TaskKind::Pred => train_pred::<T>(cfg, pool),
    }
}

fn check_finite<T: Scalar, M: HasParams<T>>(loss: f64, step: usize, model: &M) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss at step {} (parameter sq-norm {:.3e})",
            step,
            param_sq_norm(model)
        )));
    }
    Ok(())
}

fn train_vos<T: Scalar>(cfg: &RunConfig, pool: Option<&[SequenceSample]>) -> Result<TrainReport> {
    let owned;
    let pool: &[SequenceSample] = match pool {
        Some(p) => p,
        None => {
            owned = train_pool(cfg)?;
            &owned
        }
    };
    if pool.is_empty() {
        return Err(Error::Config("empty training pool".into()));
    }
    let mut model: VosModel<T> = VosModel::new(cfg.model_config(), derive_seed(cfg.seed, "init", 0))?;
    let mut adam = Adam::new();
    let mut clip_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "clips", 0));
    let mut step_rng = StepRng::new(derive_seed(cfg.seed, "steps", 0));

    let total_steps = cfg.steps + cfg.finetune_steps;
    let mut series = Vec::with_capacity(total_steps);
    let mut intermediates = Vec::new();

    for step in 0..total_steps {
        let sample = &pool[clip_rng.gen_range(0..pool.len())];
        let clip_len = cfg.clip_len.min(sample.len());
        let start = clip_rng.gen_range(0..=sample.len() - clip_len);
        let label = clip_rng.gen_range(1..=sample.object_count as u8);

        let tape = GradientTape::<T>::new();
        let mut tracked = model.clone();
        track_params(&mut tracked, &tape);

        let frame0 = sample.frames[start].cast::<T>();
        let mask0 = sample
            .object_mask_tensor(start, label)
            .ok_or_else(|| Error::Contract("clip start lacks ground truth".into()))?
            .cast::<T>();
        let mut state = tracked.init_state(&frame0, &mask0, cfg.policy)?;
        state.cursor = start + 1;

        let mut loss: Option<Tensor<T>> = None;
        for t in start + 1..start + clip_len {
            let frame = sample.frames[t].cast::<T>();
            let logits = tracked.step(&mut state, &frame, Mode::Train, &mut step_rng, None)?;
            let gt = sample
                .object_mask(t, label)
                .ok_or_else(|| Error::Contract("clip frame lacks ground truth".into()))?;
            let labels: Vec<usize> = gt.iter().map(|&b| b as usize).collect();
            let l = ops::cross_entropy_pixel(&logits, &labels)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => ops::add(&acc, &l)?,
            });
        }
        let loss = ops::scale_const(&loss.unwrap(), T::from_f64(1.0 / (clip_len - 1) as f64));
        let loss_v = loss.value().to_f64();
        check_finite(loss_v, step, &model)?;
        series.push(loss_v);

        let grads = tape.backward(&loss)?;
        let gmap = collect_grads(&tracked, &grads);
        adam.step(&mut model, &gmap, learning_rate(cfg, step));

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let path = cfg.out_dir.join(format!("step{:06}.strm", step + 1));
            save_model(&model, cfg, &[("step", (step + 1) as f64)], &path)?;
            intermediates.push(path);
        }
    }

    let final_path = cfg.out_dir.join("model.strm");
    save_model(&model, cfg, &[("step", total_steps as f64)], &final_path)?;
    write_loss_series(cfg, &series)?;
    Ok(TrainReport { loss_series: series, final_checkpoint: final_path, intermediate_checkpoints: intermediates })
}

fn train_pred<T: Scalar>(cfg: &RunConfig, pool: Option<&[SequenceSample]>) -> Result<TrainReport> {
    let owned;
    let pool: &[SequenceSample] = match pool {
        Some(p) => p,
        None => {
            owned = train_pool(cfg)?;
            &owned
        }
    };
    if pool.is_empty() {
        return Err(Error::Config("empty training pool".into()));
    }
    let min_clip = CLIP_FRAMES + 2;
    let clip_len = cfg.clip_len.max(min_clip);
    let mut model: PredModel<T> = PredModel::new(cfg.model_config(), derive_seed(cfg.seed, "init", 0))?;
    let mut adam = Adam::new();
    let mut clip_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "clips", 0));
    let mut step_rng = StepRng::new(derive_seed(cfg.seed, "steps", 0));

    let total_steps = cfg.steps + cfg.finetune_steps;
    let mut series = Vec::with_capacity(total_steps);
    let mut intermediates = Vec::new();

    for step in 0..total_steps {
        let sample = &pool[clip_rng.gen_range(0..pool.len())];
        let clip_len = clip_len.min(sample.len());
        if clip_len < min_clip {
            return Err(Error::Config(format!(
                "sequences of {} frames are too short for prediction clips (need {})",
                sample.len(),
                min_clip
            )));
        }
        let start = clip_rng.gen_range(0..=sample.len() - clip_len);

        let tape = GradientTape::<T>::new();
        let mut tracked = model.clone();
        track_params(&mut tracked, &tape);

        let frames: Vec<Tensor<T>> =
            (start..start + clip_len).map(|t| sample.frames[t].cast::<T>()).collect();
        let mut state = tracked.init_state(&frames[..CLIP_FRAMES], cfg.policy)?;
        state.cursor = start + CLIP_FRAMES;

        // observe the first window, then predict autoregressively
        let mut history: Vec<Tensor<T>> = frames[..CLIP_FRAMES].to_vec();
        let mut loss: Option<Tensor<T>> = None;
        for t in CLIP_FRAMES..clip_len {
            let window =
                [history[t - 3].clone(), history[t - 2].clone(), history[t - 1].clone()];
            let pred = tracked.step(&mut state, &window, Mode::Train, &mut step_rng)?;
            let l1 = ops::mae(&pred, &frames[t])?;
            let l2 = ops::mse(&pred, &frames[t])?;
            let l = ops::add(&l1, &l2)?;
            history.push(pred);
            loss = Some(match loss {
                None => l,
                Some(acc) => ops::add(&acc, &l)?,
            });
        }
        let horizon = (clip_len - CLIP_FRAMES) as f64;
        let loss = ops::scale_const(&loss.unwrap(), T::from_f64(1.0 / horizon));
        let loss_v = loss.value().to_f64();
        check_finite(loss_v, step, &model)?;
        series.push(loss_v);

        let grads = tape.backward(&loss)?;
        let gmap = collect_grads(&tracked, &grads);
        adam.step(&mut model, &gmap, learning_rate(cfg, step));

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            // record a small validation SSIM with the checkpoint so weight
            // averaging can select good steps
            let val = validation_ssim(&model, cfg)?;
            let path = cfg.out_dir.join(format!("step{:06}.strm", step + 1));
            save_model(&model, cfg, &[("step", (step + 1) as f64), ("validation_ssim", val)], &path)?;
            intermediates.push(path);
        }
    }

    let final_path = cfg.out_dir.join("model.strm");
    let val = validation_ssim(&model, cfg)?;
    save_model(
        &model,
        cfg,
        &[("step", total_steps as f64), ("validation_ssim", val)],
        &final_path,
    )?;
    write_loss_series(cfg, &series)?;

    if cfg.average_checkpoints && !intermediates.is_empty() {
        let mut paths = intermediates.clone();
        paths.push(final_path.clone());
        let avg = crate::average::average_checkpoints(&paths, cfg.average_min_ssim)?;
        avg.save(&cfg.out_dir.join("model-avg.strm"))?;
    }

    Ok(TrainReport { loss_series: series, final_checkpoint: final_path, intermediate_checkpoints: intermediates })
}

/// SSIM of a one-sequence greedy rollout (cheap selector signal for
/// checkpoint averaging).
fn validation_ssim<T: Scalar>(model: &PredModel<T>, cfg: &RunConfig) -> Result<f64> {
    let synth = cfg.synth_config();
    let sample = gen_moving_shapes(&synth, derive_seed(cfg.seed, "val-data", 0))?;
    let observed = cfg.eval_observed.max(CLIP_FRAMES).min(sample.len() - 1);
    let horizon = (sample.len() - observed).min(4);
    let (preds, _) =
        pred_rollout(model, &sample, observed, cfg.policy, derive_seed(cfg.seed, "val-roll", 0))?;
    let preds32: Vec<Tensor<f32>> = preds[..horizon].iter().map(|p| p.cast::<f32>()).collect();
    let gt: Vec<Tensor<f32>> =
        (observed..observed + horizon).map(|t| sample.frames[t].clone()).collect();
    let (_, _, ssim, _) = metrics::metric_prediction(&preds32, &gt)?;
    Ok(ssim)
}

fn write_loss_series(cfg: &RunConfig, series: &[f64]) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in series.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i, l));
    }
    std::fs::write(cfg.out_dir.join("loss.csv"), csv)?;
    Ok(())
}
