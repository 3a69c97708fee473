//! Deterministic evaluation rollouts for both tasks, with optional
//! per-step logging of the bank contents for the memory analysis tools.

use serde::{Deserialize, Serialize};

use stremn_core::memory::{Mode, PolicyKind};
use stremn_core::model::{ModelState, PredModel, StepRng, VosModel, CLIP_FRAMES};
use stremn_core::scalar::Scalar;
use stremn_core::tensor::Tensor;
use stremn_tasks::SequenceSample;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotInfo {
    pub frame: usize,
    pub pinned: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutStep {
    /// Frame about to be processed when the bank looked like this.
    pub query_frame: usize,
    pub slots: Vec<SlotInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutLog {
    pub video: String,
    pub policy: String,
    pub k_slots: usize,
    pub steps: Vec<RolloutStep>,
}

impl RolloutLog {
    fn record<T: Scalar>(&mut self, query_frame: usize, state: &ModelState<T>) {
        self.steps.push(RolloutStep {
            query_frame,
            slots: state
                .bank
                .slots()
                .iter()
                .map(|s| SlotInfo { frame: s.frame_index, pinned: s.pinned })
                .collect(),
        });
    }
}

/// One single-object VOS pass: returns per-frame foreground probability
/// maps for frames `1..T` plus the memory log.
pub fn vos_rollout<T: Scalar>(
    model: &VosModel<T>,
    sample: &SequenceSample,
    label: u8,
    policy: PolicyKind,
    seed: u64,
) -> Result<(Vec<Tensor<T>>, RolloutLog)> {
    if sample.masks.is_empty() {
        return Err(Error::Contract(format!(
            "sequence '{}' has no first-frame ground truth",
            sample.name
        )));
    }
    let mut rng = StepRng::new(seed);
    let frame0 = sample.frames[0].cast::<T>();
    let mask0 = sample
        .object_mask_tensor(0, label)
        .ok_or_else(|| Error::Contract("missing frame-0 mask".into()))?
        .cast::<T>();
    let mut state = model.init_state(&frame0, &mask0, policy)?;
    let mut log = RolloutLog {
        video: sample.name.clone(),
        policy: policy.name().to_string(),
        k_slots: model.cfg.k_slots,
        steps: Vec::new(),
    };
    let mut probs = Vec::with_capacity(sample.len() - 1);
    for t in 1..sample.len() {
        log.record(t, &state);
        let frame = sample.frames[t].cast::<T>();
        let logits = model.step(&mut state, &frame, Mode::Eval, &mut rng, None)?;
        probs.push(VosModel::<T>::foreground_prob(&logits)?);
    }
    Ok((probs, log))
}

/// Merge per-object foreground probabilities into one label map.
/// Background holds score 0.5, so an object must clear it; ties resolve
/// toward the lower label (background first).
pub fn merge_object_probs<T: Scalar>(probs: &[Tensor<T>]) -> Vec<u8> {
    let n = probs[0].len();
    let half = T::from_f64(0.5);
    (0..n)
        .map(|p| {
            let mut best_label = 0u8;
            let mut best = half;
            for (i, prob) in probs.iter().enumerate() {
                let v = prob.data()[p];
                if v > best {
                    best = v;
                    best_label = (i + 1) as u8;
                }
            }
            best_label
        })
        .collect()
}

/// All-object VOS rollout: label maps for frames `1..T` (one pass per
/// object, merged by arg-max) plus the memory log of the first pass.
pub fn vos_rollout_multi<T: Scalar>(
    model: &VosModel<T>,
    sample: &SequenceSample,
    policy: PolicyKind,
    seed: u64,
) -> Result<(Vec<Vec<u8>>, RolloutLog)> {
    let labels: Vec<u8> = (1..=sample.object_count as u8).collect();
    if labels.is_empty() {
        return Err(Error::Contract("sequence annotates no objects".into()));
    }
    let mut per_object = Vec::with_capacity(labels.len());
    let mut first_log = None;
    for &label in &labels {
        let (probs, log) = vos_rollout(model, sample, label, policy, seed)?;
        if first_log.is_none() {
            first_log = Some(log);
        }
        per_object.push(probs);
    }
    let frames = per_object[0].len();
    let mut merged = Vec::with_capacity(frames);
    for t in 0..frames {
        let at_t: Vec<Tensor<T>> = per_object.iter().map(|o| o[t].clone()).collect();
        merged.push(merge_object_probs(&at_t));
    }
    Ok((merged, first_log.unwrap()))
}

/// Prediction rollout: steps through the first `observed` frames with
/// ground truth, then predicts the rest autoregressively. Returns the
/// predicted frames for `observed..T` plus the memory log.
pub fn pred_rollout<T: Scalar>(
    model: &PredModel<T>,
    sample: &SequenceSample,
    observed: usize,
    policy: PolicyKind,
    seed: u64,
) -> Result<(Vec<Tensor<T>>, RolloutLog)> {
    if observed < CLIP_FRAMES {
        return Err(Error::Config(format!(
            "eval.observed must be >= {} (a full input window), got {}",
            CLIP_FRAMES, observed
        )));
    }
    if sample.len() <= observed {
        return Err(Error::Contract(format!(
            "sequence '{}' has {} frames, nothing to predict after {} observed",
            sample.name,
            sample.len(),
            observed
        )));
    }
    let mut rng = StepRng::new(seed);
    let all: Vec<Tensor<T>> = sample.frames.iter().map(|f| f.cast::<T>()).collect();
    let mut state = model.init_state(&all[..CLIP_FRAMES], policy)?;
    let mut log = RolloutLog {
        video: sample.name.clone(),
        policy: policy.name().to_string(),
        k_slots: model.cfg.k_slots,
        steps: Vec::new(),
    };
    // frame buffer switches from ground truth to predictions at `observed`
    let mut history: Vec<Tensor<T>> = all[..observed].to_vec();
    let mut predictions = Vec::new();
    for t in CLIP_FRAMES..sample.len() {
        log.record(t, &state);
        let window = [history[t - 3].clone(), history[t - 2].clone(), history[t - 1].clone()];
        let pred = model.step(&mut state, &window, Mode::Eval, &mut rng)?;
        if t >= observed {
            history.push(pred.clone());
            predictions.push(pred);
        }
    }
    Ok((predictions, log))
}

pub fn save_log(log: &RolloutLog, path: &std::path::Path) -> Result<()> {
    let json = serde_json::to_string_pretty(log)
        .map_err(|e| Error::Contract(format!("log encode: {}", e)))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_logs(path: &std::path::Path) -> Result<Vec<RolloutLog>> {
    let text = std::fs::read_to_string(path)?;
    // either a single log object or an array of them
    if let Ok(one) = serde_json::from_str::<RolloutLog>(&text) {
        return Ok(vec![one]);
    }
    serde_json::from_str::<Vec<RolloutLog>>(&text)
        .map_err(|e| Error::Contract(format!("cannot parse rollout log {}: {}", path.display(), e)))
}
