//! Recurrent models for the two tasks.
//!
//! Both follow the same loop: encode the current input, read the memory
//! with the dense space-time attention, decode the readout, then encode
//! the (frame, prediction) pair and hand it to the memory update. State
//! size is a fixed number of slots no matter how long the sequence runs.

mod decoder;
mod encoder;

pub use decoder::{Decoder, HeadKind};
pub use encoder::{Encoder, EncoderConfig};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{concat_memory_kv, memory_read, KvProjector, KvRole, ReadOut};
use crate::error::{Error, Result};
use crate::memory::{
    create_policy, update_memory, FusionModule, GumbelNoise, MemoryBank, Mode, PolicyKind,
    UpdateContext, UpdateDecision, UpdateKeyProjector, UpdatePolicy,
};
use crate::nn::{HasParams, Init};
use crate::scalar::Scalar;
use crate::tensor::{chw, ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Vos,
    Pred,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Vos => "vos",
            TaskKind::Pred => "pred",
        }
    }
}

/// Which encoding is scored against the memory when picking the slot to
/// replace. The stored template is always the memory-side encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    /// Score the freshly encoded memory feature (default).
    Memory,
    /// Score the query-side encoding of the same frame.
    Query,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub task: TaskKind,
    pub k_slots: usize,
    pub blocks: usize,
    pub base_width: usize,
    pub downsample: usize,
    pub groups: usize,
    /// Update-key channels; 0 = C/2.
    pub d_u: usize,
    /// Read-key channels; 0 = C/8.
    pub d_k: usize,
    /// Read-value channels; 0 = C/2.
    pub d_v: usize,
    pub tau: f64,
    pub scale_logits: bool,
    pub score_source: ScoreSource,
    /// Share the upper VOS encoder blocks between query and memory side
    /// (each side keeps its own stem because the input channels differ).
    pub shared_vos_encoders: bool,
    pub fusion: bool,
}

impl ModelConfig {
    pub fn vos_default() -> Self {
        ModelConfig {
            task: TaskKind::Vos,
            k_slots: 6,
            blocks: 3,
            base_width: 32,
            downsample: 8,
            groups: 4,
            d_u: 0,
            d_k: 0,
            d_v: 0,
            tau: 1.0,
            scale_logits: false,
            score_source: ScoreSource::Memory,
            shared_vos_encoders: false,
            fusion: false,
        }
    }

    pub fn pred_default() -> Self {
        ModelConfig {
            task: TaskKind::Pred,
            k_slots: 5,
            blocks: 6,
            base_width: 8,
            downsample: 16,
            ..Self::vos_default()
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.base_width * (1 << (self.blocks - 1).min(2))
    }

    pub fn update_key_channels(&self) -> usize {
        if self.d_u > 0 {
            self.d_u
        } else {
            (self.feature_channels() / 2).max(1)
        }
    }

    pub fn read_key_channels(&self) -> usize {
        if self.d_k > 0 {
            self.d_k
        } else {
            (self.feature_channels() / 8).max(1)
        }
    }

    pub fn read_value_channels(&self) -> usize {
        if self.d_v > 0 {
            self.d_v
        } else {
            (self.feature_channels() / 2).max(1)
        }
    }

    fn encoder_config(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            blocks: self.blocks,
            base_width: self.base_width,
            downsample: self.downsample,
            groups: self.groups,
        }
    }
}

/// Per-run random streams: Gumbel noise for the learned update and an
/// independent stream for the stochastic rule policies, so learned and
/// rule runs are comparable under one seed.
pub struct StepRng {
    pub gumbel: GumbelNoise,
    pub policy: ChaCha8Rng,
}

impl StepRng {
    pub fn new(seed: u64) -> Self {
        let mut policy = ChaCha8Rng::seed_from_u64(seed);
        policy.set_stream(0x901C);
        StepRng { gumbel: GumbelNoise::new(seed), policy }
    }
}

/// Recurrent state: the bank plus the policy driving its updates.
pub struct ModelState<T: Scalar> {
    pub bank: MemoryBank<T>,
    pub policy: Box<dyn UpdatePolicy<T>>,
    pub policy_kind: PolicyKind,
    /// Index of the next frame to process.
    pub cursor: usize,
    /// Decision log (learned policy, full-bank updates only).
    pub decisions: Vec<UpdateDecision<T>>,
}

impl<T: Scalar> ModelState<T> {
    fn new(k: usize, policy_kind: PolicyKind) -> Result<Self> {
        Ok(ModelState {
            bank: MemoryBank::new(k)?,
            policy: create_policy(policy_kind),
            policy_kind,
            cursor: 0,
            decisions: Vec::new(),
        })
    }

    /// Truncate gradient history (between training clips).
    pub fn detach(&mut self) {
        self.bank = self.bank.detached();
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.bank.frame_indices()
    }
}

// ── VOS model ────────────────────────────────────────────────────────

pub struct VosModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub query_encoder: Encoder<T>,
    pub memory_encoder: Encoder<T>,
    pub query_kv: KvProjector<T>,
    pub memory_kv: KvProjector<T>,
    pub update_key: UpdateKeyProjector<T>,
    pub decoder: Decoder<T>,
    pub fusion: Option<FusionModule<T>>,
}

impl<T: Scalar> Clone for VosModel<T> {
    fn clone(&self) -> Self {
        VosModel {
            cfg: self.cfg.clone(),
            query_encoder: self.query_encoder.clone(),
            memory_encoder: self.memory_encoder.clone(),
            query_kv: self.query_kv.clone(),
            memory_kv: self.memory_kv.clone(),
            update_key: self.update_key.clone(),
            decoder: self.decoder.clone(),
            fusion: self.fusion.clone(),
        }
    }
}

impl<T: Scalar> VosModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let c = cfg.feature_channels();
        let query_encoder = Encoder::new(cfg.encoder_config(3), &mut init)?;
        let memory_encoder = Encoder::new(cfg.encoder_config(4), &mut init)?;
        let query_kv = KvProjector::new(
            c,
            cfg.read_key_channels(),
            cfg.read_value_channels(),
            KvRole::Query,
            &mut init,
        );
        let memory_kv = KvProjector::new(
            c,
            cfg.read_key_channels(),
            cfg.read_value_channels(),
            KvRole::Memory,
            &mut init,
        );
        let update_key = UpdateKeyProjector::new(c, cfg.update_key_channels(), &mut init);
        let ups = cfg.downsample.trailing_zeros() as usize;
        let decoder = Decoder::new(
            2 * cfg.read_value_channels(),
            ups,
            HeadKind::Segmentation,
            cfg.groups,
            &mut init,
        )?;
        let fusion = cfg.fusion.then(|| FusionModule::new(c, &mut init));
        Ok(VosModel {
            cfg,
            query_encoder,
            memory_encoder,
            query_kv,
            memory_kv,
            update_key,
            decoder,
            fusion,
        })
    }

    pub fn encode_query(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        self.query_encoder.forward(frame)
    }

    /// Channel-concatenate (frame, mask) and run the memory encoder. With
    /// shared encoders only the 4-channel stem is private; the upper
    /// blocks are the query encoder's.
    pub fn encode_memory(&self, frame: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w) = chw(frame, "encode_memory")?;
        let (mc, mh, mw) = chw(mask, "encode_memory")?;
        if mc != 1 || mh != h || mw != w {
            return Err(Error::dim(
                "encode_memory",
                format!("mask shape {:?} vs frame {:?}", mask.shape(), frame.shape()),
            ));
        }
        let x = ops::concat(&[frame, mask], 0)?;
        if self.cfg.shared_vos_encoders {
            let stem = self.memory_encoder.forward_stem(&x)?;
            self.query_encoder.forward_from(&stem, 1)
        } else {
            self.memory_encoder.forward(&x)
        }
    }

    pub fn read(&self, query_feat: &Tensor<T>, bank: &MemoryBank<T>) -> Result<ReadOut<T>> {
        let q = self.query_kv.project(query_feat)?;
        let mut slot_kvs = Vec::with_capacity(bank.len());
        for slot in bank.slots() {
            slot_kvs.push(self.memory_kv.project(&slot.template)?);
        }
        let m = concat_memory_kv(&slot_kvs)?;
        memory_read(&q, &m, self.cfg.scale_logits)
    }

    pub fn decode(&self, readout: &ReadOut<T>) -> Result<Tensor<T>> {
        self.decoder.forward(&readout.features)
    }

    /// Foreground probability map (1×H×W) from the 2-class logits.
    pub fn foreground_prob(logits: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = chw(logits, "foreground_prob")?;
        if c != 2 {
            return Err(Error::dim("foreground_prob", format!("expected 2 classes, got {}", c)));
        }
        let flat = ops::reshape(logits, &[2, h * w])?;
        let bg = ops::slice_rows(&flat, 0, 1)?;
        let fg = ops::slice_rows(&flat, 1, 1)?;
        let p = ops::sigmoid(&ops::sub(&fg, &bg)?);
        ops::reshape(&p, &[1, h, w])
    }

    /// Initialize the recurrent state from the ground-truth first frame.
    pub fn init_state(
        &self,
        frame0: &Tensor<T>,
        mask0: &Tensor<T>,
        policy_kind: PolicyKind,
    ) -> Result<ModelState<T>> {
        let mut state = ModelState::new(self.cfg.k_slots, policy_kind)?;
        let feat = self.encode_memory(frame0, mask0)?;
        let mut ctx = UpdateContext::rule_eval(None);
        update_memory(&mut state.bank, feat, 0, state.policy.as_mut(), &mut ctx)?;
        state.cursor = 1;
        Ok(state)
    }

    /// One recurrent step: read with the query encoding of `frame`, decode
    /// the mask, then encode (frame, predicted mask) and update the bank.
    /// `mask_feedback` overrides the self-predicted mask (teacher forcing
    /// or corruption probes). Returns the mask logits.
    pub fn step(
        &self,
        state: &mut ModelState<T>,
        frame: &Tensor<T>,
        mode: Mode,
        rng: &mut StepRng,
        mask_feedback: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if state.bank.is_empty() {
            return Err(Error::State("VOS state not initialized with a first frame".into()));
        }
        let q_feat = self.encode_query(frame)?;
        let readout = self.read(&q_feat, &state.bank)?;
        let logits = self.decode(&readout)?;
        let prob = Self::foreground_prob(&logits)?;
        let feedback = match mask_feedback {
            Some(m) => m.clone(),
            None => prob,
        };
        let m_feat = self.encode_memory(frame, &feedback)?;
        let frame_index = state.cursor;
        let mut ctx = UpdateContext {
            mode,
            tau: T::from_f64(self.cfg.tau),
            projector: Some(&self.update_key),
            fusion: self.fusion.as_ref(),
            gumbel: Some(&mut rng.gumbel),
            policy_rng: Some(&mut rng.policy),
            score_override: None,
        };
        let score_feat;
        if self.cfg.score_source == ScoreSource::Query {
            score_feat = q_feat;
            ctx.score_override = Some(&score_feat);
        }
        let decision =
            update_memory(&mut state.bank, m_feat, frame_index, state.policy.as_mut(), &mut ctx)?;
        if let Some(d) = decision {
            state.decisions.push(d);
        }
        state.cursor += 1;
        Ok(logits)
    }
}

impl<T: Scalar> HasParams<T> for VosModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.query_encoder.visit(&crate::nn::join(prefix, "query_encoder"), f);
        self.memory_encoder.visit(&crate::nn::join(prefix, "memory_encoder"), f);
        self.query_kv.visit(&crate::nn::join(prefix, "query_kv"), f);
        self.memory_kv.visit(&crate::nn::join(prefix, "memory_kv"), f);
        self.update_key.visit(&crate::nn::join(prefix, "update_key"), f);
        self.decoder.visit(&crate::nn::join(prefix, "decoder"), f);
        if let Some(fu) = &self.fusion {
            fu.visit(&crate::nn::join(prefix, "fusion"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.query_encoder.visit_mut(&crate::nn::join(prefix, "query_encoder"), f);
        self.memory_encoder.visit_mut(&crate::nn::join(prefix, "memory_encoder"), f);
        self.query_kv.visit_mut(&crate::nn::join(prefix, "query_kv"), f);
        self.memory_kv.visit_mut(&crate::nn::join(prefix, "memory_kv"), f);
        self.update_key.visit_mut(&crate::nn::join(prefix, "update_key"), f);
        self.decoder.visit_mut(&crate::nn::join(prefix, "decoder"), f);
        if let Some(fu) = &mut self.fusion {
            fu.visit_mut(&crate::nn::join(prefix, "fusion"), f);
        }
    }
}

// ── Prediction model ─────────────────────────────────────────────────

/// Next-frame prediction: one shared encoder over a stack of 3 consecutive
/// frames serves both the query and the memory side.
pub struct PredModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub encoder: Encoder<T>,
    pub query_kv: KvProjector<T>,
    pub memory_kv: KvProjector<T>,
    pub update_key: UpdateKeyProjector<T>,
    pub decoder: Decoder<T>,
    pub fusion: Option<FusionModule<T>>,
}

impl<T: Scalar> Clone for PredModel<T> {
    fn clone(&self) -> Self {
        PredModel {
            cfg: self.cfg.clone(),
            encoder: self.encoder.clone(),
            query_kv: self.query_kv.clone(),
            memory_kv: self.memory_kv.clone(),
            update_key: self.update_key.clone(),
            decoder: self.decoder.clone(),
            fusion: self.fusion.clone(),
        }
    }
}

pub const CLIP_FRAMES: usize = 3;

impl<T: Scalar> PredModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let c = cfg.feature_channels();
        let encoder = Encoder::new(cfg.encoder_config(3 * CLIP_FRAMES), &mut init)?;
        let query_kv = KvProjector::new(
            c,
            cfg.read_key_channels(),
            cfg.read_value_channels(),
            KvRole::Query,
            &mut init,
        );
        let memory_kv = KvProjector::new(
            c,
            cfg.read_key_channels(),
            cfg.read_value_channels(),
            KvRole::Memory,
            &mut init,
        );
        let update_key = UpdateKeyProjector::new(c, cfg.update_key_channels(), &mut init);
        let ups = cfg.downsample.trailing_zeros() as usize;
        let decoder =
            Decoder::new(2 * cfg.read_value_channels(), ups, HeadKind::Frame, cfg.groups, &mut init)?;
        let fusion = cfg.fusion.then(|| FusionModule::new(c, &mut init));
        Ok(PredModel { cfg, encoder, query_kv, memory_kv, update_key, decoder, fusion })
    }

    /// Encode a stack of exactly 3 consecutive frames (9 input channels).
    pub fn encode_clip(&self, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        if frames.len() != CLIP_FRAMES {
            return Err(Error::Contract(format!(
                "encode_clip takes exactly {} frames, got {}",
                CLIP_FRAMES,
                frames.len()
            )));
        }
        let refs: Vec<&Tensor<T>> = frames.iter().collect();
        let stacked = ops::concat(&refs, 0)?;
        self.encoder.forward(&stacked)
    }

    /// Initialize from the first observed window (frames 0..3); the
    /// encoding is pinned as the first slot.
    pub fn init_state(&self, window: &[Tensor<T>], policy_kind: PolicyKind) -> Result<ModelState<T>> {
        let mut state = ModelState::new(self.cfg.k_slots, policy_kind)?;
        let feat = self.encode_clip(window)?;
        let mut ctx = UpdateContext::rule_eval(None);
        update_memory(&mut state.bank, feat, CLIP_FRAMES - 1, state.policy.as_mut(), &mut ctx)?;
        state.cursor = CLIP_FRAMES;
        Ok(state)
    }

    pub fn read(&self, query_feat: &Tensor<T>, bank: &MemoryBank<T>) -> Result<ReadOut<T>> {
        let q = self.query_kv.project(query_feat)?;
        let mut slot_kvs = Vec::with_capacity(bank.len());
        for slot in bank.slots() {
            slot_kvs.push(self.memory_kv.project(&slot.template)?);
        }
        let m = concat_memory_kv(&slot_kvs)?;
        memory_read(&q, &m, self.cfg.scale_logits)
    }

    /// Predict the frame after `window` (the last 3 observed/predicted
    /// frames) and update the bank with the window's own encoding.
    pub fn step(
        &self,
        state: &mut ModelState<T>,
        window: &[Tensor<T>],
        mode: Mode,
        rng: &mut StepRng,
    ) -> Result<Tensor<T>> {
        if state.bank.is_empty() {
            return Err(Error::State("prediction state not initialized".into()));
        }
        let feat = self.encode_clip(window)?;
        let readout = self.read(&feat, &state.bank)?;
        let pred = self.decoder.forward(&readout.features)?;
        let frame_index = state.cursor;
        let mut ctx = UpdateContext {
            mode,
            tau: T::from_f64(self.cfg.tau),
            projector: Some(&self.update_key),
            fusion: self.fusion.as_ref(),
            gumbel: Some(&mut rng.gumbel),
            policy_rng: Some(&mut rng.policy),
            score_override: None,
        };
        if let Some(d) =
            update_memory(&mut state.bank, feat, frame_index, state.policy.as_mut(), &mut ctx)?
        {
            state.decisions.push(d);
        }
        state.cursor += 1;
        Ok(pred)
    }
}

impl<T: Scalar> HasParams<T> for PredModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit(&crate::nn::join(prefix, "encoder"), f);
        self.query_kv.visit(&crate::nn::join(prefix, "query_kv"), f);
        self.memory_kv.visit(&crate::nn::join(prefix, "memory_kv"), f);
        self.update_key.visit(&crate::nn::join(prefix, "update_key"), f);
        self.decoder.visit(&crate::nn::join(prefix, "decoder"), f);
        if let Some(fu) = &self.fusion {
            fu.visit(&crate::nn::join(prefix, "fusion"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut(&crate::nn::join(prefix, "encoder"), f);
        self.query_kv.visit_mut(&crate::nn::join(prefix, "query_kv"), f);
        self.memory_kv.visit_mut(&crate::nn::join(prefix, "memory_kv"), f);
        self.update_key.visit_mut(&crate::nn::join(prefix, "update_key"), f);
        self.decoder.visit_mut(&crate::nn::join(prefix, "decoder"), f);
        if let Some(fu) = &mut self.fusion {
            fu.visit_mut(&crate::nn::join(prefix, "fusion"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            base_width: 4,
            k_slots: 4,
            ..ModelConfig::vos_default()
        }
    }

    fn img(seed: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[3, h, w], |i| (((i + seed * 7919) * 131 % 255) as f64) / 255.0)
    }

    fn mask(h: usize, w: usize, on: bool) -> Tensor<f64> {
        Tensor::full(&[1, h, w], if on { 1.0 } else { 0.0 })
    }

    #[test]
    fn vos_state_grows_then_saturates() {
        let model: VosModel<f64> = VosModel::new(small_cfg(), 1).unwrap();
        let mut rng = StepRng::new(0);
        let mut state = model
            .init_state(&img(0, 16, 16), &mask(16, 16, true), PolicyKind::Learned)
            .unwrap();
        assert_eq!(state.bank.len(), 1);
        let logits = model.step(&mut state, &img(1, 16, 16), Mode::Eval, &mut rng, None).unwrap();
        assert_eq!(logits.shape(), &[2, 16, 16]);
        assert_eq!(state.bank.len(), 2, "read over 1 slot, bank grows to 2");
        for t in 2..12 {
            model.step(&mut state, &img(t, 16, 16), Mode::Eval, &mut rng, None).unwrap();
            assert!(state.bank.len() <= 4);
        }
        assert_eq!(state.bank.len(), 4, "bank saturates at K");
    }

    #[test]
    fn mask_channel_is_live() {
        let model: VosModel<f64> = VosModel::new(small_cfg(), 2).unwrap();
        let frame = img(3, 16, 16);
        let a = model.encode_memory(&frame, &mask(16, 16, false)).unwrap();
        let b = model.encode_memory(&frame, &mask(16, 16, true)).unwrap();
        assert!(a.linf_diff(&b) > 0.0, "all-zero vs all-one mask must differ");
    }

    #[test]
    fn uninitialized_state_is_state_error() {
        let model: VosModel<f64> = VosModel::new(small_cfg(), 3).unwrap();
        let mut state = ModelState::new(4, PolicyKind::Learned).unwrap();
        let mut rng = StepRng::new(0);
        let err = model.step(&mut state, &img(0, 16, 16), Mode::Eval, &mut rng, None).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn clip_encoder_is_order_sensitive() {
        let cfg = ModelConfig { base_width: 4, k_slots: 3, blocks: 3, downsample: 8, ..ModelConfig::pred_default() };
        let model: PredModel<f64> = PredModel::new(cfg, 4).unwrap();
        let f0 = img(0, 16, 16);
        let f1 = img(1, 16, 16);
        let f2 = img(2, 16, 16);
        let fwd = model.encode_clip(&[f0.clone(), f1.clone(), f2.clone()]).unwrap();
        let rev = model.encode_clip(&[f2.clone(), f1.clone(), f0.clone()]).unwrap();
        assert!(fwd.linf_diff(&rev) > 0.0, "temporal order must matter");

        let same = model.encode_clip(&[f0.clone(), f0.clone(), f0.clone()]).unwrap();
        assert!(fwd.linf_diff(&same) > 0.0, "distinct frames must differ from repeated ones");

        assert!(model.encode_clip(&[f0, f1]).is_err(), "wrong frame count is a contract error");
    }

    #[test]
    fn corrupted_mask_feedback_changes_next_bank() {
        let model: VosModel<f64> = VosModel::new(small_cfg(), 5).unwrap();
        let run = |corrupt: bool| {
            let mut rng = StepRng::new(1);
            let mut state = model
                .init_state(&img(0, 16, 16), &mask(16, 16, true), PolicyKind::Learned)
                .unwrap();
            let override_mask = corrupt.then(|| mask(16, 16, false));
            model
                .step(&mut state, &img(1, 16, 16), Mode::Eval, &mut rng, override_mask.as_ref())
                .unwrap();
            state.bank.slot(1).template.clone()
        };
        let clean = run(false);
        let corrupted = run(true);
        assert!(clean.linf_diff(&corrupted) > 0.0, "mask feedback must reach the bank");
    }
}
