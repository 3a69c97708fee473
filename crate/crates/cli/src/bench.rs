//! Complexity benchmark: the fixed-K memory against an STM-style
//! linear-growth baseline that appends one template every γ frames. Both
//! run the identical read path (key/value projection over every stored
//! slot plus the dense attention), so the only variable is how many
//! templates exist at sequence position T.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::Serialize;

use stremn_core::attention::{concat_memory_kv, memory_read, KeyValue, KvProjector, KvRole};
use stremn_core::memory::{
    create_policy, update_memory, MemoryBank, PolicyKind, SlotEntry, UpdateContext,
    UpdateKeyProjector,
};
use stremn_core::nn::Init;
use stremn_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::error::Result;

pub const DEFAULT_GAMMA: usize = 5;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub t: usize,
    pub read_seconds: f64,
    pub update_seconds: f64,
    pub peak_slots: usize,
    pub peak_template_bytes: usize,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub gamma: usize,
    pub repetitions: usize,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn time_median<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    // warmup
    f();
    f();
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64());
    }
    median(times)
}

struct BenchKit {
    c: usize,
    h: usize,
    w: usize,
    q_kv: KvProjector<f32>,
    m_kv: KvProjector<f32>,
    update_key: UpdateKeyProjector<f32>,
}

impl BenchKit {
    fn new(cfg: &RunConfig) -> Self {
        let model_cfg = cfg.model_config();
        let c = model_cfg.feature_channels();
        let hw = cfg.synth_canvas / cfg.downsample;
        let mut init = Init::new(cfg.seed);
        BenchKit {
            c,
            h: hw,
            w: hw,
            q_kv: KvProjector::new(
                c,
                model_cfg.read_key_channels(),
                model_cfg.read_value_channels(),
                KvRole::Query,
                &mut init,
            ),
            m_kv: KvProjector::new(
                c,
                model_cfg.read_key_channels(),
                model_cfg.read_value_channels(),
                KvRole::Memory,
                &mut init,
            ),
            update_key: UpdateKeyProjector::new(c, model_cfg.update_key_channels(), &mut init),
        }
    }

    fn template(&self, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(&[self.c, self.h, self.w], |_| rng.gen_range(-1.0..1.0))
    }

    fn template_bytes(&self) -> usize {
        self.c * self.h * self.w * std::mem::size_of::<f32>()
    }

    /// Full read path over the bank: project query + every slot, concat,
    /// dense attention.
    fn read(&self, query: &Tensor<f32>, bank: &MemoryBank<f32>) -> Result<()> {
        let q = self.q_kv.project(query)?;
        let mut kvs = Vec::with_capacity(bank.len());
        for slot in bank.slots() {
            kvs.push(self.m_kv.project(&slot.template)?);
        }
        let m = concat_memory_kv(&kvs)?;
        let _ = memory_read(&q, &m, false)?;
        Ok(())
    }

    fn read_kv_only(&self, q: &KeyValue<f32>, bank: &MemoryBank<f32>) -> Result<()> {
        let mut kvs = Vec::with_capacity(bank.len());
        for slot in bank.slots() {
            kvs.push(self.m_kv.project(&slot.template)?);
        }
        let m = concat_memory_kv(&kvs)?;
        let _ = memory_read(q, &m, false)?;
        Ok(())
    }
}

/// Run both variants through `t_list` (strictly increasing) and record
/// read/update latency medians plus exact peak template counts.
pub fn bench_complexity(cfg: &RunConfig, t_list: &[usize], reps: usize) -> Result<BenchReport> {
    let mut t_sorted = t_list.to_vec();
    t_sorted.sort_unstable();
    t_sorted.dedup();

    let kit = BenchKit::new(cfg);
    let mut rows = Vec::new();

    // fixed-K variant: learned policy in eval mode
    {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB4C4);
        let mut bank = MemoryBank::<f32>::new(cfg.k_slots)?;
        let mut policy = create_policy::<f32>(PolicyKind::Learned);
        let mut peak = 0usize;
        for (frame, &t_stop) in milestones(&t_sorted) {
            for t in frame..t_stop {
                let x = kit.template(&mut rng);
                let mut ctx = UpdateContext::rule_eval(None);
                ctx.projector = Some(&kit.update_key);
                update_memory(&mut bank, x, t, policy.as_mut(), &mut ctx)?;
                peak = peak.max(bank.len());
            }
            let query = kit.template(&mut rng);
            let read_s = time_median(reps, || kit.read(&query, &bank).unwrap());
            let upd_template = kit.template(&mut rng);
            let update_s = time_median(reps, || {
                let mut trial = bank.clone();
                let mut trial_policy = create_policy::<f32>(PolicyKind::Learned);
                let mut ctx = UpdateContext::rule_eval(None);
                ctx.projector = Some(&kit.update_key);
                update_memory(&mut trial, upd_template.clone(), t_stop, trial_policy.as_mut(), &mut ctx)
                    .unwrap();
            });
            rows.push(BenchRow {
                variant: format!("stremn(K={})", cfg.k_slots),
                t: t_stop,
                read_seconds: read_s,
                update_seconds: update_s,
                peak_slots: peak,
                peak_template_bytes: peak * kit.template_bytes(),
            });
        }
    }

    // linear-growth baseline: append a template every gamma frames
    {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11EA);
        let gamma = DEFAULT_GAMMA;
        let mut stored: Vec<SlotEntry<f32>> = Vec::new();
        let mut peak = 0usize;
        for (frame, &t_stop) in milestones(&t_sorted) {
            for t in frame..t_stop {
                if t % gamma == 0 {
                    stored.push(SlotEntry::new(kit.template(&mut rng), t));
                }
                peak = peak.max(stored.len());
            }
            let expected = 1 + (t_stop - 1) / gamma;
            debug_assert_eq!(stored.len(), expected);
            let mut bank = MemoryBank::<f32>::new(stored.len())?;
            for entry in &stored {
                bank.push(entry.clone())?;
            }
            let query = kit.template(&mut rng);
            let q = kit.q_kv.project(&query)?;
            let read_s = time_median(reps, || kit.read_kv_only(&q, &bank).unwrap());
            // update = plain append of a projected template
            let update_s = time_median(reps, || {
                let x = Tensor::<f32>::full(&[kit.c, kit.h, kit.w], 0.5);
                let _ = kit.m_kv.project(&x).unwrap();
            });
            rows.push(BenchRow {
                variant: format!("linear-growth(gamma={})", gamma),
                t: t_stop,
                read_seconds: read_s,
                update_seconds: update_s,
                peak_slots: peak,
                peak_template_bytes: peak * kit.template_bytes(),
            });
        }
    }

    Ok(BenchReport {
        gamma: DEFAULT_GAMMA,
        repetitions: reps,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rows,
    })
}

/// Walk `(resume_from, stop_at)` milestones: frames already simulated stay
/// in place so the bank state carries forward.
fn milestones(t_sorted: &[usize]) -> impl Iterator<Item = (usize, &usize)> {
    let starts = std::iter::once(0usize).chain(t_sorted.iter().copied()).take(t_sorted.len());
    starts.zip(t_sorted.iter())
}

pub fn report_csv(report: &BenchReport) -> String {
    let mut out =
        String::from("variant,t,read_seconds,update_seconds,peak_slots,peak_template_bytes\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{},{}\n",
            r.variant, r.t, r.read_seconds, r.update_seconds, r.peak_slots, r.peak_template_bytes
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use stremn_core::model::TaskKind;

    #[test]
    fn peak_counts_exact_and_reads_ordered() {
        let mut cfg = RunConfig::defaults(TaskKind::Vos);
        cfg.base_width = 4;
        cfg.synth_canvas = 32;
        cfg.k_slots = 4;
        let report = bench_complexity(&cfg, &[20, 60], 3).unwrap();
        let stremn: Vec<&BenchRow> =
            report.rows.iter().filter(|r| r.variant.starts_with("stremn")).collect();
        assert_eq!(stremn.len(), 2);
        assert!(stremn.iter().all(|r| r.peak_slots == 4));

        let linear: Vec<&BenchRow> =
            report.rows.iter().filter(|r| r.variant.starts_with("linear")).collect();
        assert_eq!(linear[0].peak_slots, 1 + (20 - 1) / 5);
        assert_eq!(linear[1].peak_slots, 1 + (60 - 1) / 5);
        assert!(linear[1].read_seconds > 0.0 && stremn[0].read_seconds > 0.0);
    }
}
