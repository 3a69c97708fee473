//! Memory retention analysis over rollout logs.
//!
//! For every logged step, each slot contributes the distance
//! `query_frame - slot_frame`, except the pinned first-frame slot and the
//! most recent slot, which are always present and would drown the
//! histogram. Counts normalize to 1.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rollout::RolloutLog;

#[derive(Debug, Clone, Serialize)]
pub struct MemoryHistogram {
    /// `counts[t]` = number of (step, slot) pairs at distance `t`.
    pub counts: Vec<u64>,
    pub total: u64,
    pub k: usize,
    pub excluded: [&'static str; 2],
}

impl MemoryHistogram {
    pub fn normalized(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    /// Probability mass at distances strictly greater than `d`.
    pub fn mass_beyond(&self, d: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let far: u64 = self.counts.iter().skip(d + 1).sum();
        far as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalBank {
    pub video: String,
    pub query_frame: usize,
    pub slot_frames: Vec<usize>,
    /// Distances of the non-excluded slots, in slot order.
    pub distances: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub histogram: MemoryHistogram,
    pub final_banks: Vec<FinalBank>,
}

/// Distances of one step's non-excluded slots (pinned and newest dropped).
pub fn step_distances(query_frame: usize, slots: &[(usize, bool)]) -> Vec<usize> {
    let newest = slots.iter().map(|&(f, _)| f).max();
    slots
        .iter()
        .filter(|&&(frame, pinned)| !pinned && Some(frame) != newest)
        .map(|&(frame, _)| query_frame.saturating_sub(frame))
        .collect()
}

pub fn analyze_memory(logs: &[RolloutLog]) -> Result<AnalysisReport> {
    if logs.is_empty() || logs.iter().all(|l| l.steps.is_empty()) {
        return Err(Error::Contract("rollout log is empty".into()));
    }
    let k = logs[0].k_slots;
    let mut counts: Vec<u64> = Vec::new();
    let mut total = 0u64;
    let mut final_banks = Vec::new();
    for log in logs {
        for step in &log.steps {
            let slots: Vec<(usize, bool)> =
                step.slots.iter().map(|s| (s.frame, s.pinned)).collect();
            for d in step_distances(step.query_frame, &slots) {
                if counts.len() <= d {
                    counts.resize(d + 1, 0);
                }
                counts[d] += 1;
                total += 1;
            }
        }
        if let Some(last) = log.steps.last() {
            let slots: Vec<(usize, bool)> =
                last.slots.iter().map(|s| (s.frame, s.pinned)).collect();
            final_banks.push(FinalBank {
                video: log.video.clone(),
                query_frame: last.query_frame,
                slot_frames: slots.iter().map(|&(f, _)| f).collect(),
                distances: step_distances(last.query_frame, &slots),
            });
        }
    }
    Ok(AnalysisReport {
        histogram: MemoryHistogram {
            counts,
            total,
            k,
            excluded: ["first frame", "previous frame"],
        },
        final_banks,
    })
}

pub fn histogram_csv(report: &AnalysisReport) -> String {
    let weights = report.histogram.normalized();
    let mut out = String::from("distance,count,weight\n");
    for (d, (&c, w)) in report.histogram.counts.iter().zip(weights.iter()).enumerate() {
        if c > 0 {
            out.push_str(&format!("{},{},{}\n", d, c, w));
        }
    }
    out
}
