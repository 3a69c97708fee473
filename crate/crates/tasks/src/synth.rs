//! Moving-shapes sequences built to stress a template memory: the target
//! changes its fill color at scheduled frames, and a distractor is steered
//! over it for scheduled occlusion intervals. Outside those intervals the
//! distractor is kept clear of the target, so the target's visible area
//! only ever shrinks on occlusion frames.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stremn_core::tensor::Tensor;

use crate::error::{Error, Result};
use crate::SequenceSample;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub canvas: usize,
    pub object_count: usize,
    /// Sequence length T.
    pub frames: usize,
    /// Frames at which the target's fill color switches.
    pub appearance_switches: Vec<usize>,
    /// `(start, len)` intervals during which the first distractor covers
    /// part of the target.
    pub occlusions: Vec<(usize, usize)>,
    /// Uniform per-pixel noise amplitude added to frames (never to masks).
    pub noise: f64,
    /// Object speed in pixels per frame.
    pub speed: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            canvas: 64,
            object_count: 2,
            frames: 40,
            appearance_switches: vec![20],
            occlusions: vec![(25, 5)],
            noise: 0.0,
            speed: 1.6,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 32 {
            return Err(Error::Config(format!("canvas {} too small (min 32)", self.canvas)));
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least 2 frames".into()));
        }
        if !(1..=4).contains(&self.object_count) {
            return Err(Error::Config(format!("object count {} not in 1..=4", self.object_count)));
        }
        for &s in &self.appearance_switches {
            if s == 0 || s >= self.frames {
                return Err(Error::Config(format!(
                    "appearance switch at {} outside 1..{}",
                    s, self.frames
                )));
            }
        }
        for &(start, len) in &self.occlusions {
            if len == 0 || start + len > self.frames {
                return Err(Error::Config(format!(
                    "occlusion {}..{} outside 0..{}",
                    start,
                    start + len,
                    self.frames
                )));
            }
        }
        if !self.occlusions.is_empty() && self.object_count < 2 {
            return Err(Error::Config("occlusions need a distractor (object_count >= 2)".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} not in [0, 0.5]", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Disc,
    Square,
    Diamond,
}

impl ShapeKind {
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

#[derive(Clone)]
struct MovingObject {
    kind: ShapeKind,
    radius: f64,
    pos: [f64; 2],
    vel: [f64; 2],
    color: [f32; 3],
}

impl MovingObject {
    fn advance(&mut self, canvas: f64) {
        for a in 0..2 {
            self.pos[a] += self.vel[a];
            let lo = self.radius + 1.0;
            let hi = canvas - self.radius - 2.0;
            if self.pos[a] < lo {
                self.pos[a] = 2.0 * lo - self.pos[a];
                self.vel[a] = -self.vel[a];
            }
            if self.pos[a] > hi {
                self.pos[a] = 2.0 * hi - self.pos[a];
                self.vel[a] = -self.vel[a];
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // bright, saturated-ish colors so objects stand out on the dark bg
    [
        rng.gen_range(0.35..1.0f32),
        rng.gen_range(0.35..1.0f32),
        rng.gen_range(0.35..1.0f32),
    ]
}

fn distinct_color(rng: &mut ChaCha8Rng, avoid: &[[f32; 3]]) -> [f32; 3] {
    loop {
        let c = random_color(rng);
        let far_enough = avoid.iter().all(|a| {
            let d: f32 = a.iter().zip(c.iter()).map(|(x, y)| (x - y).abs()).sum();
            d > 0.6
        });
        if far_enough {
            return c;
        }
    }
}

/// Axis-aligned boxes of two objects overlap (with one pixel of margin)?
fn boxes_overlap(a: &MovingObject, b: &MovingObject) -> bool {
    (a.pos[0] - b.pos[0]).abs() <= a.radius + b.radius + 1.0
        && (a.pos[1] - b.pos[1]).abs() <= a.radius + b.radius + 1.0
}

/// Deterministic generator: the same `(config, seed)` yields the same
/// bytes. Mask labels: 0 background, 1 target, 2.. distractors (later
/// labels drawn on top).
pub fn gen_moving_shapes(cfg: &SyntheticConfig, seed: u64) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xDA7A);
    let n = cfg.canvas;
    let canvas = n as f64;

    let kinds = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Diamond];
    let mut colors_used: Vec<[f32; 3]> = Vec::new();
    let mut objects: Vec<MovingObject> = (0..cfg.object_count)
        .map(|i| {
            let kind = kinds[rng.gen_range(0..kinds.len())];
            let radius = rng.gen_range(5.0..7.5);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let pos = [
                rng.gen_range(radius + 2.0..canvas - radius - 3.0),
                rng.gen_range(radius + 2.0..canvas - radius - 3.0),
            ];
            let color = distinct_color(&mut rng, &colors_used);
            colors_used.push(color);
            let speed = cfg.speed * if i == 0 { 1.0 } else { 0.8 };
            MovingObject {
                kind,
                radius,
                pos,
                vel: [speed * angle.cos(), speed * angle.sin()],
                color,
            }
        })
        .collect();

    // pre-draw target colors for each appearance segment
    let mut switch_colors = Vec::new();
    for _ in &cfg.appearance_switches {
        let c = distinct_color(&mut rng, &colors_used);
        colors_used.push(c);
        switch_colors.push(c);
    }

    // background: dark diagonal gradient with a fixed blotch pattern
    let bg_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let background = |x: usize, y: usize| -> [f32; 3] {
        let fx = x as f64 / canvas;
        let fy = y as f64 / canvas;
        let base = 0.06 + 0.10 * (fx + fy) / 2.0;
        let ripple = 0.03 * ((fx * 9.0 + bg_phase).sin() * (fy * 7.0 + bg_phase).cos());
        let v = (base + ripple) as f32;
        [v, v * 0.9, v * 1.1]
    };

    let occluded = |t: usize| cfg.occlusions.iter().any(|&(s, l)| t >= s && t < s + l);

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    let mut switches_done = 0usize;

    for t in 0..cfg.frames {
        if t > 0 {
            for obj in objects.iter_mut() {
                obj.advance(canvas);
            }
        }
        if cfg.appearance_switches.get(switches_done) == Some(&t) {
            objects[0].color = switch_colors[switches_done];
            switches_done += 1;
        }

        // steer the first distractor: onto the target during occlusion
        // intervals, off it otherwise
        let mut draw_objects = objects.clone();
        if cfg.object_count >= 2 {
            if occluded(t) {
                let tp = draw_objects[0].pos;
                let off = draw_objects[0].radius * 0.6;
                draw_objects[1].pos = [tp[0] + off, tp[1]];
            } else {
                separate(&mut draw_objects, canvas);
            }
        }

        let mut frame = vec![0f32; 3 * n * n];
        let mut mask = vec![0u8; n * n];
        for y in 0..n {
            for x in 0..n {
                let c = background(x, y);
                for ch in 0..3 {
                    frame[ch * n * n + y * n + x] = c[ch];
                }
            }
        }
        // draw in label order: later objects overwrite (occlude) earlier
        for (i, obj) in draw_objects.iter().enumerate() {
            let label = (i + 1) as u8;
            let y0 = (obj.pos[1] - obj.radius).floor().max(0.0) as usize;
            let y1 = ((obj.pos[1] + obj.radius).ceil() as usize).min(n - 1);
            let x0 = (obj.pos[0] - obj.radius).floor().max(0.0) as usize;
            let x1 = ((obj.pos[0] + obj.radius).ceil() as usize).min(n - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = x as f64 - obj.pos[0];
                    let dy = y as f64 - obj.pos[1];
                    if obj.kind.covers(dx, dy, obj.radius) {
                        mask[y * n + x] = label;
                        for ch in 0..3 {
                            frame[ch * n * n + y * n + x] = obj.color[ch];
                        }
                    }
                }
            }
        }
        if cfg.noise > 0.0 {
            for v in frame.iter_mut() {
                let d = rng.gen_range(-cfg.noise..cfg.noise) as f32;
                *v = (*v + d).clamp(0.0, 1.0);
            }
        }
        frames.push(Tensor::from_vec(&[3, n, n], frame).expect("frame dims"));
        masks.push(mask);
    }

    Ok(SequenceSample {
        name: format!("synth-{:08x}", seed),
        frames,
        masks,
        object_count: cfg.object_count,
        seed,
    })
}

/// Push later objects off the target (object 0) so no bounding boxes
/// overlap outside scheduled occlusions. Deterministic: tries rightward,
/// leftward, downward, upward displacement in that order.
fn separate(objects: &mut [MovingObject], canvas: f64) {
    for i in 1..objects.len() {
        if !boxes_overlap(&objects[0], &objects[i]) {
            continue;
        }
        let clearance = objects[0].radius + objects[i].radius + 2.0;
        let t = objects[0].pos;
        let candidates = [
            [t[0] + clearance, objects[i].pos[1]],
            [t[0] - clearance, objects[i].pos[1]],
            [objects[i].pos[0], t[1] + clearance],
            [objects[i].pos[0], t[1] - clearance],
        ];
        for cand in candidates {
            let r = objects[i].radius + 1.0;
            if cand[0] >= r && cand[0] <= canvas - r - 1.0 && cand[1] >= r && cand[1] <= canvas - r - 1.0
            {
                objects[i].pos = cand;
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_bytes() {
        let cfg = SyntheticConfig { noise: 0.05, ..Default::default() };
        let a = gen_moving_shapes(&cfg, 7).unwrap();
        let b = gen_moving_shapes(&cfg, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for t in 0..a.len() {
            assert!(a.frames[t].bit_eq(&b.frames[t]), "frame {} differs", t);
            assert_eq!(a.masks[t], b.masks[t]);
        }
        let c = gen_moving_shapes(&cfg, 8).unwrap();
        assert!(!a.frames[0].bit_eq(&c.frames[0]), "different seed must differ");
    }

    #[test]
    fn occlusion_strictly_shrinks_target_mask() {
        let cfg = SyntheticConfig::default();
        let sample = gen_moving_shapes(&cfg, 3).unwrap();
        let area = |t: usize| sample.masks[t].iter().filter(|&&v| v == 1).count();
        let (start, len) = cfg.occlusions[0];
        let unoccluded = area(start - 1);
        for t in start..start + len {
            assert!(
                area(t) < unoccluded,
                "frame {}: occluded area {} !< unoccluded {}",
                t,
                area(t),
                unoccluded
            );
            assert!(area(t) > 0, "target should stay partly visible");
        }
    }

    #[test]
    fn mask_equals_rasterized_support_exactly() {
        // target pixels carry exactly the target color (noise off), and
        // every mask label matches a drawn shape pixel
        let cfg = SyntheticConfig { object_count: 1, occlusions: vec![], ..Default::default() };
        let sample = gen_moving_shapes(&cfg, 11).unwrap();
        let n = cfg.canvas;
        for t in [0usize, 10, 33] {
            let frame = &sample.frames[t];
            let mask = &sample.masks[t];
            let mut target_colors = std::collections::BTreeSet::new();
            for p in 0..n * n {
                if mask[p] == 1 {
                    let rgb = (
                        frame.data()[p].to_bits(),
                        frame.data()[n * n + p].to_bits(),
                        frame.data()[2 * n * n + p].to_bits(),
                    );
                    target_colors.insert(rgb);
                }
            }
            assert_eq!(target_colors.len(), 1, "frame {}: solid fill expected", t);
        }
    }

    #[test]
    fn mean_color_changes_exactly_at_switch_schedule() {
        let cfg = SyntheticConfig {
            appearance_switches: vec![9, 23],
            occlusions: vec![],
            noise: 0.0,
            ..Default::default()
        };
        let sample = gen_moving_shapes(&cfg, 5).unwrap();
        let n = cfg.canvas;
        let mean_color = |t: usize| -> [f32; 3] {
            let mut acc = [0f64; 3];
            let mut count = 0usize;
            for p in 0..n * n {
                if sample.masks[t][p] == 1 {
                    for ch in 0..3 {
                        acc[ch] += sample.frames[t].data()[ch * n * n + p] as f64;
                    }
                    count += 1;
                }
            }
            [0, 1, 2].map(|ch| (acc[ch] / count as f64) as f32)
        };
        let mut changed = Vec::new();
        let mut prev = mean_color(0);
        for t in 1..cfg.frames {
            let cur = mean_color(t);
            if cur != prev {
                changed.push(t);
            }
            prev = cur;
        }
        assert_eq!(changed, vec![9, 23]);
    }

    #[test]
    fn schedule_out_of_range_is_config_error() {
        let cfg = SyntheticConfig { appearance_switches: vec![40], ..Default::default() };
        assert!(matches!(gen_moving_shapes(&cfg, 0), Err(Error::Config(_))));
        let cfg = SyntheticConfig { occlusions: vec![(38, 5)], ..Default::default() };
        assert!(matches!(gen_moving_shapes(&cfg, 0), Err(Error::Config(_))));
    }
}
