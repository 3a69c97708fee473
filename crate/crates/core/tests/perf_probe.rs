//! Rough step-cost probe (ignored by default; run with --ignored).

use std::time::Instant;

use stremn_core::memory::{Mode, PolicyKind};
use stremn_core::model::{ModelConfig, StepRng, VosModel};
use stremn_core::nn::track_params;
use stremn_core::optim::{collect_grads, Adam};
use stremn_core::tensor::{ops, GradientTape, Tensor};

#[test]
#[ignore]
fn vos_step_timing() {
    for (base, label) in [(8usize, "w8"), (16, "w16"), (32, "w32")] {
        let cfg = ModelConfig { base_width: base, ..ModelConfig::vos_default() };
        let model: VosModel<f32> = VosModel::new(cfg, 1).unwrap();
        let frame = Tensor::<f32>::from_fn(&[3, 64, 64], |i| (i % 255) as f32 / 255.0);
        let mask = Tensor::<f32>::full(&[1, 64, 64], 1.0);
        let mut rng = StepRng::new(0);

        // eval rollout cost
        let mut state = model.init_state(&frame, &mask, PolicyKind::Learned).unwrap();
        for _ in 0..6 {
            model.step(&mut state, &frame, Mode::Eval, &mut rng, None).unwrap();
        }
        let t0 = Instant::now();
        for _ in 0..10 {
            model.step(&mut state, &frame, Mode::Eval, &mut rng, None).unwrap();
        }
        let eval_ms = t0.elapsed().as_secs_f64() * 100.0;

        // train step cost: clip of 4 frames, forward+backward+adam
        let mut m = model.clone();
        let mut adam = Adam::new();
        let labels = vec![1usize; 64 * 64];
        let t0 = Instant::now();
        let clip = 4;
        for _ in 0..2 {
            let tape = GradientTape::<f32>::new();
            let mut tracked = m.clone();
            track_params(&mut tracked, &tape);
            let mut state = tracked.init_state(&frame, &mask, PolicyKind::Learned).unwrap();
            let mut loss = None;
            for _ in 0..clip {
                let logits =
                    tracked.step(&mut state, &frame, Mode::Train, &mut rng, None).unwrap();
                let l = ops::cross_entropy_pixel(&logits, &labels).unwrap();
                loss = Some(match loss {
                    None => l,
                    Some(prev) => ops::add(&prev, &l).unwrap(),
                });
            }
            let grads = tape.backward(&loss.unwrap()).unwrap();
            let gmap = collect_grads(&tracked, &grads);
            adam.step(&mut m, &gmap, 1e-4);
        }
        let train_ms = t0.elapsed().as_secs_f64() * 500.0;
        println!("{label}: eval step {eval_ms:.1} ms, train step (clip {clip}) {train_ms:.1} ms");
    }
}
