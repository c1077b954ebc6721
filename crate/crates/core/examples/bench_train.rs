use std::time::Instant;
use vismoe::backbone::{preset, Model, ModelSpec, MoeSettings, PlacementStrategy};
use vismoe::data::{make_synthetic, SyntheticConfig};
use vismoe::routing::{CapacityConfig, GateKind};
use vismoe::training::{train, TrainConfig};

fn main() {
    let ds = make_synthetic(&SyntheticConfig { classes: 16, per_class: 50, image_size: 32, seed: 1 }).unwrap();
    let spec_moe = ModelSpec {
        arch: preset("micro-vit").unwrap(),
        placement: PlacementStrategy::Last2,
        moe: Some(MoeSettings { num_experts: 4, top_k: 1, gate: GateKind::Linear, mlp_ratio: 2.0, capacity: CapacityConfig::Unlimited }),
    };
    let cfg = TrainConfig {
        steps: 20, batch_size: 16, lr: 2e-3, warmup_steps: 5,
        weight_decay: 0.05, expert_weight_decay: 0.1, balance_weight: 0.01,
        label_smoothing: 0.0, seed: 1, eval_every: 0, checkpoint_every: 0,
        grad_clip: None, gate_bias_skew: 0.0, drop_path: 0.0, threads: 1,
    };
    // f32
    let (mut m32, _) = Model::<f32>::build(&spec_moe, 1).unwrap();
    let t0 = Instant::now();
    let out = train(&mut m32, &ds, &cfg, None).unwrap();
    let dt32 = t0.elapsed().as_secs_f64();
    println!("f32 moe: {:.1} ms/step (acc after 20 steps: {:.3})", dt32 / 20.0 * 1000.0, out.final_eval.accuracy);
    // f64
    let (mut m64, _) = Model::<f64>::build(&spec_moe, 1).unwrap();
    let t0 = Instant::now();
    let _ = train(&mut m64, &ds, &cfg, None).unwrap();
    let dt64 = t0.elapsed().as_secs_f64();
    println!("f64 moe: {:.1} ms/step", dt64 / 20.0 * 1000.0);
    // dense f32
    let spec_dense = ModelSpec::dense(preset("micro-vit").unwrap());
    let (mut md, _) = Model::<f32>::build(&spec_dense, 1).unwrap();
    let t0 = Instant::now();
    let _ = train(&mut md, &ds, &cfg, None).unwrap();
    println!("f32 dense: {:.1} ms/step", t0.elapsed().as_secs_f64() / 20.0 * 1000.0);
}
