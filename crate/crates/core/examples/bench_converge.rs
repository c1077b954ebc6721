use std::time::Instant;
use vismoe::backbone::{preset, Model, ModelSpec, MoeSettings, PlacementStrategy};
use vismoe::data::{make_synthetic, SyntheticConfig};
use vismoe::routing::{CapacityConfig, GateKind};
use vismoe::training::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let balance: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let skew: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let ds = make_synthetic(&SyntheticConfig { classes: 16, per_class: 50, image_size: 32, seed: 1 }).unwrap();
    let cfg = TrainConfig {
        steps, batch_size: 12, lr, warmup_steps: steps / 10,
        weight_decay: 0.05, expert_weight_decay: 0.1, balance_weight: balance,
        label_smoothing: 0.0, seed: 11, eval_every: (steps / 6).max(1), checkpoint_every: 0,
        grad_clip: None, gate_bias_skew: skew, drop_path: 0.0, threads: 1,
    };
    let spec = ModelSpec::dense(preset("micro-vit").unwrap());
    let (mut m, _) = Model::<f32>::build(&spec, 11).unwrap();
    let t0 = Instant::now();
    let out = train(&mut m, &ds, &cfg, None).unwrap();
    for r in &out.log {
        println!("dense step {:4} loss {:.4} acc {:.3}", r.step, r.train_loss, r.test_acc);
    }
    println!("dense total {:.1}s", t0.elapsed().as_secs_f64());

    let spec_moe = ModelSpec {
        arch: preset("micro-vit").unwrap(),
        placement: PlacementStrategy::Last2,
        moe: Some(MoeSettings { num_experts: 4, top_k: 1, gate: GateKind::Linear, mlp_ratio: 2.0, capacity: CapacityConfig::Unlimited }),
    };
    let (mut m2, _) = Model::<f32>::build(&spec_moe, 11).unwrap();
    let t0 = Instant::now();
    let out2 = train(&mut m2, &ds, &cfg, None).unwrap();
    for r in &out2.log {
        let usage: Vec<String> = r.expert_usage.iter().map(|u| format!("L{}:{:?} r{:.2}", u.layer_id, u.counts, u.max_min_ratio.unwrap_or(f64::INFINITY))).collect();
        println!("moe step {:4} loss {:.4} acc {:.3} aux {:.3} {}", r.step, r.train_loss, r.test_acc, r.aux, usage.join(" "));
    }
    println!("moe total {:.1}s", t0.elapsed().as_secs_f64());
}
