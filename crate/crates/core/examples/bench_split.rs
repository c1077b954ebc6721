use std::time::Instant;
use vismoe::backbone::{preset, Model, ModelSpec, MoeSettings, PlacementStrategy};
use vismoe::data::{make_synthetic, to_batch, SyntheticConfig};
use vismoe::routing::{CapacityConfig, GateKind};
use vismoe::tensor::Graph;

fn main() {
    let ds = make_synthetic(&SyntheticConfig { classes: 16, per_class: 50, image_size: 32, seed: 1 }).unwrap();
    let spec = ModelSpec {
        arch: preset("micro-vit").unwrap(),
        placement: PlacementStrategy::Last2,
        moe: Some(MoeSettings { num_experts: 4, top_k: 1, gate: GateKind::Linear, mlp_ratio: 2.0, capacity: CapacityConfig::Unlimited }),
    };
    let (mut model, _) = Model::<f32>::build(&spec, 1).unwrap();
    let reps = 50usize;

    // forward only, no grads
    model.set_requires_grad(false);
    let idx: Vec<usize> = (0..1).collect();
    let (images, labels) = to_batch::<f32>(&ds.train, &idx, 32);
    let img0 = Model::image_tensor(&images, 0).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let iv = g.leaf(&img0);
        let _ = model.forward_image(&mut g, &vars, iv).unwrap();
    }
    println!("forward only (no grad): {:.1} ms/img", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // forward with grads tracked (no backward)
    model.set_requires_grad(true);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let iv = g.leaf(&img0);
        let _ = model.forward_image(&mut g, &vars, iv).unwrap();
    }
    println!("forward (grad tracked): {:.1} ms/img", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // forward + ce + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let iv = g.leaf(&img0);
        let fwd = model.forward_image(&mut g, &vars, iv).unwrap();
        let ce = g.cross_entropy(fwd.logits, &[labels[0]], 0.0).unwrap();
        g.backward(ce).unwrap();
    }
    println!("forward+backward: {:.1} ms/img", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // + grad extraction into params
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let iv = g.leaf(&img0);
        let fwd = model.forward_image(&mut g, &vars, iv).unwrap();
        let ce = g.cross_entropy(fwd.logits, &[labels[0]], 0.0).unwrap();
        g.backward(ce).unwrap();
        let _grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| g.grad(v).map(<[f32]>::to_vec)).collect();
    }
    println!("fwd+bwd+extract: {:.1} ms/img", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
