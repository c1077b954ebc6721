use std::time::Instant;
use vismoe::tensor::{Graph, Tensor};

fn main() {
    // raw matmul throughput at model-relevant sizes
    let reps = 2000;
    for (m, k, n) in [(65usize, 64usize, 64usize), (65, 64, 256), (65, 256, 64)] {
        let a = Tensor::<f32>::full(vec![m, k], 0.5);
        let b = Tensor::<f32>::full(vec![k, n], 0.25);
        let t0 = Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let mut g = Graph::new();
            let av = g.leaf(&a);
            let bv = g.leaf(&b);
            let c = g.matmul(av, bv).unwrap();
            sink += g.value(c)[0];
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n) as f64 * reps as f64) / dt / 1e9;
        println!("matmul f32 {m}x{k}x{n}: {gflops:.2} GFLOP/s (sink {sink})");
    }
    {
        let a = Tensor::<f64>::full(vec![65, 64], 0.5);
        let b = Tensor::<f64>::full(vec![64, 256], 0.25);
        let t0 = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            let mut g = Graph::new();
            let av = g.leaf(&a);
            let bv = g.leaf(&b);
            let c = g.matmul(av, bv).unwrap();
            sink += g.value(c)[0];
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("matmul f64 65x64x256: {:.2} GFLOP/s (sink {sink})", (2.0*65.0*64.0*256.0*reps as f64)/dt/1e9);
    }
    // gelu throughput
    let x = Tensor::<f32>::full(vec![65, 256], 0.3);
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.gelu(xv);
        sink += g.value(y)[0];
    }
    let per = t0.elapsed().as_secs_f64() / (reps as f64 * 65.0 * 256.0) * 1e9;
    println!("gelu: {per:.1} ns/elem (sink {sink})");
    // layer_norm + softmax
    let x = Tensor::<f32>::full(vec![65, 64], 0.3);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.layer_norm(xv, 1e-6);
        let z = g.softmax(y);
        sink += g.value(z)[0];
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64 * 1e6;
    println!("ln+softmax [65,64]: {per:.1} us/call (sink {sink})");
}
