use std::time::Instant;
use vismoe::tensor::{Graph, Tensor};

fn bench(name: &str, f: impl Fn(&mut Graph<f32>, vismoe::tensor::Var) -> vismoe::tensor::Var) {
    let x = Tensor::<f32>::full(vec![65, 64], 0.3).with_requires_grad();
    let reps = 300;
    // forward total
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let _y = f(&mut g, xv);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64 * 1e6;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = f(&mut g, xv);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
    }
    let both = t0.elapsed().as_secs_f64() / reps as f64 * 1e6;
    println!("{name:24} fwd {fwd:8.1} us   fwd+bwd {both:8.1} us   bwd/fwd {:.1}", (both - fwd) / fwd);
}

fn main() {
    let w = Tensor::<f32>::full(vec![64, 256], 0.02).with_requires_grad();
    let w2 = Tensor::<f32>::full(vec![64, 64], 0.02).with_requires_grad();
    bench("matmul 65x64x256", |g, x| { let wv = g.leaf(&w); g.matmul(x, wv).unwrap() });
    bench("matmul 65x64x64", |g, x| { let wv = g.leaf(&w2); g.matmul(x, wv).unwrap() });
    bench("gelu", |g, x| g.gelu(x));
    bench("layer_norm", |g, x| g.layer_norm(x, 1e-6));
    bench("softmax", |g, x| g.softmax(x));
    bench("matmul_nt 65x16 scores", |g, x| {
        let q = g.slice_cols(x, 0, 16).unwrap();
        let k = g.slice_cols(x, 16, 16).unwrap();
        g.matmul_nt(q, k).unwrap()
    });
    bench("dwconv7 8x8x64", |g, x| {
        let t = g.slice_rows(x, 0, 64).unwrap();
        let kern = g.constant(vec![64, 7, 7], vec![0.01; 64*49]).unwrap();
        g.depthwise_conv7x7(t, kern, None, 8, 8).unwrap()
    });
}
