use std::time::Instant;

fn main() {
    // replicate kernels here to compare shapes directly
    let (m, k, n) = (65usize, 64usize, 256usize);
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let dy = vec![1.0f32; m * n];
    let reps = 2000;

    let mut c = vec![0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        vismoe_kernels::matmul_acc(&mut c, &a, &b, m, k, n);
    }
    report("matmul_acc (fwd)", t0, reps, m * k * n, c[0]);

    let mut da = vec![0f32; m * k];
    let t0 = Instant::now();
    for _ in 0..reps {
        vismoe_kernels::matmul_nt_acc(&mut da, &dy, &b, m, n, k);
    }
    report("matmul_nt_acc (da)", t0, reps, m * k * n, da[0]);

    let mut db = vec![0f32; k * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        vismoe_kernels::matmul_tn_acc(&mut db, &a, &dy, m, k, n);
    }
    report("matmul_tn_acc (db)", t0, reps, m * k * n, db[0]);
}

fn report(name: &str, t0: Instant, reps: usize, macs: usize, sink: f32) {
    let dt = t0.elapsed().as_secs_f64();
    println!("{name:20} {:8.2} GFLOP/s (sink {sink})", 2.0 * macs as f64 * reps as f64 / dt / 1e9);
}

mod vismoe_kernels {
    pub fn matmul_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
        let _ = m;
        for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
                for (c_ij, &b_kj) in c_row.iter_mut().zip(b_row) {
                    *c_ij += a_ik * b_kj;
                }
            }
        }
    }
    pub fn matmul_nt_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
        let _ = m;
        for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            for (c_ij, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
                let mut acc = 0f32;
                for (&a_ik, &b_jk) in a_row.iter().zip(b_row) {
                    acc += a_ik * b_jk;
                }
                *c_ij += acc;
            }
        }
    }
    pub fn matmul_tn_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
        let _ = m;
        for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
            for (&a_ik, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
                for (c_kj, &b_ij) in c_row.iter_mut().zip(b_row) {
                    *c_kj += a_ik * b_ij;
                }
            }
        }
    }
}
