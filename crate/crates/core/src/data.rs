//! Synthetic image classification data.
//!
//! Each class owns a color prototype on a sphere in RGB space (so every
//! class is linearly separable from the rest in mean-color statistics)
//! plus an oriented sinusoidal texture. Per-sample jitter, phase, and
//! pixel noise come from a stream keyed by (seed, class, index), so the
//! dataset regenerates bit-identically regardless of generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Samples per class; a fifth (at least one) is held out for test.
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleImage {
    /// [3, s, s] row-major, values in [0, 1].
    pub pixels: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub cfg: SyntheticConfig,
    pub train: Vec<SampleImage>,
    pub test: Vec<SampleImage>,
}

fn sample_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((class as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Unit direction for class `c` of `n`: antipodal pair for n = 2 (color
/// extremes), Fibonacci sphere otherwise. All points lie on the convex
/// hull, so each class is linearly separable from the others.
fn class_direction(c: usize, n: usize) -> [f64; 3] {
    if n == 2 {
        let s = if c == 0 { -1.0 } else { 1.0 };
        let v = s / 3f64.sqrt();
        return [v, v, v];
    }
    let z = 1.0 - 2.0 * (c as f64 + 0.5) / n as f64;
    let r = (1.0 - z * z).sqrt();
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let phi = 2.0 * std::f64::consts::PI * (c as f64) / golden;
    [r * phi.cos(), r * phi.sin(), z]
}

pub fn class_color(c: usize, n: usize) -> [f64; 3] {
    let d = class_direction(c, n);
    [0.5 + 0.34 * d[0], 0.5 + 0.34 * d[1], 0.5 + 0.34 * d[2]]
}

fn render_sample(cfg: &SyntheticConfig, class: usize, index: usize) -> SampleImage {
    let s = cfg.image_size;
    let mut rng = sample_rng(cfg.seed, class, index);
    let color = class_color(class, cfg.classes);
    let freq = 1.0 + (class % 4) as f64;
    let angle = std::f64::consts::FRAC_PI_4 * ((class / 4) % 4) as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let jitter: [f64; 3] = [
        0.02 * rng.sample::<f64, _>(StandardNormal),
        0.02 * rng.sample::<f64, _>(StandardNormal),
        0.02 * rng.sample::<f64, _>(StandardNormal),
    ];
    let mut pixels = vec![0f32; 3 * s * s];
    for i in 0..s {
        for j in 0..s {
            let u = i as f64 / s as f64;
            let w = j as f64 / s as f64;
            let tex = 0.08
                * (std::f64::consts::TAU * freq * (ca * u + sa * w) + phase).sin();
            for ch in 0..3 {
                let noise: f64 = 0.03 * rng.sample::<f64, _>(StandardNormal);
                let v = (color[ch] + jitter[ch] + tex + noise).clamp(0.0, 1.0);
                pixels[ch * s * s + i * s + j] = v as f32;
            }
        }
    }
    SampleImage { pixels, label: class }
}

/// Generate a balanced, deterministic dataset with disjoint train/test
/// splits (distinct per-class sample indices).
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs >= 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.per_class < 2 || cfg.image_size < 4 {
        return Err(Error::InvalidArgument(
            "synthetic data needs per_class >= 2 and image_size >= 4".into(),
        ));
    }
    let n_test = (cfg.per_class / 5).max(1);
    let n_train = cfg.per_class - n_test;
    let mut train = Vec::with_capacity(cfg.classes * n_train);
    let mut test = Vec::with_capacity(cfg.classes * n_test);
    for class in 0..cfg.classes {
        for index in 0..cfg.per_class {
            let sample = render_sample(cfg, class, index);
            if index < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(SyntheticDataset {
        cfg: cfg.clone(),
        train,
        test,
    })
}

/// Assemble selected samples into a [B, 3, s, s] batch plus labels.
pub fn to_batch<E: Element>(
    samples: &[SampleImage],
    indices: &[usize],
    image_size: usize,
) -> (Tensor<E>, Vec<usize>) {
    let chw = 3 * image_size * image_size;
    let mut data = Vec::with_capacity(indices.len() * chw);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend(samples[i].pixels.iter().map(|&v| E::from_f64(v as f64)));
        labels.push(samples[i].label);
    }
    let t = Tensor::new(vec![indices.len(), 3, image_size, image_size], data)
        .expect("batch shape consistent");
    (t, labels)
}

/// Mean RGB of an image: the statistic that separates the classes.
pub fn mean_color(pixels: &[f32], image_size: usize) -> [f64; 3] {
    let hw = image_size * image_size;
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        *o = pixels[ch * hw..(ch + 1) * hw]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / hw as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(classes: usize, per_class: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            classes,
            per_class,
            image_size: 16,
            seed,
        }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let a = make_synthetic(&cfg(4, 10, 7)).unwrap();
        let b = make_synthetic(&cfg(4, 10, 7)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = make_synthetic(&cfg(4, 10, 8)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn labels_exactly_balanced_and_splits_disjoint() {
        let ds = make_synthetic(&cfg(5, 10, 1)).unwrap();
        let mut train_hist = vec![0usize; 5];
        let mut test_hist = vec![0usize; 5];
        for s in &ds.train {
            train_hist[s.label] += 1;
        }
        for s in &ds.test {
            test_hist[s.label] += 1;
        }
        assert!(train_hist.iter().all(|&c| c == 8));
        assert!(test_hist.iter().all(|&c| c == 2));
        // disjoint: no train image equals a test image
        for tr in &ds.train {
            for te in &ds.test {
                assert_ne!(tr.pixels, te.pixels);
            }
        }
    }

    #[test]
    fn pixels_are_in_unit_range() {
        let ds = make_synthetic(&cfg(16, 4, 3)).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert!(s.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn two_class_extremes_are_linearly_separable() {
        // closed-form midpoint classifier on mean color: 100% on test
        let ds = make_synthetic(&cfg(2, 20, 5)).unwrap();
        let mut means = [[0.0f64; 3]; 2];
        let mut counts = [0usize; 2];
        for s in &ds.train {
            let m = mean_color(&s.pixels, ds.cfg.image_size);
            for ch in 0..3 {
                means[s.label][ch] += m[ch];
            }
            counts[s.label] += 1;
        }
        for (mean, count) in means.iter_mut().zip(counts) {
            for v in mean.iter_mut() {
                *v /= count as f64;
            }
        }
        let w: Vec<f64> = (0..3).map(|ch| means[1][ch] - means[0][ch]).collect();
        let mid: Vec<f64> = (0..3).map(|ch| (means[1][ch] + means[0][ch]) / 2.0).collect();
        let bias: f64 = -(0..3).map(|ch| w[ch] * mid[ch]).sum::<f64>();
        let mut correct = 0;
        for s in &ds.test {
            let m = mean_color(&s.pixels, ds.cfg.image_size);
            let score: f64 = (0..3).map(|ch| w[ch] * m[ch]).sum::<f64>() + bias;
            let pred = usize::from(score > 0.0);
            correct += usize::from(pred == s.label);
        }
        assert_eq!(correct, ds.test.len(), "linear probe must be perfect");
    }

    #[test]
    fn sixteen_class_prototypes_stay_separated() {
        // every class's own prototype must be its nearest prototype under
        // per-sample mean color, with margin over the runner-up
        let ds = make_synthetic(&cfg(16, 5, 2)).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            let m = mean_color(&s.pixels, ds.cfg.image_size);
            let mut best = (f64::INFINITY, usize::MAX);
            for c in 0..16 {
                let p = class_color(c, 16);
                let d: f64 = (0..3).map(|ch| (m[ch] - p[ch]).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            assert_eq!(best.1, s.label);
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(make_synthetic(&cfg(1, 10, 0)).is_err());
        assert!(make_synthetic(&cfg(4, 1, 0)).is_err());
    }
}
