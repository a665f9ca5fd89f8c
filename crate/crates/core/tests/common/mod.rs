//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use amvq::tensor::{Graph, Tensor, Var};
use amvq::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Double-loop nearest neighbour over `rows × dim` features and `k × dim`
/// codewords; the first minimum wins.
pub fn brute_force_nearest(features: &[f64], codewords: &[f64], dim: usize) -> Vec<usize> {
    let k = codewords.len() / dim;
    let mut out = Vec::new();
    for m in 0..features.len() / dim {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let mut d = 0.0;
            for l in 0..dim {
                let diff = features[m * dim + l] - codewords[j * dim + l];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Central differences of a scalar graph function of one input, with every
/// stop-gradient value pinned to its unperturbed value.
pub fn numeric_gradient(
    build: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    eps: f64,
) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = build(&mut g, v).unwrap();
    let _ = g.value(out);
    let pinned = g.stopped_values().to_vec();
    let eval = |data: Vec<f64>| {
        let mut g = Graph::with_pinned_stops(pinned.clone());
        let v = g.leaf(Tensor::new(x.shape().to_vec(), data).unwrap(), true);
        let out = build(&mut g, v).unwrap();
        g.value(out).item().unwrap()
    };
    (0..x.len())
        .map(|i| {
            let mut plus = x.data().to_vec();
            let mut minus = x.data().to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            (eval(plus) - eval(minus)) / (2.0 * eps)
        })
        .collect()
}

pub fn analytic_gradient(build: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = build(&mut g, v).unwrap();
    g.backward(out).unwrap().get(v).data().to_vec()
}

/// `max |a − n| / max(1, |n|)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / n.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn grad_error(build: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> f64 {
    relative_error(&analytic_gradient(build, x), &numeric_gradient(build, x, 1e-5))
}

/// Gaussian tail probability by composite Simpson integration of the density.
pub fn q_function(x: f64) -> f64 {
    let upper = x + 12.0;
    let n = 200_000;
    let h = (upper - x) / n as f64;
    let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(x) + pdf(upper);
    for i in 1..n {
        s += pdf(x + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Textbook gnomonic projection about `(lon0, lat0)`, scaled to a viewport of
/// `width × height` pixels with horizontal field of view `fov`.
pub fn gnomonic_pixel(lon0: f64, lat0: f64, fov: f64, width: usize, height: usize, lon: f64, lat: f64) -> (f64, f64) {
    let cos_c = lat0.sin() * lat.sin() + lat0.cos() * lat.cos() * (lon - lon0).cos();
    let x = lat.cos() * (lon - lon0).sin() / cos_c;
    let y = (lat0.cos() * lat.sin() - lat0.sin() * lat.cos() * (lon - lon0).cos()) / cos_c;
    let tx = (fov / 2.0).tan();
    let ty = tx * height as f64 / width as f64;
    ((x / tx + 1.0) * width as f64 / 2.0, (1.0 - y / ty) * height as f64 / 2.0)
}

/// Single-scale SSIM with a 2-D Gaussian window normalized as a whole,
/// evaluated at every fully covered window position.
pub fn reference_ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let (win, sigma) = (11usize, 1.5f64);
    let mut kernel = vec![0.0; win * win];
    for y in 0..win {
        for x in 0..win {
            let (dx, dy) = (x as f64 - 5.0, y as f64 - 5.0);
            kernel[y * win + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut sum = 0.0;
    let mut count = 0;
    for oy in 0..=height - win {
        for ox in 0..=width - win {
            let window = |img: &[f64], f: &dyn Fn(f64) -> f64| -> f64 {
                let mut s = 0.0;
                for y in 0..win {
                    for x in 0..win {
                        s += kernel[y * win + x] * f(img[(oy + y) * width + ox + x]);
                    }
                }
                s
            };
            let mu_a = window(a, &|v| v);
            let mu_b = window(b, &|v| v);
            let var_a = window(a, &|v| (v - mu_a).powi(2));
            let var_b = window(b, &|v| (v - mu_b).powi(2));
            let mut cov = 0.0;
            for y in 0..win {
                for x in 0..win {
                    let i = (oy + y) * width + ox + x;
                    cov += kernel[y * win + x] * (a[i] - mu_a) * (b[i] - mu_b);
                }
            }
            sum += (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// A small experiment: four 32×64 synthetic panoramas, a 64-word codebook
/// and a noiseless channel.
pub fn tiny_config() -> amvq::harness::ExperimentConfig {
    use amvq::harness::{DatasetSpec, ExperimentConfig};
    use amvq::train::TrainConfig;
    use amvq::vq::VqConfig;
    let mut cfg = ExperimentConfig::default();
    cfg.codec.image_height = 32;
    cfg.codec.image_width = 64;
    cfg.train = TrainConfig { steps: 40, gan_enabled: false, lr_generator: 2e-3, ..TrainConfig::default() };
    cfg.vq = VqConfig { codebook_size: 64, ..VqConfig::default() };
    cfg.dataset = DatasetSpec::Synthetic { count: 4, seed: 0 };
    cfg
}

/// Trains the tiny configuration into `out`.
pub fn tiny_model(out: &std::path::Path) -> (amvq::harness::ExperimentConfig, amvq::harness::Model) {
    let cfg = tiny_config();
    let model = amvq::harness::train_model(&cfg, out).unwrap();
    (cfg, model)
}
