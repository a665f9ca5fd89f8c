//! Viewport-based quality metrics for equirectangular images.
//!
//! Pixel coordinates here are continuous with pixel `(i, j)` covering
//! `[i, i+1) × [j, j+1)`, so its center sits at `(i + 0.5, j + 0.5)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::batched;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Kind, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const PERCEPTUAL_SEED: u64 = 1234;
pub const PERCEPTUAL_STEM: &str = "perceptual";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewportSpec {
    pub yaw: f64,
    pub pitch: f64,
    /// Horizontal field of view.
    pub fov: f64,
    pub out_width: usize,
    pub out_height: usize,
}

impl ViewportSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(Error::Config(format!("field of view {} outside (0, π)", self.fov)));
        }
        if !(self.pitch.abs() <= FRAC_PI_2) || !self.yaw.is_finite() {
            return Err(Error::Config(format!("pitch {} outside [-π/2, π/2] or bad yaw", self.pitch)));
        }
        if self.out_width == 0 || self.out_height == 0 {
            return Err(Error::Config("viewport size must be positive".into()));
        }
        Ok(())
    }

    fn half_extent(&self) -> (f64, f64) {
        let tx = (self.fov / 2.0).tan();
        (tx, tx * self.out_height as f64 / self.out_width as f64)
    }

    /// Camera axes (right, up, forward) in world coordinates, where world
    /// `z` points at longitude 0 on the equator, `x` at longitude +π/2 and `y` up.
    fn axes(&self) -> [[f64; 3]; 3] {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let forward = [cp * sy, sp, cp * cy];
        let right = [cy, 0.0, -sy];
        let up = [-sp * sy, cp, -sp * cy];
        [right, up, forward]
    }

    /// Longitude and latitude seen at a viewport position.
    pub fn pixel_to_sphere(&self, px: f64, py: f64) -> (f64, f64) {
        let (tx, ty) = self.half_extent();
        let x = (2.0 * px / self.out_width as f64 - 1.0) * tx;
        let y = (1.0 - 2.0 * py / self.out_height as f64) * ty;
        let [r, u, f] = self.axes();
        let d: Vec<f64> = (0..3).map(|i| x * r[i] + y * u[i] + f[i]).collect();
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        (d[0].atan2(d[2]), (d[1] / norm).clamp(-1.0, 1.0).asin())
    }

    /// Inverse of [`pixel_to_sphere`](Self::pixel_to_sphere); `None` behind the camera.
    pub fn sphere_to_pixel(&self, lon: f64, lat: f64) -> Option<(f64, f64)> {
        let d = [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()];
        let [r, u, f] = self.axes();
        let dot = |a: [f64; 3]| a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
        let depth = dot(f);
        if depth <= 1e-12 {
            return None;
        }
        let (tx, ty) = self.half_extent();
        let x = dot(r) / depth / tx;
        let y = dot(u) / depth / ty;
        Some(((x + 1.0) * self.out_width as f64 / 2.0, (1.0 - y) * self.out_height as f64 / 2.0))
    }
}

/// Equirectangular position of a direction, in continuous pixel coordinates.
pub fn sphere_to_equirect(lon: f64, lat: f64, width: usize, height: usize) -> (f64, f64) {
    ((lon + PI) / (2.0 * PI) * width as f64, (FRAC_PI_2 - lat) / PI * height as f64)
}

pub fn equirect_to_sphere(u: f64, v: f64, width: usize, height: usize) -> (f64, f64) {
    (u / width as f64 * 2.0 * PI - PI, FRAC_PI_2 - v / height as f64 * PI)
}

/// Bilinear sample of channel plane `plane` (`height × width`) at continuous
/// coordinates; longitude wraps, latitude clamps.
fn sample(plane: &[f64], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let x = u - 0.5;
    let y = (v - 0.5).clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let col = |c: f64| (c as i64).rem_euclid(width as i64) as usize;
    let (c0, c1) = (col(x0), col(x0 + 1.0));
    let r0 = y0 as usize;
    let r1 = (r0 + 1).min(height - 1);
    let at = |r: usize, c: usize| plane[r * width + c];
    (1.0 - fy) * ((1.0 - fx) * at(r0, c0) + fx * at(r0, c1)) + fy * ((1.0 - fx) * at(r1, c0) + fx * at(r1, c1))
}

fn image_dims<S: Scalar>(t: &Tensor<S>) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] if w == 2 * h => Ok([c, h, w]),
        _ => Err(Error::shape("equirect", format!("expected [C, H, 2H], got {:?}", t.shape()))),
    }
}

/// Rectilinear view of an equirectangular `[C, H, 2H]` image, `[C, out_h, out_w]`.
pub fn extract_viewport<S: Scalar>(equirect: &Tensor<S>, spec: &ViewportSpec) -> Result<Tensor<f64>> {
    spec.validate()?;
    let [c, h, w] = image_dims(equirect)?;
    let data: Vec<f64> = equirect.data().iter().map(|v| v.as_f64()).collect();
    let (ow, oh) = (spec.out_width, spec.out_height);
    let coords: Vec<(f64, f64)> = (0..oh * ow)
        .map(|i| {
            let (lon, lat) = spec.pixel_to_sphere((i % ow) as f64 + 0.5, (i / ow) as f64 + 0.5);
            sphere_to_equirect(lon, lat, w, h)
        })
        .collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in data.chunks_exact(h * w) {
        out.extend(coords.iter().map(|&(u, v)| sample(plane, w, h, u, v)));
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Viewports over which the metrics average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewportSet(pub Vec<ViewportSpec>);

impl ViewportSet {
    /// Eight equatorial views 45° apart with a 90° field of view, each
    /// `min(256, max(16, W/4))` pixels square.
    pub fn default_for(width: usize) -> Self {
        let size = (width / 4).clamp(16, 256);
        ViewportSet(
            (0..8)
                .map(|i| ViewportSpec {
                    yaw: (i as f64 * 45.0).to_radians(),
                    pitch: 0.0,
                    fov: FRAC_PI_2,
                    out_width: size,
                    out_height: size,
                })
                .collect(),
        )
    }

    fn check(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("viewport set is empty".into()));
        }
        Ok(())
    }
}

/// `[-1, 1]` to the 8-bit scale `[0, 255]`.
pub fn to_8bit(v: f64) -> f64 {
    (v + 1.0) * 127.5
}

fn check_pair<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape("metric", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    image_dims(x).map(|_| ())
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean over viewports of the 8-bit PSNR of each view.
pub fn vpsnr<S: Scalar>(x: &Tensor<S>, x_hat: &Tensor<S>, viewports: &ViewportSet) -> Result<f64> {
    check_pair(x, x_hat)?;
    viewports.check()?;
    let mut total = 0.0;
    for spec in &viewports.0 {
        let a = extract_viewport(x, spec)?;
        let b = extract_viewport(x_hat, spec)?;
        let mse = a.data().iter().zip(b.data()).map(|(p, q)| (to_8bit(*p) - to_8bit(*q)).powi(2)).sum::<f64>()
            / a.len() as f64;
        total += psnr_from_mse(mse);
    }
    Ok(total / viewports.0.len() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn luma(view: &Tensor<f64>) -> Result<Vec<f64>> {
    let [c, h, w] = match *view.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::shape("luma", format!("{:?}", view.shape()))),
    };
    let n = h * w;
    let d = view.data();
    Ok(match c {
        1 => d.iter().map(|&v| to_8bit(v)).collect(),
        3 => (0..n).map(|i| 0.299 * to_8bit(d[i]) + 0.587 * to_8bit(d[n + i]) + 0.114 * to_8bit(d[2 * n + i])).collect(),
        _ => return Err(Error::Unsupported(format!("luma of {c} channels"))),
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all window positions fully inside the image (8-bit luma).
pub fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Invalid(format!("{width}x{height} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let (ow, oh) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = g[ky] * g[kx];
                    let i = (oy + ky) * width + ox + kx;
                    ma += wgt * a[i];
                    mb += wgt * b[i];
                    saa += wgt * a[i] * a[i];
                    sbb += wgt * b[i] * b[i];
                    sab += wgt * a[i] * b[i];
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// Mean over viewports of the luma SSIM of each view.
pub fn vssim<S: Scalar>(x: &Tensor<S>, x_hat: &Tensor<S>, viewports: &ViewportSet) -> Result<f64> {
    check_pair(x, x_hat)?;
    viewports.check()?;
    let mut total = 0.0;
    for spec in &viewports.0 {
        let a = luma(&extract_viewport(x, spec)?)?;
        let b = luma(&extract_viewport(x_hat, spec)?)?;
        total += if a == b { 1.0 } else { ssim_plane(&a, &b, spec.out_width, spec.out_height)? };
    }
    Ok(total / viewports.0.len() as f64)
}

/// Frozen three-block convolutional feature extractor.
pub struct PerceptualExtractor {
    pub blocks: [Conv2d<f32>; 3],
}

impl PerceptualExtractor {
    /// Random weights from the fixed seed.
    pub fn seeded() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let b1 = Conv2d::new("perceptual.block1", 3, 16, 3, Conv2dSpec::new(1, 1), &mut rng);
        let b2 = Conv2d::new("perceptual.block2", 16, 32, 3, Conv2dSpec::new(2, 1), &mut rng);
        let b3 = Conv2d::new("perceptual.block3", 32, 64, 3, Conv2dSpec::new(2, 1), &mut rng);
        PerceptualExtractor { blocks: [b1, b2, b3] }
    }

    /// Weights from a checkpoint with the same tensor names and shapes.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut e = Self::seeded();
        checkpoint::load_into(dir, PERCEPTUAL_STEM, &mut e)?;
        Ok(e)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, PERCEPTUAL_STEM, self, serde_json::json!({}))
    }

    /// Third-block activations for a `[3, H, W]` image.
    pub fn features<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let input = x.cast::<f32>().reshape(&batched(x.shape()))?;
        let mut h = g.constant(input);
        for b in &self.blocks {
            h = b.forward(&mut g, h)?;
            h = g.relu(h);
        }
        Ok(g.value(h).clone())
    }
}

impl Module<f32> for PerceptualExtractor {
    fn visit(&self, f: &mut dyn FnMut(&Param<f32>, Kind)) {
        self.blocks.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>, Kind)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

/// Mean squared difference of third-block features.
pub fn perceptual_loss<S: Scalar>(x: &Tensor<S>, x_hat: &Tensor<S>, extractor: &PerceptualExtractor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("perceptual_loss", format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let a = extractor.features(x)?;
    let b = extractor.features(x_hat)?;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub bpp: f64,
    pub vpsnr_db: f64,
    pub vssim: f64,
    pub perceptual: f64,
    pub raw_fraction: f64,
    #[serde(rename = "T")]
    pub t: f64,
    /// Empty for a noiseless channel.
    pub snr_db: Option<f64>,
}

pub fn write_rows<W: Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
