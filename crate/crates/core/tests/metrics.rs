mod common;

use std::f64::consts::{FRAC_PI_2, PI};

use amvq::harness::synth_panorama;
use amvq::metrics::{
    equirect_to_sphere, extract_viewport, perceptual_loss, psnr_from_mse, ssim_plane, vpsnr, vssim, write_rows,
    MetricRow, PerceptualExtractor, ViewportSet, ViewportSpec,
};
use amvq::tensor::Tensor;
use common::{gnomonic_pixel, reference_ssim, rng, spearman, uniform};

fn panorama(seed: u64, h: usize) -> Tensor<f64> {
    synth_panorama(seed, h).unwrap().cast()
}

/// Snaps values to the 8-bit grid below 255 so that adding one level stays in range.
fn quantized_below_top(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| (((v + 1.0) * 127.5).round().min(254.0)) / 127.5 - 1.0)
}

fn spec(yaw: f64, pitch: f64, fov: f64, w: usize, h: usize) -> ViewportSpec {
    ViewportSpec { yaw, pitch, fov, out_width: w, out_height: h }
}

#[test]
fn one_level_offset_gives_48_13_db() {
    let x = quantized_below_top(&panorama(3, 64));
    let y = x.map(|v| v + 1.0 / 127.5);
    let set = ViewportSet::default_for(128);
    let db = vpsnr(&x, &y, &set).unwrap();
    assert!((db - 48.13).abs() <= 0.01, "{db}");
    assert!((db - 20.0 * 255f64.log10()).abs() < 1e-6);
    assert_eq!(vpsnr(&x, &x, &set).unwrap(), 100.0);
    assert_eq!(psnr_from_mse(0.0), 100.0);
}

#[test]
fn identity_cases() {
    let x = panorama(4, 64);
    let set = ViewportSet::default_for(128);
    assert_eq!(vssim(&x, &x, &set).unwrap(), 1.0);
    assert_eq!(perceptual_loss(&x, &x, &PerceptualExtractor::seeded()).unwrap(), 0.0);
}

#[test]
fn ssim_matches_reference_and_inversion_scores_low() {
    let (w, h) = (40, 30);
    let mut r = rng(5);
    let a: Vec<f64> = (0..w * h).map(|i| 120.0 + 80.0 * ((i % w) as f64 * 0.3).sin() + uniform(&mut r, 1, -20.0, 20.0)[0]).collect();
    let b: Vec<f64> = a.iter().map(|v| v + uniform(&mut r, 1, -30.0, 30.0)[0]).collect();
    let got = ssim_plane(&a, &b, w, h).unwrap();
    assert!((got - reference_ssim(&a, &b, w, h)).abs() < 1e-9);
    assert!((got - ssim_plane(&b, &a, w, h).unwrap()).abs() < 1e-12);
    let inverted: Vec<f64> = a.iter().map(|v| 255.0 - v).collect();
    assert!(reference_ssim(&a, &inverted, w, h) < 0.5);
    assert!(ssim_plane(&a, &inverted, w, h).unwrap() < 0.5);
    assert!(ssim_plane(&a[..100], &a[..100], 10, 10).is_err());

    let x = panorama(6, 64);
    let set = ViewportSet::default_for(128);
    assert!(vssim(&x, &x.map(|v| -v), &set).unwrap() < 0.5);
}

#[test]
fn viewport_round_trip_is_exact() {
    for &(yaw, pitch, fov) in &[(0.0, 0.0, FRAC_PI_2), (2.5, 0.7, 1.2), (-3.0, -1.2, 2.0), (1.0, FRAC_PI_2, 1.0)] {
        let s = spec(yaw, pitch, fov, 97, 61);
        let mut worst: f64 = 0.0;
        for py in 0..61 {
            for px in 0..97 {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let (lon, lat) = s.pixel_to_sphere(x, y);
                let (bx, by) = s.sphere_to_pixel(lon, lat).unwrap();
                worst = worst.max((bx - x).abs()).max((by - y).abs());
            }
        }
        assert!(worst < 1e-4, "yaw {yaw} pitch {pitch}: {worst}");
    }
}

#[test]
fn projection_agrees_with_textbook_gnomonic() {
    let s = spec(0.8, 0.4, 1.4, 120, 90);
    for &(lon, lat) in &[(0.8, 0.4), (1.1, 0.2), (0.5, 0.7), (0.9, 0.0)] {
        let got = s.sphere_to_pixel(lon, lat).unwrap();
        let want = gnomonic_pixel(0.8, 0.4, 1.4, 120, 90, lon, lat);
        assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9, "{got:?} vs {want:?}");
    }
    assert!(s.sphere_to_pixel(0.8 + PI, -0.4).is_none());
}

#[test]
fn center_pixel_samples_the_panorama_center() {
    let (h, w) = (32, 64);
    let x = Tensor::from_fn(&[1, h, w], |i| i as f64 / (h * w) as f64);
    let v = extract_viewport(&x, &spec(0.0, 0.0, FRAC_PI_2, 33, 33)).unwrap();
    let center = v.data()[16 * 33 + 16];
    // continuous (W/2, H/2) is the corner shared by the four middle pixels
    let expected = (x.data()[15 * w + 31] + x.data()[15 * w + 32] + x.data()[16 * w + 31] + x.data()[16 * w + 32]) / 4.0;
    assert!((center - expected).abs() < 1e-12);
    let constant = Tensor::full(&[3, h, w], 0.25);
    let v = extract_viewport(&constant, &spec(1.0, -0.5, 1.0, 20, 10)).unwrap();
    assert!(v.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
    assert!(extract_viewport(&constant, &spec(0.0, 0.0, PI, 20, 10)).is_err());
}

fn argmax(v: &Tensor<f64>, w: usize) -> (f64, f64) {
    let (i, _) = v.data().iter().enumerate().fold((0, f64::MIN), |b, (i, &p)| if p > b.1 { (i, p) } else { b });
    ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5)
}

#[test]
fn one_hot_pixel_is_localized() {
    let (h, w) = (128, 256);
    let (ow, oh) = (96, 96);
    for &(row, col, yaw, pitch) in &[(64, 200, 0.0, 0.0), (64, 40, 0.0, 0.0), (50, 10, -2.9, 0.3), (70, 150, 0.0, -0.2)] {
        let mut x = Tensor::full(&[1, h, w], -1.0);
        x.data_mut()[row * w + col] = 1.0;
        let (lon, lat) = equirect_to_sphere(col as f64 + 0.5, row as f64 + 0.5, w, h);
        let yaw = if yaw == 0.0 { lon } else { yaw };
        let s = spec(yaw, pitch, FRAC_PI_2, ow, oh);
        let v = extract_viewport(&x, &s).unwrap();
        let got = argmax(&v, ow);
        let want = gnomonic_pixel(yaw, pitch, FRAC_PI_2, ow, oh, lon, lat);
        assert!((got.0 - want.0).abs() <= 1.0 && (got.1 - want.1).abs() <= 1.0, "{got:?} vs {want:?}");
        if pitch == 0.0 && yaw == lon {
            assert!((want.0 - ow as f64 / 2.0).abs() < 1e-9);
        }
    }
}

#[test]
fn vpsnr_falls_with_noise() {
    let x = panorama(7, 64);
    let set = ViewportSet::default_for(128);
    let mut last = f64::INFINITY;
    for amp in [0.02, 0.08, 0.3] {
        let noise = uniform(&mut rng(8), x.len(), -amp, amp);
        let y = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&noise).map(|(a, n)| a + n).collect()).unwrap();
        let db = vpsnr(&x, &y, &set).unwrap();
        assert!(db < last, "{db} at amplitude {amp}");
        last = db;
    }
}

#[test]
fn set_metrics_are_means_of_single_views() {
    let x = panorama(9, 64);
    let y = panorama(10, 64).map(|v| 0.3 * v).zip_map(&x, "mix", |a, b| a + 0.7 * b).unwrap();
    let set = ViewportSet::default_for(128);
    let singles = |f: &dyn Fn(&ViewportSet) -> f64| set.0.iter().map(|s| f(&ViewportSet(vec![*s]))).sum::<f64>() / set.0.len() as f64;
    let p = vpsnr(&x, &y, &set).unwrap();
    assert!((p - singles(&|s| vpsnr(&x, &y, s).unwrap())).abs() < 1e-9);
    let s = vssim(&x, &y, &set).unwrap();
    assert!((s - singles(&|v| vssim(&x, &y, v).unwrap())).abs() < 1e-12);
    let mut reversed = set.clone();
    reversed.0.reverse();
    assert!((vpsnr(&x, &y, &reversed).unwrap() - p).abs() < 1e-9);
    assert!((vssim(&y, &x, &set).unwrap() - s).abs() < 1e-12);
    assert!(vpsnr(&x, &y, &ViewportSet(vec![])).is_err());
}

#[test]
fn perceptual_loss_tracks_mse() {
    let e = PerceptualExtractor::seeded();
    let mut perceptual = Vec::new();
    let mut mse = Vec::new();
    for i in 0..50u64 {
        let x = panorama(100 + i, 32);
        let amp = 0.01 + 0.5 * (i as f64 / 49.0);
        let noise = uniform(&mut rng(i), x.len(), -amp, amp);
        let y = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&noise).map(|(a, n)| a + n).collect()).unwrap();
        let p = perceptual_loss(&x, &y, &e).unwrap();
        assert!(p >= 0.0);
        assert!((p - perceptual_loss(&y, &x, &e).unwrap()).abs() <= 1e-12 * p.max(1.0));
        perceptual.push(p);
        mse.push(x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64);
    }
    let rho = spearman(&perceptual, &mse);
    assert!(rho > 0.5, "spearman {rho}");
}

#[test]
fn extractor_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let e = PerceptualExtractor::seeded();
    e.save(dir.path()).unwrap();
    let loaded = PerceptualExtractor::load(dir.path()).unwrap();
    let x = panorama(11, 32);
    assert_eq!(e.features(&x).unwrap(), loaded.features(&x).unwrap());
}

#[test]
fn report_columns() {
    let row = MetricRow { image_id: "a".into(), bpp: 0.5, vpsnr_db: 30.0, vssim: 0.9, perceptual: 0.1, raw_fraction: 0.25, t: 0.3, snr_db: None };
    let mut out = Vec::new();
    write_rows(&mut out, &[row]).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "image_id,bpp,vpsnr_db,vssim,perceptual,raw_fraction,T,snr_db");
    assert_eq!(text.lines().nth(1).unwrap(), "a,0.5,30.0,0.9,0.1,0.25,0.3,");
}
