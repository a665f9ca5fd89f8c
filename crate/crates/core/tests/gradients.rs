mod common;

use amvq::nn::{Ctx, Kind, Module, ResidualBlock};
use amvq::tensor::{Conv2dSpec, Graph, Tensor, Var};
use amvq::train::{gan_loss, rec_loss, total_objective, Discriminator};
use amvq::vq::vq_loss_graph;
use amvq::Result;
use common::{grad_error, rng, uniform};

const TOL: f64 = 1e-3;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(&mut rng(seed), n, -1.0, 1.0)).unwrap()
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

/// Reduces `y` to a scalar with fixed random weights so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, build: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>) {
    let err = grad_error(build, x);
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_primitives() {
    let x = away_from_zero(&[3, 4], 1);
    let other = random(&[3, 4], 2);
    let o = other.clone();
    check("add", &|g, v| { let c = g.constant(o.clone()); let y = g.add(v, c)?; weighted_sum(g, y, 9) }, &x);
    check("add self", &|g, v| { let y = g.add(v, v)?; weighted_sum(g, y, 9) }, &x);
    check("sub", &|g, v| { let c = g.constant(o.clone()); let y = g.sub(c, v)?; weighted_sum(g, y, 9) }, &x);
    check("mul", &|g, v| { let c = g.constant(o.clone()); let y = g.mul(v, c)?; weighted_sum(g, y, 9) }, &x);
    check("mul self", &|g, v| { let y = g.mul(v, v)?; weighted_sum(g, y, 9) }, &x);
    check("scale", &|g, v| { let y = g.scale(v, -1.7); weighted_sum(g, y, 9) }, &x);
    check("add_scalar", &|g, v| { let y = g.add_scalar(v, 0.3); let y = g.mul(y, y)?; Ok(g.sum(y)) }, &x);
    check("relu", &|g, v| { let y = g.relu(v); weighted_sum(g, y, 9) }, &x);
    check("leaky_relu", &|g, v| { let y = g.leaky_relu(v, 0.2); weighted_sum(g, y, 9) }, &x);
    check("tanh", &|g, v| { let y = g.tanh(v); weighted_sum(g, y, 9) }, &x);
    check("sigmoid", &|g, v| { let y = g.sigmoid(v); weighted_sum(g, y, 9) }, &x);
    let positive = x.map(|v| v.abs() + 0.2);
    check("log", &|g, v| { let y = g.log(v); weighted_sum(g, y, 9) }, &positive);
}

#[test]
fn reductions_and_losses() {
    let x = random(&[2, 5], 3);
    check("mean", &|g, v| { let y = g.mul(v, v)?; Ok(g.mean(y)) }, &x);
    check("sum", &|g, v| { let y = g.tanh(v); Ok(g.sum(y)) }, &x);
    check("squared_l2", &|g, v| Ok(g.squared_l2(v)), &x);
    let logits = random(&[1, 1, 3, 4], 4).map(|v| 3.0 * v);
    check("bce real", &|g, v| Ok(g.bce_with_logits(v, 1.0)), &logits);
    check("bce fake", &|g, v| Ok(g.bce_with_logits(v, 0.0)), &logits);
}

#[test]
fn shape_primitives() {
    let x = random(&[3, 4], 5);
    check("matmul left", &|g, v| { let b = g.constant(random(&[4, 2], 6)); let y = g.matmul(v, b)?; weighted_sum(g, y, 9) }, &x);
    check("matmul right", &|g, v| { let a = g.constant(random(&[5, 3], 6)); let y = g.matmul(a, v)?; weighted_sum(g, y, 9) }, &x);
    check("reshape", &|g, v| { let y = g.reshape(v, &[2, 6])?; weighted_sum(g, y, 9) }, &x);
    check("transpose", &|g, v| { let y = g.transpose(v)?; weighted_sum(g, y, 9) }, &x);
    check("gather_rows", &|g, v| { let y = g.gather_rows(v, &[2, 0, 2, 1, 2])?; weighted_sum(g, y, 9) }, &x);
    let img = random(&[1, 2, 3, 4], 7);
    check("upsample2x", &|g, v| { let y = g.upsample2x(v)?; weighted_sum(g, y, 9) }, &img);
}

#[test]
fn convolution() {
    let x = random(&[2, 3, 7, 6], 10);
    let w = random(&[4, 3, 3, 3], 11);
    let b = random(&[4], 12);
    for spec in [Conv2dSpec::new(1, 1), Conv2dSpec::new(2, 1), Conv2dSpec::new(2, 0), Conv2dSpec::new(1, 0)] {
        let (wc, bc) = (w.clone(), b.clone());
        check("conv2d input", &|g, v| {
            let (wv, bv) = (g.constant(wc.clone()), g.constant(bc.clone()));
            let y = g.conv2d(v, wv, Some(bv), spec)?;
            weighted_sum(g, y, 9)
        }, &x);
        let (xc, bc) = (x.clone(), b.clone());
        check("conv2d weight", &|g, v| {
            let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
            let y = g.conv2d(xv, v, Some(bv), spec)?;
            weighted_sum(g, y, 9)
        }, &w);
        let (xc, wc) = (x.clone(), w.clone());
        check("conv2d bias", &|g, v| {
            let (xv, wv) = (g.constant(xc.clone()), g.constant(wc.clone()));
            let y = g.conv2d(xv, wv, Some(v), spec)?;
            weighted_sum(g, y, 9)
        }, &b);
    }
    let k4 = random(&[2, 3, 4, 4], 13);
    check("conv2d k4 s2", &|g, v| {
        let wv = g.constant(k4.clone());
        let y = g.conv2d(v, wv, None, Conv2dSpec::new(2, 1))?;
        weighted_sum(g, y, 9)
    }, &random(&[1, 3, 8, 8], 14));
}

#[test]
fn batch_norm() {
    let x = random(&[2, 3, 2, 3], 20);
    let gamma = random(&[3], 21).map(|v| v + 1.5);
    let beta = random(&[3], 22);
    let (gc, bc) = (gamma.clone(), beta.clone());
    check("batch_norm train input", &|g, v| {
        let (gv, bv) = (g.constant(gc.clone()), g.constant(bc.clone()));
        let (y, _) = g.batch_norm_train(v, gv, bv, 1e-5)?;
        weighted_sum(g, y, 9)
    }, &x);
    let (xc, bc) = (x.clone(), beta.clone());
    check("batch_norm train gamma", &|g, v| {
        let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
        let (y, _) = g.batch_norm_train(xv, v, bv, 1e-5)?;
        weighted_sum(g, y, 9)
    }, &gamma);
    let (xc, gc) = (x.clone(), gamma.clone());
    check("batch_norm train beta", &|g, v| {
        let (xv, gv) = (g.constant(xc.clone()), g.constant(gc.clone()));
        let (y, _) = g.batch_norm_train(xv, gv, v, 1e-5)?;
        weighted_sum(g, y, 9)
    }, &beta);
    let (gc, bc) = (gamma.clone(), beta.clone());
    check("batch_norm eval input", &|g, v| {
        let (gv, bv) = (g.constant(gc.clone()), g.constant(bc.clone()));
        let y = g.batch_norm_eval(v, gv, bv, &[0.1, -0.2, 0.3], &[0.5, 1.2, 2.0], 1e-5)?;
        weighted_sum(g, y, 9)
    }, &x);
}

#[test]
fn stop_gradient_and_straight_through() {
    let x = random(&[2, 3], 30);
    check("stop_gradient", &|g, v| {
        let s = g.stop_gradient(v);
        let y = g.mul(v, s)?;
        weighted_sum(g, y, 9)
    }, &x);
    // the estimator is biased by design, so compare against its closed form:
    // d/dx Σ w·st(x², q)·x = w·q + 2x·w·x
    let q = random(&[2, 3], 31);
    let w = random(&[2, 3], 32);
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let (qv, wv) = (g.constant(q.clone()), g.constant(w.clone()));
    let sq = g.mul(v, v).unwrap();
    let st = g.straight_through(sq, qv).unwrap();
    assert_eq!(g.value(st).data(), q.data());
    let y = g.mul(st, v).unwrap();
    let y = g.mul(y, wv).unwrap();
    let loss = g.sum(y);
    let got = g.backward(loss).unwrap().get(v);
    for i in 0..x.len() {
        let (xi, qi, wi) = (x.data()[i], q.data()[i], w.data()[i]);
        assert!((got.data()[i] - (wi * qi + 2.0 * xi * wi * xi)).abs() < 1e-12);
    }
}

/// Finite differences over a few entries of each parameter of `module`.
fn check_params<M: Module<f64> + Clone>(name: &str, module: &M, loss: &dyn Fn(&M) -> (f64, Vec<(String, Tensor<f64>)>)) {
    let (_, analytic) = loss(module);
    let eps = 1e-5;
    let mut checked = 0;
    for (pname, grad) in analytic {
        for i in (0..grad.len()).step_by(grad.len().div_ceil(4)) {
            let perturbed = |delta: f64| {
                let mut m = module.clone();
                m.visit_mut(&mut |p, _| {
                    if p.name == pname {
                        p.value.data_mut()[i] += delta;
                    }
                });
                loss(&m).0
            };
            let numeric = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            assert!(err < TOL, "{name} {pname}[{i}]: analytic {} numeric {numeric}", grad.data()[i]);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

fn trainable_grads<M: Module<f64>>(module: &M, grads: &amvq::tensor::Gradients<f64>) -> Vec<(String, Tensor<f64>)> {
    let mut out = Vec::new();
    module.visit(&mut |p, kind| {
        if kind == Kind::Param {
            if let Some(t) = grads.param(&p.name) {
                out.push((p.name.clone(), t));
            }
        }
    });
    out
}

#[test]
fn residual_block() {
    let block = ResidualBlock::<f64>::new("res", 3, &mut rng(40));
    let x = random(&[1, 3, 4, 5], 41);
    let b = block.clone();
    check("residual input", &move |g, v| {
        let y = b.forward(g, v, &mut Ctx::train())?;
        weighted_sum(g, y, 9)
    }, &x);
    check_params("residual", &block, &|m| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = m.forward(&mut g, xv, &mut Ctx::train()).unwrap();
        let l = weighted_sum(&mut g, y, 9).unwrap();
        let value = g.value(l).item().unwrap();
        (value, trainable_grads(m, &g.backward(l).unwrap()))
    });
}

#[test]
fn vq_loss_terms() {
    let f = random(&[6, 4], 50);
    let z = random(&[6, 4], 51);
    for beta in [0.0, 0.25, 1.0] {
        let zc = z.clone();
        check("vq features", &|g, v| { let zv = g.constant(zc.clone()); Ok(vq_loss_graph(g, v, zv, beta)?.0) }, &f);
        let fc = f.clone();
        check("vq codewords", &|g, v| { let fv = g.constant(fc.clone()); Ok(vq_loss_graph(g, fv, v, beta)?.0) }, &z);
    }
}

#[test]
fn reconstruction_loss() {
    let x = random(&[1, 3, 4, 4], 60);
    let x_hat = random(&[1, 3, 4, 4], 61);
    let f = random(&[5, 3], 62);
    let z = random(&[5, 3], 63);
    let (f1, z1) = (f.clone(), z.clone());
    let xc = x.clone();
    check("rec x_hat", &|g, v| {
        let (xv, fv, zv) = (g.constant(xc.clone()), g.constant(f1.clone()), g.constant(z1.clone()));
        Ok(rec_loss(g, xv, v, fv, zv, 0.25)?.total)
    }, &x_hat);
    let (xc, xh, z2) = (x.clone(), x_hat.clone(), z.clone());
    check("rec features", &|g, v| {
        let (xv, hv, zv) = (g.constant(xc.clone()), g.constant(xh.clone()), g.constant(z2.clone()));
        Ok(rec_loss(g, xv, hv, v, zv, 0.25)?.total)
    }, &f);
    let (xc, xh) = (x.clone(), x_hat.clone());
    check("rec codewords", &|g, v| {
        let (xv, hv, fv) = (g.constant(xc.clone()), g.constant(xh.clone()), g.constant(f.clone()));
        Ok(rec_loss(g, xv, hv, fv, v, 0.25)?.total)
    }, &z);
}

#[test]
fn adversarial_losses() {
    let disc = Discriminator::<f64>::new(3, 4, &mut rng(70));
    let x = random(&[1, 3, 16, 16], 71);
    let x_hat = random(&[1, 3, 16, 16], 72);
    let d = &disc;
    let xc = x.clone();
    check("generator gan loss wrt x_hat", &|g, v| {
        let xv = g.constant(xc.clone());
        Ok(gan_loss(g, xv, v, d, &mut Ctx::train())?.1)
    }, &x_hat);
    let rec = random(&[1], 73).reshape(&[]).unwrap();
    let xc = x.clone();
    check("total objective", &|g, v| {
        let xv = g.constant(xc.clone());
        let (_, gen) = gan_loss(g, xv, v, d, &mut Ctx::train())?;
        let d2 = g.sub(v, xv)?;
        let r = g.squared_l2(d2);
        let r0 = g.constant(rec.clone());
        let r = g.add(r, r0)?;
        total_objective(g, r, gen, 0.8)
    }, &x_hat);
    // the discriminator loss sees x_hat only through a stop-gradient
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let hv = g.leaf(x_hat.clone(), true);
    let (disc_loss, _) = gan_loss(&mut g, xv, hv, &disc, &mut Ctx::train()).unwrap();
    assert!(g.backward(disc_loss).unwrap().get(hv).data().iter().all(|&v| v == 0.0));
    check_params("discriminator", &disc, &|m| {
        let mut g = Graph::new();
        let (xv, hv) = (g.constant(x.clone()), g.constant(x_hat.clone()));
        let (disc_loss, _) = gan_loss(&mut g, xv, hv, m, &mut Ctx::train()).unwrap();
        let value = g.value(disc_loss).item().unwrap();
        (value, trainable_grads(m, &g.backward(disc_loss).unwrap()))
    });
}

#[test]
fn reconstruction_loss_wrt_decoder_parameters() {
    use amvq::codec::{Codec, CodecConfig, FeatureGrid};
    let cfg = CodecConfig { base_channels: 4, num_scales: 2, feature_channels: 6, image_height: 8, image_width: 8, ..Default::default() };
    let codec = Codec::<f64>::new(cfg, 80).unwrap();
    let x = random(&[1, 3, 8, 8], 81);
    let f = random(&[1, 6, 2, 2], 82);
    let rows = FeatureGrid::from_nchw(&f).unwrap().to_rows();
    let z = random(&[4, 6], 83);
    check_params("decoder", &codec.decoder, &|dec| {
        let mut g = Graph::new();
        let (xv, fv) = (g.constant(x.clone()), g.constant(f.clone()));
        let (rv, zv) = (g.constant(rows.clone()), g.constant(z.clone()));
        let x_hat = dec.forward(&mut g, fv, &mut Ctx::train()).unwrap();
        let loss = rec_loss(&mut g, xv, x_hat, rv, zv, 0.25).unwrap().total;
        let value = g.value(loss).item().unwrap();
        (value, trainable_grads(dec, &g.backward(loss).unwrap()))
    });
}
