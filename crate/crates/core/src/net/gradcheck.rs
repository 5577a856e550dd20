//! Central finite-difference gradient checks run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bmn::{BatchMixtureNorm, Block, NormMode};
use super::layers::{
    bilinear_resize, bilinear_resize_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    sigmoid_backward, sigmoid_tensor, BatchNorm, Conv2d,
};
use super::loss::{loss_25d_uv, loss_2d, loss_3d_normal, loss_total, LossBreakdown, Prediction, TaskWeights, HUBER_DELTA};
use super::tensor::Tensor4;
use crate::error::Result;
use crate::mixer::{keypoint_targets, Availability, Domain, SampleBatch, TrainingSample};
use crate::raster::{Keypoint2, Visibility, BACKGROUND_PART};
use crate::rig::KEYPOINT_COUNT;

pub const FD_EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error, so that gradients near zero
/// are compared with absolute tolerance `REL_TOL * DENOM_FLOOR`.
pub const DENOM_FLOOR: f64 = 1e-2;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Result of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOL && self.checked > 0
    }
}

/// Objective value plus the activation pattern of any kinked units.
pub type Eval = (f64, Vec<bool>);

/// Compares analytic gradients of several input arrays against central
/// differences of `f`. A coordinate is skipped when either perturbation
/// changes the kink pattern reported by `f`.
pub fn check_arrays(
    op: &str,
    inputs: &[Vec<f64>],
    analytic: &[Vec<f64>],
    f: impl Fn(&[Vec<f64>]) -> Result<Eval>,
) -> Result<GradReport> {
    assert_eq!(inputs.len(), analytic.len());
    let (_, sig0) = f(inputs)?;
    let mut rep = GradReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for (a, g) in analytic.iter().enumerate() {
        assert_eq!(g.len(), inputs[a].len(), "{op}: gradient length of input {a}");
        for i in 0..inputs[a].len() {
            let x0 = inputs[a][i];
            work[a][i] = x0 + FD_EPS;
            let (fp, sp) = f(&work)?;
            work[a][i] = x0 - FD_EPS;
            let (fm, sm) = f(&work)?;
            work[a][i] = x0;
            if sp != sig0 || sm != sig0 {
                rep.skipped += 1;
                continue;
            }
            let num = (fp - fm) / (2.0 * FD_EPS);
            rep.max_rel_error = rep.max_rel_error.max(rel_error(g[i], num));
            rep.checked += 1;
        }
    }
    Ok(rep)
}

pub fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor(n: usize, h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4 {
        n,
        h,
        w,
        c,
        data: random_vec(n * h * w * c, rng),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn positive(t: &Tensor4<f64>) -> Vec<bool> {
    t.data.iter().map(|&v| v > 0.0).collect()
}

fn with_data(shape: [usize; 4], data: &[f64]) -> Tensor4<f64> {
    Tensor4 {
        n: shape[0],
        h: shape[1],
        w: shape[2],
        c: shape[3],
        data: data.to_vec(),
    }
}

fn check_conv(k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (cin, cout) = (3, 4);
    let x = random_tensor(2, 5, 5, cin, rng);
    let w = random_vec(k * k * cin * cout, rng);
    let b = random_vec(cout, rng);
    let mut conv = Conv2d::from_weights(k, cin, cout, stride, w.clone(), Some(b.clone()));
    let y = conv.forward(&x)?;
    let c = random_vec(y.data.len(), rng);
    let dx = conv.backward(&with_data(y.shape(), &c))?;
    let gw = conv.weight.grad.clone();
    let gb = conv.bias.as_ref().unwrap().grad.clone();
    check_arrays(
        &format!("conv{k}x{k}_s{stride}"),
        &[x.data.clone(), w, b],
        &[dx.data, gw, gb],
        |a| {
            let mut conv = Conv2d::from_weights(k, cin, cout, stride, a[1].clone(), Some(a[2].clone()));
            let y = conv.forward(&with_data(x.shape(), &a[0]))?;
            Ok((dot(&c, &y.data), Vec::new()))
        },
    )
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = random_tensor(2, 5, 5, 3, rng);
    let gamma = random_vec(3, rng);
    let beta = random_vec(3, rng);
    let build = |g: &[f64], b: &[f64]| {
        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma.value = g.to_vec();
        bn.beta.value = b.to_vec();
        bn
    };
    let mut bn = build(&gamma, &beta);
    let y = bn.forward(&x, true)?;
    let c = random_vec(y.data.len(), rng);
    let dx = bn.backward(&with_data(y.shape(), &c))?;
    check_arrays(
        "batchnorm",
        &[x.data.clone(), gamma.clone(), beta.clone()],
        &[dx.data, bn.gamma.grad.clone(), bn.beta.grad.clone()],
        |a| {
            let mut bn = build(&a[1], &a[2]);
            let y = bn.forward(&with_data(x.shape(), &a[0]), true)?;
            Ok((dot(&c, &y.data), Vec::new()))
        },
    )
}

fn check_pointwise(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let x = random_tensor(2, 5, 5, 3, rng);
    let c = random_vec(x.data.len(), rng);
    let dy = with_data(x.shape(), &c);
    let y = relu(&x);
    let r = check_arrays("relu", &[x.data.clone()], &[relu_backward(&y, &dy).data], |a| {
        let y = relu(&with_data(x.shape(), &a[0]));
        Ok((dot(&c, &y.data), positive(&with_data(x.shape(), &a[0]))))
    })?;
    let y = sigmoid_tensor(&x);
    let s = check_arrays("sigmoid", &[x.data.clone()], &[sigmoid_backward(&y, &dy).data], |a| {
        Ok((dot(&c, &sigmoid_tensor(&with_data(x.shape(), &a[0])).data), Vec::new()))
    })?;
    let p = global_avg_pool(&x);
    let cp = random_vec(p.data.len(), rng);
    let g = global_avg_pool_backward(&with_data(p.shape(), &cp), x.h, x.w);
    let gp = check_arrays("global_avg_pool", &[x.data.clone()], &[g.data], |a| {
        Ok((dot(&cp, &global_avg_pool(&with_data(x.shape(), &a[0])).data), Vec::new()))
    })?;
    Ok(vec![r, s, gp])
}

fn check_resize(oh: usize, ow: usize, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = random_tensor(2, 5, 5, 3, rng);
    let y = bilinear_resize(&x, oh, ow);
    let c = random_vec(y.data.len(), rng);
    let dx = bilinear_resize_backward(&with_data(y.shape(), &c), x.h, x.w);
    check_arrays(&format!("bilinear_resize_{oh}x{ow}"), &[x.data.clone()], &[dx.data], |a| {
        Ok((dot(&c, &bilinear_resize(&with_data(x.shape(), &a[0]), oh, ow).data), Vec::new()))
    })
}

fn check_bmn(hard: bool, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let s = random_tensor(2, 5, 5, 3, rng);
    let r = random_tensor(2, 5, 5, 3, rng);
    let z: Vec<f64> = if hard { vec![1.0, 0.0] } else { vec![rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)] };
    let gamma = random_vec(6, rng);
    let beta = random_vec(6, rng);
    let build = |g: &[f64], b: &[f64]| {
        let mut m = BatchMixtureNorm::<f64>::new(3);
        m.bn.gamma.value = g.to_vec();
        m.bn.beta.value = b.to_vec();
        m
    };
    let mut m = build(&gamma, &beta);
    let y = m.forward(&s, &r, &z, true)?;
    let c = random_vec(y.data.len(), rng);
    let (ds, dr, dz) = m.backward(&with_data(y.shape(), &c))?;
    let mut inputs = vec![s.data.clone(), r.data.clone(), gamma.clone(), beta.clone()];
    let mut grads = vec![ds.data, dr.data, m.bn.gamma.grad.clone(), m.bn.beta.grad.clone()];
    if !hard {
        inputs.push(z.clone());
        grads.push(dz);
    }
    let name = if hard { "bmn_hard" } else { "bmn_soft" };
    check_arrays(name, &inputs, &grads, |a| {
        let mut m = build(&a[2], &a[3]);
        let zz = if hard { z.clone() } else { a[4].clone() };
        let y = m.forward(&with_data(s.shape(), &a[0]), &with_data(r.shape(), &a[1]), &zz, true)?;
        Ok((dot(&c, &y.data), Vec::new()))
    })
}

fn check_block(mode: NormMode, stride: usize, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = random_tensor(2, 5, 5, 3, rng);
    let template = Block::<f64>::new(3, 4, stride, mode, rng);
    let z = vec![1.0, 0.0];
    let mut b = template.clone();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (name, p) in b.params_mut() {
        // Random affine parameters so the check does not sit at gamma = 1.
        if name.starts_with("bn.") || name.ends_with("bias") {
            p.value = random_vec(p.value.len(), rng);
        }
        values.push(p.value.clone());
    }
    let template = b.clone();
    let y = b.forward(&x, &z, true)?;
    let c = random_vec(y.data.len(), rng);
    let dx = b.backward(&with_data(y.shape(), &c))?;
    let mut inputs = vec![x.data.clone()];
    let mut grads = vec![dx.data];
    for (_, p) in b.params_mut() {
        inputs.push(p.value.clone());
        grads.push(p.grad.clone());
    }
    let name = match mode {
        NormMode::BatchNorm => "block_bn",
        NormMode::BmnHard => "block_bmn_hard",
        NormMode::BmnLearned => "block_bmn_learned",
    };
    check_arrays(&format!("{name}_s{stride}"), &inputs, &grads, |a| {
        let mut blk = template.clone();
        for ((_, p), v) in blk.params_mut().into_iter().zip(&a[1..]) {
            p.value = v.clone();
        }
        let y = blk.forward(&with_data(x.shape(), &a[0]), &z, true)?;
        Ok((dot(&c, &y.data), positive(&y)))
    })
}

/// Every layer-level check for one seed.
pub fn check_layers(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        check_conv(3, 1, &mut rng)?,
        check_conv(3, 2, &mut rng)?,
        check_conv(1, 1, &mut rng)?,
        check_batchnorm(&mut rng)?,
    ];
    out.extend(check_pointwise(&mut rng)?);
    out.push(check_resize(9, 7, &mut rng)?);
    out.push(check_resize(3, 4, &mut rng)?);
    out.push(check_bmn(true, &mut rng)?);
    out.push(check_bmn(false, &mut rng)?);
    out.push(check_block(NormMode::BatchNorm, 1, &mut rng)?);
    out.push(check_block(NormMode::BmnHard, 2, &mut rng)?);
    out.push(check_block(NormMode::BmnLearned, 1, &mut rng)?);
    Ok(out)
}

/// Random sample with a blob-shaped person and random dense labels.
pub fn random_sample(size: usize, domain: Domain, parts: usize, rng: &mut impl Rng) -> TrainingSample {
    let p = size * size;
    let mut kps = [Keypoint2 {
        x: 0.0,
        y: 0.0,
        visibility: Visibility::OffImage,
    }; KEYPOINT_COUNT];
    for kp in kps.iter_mut().take(6) {
        *kp = Keypoint2 {
            x: rng.gen_range(0.0..size as f64 - 1.0),
            y: rng.gen_range(0.0..size as f64 - 1.0),
            visibility: Visibility::Visible,
        };
    }
    let (heatmap, offsets) = keypoint_targets(&kps, size, 2.0);
    let c = size as f64 / 2.0;
    let instance: Vec<f32> = (0..p)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            if (x - c).powi(2) + (y - c).powi(2) < (size as f64 / 2.5).powi(2) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let dense = domain == Domain::Sim;
    let part: Vec<u8> = instance.iter().map(|&m| if m > 0.5 { rng.gen_range(0..parts as u8) } else { BACKGROUND_PART }).collect();
    let uv: Vec<[f32; 2]> = part
        .iter()
        .map(|&q| if q == BACKGROUND_PART { [0.0; 2] } else { [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)] })
        .collect();
    let normal: Vec<[f32; 3]> = part
        .iter()
        .map(|&q| {
            if q == BACKGROUND_PART {
                return [0.0; 3];
            }
            let v = [rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0), rng.gen_range(0.2f32..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / l, v[1] / l, v[2] / l]
        })
        .collect();
    TrainingSample {
        size,
        image: (0..3 * p).map(|_| rng.gen()).collect(),
        domain,
        keypoints: kps,
        heatmap,
        offsets,
        area: instance.iter().sum::<f32>() as f64,
        instance,
        part: dense.then_some(part),
        uv: dense.then_some(uv),
        normal: dense.then_some(normal),
        available: Availability::for_domain(domain),
    }
}

fn flatten(p: &Prediction<f64>) -> Vec<Vec<f64>> {
    p.heads().iter().map(|t| t.data.clone()).collect()
}

fn unflatten(template: &Prediction<f64>, a: &[Vec<f64>]) -> Prediction<f64> {
    let mut p = template.clone();
    for (t, v) in p.heads_mut().into_iter().zip(a) {
        t.data.clone_from(v);
    }
    p
}

/// Which side of the Huber knee each regressed entry sits on.
fn huber_pattern(batch: &SampleBatch, p: &Prediction<f64>) -> Vec<bool> {
    let mut sig = Vec::new();
    let k = p.part_count();
    for (n, s) in batch.samples.iter().enumerate() {
        let px = s.pixels();
        for i in 0..px * 2 * KEYPOINT_COUNT {
            let d = p.offsets.data[n * px * 2 * KEYPOINT_COUNT + i] - s.offsets[i] as f64;
            sig.push(d.abs() > HUBER_DELTA);
        }
        if let (Some(part), Some(uv), Some(nm)) = (&s.part, &s.uv, &s.normal) {
            for i in 0..px {
                if part[i] != BACKGROUND_PART && (part[i] as usize) < k {
                    for a in 0..2 {
                        let d = p.uv.data[(n * px + i) * 2 * k + 2 * part[i] as usize + a] - uv[i][a] as f64;
                        sig.push(d.abs() > HUBER_DELTA);
                    }
                }
                for a in 0..3 {
                    let d = p.normal.data[(n * px + i) * 3 + a] - nm[i][a] as f64;
                    sig.push(d.abs() > HUBER_DELTA);
                }
            }
        }
    }
    sig
}

type SampleLoss = fn(&Prediction<f64>, &mut Prediction<f64>, usize, &TrainingSample, &TaskWeights) -> Result<LossBreakdown>;

fn check_sample_loss(name: &str, f: SampleLoss, batch: &SampleBatch, pred: &Prediction<f64>, w: &TaskWeights) -> Result<GradReport> {
    let run = |p: &Prediction<f64>| -> Result<(f64, Prediction<f64>)> {
        let mut g = Prediction::zeros(p.heatmap.n, p.heatmap.h, p.part_count());
        let mut total = 0.0;
        for (n, s) in batch.samples.iter().enumerate() {
            total += f(p, &mut g, n, s, w)?.total();
        }
        Ok((total, g))
    };
    let (_, g) = run(pred)?;
    check_arrays(name, &flatten(pred), &flatten(&g), |a| {
        let p = unflatten(pred, a);
        Ok((run(&p)?.0, huber_pattern(batch, &p)))
    })
}

/// Checks of each loss term and of the batch objective on a random mixed
/// batch.
pub fn check_losses(seed: u64, parts: usize) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 6;
    let batch = SampleBatch {
        samples: vec![
            random_sample(size, Domain::Sim, parts, &mut rng),
            random_sample(size, Domain::Real, parts, &mut rng),
            random_sample(size, Domain::Sim, parts, &mut rng),
        ],
    };
    let mut pred = Prediction::zeros(3, size, parts);
    for t in pred.heads_mut() {
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
    }
    let w = TaskWeights {
        heatmap: rng.gen_range(0.5..4.0),
        offsets: rng.gen_range(0.5..4.0),
        segment: rng.gen_range(0.5..4.0),
        parts: rng.gen_range(0.5..4.0),
        uv: rng.gen_range(0.5..4.0),
        normal: rng.gen_range(0.5..4.0),
    };
    let sim = SampleBatch {
        samples: batch.samples.iter().filter(|s| s.domain == Domain::Sim).cloned().collect(),
    };
    let mut sim_pred = Prediction::zeros(sim.len(), size, parts);
    for (d, s) in sim_pred.heads_mut().into_iter().zip(pred.heads()) {
        let per = s.h * s.w * s.c;
        d.data = [&s.data[..per], &s.data[2 * per..]].concat();
    }
    let (_, g) = loss_total(&batch, &pred, &w)?;
    Ok(vec![
        check_sample_loss("loss_2d", loss_2d, &batch, &pred, &w)?,
        check_sample_loss("loss_25d_uv", loss_25d_uv, &sim, &sim_pred, &w)?,
        check_sample_loss("loss_3d_normal", loss_3d_normal, &sim, &sim_pred, &w)?,
        check_arrays("loss_total", &flatten(&pred), &flatten(&g), |a| {
            let p = unflatten(&pred, a);
            Ok((loss_total(&batch, &p, &w)?.0.total(), huber_pattern(&batch, &p)))
        })?,
    ])
}
