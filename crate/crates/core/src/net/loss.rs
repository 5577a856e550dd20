//! Multi-task losses. Each term is averaged over its own support, weighted,
//! and summed over samples; dense terms apply to simulated samples only.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor4};
use crate::error::{Error, Result};
use crate::mixer::{Domain, SampleBatch, TrainingSample};
use crate::raster::BACKGROUND_PART;
use crate::rig::KEYPOINT_COUNT;

pub const HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskWeights {
    pub heatmap: f64,
    pub offsets: f64,
    pub segment: f64,
    pub parts: f64,
    pub uv: f64,
    pub normal: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            heatmap: 4.0,
            offsets: 1.0,
            segment: 2.0,
            parts: 0.5,
            uv: 0.25,
            normal: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.heatmap, self.offsets, self.segment, self.parts, self.uv, self.normal];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("task weights must be finite and nonnegative".into()))
        }
    }
}

/// Network outputs at crop resolution. Heatmap, instance and part channels
/// are logits; uv is centered; normals are unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub heatmap: Tensor4<T>,
    pub offsets: Tensor4<T>,
    pub instance: Tensor4<T>,
    pub parts: Tensor4<T>,
    pub uv: Tensor4<T>,
    pub normal: Tensor4<T>,
}

impl<T: Real> Prediction<T> {
    pub fn zeros(n: usize, size: usize, parts: usize) -> Self {
        let z = |c| Tensor4::zeros(n, size, size, c);
        Prediction {
            heatmap: z(KEYPOINT_COUNT),
            offsets: z(2 * KEYPOINT_COUNT),
            instance: z(1),
            parts: z(parts),
            uv: z(2 * parts),
            normal: z(3),
        }
    }

    pub fn part_count(&self) -> usize {
        self.parts.c
    }

    pub fn heads(&self) -> [&Tensor4<T>; 6] {
        [&self.heatmap, &self.offsets, &self.instance, &self.parts, &self.uv, &self.normal]
    }

    pub fn heads_mut(&mut self) -> [&mut Tensor4<T>; 6] {
        [
            &mut self.heatmap,
            &mut self.offsets,
            &mut self.instance,
            &mut self.parts,
            &mut self.uv,
            &mut self.normal,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.parts.c;
        let want = [KEYPOINT_COUNT, 2 * KEYPOINT_COUNT, 1, k, 2 * k, 3];
        let first = self.heatmap.shape();
        for (t, c) in self.heads().iter().zip(want) {
            if t.c != c || t.n != first[0] || t.h != first[1] || t.w != first[2] {
                return Err(Error::ShapeMismatch(format!("prediction head {:?}, expected {c} channels", t.shape())));
            }
        }
        Ok(())
    }

    /// Heads of sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Self {
        let one = |t: &Tensor4<T>| {
            let per = t.h * t.w * t.c;
            Tensor4 {
                n: 1,
                h: t.h,
                w: t.w,
                c: t.c,
                data: t.data[n * per..(n + 1) * per].to_vec(),
            }
        };
        Prediction {
            heatmap: one(&self.heatmap),
            offsets: one(&self.offsets),
            instance: one(&self.instance),
            parts: one(&self.parts),
            uv: one(&self.uv),
            normal: one(&self.normal),
        }
    }
}

/// Weighted per-task loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub offsets: f64,
    pub segment: f64,
    pub parts: f64,
    pub uv: f64,
    pub normal: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.two_d() + self.dense()
    }

    pub fn two_d(&self) -> f64 {
        self.heatmap + self.offsets + self.segment
    }

    pub fn dense(&self) -> f64 {
        self.parts + self.uv + self.normal
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.heatmap += o.heatmap;
        self.offsets += o.offsets;
        self.segment += o.segment;
        self.parts += o.parts;
        self.uv += o.uv;
        self.normal += o.normal;
    }
}

/// Sigmoid cross entropy of a logit against a {0, 1} target and its
/// derivative.
#[inline]
pub fn sigmoid_ce(x: f64, t: f64) -> (f64, f64) {
    let l = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    (l, s - t)
}

/// Huber (smooth L1) penalty and derivative.
#[inline]
pub fn huber(d: f64) -> (f64, f64) {
    if d.abs() <= HUBER_DELTA {
        (0.5 * d * d, d)
    } else {
        (HUBER_DELTA * (d.abs() - 0.5 * HUBER_DELTA), HUBER_DELTA * d.signum())
    }
}

fn check_batch_index<T: Real>(pred: &Prediction<T>, n: usize, s: &TrainingSample) -> Result<()> {
    if n >= pred.heatmap.n || pred.heatmap.h != s.size || pred.heatmap.w != s.size {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} does not hold sample {n} of size {}",
            pred.heatmap.shape(),
            s.size
        )));
    }
    Ok(())
}

/// Keypoint heatmap, offset and instance terms of sample `n`; gradients
/// accumulate into `grad`.
pub fn loss_2d<T: Real>(
    pred: &Prediction<T>,
    grad: &mut Prediction<T>,
    n: usize,
    s: &TrainingSample,
    w: &TaskWeights,
) -> Result<LossBreakdown> {
    check_batch_index(pred, n, s)?;
    if !s.available.keypoints || !s.available.instance {
        return Err(Error::MissingLabels("2D labels"));
    }
    let p = s.pixels();
    let mut out = LossBreakdown::default();

    let base = n * p * KEYPOINT_COUNT;
    let scale = w.heatmap / (p * KEYPOINT_COUNT) as f64;
    let mut sum = 0.0;
    for i in 0..p * KEYPOINT_COUNT {
        let (l, d) = sigmoid_ce(pred.heatmap.data[base + i].to_f64(), s.heatmap[i] as f64);
        sum += l;
        grad.heatmap.data[base + i] += T::from_f64(scale * d);
    }
    out.heatmap = scale * sum;

    let support = s.heatmap.iter().filter(|&&v| v > 0.5).count() * 2;
    if support > 0 {
        let base = n * p * 2 * KEYPOINT_COUNT;
        let scale = w.offsets / support as f64;
        let mut sum = 0.0;
        for i in 0..p * KEYPOINT_COUNT {
            if s.heatmap[i] <= 0.5 {
                continue;
            }
            let (px, k) = (i / KEYPOINT_COUNT, i % KEYPOINT_COUNT);
            for a in 0..2 {
                let j = px * 2 * KEYPOINT_COUNT + 2 * k + a;
                let (l, d) = huber(pred.offsets.data[base + j].to_f64() - s.offsets[j] as f64);
                sum += l;
                grad.offsets.data[base + j] += T::from_f64(scale * d);
            }
        }
        out.offsets = scale * sum;
    }

    let base = n * p;
    let scale = w.segment / p as f64;
    let mut sum = 0.0;
    for i in 0..p {
        let (l, d) = sigmoid_ce(pred.instance.data[base + i].to_f64(), s.instance[i] as f64);
        sum += l;
        grad.instance.data[base + i] += T::from_f64(scale * d);
    }
    out.segment = scale * sum;
    Ok(out)
}

/// Part mask and uv terms of a simulated sample. The uv penalty uses the
/// two channels of the ground-truth part and only pixels inside a part.
pub fn loss_25d_uv<T: Real>(
    pred: &Prediction<T>,
    grad: &mut Prediction<T>,
    n: usize,
    s: &TrainingSample,
    w: &TaskWeights,
) -> Result<LossBreakdown> {
    check_batch_index(pred, n, s)?;
    let (Some(part), Some(uv)) = (&s.part, &s.uv) else {
        return Err(Error::MissingLabels("part and uv labels"));
    };
    let k = pred.part_count();
    let p = s.pixels();
    let mut out = LossBreakdown::default();

    let base = n * p * k;
    let scale = w.parts / (p * k) as f64;
    let mut sum = 0.0;
    for i in 0..p {
        for c in 0..k {
            let t = if part[i] as usize == c { 1.0 } else { 0.0 };
            let (l, d) = sigmoid_ce(pred.parts.data[base + i * k + c].to_f64(), t);
            sum += l;
            grad.parts.data[base + i * k + c] += T::from_f64(scale * d);
        }
    }
    out.parts = scale * sum;

    let support = part.iter().filter(|&&q| q != BACKGROUND_PART).count() * 2;
    if support > 0 {
        let base = n * p * 2 * k;
        let scale = w.uv / support as f64;
        let mut sum = 0.0;
        for i in 0..p {
            let q = part[i];
            if q == BACKGROUND_PART {
                continue;
            }
            let q = q as usize;
            if q >= k {
                return Err(Error::ShapeMismatch(format!("part label {q} with {k} part channels")));
            }
            for a in 0..2 {
                let j = base + i * 2 * k + 2 * q + a;
                let (l, d) = huber(pred.uv.data[j].to_f64() - uv[i][a] as f64);
                sum += l;
                grad.uv.data[j] += T::from_f64(scale * d);
            }
        }
        out.uv = scale * sum;
    }
    Ok(out)
}

/// Surface normal term of a simulated sample over its instance region.
pub fn loss_3d_normal<T: Real>(
    pred: &Prediction<T>,
    grad: &mut Prediction<T>,
    n: usize,
    s: &TrainingSample,
    w: &TaskWeights,
) -> Result<LossBreakdown> {
    check_batch_index(pred, n, s)?;
    let Some(normal) = &s.normal else {
        return Err(Error::MissingLabels("normal labels"));
    };
    let p = s.pixels();
    let region = |i: usize| s.instance[i] > 0.5 && normal[i] != [0.0; 3];
    let support = (0..p).filter(|&i| region(i)).count() * 3;
    let mut out = LossBreakdown::default();
    if support == 0 {
        return Ok(out);
    }
    let base = n * p * 3;
    let scale = w.normal / support as f64;
    let mut sum = 0.0;
    for i in (0..p).filter(|&i| region(i)) {
        for a in 0..3 {
            let j = base + i * 3 + a;
            let (l, d) = huber(pred.normal.data[j].to_f64() - normal[i][a] as f64);
            sum += l;
            grad.normal.data[j] += T::from_f64(scale * d);
        }
    }
    out.normal = scale * sum;
    Ok(out)
}

/// 2D terms over every sample plus dense terms over simulated samples.
/// Returns the weighted breakdown and the gradient with respect to `pred`.
pub fn loss_total<T: Real>(batch: &SampleBatch, pred: &Prediction<T>, w: &TaskWeights) -> Result<(LossBreakdown, Prediction<T>)> {
    pred.validate()?;
    if pred.heatmap.n != batch.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} samples", pred.heatmap.n, batch.len())));
    }
    let mut grad = Prediction::zeros(pred.heatmap.n, pred.heatmap.h, pred.part_count());
    let mut total = LossBreakdown::default();
    for (n, s) in batch.samples.iter().enumerate() {
        total.add(&loss_2d(pred, &mut grad, n, s, w)?);
        if s.domain == Domain::Sim {
            total.add(&loss_25d_uv(pred, &mut grad, n, s, w)?);
            total.add(&loss_3d_normal(pred, &mut grad, n, s, w)?);
        }
    }
    if !total.total().is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((total, grad))
}
