//! Training loop over mixed batches and crop-level evaluation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{add_normals, gps, iou, oks, uv_l2, DenseLabels, GeodesicTable, ImageMetrics, MetricParams, MetricReport, ScoredMatch};
use crate::mixer::{BatchStream, Domain, MixSpec, SampleBatch, TrainingSample};
use crate::net::decode::uv_at_parts;
use crate::net::{decode, loss_total, LossBreakdown, MicroNet, NormMode, Sgd, TaskWeights, Tensor4};
use crate::raster::{BACKGROUND_PART, BACKGROUND_UV};

/// Loss of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sim_count: usize,
    pub loss: LossBreakdown,
}

/// Stacks batch images into an NHWC tensor with per-sample domain scores.
pub fn batch_input(samples: &[TrainingSample]) -> Result<(Tensor4<f32>, Vec<f32>)> {
    let first = samples.first().ok_or(Error::EmptyPool("batch"))?;
    let s = first.size;
    let mut data = Vec::with_capacity(samples.len() * s * s * 3);
    for x in samples {
        if x.size != s {
            return Err(Error::ShapeMismatch("mixed crop sizes".into()));
        }
        data.extend_from_slice(&x.image);
    }
    let z = samples.iter().map(|x| if x.domain == Domain::Sim { 1.0 } else { 0.0 }).collect();
    Ok((Tensor4::from_vec(samples.len(), s, s, 3, data)?, z))
}

/// One forward/backward pass and SGD update.
pub fn train_step(net: &mut MicroNet<f32>, batch: &SampleBatch, weights: &TaskWeights) -> Result<LossBreakdown> {
    let (x, z) = batch_input(&batch.samples)?;
    let pred = net.forward(&x, &z, true)?;
    let (loss, grad) = loss_total(batch, &pred, weights)?;
    if !loss.total().is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    net.zero_grad();
    net.backward(&grad)?;
    let sgd = Sgd {
        learning_rate: net.config.learning_rate,
        momentum: net.config.momentum,
    };
    sgd.step(net.named_params().into_iter().map(|(_, p)| p));
    Ok(loss)
}

/// Runs `steps` updates on batches drawn from the pools.
pub fn train(
    net: &mut MicroNet<f32>,
    sim: &[TrainingSample],
    real: &[TrainingSample],
    mix: &MixSpec,
    weights: &TaskWeights,
    steps: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    weights.validate()?;
    if mix.crop_size != net.config.crop_size {
        return Err(Error::InvalidParameter(format!(
            "mix crop size {} differs from network crop size {}",
            mix.crop_size, net.config.crop_size
        )));
    }
    let mut stream = BatchStream::new(sim, real, mix.clone())?;
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = stream.next_batch()?;
        let loss = train_step(net, &batch, weights)?;
        let rec = StepRecord {
            step,
            sim_count: batch.sim_count(),
            loss,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

pub const LOSS_CSV_HEADER: &str = "step,sim_count,total,heatmap,offsets,segment,parts,uv,normal";

pub fn loss_csv_row(r: &StepRecord) -> String {
    let l = &r.loss;
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step,
        r.sim_count,
        l.total(),
        l.heatmap,
        l.offsets,
        l.segment,
        l.parts,
        l.uv,
        l.normal
    )
}

pub fn write_loss_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::file(path, e))?);
    writeln!(f, "{LOSS_CSV_HEADER}")?;
    for r in records {
        writeln!(f, "{}", loss_csv_row(r))?;
    }
    f.flush()?;
    Ok(())
}

/// Domain score fed to hard mixture normalization at evaluation. A domain
/// never seen in training is routed through the branch that was trained.
pub fn eval_domain_score(norm: NormMode, train_sim_fraction: f64, domain: Domain) -> f32 {
    if norm != NormMode::BmnHard {
        return 0.0;
    }
    if train_sim_fraction <= 0.0 {
        0.0
    } else if train_sim_fraction >= 1.0 {
        1.0
    } else if domain == Domain::Sim {
        1.0
    } else {
        0.0
    }
}

/// Evaluation settings for crops.
#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub metrics: MetricParams,
    pub disk_radius: f64,
    pub train_sim_fraction: f64,
    pub batch_size: usize,
    /// Enables GPS for samples with dense labels.
    pub geodesics: Option<&'a GeodesicTable>,
}

/// Evaluates a network on crops in eval mode. Dense metrics are computed
/// for samples that carry dense labels.
pub fn evaluate(net: &mut MicroNet<f32>, samples: &[TrainingSample], opts: &EvalOptions) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyPool("evaluation"));
    }
    opts.metrics.validate()?;
    let mut images = Vec::with_capacity(samples.len());
    let mut matches = Vec::new();
    for (c, chunk) in samples.chunks(opts.batch_size.max(1)).enumerate() {
        let (x, _) = batch_input(chunk)?;
        let z: Vec<f32> = chunk
            .iter()
            .map(|s| eval_domain_score(net.config.norm, opts.train_sim_fraction, s.domain))
            .collect();
        let pred = net.forward(&x, &z, false)?;
        for (i, s) in chunk.iter().enumerate() {
            let m = crop_metrics(&pred, i, s, opts, format!("{}", c * opts.batch_size.max(1) + i))?;
            if let Some(g) = m.gps {
                let score = m.iou.unwrap_or(0.0);
                matches.push(ScoredMatch { score, gps: Some(g) });
            }
            images.push(m);
        }
    }
    let n_gt = matches.len();
    let report = MetricReport::aggregate(images, Some((&matches, n_gt)));
    report.validate()?;
    Ok(report)
}

fn crop_metrics(pred: &crate::net::Prediction<f32>, i: usize, s: &TrainingSample, opts: &EvalOptions, name: String) -> Result<ImageMetrics> {
    let d = decode(pred, i, opts.disk_radius);
    let gt_mask: Vec<bool> = s.instance.iter().map(|&v| v > 0.5).collect();
    let kp: [[f64; 2]; 17] = d.keypoints.map(|k| [k[0], k[1]]);
    let mut m = ImageMetrics {
        name,
        iou: Some(iou(&d.instance, &gt_mask)?),
        oks: match oks(&kp, &s.keypoints, s.area, &opts.metrics.falloff) {
            Ok(v) => Some(v),
            Err(Error::EmptyRegion | Error::ZeroArea) => None,
            Err(e) => return Err(e),
        },
        ..ImageMetrics::default()
    };
    if let (Some(part), Some(uv), Some(normal)) = (&s.part, &s.uv, &s.normal) {
        let part_region: Vec<bool> = part.iter().map(|&q| q != BACKGROUND_PART).collect();
        let gt_uv: Vec<[f32; 2]> = uv
            .iter()
            .zip(part)
            .map(|(u, &q)| if q == BACKGROUND_PART { BACKGROUND_UV } else { [u[0] + 0.5, u[1] + 0.5] })
            .collect();
        let pred_uv = uv_at_parts(pred, i, part);
        m.uv_l2 = uv_l2(&pred_uv, &gt_uv, &part_region).ok();
        let normal_region: Vec<bool> = gt_mask.iter().zip(normal).map(|(&r, n)| r && n.iter().any(|&v| v != 0.0)).collect();
        m.add_degrees = add_normals(&d.normal, normal, &normal_region).ok();
        if let Some(table) = opts.geodesics {
            m.gps = gps(
                DenseLabels { part: &d.part, uv: &d.uv },
                DenseLabels { part, uv: &gt_uv },
                &gt_mask,
                s.size,
                table,
                opts.metrics.kappa,
                opts.metrics.gps_stride,
            )
            .ok();
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::gradcheck::random_sample;
    use crate::net::{BlockSpec, NetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(norm: NormMode) -> MicroNet<f32> {
        let b = |channels, stride| BlockSpec { channels, stride };
        MicroNet::new(NetConfig {
            blocks: vec![b(8, 2), b(8, 1), b(12, 2)],
            norm,
            parts: 4,
            crop_size: 16,
            ..NetConfig::default()
        })
        .unwrap()
    }

    fn pools() -> (Vec<TrainingSample>, Vec<TrainingSample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = (0..6).map(|_| random_sample(16, Domain::Sim, 4, &mut rng)).collect();
        let real = (0..6).map(|_| random_sample(16, Domain::Real, 4, &mut rng)).collect();
        (sim, real)
    }

    fn mix(p: f64) -> MixSpec {
        MixSpec {
            batch_size: 4,
            sim_fraction: p,
            crop_size: 16,
            ..MixSpec::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (sim, real) = pools();
        let w = TaskWeights::default();
        let run = || {
            let mut net = tiny_net(NormMode::BmnHard);
            train(&mut net, &sim, &real, &mix(0.5), &w, 60, |_| {}).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        let first: f64 = a[..5].iter().map(|r| r.loss.total()).sum();
        let last: f64 = a[a.len() - 5..].iter().map(|r| r.loss.total()).sum();
        assert!(last < first, "{first} -> {last}");
        assert!(a.iter().all(|r| r.sim_count == 2));
    }

    #[test]
    fn evaluation_reports_dense_metrics_only_for_sim() {
        let (sim, real) = pools();
        let mut net = tiny_net(NormMode::BatchNorm);
        let opts = EvalOptions {
            metrics: MetricParams::default(),
            disk_radius: 4.0,
            train_sim_fraction: 0.5,
            batch_size: 4,
            geodesics: None,
        };
        let r = evaluate(&mut net, &sim, &opts).unwrap();
        assert!(r.uv_l2_mean.is_some() && r.add_degrees.is_some());
        let r = evaluate(&mut net, &real, &opts).unwrap();
        assert!(r.uv_l2_mean.is_none() && r.iou_mean.is_some());
    }

    #[test]
    fn eval_domain_score_routes_unseen_domains() {
        let h = NormMode::BmnHard;
        assert_eq!(eval_domain_score(h, 0.5, Domain::Sim), 1.0);
        assert_eq!(eval_domain_score(h, 0.5, Domain::Real), 0.0);
        assert_eq!(eval_domain_score(h, 0.0, Domain::Sim), 0.0);
        assert_eq!(eval_domain_score(h, 1.0, Domain::Real), 1.0);
    }

    #[test]
    fn mismatched_crop_size_is_rejected() {
        let (sim, real) = pools();
        let mut net = tiny_net(NormMode::BatchNorm);
        let mut m = mix(0.5);
        m.crop_size = 32;
        assert!(train(&mut net, &sim, &real, &m, &TaskWeights::default(), 1, |_| {}).is_err());
    }
}
