//! Person-centered crops and sim/real batch mixtures.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    read_annotations, read_color_png, read_instance_plane, Keypoint2, LabelFrame, Visibility, ANNOTATION_FILE,
    BACKGROUND_PART, COLOR_FILE, INSTANCE_FILE,
};
use crate::rig::KEYPOINT_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Sim,
    Real,
}

/// Which task labels a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Availability {
    pub keypoints: bool,
    pub instance: bool,
    pub parts: bool,
    pub uv: bool,
    pub normal: bool,
}

impl Availability {
    pub fn for_domain(d: Domain) -> Self {
        let full = d == Domain::Sim;
        Availability {
            keypoints: true,
            instance: true,
            parts: full,
            uv: full,
            normal: full,
        }
    }
}

/// One square crop with its labels, all at `size` x `size` resolution and
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub size: usize,
    /// RGB in [0, 1], 3 values per pixel.
    pub image: Vec<f32>,
    pub domain: Domain,
    /// Keypoints in crop pixel coordinates.
    pub keypoints: [Keypoint2; KEYPOINT_COUNT],
    /// Disk targets, 17 values per pixel, each 0 or 1.
    pub heatmap: Vec<f32>,
    /// Offsets to the exact keypoint location divided by the disk radius,
    /// 34 values per pixel as (dx, dy) pairs; zero outside disks.
    pub offsets: Vec<f32>,
    /// Instance mask of the centered person, 0 or 1.
    pub instance: Vec<f32>,
    /// Instance area in crop pixels.
    pub area: f64,
    /// Part index per pixel, `BACKGROUND_PART` off the person.
    pub part: Option<Vec<u8>>,
    /// uv minus 0.5 per pixel.
    pub uv: Option<Vec<[f32; 2]>>,
    /// Camera-frame unit normals.
    pub normal: Option<Vec<[f32; 3]>>,
    pub available: Availability,
}

impl TrainingSample {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        let lens = [
            (self.image.len(), 3 * n),
            (self.heatmap.len(), KEYPOINT_COUNT * n),
            (self.offsets.len(), 2 * KEYPOINT_COUNT * n),
            (self.instance.len(), n),
        ];
        if lens.iter().any(|(a, b)| a != b) {
            return Err(Error::ShapeMismatch("training sample buffers".into()));
        }
        match self.domain {
            Domain::Real => {
                if self.available.parts || self.available.uv || self.available.normal {
                    return Err(Error::Format("real sample marks dense labels as available".into()));
                }
                if self.part.is_some() || self.uv.is_some() || self.normal.is_some() {
                    return Err(Error::Format("real sample carries dense labels".into()));
                }
            }
            Domain::Sim => {
                let (Some(p), Some(uv), Some(nm)) = (&self.part, &self.uv, &self.normal) else {
                    return Err(Error::MissingLabels("simulated sample without dense labels"));
                };
                if p.len() != n || uv.len() != n || nm.len() != n {
                    return Err(Error::ShapeMismatch("dense label buffers".into()));
                }
                if uv.iter().flatten().any(|v| !(-0.5..=0.5).contains(v)) {
                    return Err(Error::Format("centered uv outside [-0.5, 0.5]".into()));
                }
            }
        }
        Ok(())
    }
}

/// Uniform box jitter relative to the box side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxJitter {
    pub scale: f64,
    pub translate: f64,
}

impl Default for BoxJitter {
    fn default() -> Self {
        BoxJitter {
            scale: 0.1,
            translate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSpec {
    pub batch_size: usize,
    /// Fraction of simulated samples per batch.
    pub sim_fraction: f64,
    pub crop_size: usize,
    /// Heatmap disk radius in label pixels.
    pub disk_radius: f64,
    /// Context margin added around the tight person box.
    pub box_margin: f64,
    pub jitter: BoxJitter,
    pub seed: u64,
}

impl Default for MixSpec {
    fn default() -> Self {
        MixSpec {
            batch_size: 8,
            sim_fraction: 0.5,
            crop_size: 64,
            disk_radius: 4.0,
            box_margin: 1.2,
            jitter: BoxJitter::default(),
            seed: 0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sim_fraction) {
            return Err(Error::InvalidParameter(format!("sim fraction {} outside [0, 1]", self.sim_fraction)));
        }
        if self.crop_size < 8 {
            return Err(Error::InvalidParameter("crop size must be at least 8".into()));
        }
        if !(self.disk_radius > 0.0) || !(self.box_margin >= 1.0) {
            return Err(Error::InvalidParameter("disk radius and box margin".into()));
        }
        if !(self.jitter.scale >= 0.0 && self.jitter.scale < 1.0 && self.jitter.translate >= 0.0) {
            return Err(Error::InvalidParameter("box jitter".into()));
        }
        Ok(())
    }

    /// Number of simulated samples in each batch.
    pub fn sim_count(&self) -> usize {
        ((self.sim_fraction * self.batch_size as f64).round() as usize).min(self.batch_size)
    }
}

/// Crop box `[x0, y0, x1, y1)` in continuous source pixel coordinates:
/// crop pixel `d` samples the source at `x0 + d * (x1 - x0) / size`.
pub type CropBox = [f64; 4];

/// Square box around a tight pixel box, scaled by `margin`.
pub fn square_box(tight: [usize; 4], margin: f64) -> CropBox {
    let cx = (tight[0] + tight[2] + 1) as f64 / 2.0;
    let cy = (tight[1] + tight[3] + 1) as f64 / 2.0;
    let side = ((tight[2] - tight[0] + 1).max(tight[3] - tight[1] + 1)) as f64 * margin;
    [cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0]
}

pub fn jitter_box(b: CropBox, j: &BoxJitter, rng: &mut impl Rng) -> CropBox {
    let side = b[2] - b[0];
    let s = if j.scale > 0.0 { 1.0 + rng.gen_range(-j.scale..=j.scale) } else { 1.0 };
    let mut t = [0.0; 2];
    for v in &mut t {
        if j.translate > 0.0 {
            *v = rng.gen_range(-j.translate..=j.translate) * side;
        }
    }
    let cx = (b[0] + b[2]) / 2.0 + t[0];
    let cy = (b[1] + b[3]) / 2.0 + t[1];
    let (hw, hh) = ((b[2] - b[0]) * s / 2.0, (b[3] - b[1]) * s / 2.0);
    [cx - hw, cy - hh, cx + hw, cy + hh]
}

/// Source of label planes for cropping.
pub struct CropSource<'a> {
    pub width: usize,
    pub height: usize,
    pub color: &'a [[u8; 3]],
    pub instance: &'a [u16],
    pub part: Option<&'a [u8]>,
    pub uv: Option<&'a [[f32; 2]]>,
    /// Normals already in the camera frame.
    pub normal: Option<&'a [[f32; 3]]>,
}

impl<'a> CropSource<'a> {
    /// Dense labels of a rendered frame, with normals rotated into the
    /// camera frame.
    pub fn from_frame(frame: &'a LabelFrame, cam_normals: &'a [[f32; 3]]) -> Self {
        CropSource {
            width: frame.width,
            height: frame.height,
            color: &frame.color,
            instance: &frame.instance,
            part: Some(&frame.part),
            uv: Some(&frame.uv),
            normal: Some(cam_normals),
        }
    }
}

/// World-space normals of a frame expressed in its camera frame.
pub fn camera_normals(frame: &LabelFrame) -> Vec<[f32; 3]> {
    let r = frame.camera.world_to_camera_rotation();
    frame
        .normal
        .iter()
        .map(|n| {
            if *n == [0.0; 3] {
                return *n;
            }
            let v = r * nalgebra::Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            [v.x as f32, v.y as f32, v.z as f32]
        })
        .collect()
}

/// Bilinear taps at a source location; taps outside the image are dropped.
fn taps(sx: f64, sy: f64, w: usize, h: usize) -> impl Iterator<Item = (usize, f64)> {
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let cand = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    cand.into_iter().filter_map(move |(x, y, wt)| {
        (wt > 0.0 && x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h)
            .then(|| (y as usize * w + x as usize, wt))
    })
}

fn nearest(sx: f64, sy: f64, w: usize, h: usize) -> Option<usize> {
    let (x, y) = (sx.round(), sy.round());
    (x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
}

/// Disk heatmap and normalized offset targets for keypoints in crop
/// coordinates. Only labeled keypoints inside the crop produce targets.
pub fn keypoint_targets(kps: &[Keypoint2; KEYPOINT_COUNT], size: usize, radius: f64) -> (Vec<f32>, Vec<f32>) {
    let n = size * size;
    let mut heat = vec![0.0f32; n * KEYPOINT_COUNT];
    let mut off = vec![0.0f32; n * 2 * KEYPOINT_COUNT];
    for (k, kp) in kps.iter().enumerate() {
        if !kp.visibility.labeled() {
            continue;
        }
        let r = radius.ceil() as i64;
        let (cx, cy) = (kp.x.round() as i64, kp.y.round() as i64);
        for y in (cy - r).max(0)..=(cy + r).min(size as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(size as i64 - 1) {
                let (dx, dy) = (kp.x - x as f64, kp.y - y as f64);
                if dx * dx + dy * dy <= radius * radius {
                    let p = y as usize * size + x as usize;
                    heat[p * KEYPOINT_COUNT + k] = 1.0;
                    off[p * 2 * KEYPOINT_COUNT + 2 * k] = (dx / radius) as f32;
                    off[p * 2 * KEYPOINT_COUNT + 2 * k + 1] = (dy / radius) as f32;
                }
            }
        }
    }
    (heat, off)
}

/// Crops and resamples one person. `target` is the instance id whose mask,
/// parts and surface labels the crop carries.
#[allow(clippy::too_many_arguments)]
pub fn crop_resize(
    src: &CropSource,
    target: u16,
    keypoints: &[Keypoint2; KEYPOINT_COUNT],
    bx: CropBox,
    size: usize,
    domain: Domain,
    disk_radius: f64,
) -> Result<TrainingSample> {
    let (bw, bh) = (bx[2] - bx[0], bx[3] - bx[1]);
    if !(bw > 0.0 && bh > 0.0) || size == 0 {
        return Err(Error::InvalidParameter("degenerate crop box".into()));
    }
    if bx[2] <= 0.0 || bx[3] <= 0.0 || bx[0] >= src.width as f64 || bx[1] >= src.height as f64 {
        return Err(Error::InvalidParameter("crop box outside the image".into()));
    }
    let (w, h) = (src.width, src.height);
    let n = size * size;
    let (sxs, sys) = (bw / size as f64, bh / size as f64);
    let dense = domain == Domain::Sim;
    if dense && (src.part.is_none() || src.uv.is_none() || src.normal.is_none()) {
        return Err(Error::MissingLabels("simulated crop needs part, uv and normal planes"));
    }
    let mut image = vec![0.0f32; 3 * n];
    let mut instance = vec![0.0f32; n];
    let mut part = dense.then(|| vec![BACKGROUND_PART; n]);
    let mut uv = dense.then(|| vec![[0.0f32; 2]; n]);
    let mut normal = dense.then(|| vec![[0.0f32; 3]; n]);
    for i in 0..size {
        let sy = bx[1] + i as f64 * sys;
        for j in 0..size {
            let sx = bx[0] + j as f64 * sxs;
            let d = i * size + j;
            let mut c = [0.0f64; 3];
            for (s, wt) in taps(sx, sy, w, h) {
                for k in 0..3 {
                    c[k] += wt * src.color[s][k] as f64 / 255.0;
                }
            }
            for k in 0..3 {
                image[3 * d + k] = c[k] as f32;
            }
            let Some(s) = nearest(sx, sy, w, h) else { continue };
            if src.instance[s] != target {
                continue;
            }
            instance[d] = 1.0;
            if let (Some(pm), Some(um), Some(nm)) = (&mut part, &mut uv, &mut normal) {
                let sp = src.part.unwrap();
                let p = sp[s];
                if p == BACKGROUND_PART {
                    continue;
                }
                // Bilinear over taps on the same person and part.
                let (mut u, mut nv, mut tw) = ([0.0f64; 2], [0.0f64; 3], 0.0);
                for (t, wt) in taps(sx, sy, w, h) {
                    if src.instance[t] == target && sp[t] == p {
                        let a = src.uv.unwrap()[t];
                        let b = src.normal.unwrap()[t];
                        u[0] += wt * a[0] as f64;
                        u[1] += wt * a[1] as f64;
                        for k in 0..3 {
                            nv[k] += wt * b[k] as f64;
                        }
                        tw += wt;
                    }
                }
                if tw <= 0.0 {
                    let a = src.uv.unwrap()[s];
                    let b = src.normal.unwrap()[s];
                    u = [a[0] as f64, a[1] as f64];
                    nv = [b[0] as f64, b[1] as f64, b[2] as f64];
                    tw = 1.0;
                }
                let len = (nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]).sqrt();
                if len <= 0.0 {
                    continue;
                }
                pm[d] = p;
                um[d] = [
                    ((u[0] / tw).clamp(0.0, 1.0) - 0.5) as f32,
                    ((u[1] / tw).clamp(0.0, 1.0) - 0.5) as f32,
                ];
                nm[d] = [(nv[0] / len) as f32, (nv[1] / len) as f32, (nv[2] / len) as f32];
            }
        }
    }
    let mut kps = *keypoints;
    for kp in &mut kps {
        kp.x = (kp.x - bx[0]) / sxs;
        kp.y = (kp.y - bx[1]) / sys;
        let inside = kp.x >= -0.5 && kp.y >= -0.5 && kp.x < size as f64 - 0.5 && kp.y < size as f64 - 0.5;
        if !inside {
            kp.visibility = Visibility::OffImage;
        }
    }
    let (heatmap, offsets) = keypoint_targets(&kps, size, disk_radius);
    let area = instance.iter().filter(|&&v| v > 0.5).count() as f64;
    let sample = TrainingSample {
        size,
        image,
        domain,
        keypoints: kps,
        heatmap,
        offsets,
        instance,
        area,
        part,
        uv,
        normal,
        available: Availability::for_domain(domain),
    };
    sample.validate()?;
    Ok(sample)
}

/// Pool-building parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CropParams {
    pub size: usize,
    pub disk_radius: f64,
    pub margin: f64,
    pub jitter: BoxJitter,
    /// People with fewer visible pixels are skipped.
    pub min_area: usize,
}

impl CropParams {
    pub fn from_spec(spec: &MixSpec) -> Self {
        CropParams {
            size: spec.crop_size,
            disk_radius: spec.disk_radius,
            margin: spec.box_margin,
            jitter: spec.jitter,
            min_area: 64,
        }
    }
}

/// One crop per sufficiently visible person in a frame.
pub fn crops_from_frame(
    src: &CropSource,
    keypoints: &[[Keypoint2; KEYPOINT_COUNT]],
    domain: Domain,
    params: &CropParams,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (id, kps) in keypoints.iter().enumerate() {
        let id = id as u16;
        let mut tight: Option<[usize; 4]> = None;
        let mut area = 0;
        for (k, &v) in src.instance.iter().enumerate() {
            if v == id {
                area += 1;
                let (i, j) = (k / src.width, k % src.width);
                tight = Some(match tight {
                    None => [j, i, j, i],
                    Some([x0, y0, x1, y1]) => [x0.min(j), y0.min(i), x1.max(j), y1.max(i)],
                });
            }
        }
        let Some(tight) = tight else { continue };
        if area < params.min_area {
            continue;
        }
        let bx = jitter_box(square_box(tight, params.margin), &params.jitter, rng);
        out.push(crop_resize(src, id, kps, bx, params.size, domain, params.disk_radius)?);
    }
    Ok(out)
}

/// Crops of every person in a rendered frame with full labels.
pub fn sim_crops(frame: &LabelFrame, params: &CropParams, rng: &mut impl Rng) -> Result<Vec<TrainingSample>> {
    let cam_n = camera_normals(frame);
    let src = CropSource::from_frame(frame, &cam_n);
    let kps: Vec<_> = frame.instances.iter().map(|m| m.keypoints).collect();
    crops_from_frame(&src, &kps, Domain::Sim, params, rng)
}

/// Crops of a frame exposing only 2D labels.
pub fn real_crops(frame: &LabelFrame, params: &CropParams, rng: &mut impl Rng) -> Result<Vec<TrainingSample>> {
    let src = CropSource {
        width: frame.width,
        height: frame.height,
        color: &frame.color,
        instance: &frame.instance,
        part: None,
        uv: None,
        normal: None,
    };
    let kps: Vec<_> = frame.instances.iter().map(|m| m.keypoints).collect();
    crops_from_frame(&src, &kps, Domain::Real, params, rng)
}

/// Loads an image directory holding only `color.png`, `instance.bin` and
/// `annotations.json` (2D labels), as for external real data.
pub fn load_real_dir(dir: &Path, params: &CropParams, rng: &mut impl Rng) -> Result<Vec<TrainingSample>> {
    let (w, h, color) = read_color_png(&dir.join(COLOR_FILE))?;
    let (iw, ih, instance) = read_instance_plane(&dir.join(INSTANCE_FILE))?;
    if (iw, ih) != (w, h) {
        return Err(Error::Format(format!("instance plane {iw}x{ih} does not match image {w}x{h}")));
    }
    let ann = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let src = CropSource {
        width: w,
        height: h,
        color: &color,
        instance: &instance,
        part: None,
        uv: None,
        normal: None,
    };
    let kps: Vec<_> = ann.instances.iter().map(|m| m.keypoints).collect();
    crops_from_frame(&src, &kps, Domain::Real, params, rng)
}

/// A batch of samples in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<TrainingSample>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn size(&self) -> usize {
        self.samples.first().map_or(0, |s| s.size)
    }

    pub fn sim_count(&self) -> usize {
        self.samples.iter().filter(|s| s.domain == Domain::Sim).count()
    }

    /// Domain scores, 1 for simulated samples.
    pub fn domain_scores(&self) -> Vec<f32> {
        self.samples.iter().map(|s| if s.domain == Domain::Sim { 1.0 } else { 0.0 }).collect()
    }
}

/// Draws a batch with exactly `spec.sim_count()` simulated samples.
pub fn make_batch(sim: &[TrainingSample], real: &[TrainingSample], spec: &MixSpec, rng: &mut impl Rng) -> Result<SampleBatch> {
    spec.validate()?;
    let n_sim = spec.sim_count();
    let n_real = spec.batch_size - n_sim;
    if n_sim > 0 && sim.is_empty() {
        return Err(Error::EmptyPool("sim"));
    }
    if n_real > 0 && real.is_empty() {
        return Err(Error::EmptyPool("real"));
    }
    let mut samples = Vec::with_capacity(spec.batch_size);
    for _ in 0..n_sim {
        samples.push(sim[rng.gen_range(0..sim.len())].clone());
    }
    for _ in 0..n_real {
        samples.push(real[rng.gen_range(0..real.len())].clone());
    }
    samples.shuffle(rng);
    for s in &samples {
        s.validate()?;
        if s.size != spec.crop_size {
            return Err(Error::ShapeMismatch(format!("crop size {} in a {} batch", s.size, spec.crop_size)));
        }
    }
    Ok(SampleBatch { samples })
}

/// Deterministic batch stream.
pub struct BatchStream<'a> {
    sim: &'a [TrainingSample],
    real: &'a [TrainingSample],
    spec: MixSpec,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(sim: &'a [TrainingSample], real: &'a [TrainingSample], spec: MixSpec) -> Result<Self> {
        spec.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(BatchStream { sim, real, spec, rng })
    }

    pub fn next_batch(&mut self) -> Result<SampleBatch> {
        make_batch(self.sim, self.real, &self.spec, &mut self.rng)
    }
}
