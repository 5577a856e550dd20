//! Evaluation metrics: geodesic point similarity, OKS, IoU, uv error and
//! average normal angle.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{weld_positions, PartMesh, WELD_TOLERANCE};
use crate::raster::{Keypoint2, LabelFrame, BACKGROUND_PART};
use crate::rig::KEYPOINT_COUNT;

/// GPS kernel width in meters.
pub const DEFAULT_KAPPA: f64 = 0.255;

/// COCO per-keypoint sigmas.
pub const COCO_SIGMAS: [f64; KEYPOINT_COUNT] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
];

/// OKS falloff constants: COCO evaluates `exp(-d^2 / (2 s^2 (2 sigma)^2))`.
pub fn default_falloff() -> [f64; KEYPOINT_COUNT] {
    COCO_SIGMAS.map(|s| 2.0 * s)
}

pub const GPS_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Edge lengths are stored in integer nanometers so that path sums are
/// exact and independent of summation order.
const NM_PER_M: f64 = 1e9;

/// Shortest-path distances over the welded edge graph of a reference mesh,
/// with per-source caching.
#[derive(Debug)]
pub struct GeodesicTable {
    pub mesh: PartMesh,
    /// Welded node of each mesh vertex.
    node_of: Vec<usize>,
    adjacency: Vec<Vec<(usize, u64)>>,
    part_vertices: Vec<Vec<usize>>,
    cache: Mutex<HashMap<usize, Arc<Vec<u64>>>>,
}

impl GeodesicTable {
    pub fn new(mesh: PartMesh) -> Result<Self> {
        if mesh.uv.is_none() {
            return Err(Error::InvalidParameter("geodesic reference mesh needs uv".into()));
        }
        let weld = weld_positions(&mesh.vertices, WELD_TOLERANCE);
        let mut node_id = HashMap::new();
        let node_of: Vec<usize> = weld
            .iter()
            .map(|&r| {
                let n = node_id.len();
                *node_id.entry(r).or_insert(n)
            })
            .collect();
        let mut adjacency = vec![Vec::new(); node_id.len()];
        for t in &mesh.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let (na, nb) = (node_of[a], node_of[b]);
                if na == nb {
                    continue;
                }
                let w = ((mesh.vertices[a] - mesh.vertices[b]).norm() * NM_PER_M).round() as u64;
                for (x, y) in [(na, nb), (nb, na)] {
                    if !adjacency[x].iter().any(|&(z, _)| z == y) {
                        adjacency[x].push((y, w));
                    }
                }
            }
        }
        let mut part_vertices = vec![Vec::new(); mesh.part_count];
        for (v, p) in mesh.vertex_parts().into_iter().enumerate() {
            if let Some(p) = p {
                part_vertices[p].push(v);
            }
        }
        Ok(GeodesicTable {
            mesh,
            node_of,
            adjacency,
            part_vertices,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn node_of(&self, vertex: usize) -> usize {
        self.node_of[vertex]
    }

    /// Dijkstra distances in nanometers from a node; `u64::MAX` when
    /// unreachable.
    pub fn distances_from_node(&self, src: usize) -> Arc<Vec<u64>> {
        if let Some(d) = self.cache.lock().expect("cache lock").get(&src) {
            return d.clone();
        }
        let mut dist = vec![u64::MAX; self.adjacency.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = 0;
        heap.push(Reverse((0u64, src)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        let d = Arc::new(dist);
        self.cache.lock().expect("cache lock").insert(src, d.clone());
        d
    }

    /// Geodesic distance in meters between two mesh vertices.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let d = self.distances_from_node(self.node_of[a])[self.node_of[b]];
        if d == u64::MAX {
            f64::INFINITY
        } else {
            d as f64 / NM_PER_M
        }
    }

    /// All-pairs distances in nanometers by Floyd-Warshall over the same
    /// graph.
    pub fn floyd_warshall(&self) -> Vec<Vec<u64>> {
        let n = self.adjacency.len();
        let mut d = vec![vec![u64::MAX; n]; n];
        for (u, row) in d.iter_mut().enumerate() {
            row[u] = 0;
            for &(v, w) in &self.adjacency[u] {
                row[v] = row[v].min(w);
            }
        }
        for k in 0..n {
            for i in 0..n {
                let dik = d[i][k];
                if dik == u64::MAX {
                    continue;
                }
                for j in 0..n {
                    let dkj = d[k][j];
                    if dkj != u64::MAX && dik + dkj < d[i][j] {
                        d[i][j] = dik + dkj;
                    }
                }
            }
        }
        d
    }

    /// Nearest vertex of `part` in uv space; ties go to the lowest index.
    pub fn surface_point(&self, part: usize, uv: [f64; 2]) -> Result<usize> {
        let verts = self.part_vertices.get(part).filter(|v| !v.is_empty()).ok_or(Error::EmptySubmesh(part))?;
        let uvs = self.mesh.uv.as_ref().expect("checked in new");
        Ok(nearest_uv(verts.iter().copied(), uvs, uv).expect("non-empty part"))
    }
}

fn nearest_uv(verts: impl Iterator<Item = usize>, uvs: &[crate::mesh::Uv], uv: [f64; 2]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for v in verts {
        let d = (uvs[v].x - uv[0]).powi(2) + (uvs[v].y - uv[1]).powi(2);
        if best.map_or(true, |(bd, bv)| d < bd || (d == bd && v < bv)) {
            best = Some((d, v));
        }
    }
    best.map(|b| b.1)
}

/// Nearest reference vertex of `part` in uv space by exhaustive scan.
pub fn uv_to_surface_point(part: usize, uv: [f64; 2], reference: &PartMesh) -> Result<usize> {
    let uvs = reference.uv.as_ref().ok_or_else(|| Error::InvalidParameter("reference mesh needs uv".into()))?;
    let parts = reference.vertex_parts();
    nearest_uv((0..reference.vertices.len()).filter(|&v| parts[v] == Some(part)), uvs, uv).ok_or(Error::EmptySubmesh(part))
}

pub fn gps_kernel(g: f64, kappa: f64) -> f64 {
    (-g * g / (2.0 * kappa * kappa)).exp()
}

/// Per-pixel part and uv labels of one image.
#[derive(Debug, Clone, Copy)]
pub struct DenseLabels<'a> {
    pub part: &'a [u8],
    pub uv: &'a [[f32; 2]],
}

/// Mean GPS over region pixels sampled every `stride` rows and columns.
/// Pixels where the prediction has no part contribute 0.
pub fn gps(pred: DenseLabels, gt: DenseLabels, region: &[bool], width: usize, table: &GeodesicTable, kappa: f64, stride: usize) -> Result<f64> {
    let n = region.len();
    if pred.part.len() != n || gt.part.len() != n || pred.uv.len() != n || gt.uv.len() != n || width == 0 || n % width != 0 {
        return Err(Error::ShapeMismatch("gps label planes".into()));
    }
    let stride = stride.max(1);
    let (mut sum, mut count) = (0.0, 0usize);
    for p in 0..n {
        if !region[p] || (p / width) % stride != 0 || (p % width) % stride != 0 || gt.part[p] == BACKGROUND_PART {
            continue;
        }
        count += 1;
        if pred.part[p] == BACKGROUND_PART {
            continue;
        }
        let uv = |u: [f32; 2]| [u[0] as f64, u[1] as f64];
        let a = table.surface_point(pred.part[p] as usize, uv(pred.uv[p]))?;
        let b = table.surface_point(gt.part[p] as usize, uv(gt.uv[p]))?;
        sum += gps_kernel(table.distance(a, b), kappa);
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// A detection with its confidence and, when matched, its GPS against a
/// ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredMatch {
    pub score: f64,
    pub gps: Option<f64>,
}

/// Greedy assignment in descending score order: each prediction takes the
/// unmatched ground truth with the highest similarity. `sim[p][g]`.
/// Returns the match of every prediction and its ground-truth index.
pub fn greedy_match(scores: &[f64], sim: &[Vec<f64>]) -> (Vec<ScoredMatch>, Vec<Option<usize>>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n_gt = sim.first().map_or(0, |r| r.len());
    let mut taken = vec![false; n_gt];
    let mut out = vec![ScoredMatch { score: 0.0, gps: None }; scores.len()];
    let mut index = vec![None; scores.len()];
    for p in order {
        let best = (0..n_gt).filter(|&g| !taken[g]).max_by(|&a, &b| sim[p][a].total_cmp(&sim[p][b]).then(b.cmp(&a)));
        if let Some(g) = best {
            taken[g] = true;
        }
        index[p] = best;
        out[p] = ScoredMatch {
            score: scores[p],
            gps: best.map(|g| sim[p][g]),
        };
    }
    (out, index)
}

/// AP and AR averaged over `GPS_THRESHOLDS`. AP uses 101-point
/// interpolated precision; AR is the recall at each threshold.
pub fn gps_ap_ar(matches: &[ScoredMatch], n_gt: usize) -> (f64, f64) {
    if n_gt == 0 {
        return (0.0, 0.0);
    }
    let mut order: Vec<&ScoredMatch> = matches.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut ap_sum, mut ar_sum) = (0.0, 0.0);
    for &t in &GPS_THRESHOLDS {
        let mut tp = 0usize;
        let mut curve = Vec::with_capacity(order.len());
        for (i, m) in order.iter().enumerate() {
            if m.gps.is_some_and(|g| g >= t - 1e-12) {
                tp += 1;
            }
            curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
        }
        // Monotone precision envelope.
        for i in (0..curve.len().saturating_sub(1)).rev() {
            curve[i].1 = curve[i].1.max(curve[i + 1].1);
        }
        let mut ap = 0.0;
        for r in 0..=100 {
            let r = r as f64 / 100.0;
            ap += curve.iter().find(|c| c.0 >= r - 1e-12).map_or(0.0, |c| c.1);
        }
        ap_sum += ap / 101.0;
        ar_sum += tp as f64 / n_gt as f64;
    }
    (ap_sum / GPS_THRESHOLDS.len() as f64, ar_sum / GPS_THRESHOLDS.len() as f64)
}

/// Mean angle in degrees between renormalized predictions and unit ground
/// truth over the region; zero predictions count as 90 degrees.
pub fn add_normals(pred: &[[f32; 3]], gt: &[[f32; 3]], region: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != region.len() {
        return Err(Error::ShapeMismatch("normal planes".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ((p, g), &r) in pred.iter().zip(gt).zip(region) {
        if !r {
            continue;
        }
        count += 1;
        let (a, b) = (p.map(|v| v as f64), g.map(|v| v as f64));
        if a.iter().all(|&v| v == 0.0) {
            sum += 90.0;
            continue;
        }
        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        // Angle independent of the length of `a`; exact near 0 and 180
        // degrees where the arccos of the dot product is not.
        sum += sin.atan2(dot).to_degrees();
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Object keypoint similarity over labeled ground-truth keypoints.
pub fn oks(pred: &[[f64; 2]; KEYPOINT_COUNT], gt: &[Keypoint2; KEYPOINT_COUNT], area: f64, falloff: &[f64; KEYPOINT_COUNT]) -> Result<f64> {
    if !(area > 0.0) {
        return Err(Error::ZeroArea);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for k in 0..KEYPOINT_COUNT {
        if !gt[k].visibility.labeled() {
            continue;
        }
        count += 1;
        let d2 = (pred[k][0] - gt[k].x).powi(2) + (pred[k][1] - gt[k].y).powi(2);
        let e = d2 / (2.0 * area * falloff[k] * falloff[k]);
        if e.is_finite() {
            sum += (-e).exp();
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch("masks".into()));
    }
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean Euclidean uv error over the region.
pub fn uv_l2(pred: &[[f32; 2]], gt: &[[f32; 2]], region: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != region.len() {
        return Err(Error::ShapeMismatch("uv planes".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ((p, g), &r) in pred.iter().zip(gt).zip(region) {
        if r {
            sum += ((p[0] as f64 - g[0] as f64).powi(2) + (p[1] as f64 - g[1] as f64).powi(2)).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Metrics of one image or crop; absent entries had no support.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub gps: Option<f64>,
    pub oks: Option<f64>,
    pub iou: Option<f64>,
    pub uv_l2: Option<f64>,
    pub add_degrees: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub gps_mean: Option<f64>,
    pub gps_ap: Option<f64>,
    pub gps_ar: Option<f64>,
    pub oks_mean: Option<f64>,
    pub iou_mean: Option<f64>,
    pub uv_l2_mean: Option<f64>,
    pub add_degrees: Option<f64>,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

impl MetricReport {
    /// Aggregates per-image values; `matches` and `n_gt` feed GPS AP/AR.
    pub fn aggregate(images: Vec<ImageMetrics>, matches: Option<(&[ScoredMatch], usize)>) -> Self {
        let (gps_ap, gps_ar) = match matches {
            Some((m, n)) if n > 0 => {
                let (ap, ar) = gps_ap_ar(m, n);
                (Some(ap), Some(ar))
            }
            _ => (None, None),
        };
        MetricReport {
            gps_mean: mean(images.iter().map(|m| m.gps)),
            oks_mean: mean(images.iter().map(|m| m.oks)),
            iou_mean: mean(images.iter().map(|m| m.iou)),
            uv_l2_mean: mean(images.iter().map(|m| m.uv_l2)),
            add_degrees: mean(images.iter().map(|m| m.add_degrees)),
            gps_ap,
            gps_ar,
            images,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [self.gps_mean, self.gps_ap, self.gps_ar, self.oks_mean, self.iou_mean];
        if unit.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("similarity outside [0, 1]".into()));
        }
        if self.add_degrees.is_some_and(|a| !(0.0..=180.0).contains(&a)) {
            return Err(Error::Format("angle outside [0, 180]".into()));
        }
        Ok(())
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    pub kappa: f64,
    pub gps_stride: usize,
    pub falloff: [f64; KEYPOINT_COUNT],
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            kappa: DEFAULT_KAPPA,
            gps_stride: 4,
            falloff: default_falloff(),
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || self.gps_stride == 0 || self.falloff.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::InvalidParameter("metric parameters".into()));
        }
        Ok(())
    }
}

/// Frame-level evaluation of a predicted label frame against ground truth.
/// Predicted instances are matched greedily by GPS, highest area first;
/// surface-normal angles are measured over each ground-truth instance.
pub fn evaluate_frame(
    name: &str,
    pred: &LabelFrame,
    gt: &LabelFrame,
    table: &GeodesicTable,
    params: &MetricParams,
) -> Result<(Vec<ImageMetrics>, Vec<ScoredMatch>, usize)> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::ShapeMismatch("prediction and ground-truth frames differ in size".into()));
    }
    let n_gt = gt.instances.len();
    let n_pred = pred.instances.len();
    let gt_regions: Vec<Vec<bool>> = (0..n_gt).map(|i| gt.instance.iter().map(|&v| v == i as u16).collect()).collect();
    let mut sim = vec![vec![0.0; n_gt]; n_pred];
    for (p, row) in sim.iter_mut().enumerate() {
        let part: Vec<u8> = pred
            .part
            .iter()
            .zip(&pred.instance)
            .map(|(&q, &i)| if i == p as u16 { q } else { BACKGROUND_PART })
            .collect();
        for (g, region) in gt_regions.iter().enumerate() {
            row[g] = match gps(
                DenseLabels { part: &part, uv: &pred.uv },
                DenseLabels { part: &gt.part, uv: &gt.uv },
                region,
                gt.width,
                table,
                params.kappa,
                params.gps_stride,
            ) {
                Ok(v) => v,
                Err(Error::EmptyRegion) => 0.0,
                Err(e) => return Err(e),
            };
        }
    }
    let scores: Vec<f64> = (0..n_pred).map(|p| pred.instance_area(p as u16) as f64).collect();
    let (matches, gt_of) = greedy_match(&scores, &sim);
    let mut per = Vec::with_capacity(n_gt);
    for g in 0..n_gt {
        let region = &gt_regions[g];
        let matched = gt_of.iter().position(|&x| x == Some(g));
        let mut m = ImageMetrics {
            name: format!("{name}#{g}"),
            ..ImageMetrics::default()
        };
        m.gps = Some(matched.map_or(0.0, |p| sim[p][g]));
        if let Some(p) = matched {
            let pm: Vec<bool> = pred.instance.iter().map(|&v| v == p as u16).collect();
            m.iou = Some(iou(&pm, region)?);
            let kp = pred.instances[p].keypoints.map(|k| [k.x, k.y]);
            m.oks = match oks(&kp, &gt.instances[g].keypoints, gt.instance_area(g as u16) as f64, &params.falloff) {
                Ok(v) => Some(v),
                Err(Error::EmptyRegion | Error::ZeroArea) => None,
                Err(e) => return Err(e),
            };
        } else {
            m.iou = Some(iou(&vec![false; region.len()], region)?);
            m.oks = Some(0.0);
        }
        let part_region: Vec<bool> = region.iter().zip(&gt.part).map(|(&r, &q)| r && q != BACKGROUND_PART).collect();
        m.uv_l2 = uv_l2(&pred.uv, &gt.uv, &part_region).ok();
        m.add_degrees = add_normals(&pred.normal, &gt.normal, &part_region).ok();
        per.push(m);
    }
    Ok((per, matches, n_gt))
}
