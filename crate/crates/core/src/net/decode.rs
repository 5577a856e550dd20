//! Prediction decoding: Hough voting for keypoints and thresholded maps.

use super::layers::sigmoid;
use super::loss::Prediction;
use super::tensor::Real;
use crate::raster::{BACKGROUND_NORMAL, BACKGROUND_PART, BACKGROUND_UV};
use crate::rig::KEYPOINT_COUNT;

/// Decoded outputs of one sample, row-major at crop resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub size: usize,
    /// (x, y, score) per keypoint in crop pixels.
    pub keypoints: [[f64; 3]; KEYPOINT_COUNT],
    pub instance: Vec<bool>,
    pub part: Vec<u8>,
    /// Un-centered uv clamped to [0, 1]; `BACKGROUND_UV` off parts.
    pub uv: Vec<[f32; 2]>,
    /// Unit normals; zero predictions decode to `BACKGROUND_NORMAL`.
    pub normal: Vec<[f32; 3]>,
}

/// Accumulates heatmap probabilities at the locations their offsets point
/// to, splatted bilinearly. `prob` and `offsets` hold one sample with 17
/// and 34 channels per pixel; offsets are in units of `radius`.
pub fn vote_maps(prob: &[f64], offsets: &[f64], size: usize, radius: f64) -> Vec<f64> {
    let mut votes = vec![0.0; size * size * KEYPOINT_COUNT];
    for p in 0..size * size {
        let (py, px) = ((p / size) as f64, (p % size) as f64);
        for k in 0..KEYPOINT_COUNT {
            let h = prob[p * KEYPOINT_COUNT + k];
            if h <= 0.0 {
                continue;
            }
            let tx = px + radius * offsets[p * 2 * KEYPOINT_COUNT + 2 * k];
            let ty = py + radius * offsets[p * 2 * KEYPOINT_COUNT + 2 * k + 1];
            let (x0, y0) = (tx.floor(), ty.floor());
            let (fx, fy) = (tx - x0, ty - y0);
            for (dx, dy, w) in [(0.0, 0.0, (1.0 - fx) * (1.0 - fy)), (1.0, 0.0, fx * (1.0 - fy)), (0.0, 1.0, (1.0 - fx) * fy), (1.0, 1.0, fx * fy)] {
                let (x, y) = (x0 + dx, y0 + dy);
                if w > 0.0 && x >= 0.0 && y >= 0.0 && x < size as f64 && y < size as f64 {
                    votes[(y as usize * size + x as usize) * KEYPOINT_COUNT + k] += h * w;
                }
            }
        }
    }
    votes
}

/// Spatial argmax per channel; ties go to the first pixel in row order.
pub fn argmax_keypoints(votes: &[f64], size: usize) -> [[f64; 3]; KEYPOINT_COUNT] {
    let mut out = [[0.0; 3]; KEYPOINT_COUNT];
    for (k, o) in out.iter_mut().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for p in 0..size * size {
            let v = votes[p * KEYPOINT_COUNT + k];
            if v > best.0 {
                best = (v, p);
            }
        }
        *o = [(best.1 % size) as f64, (best.1 / size) as f64, best.0];
    }
    out
}

pub fn decode<T: Real>(pred: &Prediction<T>, n: usize, radius: f64) -> Decoded {
    let size = pred.heatmap.h;
    let px = size * size;
    let k = pred.part_count();
    let slice = |t: &crate::net::Tensor4<T>| -> Vec<f64> {
        let per = px * t.c;
        t.data[n * per..(n + 1) * per].iter().map(|v| v.to_f64()).collect()
    };
    let prob: Vec<f64> = slice(&pred.heatmap).into_iter().map(sigmoid).collect();
    let offsets = slice(&pred.offsets);
    let votes = vote_maps(&prob, &offsets, size, radius);
    let keypoints = argmax_keypoints(&votes, size);
    let inst = slice(&pred.instance);
    let parts = slice(&pred.parts);
    let uvs = slice(&pred.uv);
    let normals = slice(&pred.normal);
    let mut out = Decoded {
        size,
        keypoints,
        instance: inst.iter().map(|&v| sigmoid(v) >= 0.5).collect(),
        part: vec![BACKGROUND_PART; px],
        uv: vec![BACKGROUND_UV; px],
        normal: vec![BACKGROUND_NORMAL; px],
    };
    for p in 0..px {
        let row = &parts[p * k..(p + 1) * k];
        let (q, best) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        if sigmoid(best) >= 0.5 {
            out.part[p] = q as u8;
            let u = &uvs[p * 2 * k + 2 * q..p * 2 * k + 2 * q + 2];
            out.uv[p] = [(u[0] + 0.5).clamp(0.0, 1.0) as f32, (u[1] + 0.5).clamp(0.0, 1.0) as f32];
        }
        let v = &normals[3 * p..3 * p + 3];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 0.0 && len.is_finite() {
            out.normal[p] = [(v[0] / len) as f32, (v[1] / len) as f32, (v[2] / len) as f32];
        }
    }
    out
}

/// uv of `pred` read from the channels of the given part labels, as used
/// when scoring uv regression against ground truth. Pixels with a
/// background label get `BACKGROUND_UV`.
pub fn uv_at_parts<T: Real>(pred: &Prediction<T>, n: usize, part: &[u8]) -> Vec<[f32; 2]> {
    let size = pred.uv.h;
    let k = pred.part_count();
    let per = size * size * 2 * k;
    let d = &pred.uv.data[n * per..(n + 1) * per];
    part.iter()
        .enumerate()
        .map(|(p, &q)| {
            if q == BACKGROUND_PART || q as usize >= k {
                return BACKGROUND_UV;
            }
            let j = p * 2 * k + 2 * q as usize;
            [
                (d[j].to_f64() + 0.5).clamp(0.0, 1.0) as f32,
                (d[j + 1].to_f64() + 0.5).clamp(0.0, 1.0) as f32,
            ]
        })
        .collect()
}
