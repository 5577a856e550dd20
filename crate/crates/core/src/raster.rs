//! Z-buffered software rasterizer for color and per-pixel label planes.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Uv, Vec3};
use crate::rig::{PosedFigure, KEYPOINT_COUNT};

pub const BACKGROUND_PART: u8 = 255;
pub const BACKGROUND_INSTANCE: u16 = u16::MAX;
pub const BACKGROUND_UV: [f32; 2] = [-1.0, -1.0];
pub const BACKGROUND_NORMAL: [f32; 3] = [0.0, 0.0, 0.0];
/// Depth slack for keypoint occlusion, meters.
pub const EPS_OCC: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            width: 800,
            height: 800,
            fov_y: 60.0,
            position: [0.0, 1.5, 6.0],
            look_at: [0.0, 0.9, 0.0],
            near: 0.05,
            far: 100.0,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be positive".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(Error::InvalidParameter(format!("fov {} outside (0, 180)", self.fov_y)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidParameter("need 0 < near < far".into()));
        }
        let (p, t) = (Vec3::from(self.position), Vec3::from(self.look_at));
        if !((t - p).norm() > 0.0) {
            return Err(Error::InvalidParameter("camera looks at its own position".into()));
        }
        Ok(())
    }

    /// (right, up, forward) unit vectors in world space.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = (Vec3::from(self.look_at) - Vec3::from(self.position)).normalize();
        let mut world_up = Vec3::y();
        if f.cross(&world_up).norm() < 1e-9 {
            world_up = Vec3::z();
        }
        let r = f.cross(&world_up).normalize();
        let u = r.cross(&f);
        (r, u, f)
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        self.height as f64 / 2.0 / (self.fov_y.to_radians() / 2.0).tan()
    }

    /// World point to camera coordinates (x right, y up, z forward depth).
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let (r, u, f) = self.basis();
        let d = p - Vec3::from(self.position);
        Vec3::new(r.dot(&d), u.dot(&d), f.dot(&d))
    }

    /// Camera coordinates to image coordinates. Pixel (row i, col j) has its
    /// center at (x = j, y = i).
    pub fn camera_to_image(&self, c: &Vec3) -> [f64; 2] {
        let f = self.focal();
        [
            self.width as f64 / 2.0 + f * c.x / c.z - 0.5,
            self.height as f64 / 2.0 - f * c.y / c.z - 0.5,
        ]
    }

    /// Image position and depth of a world point in front of the near plane.
    pub fn project(&self, p: &Vec3) -> Option<([f64; 2], f64)> {
        let c = self.to_camera(p);
        (c.z > self.near).then(|| (self.camera_to_image(&c), c.z))
    }

    /// Camera rotated so that +z in camera space is expressed in world space.
    pub fn world_to_camera_rotation(&self) -> nalgebra::Matrix3<f64> {
        let (r, u, f) = self.basis();
        nalgebra::Matrix3::from_rows(&[r.transpose(), u.transpose(), f.transpose()])
    }
}

/// Camera placement on a circle around the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraOrbit {
    /// Elevation range in degrees above the horizon.
    pub elevation: [f64; 2],
    /// Distance range from the target in meters.
    pub distance: [f64; 2],
    pub target_height: f64,
}

impl Default for CameraOrbit {
    fn default() -> Self {
        CameraOrbit {
            elevation: [5.0, 30.0],
            distance: [9.0, 12.0],
            target_height: 0.9,
        }
    }
}

impl CameraOrbit {
    pub fn sample(&self, base: &Camera, center: [f64; 2], rng: &mut impl Rng) -> Camera {
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let el = sample_range(rng, self.elevation).to_radians();
        let d = sample_range(rng, self.distance);
        let target = Vec3::new(center[0], self.target_height, center[1]);
        let pos = target + Vec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos()) * d;
        Camera {
            position: pos.into(),
            look_at: target.into(),
            ..base.clone()
        }
    }
}

fn sample_range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    Flat([u8; 3]),
    /// Row-major RGB image; resampled by nearest neighbour when its size
    /// differs from the frame.
    Image { width: u32, height: u32, pixels: Vec<[u8; 3]> },
}

impl Default for Background {
    fn default() -> Self {
        Background::Flat([128, 128, 128])
    }
}

impl Background {
    fn at(&self, i: usize, j: usize, w: usize, h: usize) -> [u8; 3] {
        match self {
            Background::Flat(c) => *c,
            Background::Image { width, height, pixels } => {
                let (bw, bh) = (*width as usize, *height as usize);
                let y = (i * bh / h).min(bh - 1);
                let x = (j * bw / w).min(bw - 1);
                pixels[y * bw + x]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    OffImage,
    Occluded,
    Visible,
}

impl Visibility {
    /// 0 = off image, 1 = occluded, 2 = visible.
    pub fn code(self) -> u8 {
        match self {
            Visibility::OffImage => 0,
            Visibility::Occluded => 1,
            Visibility::Visible => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Visibility::OffImage),
            1 => Some(Visibility::Occluded),
            2 => Some(Visibility::Visible),
            _ => None,
        }
    }

    /// Labeled in the image (visible or occluded).
    pub fn labeled(self) -> bool {
        self != Visibility::OffImage
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint2 {
    pub x: f64,
    pub y: f64,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMeta {
    /// Index into the figure pool.
    pub figure: usize,
    pub keypoints: [Keypoint2; KEYPOINT_COUNT],
}

/// Per-pixel label stack of one rendered image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFrame {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[u8; 3]>,
    pub depth: Vec<f32>,
    pub part: Vec<u8>,
    pub uv: Vec<[f32; 2]>,
    /// World-space unit normals.
    pub normal: Vec<[f32; 3]>,
    pub instance: Vec<u16>,
    pub instances: Vec<InstanceMeta>,
    pub camera: Camera,
}

impl LabelFrame {
    pub fn background(cam: &Camera, bg: &Background) -> Self {
        let (w, h) = (cam.width as usize, cam.height as usize);
        let n = w * h;
        let color = (0..n).map(|k| bg.at(k / w, k % w, w, h)).collect();
        LabelFrame {
            width: w,
            height: h,
            color,
            depth: vec![f32::INFINITY; n],
            part: vec![BACKGROUND_PART; n],
            uv: vec![BACKGROUND_UV; n],
            normal: vec![BACKGROUND_NORMAL; n],
            instance: vec![BACKGROUND_INSTANCE; n],
            instances: Vec::new(),
            camera: cam.clone(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Tight pixel box [x0, y0, x1, y1] (inclusive) of an instance.
    pub fn instance_box(&self, id: u16) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for (k, &v) in self.instance.iter().enumerate() {
            if v == id {
                let (i, j) = (k / self.width, k % self.width);
                b = Some(match b {
                    None => [j, i, j, i],
                    Some([x0, y0, x1, y1]) => [x0.min(j), y0.min(i), x1.max(j), y1.max(i)],
                });
            }
        }
        b
    }

    pub fn instance_area(&self, id: u16) -> usize {
        self.instance.iter().filter(|&&v| v == id).count()
    }
}

/// One figure to draw.
#[derive(Debug, Clone, Copy)]
pub struct RenderItem<'a> {
    pub posed: &'a PosedFigure,
    pub colors: &'a [[f64; 3]],
    pub figure: usize,
}

#[derive(Clone, Copy)]
struct Vert {
    /// Camera-space position.
    c: Vec3,
    uv: Uv,
    n: Vec3,
}

struct ScreenTri {
    xy: [[f64; 2]; 3],
    inv_z: [f64; 3],
    uv: [Uv; 3],
    n: [Vec3; 3],
    face_n: Vec3,
    part: u8,
    instance: u16,
    color: [f64; 3],
    bbox: [i64; 4],
}

fn lerp_vert(a: &Vert, b: &Vert, t: f64) -> Vert {
    Vert {
        c: a.c + (b.c - a.c) * t,
        uv: a.uv + (b.uv - a.uv) * t,
        n: a.n + (b.n - a.n) * t,
    }
}

/// Clips a polygon against z > near.
fn clip_near(poly: &[Vert], near: f64) -> Vec<Vert> {
    let mut out = Vec::with_capacity(4);
    for k in 0..poly.len() {
        let a = &poly[k];
        let b = &poly[(k + 1) % poly.len()];
        let (ina, inb) = (a.c.z > near, b.c.z > near);
        if ina {
            out.push(*a);
        }
        if ina != inb {
            let t = (near - a.c.z) / (b.c.z - a.c.z);
            let mut v = lerp_vert(a, b, t);
            v.c.z = near.max(v.c.z);
            out.push(v);
        }
    }
    out
}

fn setup(items: &[RenderItem], cam: &Camera) -> Result<Vec<ScreenTri>> {
    let rot = cam.world_to_camera_rotation();
    let eye = Vec3::from(cam.position);
    let (w, h) = (cam.width as i64, cam.height as i64);
    let mut tris = Vec::new();
    for (inst, item) in items.iter().enumerate() {
        let mesh = &item.posed.mesh;
        let uv = mesh.uv.as_ref().ok_or(Error::MissingLabels("uv"))?;
        if item.posed.normals.len() != mesh.vertices.len() {
            return Err(Error::ShapeMismatch("normals do not match vertices".into()));
        }
        let cam_pos: Vec<Vec3> = mesh.vertices.iter().map(|p| rot * (p - eye)).collect();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|v| mesh.vertices[v]);
            let face_w = (b - a).cross(&(c - a));
            // Back faces and edge-on faces.
            if face_w.dot(&(a - eye)) >= 0.0 {
                continue;
            }
            let part = mesh.part_of_triangle[t];
            let poly: Vec<Vert> = tri
                .iter()
                .map(|&v| Vert {
                    c: cam_pos[v],
                    uv: uv[v],
                    n: item.posed.normals[v],
                })
                .collect();
            let poly = if poly.iter().all(|v| v.c.z > cam.near) {
                poly
            } else {
                clip_near(&poly, cam.near)
            };
            if poly.len() < 3 {
                continue;
            }
            let face_n = face_w.normalize();
            let color = item.colors.get(part).copied().unwrap_or([0.5; 3]);
            for k in 1..poly.len() - 1 {
                let vs = [poly[0], poly[k], poly[k + 1]];
                let xy = vs.map(|v| cam.camera_to_image(&v.c));
                let min_x = xy.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).ceil() as i64;
                let max_x = xy.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).floor() as i64;
                let min_y = xy.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).ceil() as i64;
                let max_y = xy.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).floor() as i64;
                let bbox = [min_x.max(0), min_y.max(0), max_x.min(w - 1), max_y.min(h - 1)];
                if bbox[0] > bbox[2] || bbox[1] > bbox[3] {
                    continue;
                }
                tris.push(ScreenTri {
                    xy,
                    inv_z: vs.map(|v| 1.0 / v.c.z),
                    uv: vs.map(|v| v.uv),
                    n: vs.map(|v| v.n),
                    face_n,
                    part: part as u8,
                    instance: inst as u16,
                    color,
                    bbox,
                });
            }
        }
    }
    Ok(tris)
}

/// Top-left fill rule on edge a->b of a triangle in image coordinates
/// (y down) with positive orientation.
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

const LIGHTS: [([f64; 3], f64); 2] = [([0.4, 0.8, 0.5], 0.75), ([-0.6, 0.3, -0.4], 0.35)];
const AMBIENT: f64 = 0.3;

fn shade(color: [f64; 3], n: &Vec3) -> [u8; 3] {
    let mut k = AMBIENT;
    for (d, i) in LIGHTS {
        k += i * n.dot(&Vec3::from(d).normalize()).max(0.0);
    }
    color.map(|c| ((c * k).clamp(0.0, 1.0) * 255.0).round() as u8)
}

struct Band {
    row0: usize,
    rows: usize,
    depth: Vec<f32>,
    zbuf: Vec<f64>,
    part: Vec<u8>,
    uv: Vec<[f32; 2]>,
    normal: Vec<[f32; 3]>,
    instance: Vec<u16>,
    color: Vec<[u8; 3]>,
}

fn raster_band(tris: &[ScreenTri], row0: usize, rows: usize, width: usize, bg: &LabelFrame) -> Band {
    let n = rows * width;
    let off = row0 * width;
    let mut band = Band {
        row0,
        rows,
        depth: bg.depth[off..off + n].to_vec(),
        zbuf: vec![f64::INFINITY; n],
        part: bg.part[off..off + n].to_vec(),
        uv: bg.uv[off..off + n].to_vec(),
        normal: bg.normal[off..off + n].to_vec(),
        instance: bg.instance[off..off + n].to_vec(),
        color: bg.color[off..off + n].to_vec(),
    };
    let (r_lo, r_hi) = (row0 as i64, (row0 + rows) as i64 - 1);
    let cam = &bg.camera;
    let rot_t = cam.world_to_camera_rotation().transpose();
    let (fl, cx, cy) = (cam.focal(), cam.width as f64 / 2.0 - 0.5, cam.height as f64 / 2.0 - 0.5);
    for t in tris {
        let y0 = t.bbox[1].max(r_lo);
        let y1 = t.bbox[3].min(r_hi);
        if y0 > y1 {
            continue;
        }
        let [p0, mut p1, mut p2] = t.xy;
        let mut idx = [0usize, 1, 2];
        let mut area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            std::mem::swap(&mut p1, &mut p2);
            idx.swap(1, 2);
            area = -area;
        }
        let edges = [(p1, p2), (p2, p0), (p0, p1)];
        let tl = edges.map(|(a, b)| is_top_left(a, b));
        for y in y0..=y1 {
            for x in t.bbox[0]..=t.bbox[2] {
                let q = [x as f64, y as f64];
                let mut lam = [0.0; 3];
                let mut inside = true;
                for (e, &(a, b)) in edges.iter().enumerate() {
                    let w = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
                    if w < 0.0 || (w == 0.0 && !tl[e]) {
                        inside = false;
                        break;
                    }
                    lam[e] = w / area;
                }
                if !inside {
                    continue;
                }
                // Perspective-correct weights.
                let b = [0, 1, 2].map(|k| lam[k] * t.inv_z[idx[k]]);
                let s = b[0] + b[1] + b[2];
                let z = 1.0 / s;
                let k = (y as usize - row0) * width + x as usize;
                if !(z < band.zbuf[k]) {
                    continue;
                }
                let wts = b.map(|v| v / s);
                let mut uv = Uv::zeros();
                let mut nrm = Vec3::zeros();
                for k in 0..3 {
                    uv += t.uv[idx[k]] * wts[k];
                    nrm += t.n[idx[k]] * wts[k];
                }
                let len = nrm.norm();
                let mut nrm = if len > 1e-12 { nrm / len } else { t.face_n };
                // World-space ray through the pixel center.
                let view = rot_t * Vec3::new((q[0] - cx) / fl, (cy - q[1]) / fl, 1.0);
                if nrm.dot(&view) >= 0.0 {
                    nrm = t.face_n;
                }
                band.zbuf[k] = z;
                band.depth[k] = z as f32;
                band.part[k] = t.part;
                band.uv[k] = [uv.x.clamp(0.0, 1.0) as f32, uv.y.clamp(0.0, 1.0) as f32];
                band.normal[k] = renormalize_f32(&nrm);
                band.instance[k] = t.instance;
                band.color[k] = shade(t.color, &nrm);
            }
        }
    }
    band
}

/// Rounds a unit vector to f32 and renormalizes in f32.
fn renormalize_f32(n: &Vec3) -> [f32; 3] {
    let v = [n.x as f32, n.y as f32, n.z as f32];
    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / l, v[1] / l, v[2] / l]
}

/// Rows per parallel band.
const BAND_ROWS: usize = 16;

/// Renders figures into a label frame. Instance ids follow the order of
/// `items`.
pub fn rasterize(items: &[RenderItem], cam: &Camera, bg: &Background) -> Result<LabelFrame> {
    rasterize_with_bands(items, cam, bg, BAND_ROWS)
}

pub fn rasterize_with_bands(items: &[RenderItem], cam: &Camera, bg: &Background, band_rows: usize) -> Result<LabelFrame> {
    cam.validate()?;
    if items.len() >= BACKGROUND_INSTANCE as usize {
        return Err(Error::InvalidParameter("too many instances".into()));
    }
    let mut frame = LabelFrame::background(cam, bg);
    let tris = setup(items, cam)?;
    let (w, h) = (frame.width, frame.height);
    let band_rows = band_rows.max(1);
    let starts: Vec<usize> = (0..h).step_by(band_rows).collect();
    let bands: Vec<Band> = starts
        .par_iter()
        .map(|&r0| raster_band(&tris, r0, band_rows.min(h - r0), w, &frame))
        .collect();
    for b in bands {
        let off = b.row0 * w;
        let n = b.rows * w;
        frame.depth[off..off + n].copy_from_slice(&b.depth);
        frame.part[off..off + n].copy_from_slice(&b.part);
        frame.uv[off..off + n].copy_from_slice(&b.uv);
        frame.normal[off..off + n].copy_from_slice(&b.normal);
        frame.instance[off..off + n].copy_from_slice(&b.instance);
        frame.color[off..off + n].copy_from_slice(&b.color);
    }
    for item in items {
        let keypoints = project_keypoints(&item.posed.keypoints, &item.posed.keypoint_radius, cam, &frame.depth);
        frame.instances.push(InstanceMeta {
            figure: item.figure,
            keypoints,
        });
    }
    Ok(frame)
}

/// Projects keypoints and classifies visibility against a depth map.
/// `slack[k]` is added to the occlusion tolerance of keypoint `k`.
pub fn project_keypoints(
    keypoints: &[Vec3; KEYPOINT_COUNT],
    slack: &[f64; KEYPOINT_COUNT],
    cam: &Camera,
    depth: &[f32],
) -> [Keypoint2; KEYPOINT_COUNT] {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut out = [Keypoint2 {
        x: 0.0,
        y: 0.0,
        visibility: Visibility::OffImage,
    }; KEYPOINT_COUNT];
    for (k, p) in keypoints.iter().enumerate() {
        let c = cam.to_camera(p);
        if !(c.z > cam.near && c.z < cam.far) {
            continue;
        }
        let [x, y] = cam.camera_to_image(&c);
        out[k].x = x;
        out[k].y = y;
        let (j, i) = ((x + 0.5).floor(), (y + 0.5).floor());
        if !(j >= 0.0 && i >= 0.0 && (j as usize) < w && (i as usize) < h) {
            continue;
        }
        let d = depth[i as usize * w + j as usize] as f64;
        out[k].visibility = if c.z - slack[k] > d + EPS_OCC {
            Visibility::Occluded
        } else {
            Visibility::Visible
        };
    }
    out
}

// ---------------------------------------------------------------------------
// On-disk format

pub const PLANE_MAGIC: [u8; 4] = *b"DSLP";
pub const PLANE_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum DType {
    U8 = 1,
    U16 = 2,
    F32 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::F32 => 4,
        }
    }

    fn from_code(c: u16) -> Result<Self> {
        match c {
            1 => Ok(DType::U8),
            2 => Ok(DType::U16),
            3 => Ok(DType::F32),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneHeader {
    pub dtype: DType,
    pub channels: u16,
    pub height: u32,
    pub width: u32,
}

impl PlaneHeader {
    pub fn to_bytes(&self) -> [u8; PLANE_HEADER_LEN] {
        let mut b = [0u8; PLANE_HEADER_LEN];
        b[0..4].copy_from_slice(&PLANE_MAGIC);
        b[4..6].copy_from_slice(&(self.dtype as u16).to_le_bytes());
        b[6..8].copy_from_slice(&self.channels.to_le_bytes());
        b[8..12].copy_from_slice(&self.height.to_le_bytes());
        b[12..16].copy_from_slice(&self.width.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < PLANE_HEADER_LEN || b[0..4] != PLANE_MAGIC {
            return Err(Error::Format("missing label plane magic".into()));
        }
        let u16_at = |k: usize| u16::from_le_bytes([b[k], b[k + 1]]);
        let u32_at = |k: usize| u32::from_le_bytes([b[k], b[k + 1], b[k + 2], b[k + 3]]);
        Ok(PlaneHeader {
            dtype: DType::from_code(u16_at(4))?,
            channels: u16_at(6),
            height: u32_at(8),
            width: u32_at(12),
        })
    }

    pub fn payload_len(&self) -> usize {
        self.dtype.size() * self.channels as usize * self.height as usize * self.width as usize
    }
}

/// Writes one plane: header then little-endian payload.
pub fn write_plane(path: &Path, header: PlaneHeader, payload: &[u8]) -> Result<()> {
    if payload.len() != header.payload_len() {
        return Err(Error::ShapeMismatch(format!(
            "plane payload {} bytes, header says {}",
            payload.len(),
            header.payload_len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::file(path, e))?);
    f.write_all(&header.to_bytes()).map_err(|e| Error::file(path, e))?;
    f.write_all(payload).map_err(|e| Error::file(path, e))?;
    f.flush().map_err(|e| Error::file(path, e))
}

pub fn read_plane(path: &Path) -> Result<(PlaneHeader, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    let header = PlaneHeader::from_bytes(&bytes)?;
    let payload = bytes.split_off(PLANE_HEADER_LEN);
    if payload.len() != header.payload_len() {
        return Err(Error::Format(format!("{}: truncated plane", path.display())));
    }
    Ok((header, payload))
}

fn f32_bytes<'a>(v: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    v.flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn expect_plane(path: &Path, dtype: DType, channels: u16, w: usize, h: usize) -> Result<Vec<u8>> {
    let (hd, payload) = read_plane(path)?;
    if hd.dtype != dtype || hd.channels != channels || hd.width as usize != w || hd.height as usize != h {
        return Err(Error::Format(format!("{}: unexpected header {hd:?}", path.display())));
    }
    Ok(payload)
}

pub fn write_instance_plane(path: &Path, width: usize, height: usize, instance: &[u16]) -> Result<()> {
    let header = PlaneHeader {
        dtype: DType::U16,
        channels: 1,
        height: height as u32,
        width: width as u32,
    };
    let payload: Vec<u8> = instance.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_plane(path, header, &payload)
}

pub fn read_instance_plane(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (hd, payload) = read_plane(path)?;
    if hd.dtype != DType::U16 || hd.channels != 1 {
        return Err(Error::Format(format!("{}: not an instance plane", path.display())));
    }
    let v = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok((hd.width as usize, hd.height as usize, v))
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    width: usize,
    height: usize,
    camera: Camera,
    instances: Vec<AnnotationInstance>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationInstance {
    id: u16,
    figure: usize,
    /// [x0, y0, x1, y1], inclusive pixel bounds; absent when fully hidden.
    bbox: Option<[usize; 4]>,
    area: usize,
    /// 17 rows of [x, y, visibility code].
    keypoints: Vec<[f64; 3]>,
}

/// Keypoints and boxes of a frame, as stored in `annotations.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub width: usize,
    pub height: usize,
    pub camera: Camera,
    pub instances: Vec<InstanceMeta>,
}

pub const COLOR_FILE: &str = "color.png";
pub const ANNOTATION_FILE: &str = "annotations.json";
pub const INSTANCE_FILE: &str = "instance.bin";

fn encode_annotations(frame: &LabelFrame) -> Result<String> {
    let instances = frame
        .instances
        .iter()
        .enumerate()
        .map(|(id, m)| AnnotationInstance {
            id: id as u16,
            figure: m.figure,
            bbox: frame.instance_box(id as u16),
            area: frame.instance_area(id as u16),
            keypoints: m.keypoints.iter().map(|k| [k.x, k.y, k.visibility.code() as f64]).collect(),
        })
        .collect();
    let file = AnnotationFile {
        width: frame.width,
        height: frame.height,
        camera: frame.camera.clone(),
        instances,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text)?;
    let mut instances = Vec::with_capacity(file.instances.len());
    for inst in file.instances {
        if inst.keypoints.len() != KEYPOINT_COUNT {
            return Err(Error::Format(format!("instance {} has {} keypoints", inst.id, inst.keypoints.len())));
        }
        let mut kps = [Keypoint2 {
            x: 0.0,
            y: 0.0,
            visibility: Visibility::OffImage,
        }; KEYPOINT_COUNT];
        for (k, row) in inst.keypoints.iter().enumerate() {
            let vis = Visibility::from_code(row[2] as u8)
                .filter(|_| row[2].fract() == 0.0)
                .ok_or_else(|| Error::Format(format!("bad visibility {}", row[2])))?;
            kps[k] = Keypoint2 {
                x: row[0],
                y: row[1],
                visibility: vis,
            };
        }
        instances.push(InstanceMeta {
            figure: inst.figure,
            keypoints: kps,
        });
    }
    Ok(Annotations {
        width: file.width,
        height: file.height,
        camera: file.camera,
        instances,
    })
}

pub fn write_color_png(path: &Path, width: usize, height: usize, color: &[[u8; 3]]) -> Result<()> {
    let raw: Vec<u8> = color.iter().flatten().copied().collect();
    image::save_buffer_with_format(path, &raw, width as u32, height as u32, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_color_png(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels().map(|p| p.0).collect();
    Ok((w, h, px))
}

/// Writes color, label planes and annotations into `dir`.
pub fn write_frame(frame: &LabelFrame, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let (w, h) = (frame.width, frame.height);
    let hd = |dtype, channels| PlaneHeader {
        dtype,
        channels,
        height: h as u32,
        width: w as u32,
    };
    write_color_png(&dir.join(COLOR_FILE), w, h, &frame.color)?;
    write_plane(&dir.join("depth.bin"), hd(DType::F32, 1), &f32_bytes(frame.depth.iter()))?;
    write_plane(&dir.join("part.bin"), hd(DType::U8, 1), &frame.part)?;
    write_plane(&dir.join("uv.bin"), hd(DType::F32, 2), &f32_bytes(frame.uv.iter().flatten()))?;
    write_plane(&dir.join("normal.bin"), hd(DType::F32, 3), &f32_bytes(frame.normal.iter().flatten()))?;
    write_instance_plane(&dir.join(INSTANCE_FILE), w, h, &frame.instance)?;
    let ann = dir.join(ANNOTATION_FILE);
    std::fs::write(&ann, encode_annotations(frame)?).map_err(|e| Error::file(&ann, e))
}

/// Writes only the 2D label files: color, instance plane and annotations.
pub fn write_2d_frame(frame: &LabelFrame, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    write_color_png(&dir.join(COLOR_FILE), frame.width, frame.height, &frame.color)?;
    write_instance_plane(&dir.join(INSTANCE_FILE), frame.width, frame.height, &frame.instance)?;
    let ann = dir.join(ANNOTATION_FILE);
    std::fs::write(&ann, encode_annotations(frame)?).map_err(|e| Error::file(&ann, e))
}

pub fn read_frame(dir: &Path) -> Result<LabelFrame> {
    let ann = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let (w, h) = (ann.width, ann.height);
    let (cw, ch, color) = read_color_png(&dir.join(COLOR_FILE))?;
    if (cw, ch) != (w, h) {
        return Err(Error::Format("color image size differs from annotations".into()));
    }
    let depth = bytes_f32(&expect_plane(&dir.join("depth.bin"), DType::F32, 1, w, h)?);
    let part = expect_plane(&dir.join("part.bin"), DType::U8, 1, w, h)?;
    let uv = bytes_f32(&expect_plane(&dir.join("uv.bin"), DType::F32, 2, w, h)?)
        .chunks_exact(2)
        .map(|c| [c[0], c[1]])
        .collect();
    let normal = bytes_f32(&expect_plane(&dir.join("normal.bin"), DType::F32, 3, w, h)?)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let (iw, ih, instance) = read_instance_plane(&dir.join(INSTANCE_FILE))?;
    if (iw, ih) != (w, h) {
        return Err(Error::Format("instance plane size differs from annotations".into()));
    }
    Ok(LabelFrame {
        width: w,
        height: h,
        color,
        depth,
        part,
        uv,
        normal,
        instance,
        instances: ann.instances,
        camera: ann.camera,
    })
}
