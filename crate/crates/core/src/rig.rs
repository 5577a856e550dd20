//! Procedural rigged humanoids, linear blend skinning and scene layout.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{PartMesh, Vec3, DEFAULT_PART_COUNT};
use crate::uv::{transfer_uv, LandmarkCorrespondence, ReferenceLandmark, ReferenceTable, SolverOptions};

pub const KEYPOINT_COUNT: usize = 17;

/// Keypoint names in the standard 17-point order.
pub const KEYPOINT_NAMES: [&str; KEYPOINT_COUNT] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Left/right keypoint index pairs, used when mirroring.
pub const KEYPOINT_FLIP: [(usize, usize); 8] = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)];

/// Body part names in label order.
pub const PART_NAMES: [&str; DEFAULT_PART_COUNT] = [
    "torso_back",
    "torso_front",
    "right_hand",
    "left_hand",
    "left_foot",
    "right_foot",
    "upper_leg_right_back",
    "upper_leg_left_back",
    "upper_leg_right_front",
    "upper_leg_left_front",
    "lower_leg_right_back",
    "lower_leg_left_back",
    "lower_leg_right_front",
    "lower_leg_left_front",
    "upper_arm_left_back",
    "upper_arm_right_back",
    "upper_arm_left_front",
    "upper_arm_right_front",
    "lower_arm_left_back",
    "lower_arm_right_back",
    "lower_arm_left_front",
    "lower_arm_right_front",
    "head_right",
    "head_left",
];

pub fn part_index(name: &str) -> Option<usize> {
    PART_NAMES.iter().position(|&n| n == name)
}

/// Joint names of the generated skeleton, parents before children.
pub const JOINT_NAMES: [&str; 15] = [
    "pelvis",
    "chest",
    "neck",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
];

const PELVIS: usize = 0;
const CHEST: usize = 1;
const NECK: usize = 2;
const L_SHOULDER: usize = 3;
const L_ELBOW: usize = 4;
const L_WRIST: usize = 5;
const R_SHOULDER: usize = 6;
const R_ELBOW: usize = 7;
const R_WRIST: usize = 8;
const L_HIP: usize = 9;
const L_KNEE: usize = 10;
const L_ANKLE: usize = 11;
const R_HIP: usize = 12;
const R_KNEE: usize = 13;
const R_ANKLE: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest rotation relative to the parent, as a rotation vector.
    pub rest_rotation: [f64; 3],
    /// Rest translation relative to the parent, in the parent frame.
    pub rest_translation: [f64; 3],
}

impl Joint {
    fn rest_local(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(Vec3::from(self.rest_translation)),
            UnitQuaternion::from_scaled_axis(Vec3::from(self.rest_rotation)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointBinding {
    pub name: String,
    pub joint: usize,
    /// Offset in the joint frame.
    pub offset: [f64; 3],
    /// Body thickness around the keypoint. Occlusion tests allow this much
    /// extra depth so that joint centers inside a visible limb count as
    /// visible.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
    pub keypoints: Vec<KeypointBinding>,
}

impl Skeleton {
    /// Checks for a single root, parents listed before children and the
    /// full keypoint set.
    pub fn validate(&self) -> Result<()> {
        let roots = self.joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::SkeletonMismatch(format!("{roots} root joints")));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(Error::SkeletonMismatch(format!(
                        "joint {} has parent {p} not listed before it",
                        j.name
                    )));
                }
            }
        }
        if self.keypoints.len() != KEYPOINT_COUNT {
            return Err(Error::SkeletonMismatch(format!("{} keypoints", self.keypoints.len())));
        }
        for (b, name) in self.keypoints.iter().zip(KEYPOINT_NAMES) {
            if b.name != name {
                return Err(Error::SkeletonMismatch(format!("keypoint {:?} where {name:?} expected", b.name)));
            }
            if b.joint >= self.joints.len() {
                return Err(Error::IndexOutOfRange {
                    what: "joint",
                    index: b.joint,
                    len: self.joints.len(),
                });
            }
        }
        Ok(())
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// World transforms of the rest pose.
    pub fn rest_world(&self) -> Vec<Isometry3<f64>> {
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let local = j.rest_local();
            let w = match j.parent {
                Some(p) => out[p] * local,
                None => local,
            };
            out.push(w);
        }
        out
    }

    /// World transforms for a pose. The root is additionally yawed about the
    /// vertical axis and moved on the ground plane.
    pub fn posed_world(&self, pose: &PoseSample) -> Result<Vec<Isometry3<f64>>> {
        if pose.rotations.len() != self.joints.len() {
            return Err(Error::SkeletonMismatch(format!(
                "pose has {} joints, skeleton has {}",
                pose.rotations.len(),
                self.joints.len()
            )));
        }
        let global = pose.global_transform();
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.joints.len());
        for (j, r) in self.joints.iter().zip(&pose.rotations) {
            let local = j.rest_local() * UnitQuaternion::from_scaled_axis(Vec3::from(*r));
            let w = match j.parent {
                Some(p) => out[p] * local,
                None => global * local,
            };
            out.push(w);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    /// Local rotation per joint as a rotation vector (radians).
    pub rotations: Vec<[f64; 3]>,
    /// Rotation about +y applied at the root.
    pub yaw: f64,
    /// Ground-plane (x, z) offset of the root.
    pub position: [f64; 2],
}

impl PoseSample {
    pub fn identity(joints: usize) -> Self {
        PoseSample {
            rotations: vec![[0.0; 3]; joints],
            yaw: 0.0,
            position: [0.0, 0.0],
        }
    }

    pub fn global_transform(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(self.position[0], 0.0, self.position[1]),
            UnitQuaternion::from_axis_angle(&Vec3::y_axis(), self.yaw),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedFigure {
    pub mesh: PartMesh,
    pub skeleton: Skeleton,
    /// Sparse (joint, weight) rows sorted by joint.
    pub skin_weights: Vec<Vec<(usize, f64)>>,
    pub base_hue: f64,
    /// Flat RGB color per part, components in [0,1].
    pub part_colors: Vec<[f64; 3]>,
}

impl SkinnedFigure {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        if self.skin_weights.len() != self.mesh.vertices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight rows for {} vertices",
                self.skin_weights.len(),
                self.mesh.vertices.len()
            )));
        }
        for (v, row) in self.skin_weights.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, w) in row {
                if j >= self.skeleton.joints.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "joint",
                        index: j,
                        len: self.skeleton.joints.len(),
                    });
                }
                if !(w >= 0.0) {
                    return Err(Error::InvalidParameter(format!("negative skin weight at vertex {v}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter(format!("skin weights of vertex {v} sum to {sum}")));
            }
        }
        if self.part_colors.len() != self.mesh.part_count {
            return Err(Error::ShapeMismatch(format!(
                "{} part colors for {} parts",
                self.part_colors.len(),
                self.mesh.part_count
            )));
        }
        Ok(())
    }
}

/// Body proportions. Lengths are relative to a 1.75 m reference body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanoidParams {
    /// Standing height in meters.
    pub height: f64,
    pub girth: f64,
    pub shoulder_width: f64,
    pub leg_ratio: f64,
    pub arm_ratio: f64,
    pub tessellation: u32,
}

pub const MIN_TESSELLATION: u32 = 1;

impl Default for HumanoidParams {
    fn default() -> Self {
        HumanoidParams {
            height: 1.75,
            girth: 1.0,
            shoulder_width: 1.0,
            leg_ratio: 1.0,
            arm_ratio: 1.0,
            tessellation: 2,
        }
    }
}

impl HumanoidParams {
    /// Random proportions within a plausible adult range.
    pub fn sample(rng: &mut impl Rng, tessellation: u32) -> Self {
        HumanoidParams {
            height: rng.gen_range(1.55..1.95),
            girth: rng.gen_range(0.85..1.25),
            shoulder_width: rng.gen_range(0.9..1.12),
            leg_ratio: rng.gen_range(0.92..1.08),
            arm_ratio: rng.gen_range(0.92..1.08),
            tessellation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("height", self.height),
            ("girth", self.girth),
            ("shoulder_width", self.shoulder_width),
            ("leg_ratio", self.leg_ratio),
            ("arm_ratio", self.arm_ratio),
        ];
        for (name, v) in vals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.tessellation < MIN_TESSELLATION {
            return Err(Error::InvalidParameter(format!(
                "tessellation must be at least {MIN_TESSELLATION}"
            )));
        }
        Ok(())
    }
}

/// Piecewise-linear radius profile: (t, rx, ry) knots with t ascending in [0,1].
type Profile = Vec<(f64, f64, f64)>;

fn eval_profile(p: &Profile, t: f64) -> (f64, f64) {
    if t <= p[0].0 {
        return (p[0].1, p[0].2);
    }
    for w in p.windows(2) {
        let (a, b) = (w[0], w[1]);
        if t <= b.0 {
            let s = (t - a.0) / (b.0 - a.0);
            return (a.1 + s * (b.1 - a.1), a.2 + s * (b.2 - a.2));
        }
    }
    let l = p[p.len() - 1];
    (l.1, l.2)
}

#[derive(Clone, Copy)]
enum Sweep {
    /// Angles [0, pi] around the axis; the `front` side.
    Front,
    /// Angles [pi, 2pi].
    Back,
    /// Full closed ring.
    Full,
}

struct Tube {
    start: Vec3,
    end: Vec3,
    /// Direction that angle pi/2 points to.
    front: Vec3,
    profile: Profile,
    rings: usize,
    sweep: Sweep,
    /// Skinning: joint, optional proximal and distal blend partner.
    joint: usize,
    proximal: Option<usize>,
    distal: Option<usize>,
}

const BLEND_BAND: f64 = 0.2;

/// Sorted (joint, weight) row for parameter t along a tube.
fn tube_weights(tube: &Tube, t: f64) -> Vec<(usize, f64)> {
    let mut row = vec![(tube.joint, 1.0)];
    if let Some(p) = tube.proximal {
        if t < BLEND_BAND {
            let a = 0.5 + 0.5 * t / BLEND_BAND;
            row = vec![(tube.joint, a), (p, 1.0 - a)];
        }
    }
    if let Some(c) = tube.distal {
        if t > 1.0 - BLEND_BAND {
            let a = 0.5 + 0.5 * (1.0 - t) / BLEND_BAND;
            row = vec![(tube.joint, a), (c, 1.0 - a)];
        }
    }
    row.sort_by_key(|&(j, _)| j);
    row
}

fn torso_weights(t: f64) -> Vec<(usize, f64)> {
    const LO: f64 = 0.35;
    const HI: f64 = 0.55;
    if t <= LO {
        vec![(PELVIS, 1.0)]
    } else if t >= HI {
        vec![(CHEST, 1.0)]
    } else {
        let a = (t - LO) / (HI - LO);
        vec![(PELVIS, 1.0 - a), (CHEST, a)]
    }
}

struct Builder {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    parts: Vec<usize>,
    weights: Vec<Vec<(usize, f64)>>,
    /// (name, vertex, design uv)
    landmarks: Vec<(String, usize, [f64; 2])>,
    segs: usize,
}

impl Builder {
    /// Emits one tube as a part. Angles are shared integer multiples of
    /// pi / (2 segs) so that seam vertices of neighboring sheets coincide.
    fn tube(&mut self, part: usize, tube: &Tube, torso: bool) {
        let n_ang = 2 * self.segs;
        let axis_vec = tube.end - tube.start;
        let a = axis_vec.normalize();
        let e2 = (tube.front - a * tube.front.dot(&a)).normalize();
        let e1 = e2.cross(&a);
        let (k0, k1, closed) = match tube.sweep {
            Sweep::Front => (0, self.segs, false),
            Sweep::Back => (self.segs, 2 * self.segs, false),
            Sweep::Full => (0, n_ang - 1, true),
        };
        let cols: Vec<usize> = (k0..=k1).collect();
        let angle = |k: usize| (k % n_ang) as f64 * PI / self.segs as f64;
        let start_pole = eval_profile(&tube.profile, 0.0) == (0.0, 0.0);
        let end_pole = eval_profile(&tube.profile, 1.0) == (0.0, 0.0);
        let weights_at = |t: f64| if torso { torso_weights(t) } else { tube_weights(tube, t) };

        let mut ring_ids: Vec<Vec<usize>> = Vec::with_capacity(tube.rings + 1);
        for i in 0..=tube.rings {
            let t = i as f64 / tube.rings as f64;
            let center = tube.start * (1.0 - t) + tube.end * t;
            let (rx, ry) = eval_profile(&tube.profile, t);
            if (i == 0 && start_pole) || (i == tube.rings && end_pole) {
                let id = self.vertices.len();
                self.vertices.push(center);
                self.weights.push(weights_at(t));
                ring_ids.push(vec![id; cols.len()]);
                continue;
            }
            let mut ids = Vec::with_capacity(cols.len());
            for &k in &cols {
                let th = angle(k);
                let p = center + e1 * (rx * th.cos()) + e2 * (ry * th.sin());
                ids.push(self.vertices.len());
                self.vertices.push(p);
                self.weights.push(weights_at(t));
            }
            ring_ids.push(ids);
        }
        let ncol = cols.len();
        let spans = if closed { ncol } else { ncol - 1 };
        for i in 0..tube.rings {
            for j in 0..spans {
                let jn = (j + 1) % ncol;
                let (a0, a1) = (ring_ids[i][j], ring_ids[i][jn]);
                let (b0, b1) = (ring_ids[i + 1][j], ring_ids[i + 1][jn]);
                if a0 != a1 {
                    self.push_tri(part, [a0, a1, b1]);
                }
                if b0 != b1 {
                    self.push_tri(part, [a0, b1, b0]);
                }
            }
        }

        let name = PART_NAMES[part];
        let first = &ring_ids[0];
        let last = &ring_ids[tube.rings];
        match tube.sweep {
            Sweep::Full => {
                // Four points around the open ring at t = 0.
                let q = ncol / 4;
                let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
                for (c, uv) in corners.iter().enumerate() {
                    self.landmarks.push((format!("{name}.{c}"), first[c * q], *uv));
                }
            }
            _ => {
                let mut lm: Vec<(usize, [f64; 2])> = Vec::new();
                if start_pole {
                    lm.push((first[0], [0.5, 0.0]));
                } else {
                    lm.push((first[0], [0.0, 0.0]));
                    lm.push((first[ncol - 1], [1.0, 0.0]));
                }
                if end_pole {
                    lm.push((last[0], [0.5, 1.0]));
                } else {
                    lm.push((last[ncol - 1], [1.0, 1.0]));
                    lm.push((last[0], [0.0, 1.0]));
                }
                for (c, (v, uv)) in lm.into_iter().enumerate() {
                    self.landmarks.push((format!("{name}.{c}"), v, uv));
                }
            }
        }
    }

    fn push_tri(&mut self, part: usize, t: [usize; 3]) {
        self.triangles.push(t);
        self.parts.push(part);
    }
}

struct Layout {
    joints: [Vec3; 15],
    s: f64,
    g: f64,
    hand_len: f64,
    foot_tip: [Vec3; 2],
    head_top: Vec3,
    torso_bottom: Vec3,
}

fn layout(p: &HumanoidParams) -> Layout {
    let s = p.height / 1.75;
    let g = p.girth;
    let ankle_y = 0.085 * s;
    let leg = 0.835 * s * p.leg_ratio;
    let hip_y = ankle_y + leg;
    let knee_y = ankle_y + 0.5 * leg;
    let pelvis_y = hip_y + 0.03 * s;
    let chest_y = pelvis_y + 0.25 * s;
    let shoulder_y = pelvis_y + 0.49 * s;
    let neck_y = pelvis_y + 0.55 * s;
    let hip_x = 0.09 * s * g.sqrt();
    let sh_x = 0.185 * s * p.shoulder_width;
    let upper = 0.29 * s * p.arm_ratio;
    let fore = 0.26 * s * p.arm_ratio;
    let tilt = 18f64.to_radians();
    let dir = |side: f64| Vec3::new(side * tilt.sin(), -tilt.cos(), 0.0);
    let l_sh = Vec3::new(sh_x, shoulder_y, 0.0);
    let r_sh = Vec3::new(-sh_x, shoulder_y, 0.0);
    let joints = [
        Vec3::new(0.0, pelvis_y, 0.0),
        Vec3::new(0.0, chest_y, 0.0),
        Vec3::new(0.0, neck_y, 0.0),
        l_sh,
        l_sh + dir(1.0) * upper,
        l_sh + dir(1.0) * (upper + fore),
        r_sh,
        r_sh + dir(-1.0) * upper,
        r_sh + dir(-1.0) * (upper + fore),
        Vec3::new(hip_x, hip_y, 0.0),
        Vec3::new(hip_x, knee_y, 0.0),
        Vec3::new(hip_x, ankle_y, 0.0),
        Vec3::new(-hip_x, hip_y, 0.0),
        Vec3::new(-hip_x, knee_y, 0.0),
        Vec3::new(-hip_x, ankle_y, 0.0),
    ];
    let foot = |x: f64| Vec3::new(x, 0.035 * s, 0.17 * s);
    Layout {
        joints,
        s,
        g,
        hand_len: 0.17 * s * p.arm_ratio,
        foot_tip: [foot(hip_x), foot(-hip_x)],
        head_top: Vec3::new(0.0, neck_y + 0.24 * s, 0.0),
        torso_bottom: Vec3::new(0.0, hip_y - 0.08 * s, 0.0),
    }
}

fn skeleton_from(lay: &Layout) -> Skeleton {
    let parents: [Option<usize>; 15] = [
        None,
        Some(PELVIS),
        Some(CHEST),
        Some(CHEST),
        Some(L_SHOULDER),
        Some(L_ELBOW),
        Some(CHEST),
        Some(R_SHOULDER),
        Some(R_ELBOW),
        Some(PELVIS),
        Some(L_HIP),
        Some(L_KNEE),
        Some(PELVIS),
        Some(R_HIP),
        Some(R_KNEE),
    ];
    let joints = JOINT_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let t = match parents[i] {
                Some(p) => lay.joints[i] - lay.joints[p],
                None => lay.joints[i],
            };
            Joint {
                name: name.to_string(),
                parent: parents[i],
                rest_rotation: [0.0; 3],
                rest_translation: [t.x, t.y, t.z],
            }
        })
        .collect();
    let s = lay.s;
    let head = |x: f64, y: f64, z: f64| [x * s, y * s, z * s];
    let zero = [0.0; 3];
    let bindings: [(usize, [f64; 3], f64); KEYPOINT_COUNT] = [
        (NECK, head(0.0, 0.125, 0.1), 0.0),
        (NECK, head(0.033, 0.145, 0.085), 0.0),
        (NECK, head(-0.033, 0.145, 0.085), 0.0),
        (NECK, head(0.092, 0.13, 0.0), 0.0),
        (NECK, head(-0.092, 0.13, 0.0), 0.0),
        (L_SHOULDER, zero, 0.07),
        (R_SHOULDER, zero, 0.07),
        (L_ELBOW, zero, 0.05),
        (R_ELBOW, zero, 0.05),
        (L_WRIST, zero, 0.04),
        (R_WRIST, zero, 0.04),
        (L_HIP, zero, 0.1),
        (R_HIP, zero, 0.1),
        (L_KNEE, zero, 0.07),
        (R_KNEE, zero, 0.07),
        (L_ANKLE, zero, 0.06),
        (R_ANKLE, zero, 0.06),
    ];
    let keypoints = KEYPOINT_NAMES
        .iter()
        .zip(bindings)
        .map(|(name, (joint, offset, radius))| KeypointBinding {
            name: name.to_string(),
            joint,
            offset,
            radius: radius * s * lay.g,
        })
        .collect();
    Skeleton { joints, keypoints }
}

/// Builds the rest mesh, weights and design landmarks.
fn build_geometry(p: &HumanoidParams, lay: &Layout, jitter: &[f64; 6]) -> Builder {
    let l = p.tessellation as usize;
    let mut b = Builder {
        vertices: Vec::new(),
        triangles: Vec::new(),
        parts: Vec::new(),
        weights: Vec::new(),
        landmarks: Vec::new(),
        segs: 4 * l,
    };
    let (s, g) = (lay.s, lay.g);
    let j = &lay.joints;
    let z = Vec3::z();
    let x = Vec3::x();
    let r = |v: f64, k: usize| v * s * g * jitter[k];

    // Torso: bottom pole under the pelvis, open at the neck.
    let sw = (j[L_SHOULDER].x / (0.185 * s)).max(0.5);
    let torso_len = j[NECK].y - lay.torso_bottom.y;
    let at = |y: f64| (y - lay.torso_bottom.y) / torso_len;
    let torso_profile: Profile = vec![
        (0.0, 0.0, 0.0),
        (at(lay.torso_bottom.y + 0.04 * s), r(0.12, 0), r(0.08, 0)),
        (at(j[L_HIP].y), r(0.16, 0), r(0.105, 0)),
        (at(j[PELVIS].y + 0.12 * s), r(0.145, 1), r(0.1, 1)),
        (at(j[L_SHOULDER].y - 0.1 * s), 0.19 * s * sw * g.sqrt(), r(0.11, 2)),
        (at(j[L_SHOULDER].y), 0.2 * s * sw, r(0.095, 2)),
        (at(j[NECK].y - 0.02 * s), r(0.1, 2), r(0.065, 2)),
        (1.0, 0.06 * s, 0.055 * s),
    ];
    for (part, sweep) in [(1, Sweep::Front), (0, Sweep::Back)] {
        let tube = Tube {
            start: lay.torso_bottom,
            end: j[NECK],
            front: z,
            profile: torso_profile.clone(),
            rings: 10 * l,
            sweep,
            joint: PELVIS,
            proximal: None,
            distal: None,
        };
        b.tube(part, &tube, true);
    }

    // Head: split left/right, closed at the top.
    let head_profile: Profile = vec![
        (0.0, 0.055 * s, 0.055 * s),
        (0.22, 0.06 * s, 0.06 * s),
        (0.42, 0.095 * s, 0.1 * s),
        (0.7, 0.095 * s, 0.1 * s),
        (0.9, 0.065 * s, 0.07 * s),
        (1.0, 0.0, 0.0),
    ];
    for (part, sweep) in [(23, Sweep::Front), (22, Sweep::Back)] {
        let tube = Tube {
            start: j[NECK],
            end: lay.head_top,
            front: x,
            profile: head_profile.clone(),
            rings: 6 * l,
            sweep,
            joint: NECK,
            proximal: Some(CHEST),
            distal: None,
        };
        b.tube(part, &tube, false);
    }

    // Legs: (hip, knee, ankle, upper back, upper front, lower back, lower front, foot, foot tip)
    let legs = [
        (L_HIP, L_KNEE, L_ANKLE, 7, 9, 11, 13, 4, lay.foot_tip[0]),
        (R_HIP, R_KNEE, R_ANKLE, 6, 8, 10, 12, 5, lay.foot_tip[1]),
    ];
    for (hip, knee, ankle, ub, uf, lb, lf, foot, tip) in legs {
        let thigh: Profile = vec![(0.0, r(0.085, 3), r(0.085, 3)), (1.0, r(0.058, 3), r(0.058, 3))];
        let shin: Profile = vec![(0.0, r(0.058, 3), r(0.058, 3)), (0.3, r(0.055, 3), r(0.06, 3)), (1.0, 0.04 * s, 0.04 * s)];
        for (part, sweep) in [(uf, Sweep::Front), (ub, Sweep::Back)] {
            let tube = Tube {
                start: j[hip],
                end: j[knee],
                front: z,
                profile: thigh.clone(),
                rings: 6 * l,
                sweep,
                joint: hip,
                proximal: Some(PELVIS),
                distal: Some(knee),
            };
            b.tube(part, &tube, false);
        }
        for (part, sweep) in [(lf, Sweep::Front), (lb, Sweep::Back)] {
            let tube = Tube {
                start: j[knee],
                end: j[ankle],
                front: z,
                profile: shin.clone(),
                rings: 6 * l,
                sweep,
                joint: knee,
                proximal: Some(hip),
                distal: Some(ankle),
            };
            b.tube(part, &tube, false);
        }
        let heel = j[ankle] + Vec3::new(0.0, 0.0, -0.04 * s);
        let tube = Tube {
            start: heel,
            end: tip,
            front: Vec3::y(),
            profile: vec![
                (0.0, 0.04 * s, 0.045 * s),
                (0.35, 0.045 * s, 0.04 * s),
                (0.8, 0.042 * s, 0.025 * s),
                (1.0, 0.0, 0.0),
            ],
            rings: 4 * l,
            sweep: Sweep::Full,
            joint: ankle,
            proximal: Some(knee),
            distal: None,
        };
        b.tube(foot, &tube, false);
    }

    // Arms: (shoulder, elbow, wrist, upper back, upper front, lower back, lower front, hand)
    let arms = [
        (L_SHOULDER, L_ELBOW, L_WRIST, 14, 16, 18, 20, 3),
        (R_SHOULDER, R_ELBOW, R_WRIST, 15, 17, 19, 21, 2),
    ];
    for (sh, el, wr, ub, uf, lb, lf, hand) in arms {
        let upper: Profile = vec![(0.0, r(0.052, 4), r(0.055, 4)), (1.0, r(0.04, 4), r(0.04, 4))];
        let fore: Profile = vec![(0.0, r(0.04, 4), r(0.04, 4)), (0.35, r(0.04, 5), r(0.042, 5)), (1.0, 0.03 * s, 0.03 * s)];
        for (part, sweep) in [(uf, Sweep::Front), (ub, Sweep::Back)] {
            let tube = Tube {
                start: j[sh],
                end: j[el],
                front: z,
                profile: upper.clone(),
                rings: 5 * l,
                sweep,
                joint: sh,
                proximal: Some(CHEST),
                distal: Some(el),
            };
            b.tube(part, &tube, false);
        }
        for (part, sweep) in [(lf, Sweep::Front), (lb, Sweep::Back)] {
            let tube = Tube {
                start: j[el],
                end: j[wr],
                front: z,
                profile: fore.clone(),
                rings: 5 * l,
                sweep,
                joint: el,
                proximal: Some(sh),
                distal: Some(wr),
            };
            b.tube(part, &tube, false);
        }
        let dir = (j[wr] - j[el]).normalize();
        let tube = Tube {
            start: j[wr],
            end: j[wr] + dir * lay.hand_len,
            front: z,
            profile: vec![
                (0.0, 0.03 * s, 0.03 * s),
                (0.4, 0.045 * s, 0.022 * s),
                (0.85, 0.035 * s, 0.018 * s),
                (1.0, 0.0, 0.0),
            ],
            rings: 3 * l,
            sweep: Sweep::Full,
            joint: wr,
            proximal: Some(el),
            distal: None,
        };
        b.tube(hand, &tube, false);
    }
    b
}

/// Hue (radians), saturation, value to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(TAU) / TAU * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// RGB to (hue radians in [0, 2pi), saturation, value).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h / 6.0 * TAU, s, max)
}

/// Rotates a color's hue by `shift` radians, keeping saturation and value.
pub fn rotate_hue(rgb: [f64; 3], shift: f64) -> [f64; 3] {
    let (h, s, v) = rgb_to_hsv(rgb);
    hsv_to_rgb(h + shift, s, v)
}

/// Clothing palette: garment groups share a hue offset from the base hue.
fn part_palette(base_hue: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let skin_tone = rng.gen_range(0.35..0.9);
    let skin = hsv_to_rgb(rng.gen_range(0.3..0.55), rng.gen_range(0.3..0.55), skin_tone);
    let shirt = hsv_to_rgb(base_hue * TAU, rng.gen_range(0.45..0.9), rng.gen_range(0.45..0.95));
    let pants = hsv_to_rgb(
        base_hue * TAU + rng.gen_range(1.5..4.5),
        rng.gen_range(0.3..0.8),
        rng.gen_range(0.25..0.7),
    );
    let shoes = hsv_to_rgb(rng.gen_range(0.0..TAU), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.4));
    let long_sleeves = rng.gen_bool(0.5);
    (0..DEFAULT_PART_COUNT)
        .map(|p| match PART_NAMES[p] {
            n if n.starts_with("torso") || n.starts_with("upper_arm") => shirt,
            n if n.starts_with("lower_arm") => {
                if long_sleeves {
                    shirt
                } else {
                    skin
                }
            }
            n if n.contains("leg") => pants,
            n if n.contains("foot") => shoes,
            _ => skin,
        })
        .collect()
}

/// Landmark names with their design uv, per part.
pub fn design_landmarks(params: &HumanoidParams) -> Result<ReferenceTable> {
    params.validate()?;
    let lay = layout(params);
    let b = build_geometry(params, &lay, &[1.0; 6]);
    let mut rows: Vec<ReferenceLandmark> = b
        .landmarks
        .iter()
        .map(|(name, v, uv)| {
            let part = b.parts[b.triangles.iter().position(|t| t.contains(v)).expect("landmark on a triangle")];
            ReferenceLandmark {
                part,
                name: name.clone(),
                uv: *uv,
            }
        })
        .collect();
    rows.sort_by(|a, c| (a.part, &a.name).cmp(&(c.part, &c.name)));
    Ok(ReferenceTable { rows, warnings: Vec::new() })
}

/// Generates a rigged humanoid with landmarks on part boundaries. The mesh
/// has no uv yet; see [`reference_atlas`] and [`transfer_uv`].
pub fn make_humanoid(params: &HumanoidParams, seed: u64) -> Result<SkinnedFigure> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = [1.0; 6];
    for j in &mut jitter {
        *j = rng.gen_range(0.93..1.07);
    }
    let lay = layout(params);
    let b = build_geometry(params, &lay, &jitter);
    let mut mesh = PartMesh::new(b.vertices, b.triangles, b.parts, DEFAULT_PART_COUNT)?;
    for (name, v, _) in &b.landmarks {
        mesh.add_landmark(name.clone(), *v)?;
    }
    let skeleton = skeleton_from(&lay);
    let base_hue = rng.gen_range(0.0..1.0);
    let part_colors = part_palette(base_hue, &mut rng);
    let mut fig = SkinnedFigure {
        mesh,
        skeleton,
        skin_weights: b.weights,
        base_hue,
        part_colors,
    };
    ground_rest(&mut fig);
    fig.validate()?;
    Ok(fig)
}

/// Shifts the rest mesh and root so that the lowest vertex sits at y = 0.
fn ground_rest(fig: &mut SkinnedFigure) {
    let min_y = fig.mesh.vertices.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
    for v in &mut fig.mesh.vertices {
        v.y -= min_y;
    }
    let root = fig.skeleton.joints.iter_mut().find(|j| j.parent.is_none()).expect("validated root");
    root.rest_translation[1] -= min_y;
}

/// Parameterizes a default humanoid from the design landmark uv. This is the
/// canonical atlas that other figures are transferred from.
pub fn reference_atlas() -> Result<PartMesh> {
    let params = HumanoidParams::default();
    let fig = make_humanoid(&params, 0)?;
    let design = design_landmarks(&params)?;
    let corr = LandmarkCorrespondence::by_name(&design, &fig.mesh, &fig.mesh.landmarks)?;
    transfer_uv(&fig.mesh, &corr, &SolverOptions::default())
}

/// Result of posing a figure.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedFigure {
    pub mesh: PartMesh,
    pub normals: Vec<Vec3>,
    pub keypoints: [Vec3; KEYPOINT_COUNT],
    /// Occlusion slack per keypoint, copied from the bindings.
    pub keypoint_radius: [f64; KEYPOINT_COUNT],
}

/// Linear blend skinning followed by grounding (minimum y moved to 0).
pub fn pose_figure(fig: &SkinnedFigure, pose: &PoseSample) -> Result<PosedFigure> {
    let skel = &fig.skeleton;
    if fig.skin_weights.len() != fig.mesh.vertices.len() {
        return Err(Error::SkeletonMismatch("weight rows do not match vertices".into()));
    }
    let rest = skel.rest_world();
    let posed = skel.posed_world(pose)?;
    let skin: Vec<Isometry3<f64>> = posed.iter().zip(&rest).map(|(p, r)| p * r.inverse()).collect();
    let mut vertices = Vec::with_capacity(fig.mesh.vertices.len());
    for (v, row) in fig.mesh.vertices.iter().zip(&fig.skin_weights) {
        let p = nalgebra::Point3::from(*v);
        let mut acc = Vec3::zeros();
        for &(j, w) in row {
            let m = skin.get(j).ok_or(Error::IndexOutOfRange {
                what: "joint",
                index: j,
                len: skin.len(),
            })?;
            acc += (m * p).coords * w;
        }
        vertices.push(acc);
    }
    let mut keypoints = [Vec3::zeros(); KEYPOINT_COUNT];
    let mut keypoint_radius = [0.0; KEYPOINT_COUNT];
    for (k, b) in skel.keypoints.iter().enumerate().take(KEYPOINT_COUNT) {
        keypoint_radius[k] = b.radius;
        let m = posed.get(b.joint).ok_or(Error::IndexOutOfRange {
            what: "joint",
            index: b.joint,
            len: posed.len(),
        })?;
        keypoints[k] = (m * nalgebra::Point3::from(Vec3::from(b.offset))).coords;
    }
    let min_y = vertices.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
    if min_y.is_finite() {
        for v in &mut vertices {
            v.y -= min_y;
        }
        for k in &mut keypoints {
            k.y -= min_y;
        }
    }
    let mut mesh = fig.mesh.clone();
    mesh.vertices = vertices;
    let normals = mesh.vertex_normals(&mesh.weld_map());
    Ok(PosedFigure {
        mesh,
        normals,
        keypoints,
        keypoint_radius,
    })
}

/// Per-joint rotation-vector limit boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLimits {
    /// (min, max) per joint, per axis.
    pub boxes: Vec<[[f64; 2]; 3]>,
}

pub const DEFAULT_POSE_LIMITS: &str = "\
# joint          x_min x_max   y_min y_max   z_min z_max   (rotation vector, radians)
pelvis           -0.15  0.15   -0.30  0.30   -0.12  0.12
chest            -0.25  0.50   -0.50  0.50   -0.30  0.30
neck             -0.40  0.50   -0.70  0.70   -0.30  0.30
left_shoulder    -2.40  0.80   -0.60  0.60   -0.30  1.90
left_elbow       -2.30  0.00   -0.40  0.40    0.00  0.00
left_wrist       -0.50  0.50   -0.30  0.30   -0.40  0.40
right_shoulder   -2.40  0.80   -0.60  0.60   -1.90  0.30
right_elbow      -2.30  0.00   -0.40  0.40    0.00  0.00
right_wrist      -0.50  0.50   -0.30  0.30   -0.40  0.40
left_hip         -1.80  0.45   -0.40  0.40   -0.15  0.60
left_knee         0.00  2.20    0.00  0.00    0.00  0.00
left_ankle       -0.40  0.40   -0.20  0.20   -0.15  0.15
right_hip        -1.80  0.45   -0.40  0.40   -0.60  0.15
right_knee        0.00  2.20    0.00  0.00    0.00  0.00
right_ankle      -0.40  0.40   -0.20  0.20   -0.15  0.15
";

impl PoseLimits {
    /// Parses `joint x_min x_max y_min y_max z_min z_max` lines. Joints
    /// not listed are fixed at zero rotation.
    pub fn parse(text: &str, skeleton: &Skeleton) -> Result<Self> {
        let mut boxes = vec![[[0.0; 2]; 3]; skeleton.joints.len()];
        let mut seen = vec![false; skeleton.joints.len()];
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: ln + 1, msg };
            let mut it = line.split_whitespace();
            let name = it.next().unwrap_or_default();
            let j = skeleton.joint_index(name).ok_or_else(|| err(format!("unknown joint {name:?}")))?;
            if std::mem::replace(&mut seen[j], true) {
                return Err(err(format!("joint {name:?} listed twice")));
            }
            let vals: Vec<f64> = it
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != 6 {
                return Err(err(format!("expected 6 numbers, found {}", vals.len())));
            }
            for a in 0..3 {
                let (lo, hi) = (vals[2 * a], vals[2 * a + 1]);
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(err(format!("bad range [{lo}, {hi}]")));
                }
                boxes[j][a] = [lo, hi];
            }
        }
        Ok(PoseLimits { boxes })
    }

    pub fn default_for(skeleton: &Skeleton) -> Result<Self> {
        Self::parse(DEFAULT_POSE_LIMITS, skeleton)
    }

    pub fn load(path: &Path, skeleton: &Skeleton) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, skeleton)
    }

    pub fn contains(&self, pose: &PoseSample) -> bool {
        pose.rotations.len() == self.boxes.len()
            && pose
                .rotations
                .iter()
                .zip(&self.boxes)
                .all(|(r, b)| (0..3).all(|a| b[a][0] <= r[a] && r[a] <= b[a][1]))
    }

    pub fn clamp(&self, rotations: &mut [[f64; 3]]) {
        for (r, b) in rotations.iter_mut().zip(&self.boxes) {
            for a in 0..3 {
                r[a] = r[a].clamp(b[a][0], b[a][1]);
            }
        }
    }

    fn uniform(&self, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        self.boxes
            .iter()
            .map(|b| {
                let mut r = [0.0; 3];
                for a in 0..3 {
                    let [lo, hi] = b[a];
                    r[a] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                }
                r
            })
            .collect()
    }
}

/// Hand-authored poses as (joint, rotation vector) lists.
pub const CANONICAL_POSES: [(&str, &[(usize, [f64; 3])]); 8] = [
    ("stand", &[]),
    (
        "walk",
        &[
            (L_HIP, [-0.45, 0.0, 0.0]),
            (L_KNEE, [0.2, 0.0, 0.0]),
            (R_HIP, [0.35, 0.0, 0.0]),
            (R_KNEE, [0.55, 0.0, 0.0]),
            (L_SHOULDER, [0.35, 0.0, 0.0]),
            (R_SHOULDER, [-0.4, 0.0, 0.0]),
            (L_ELBOW, [-0.3, 0.0, 0.0]),
            (R_ELBOW, [-0.5, 0.0, 0.0]),
        ],
    ),
    (
        "sit",
        &[
            (L_HIP, [-1.5, 0.0, 0.1]),
            (R_HIP, [-1.5, 0.0, -0.1]),
            (L_KNEE, [1.5, 0.0, 0.0]),
            (R_KNEE, [1.5, 0.0, 0.0]),
            (L_ELBOW, [-0.8, 0.0, 0.0]),
            (R_ELBOW, [-0.8, 0.0, 0.0]),
        ],
    ),
    (
        "reach",
        &[
            (R_SHOULDER, [-2.2, 0.0, -0.2]),
            (R_ELBOW, [-0.2, 0.0, 0.0]),
            (CHEST, [0.1, 0.3, 0.0]),
            (L_SHOULDER, [0.2, 0.0, 0.2]),
        ],
    ),
    (
        "wave",
        &[
            (L_SHOULDER, [0.0, 0.0, 1.8]),
            (L_ELBOW, [-1.6, 0.0, 0.0]),
            (NECK, [0.0, 0.3, 0.0]),
        ],
    ),
    (
        "squat",
        &[
            (L_HIP, [-1.3, 0.0, 0.25]),
            (R_HIP, [-1.3, 0.0, -0.25]),
            (L_KNEE, [2.0, 0.0, 0.0]),
            (R_KNEE, [2.0, 0.0, 0.0]),
            (CHEST, [0.4, 0.0, 0.0]),
            (L_SHOULDER, [-1.3, 0.0, 0.0]),
            (R_SHOULDER, [-1.3, 0.0, 0.0]),
        ],
    ),
    (
        "lunge",
        &[
            (L_HIP, [-0.9, 0.0, 0.0]),
            (L_KNEE, [0.9, 0.0, 0.0]),
            (R_HIP, [0.4, 0.0, 0.0]),
            (R_KNEE, [0.2, 0.0, 0.0]),
            (L_SHOULDER, [0.0, 0.0, 0.6]),
            (R_SHOULDER, [0.0, 0.0, -0.6]),
        ],
    ),
    (
        "arms_out",
        &[
            (L_SHOULDER, [0.0, 0.0, 1.25]),
            (R_SHOULDER, [0.0, 0.0, -1.25]),
            (NECK, [0.15, 0.0, 0.0]),
        ],
    ),
];

/// Draws poses: a jittered canonical pose with probability
/// `canonical_prob`, otherwise uniform within the limit boxes.
#[derive(Debug, Clone)]
pub struct PoseSampler {
    pub limits: PoseLimits,
    pub canonical_prob: f64,
    pub jitter: f64,
}

impl PoseSampler {
    pub fn new(limits: PoseLimits) -> Self {
        PoseSampler {
            limits,
            canonical_prob: 0.5,
            jitter: 0.15,
        }
    }

    pub fn canonical(&self, name: &str) -> Option<PoseSample> {
        let (_, rots) = CANONICAL_POSES.iter().find(|(n, _)| *n == name)?;
        let mut r = vec![[0.0; 3]; self.limits.boxes.len()];
        for &(j, v) in rots.iter() {
            if j < r.len() {
                r[j] = v;
            }
        }
        self.limits.clamp(&mut r);
        Some(PoseSample {
            rotations: r,
            yaw: 0.0,
            position: [0.0, 0.0],
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> PoseSample {
        let mut rotations = if rng.gen_bool(self.canonical_prob.clamp(0.0, 1.0)) {
            let k = rng.gen_range(0..CANONICAL_POSES.len());
            let mut r = self.canonical(CANONICAL_POSES[k].0).expect("known pose").rotations;
            for v in r.iter_mut() {
                for c in v.iter_mut() {
                    *c += rng.gen_range(-self.jitter..=self.jitter);
                }
            }
            r
        } else {
            self.limits.uniform(rng)
        };
        self.limits.clamp(&mut rotations);
        PoseSample {
            rotations,
            yaw: rng.gen_range(-PI..PI),
            position: [0.0, 0.0],
        }
    }
}

/// Axis-aligned ground rectangle in (x, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundBounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_max: usize,
    pub bounds: GroundBounds,
    /// Placement attempts per figure before giving up.
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_max: 12,
            bounds: GroundBounds {
                min: [-4.0, -4.0],
                max: [4.0, 4.0],
            },
            max_attempts: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub figure: usize,
    pub pose: PoseSample,
    /// Ground-circle radius used for placement.
    pub radius: f64,
}

/// True when every disk lies in the bounds and no two disks touch.
pub fn disks_disjoint(centers: &[[f64; 2]], radii: &[f64], bounds: &GroundBounds) -> bool {
    let inside = centers.iter().zip(radii).all(|(c, &r)| {
        (0..2).all(|a| c[a] - r >= bounds.min[a] && c[a] + r <= bounds.max[a])
    });
    let apart = (0..centers.len()).all(|i| {
        (i + 1..centers.len()).all(|j| {
            let d = ((centers[i][0] - centers[j][0]).powi(2) + (centers[i][1] - centers[j][1]).powi(2)).sqrt();
            d > radii[i] + radii[j]
        })
    });
    inside && apart
}

/// Rejection sampling of disk centers inside `bounds` with pairwise
/// distances above the sum of radii.
pub fn place_non_intersecting(
    radii: &[f64],
    bounds: &GroundBounds,
    rng: &mut impl Rng,
    max_attempts: usize,
) -> Result<Vec<[f64; 2]>> {
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(radii.len());
    for (i, &r) in radii.iter().enumerate() {
        let too_crowded = Error::SceneTooCrowded {
            placed: i,
            requested: radii.len(),
        };
        let lo = [bounds.min[0] + r, bounds.min[1] + r];
        let hi = [bounds.max[0] - r, bounds.max[1] - r];
        if !(r >= 0.0) || lo[0] > hi[0] || lo[1] > hi[1] {
            return Err(too_crowded);
        }
        let mut placed = false;
        for _ in 0..max_attempts {
            let c = [rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1])];
            let ok = centers.iter().zip(radii).all(|(o, &ro)| {
                let d = ((c[0] - o[0]).powi(2) + (c[1] - o[1]).powi(2)).sqrt();
                d > r + ro
            });
            if ok {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(too_crowded);
        }
    }
    Ok(centers)
}

/// Horizontal radius of a posed figure around its root position.
pub fn ground_radius(fig: &SkinnedFigure, pose: &PoseSample) -> Result<f64> {
    let posed = pose_figure(fig, pose)?;
    let [x, z] = pose.position;
    Ok(posed
        .mesh
        .vertices
        .iter()
        .map(|v| ((v.x - x).powi(2) + (v.z - z).powi(2)).sqrt())
        .fold(0.0, f64::max))
}

/// Chooses between 1 and `n_max` figures (uniform), poses and places them
/// without ground-circle overlap.
pub fn sample_scene(
    pool: &[SkinnedFigure],
    sampler: &PoseSampler,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<Vec<Placement>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool("figure"));
    }
    if cfg.n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=cfg.n_max);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let figure = rng.gen_range(0..pool.len());
        let pose = sampler.sample(&mut rng);
        let radius = ground_radius(&pool[figure], &pose)?;
        out.push(Placement { figure, pose, radius });
    }
    let radii: Vec<f64> = out.iter().map(|p| p.radius).collect();
    let centers = place_non_intersecting(&radii, &cfg.bounds, &mut rng, cfg.max_attempts)?;
    for (p, c) in out.iter_mut().zip(centers) {
        p.pose.position = c;
    }
    Ok(out)
}

/// Rotates every part color by `shift` radians of hue.
pub fn shift_hue(fig: &SkinnedFigure, shift: f64) -> SkinnedFigure {
    let mut out = fig.clone();
    for c in &mut out.part_colors {
        *c = rotate_hue(*c, shift);
    }
    out.base_hue = (fig.base_hue + shift / TAU).rem_euclid(1.0);
    if out.base_hue >= 1.0 {
        out.base_hue = 0.0;
    }
    out
}

/// Hue rotation by an angle drawn uniformly from [0, 2pi).
pub fn hue_augment(fig: &SkinnedFigure, seed: u64) -> SkinnedFigure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shift_hue(fig, rng.gen_range(0.0..TAU))
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    skeleton: Skeleton,
    skin_weights: Vec<Vec<(usize, f64)>>,
    base_hue: f64,
    part_colors: Vec<[f64; 3]>,
}

pub fn rig_path(mesh_path: &Path) -> std::path::PathBuf {
    mesh_path.with_extension("rig.json")
}

/// Writes `<stem>.obj`, `<stem>.landmarks` and `<stem>.rig.json`.
pub fn save_figure(fig: &SkinnedFigure, mesh_path: &Path) -> Result<()> {
    crate::mesh::save_mesh(&fig.mesh, mesh_path)?;
    let rig = RigFile {
        skeleton: fig.skeleton.clone(),
        skin_weights: fig.skin_weights.clone(),
        base_hue: fig.base_hue,
        part_colors: fig.part_colors.clone(),
    };
    let path = rig_path(mesh_path);
    let text = serde_json::to_string(&rig)?;
    std::fs::write(&path, text).map_err(|e| Error::file(&path, e))
}

pub fn load_figure(mesh_path: &Path) -> Result<SkinnedFigure> {
    let mesh = crate::mesh::load_mesh(mesh_path)?;
    let path = rig_path(mesh_path);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let rig: RigFile = serde_json::from_str(&text)?;
    let fig = SkinnedFigure {
        mesh,
        skeleton: rig.skeleton,
        skin_weights: rig.skin_weights,
        base_hue: rig.base_hue,
        part_colors: rig.part_colors,
    };
    fig.validate()?;
    Ok(fig)
}

/// Joint name to index map of the generated skeleton.
pub fn joint_map() -> BTreeMap<&'static str, usize> {
    JOINT_NAMES.iter().enumerate().map(|(i, &n)| (n, i)).collect()
}

/// Uv assigned to a figure by transfer from `reference`.
pub fn parameterize(fig: &SkinnedFigure, reference: &PartMesh) -> Result<SkinnedFigure> {
    let table = crate::uv::extract_reference_landmarks(reference)?;
    let corr = LandmarkCorrespondence::by_name(&table, &fig.mesh, &fig.mesh.landmarks)?;
    let mesh = transfer_uv(&fig.mesh, &corr, &SolverOptions::default())?;
    Ok(SkinnedFigure { mesh, ..fig.clone() })
}

/// Rotation about +y by `angle`, applied to a point.
pub fn yaw_point(p: &Vec3, angle: f64) -> Vec3 {
    Rotation3::from_axis_angle(&Vec3::y_axis(), angle) * p
}
