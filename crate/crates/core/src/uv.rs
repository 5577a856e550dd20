//! Transfer of a reference uv atlas onto a new part-labelled mesh.
//!
//! Per part: landmark vertices copy the reference uv, the remaining
//! boundary vertices are interpolated by 3D arc length between landmarks,
//! and interior vertices solve a discrete Laplace equation with the boundary
//! held fixed.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{boundary_loops, part_submesh, HalfEdgeIndex, PartMesh, Uv, Vec3};

/// Solved uv values may leave [0,1] by solver noise up to this amount; they
/// are snapped back. Anything further out is an error.
const UV_RANGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianWeights {
    Cotangent,
    Uniform,
    /// Cotangent weights, falling back to uniform weights when a cotangent
    /// weight is negative enough to break the maximum principle.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub weights: LaplacianWeights,
    /// Relative residual target for conjugate gradient.
    pub tolerance: f64,
    /// Iteration cap as a multiple of the number of unknowns.
    pub max_iter_factor: usize,
    /// Cotangent weights below `-negative_weight_threshold` trigger the
    /// uniform fallback in `Auto` mode.
    pub negative_weight_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            weights: LaplacianWeights::Auto,
            tolerance: 1e-10,
            max_iter_factor: 10,
            negative_weight_threshold: 1e-9,
        }
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    fn from_rows(rows: Vec<BTreeMap<usize, f64>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *o = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.cols[k] == i)
                    .map_or(0.0, |k| self.vals[k])
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.cols[k]] = self.vals[k];
            }
        }
        d
    }
}

pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Jacobi-preconditioned conjugate gradient for symmetric positive definite
/// systems. Stops when `||r|| <= tol * max(||b||, 1)`.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<CgOutcome> {
    let n = a.n;
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let target = tol * dot(b, b).sqrt().max(1.0);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt();
    let mut it = 0;
    while res > target {
        if it >= max_iter {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: res,
            });
        }
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::SingularSystem(format!(
                "non-positive curvature p'Ap = {pap:e}"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = dot(&r, &r).sqrt();
        it += 1;
    }
    Ok(CgOutcome {
        x,
        iterations: it,
        residual_norm: res,
    })
}

/// Symmetric edge weights of the discrete Laplacian, keyed by `(min, max)`.
pub fn laplacian_weights(mesh: &PartMesh, kind: LaplacianWeights, negative_threshold: f64) -> Result<BTreeMap<(usize, usize), f64>> {
    match kind {
        LaplacianWeights::Uniform => Ok(uniform_weights(mesh)),
        LaplacianWeights::Cotangent => cotangent_weights(mesh),
        LaplacianWeights::Auto => {
            let w = cotangent_weights(mesh)?;
            if w.values().any(|&x| x < -negative_threshold) {
                Ok(uniform_weights(mesh))
            } else {
                Ok(w)
            }
        }
    }
}

fn uniform_weights(mesh: &PartMesh) -> BTreeMap<(usize, usize), f64> {
    let idx = HalfEdgeIndex::new(mesh);
    idx.edges().map(|e| (e, 1.0)).collect()
}

fn cotangent_weights(mesh: &PartMesh) -> Result<BTreeMap<(usize, usize), f64>> {
    let mut w: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (i, j, o) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
            let a = mesh.vertices[i] - mesh.vertices[o];
            let b = mesh.vertices[j] - mesh.vertices[o];
            let cross = a.cross(&b).norm();
            let scale = a.norm() * b.norm();
            if !(cross > 1e-14 * scale) || scale == 0.0 {
                return Err(Error::SingularSystem(format!(
                    "degenerate triangle ({}, {}, {})",
                    t[0], t[1], t[2]
                )));
            }
            *w.entry((i.min(j), i.max(j))).or_default() += 0.5 * a.dot(&b) / cross;
        }
    }
    Ok(w)
}

/// Interior Dirichlet system `L_II x_I = -L_IB x_B` for one coordinate.
pub struct InteriorSystem {
    pub matrix: CsrMatrix,
    /// Submesh vertex index of each unknown.
    pub interior: Vec<usize>,
    pub rhs_u: Vec<f64>,
    pub rhs_v: Vec<f64>,
}

pub fn assemble_interior_system(
    mesh: &PartMesh,
    fixed: &[Option<Uv>],
    weights: &BTreeMap<(usize, usize), f64>,
) -> Result<InteriorSystem> {
    let n = mesh.vertices.len();
    let mut slot = vec![usize::MAX; n];
    let interior: Vec<usize> = (0..n).filter(|&v| fixed[v].is_none()).collect();
    for (k, &v) in interior.iter().enumerate() {
        slot[v] = k;
    }
    let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); interior.len()];
    let mut rhs_u = vec![0.0; interior.len()];
    let mut rhs_v = vec![0.0; interior.len()];
    for (&(a, b), &w) in weights {
        for (i, j) in [(a, b), (b, a)] {
            let si = slot[i];
            if si == usize::MAX {
                continue;
            }
            *rows[si].entry(si).or_default() += w;
            match fixed[j] {
                Some(uv) => {
                    rhs_u[si] += w * uv.x;
                    rhs_v[si] += w * uv.y;
                }
                None => *rows[si].entry(slot[j]).or_default() -= w,
            }
        }
    }
    // Every interior component must touch a fixed vertex, otherwise the
    // system is singular.
    let mut reached = vec![false; interior.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (&(a, b), &w) in weights {
        if w == 0.0 {
            continue;
        }
        for (i, j) in [(a, b), (b, a)] {
            if slot[i] != usize::MAX && fixed[j].is_some() && !reached[slot[i]] {
                reached[slot[i]] = true;
                queue.push_back(slot[i]);
            }
        }
    }
    let matrix = CsrMatrix::from_rows(rows);
    while let Some(s) = queue.pop_front() {
        for k in matrix.row_ptr[s]..matrix.row_ptr[s + 1] {
            let c = matrix.cols[k];
            if !reached[c] && matrix.vals[k] != 0.0 {
                reached[c] = true;
                queue.push_back(c);
            }
        }
    }
    if let Some(k) = reached.iter().position(|r| !r) {
        return Err(Error::SingularSystem(format!(
            "interior vertex {} is not connected to any fixed vertex",
            interior[k]
        )));
    }
    Ok(InteriorSystem {
        matrix,
        interior,
        rhs_u,
        rhs_v,
    })
}

/// Harmonic extension of fixed uv values into the free vertices. `fixed`
/// must cover every boundary vertex; u and v are solved independently and
/// fixed values are returned unmodified.
pub fn harmonic_unwrap(mesh: &PartMesh, fixed: &[Option<Uv>], opts: &SolverOptions) -> Result<Vec<Uv>> {
    if fixed.len() != mesh.vertices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fixed entries for {} vertices",
            fixed.len(),
            mesh.vertices.len()
        )));
    }
    let index = HalfEdgeIndex::new(mesh);
    index.check_manifold()?;
    if let Some(v) = (0..mesh.vertices.len()).find(|&v| index.is_boundary(v) && fixed[v].is_none()) {
        return Err(Error::InvalidParameter(format!(
            "boundary vertex {v} has no fixed uv"
        )));
    }
    let mut out: Vec<Uv> = fixed.iter().map(|f| f.unwrap_or_else(Uv::zeros)).collect();
    if fixed.iter().all(Option::is_some) {
        return Ok(out);
    }
    let weights = laplacian_weights(mesh, opts.weights, opts.negative_weight_threshold)?;
    let sys = assemble_interior_system(mesh, fixed, &weights)?;
    let max_iter = opts.max_iter_factor * sys.interior.len().max(1);
    let u = conjugate_gradient(&sys.matrix, &sys.rhs_u, opts.tolerance, max_iter)?;
    let v = conjugate_gradient(&sys.matrix, &sys.rhs_v, opts.tolerance, max_iter)?;
    for (k, &vert) in sys.interior.iter().enumerate() {
        out[vert] = Uv::new(u.x[k], v.x[k]);
    }
    Ok(out)
}

/// Linear interpolation of uv along a closed boundary loop, parameterized
/// by cumulative 3D arc length between consecutive anchors. `anchors` holds
/// `(position in loop, uv)`. Returns one uv per loop entry.
pub fn interpolate_boundary_uv(positions: &[Vec3], loop_vertices: &[usize], anchors: &[(usize, Uv)]) -> Result<Vec<Uv>> {
    if anchors.len() < 2 {
        return Err(Error::TooFewAnchors(anchors.len()));
    }
    let n = loop_vertices.len();
    let mut sorted: Vec<(usize, Uv)> = anchors.to_vec();
    sorted.sort_by_key(|a| a.0);
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::InvalidParameter(format!(
                "two anchors at loop position {}",
                w[0].0
            )));
        }
    }
    if let Some(a) = sorted.iter().find(|a| a.0 >= n) {
        return Err(Error::IndexOutOfRange {
            what: "anchor",
            index: a.0,
            len: n,
        });
    }
    let seg = |i: usize| (positions[loop_vertices[(i + 1) % n]] - positions[loop_vertices[i]]).norm();
    let mut out = vec![Uv::zeros(); n];
    for (k, &(start, uv0)) in sorted.iter().enumerate() {
        let (end, uv1) = sorted[(k + 1) % sorted.len()];
        let span = if end > start { end - start } else { end + n - start };
        let total: f64 = (0..span).map(|s| seg((start + s) % n)).sum();
        if !(total > 0.0) {
            return Err(Error::ZeroLengthArc(loop_vertices[start], loop_vertices[end]));
        }
        out[start] = uv0;
        let mut acc = 0.0;
        for s in 1..span {
            acc += seg((start + s - 1) % n);
            let t = acc / total;
            out[(start + s) % n] = uv0 + (uv1 - uv0) * t;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLandmark {
    pub part: usize,
    pub name: String,
    pub uv: [f64; 2],
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceTable {
    pub rows: Vec<ReferenceLandmark>,
    /// Landmarks that are not on their part's boundary. These are accepted
    /// and become interior constraints.
    pub warnings: Vec<String>,
}

/// Reads the uv of every declared landmark of a fully parameterized mesh.
pub fn extract_reference_landmarks(reference: &PartMesh) -> Result<ReferenceTable> {
    let parts = reference.vertex_parts();
    let mut table = ReferenceTable::default();
    let boundary = part_boundary_flags(reference);
    for (name, &v) in &reference.landmarks {
        let uv = match &reference.uv {
            Some(uv) => uv[v],
            None => {
                return Err(Error::LandmarkWithoutUv {
                    name: name.clone(),
                    vertex: v,
                })
            }
        };
        let Some(part) = parts[v] else {
            return Err(Error::LandmarkWithoutUv {
                name: name.clone(),
                vertex: v,
            });
        };
        if !boundary[v] {
            table
                .warnings
                .push(format!("landmark {name:?} (vertex {v}) is not on the boundary of part {part}"));
        }
        table.rows.push(ReferenceLandmark {
            part,
            name: name.clone(),
            uv: [uv.x, uv.y],
        });
    }
    table.rows.sort_by(|a, b| (a.part, &a.name).cmp(&(b.part, &b.name)));
    Ok(table)
}

/// Boundary flag per vertex, where boundaries are taken per part submesh.
fn part_boundary_flags(mesh: &PartMesh) -> Vec<bool> {
    let mut flags = vec![false; mesh.vertices.len()];
    for p in 0..mesh.part_count {
        if let Ok(sub) = part_submesh(mesh, p) {
            let idx = HalfEdgeIndex::new(&sub.mesh);
            for (local, &parent) in sub.parent_vertex.iter().enumerate() {
                flags[parent] |= idx.is_boundary(local);
            }
        }
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMatch {
    pub name: String,
    pub target_vertex: usize,
    pub reference_uv: [f64; 2],
}

/// Per-part landmark matches between a reference and a target mesh.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LandmarkCorrespondence {
    pub parts: Vec<Vec<LandmarkMatch>>,
}

impl LandmarkCorrespondence {
    /// Matches reference landmarks to target landmarks by name.
    pub fn by_name(reference: &ReferenceTable, target: &PartMesh, target_landmarks: &BTreeMap<String, usize>) -> Result<Self> {
        let parts = target.vertex_parts();
        let mut out = vec![Vec::new(); target.part_count];
        for row in &reference.rows {
            let &v = target_landmarks.get(&row.name).ok_or_else(|| {
                Error::InvalidParameter(format!("target has no landmark {:?}", row.name))
            })?;
            if v >= target.vertices.len() {
                return Err(Error::IndexOutOfRange {
                    what: "landmark vertex",
                    index: v,
                    len: target.vertices.len(),
                });
            }
            if parts[v] != Some(row.part) {
                return Err(Error::InvalidParameter(format!(
                    "landmark {:?} is in part {} on the reference but {:?} on the target",
                    row.name, row.part, parts[v]
                )));
            }
            if row.part >= out.len() {
                return Err(Error::IndexOutOfRange {
                    what: "part",
                    index: row.part,
                    len: out.len(),
                });
            }
            out[row.part].push(LandmarkMatch {
                name: row.name.clone(),
                target_vertex: v,
                reference_uv: row.uv,
            });
        }
        let corr = LandmarkCorrespondence { parts: out };
        corr.validate()?;
        Ok(corr)
    }

    pub fn validate(&self) -> Result<()> {
        for part in &self.parts {
            let mut names: Vec<&str> = part.iter().map(|m| m.name.as_str()).collect();
            names.sort_unstable();
            if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::DuplicateLandmark(w[0].to_string()));
            }
            for m in part {
                let [u, v] = m.reference_uv;
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    return Err(Error::UvOutOfRange {
                        part: usize::MAX,
                        vertex: m.target_vertex,
                        u,
                        v,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Assigns per-vertex uv to every non-empty part of `target`. Returns a copy
/// of `target` carrying the new uv.
pub fn transfer_uv(target: &PartMesh, corr: &LandmarkCorrespondence, opts: &SolverOptions) -> Result<PartMesh> {
    corr.validate()?;
    let solved: Vec<Result<Option<(Vec<usize>, Vec<Uv>)>>> = (0..target.part_count)
        .into_par_iter()
        .map(|p| transfer_part(target, corr, p, opts))
        .collect();
    let mut uv = vec![Uv::zeros(); target.vertices.len()];
    for res in solved {
        if let Some((parent, part_uv)) = res? {
            for (v, t) in parent.into_iter().zip(part_uv) {
                uv[v] = t;
            }
        }
    }
    let mut out = target.clone();
    out.set_uv(uv)?;
    Ok(out)
}

fn transfer_part(target: &PartMesh, corr: &LandmarkCorrespondence, part: usize, opts: &SolverOptions) -> Result<Option<(Vec<usize>, Vec<Uv>)>> {
    let sub = match part_submesh(target, part) {
        Ok(s) => s,
        Err(Error::EmptySubmesh(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !target.is_part_manifold(part) {
        return Err(Error::NonManifoldPart(part));
    }
    let matches = corr.parts.get(part).filter(|m| !m.is_empty()).ok_or(Error::PartWithoutLandmarks(part))?;
    let mut local = BTreeMap::new();
    for (i, &v) in sub.parent_vertex.iter().enumerate() {
        local.insert(v, i);
    }
    let mut fixed: Vec<Option<Uv>> = vec![None; sub.mesh.vertices.len()];
    let mut landmark_uv: BTreeMap<usize, Uv> = BTreeMap::new();
    for m in matches {
        let &l = local.get(&m.target_vertex).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "landmark {:?} vertex {} is not in part {part}",
                m.name, m.target_vertex
            ))
        })?;
        landmark_uv.insert(l, Uv::new(m.reference_uv[0], m.reference_uv[1]));
    }
    for lp in boundary_loops(&sub.mesh)? {
        let anchors: Vec<(usize, Uv)> = lp
            .iter()
            .enumerate()
            .filter_map(|(pos, v)| landmark_uv.get(v).map(|&uv| (pos, uv)))
            .collect();
        let interp = interpolate_boundary_uv(&sub.mesh.vertices, &lp, &anchors)?;
        for (&v, uv) in lp.iter().zip(interp) {
            fixed[v] = Some(uv);
        }
    }
    // Interior landmarks become additional constraints.
    for (&l, &uv) in &landmark_uv {
        fixed[l] = Some(uv);
    }
    let mut uv = harmonic_unwrap(&sub.mesh, &fixed, opts)?;
    for (i, t) in uv.iter_mut().enumerate() {
        let in_range = |c: f64| c.is_finite() && (-UV_RANGE_SLACK..=1.0 + UV_RANGE_SLACK).contains(&c);
        if !in_range(t.x) || !in_range(t.y) {
            return Err(Error::UvOutOfRange {
                part,
                vertex: sub.parent_vertex[i],
                u: t.x,
                v: t.y,
            });
        }
        *t = Uv::new(t.x.clamp(0.0, 1.0), t.y.clamp(0.0, 1.0));
    }
    Ok(Some((sub.parent_vertex, uv)))
}

/// Parts that touch each other (share a vertex position), as sorted pairs.
pub fn part_adjacency(mesh: &PartMesh) -> Vec<(usize, usize)> {
    let weld = mesh.weld_map();
    let parts = mesh.vertex_parts();
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (v, p) in parts.iter().enumerate() {
        if let Some(p) = p {
            by_group.entry(weld[v]).or_default().push(*p);
        }
    }
    let mut pairs = Vec::new();
    for ps in by_group.values_mut() {
        ps.sort_unstable();
        ps.dedup();
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                pairs.push((ps[i], ps[j]));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Checks that a pre-partitioned target has the same part adjacency graph
/// as the reference.
pub fn validate_part_adjacency(reference: &PartMesh, target: &PartMesh) -> Result<()> {
    let a = part_adjacency(reference);
    let b = part_adjacency(target);
    if a != b {
        let missing: Vec<_> = a.iter().filter(|e| !b.contains(e)).collect();
        let extra: Vec<_> = b.iter().filter(|e| !a.contains(e)).collect();
        return Err(Error::InvalidParameter(format!(
            "part adjacency differs from reference: missing {missing:?}, extra {extra:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::test_meshes::grid;
    use nalgebra::{DMatrix, DVector};

    fn dense_solve(sys: &InteriorSystem, rhs: &[f64]) -> Vec<f64> {
        let n = sys.interior.len();
        let d = sys.matrix.to_dense();
        let m = DMatrix::from_fn(n, n, |i, j| d[i][j]);
        m.lu().solve(&DVector::from_column_slice(rhs)).unwrap().iter().copied().collect()
    }

    fn boundary_fixed(mesh: &PartMesh, f: impl Fn(&Vec3) -> Uv) -> Vec<Option<Uv>> {
        let idx = HalfEdgeIndex::new(mesh);
        (0..mesh.vertices.len())
            .map(|v| idx.is_boundary(v).then(|| f(&mesh.vertices[v])))
            .collect()
    }

    #[test]
    fn midpoint_interpolation() {
        let pos = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let out = interpolate_boundary_uv(&pos, &[0, 1, 2], &[(0, Uv::new(0.0, 0.0)), (2, Uv::new(1.0, 0.0))]).unwrap();
        assert_eq!(out[1], Uv::new(0.5, 0.0));
        assert_eq!(out[0], Uv::new(0.0, 0.0));
        assert_eq!(out[2], Uv::new(1.0, 0.0));
    }

    #[test]
    fn arc_length_ratio() {
        // Segments of length 1 and 3 between the anchors: t = 1/4.
        let pos = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(4.0, 0.0, 0.0), Vec3::new(2.0, 5.0, 0.0)];
        let out = interpolate_boundary_uv(&pos, &[0, 1, 2, 3], &[(0, Uv::new(0.2, 0.0)), (2, Uv::new(0.6, 1.0))]).unwrap();
        assert!((out[1].x - (0.2 + 0.25 * 0.4)).abs() < 1e-15);
        assert!((out[1].y - 0.25).abs() < 1e-15);
    }

    #[test]
    fn anchor_errors() {
        let pos = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        assert!(matches!(
            interpolate_boundary_uv(&pos, &[0, 1, 2], &[(0, Uv::zeros())]),
            Err(Error::TooFewAnchors(1))
        ));
        let same = vec![Vec3::zeros(), Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)];
        assert!(matches!(
            interpolate_boundary_uv(&same, &[0, 1, 2], &[(0, Uv::zeros()), (1, Uv::new(1.0, 0.0))]),
            Err(Error::ZeroLengthArc(0, 1))
        ));
    }

    #[test]
    fn no_interior_returns_fixed() {
        let g = grid(2);
        let fixed = boundary_fixed(&g, |p| Uv::new(p.x, p.y));
        let out = harmonic_unwrap(&g, &fixed, &SolverOptions::default()).unwrap();
        for (o, f) in out.iter().zip(&fixed) {
            assert_eq!(Some(*o), *f);
        }
    }

    #[test]
    fn five_vertex_affine_patch() {
        // Unit square corners plus an off-centre interior vertex.
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.4, 0.55, 0.0),
        ];
        let t = vec![[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
        let m = PartMesh::new(v, t, vec![0; 4], 1).unwrap();
        let affine = |p: &Vec3| Uv::new(0.1 + 0.5 * p.x + 0.2 * p.y, 0.3 - 0.1 * p.x + 0.6 * p.y);
        let fixed = boundary_fixed(&m, affine);
        let opts = SolverOptions {
            weights: LaplacianWeights::Cotangent,
            ..Default::default()
        };
        let out = harmonic_unwrap(&m, &fixed, &opts).unwrap();
        let want = affine(&m.vertices[4]);
        assert!((out[4] - want).norm() < 1e-12, "{:?} vs {:?}", out[4], want);
    }

    #[test]
    fn grid_identity_matches_dense_solve() {
        let g = grid(3);
        let fixed = boundary_fixed(&g, |p| Uv::new(p.x, p.y));
        let w = laplacian_weights(&g, LaplacianWeights::Cotangent, 1e-9).unwrap();
        let sys = assemble_interior_system(&g, &fixed, &w).unwrap();
        let dense = dense_solve(&sys, &sys.rhs_u);
        let out = harmonic_unwrap(&g, &fixed, &SolverOptions::default()).unwrap();
        assert!((out[4] - Uv::new(0.5, 0.5)).norm() < 1e-10);
        assert!((dense[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn missing_boundary_value_rejected() {
        let g = grid(3);
        let mut fixed = boundary_fixed(&g, |p| Uv::new(p.x, p.y));
        fixed[0] = None;
        assert!(matches!(
            harmonic_unwrap(&g, &fixed, &SolverOptions::default()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn degenerate_triangle_is_singular() {
        let v = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let m = PartMesh::new(v, vec![[0, 1, 2]], vec![0], 1).unwrap();
        assert!(matches!(
            laplacian_weights(&m, LaplacianWeights::Cotangent, 1e-9),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn cg_reports_non_convergence() {
        let g = grid(6);
        let fixed = boundary_fixed(&g, |p| Uv::new(p.x * p.x, p.y));
        let opts = SolverOptions {
            max_iter_factor: 0,
            ..Default::default()
        };
        // Zero iterations allowed: only converges if the start is exact.
        assert!(matches!(
            harmonic_unwrap(&g, &fixed, &opts),
            Err(Error::NoConvergence { .. })
        ));
    }

    fn two_part_square() -> PartMesh {
        // 3x3 grid split into a left and right part along x = 0.5, with
        // duplicated seam vertices.
        let g = grid(3);
        let mut vertices = g.vertices.clone();
        let mut tris = Vec::new();
        let mut parts = Vec::new();
        let mut dup = BTreeMap::new();
        for t in &g.triangles {
            let cx: f64 = t.iter().map(|&v| g.vertices[v].x).sum::<f64>() / 3.0;
            let p = usize::from(cx > 0.5);
            let t2 = t.map(|v| {
                if p == 1 && g.vertices[v].x == 0.5 {
                    *dup.entry(v).or_insert_with(|| {
                        vertices.push(g.vertices[v]);
                        vertices.len() - 1
                    })
                } else {
                    v
                }
            });
            tris.push(t2);
            parts.push(p);
        }
        PartMesh::new(vertices, tris, parts, 2).unwrap()
    }

    #[test]
    fn adjacency_of_split_square() {
        let m = two_part_square();
        assert_eq!(part_adjacency(&m), vec![(0, 1)]);
        validate_part_adjacency(&m, &m).unwrap();
    }

    #[test]
    fn missing_part_correspondence() {
        let m = two_part_square();
        let corr = LandmarkCorrespondence {
            parts: vec![vec![], vec![]],
        };
        assert!(matches!(
            transfer_uv(&m, &corr, &SolverOptions::default()),
            Err(Error::PartWithoutLandmarks(0))
        ));
    }

    #[test]
    fn reference_landmarks_table() {
        let mut g = grid(3);
        let uv = g.vertices.iter().map(|p| Uv::new(p.x, p.y)).collect();
        g.set_uv(uv).unwrap();
        for (name, v) in [("a", 0), ("b", 2), ("c", 8), ("d", 6)] {
            g.add_landmark(name, v).unwrap();
        }
        let t = extract_reference_landmarks(&g).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[2].uv, [1.0, 1.0]);
        assert!(t.warnings.is_empty());
        g.add_landmark("centre", 4).unwrap();
        let t = extract_reference_landmarks(&g).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert_eq!(t.warnings.len(), 1);
        g.uv = None;
        assert!(matches!(
            extract_reference_landmarks(&g),
            Err(Error::LandmarkWithoutUv { .. })
        ));
    }
}
