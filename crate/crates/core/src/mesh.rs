//! Part-labelled triangle meshes, their text formats and topology queries.
//!
//! Meshes are stored as plain vertex/triangle arrays with a part index per
//! triangle. Coordinates are meters, Y up, right handed. Per-vertex uv is
//! optional until a parameterization has been assigned.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Uv = Vector2<f64>;

/// Default number of body parts, following the 24-part dense pose convention.
pub const DEFAULT_PART_COUNT: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct PartMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub part_of_triangle: Vec<usize>,
    pub uv: Option<Vec<Uv>>,
    pub landmarks: BTreeMap<String, usize>,
    pub part_count: usize,
    /// Parts found not to be edge-manifold at construction time. Such meshes
    /// load fine; the uv solvers refuse them.
    pub non_manifold_parts: Vec<usize>,
}

/// A single part cut out of a parent mesh.
#[derive(Debug, Clone)]
pub struct Submesh {
    pub part: usize,
    pub mesh: PartMesh,
    /// `parent_vertex[i]` is the parent index of submesh vertex `i`.
    pub parent_vertex: Vec<usize>,
}

impl PartMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        part_of_triangle: Vec<usize>,
        part_count: usize,
    ) -> Result<Self> {
        if part_of_triangle.len() != triangles.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} part labels for {} triangles",
                part_of_triangle.len(),
                triangles.len()
            )));
        }
        for tri in &triangles {
            for &v in tri {
                if v >= vertices.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "vertex",
                        index: v,
                        len: vertices.len(),
                    });
                }
            }
        }
        for &p in &part_of_triangle {
            if p >= part_count {
                return Err(Error::IndexOutOfRange {
                    what: "part",
                    index: p,
                    len: part_count,
                });
            }
        }
        let mut mesh = PartMesh {
            vertices,
            triangles,
            part_of_triangle,
            uv: None,
            landmarks: BTreeMap::new(),
            part_count,
            non_manifold_parts: Vec::new(),
        };
        mesh.non_manifold_parts = mesh.find_non_manifold_parts();
        Ok(mesh)
    }

    pub fn with_uv(mut self, uv: Vec<Uv>) -> Result<Self> {
        self.set_uv(uv)?;
        Ok(self)
    }

    pub fn set_uv(&mut self, uv: Vec<Uv>) -> Result<()> {
        if uv.len() != self.vertices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} uvs for {} vertices",
                uv.len(),
                self.vertices.len()
            )));
        }
        for (i, t) in uv.iter().enumerate() {
            if !(0.0..=1.0).contains(&t.x) || !(0.0..=1.0).contains(&t.y) {
                return Err(Error::UvOutOfRange {
                    part: self.part_of_vertex(i).unwrap_or(usize::MAX),
                    vertex: i,
                    u: t.x,
                    v: t.y,
                });
            }
        }
        self.uv = Some(uv);
        Ok(())
    }

    pub fn add_landmark(&mut self, name: impl Into<String>, vertex: usize) -> Result<()> {
        let name = name.into();
        if vertex >= self.vertices.len() {
            return Err(Error::IndexOutOfRange {
                what: "landmark vertex",
                index: vertex,
                len: self.vertices.len(),
            });
        }
        if self.landmarks.insert(name.clone(), vertex).is_some() {
            return Err(Error::DuplicateLandmark(name));
        }
        Ok(())
    }

    pub fn triangle_count_of_part(&self, part: usize) -> usize {
        self.part_of_triangle.iter().filter(|&&p| p == part).count()
    }

    /// Part of the first triangle that uses `vertex`, if any.
    pub fn part_of_vertex(&self, vertex: usize) -> Option<usize> {
        self.triangles
            .iter()
            .zip(&self.part_of_triangle)
            .find(|(t, _)| t.contains(&vertex))
            .map(|(_, &p)| p)
    }

    /// Part index for every vertex (`None` for unreferenced vertices).
    pub fn vertex_parts(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.vertices.len()];
        for (t, &p) in self.triangles.iter().zip(&self.part_of_triangle) {
            for &v in t {
                out[v].get_or_insert(p);
            }
        }
        out
    }

    pub fn is_part_manifold(&self, part: usize) -> bool {
        !self.non_manifold_parts.contains(&part)
    }

    fn find_non_manifold_parts(&self) -> Vec<usize> {
        let mut counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
        for (t, &p) in self.triangles.iter().zip(&self.part_of_triangle) {
            for (a, b) in triangle_edges(t) {
                *counts.entry((p, a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut bad: Vec<usize> = counts
            .into_iter()
            .filter(|&(_, c)| c > 2)
            .map(|((p, _, _), _)| p)
            .collect();
        bad.sort_unstable();
        bad.dedup();
        bad
    }

    /// Area-weighted vertex normals. Vertices that share a weld group (same
    /// position, different parts) receive the same normal.
    pub fn vertex_normals(&self, weld: &[usize]) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i]);
            let n = (b - a).cross(&(c - a));
            for &i in t {
                acc[weld[i]] += n;
            }
        }
        (0..self.vertices.len())
            .map(|i| {
                let n = acc[weld[i]];
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::zeros()
                }
            })
            .collect()
    }

    /// Maps every vertex to the lowest-index vertex within `WELD_TOLERANCE`
    /// (transitively). Parts are stored with duplicated seam vertices;
    /// welding reconnects them.
    pub fn weld_map(&self) -> Vec<usize> {
        weld_positions(&self.vertices, WELD_TOLERANCE)
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.vertices {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

/// Distance below which two vertices count as the same surface point.
pub const WELD_TOLERANCE: f64 = 1e-7;

/// Union of points closer than `eps`, each mapped to the smallest index of
/// its group.
pub fn weld_positions(points: &[Vec3], eps: f64) -> Vec<usize> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x).then(a.cmp(&b)));
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if points[j].x - points[i].x > eps {
                break;
            }
            if (points[j] - points[i]).norm() <= eps {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                let (lo, hi) = (ri.min(rj), ri.max(rj));
                parent[hi] = lo;
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

pub(crate) fn triangle_edges(t: &[usize; 3]) -> [(usize, usize); 3] {
    [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
}

/// Extracts the triangles of one part with vertices reindexed in ascending
/// parent order.
pub fn part_submesh(mesh: &PartMesh, part: usize) -> Result<Submesh> {
    if part >= mesh.part_count {
        return Err(Error::IndexOutOfRange {
            what: "part",
            index: part,
            len: mesh.part_count,
        });
    }
    let tris: Vec<[usize; 3]> = mesh
        .triangles
        .iter()
        .zip(&mesh.part_of_triangle)
        .filter(|(_, &p)| p == part)
        .map(|(t, _)| *t)
        .collect();
    if tris.is_empty() {
        return Err(Error::EmptySubmesh(part));
    }
    let mut used = vec![false; mesh.vertices.len()];
    for t in &tris {
        for &v in t {
            used[v] = true;
        }
    }
    let parent_vertex: Vec<usize> = (0..mesh.vertices.len()).filter(|&v| used[v]).collect();
    let mut local = vec![usize::MAX; mesh.vertices.len()];
    for (i, &v) in parent_vertex.iter().enumerate() {
        local[v] = i;
    }
    let vertices = parent_vertex.iter().map(|&v| mesh.vertices[v]).collect();
    let triangles: Vec<[usize; 3]> = tris.iter().map(|t| t.map(|v| local[v])).collect();
    let n_tris = triangles.len();
    let mut sub = PartMesh::new(vertices, triangles, vec![part; n_tris], mesh.part_count)?;
    if let Some(uv) = &mesh.uv {
        sub.uv = Some(parent_vertex.iter().map(|&v| uv[v]).collect());
    }
    for (name, &v) in &mesh.landmarks {
        if used[v] {
            sub.landmarks.insert(name.clone(), local[v]);
        }
    }
    Ok(Submesh {
        part,
        mesh: sub,
        parent_vertex,
    })
}

/// Adjacency tables derived from a triangle list.
#[derive(Debug, Clone)]
pub struct HalfEdgeIndex {
    neighbors: Vec<Vec<usize>>,
    edge_triangles: BTreeMap<(usize, usize), Vec<usize>>,
    boundary: Vec<bool>,
}

impl HalfEdgeIndex {
    pub fn new(mesh: &PartMesh) -> Self {
        let n = mesh.vertices.len();
        let mut neighbors = vec![Vec::new(); n];
        let mut edge_triangles: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (ti, t) in mesh.triangles.iter().enumerate() {
            for (a, b) in triangle_edges(t) {
                edge_triangles.entry((a.min(b), a.max(b))).or_default().push(ti);
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        let mut boundary = vec![false; n];
        for (&(a, b), ts) in &edge_triangles {
            if ts.len() == 1 {
                boundary[a] = true;
                boundary[b] = true;
            }
        }
        HalfEdgeIndex {
            neighbors,
            edge_triangles,
            boundary,
        }
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    /// Triangles incident to the undirected edge `(a, b)`.
    pub fn edge_triangles(&self, a: usize, b: usize) -> &[usize] {
        self.edge_triangles
            .get(&(a.min(b), a.max(b)))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edge_triangles.keys().copied()
    }

    pub fn check_manifold(&self) -> Result<()> {
        for (&(a, b), ts) in &self.edge_triangles {
            if ts.len() > 2 {
                return Err(Error::NonManifoldEdge(a, b, ts.len()));
            }
        }
        Ok(())
    }
}

/// Ordered boundary cycles of an edge-manifold mesh, oriented along the
/// triangle winding. Each loop starts at its smallest vertex index; loops
/// are sorted by that start vertex.
pub fn boundary_loops(mesh: &PartMesh) -> Result<Vec<Vec<usize>>> {
    let index = HalfEdgeIndex::new(mesh);
    index.check_manifold()?;
    // Directed boundary half-edges a -> b in triangle winding order.
    let mut next: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &mesh.triangles {
        for (a, b) in triangle_edges(t) {
            if index.edge_triangles(a, b).len() == 1 && next.insert(a, b).is_some() {
                return Err(Error::NonManifoldVertex(a));
            }
        }
    }
    let mut loops = Vec::new();
    let mut visited: BTreeMap<usize, bool> = next.keys().map(|&k| (k, false)).collect();
    let starts: Vec<usize> = next.keys().copied().collect();
    for start in starts {
        if visited[&start] {
            continue;
        }
        let mut cycle = vec![start];
        visited.insert(start, true);
        let mut cur = next[&start];
        while cur != start {
            match visited.get(&cur) {
                Some(false) => {}
                _ => return Err(Error::NonManifoldVertex(cur)),
            }
            visited.insert(cur, true);
            cycle.push(cur);
            cur = next[&cur];
        }
        loops.push(cycle);
    }
    Ok(loops)
}

/// Parses OBJ-style text: `v`, optional `vt` (one per vertex), `g part_<k>`
/// groups and triangular `f` lines (`f a b c` or `f a/t b/t c/t`).
/// A `#@parts <K>` directive fixes the part count; otherwise it is one more
/// than the largest group index.
pub fn parse_obj(text: &str) -> Result<PartMesh> {
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut triangles = Vec::new();
    let mut parts = Vec::new();
    let mut current_part = 0usize;
    let mut declared_parts: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let perr = |msg: String| Error::Parse { line, msg };
        let raw = raw.trim();
        if let Some(rest) = raw.strip_prefix("#@parts") {
            let k = rest
                .trim()
                .parse::<usize>()
                .map_err(|e| perr(format!("bad part count: {e}")))?;
            declared_parts = Some(k);
            continue;
        }
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let mut fields = raw.split_whitespace();
        let tag = fields.next().unwrap_or_default();
        let rest: Vec<&str> = fields.collect();
        match tag {
            "v" => {
                if rest.len() < 3 {
                    return Err(perr("vertex needs 3 coordinates".into()));
                }
                let c = parse_floats(&rest[..3]).map_err(|m| perr(m))?;
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            "vt" => {
                if rest.len() < 2 {
                    return Err(perr("vt needs 2 coordinates".into()));
                }
                let c = parse_floats(&rest[..2]).map_err(|m| perr(m))?;
                uvs.push(Uv::new(c[0], c[1]));
            }
            "g" | "o" => {
                let name = rest.first().copied().unwrap_or("");
                current_part = name
                    .strip_prefix("part_")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| perr(format!("group {name:?} is not part_<k>")))?;
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(perr(format!("face with {} corners, expected 3", rest.len())));
                }
                let mut tri = [0usize; 3];
                for (slot, token) in tri.iter_mut().zip(&rest) {
                    let idx = token.split('/').next().unwrap_or("");
                    let i: i64 = idx.parse().map_err(|_| perr(format!("bad face index {token:?}")))?;
                    if i < 1 {
                        return Err(perr(format!("face index {i} must be positive")));
                    }
                    *slot = (i - 1) as usize;
                }
                triangles.push(tri);
                parts.push(current_part);
            }
            // Normals and other statements carry nothing we keep.
            _ => {}
        }
    }
    let k = declared_parts.unwrap_or_else(|| parts.iter().max().map_or(1, |m| m + 1));
    let mut mesh = PartMesh::new(vertices, triangles, parts, k)?;
    if !uvs.is_empty() {
        if uvs.len() != mesh.vertices.len() {
            return Err(Error::Format(format!(
                "{} vt lines for {} vertices; uv must be per vertex",
                uvs.len(),
                mesh.vertices.len()
            )));
        }
        mesh.set_uv(uvs)?;
    }
    Ok(mesh)
}

fn parse_floats(tokens: &[&str]) -> std::result::Result<Vec<f64>, String> {
    tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad number {t:?}: {e}")))
        .collect()
}

/// Serializes to the text format read by [`parse_obj`]. Floats are written in
/// shortest round-trip form so a save/load cycle is bit exact.
pub fn to_obj(mesh: &PartMesh) -> String {
    let mut s = String::new();
    writeln!(s, "#@parts {}", mesh.part_count).unwrap();
    for v in &mesh.vertices {
        writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z).unwrap();
    }
    if let Some(uv) = &mesh.uv {
        for t in uv {
            writeln!(s, "vt {:?} {:?}", t.x, t.y).unwrap();
        }
    }
    let mut current = usize::MAX;
    for i in 0..mesh.triangles.len() {
        let p = mesh.part_of_triangle[i];
        if p != current {
            writeln!(s, "g part_{p}").unwrap();
            current = p;
        }
        let [a, b, c] = mesh.triangles[i].map(|x| x + 1);
        if mesh.uv.is_some() {
            writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}").unwrap();
        } else {
            writeln!(s, "f {a} {b} {c}").unwrap();
        }
    }
    s
}

/// Landmark sidecar: one `name vertex_index` pair per line, `#` comments.
pub fn parse_landmarks(text: &str) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let mut it = raw.split_whitespace();
        let (Some(name), Some(idx), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "expected `name vertex_index`".into(),
            });
        };
        let v: usize = idx.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad vertex index {idx:?}"),
        })?;
        if out.insert(name.to_string(), v).is_some() {
            return Err(Error::DuplicateLandmark(name.to_string()));
        }
    }
    Ok(out)
}

pub fn landmarks_to_string(landmarks: &BTreeMap<String, usize>) -> String {
    let mut s = String::new();
    for (name, v) in landmarks {
        writeln!(s, "{name} {v}").unwrap();
    }
    s
}

/// Path of the landmark sidecar belonging to a mesh file.
pub fn landmark_path(mesh_path: &Path) -> std::path::PathBuf {
    mesh_path.with_extension("landmarks")
}

/// Loads a mesh and, if present, its landmark sidecar.
pub fn load_mesh(path: &Path) -> Result<PartMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut mesh = parse_obj(&text)?;
    let lm_path = landmark_path(path);
    if lm_path.exists() {
        let lm_text = fs::read_to_string(&lm_path).map_err(|e| Error::file(&lm_path, e))?;
        for (name, v) in parse_landmarks(&lm_text)? {
            mesh.add_landmark(name, v)?;
        }
    }
    Ok(mesh)
}

/// Writes the mesh and (when it has landmarks) the landmark sidecar.
pub fn save_mesh(mesh: &PartMesh, path: &Path) -> Result<()> {
    fs::write(path, to_obj(mesh)).map_err(|e| Error::file(path, e))?;
    if !mesh.landmarks.is_empty() {
        let lm_path = landmark_path(path);
        fs::write(&lm_path, landmarks_to_string(&mesh.landmarks))
            .map_err(|e| Error::file(&lm_path, e))?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod test_meshes {
    use super::*;

    pub fn tetrahedron() -> PartMesh {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let t = vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]];
        PartMesh::new(v, t, vec![0; 4], 1).unwrap()
    }

    /// `n` x `n` vertex grid on the unit square (z = 0), all one part.
    pub fn grid(n: usize) -> PartMesh {
        let mut v = Vec::new();
        for j in 0..n {
            for i in 0..n {
                v.push(Vec3::new(i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64, 0.0));
            }
        }
        let mut t = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = j * n + i;
                t.push([a, a + 1, a + n + 1]);
                t.push([a, a + n + 1, a + n]);
            }
        }
        let nt = t.len();
        PartMesh::new(v, t, vec![0; nt], 1).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_meshes::*;
    use super::*;

    #[test]
    fn single_triangle_obj() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(m.triangles.len(), 1);
        assert_eq!(m.part_count, 1);
        assert_eq!(boundary_loops(&m).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn tetrahedron_has_no_boundary() {
        let text = to_obj(&tetrahedron());
        let m = parse_obj(&text).unwrap();
        assert_eq!(m.triangles.len(), 4);
        assert!(boundary_loops(&m).unwrap().is_empty());
        let idx = HalfEdgeIndex::new(&m);
        assert!(idx.boundary_flags().iter().all(|b| !b));
    }

    #[test]
    fn face_index_out_of_range() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 9\n").unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 8, len: 4, .. }));
    }

    #[test]
    fn malformed_face_line() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }));
        let err = parse_obj("v 0 0 0\nf 1 x 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn non_manifold_is_flagged_not_fatal() {
        // Three triangles on edge (0, 1).
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 -1 0\nv 0 0 1\nf 1 2 3\nf 2 1 4\nf 1 2 5\n";
        let m = parse_obj(text).unwrap();
        assert_eq!(m.non_manifold_parts, vec![0]);
        assert!(matches!(boundary_loops(&m), Err(Error::NonManifoldEdge(0, 1, 3))));
    }

    #[test]
    fn groups_define_parts() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\ng part_0\nf 1 2 3\ng part_1\nf 1 3 4\n";
        let m = parse_obj(text).unwrap();
        assert_eq!(m.part_count, 2);
        let sub = part_submesh(&m, 1).unwrap();
        assert_eq!(sub.mesh.triangles.len(), 1);
        assert_eq!(sub.parent_vertex, vec![0, 2, 3]);
        assert!(matches!(
            part_submesh(&m, 5),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn empty_part_is_an_error() {
        let text = "#@parts 3\nv 0 0 0\nv 1 0 0\nv 1 1 0\ng part_0\nf 1 2 3\n";
        let m = parse_obj(text).unwrap();
        assert_eq!(m.part_count, 3);
        assert!(matches!(part_submesh(&m, 2), Err(Error::EmptySubmesh(2))));
    }

    #[test]
    fn single_part_submesh_is_identity() {
        let g = grid(3);
        let sub = part_submesh(&g, 0).unwrap();
        assert_eq!(sub.mesh.vertices, g.vertices);
        assert_eq!(sub.mesh.triangles, g.triangles);
    }

    #[test]
    fn grid_boundary_loop() {
        let loops = boundary_loops(&grid(4)).unwrap();
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].len(), 12);
        // Counter-clockwise around the square.
        assert_eq!(&loops[0][..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn weld_groups_close_points() {
        let pts = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0 + 1e-9, 0.0, 0.0),
            Vec3::new(0.0, 1e-8, 0.0),
            Vec3::new(0.5, 0.0, 0.0),
        ];
        assert_eq!(weld_positions(&pts, 1e-7), vec![0, 1, 0, 1, 4]);
    }

    #[test]
    fn landmark_sidecar() {
        let lm = parse_landmarks("# c\nnose 3\nleft 7\n").unwrap();
        assert_eq!(lm["nose"], 3);
        assert!(matches!(
            parse_landmarks("a 1\na 2\n"),
            Err(Error::DuplicateLandmark(_))
        ));
        assert_eq!(parse_landmarks(&landmarks_to_string(&lm)).unwrap(), lm);
    }

    #[test]
    fn save_load_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        let mut m = grid(3);
        m.add_landmark("corner", 8).unwrap();
        let uv = m.vertices.iter().map(|p| Uv::new(p.x, p.y)).collect();
        m.set_uv(uv).unwrap();
        save_mesh(&m, &path).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn uv_out_of_range_rejected() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1.5 0\nvt 0 1\nf 1/1 2/2 3/3\n";
        assert!(matches!(parse_obj(text), Err(Error::UvOutOfRange { vertex: 1, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_mesh() -> impl Strategy<Value = PartMesh> {
            (3usize..12, 1usize..4).prop_flat_map(|(nv, k)| {
                let verts = proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), nv);
                let tris = proptest::collection::vec(([0..nv, 0..nv, 0..nv], 0..k), 1..20);
                let uvs = proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), nv);
                (verts, tris, uvs, Just(k)).prop_map(|(v, t, uv, k)| {
                    let vertices = v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
                    let (tris, parts): (Vec<_>, Vec<_>) = t.into_iter().unzip();
                    PartMesh::new(vertices, tris, parts, k)
                        .unwrap()
                        .with_uv(uv.into_iter().map(|(u, v)| Uv::new(u, v)).collect())
                        .unwrap()
                })
            })
        }

        proptest! {
            #[test]
            fn obj_round_trip_is_bit_exact(m in arb_mesh()) {
                let once = parse_obj(&to_obj(&m)).unwrap();
                let twice = parse_obj(&to_obj(&once)).unwrap();
                prop_assert_eq!(&once, &m);
                prop_assert_eq!(&once, &twice);
            }

            #[test]
            fn submesh_triangle_counts_sum(m in arb_mesh()) {
                let total: usize = (0..m.part_count)
                    .map(|p| part_submesh(&m, p).map(|s| s.mesh.triangles.len()).unwrap_or(0))
                    .sum();
                prop_assert_eq!(total, m.triangles.len());
            }
        }
    }
}
