//! Triangle meshes and the combinatorial quantities derived from them.
//!
//! A [`Mesh`] is immutable once constructed. Edges, one-rings, areas and
//! opposite angles are computed on demand from it.

mod io;
pub mod shapes;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use io::{load_mesh, save_mesh, MeshFormat};

pub type Point = [f64; 3];

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

/// Triangle mesh with 0-based, counter-clockwise faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// Validates indices, rejects faces with repeated vertices and edges
    /// shared by more than two faces.
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::IndexOutOfRange { index: v, count: n });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::RepeatedIndex(fi));
            }
        }
        if let Some(((a, b), _)) = edge_face_counts(&faces).into_iter().find(|(_, c)| *c > 2) {
            return Err(Error::NonManifold(a, b));
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::dims(
                format!("{} vertices", self.vertices.len()),
                format!("{} vertices", vertices.len()),
            ));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Row-major `n x 3` coordinate buffer.
    pub fn flat_vertices(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.vertices {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        norm(sub(hi, lo))
    }

    /// True when every edge belongs to exactly two faces.
    pub fn is_closed(&self) -> bool {
        edge_face_counts(&self.faces).values().all(|&c| c == 2)
    }

    /// Number of connected components of the vertex graph (isolated vertices count).
    pub fn connected_components(&self) -> usize {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            for k in 0..3 {
                let a = find(&mut parent, f[k]);
                let b = find(&mut parent, f[(k + 1) % 3]);
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..n).filter(|&i| find(&mut parent, i) == i).count()
    }

    /// Euler characteristic `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        let e = edge_face_counts(&self.faces).len() as i64;
        self.vertices.len() as i64 - e + self.faces.len() as i64
    }

    /// Errors unless the mesh is closed and connected.
    pub fn ensure_closed(&self) -> Result<()> {
        let counts = edge_face_counts(&self.faces);
        let mut boundary: Vec<_> = counts.iter().filter(|(_, &c)| c == 1).map(|(e, _)| *e).collect();
        boundary.sort_unstable();
        if let Some(&(a, b)) = boundary.first() {
            return Err(Error::Boundary(a, b));
        }
        Ok(())
    }
}

fn edge_face_counts(faces: &[[usize; 3]]) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::with_capacity(faces.len() * 3 / 2);
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}

/// One undirected edge with its incident faces and the angles opposite to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub vertices: [usize; 2],
    faces: [usize; 2],
    angles: [f64; 2],
    face_count: usize,
}

impl Edge {
    pub fn faces(&self) -> &[usize] {
        &self.faces[..self.face_count]
    }

    /// Angles (radians) at the vertices opposite this edge, one per incident face.
    pub fn opposite_angles(&self) -> &[f64] {
        &self.angles[..self.face_count]
    }

    pub fn is_boundary(&self) -> bool {
        self.face_count == 1
    }
}

/// Unique undirected edges, sorted by `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList {
    pub edges: Vec<Edge>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().map(|e| (e.vertices[0], e.vertices[1]))
    }

    /// Errors with the first boundary edge, if any.
    pub fn ensure_closed(&self) -> Result<()> {
        match self.edges.iter().find(|e| e.is_boundary()) {
            Some(e) => Err(Error::Boundary(e.vertices[0], e.vertices[1])),
            None => Ok(()),
        }
    }
}

/// Interior angle of triangle `(a, b, c)` at `c`.
pub(crate) fn angle_at(a: Point, b: Point, c: Point) -> f64 {
    let u = sub(a, c);
    let v = sub(b, c);
    norm(cross(u, v)).atan2(dot(u, v))
}

pub fn build_edges(mesh: &Mesh) -> Result<EdgeList> {
    let verts = mesh.vertices();
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges: Vec<Edge> = Vec::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        for k in 0..3 {
            let (a, b, opp) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
            let key = (a.min(b), a.max(b));
            let angle = angle_at(verts[a], verts[b], verts[opp]);
            let slot = *index.entry(key).or_insert_with(|| {
                edges.push(Edge {
                    vertices: [key.0, key.1],
                    faces: [0; 2],
                    angles: [0.0; 2],
                    face_count: 0,
                });
                edges.len() - 1
            });
            let e = &mut edges[slot];
            if e.face_count == 2 {
                return Err(Error::NonManifold(key.0, key.1));
            }
            e.faces[e.face_count] = fi;
            e.angles[e.face_count] = angle;
            e.face_count += 1;
        }
    }
    edges.sort_by_key(|e| e.vertices);
    Ok(EdgeList { edges })
}

/// Per-face areas. Faces below `1e-12 * diag^2` are rejected.
pub fn triangle_areas(mesh: &Mesh) -> Result<Vec<f64>> {
    let diag = mesh.bounding_box_diagonal();
    let threshold = 1e-12 * diag * diag;
    let v = mesh.vertices();
    mesh.faces()
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let area = 0.5 * norm(cross(sub(v[f[1]], v[f[0]]), sub(v[f[2]], v[f[0]])));
            if area < threshold || area == 0.0 {
                Err(Error::DegenerateFace { face: fi, area })
            } else {
                Ok(area)
            }
        })
        .collect()
}

/// Sorted one-ring neighbour lists.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexAdjacency {
    rings: Vec<Vec<usize>>,
}

impl VertexAdjacency {
    pub fn ring(&self, i: usize) -> &[usize] {
        &self.rings[i]
    }

    pub fn len(&self) -> usize {
        self.rings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rings.is_empty()
    }

    /// All ordered pairs `(i, j)` with `j` in the ring of `i`.
    pub fn directed_pairs(&self) -> Vec<(usize, usize)> {
        self.rings
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&j| (i, j)))
            .collect()
    }
}

pub fn one_rings(mesh: &Mesh) -> VertexAdjacency {
    let mut rings = vec![Vec::new(); mesh.vertex_count()];
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            rings[a].push(b);
            rings[b].push(a);
        }
    }
    for r in &mut rings {
        r.sort_unstable();
        r.dedup();
    }
    VertexAdjacency { rings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn equilateral() -> Mesh {
        let h = 3f64.sqrt() / 2.0;
        Mesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn single_triangle_edges() {
        let edges = build_edges(&equilateral()).unwrap();
        assert_eq!(edges.len(), 3);
        for e in &edges.edges {
            assert_eq!(e.opposite_angles().len(), 1);
            assert!((e.opposite_angles()[0] - PI / 3.0).abs() < 1e-12);
            assert!(e.is_boundary());
        }
        assert!(matches!(edges.ensure_closed(), Err(Error::Boundary(0, 1))));
    }

    #[test]
    fn tetrahedron_edges_and_rings() {
        let m = shapes::tetrahedron();
        let edges = build_edges(&m).unwrap();
        assert_eq!(edges.len(), 3 * 4 - 6);
        assert!(edges.edges.iter().all(|e| e.faces().len() == 2));
        let rings = one_rings(&m);
        assert!((0..4).all(|i| rings.ring(i).len() == 3));
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn icosahedron_valence() {
        let m = shapes::icosahedron();
        let rings = one_rings(&m);
        assert!((0..12).all(|i| rings.ring(i).len() == 5));
        assert_eq!(build_edges(&m).unwrap().len(), 30);
    }

    #[test]
    fn triangle_rings() {
        let rings = one_rings(&equilateral());
        assert_eq!(rings.ring(0), &[1, 2]);
        assert_eq!(rings.ring(2), &[0, 1]);
    }

    #[test]
    fn non_manifold_fan_is_rejected() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        let f = vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]];
        assert!(matches!(Mesh::new(v, f), Err(Error::NonManifold(0, 1))));
    }

    #[test]
    fn bad_indices() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(matches!(
            Mesh::new(v.clone(), vec![[0, 1, 3]]),
            Err(Error::IndexOutOfRange { index: 3, count: 3 })
        ));
        assert!(matches!(Mesh::new(v, vec![[0, 1, 1]]), Err(Error::RepeatedIndex(0))));
    }

    #[test]
    fn areas() {
        let right = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert_eq!(triangle_areas(&right).unwrap(), vec![0.5]);
        let a = triangle_areas(&equilateral()).unwrap()[0];
        assert!((a - 0.4330127018922193).abs() < 1e-12);
        let collinear = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(triangle_areas(&collinear), Err(Error::DegenerateFace { face: 0, .. })));
    }

    #[test]
    fn angle_sums_and_euler_on_icosphere() {
        let m = shapes::icosphere(1.0, 3);
        assert_eq!(m.vertex_count(), 642);
        assert_eq!(m.euler_characteristic(), 2);
        assert_eq!(build_edges(&m).unwrap().len(), 3 * 642 - 6);
        assert_eq!(m.connected_components(), 1);
        let v = m.vertices();
        for f in m.faces() {
            let s = angle_at(v[f[1]], v[f[2]], v[f[0]])
                + angle_at(v[f[2]], v[f[0]], v[f[1]])
                + angle_at(v[f[0]], v[f[1]], v[f[2]]);
            assert!((s - PI).abs() < 1e-9);
        }
    }
}
