//! Differentiable marching tetrahedra.
//!
//! A mesh vertex is placed on every grid edge `(i, j)` whose endpoints fall on
//! opposite sides of the zero level set, at
//!
//! ```text
//! m = (v'_i s_j - v'_j s_i) / (s_j - s_i),   v' = v + dv
//! ```
//!
//! which is smooth in `s` and `dv` wherever the sign pattern is fixed.
//! [`marching_tetrahedra_backward`] returns the exact vector–Jacobian product.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::math::{triangle_area, Vec3};
use crate::tetgrid::{is_inside, GeometryField, TetGrid, TET_EDGES};

/// Crossing edges per sign pattern (bit `i` set when vertex `i` is inside), listed
/// in cyclic order around the cut polygon. Local edge ids index [`TET_EDGES`].
pub const CASE_TABLE: [&[usize]; 16] = [
    &[],
    &[0, 1, 2],
    &[0, 3, 4],
    &[1, 2, 4, 3],
    &[1, 3, 5],
    &[0, 2, 5, 3],
    &[0, 1, 5, 4],
    &[2, 4, 5],
    &[2, 4, 5],
    &[0, 1, 5, 4],
    &[0, 2, 5, 3],
    &[1, 3, 5],
    &[1, 2, 4, 3],
    &[0, 3, 4],
    &[0, 1, 2],
    &[],
];

/// Crossings closer than this edge fraction to a grid vertex share one mesh vertex.
pub const VERTEX_WELD_FRACTION: f64 = 1e-9;

/// Triangles with area below this are dropped after extraction.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Welded, oriented triangle mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Grid edge `(i, j)`, `i < j`, that produced each vertex. Empty for meshes
    /// that did not come from marching tetrahedra.
    pub vertex_origin: Vec<[u32; 2]>,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            faces,
            vertex_origin: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_vertices(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.face_vertices(f);
                triangle_area(&a, &b, &c)
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len() as u32;
        for (i, f) in self.faces.iter().enumerate() {
            ensure!(f.iter().all(|&v| v < nv), "face {i} references a vertex out of range");
        }
        Ok(())
    }
}

/// Per-grid-vertex gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGradients {
    pub d_sdf: Vec<f64>,
    pub d_deform: Vec<Vec3>,
}

impl MeshGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_sdf: vec![0.0; n],
            d_deform: vec![Vec3::zeros(); n],
        }
    }
}

/// `v'_i = v_i + dv_i`.
pub fn deformed_vertices(grid: &TetGrid, field: &GeometryField) -> Result<Vec<Vec3>> {
    field.check_size(grid)?;
    Ok(grid.vertices.iter().zip(&field.deform).map(|(v, d)| v + d).collect())
}

/// Zero crossing on the edge between `(pa, sa)` and `(pb, sb)`.
#[inline]
pub fn edge_crossing(pa: &Vec3, sa: f64, pb: &Vec3, sb: f64) -> Vec3 {
    (pa * sb - pb * sa) / (sb - sa)
}

#[inline]
fn case_index(tet: &[u32; 4], sdf: &[f64]) -> usize {
    let mut idx = 0;
    for (k, &v) in tet.iter().enumerate() {
        if is_inside(sdf[v as usize]) {
            idx |= 1 << k;
        }
    }
    idx
}

/// Extract the zero level set as a welded triangle mesh whose normals point
/// towards positive SDF.
pub fn marching_tetrahedra(grid: &TetGrid, field: &GeometryField) -> Result<SurfaceMesh> {
    field.check_size(grid)?;
    let pos = deformed_vertices(grid, field)?;
    let sdf = &field.sdf;

    // per-tet polygon of global edge keys, computed in parallel, welded in tet order
    let polys: Vec<Option<(usize, [[u32; 2]; 4], usize)>> = grid
        .tets
        .par_iter()
        .enumerate()
        .map(|(t, tet)| {
            let case = case_index(tet, sdf);
            let edges = CASE_TABLE[case];
            if edges.is_empty() {
                return None;
            }
            let mut keys = [[0u32; 2]; 4];
            for (k, &e) in edges.iter().enumerate() {
                let [a, b] = TET_EDGES[e];
                let (u, v) = (tet[a], tet[b]);
                keys[k] = [u.min(v), u.max(v)];
            }
            Some((t, keys, edges.len()))
        })
        .collect();

    let mut index: HashMap<[u32; 2], u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut origin = Vec::new();
    let mut faces = Vec::new();
    for (t, keys, n) in polys.into_iter().flatten() {
        let mut ids = [0u32; 4];
        for k in 0..n {
            let key = keys[k];
            let [i, j] = key;
            // crossings that land on a grid vertex (up to VERTEX_WELD_FRACTION of the
            // edge) are welded to that vertex so the surface stays closed there
            let t = sdf[i as usize] / (sdf[i as usize] - sdf[j as usize]);
            let weld = if t <= VERTEX_WELD_FRACTION {
                [i, i]
            } else if t >= 1.0 - VERTEX_WELD_FRACTION {
                [j, j]
            } else {
                key
            };
            ids[k] = *index.entry(weld).or_insert_with(|| {
                let (i, j) = (i as usize, j as usize);
                vertices.push(edge_crossing(&pos[i], sdf[i], &pos[j], sdf[j]));
                origin.push(key);
                (vertices.len() - 1) as u32
            });
        }
        let tris: Vec<[u32; 3]> = if n == 3 {
            vec![[ids[0], ids[1], ids[2]]]
        } else {
            // split the quad along the diagonal through its smallest edge key
            let start = (0..4).min_by_key(|&k| keys[k]).unwrap();
            let q = |k: usize| ids[(start + k) % 4];
            vec![[q(0), q(1), q(2)], [q(0), q(2), q(3)]]
        };
        let tet = &grid.tets[t];
        let (mut c_in, mut n_in, mut c_out, mut n_out) = (Vec3::zeros(), 0.0, Vec3::zeros(), 0.0);
        for &v in tet {
            if is_inside(sdf[v as usize]) {
                c_in += pos[v as usize];
                n_in += 1.0;
            } else {
                c_out += pos[v as usize];
                n_out += 1.0;
            }
        }
        let outward = c_out / n_out - c_in / n_in;
        for mut tri in tris {
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                continue;
            }
            let [a, b, c] = tri.map(|i| vertices[i as usize]);
            let normal = (b - a).cross(&(c - a));
            if 0.5 * normal.norm() < DEGENERATE_AREA {
                continue;
            }
            if normal.dot(&outward) < 0.0 {
                tri.swap(1, 2);
            }
            faces.push(tri);
        }
    }

    // drop vertices only referenced by degenerate faces
    let mut used = vec![false; vertices.len()];
    for f in &faces {
        for &v in f {
            used[v as usize] = true;
        }
    }
    if used.iter().all(|&u| u) {
        return Ok(SurfaceMesh {
            vertices,
            faces,
            vertex_origin: origin,
        });
    }
    let mut remap = vec![u32::MAX; vertices.len()];
    let mut new_vertices = Vec::new();
    let mut new_origin = Vec::new();
    for (i, &u) in used.iter().enumerate() {
        if u {
            remap[i] = new_vertices.len() as u32;
            new_vertices.push(vertices[i]);
            new_origin.push(origin[i]);
        }
    }
    for f in &mut faces {
        for v in f.iter_mut() {
            *v = remap[*v as usize];
        }
    }
    Ok(SurfaceMesh {
        vertices: new_vertices,
        faces,
        vertex_origin: new_origin,
    })
}

/// Partial derivatives of `m` with respect to `(s_i, s_j)`; the position
/// derivatives are `s_j / d` and `-s_i / d` times the identity.
#[inline]
pub fn crossing_jacobian(pi: &Vec3, si: f64, pj: &Vec3, sj: f64) -> (Vec3, Vec3, f64, f64) {
    let d = sj - si;
    let d2 = d * d;
    let dm_dsi = (pi - pj) * (sj / d2);
    let dm_dsj = (pj - pi) * (si / d2);
    (dm_dsi, dm_dsj, sj / d, -si / d)
}

/// Vector–Jacobian product of [`marching_tetrahedra`]: maps per-mesh-vertex
/// gradients `upstream` onto grid-vertex SDF values and deformations.
pub fn marching_tetrahedra_backward(
    grid: &TetGrid,
    field: &GeometryField,
    mesh: &SurfaceMesh,
    upstream: &[Vec3],
) -> Result<MeshGradients> {
    field.check_size(grid)?;
    ensure!(
        mesh.vertex_origin.len() == mesh.vertices.len(),
        "mesh carries no marching-tetrahedra provenance"
    );
    ensure!(
        upstream.len() == mesh.vertices.len(),
        "upstream has {} entries for {} mesh vertices",
        upstream.len(),
        mesh.vertices.len()
    );
    let nv = grid.num_vertices();
    let pos = deformed_vertices(grid, field)?;
    let sdf = &field.sdf;

    let contrib: Vec<Result<(usize, usize, f64, f64, Vec3, Vec3)>> = mesh
        .vertex_origin
        .par_iter()
        .zip(upstream.par_iter())
        .zip(mesh.vertices.par_iter())
        .map(|((&[i, j], g), m)| {
            let (i, j) = (i as usize, j as usize);
            ensure!(i < nv && j < nv, "mesh vertex origin ({i}, {j}) outside grid");
            ensure!(
                is_inside(sdf[i]) != is_inside(sdf[j]),
                "mesh vertex origin ({i}, {j}) is not a sign-flip edge of this field"
            );
            let recomputed = edge_crossing(&pos[i], sdf[i], &pos[j], sdf[j]);
            ensure!((recomputed - m).norm() <= 1e-9, "mesh vertex does not match this field");
            let (dsi, dsj, wi, wj) = crossing_jacobian(&pos[i], sdf[i], &pos[j], sdf[j]);
            Ok((i, j, g.dot(&dsi), g.dot(&dsj), g * wi, g * wj))
        })
        .collect();

    let mut out = MeshGradients::zeros(nv);
    for c in contrib {
        let (i, j, gsi, gsj, gvi, gvj) = c?;
        out.d_sdf[i] += gsi;
        out.d_sdf[j] += gsj;
        out.d_deform[i] += gvi;
        out.d_deform[j] += gvj;
    }
    Ok(out)
}

/// Euler characteristic, boundary edge count and number of face-connected components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopologyStats {
    pub euler_characteristic: i64,
    pub boundary_edges: usize,
    pub components: usize,
}

pub fn mesh_topology_stats(mesh: &SurfaceMesh) -> TopologyStats {
    if mesh.faces.is_empty() {
        return TopologyStats {
            euler_characteristic: 0,
            boundary_edges: 0,
            components: 0,
        };
    }
    let mut edge_count: HashMap<(u32, u32), usize> = HashMap::new();
    let mut referenced = vec![false; mesh.vertices.len()];
    let mut parent: Vec<usize> = (0..mesh.vertices.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for f in &mesh.faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            referenced[a as usize] = true;
            let (ra, rb) = (find(&mut parent, a as usize), find(&mut parent, b as usize));
            if ra != rb {
                parent[ra] = rb;
            }
        }
    }
    let v = referenced.iter().filter(|&&r| r).count() as i64;
    let e = edge_count.len() as i64;
    let f = mesh.faces.len() as i64;
    let boundary_edges = edge_count.values().filter(|&&n| n == 1).count();
    let mut roots: Vec<usize> = (0..mesh.vertices.len())
        .filter(|&i| referenced[i])
        .map(|i| find(&mut parent, i))
        .collect();
    roots.sort_unstable();
    roots.dedup();
    TopologyStats {
        euler_characteristic: v - e + f,
        boundary_edges,
        components: roots.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::{sphere_sdf, torus_sdf};

    fn single_tet(sdf: [f64; 4]) -> (TetGrid, GeometryField) {
        let g = TetGrid::from_parts(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2, 3]],
            1,
            0,
        );
        let mut f = GeometryField::constant(&g, 0.0);
        f.sdf = sdf.to_vec();
        (g, f)
    }

    #[test]
    fn all_outside_is_empty() {
        let g = TetGrid::regular(3).unwrap();
        let m = marching_tetrahedra(&g, &GeometryField::constant(&g, 0.5)).unwrap();
        assert!(m.is_empty() && m.vertices.is_empty());
    }

    #[test]
    fn single_inside_vertex_gives_midpoint_triangle() {
        let (g, f) = single_tet([-1.0, 1.0, 1.0, 1.0]);
        let m = marching_tetrahedra(&g, &f).unwrap();
        assert_eq!(m.faces.len(), 1);
        let mut expected = vec![Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.0, 0.5, 0.0), Vec3::new(0.0, 0.0, 0.5)];
        for v in &m.vertices {
            let k = expected.iter().position(|e| (e - v).norm() < 1e-15).expect("midpoint");
            expected.remove(k);
        }
        // normal points away from the inside vertex at the origin
        let [a, b, c] = m.face_vertices(0);
        assert!((b - a).cross(&(c - a)).dot(&Vec3::new(1.0, 1.0, 1.0)) > 0.0);
    }

    #[test]
    fn linear_zero_crossing() {
        let m = edge_crossing(&Vec3::zeros(), -1.0, &Vec3::x(), 3.0);
        assert!((m - Vec3::new(0.25, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn quad_case_emits_two_triangles() {
        let (g, f) = single_tet([-1.0, -1.0, 1.0, 1.0]);
        let m = marching_tetrahedra(&g, &f).unwrap();
        assert_eq!(m.faces.len(), 2);
        assert_eq!(m.vertices.len(), 4);
    }

    #[test]
    fn table_polygons_are_cycles() {
        for (case, edges) in CASE_TABLE.iter().enumerate() {
            for k in 0..edges.len() {
                let a = TET_EDGES[edges[k]];
                let b = TET_EDGES[edges[(k + 1) % edges.len()]];
                assert!(a.iter().any(|v| b.contains(v)), "case {case}: edges {a:?} {b:?} not adjacent");
            }
        }
    }

    #[test]
    fn backward_zero_upstream_and_locality() {
        let g = TetGrid::regular(4).unwrap();
        let f = GeometryField::from_sdf(&g, |p| sphere_sdf(p, 0.45));
        let m = marching_tetrahedra(&g, &f).unwrap();
        let zero = marching_tetrahedra_backward(&g, &f, &m, &vec![Vec3::zeros(); m.vertices.len()]).unwrap();
        assert!(zero.d_sdf.iter().all(|&x| x == 0.0));
        let ones = marching_tetrahedra_backward(&g, &f, &m, &vec![Vec3::new(1.0, 1.0, 1.0); m.vertices.len()]).unwrap();
        let mut touched = vec![false; g.num_vertices()];
        for &[i, j] in &m.vertex_origin {
            touched[i as usize] = true;
            touched[j as usize] = true;
        }
        for v in 0..g.num_vertices() {
            if !touched[v] {
                assert_eq!(ones.d_sdf[v], 0.0);
                assert_eq!(ones.d_deform[v], Vec3::zeros());
            }
        }
    }

    #[test]
    fn backward_rejects_foreign_mesh() {
        let g = TetGrid::regular(4).unwrap();
        let f = GeometryField::from_sdf(&g, |p| sphere_sdf(p, 0.6));
        let m = marching_tetrahedra(&g, &f).unwrap();
        assert!(!m.is_empty());
        let other = GeometryField::from_sdf(&g, |p| sphere_sdf(p, 0.9));
        let up = vec![Vec3::zeros(); m.vertices.len()];
        assert!(marching_tetrahedra_backward(&g, &other, &m, &up).is_err());
        let plain = SurfaceMesh::new(m.vertices.clone(), m.faces.clone());
        assert!(marching_tetrahedra_backward(&g, &f, &plain, &up).is_err());
    }

    #[test]
    fn single_edge_fd_check() {
        let (pi, pj) = (Vec3::zeros(), Vec3::x());
        let (si, sj) = (-1.0, 3.0);
        let (_, dsj, _, _) = crossing_jacobian(&pi, si, &pj, sj);
        let h = 1e-6;
        let fd = (edge_crossing(&pi, si, &pj, sj + h).x - edge_crossing(&pi, si, &pj, sj - h).x) / (2.0 * h);
        assert!(((dsj.x - fd) / fd).abs() < 1e-5);
    }

    #[test]
    fn topology_of_analytic_shapes() {
        let g = TetGrid::regular(24).unwrap();
        let f = GeometryField::from_sdf(&g, |p| sphere_sdf(p, 0.5));
        let st = mesh_topology_stats(&marching_tetrahedra(&g, &f).unwrap());
        assert_eq!((st.euler_characteristic, st.boundary_edges, st.components), (2, 0, 1));

        let g = TetGrid::regular(32).unwrap();
        let f = GeometryField::from_sdf(&g, |p| torus_sdf(p, 0.5, 0.2));
        let st = mesh_topology_stats(&marching_tetrahedra(&g, &f).unwrap());
        assert_eq!((st.euler_characteristic, st.boundary_edges), (0, 0));

        let empty = mesh_topology_stats(&SurfaceMesh::default());
        assert_eq!((empty.euler_characteristic, empty.boundary_edges, empty.components), (0, 0, 0));
    }

    #[test]
    fn deformed_vertices_translate() {
        let g = TetGrid::regular(2).unwrap();
        let mut f = GeometryField::constant(&g, 0.1);
        let d = Vec3::new(f.deform_bound, 0.0, 0.0);
        f.deform = vec![d; g.num_vertices()];
        let p = deformed_vertices(&g, &f).unwrap();
        for (a, b) in p.iter().zip(&g.vertices) {
            assert_eq!(a - b, d);
        }
        let wrong = GeometryField::constant(&TetGrid::regular(1).unwrap(), 0.1);
        assert!(deformed_vertices(&g, &wrong).is_err());
    }
}
