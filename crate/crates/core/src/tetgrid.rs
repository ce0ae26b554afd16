//! Deformable tetrahedral grids and the per-vertex geometry field they carry.

use std::collections::{HashMap, HashSet};

use crate::error::{ensure, Error, Result};
use crate::math::{tet_volume, Vec3};

/// Tetrahedral grid over `[-1, 1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct TetGrid {
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[u32; 4]>,
    /// Unique undirected edges, `(min, max)` ordered and sorted lexicographically.
    pub edges: Vec<[u32; 2]>,
    /// Cube cells per axis of the base lattice.
    pub resolution: u32,
    /// Number of subdivision passes applied since construction.
    pub level: u32,
}

/// Kuhn (Freudenthal) split of the unit cube: every path from corner 000 to 111
/// along the axis permutations. Corner index bits are `x | y << 1 | z << 2`.
const KUHN_TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// The six edges of a tetrahedron as local vertex pairs.
pub const TET_EDGES: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];

impl TetGrid {
    /// Regular grid with `res` cube cells per axis, each split into six tetrahedra.
    pub fn regular(res: u32) -> Result<Self> {
        ensure!(res >= 1, "grid resolution must be >= 1, got {res}");
        let n = res as usize + 1;
        let idx = |i: usize, j: usize, k: usize| (i + n * (j + n * k)) as u32;
        let mut vertices = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let f = |c: usize| -1.0 + 2.0 * c as f64 / res as f64;
                    vertices.push(Vec3::new(f(i), f(j), f(k)));
                }
            }
        }
        let r = res as usize;
        let mut tets = Vec::with_capacity(6 * r * r * r);
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    let corner = |c: usize| idx(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                    for t in KUHN_TETS.iter() {
                        tets.push([corner(t[0]), corner(t[1]), corner(t[2]), corner(t[3])]);
                    }
                }
            }
        }
        Ok(Self::from_parts(vertices, tets, res, 0))
    }

    /// Build a grid from explicit vertices and tets; edges are derived.
    pub fn from_parts(vertices: Vec<Vec3>, tets: Vec<[u32; 4]>, resolution: u32, level: u32) -> Self {
        let edges = unique_edges(&tets);
        Self {
            vertices,
            tets,
            edges,
            resolution,
            level,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    /// Nominal per-component deformation bound `1 / tet_res`.
    pub fn deform_bound(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    /// Edge length of one base cube cell.
    pub fn cell_size(&self) -> f64 {
        2.0 / self.resolution as f64 / (1u32 << self.level) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len() as u32;
        for (t, tet) in self.tets.iter().enumerate() {
            ensure!(tet.iter().all(|&v| v < nv), "tet {t} references a vertex out of range");
        }
        Ok(())
    }
}

/// Unique undirected edges of a tet list, sorted lexicographically.
pub fn unique_edges(tets: &[[u32; 4]]) -> Vec<[u32; 2]> {
    let mut edges: Vec<[u32; 2]> = Vec::with_capacity(tets.len() * 6);
    for tet in tets {
        for [a, b] in TET_EDGES {
            let (u, v) = (tet[a], tet[b]);
            edges.push([u.min(v), u.max(v)]);
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Per-vertex SDF value and deformation offset.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryField {
    pub sdf: Vec<f64>,
    pub deform: Vec<Vec3>,
    /// Per-component bound on `deform`.
    pub deform_bound: f64,
}

impl GeometryField {
    /// All-zero deformation, SDF sampled from `f` and clamped to `[-1, 1]`.
    pub fn from_sdf(grid: &TetGrid, mut f: impl FnMut(&Vec3) -> f64) -> Self {
        Self {
            sdf: grid.vertices.iter().map(|p| f(p).clamp(-1.0, 1.0)).collect(),
            deform: vec![Vec3::zeros(); grid.num_vertices()],
            deform_bound: grid.deform_bound(),
        }
    }

    pub fn constant(grid: &TetGrid, s: f64) -> Self {
        Self::from_sdf(grid, |_| s)
    }

    pub fn len(&self) -> usize {
        self.sdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sdf.is_empty()
    }

    pub fn check_size(&self, grid: &TetGrid) -> Result<()> {
        ensure!(
            self.sdf.len() == grid.num_vertices() && self.deform.len() == grid.num_vertices(),
            "field has {} sdf / {} deform entries but grid has {} vertices",
            self.sdf.len(),
            self.deform.len(),
            grid.num_vertices()
        );
        Ok(())
    }

    /// Checks sizes and value bounds.
    pub fn validate(&self, grid: &TetGrid) -> Result<()> {
        self.check_size(grid)?;
        for (i, s) in self.sdf.iter().enumerate() {
            ensure!(s.is_finite() && s.abs() <= 1.0, "sdf[{i}] = {s} outside [-1, 1]");
        }
        let b = self.deform_bound * (1.0 + 1e-12);
        for (i, d) in self.deform.iter().enumerate() {
            ensure!(d.iter().all(|c| c.is_finite() && c.abs() <= b), "deform[{i}] exceeds bound {}", self.deform_bound);
        }
        Ok(())
    }

    /// Clamp values into the type bounds.
    pub fn clamp_in_place(&mut self) {
        let b = self.deform_bound;
        for s in &mut self.sdf {
            *s = s.clamp(-1.0, 1.0);
        }
        for d in &mut self.deform {
            d.apply(|c| *c = c.clamp(-b, b));
        }
    }
}

/// `s <= 0` counts as inside.
#[inline]
pub fn is_inside(s: f64) -> bool {
    s <= 0.0
}

/// Tets whose four vertices do not all share the same inside/outside state, ascending.
pub fn surface_tets(grid: &TetGrid, field: &GeometryField) -> Result<Vec<usize>> {
    field.check_size(grid)?;
    Ok(grid
        .tets
        .iter()
        .enumerate()
        .filter(|(_, tet)| {
            let n_in = tet.iter().filter(|&&v| is_inside(field.sdf[v as usize])).count();
            n_in != 0 && n_in != 4
        })
        .map(|(t, _)| t)
        .collect())
}

/// `s' = s + ds`, `dv' = dv + ddv`, clamped back into bounds.
pub fn apply_residuals(field: &GeometryField, dsdf: &[f64], ddeform: &[Vec3]) -> Result<GeometryField> {
    ensure!(
        dsdf.len() == field.len() && ddeform.len() == field.len(),
        "residual sizes ({}, {}) do not match field size {}",
        dsdf.len(),
        ddeform.len(),
        field.len()
    );
    let b = field.deform_bound;
    Ok(GeometryField {
        sdf: field.sdf.iter().zip(dsdf).map(|(s, d)| (s + d).clamp(-1.0, 1.0)).collect(),
        deform: field
            .deform
            .iter()
            .zip(ddeform)
            .map(|(v, d)| (v + d).map(|c| c.clamp(-b, b)))
            .collect(),
        deform_bound: b,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum SplitKind {
    Keep,
    Red,
    /// One split edge, given as local edge index.
    Edge(usize),
    /// The three edges of one face split; local index of the apex vertex.
    Face(usize),
}

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

fn classify(tet: &[u32; 4], split: &HashSet<(u32, u32)>) -> Option<SplitKind> {
    let mut marked = [false; 6];
    let mut count = 0;
    for (e, [a, b]) in TET_EDGES.iter().enumerate() {
        if split.contains(&edge_key(tet[*a], tet[*b])) {
            marked[e] = true;
            count += 1;
        }
    }
    match count {
        0 => Some(SplitKind::Keep),
        6 => Some(SplitKind::Red),
        1 => Some(SplitKind::Edge(marked.iter().position(|&m| m).unwrap())),
        3 => {
            // three split edges closing a triangle leave exactly one vertex untouched
            let mut touched = [false; 4];
            for (e, [a, b]) in TET_EDGES.iter().enumerate() {
                if marked[e] {
                    touched[*a] = true;
                    touched[*b] = true;
                }
            }
            let free: Vec<usize> = (0..4).filter(|&v| !touched[v]).collect();
            if free.len() == 1 {
                Some(SplitKind::Face(free[0]))
            } else {
                None
            }
        }
        _ => None,
    }
}

/// Refine `selected` tets into eight children through edge midpoints.
///
/// Neighbouring tets that end up with split edges are closed with green
/// bisections (one split edge, or the three edges of one face); any other split
/// pattern promotes the tet to a full red split, iterated to a fixed point so the
/// output grid stays conforming. Midpoint SDF is the mean of the endpoints,
/// midpoint deformation the mean clamped to half the field's bound.
pub fn subdivide(grid: &TetGrid, field: &GeometryField, selected: &[usize]) -> Result<(TetGrid, GeometryField)> {
    field.check_size(grid)?;
    for &t in selected {
        if t >= grid.num_tets() {
            return Err(Error::invalid(format!("selected tet {t} out of range ({} tets)", grid.num_tets())));
        }
    }
    let mut red = vec![false; grid.num_tets()];
    let mut split: HashSet<(u32, u32)> = HashSet::new();
    for &t in selected {
        red[t] = true;
        let tet = &grid.tets[t];
        for [a, b] in TET_EDGES {
            split.insert(edge_key(tet[a], tet[b]));
        }
    }
    // closure: promote tets whose split pattern has no green template
    loop {
        let mut changed = false;
        for (t, tet) in grid.tets.iter().enumerate() {
            if red[t] {
                continue;
            }
            match classify(tet, &split) {
                Some(SplitKind::Red) => red[t] = true,
                Some(_) => {}
                None => {
                    red[t] = true;
                    for [a, b] in TET_EDGES {
                        changed |= split.insert(edge_key(tet[a], tet[b]));
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut split_sorted: Vec<(u32, u32)> = split.iter().copied().collect();
    split_sorted.sort_unstable();
    let n_old = grid.num_vertices();
    let mut vertices = grid.vertices.clone();
    let mut sdf = field.sdf.clone();
    let mut deform = field.deform.clone();
    let half = 0.5 * field.deform_bound;
    let mut midpoint: HashMap<(u32, u32), u32> = HashMap::with_capacity(split_sorted.len());
    for (rank, &(a, b)) in split_sorted.iter().enumerate() {
        let (ai, bi) = (a as usize, b as usize);
        vertices.push(0.5 * (grid.vertices[ai] + grid.vertices[bi]));
        sdf.push(0.5 * (field.sdf[ai] + field.sdf[bi]));
        deform.push((0.5 * (field.deform[ai] + field.deform[bi])).map(|c| c.clamp(-half, half)));
        midpoint.insert((a, b), (n_old + rank) as u32);
    }
    let mid = |a: u32, b: u32| midpoint[&edge_key(a, b)];

    let mut tets = Vec::with_capacity(grid.num_tets() + 8 * selected.len());
    for (t, tet) in grid.tets.iter().enumerate() {
        let kind = if red[t] {
            SplitKind::Red
        } else {
            classify(tet, &split).expect("closure leaves only green patterns")
        };
        let parent_sign = tet_volume(
            &grid.vertices[tet[0] as usize],
            &grid.vertices[tet[1] as usize],
            &grid.vertices[tet[2] as usize],
            &grid.vertices[tet[3] as usize],
        )
        .signum();
        let mut push = |mut c: [u32; 4]| {
            let v = tet_volume(
                &vertices[c[0] as usize],
                &vertices[c[1] as usize],
                &vertices[c[2] as usize],
                &vertices[c[3] as usize],
            );
            if v.signum() != parent_sign {
                c.swap(2, 3);
            }
            tets.push(c);
        };
        let [a, b, c, d] = *tet;
        match kind {
            SplitKind::Keep => push(*tet),
            SplitKind::Red => {
                let (ab, ac, ad) = (mid(a, b), mid(a, c), mid(a, d));
                let (bc, bd, cd) = (mid(b, c), mid(b, d), mid(c, d));
                push([a, ab, ac, ad]);
                push([ab, b, bc, bd]);
                push([ac, bc, c, cd]);
                push([ad, bd, cd, d]);
                // inner octahedron cut along the ab-cd diagonal
                push([ab, cd, ac, bc]);
                push([ab, cd, bc, bd]);
                push([ab, cd, bd, ad]);
                push([ab, cd, ad, ac]);
            }
            SplitKind::Edge(e) => {
                let [la, lb] = TET_EDGES[e];
                let m = mid(tet[la], tet[lb]);
                let mut first = *tet;
                first[lb] = m;
                let mut second = *tet;
                second[la] = m;
                push(first);
                push(second);
            }
            SplitKind::Face(apex) => {
                let f: Vec<u32> = (0..4).filter(|&i| i != apex).map(|i| tet[i]).collect();
                let (p, q, r, s) = (f[0], f[1], f[2], tet[apex]);
                let (pq, qr, rp) = (mid(p, q), mid(q, r), mid(r, p));
                push([p, pq, rp, s]);
                push([q, qr, pq, s]);
                push([r, rp, qr, s]);
                push([pq, qr, rp, s]);
            }
        }
    }

    let new_grid = TetGrid::from_parts(vertices, tets, grid.resolution, grid.level + 1);
    let new_field = GeometryField {
        sdf,
        deform,
        deform_bound: field.deform_bound,
    };
    Ok((new_grid, new_field))
}

/// Counts how many tets reference each (sorted) triangular face.
pub fn face_multiplicity(tets: &[[u32; 4]]) -> HashMap<[u32; 3], usize> {
    let mut counts = HashMap::new();
    for tet in tets {
        for skip in 0..4 {
            let mut f = [0u32; 3];
            let mut k = 0;
            for (i, &v) in tet.iter().enumerate() {
                if i != skip {
                    f[k] = v;
                    k += 1;
                }
            }
            f.sort_unstable();
            *counts.entry(f).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::sphere_sdf;

    fn brute_force_edges(tets: &[[u32; 4]]) -> usize {
        let nv = tets.iter().flatten().max().map_or(0, |&m| m as usize + 1);
        let mut count = 0;
        for i in 0..nv as u32 {
            for j in (i + 1)..nv as u32 {
                if tets.iter().any(|t| t.contains(&i) && t.contains(&j)) {
                    count += 1;
                }
            }
        }
        count
    }

    fn on_domain_boundary(grid: &TetGrid, f: &[u32; 3]) -> bool {
        (0..3).any(|axis| {
            let c = grid.vertices[f[0] as usize][axis];
            c.abs() == 1.0 && f.iter().all(|&v| grid.vertices[v as usize][axis] == c)
        })
    }

    fn assert_conforming(grid: &TetGrid) {
        for (f, n) in face_multiplicity(&grid.tets) {
            if on_domain_boundary(grid, &f) {
                assert_eq!(n, 1, "boundary face {f:?} used {n} times");
            } else {
                assert_eq!(n, 2, "interior face {f:?} used {n} times");
            }
        }
    }

    #[test]
    fn regular_grid_counts() {
        let g = TetGrid::regular(1).unwrap();
        assert_eq!((g.num_vertices(), g.num_tets()), (8, 6));
        assert_eq!(g.edges.len(), 19);
        assert_eq!(brute_force_edges(&g.tets), 19);
        let g = TetGrid::regular(2).unwrap();
        assert_eq!((g.num_vertices(), g.num_tets()), (27, 48));
        assert!(matches!(TetGrid::regular(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn regular_grid_is_conforming_with_positive_volumes() {
        for res in 1..=4 {
            let g = TetGrid::regular(res).unwrap();
            g.validate().unwrap();
            assert_conforming(&g);
            let total: f64 = g
                .tets
                .iter()
                .map(|t| {
                    tet_volume(
                        &g.vertices[t[0] as usize],
                        &g.vertices[t[1] as usize],
                        &g.vertices[t[2] as usize],
                        &g.vertices[t[3] as usize],
                    )
                    .abs()
                })
                .sum();
            assert!((total - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unique_edge_cases() {
        assert_eq!(unique_edges(&[[0, 1, 2, 3]]).len(), 6);
        assert!(unique_edges(&[]).is_empty());
        let g = TetGrid::regular(3).unwrap();
        assert_eq!(g.edges.len(), brute_force_edges(&g.tets));
        assert!(g.edges.windows(2).all(|w| w[0] < w[1]));
        assert!(g.edges.iter().all(|e| e[0] < e[1]));
    }

    #[test]
    fn surface_tet_selection() {
        let g = TetGrid::regular(2).unwrap();
        assert!(surface_tets(&g, &GeometryField::constant(&g, 0.5)).unwrap().is_empty());

        let single = TetGrid::from_parts(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2, 3]],
            1,
            0,
        );
        let mut f = GeometryField::constant(&single, 1.0);
        f.sdf[0] = -1.0;
        assert_eq!(surface_tets(&single, &f).unwrap(), vec![0]);

        let g = TetGrid::regular(8).unwrap();
        let f = GeometryField::from_sdf(&g, |p| sphere_sdf(p, 0.5));
        let got = surface_tets(&g, &f).unwrap();
        let brute: Vec<usize> = (0..g.num_tets())
            .filter(|&t| {
                let signs: Vec<bool> = g.tets[t].iter().map(|&v| f.sdf[v as usize] <= 0.0).collect();
                signs.iter().any(|&s| s) && signs.iter().any(|&s| !s)
            })
            .collect();
        assert_eq!(got, brute);
        assert!(!got.is_empty());

        let bad = GeometryField::constant(&TetGrid::regular(1).unwrap(), 0.1);
        assert!(surface_tets(&g, &bad).is_err());
    }

    fn single_tet() -> TetGrid {
        TetGrid::from_parts(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2, 3]],
            1,
            0,
        )
    }

    #[test]
    fn subdivide_single_tet() {
        let g = single_tet();
        let mut f = GeometryField::constant(&g, 1.0);
        f.sdf[0] = -1.0;
        let (g2, f2) = subdivide(&g, &f, &[0]).unwrap();
        assert_eq!(g2.num_tets(), 8);
        assert_eq!(g2.num_vertices(), 10);
        f2.validate(&g2).unwrap();
        // midpoint of edge (0,1) carries mean sdf 0
        let m01 = g2.vertices.iter().position(|p| (p - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15).unwrap();
        assert_eq!(f2.sdf[m01], 0.0);
        let parent = tet_volume(&g.vertices[0], &g.vertices[1], &g.vertices[2], &g.vertices[3]);
        let children: f64 = g2
            .tets
            .iter()
            .map(|t| {
                tet_volume(
                    &g2.vertices[t[0] as usize],
                    &g2.vertices[t[1] as usize],
                    &g2.vertices[t[2] as usize],
                    &g2.vertices[t[3] as usize],
                )
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        assert!((children - parent).abs() < 1e-12);
    }

    #[test]
    fn subdivide_two_adjacent_tets_welds_shared_midpoints() {
        let g = TetGrid::from_parts(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(1.0, 1.0, 1.0)],
            vec![[0, 1, 2, 3], [1, 2, 3, 4]],
            1,
            0,
        );
        let f = GeometryField::constant(&g, 0.3);
        let (g2, _) = subdivide(&g, &f, &[0, 1]).unwrap();
        assert_eq!(g2.num_vertices(), 14);
        assert_eq!(g2.num_tets(), 16);
        // the four children on each side of the shared face meet face to face
        let faces = face_multiplicity(&g2.tets);
        assert!(faces.values().all(|&n| n <= 2));
        let on_shared = |v: u32| {
            let p = g2.vertices[v as usize];
            (p.x + p.y + p.z - 1.0).abs() < 1e-12
        };
        let shared: Vec<_> = faces.iter().filter(|(f, _)| f.iter().all(|&v| on_shared(v))).collect();
        assert_eq!(shared.len(), 4);
        assert!(shared.iter().all(|(_, &n)| n == 2));
    }

    #[test]
    fn subdivide_partial_selection_stays_conforming() {
        let g = TetGrid::regular(3).unwrap();
        let f = GeometryField::from_sdf(&g, |p| sphere_sdf(p, 0.55));
        let sel = surface_tets(&g, &f).unwrap();
        let (g2, f2) = subdivide(&g, &f, &sel).unwrap();
        g2.validate().unwrap();
        f2.validate(&g2).unwrap();
        assert_conforming(&g2);
        let vol = |g: &TetGrid| -> f64 {
            g.tets
                .iter()
                .map(|t| {
                    tet_volume(
                        &g.vertices[t[0] as usize],
                        &g.vertices[t[1] as usize],
                        &g.vertices[t[2] as usize],
                        &g.vertices[t[3] as usize],
                    )
                })
                .sum()
        };
        assert!((vol(&g2) - vol(&g)).abs() < 1e-12);
        // a single selected tet in the middle of the grid also closes cleanly
        let (g3, _) = subdivide(&g, &f, &[g.num_tets() / 2]).unwrap();
        assert_conforming(&g3);
    }

    #[test]
    fn subdivide_rejects_bad_index() {
        let g = single_tet();
        let f = GeometryField::constant(&g, 1.0);
        assert!(subdivide(&g, &f, &[1]).is_err());
    }

    #[test]
    fn subdivision_clamps_new_deformation_to_half_bound() {
        let g = TetGrid::regular(1).unwrap();
        let mut f = GeometryField::constant(&g, 0.2);
        let b = f.deform_bound;
        for d in &mut f.deform {
            *d = Vec3::new(b, -b, b);
        }
        let (g2, f2) = subdivide(&g, &f, &[0]).unwrap();
        for d in &f2.deform[g.num_vertices()..] {
            assert!(d.iter().all(|c| c.abs() <= 0.5 * b + 1e-15));
        }
        assert_eq!(&f2.deform[..g.num_vertices()], &f.deform[..]);
        assert!(g2.num_vertices() > g.num_vertices());
    }

    #[test]
    fn residual_updates() {
        let g = TetGrid::regular(2).unwrap();
        let f = GeometryField::from_sdf(&g, |p| p.x * 0.9);
        let n = f.len();
        let same = apply_residuals(&f, &vec![0.0; n], &vec![Vec3::zeros(); n]).unwrap();
        assert_eq!(same, f);

        let mut one = GeometryField::constant(&TetGrid::regular(1).unwrap(), 0.9);
        one.sdf.truncate(8);
        let r = apply_residuals(&one, &[0.5; 8], &[Vec3::zeros(); 8]).unwrap();
        assert!(r.sdf.iter().all(|&s| s == 1.0));

        assert!(apply_residuals(&f, &[0.0; 3], &vec![Vec3::zeros(); n]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn residuals_match_loop_and_respect_bounds(seed in any::<u64>(), steps in 1usize..5) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let g = TetGrid::regular(2).unwrap();
                let mut f = GeometryField::from_sdf(&g, |_| rng.random_range(-1.0..1.0));
                let b = f.deform_bound;
                for _ in 0..steps {
                    let ds: Vec<f64> = (0..f.len()).map(|_| rng.random_range(-0.8..0.8)).collect();
                    let dv: Vec<Vec3> = (0..f.len())
                        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                        .collect();
                    let next = apply_residuals(&f, &ds, &dv).unwrap();
                    for i in 0..f.len() {
                        let s = (f.sdf[i] + ds[i]).clamp(-1.0, 1.0);
                        prop_assert_eq!(next.sdf[i], s);
                        for c in 0..3 {
                            prop_assert_eq!(next.deform[i][c], (f.deform[i][c] + dv[i][c]).clamp(-b, b));
                        }
                    }
                    f = next;
                }
                prop_assert!(f.validate(&g).is_ok());
            }
        }
    }
}
