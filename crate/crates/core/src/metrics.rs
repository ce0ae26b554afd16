//! Shape and distribution metrics: surface sampling, Chamfer distance,
//! coverage, minimum matching distance and the Fréchet distance between
//! Gaussian fits of embedding sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::isosurface::SurfaceMesh;
use crate::math::{triangle_area, Vec3};

/// Default number of points sampled per shape.
pub const DEFAULT_SAMPLES: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let pc = Self { points };
        pc.validate()?;
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.points.is_empty(), "point cloud is empty");
        ensure!(
            self.points.iter().all(|p| p.iter().all(|c| c.is_finite())),
            "point cloud contains non-finite coordinates"
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| p * c).collect(),
        }
    }
}

/// Area-weighted uniform sampling of `n` points on the mesh surface.
pub fn sample_surface_points(mesh: &SurfaceMesh, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    ensure!(n > 0, "sample count must be positive");
    ensure!(!mesh.faces.is_empty(), "cannot sample an empty mesh");
    let areas: Vec<f64> = (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.face_vertices(f);
            triangle_area(&a, &b, &c)
        })
        .collect();
    ensure!(areas.iter().sum::<f64>() > 0.0, "mesh has zero total area");
    let pick = WeightedIndex::new(&areas).map_err(|e| crate::Error::invalid(format!("bad face areas: {e}")))?;
    let points = (0..n)
        .map(|_| {
            let [a, b, c] = mesh.face_vertices(pick.sample(rng));
            let r1: f64 = rng.random();
            let r2: f64 = rng.random();
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect();
    Ok(PointCloud { points })
}

/// Uniform bucket grid for exact nearest-neighbour queries.
struct NnGrid<'a> {
    pts: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [i64; 3],
    /// CSR layout: points of cell `c` are `order[start[c]..start[c + 1]]`.
    start: Vec<u32>,
    order: Vec<u32>,
}

impl<'a> NnGrid<'a> {
    fn new(pts: &'a [Vec3]) -> Self {
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in pts {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let vol_side = ext.max().max(1e-12);
        let cell = (vol_side / (pts.len() as f64).cbrt()).max(1e-12);
        let dims = [0, 1, 2].map(|k| ((ext[k] / cell).floor() as i64) + 1);
        let mut g = Self {
            pts,
            origin: lo,
            cell,
            dims,
            start: Vec::new(),
            order: Vec::new(),
        };
        let ncell = (dims[0] * dims[1] * dims[2]) as usize;
        let cells: Vec<usize> = pts.iter().map(|p| g.flat(g.key(p).map(|v| v.clamp(0, i64::MAX)))).collect();
        let mut count = vec![0u32; ncell + 1];
        for &c in &cells {
            count[c + 1] += 1;
        }
        for i in 0..ncell {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut order = vec![0u32; pts.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        g.start = count;
        g.order = order;
        g
    }

    fn flat(&self, k: [i64; 3]) -> usize {
        let k = [0, 1, 2].map(|a| k[a].min(self.dims[a] - 1));
        (k[0] + self.dims[0] * (k[1] + self.dims[1] * k[2])) as usize
    }

    fn key(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|k| ((p[k] - self.origin[k]) / self.cell).floor() as i64)
    }

    /// Squared distance to the nearest stored point.
    fn nearest_sq(&self, q: &Vec3) -> f64 {
        let c = self.key(q);
        // Chebyshev cell distance from the query cell to the nearest and farthest occupied cells
        let gap = (0..3).map(|k| (-c[k]).max(c[k] - (self.dims[k] - 1)).max(0)).max().unwrap();
        let far = (0..3).map(|k| c[k].abs().max((c[k] - (self.dims[k] - 1)).abs())).max().unwrap();
        let mut best = f64::INFINITY;
        for ring in gap..=far {
            let lo = [0, 1, 2].map(|k| (c[k] - ring).max(0));
            let hi = [0, 1, 2].map(|k| (c[k] + ring).min(self.dims[k] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let cheb = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if cheb != ring {
                            continue;
                        }
                        let f = self.flat([x, y, z]);
                        for &i in &self.order[self.start[f] as usize..self.start[f + 1] as usize] {
                            let d = (self.pts[i as usize] - q).norm_squared();
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
            // points in later rings are at least `ring * cell` away
            let reach = ring as f64 * self.cell;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

/// Per-direction normalization of the Chamfer distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChamferReduction {
    #[default]
    Mean,
    Sum,
}

fn directed(x: &[Vec3], y: &[Vec3], red: ChamferReduction) -> f64 {
    let grid = NnGrid::new(y);
    let s: f64 = x.par_iter().map(|p| grid.nearest_sq(p)).collect::<Vec<_>>().iter().sum();
    match red {
        ChamferReduction::Mean => s / x.len() as f64,
        ChamferReduction::Sum => s,
    }
}

/// Symmetric Chamfer distance with a per-direction mean of squared nearest distances.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    chamfer_with(x, y, ChamferReduction::Mean)
}

pub fn chamfer_with(x: &PointCloud, y: &PointCloud, red: ChamferReduction) -> Result<f64> {
    x.validate()?;
    y.validate()?;
    Ok(directed(&x.points, &y.points, red) + directed(&y.points, &x.points, red))
}

/// `d[g][r]` = Chamfer distance between generated shape `g` and reference `r`.
pub fn pairwise_chamfer(gen: &[PointCloud], refs: &[PointCloud], red: ChamferReduction) -> Result<Vec<Vec<f64>>> {
    ensure!(!gen.is_empty() && !refs.is_empty(), "shape sets must be nonempty");
    gen.par_iter()
        .map(|g| refs.iter().map(|r| chamfer_with(g, r, red)).collect::<Result<Vec<_>>>())
        .collect()
}

fn argmin(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in xs.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_matrix(d: &[Vec<f64>]) -> Result<usize> {
    ensure!(!d.is_empty(), "generated set is empty");
    let nr = d[0].len();
    ensure!(nr > 0, "reference set is empty");
    ensure!(d.iter().all(|row| row.len() == nr), "distance matrix rows differ in length");
    Ok(nr)
}

/// Fraction of references that are the nearest reference of some generated
/// shape. `d[g][r]`; ties go to the lowest reference index.
pub fn coverage(d: &[Vec<f64>]) -> Result<f64> {
    let nr = check_matrix(d)?;
    let mut hit = vec![false; nr];
    for row in d {
        hit[argmin(row.iter().copied())] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / nr as f64)
}

/// Mean over references of the distance to the nearest generated shape.
pub fn mmd(d: &[Vec<f64>]) -> Result<f64> {
    let nr = check_matrix(d)?;
    let total: f64 = (0..nr).map(|r| d.iter().map(|row| row[r]).fold(f64::INFINITY, f64::min)).sum();
    Ok(total / nr as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl EmbeddingStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        ensure!(self.covariance.shape() == (d, d), "covariance must be {d}x{d}");
        ensure!(
            (&self.covariance - self.covariance.transpose()).norm() < 1e-9,
            "covariance is not symmetric"
        );
        ensure!(
            self.mean.iter().chain(self.covariance.iter()).all(|v| v.is_finite()),
            "embedding stats contain non-finite values"
        );
        Ok(())
    }
}

/// Sample mean and unbiased covariance of the rows of `x` (`M x d`).
pub fn embedding_stats(x: &DMatrix<f64>) -> Result<EmbeddingStats> {
    let m = x.nrows();
    ensure!(m >= 2, "need at least 2 embeddings, got {m}");
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut covariance = centered.transpose() * &centered / (m as f64 - 1.0);
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(EmbeddingStats { mean, covariance })
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `|μg − μr|² + tr(Σg + Σr − 2 (Σr^½ Σg Σr^½)^½)`, clamped at 0.
pub fn frechet_distance(g: &EmbeddingStats, r: &EmbeddingStats) -> Result<f64> {
    g.validate()?;
    r.validate()?;
    ensure!(g.dim() == r.dim(), "embedding dims differ: {} vs {}", g.dim(), r.dim());
    let dm = (&g.mean - &r.mean).norm_squared();
    let sr = psd_sqrt(&r.covariance);
    let inner = &sr * &g.covariance * &sr;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let v = dm + g.covariance.trace() + r.covariance.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}
