//! Drivers composing the modules: multi-view fitting, toy adversarial training
//! and latent-space helpers.

mod fit;
mod gan;

pub use fit::*;
pub use gan::*;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};
use crate::fields::{lerp_latent, GeometryNet};
use crate::isosurface::{marching_tetrahedra, SurfaceMesh};
use crate::math::Vec3;
use crate::render::{antialias_silhouette, rasterize, shade_with_texture, Camera, Image, DEFAULT_FOV_DEG};
use crate::sdf::AnalyticShape;
use crate::tetgrid::{GeometryField, TetGrid};

/// One calibrated target view: linear RGB image and (soft) silhouette.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub rgb: Image,
    pub mask: Image,
}

impl View {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        ensure!(self.rgb.width == w && self.rgb.height == h && self.rgb.channels == 3, "rgb target must be {w}x{h}x3");
        ensure!(self.mask.width == w && self.mask.height == h && self.mask.channels == 1, "mask target must be {w}x{h}x1");
        ensure!(self.rgb.data.len() == w * h * 3 && self.mask.data.len() == w * h, "target buffer sizes are inconsistent");
        Ok(())
    }
}

/// Camera distance used for self-rendered fitting targets.
pub const ORBIT_RADIUS: f64 = 2.5;

/// Smooth albedo that encodes surface position, `0.5 + 0.6 p` per channel.
/// Targets painted with it tie the RGB loss to where the surface is; with a
/// constant albedo only silhouettes would carry geometric signal.
pub fn position_albedo(p: &Vec3) -> [f64; 3] {
    [p.x, p.y, p.z].map(|c| (0.5 + 0.6 * c).clamp(0.0, 1.0))
}

/// `n` cameras spread over the sphere on a Fibonacci lattice, elevations kept
/// inside ±64°.
pub fn orbit_cameras(n: usize, radius: f64, size: usize) -> Result<Vec<Camera>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let y = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            Camera::new(DEFAULT_FOV_DEG, radius, golden * k as f64, (0.9 * y).asin(), size, size)
        })
        .collect()
}

/// Render an analytic shape (extracted at `extract_res`) from each camera.
/// RGB is hard-shaded with `texture` on a black background; the mask is the
/// antialiased silhouette.
pub fn render_targets<F>(shape: &AnalyticShape, texture: F, cameras: &[Camera], extract_res: u32) -> Result<Vec<View>>
where
    F: Fn(&Vec3) -> [f64; 3] + Sync,
{
    let grid = TetGrid::regular(extract_res)?;
    let field = GeometryField::from_sdf(&grid, |p| shape.eval(p));
    let mesh = marching_tetrahedra(&grid, &field)?;
    render_mesh_targets(&mesh, texture, cameras)
}

pub fn render_mesh_targets<F>(mesh: &SurfaceMesh, texture: F, cameras: &[Camera]) -> Result<Vec<View>>
where
    F: Fn(&Vec3) -> [f64; 3] + Sync,
{
    cameras
        .iter()
        .map(|cam| {
            let gb = rasterize(mesh, cam)?;
            let rgb = shade_with_texture(&gb, &texture, [0.0; 3]);
            let (mask, _) = antialias_silhouette(&gb, mesh, cam)?;
            Ok(View { camera: *cam, rgb, mask })
        })
        .collect()
}

/// Occupancy of `res³` voxel centers over `[-1, 1]³` by parity of crossings
/// along +z. Index `x + res (y + res z)`.
pub fn voxelize_mesh(mesh: &SurfaceMesh, res: usize) -> Vec<bool> {
    let cell = 2.0 / res as f64;
    let center = |i: usize| -1.0 + (i as f64 + 0.5) * cell;
    let mut occ = vec![false; res * res * res];
    // tiny irrational offsets keep columns off mesh edges and vertices
    let (jx, jy) = (1e-7 * 2f64.sqrt(), 1e-7 * 3f64.sqrt());
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); res * res];
    for f in &mesh.faces {
        let [a, b, c] = f.map(|v| mesh.vertices[v as usize]);
        let lo_x = a.x.min(b.x).min(c.x);
        let hi_x = a.x.max(b.x).max(c.x);
        let lo_y = a.y.min(b.y).min(c.y);
        let hi_y = a.y.max(b.y).max(c.y);
        let ix0 = (((lo_x + 1.0) / cell - 0.5).floor().max(0.0)) as usize;
        let iy0 = (((lo_y + 1.0) / cell - 0.5).floor().max(0.0)) as usize;
        let ix1 = (((hi_x + 1.0) / cell - 0.5).ceil().max(0.0) as usize).min(res - 1);
        let iy1 = (((hi_y + 1.0) / cell - 0.5).ceil().max(0.0) as usize).min(res - 1);
        for iy in iy0..=iy1 {
            for ix in ix0..=ix1 {
                let (px, py) = (center(ix) + jx, center(iy) + jy);
                let e = |p: &Vec3, q: &Vec3| (q.x - p.x) * (py - p.y) - (q.y - p.y) * (px - p.x);
                let (w0, w1, w2) = (e(&b, &c), e(&c, &a), e(&a, &b));
                let inside = (w0 > 0.0 && w1 > 0.0 && w2 > 0.0) || (w0 < 0.0 && w1 < 0.0 && w2 < 0.0);
                if inside {
                    let s = w0 + w1 + w2;
                    columns[ix + res * iy].push((w0 * a.z + w1 * b.z + w2 * c.z) / s);
                }
            }
        }
    }
    for iy in 0..res {
        for ix in 0..res {
            let col = &mut columns[ix + res * iy];
            col.sort_by(f64::total_cmp);
            for iz in 0..res {
                let z = center(iz);
                let crossings = col.partition_point(|&h| h < z);
                occ[ix + res * (iy + res * iz)] = crossings % 2 == 1;
            }
        }
    }
    occ
}

/// Voxel occupancy of an analytic shape (`sdf <= 0` at voxel centers).
pub fn voxelize_shape(shape: &AnalyticShape, res: usize) -> Vec<bool> {
    let cell = 2.0 / res as f64;
    let c = |i: usize| -1.0 + (i as f64 + 0.5) * cell;
    let mut occ = Vec::with_capacity(res * res * res);
    for iz in 0..res {
        for iy in 0..res {
            for ix in 0..res {
                occ.push(shape.eval(&Vec3::new(c(ix), c(iy), c(iz))) <= 0.0);
            }
        }
    }
    occ
}

/// Intersection over union of two occupancy grids; 1 when both are empty.
pub fn voxel_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    ensure!(a.len() == b.len(), "occupancy grids differ in size");
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `(1 - t) w_a + t w_b`.
pub fn interpolate_latents(w_a: &[f64], w_b: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure!((0.0..=1.0).contains(&t), "t = {t} outside [0, 1]");
    lerp_latent(w_a, w_b, t)
}

/// `w + scale · u` with `u` uniform on the unit sphere.
pub fn perturb_latent(w: &[f64], scale: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    ensure!(scale >= 0.0 && scale.is_finite(), "perturbation scale must be nonnegative");
    if w.is_empty() {
        return Ok(Vec::new());
    }
    let dir = loop {
        let d: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(rng)).collect();
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break d.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    Ok(w.iter().zip(dir).map(|(a, d)| a + scale * d).collect())
}

/// Meshes generated along the segment `w_a → w_b` at `steps + 1` evenly spaced `t`.
pub fn interpolate_meshes(net: &GeometryNet, grid: &TetGrid, w_a: &[f64], w_b: &[f64], steps: usize) -> Result<Vec<SurfaceMesh>> {
    ensure!(steps >= 1, "need at least one interpolation step");
    (0..=steps)
        .map(|k| {
            let w = interpolate_latents(w_a, w_b, k as f64 / steps as f64)?;
            let (field, _) = net.eval(grid, &w)?;
            marching_tetrahedra(grid, &field)
        })
        .collect()
}
