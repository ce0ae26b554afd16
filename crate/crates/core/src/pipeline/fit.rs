//! Multi-view inverse rendering: geometry field + texture field fitted to
//! target images through marching tetrahedra, rasterization and shading.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::View;
use crate::blob::Blob;
use crate::error::{ensure, Result};
use crate::fields::{Parameterized, TextureField};
use crate::isosurface::{marching_tetrahedra, marching_tetrahedra_backward, SurfaceMesh};
use crate::losses::{sdf_regularizer_with_grad, DEFAULT_REG_WEIGHT};
use crate::math::{Adam, Vec3};
use crate::render::{antialias_backward, antialias_silhouette, rasterize, rasterize_backward, shade_with_texture, Image};
use crate::tetgrid::{unique_edges, GeometryField, TetGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Number of orbit views used when the driver renders its own targets.
    pub views: usize,
    pub image_size: usize,
    pub steps: usize,
    /// Adam step size for the texture field and latent.
    pub step_size: f64,
    /// Adam step size for the per-vertex SDF and deformation values. Adam
    /// moves every parameter by about this much per step, so it has to stay
    /// well below the grid spacing.
    pub geometry_step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mask_weight: f64,
    pub rgb_weight: f64,
    /// μ, the weight of the SDF sign regularizer.
    pub reg_weight: f64,
    pub tet_res: u32,
    pub triplane_res: usize,
    pub triplane_channels: usize,
    pub latent_dim: usize,
    pub freeze_geometry: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            views: 16,
            image_size: 64,
            steps: 400,
            step_size: 0.002,
            geometry_step_size: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            mask_weight: 1.0,
            rgb_weight: 1.0,
            reg_weight: DEFAULT_REG_WEIGHT,
            tet_res: 24,
            triplane_res: 16,
            triplane_channels: 8,
            latent_dim: 8,
            freeze_geometry: false,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.views >= 4, "fit.views must be at least 4");
        ensure!(self.image_size >= 1, "fit.image_size must be positive");
        ensure!(self.tet_res >= 1, "fit.tet_res must be positive");
        ensure!(self.triplane_res >= 2, "fit.triplane_res must be at least 2");
        ensure!(self.triplane_channels >= 1, "fit.triplane_channels must be positive");
        ensure!(self.latent_dim >= 1, "fit.latent_dim must be positive");
        for (k, v) in [("fit.step_size", self.step_size), ("fit.geometry_step_size", self.geometry_step_size)] {
            ensure!(v > 0.0 && v.is_finite(), "{k} must be positive");
        }
        for (k, v) in [("fit.beta1", self.beta1), ("fit.beta2", self.beta2)] {
            ensure!((0.0..1.0).contains(&v), "{k} must be in [0, 1)");
        }
        for (k, v) in [("fit.mask_weight", self.mask_weight), ("fit.rgb_weight", self.rgb_weight), ("fit.reg_weight", self.reg_weight)] {
            ensure!(v >= 0.0 && v.is_finite(), "{k} must be nonnegative");
        }
        Ok(())
    }
}

/// Everything optimized by [`fit_shape`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub grid: TetGrid,
    pub field: GeometryField,
    pub texture: TextureField,
    /// Texture latent; the decoder is conditioned on it alone.
    pub latent: Vec<f64>,
}

fn visit_vec3(name: &str, v: &mut [Vec3], f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
    let mut flat: Vec<f64> = v.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    f(name, &[v.len(), 3], &mut flat);
    for (p, c) in v.iter_mut().zip(flat.chunks(3)) {
        *p = Vec3::new(c[0], c[1], c[2]);
    }
}

impl Parameterized for FitState {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let n = self.field.sdf.len();
        f("sdf", &[n], &mut self.field.sdf);
        visit_vec3("deform", &mut self.field.deform, f);
        self.texture.visit_params(f);
        let n = self.latent.len();
        f("latent", &[n], &mut self.latent);
    }
}

impl FitState {
    /// Geometry parameters come first in the flat layout: `4 * num_vertices` values.
    pub fn num_geometry_params(&self) -> usize {
        4 * self.field.sdf.len()
    }

    pub fn mesh(&self) -> Result<SurfaceMesh> {
        marching_tetrahedra(&self.grid, &self.field)
    }

    pub fn color(&self, p: &Vec3) -> Result<[f64; 3]> {
        let m = self.texture.condition(&[], &self.latent)?;
        Ok(self.texture.color(&m, p))
    }

    pub fn to_blob(&self) -> Result<Blob> {
        let meta = serde_json::json!({
            "tet_res": self.grid.resolution,
            "tet_level": self.grid.level,
            "num_vertices": self.grid.num_vertices(),
            "num_tets": self.grid.num_tets(),
            "deform_bound": self.field.deform_bound,
            "triplane_res": self.texture.triplane.res,
            "triplane_channels": self.texture.triplane.channels,
            "use_pe": self.texture.use_pe,
            "latent_dim": self.latent.len(),
        });
        let mut b = Blob::new("fit_state", meta);
        let verts: Vec<f64> = self.grid.vertices.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        b.push("grid.vertices", &[self.grid.num_vertices(), 3], &verts)?;
        let tets: Vec<f64> = self.grid.tets.iter().flatten().map(|&i| i as f64).collect();
        b.push("grid.tets", &[self.grid.num_tets(), 4], &tets)?;
        let mut s = self.clone();
        b.push_params("", &mut s)?;
        Ok(b)
    }

    pub fn from_blob(b: &Blob) -> Result<Self> {
        ensure!(b.header.kind == "fit_state", "blob kind {} is not fit_state", b.header.kind);
        let meta = &b.header.meta;
        let get = |k: &str| -> Result<u64> {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| crate::Error::InvalidArgument(format!("fit_state header lacks {k}")))
        };
        let (_, verts) = b.tensor("grid.vertices")?;
        let (_, tets) = b.tensor("grid.tets")?;
        let vertices: Vec<Vec3> = verts.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let tets: Vec<[u32; 4]> = tets.chunks(4).map(|c| [c[0] as u32, c[1] as u32, c[2] as u32, c[3] as u32]).collect();
        let grid = TetGrid::from_parts(vertices, tets, get("tet_res")? as u32, get("tet_level")? as u32);
        grid.validate()?;
        let nv = grid.num_vertices();
        let bound = meta.get("deform_bound").and_then(|v| v.as_f64()).unwrap_or_else(|| grid.deform_bound());
        let use_pe = meta.get("use_pe").and_then(|v| v.as_bool()).unwrap_or(true);
        let latent_dim = get("latent_dim")? as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let texture = TextureField::random(get("triplane_res")? as usize, get("triplane_channels")? as usize, latent_dim, use_pe, &mut rng);
        let mut s = FitState {
            grid,
            field: GeometryField {
                sdf: vec![0.0; nv],
                deform: vec![Vec3::zeros(); nv],
                deform_bound: bound,
            },
            texture,
            latent: vec![0.0; latent_dim],
        };
        b.load_params("", &mut s)?;
        s.field.validate(&s.grid)?;
        Ok(s)
    }
}

/// Per-step loss terms (`total = w_mask mask + w_rgb rgb + μ reg`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitLosses {
    pub mask: f64,
    pub rgb: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: FitState,
    /// Losses before every step, then after the last one (`steps + 1` entries).
    pub trace: Vec<FitLosses>,
}

fn check_targets(targets: &[View]) -> Result<()> {
    ensure!(targets.len() >= 4, "fitting needs at least 4 views, got {}", targets.len());
    for t in targets {
        t.validate()?;
    }
    let (w, h) = (targets[0].camera.width, targets[0].camera.height);
    ensure!(
        targets.iter().all(|t| t.camera.width == w && t.camera.height == h),
        "all target views must share one image size"
    );
    Ok(())
}

/// Bilinear lookup of a 1-channel image at continuous pixel coordinates; 0 outside.
fn sample_mask(img: &Image, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= img.width as f64 || yi >= img.height as f64 {
            0.0
        } else {
            img.data[yi as usize * img.width + xi as usize]
        }
    };
    (1.0 - ty) * ((1.0 - tx) * at(x0, y0) + tx * at(x0 + 1.0, y0)) + ty * ((1.0 - tx) * at(x0, y0 + 1.0) + tx * at(x0 + 1.0, y0 + 1.0))
}

/// Subpixel points where the bilinear mask crosses one half, found on every
/// horizontal and vertical pair of neighbouring pixel centers.
fn mask_boundary(mask: &Image) -> Vec<(f64, f64)> {
    let (w, h) = (mask.width, mask.height);
    let m = |x: usize, y: usize| mask.data[y * w + x] - 0.5;
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let a = m(x, y);
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx >= w || ny >= h {
                    continue;
                }
                let b = m(nx, ny);
                if (a < 0.0) != (b < 0.0) {
                    let t = a / (a - b);
                    pts.push((x as f64 + 0.5 + t * (nx - x) as f64, y as f64 + 0.5 + t * (ny - y) as f64));
                }
            }
        }
    }
    pts
}

/// Visual-hull initialization. Per view, a vertex gets the signed distance
/// from its projection to the silhouette boundary, converted to world units at
/// the vertex depth; the field is the maximum over views, so its zero set is
/// the hull of the silhouettes.
pub fn visual_hull_field(grid: &TetGrid, targets: &[View]) -> Result<GeometryField> {
    check_targets(targets)?;
    let views: Vec<_> = targets.iter().map(|t| (t, t.camera.frame(), mask_boundary(&t.mask))).collect();
    let sdf: Vec<f64> = grid
        .vertices
        .par_iter()
        .map(|p| {
            let mut d = f64::NEG_INFINITY;
            for (t, fr, boundary) in &views {
                let (w, h) = (t.camera.width, t.camera.height);
                let (x, y, z) = fr.project(p, w, h);
                if z <= 0.0 {
                    continue;
                }
                let inside = sample_mask(&t.mask, x, y) >= 0.5;
                let px = boundary
                    .iter()
                    .map(|(bx, by)| (bx - x).powi(2) + (by - y).powi(2))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt();
                // no boundary at all: the view is empty or fully covered
                let px = if px.is_finite() { px } else { (w + h) as f64 };
                let world = px * 2.0 * z * fr.tan_half / h as f64;
                d = d.max(if inside { -world } else { world });
            }
            d
        })
        .collect();
    ensure!(sdf.iter().all(|s| s.is_finite()), "every grid vertex must be in front of some camera");
    // from_sdf visits vertices in order
    let mut values = sdf.into_iter();
    Ok(GeometryField::from_sdf(grid, |_| values.next().unwrap()))
}

/// Initial state: visual-hull geometry and a seeded random texture field.
pub fn init_fit_state(targets: &[View], cfg: &FitConfig) -> Result<FitState> {
    cfg.validate()?;
    let grid = TetGrid::regular(cfg.tet_res)?;
    let field = visual_hull_field(&grid, targets)?;
    Ok(init_fit_state_with(grid, field, cfg))
}

/// Initial state around a given geometry.
pub fn init_fit_state_with(grid: TetGrid, field: GeometryField, cfg: &FitConfig) -> FitState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let texture = TextureField::random(cfg.triplane_res, cfg.triplane_channels, cfg.latent_dim, true, &mut rng);
    let latent = (0..cfg.latent_dim).map(|k| if k % 2 == 0 { 0.5 } else { -0.5 }).collect();
    FitState {
        grid,
        field,
        texture,
        latent,
    }
}

/// Fitting loss and its gradient in the [`Parameterized`] layout of `state`.
/// Per view, the mask term is the summed squared error of the antialiased
/// silhouette and the RGB term is the summed squared error over pixels covered
/// by the render whose target mask is at least one half; both are averaged over
/// views.
pub fn fit_objective(state: &FitState, targets: &[View], cfg: &FitConfig, want_grad: bool) -> Result<(FitLosses, Vec<f64>)> {
    check_targets(targets)?;
    let edges = unique_edges(&state.grid.tets);
    let mesh = state.mesh()?;
    let m = state.texture.condition(&[], &state.latent)?;
    let nv = state.grid.num_vertices();
    let inv_v = 1.0 / targets.len() as f64;

    let mut tgrad = state.texture.zeros_like();
    let mut d_mod = state.texture.decoder.zero_mod_buffers();
    let mut d_mesh = vec![Vec3::zeros(); mesh.vertices.len()];
    let (mut l_mask, mut l_rgb) = (0.0, 0.0);

    for t in targets {
        let cam = &t.camera;
        let gb = rasterize(&mesh, cam)?;
        let rgb = shade_with_texture(&gb, |p| state.texture.color(&m, p), [0.0; 3]);
        let (soft, trace) = antialias_silhouette(&gb, &mesh, cam)?;
        let mut d_soft = Image::new(soft.width, soft.height, 1);
        for i in 0..soft.data.len() {
            let r = soft.data[i] - t.mask.data[i];
            l_mask += inv_v * r * r;
            d_soft.data[i] = 2.0 * r * cfg.mask_weight * inv_v;
        }
        let mut d_pos = vec![Vec3::zeros(); gb.num_pixels()];
        let mut any_rgb = false;
        for i in 0..gb.num_pixels() {
            if !gb.covered(i) || t.mask.data[i] < 0.5 {
                continue;
            }
            let (c, tc) = (rgb.pixel(i), t.rgb.pixel(i));
            let r = [c[0] - tc[0], c[1] - tc[1], c[2] - tc[2]];
            l_rgb += inv_v * (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
            if want_grad && cfg.rgb_weight != 0.0 {
                let s = 2.0 * cfg.rgb_weight * inv_v;
                let d = [s * r[0], s * r[1], s * r[2]];
                d_pos[i] = state.texture.color_backward(&m, &gb.position[i], &d, &mut d_mod, &mut tgrad);
                any_rgb = true;
            }
        }
        if want_grad && !cfg.freeze_geometry {
            let (_, dv) = antialias_backward(&trace, &gb.mask(), &mesh, cam, &d_soft)?;
            for (a, b) in d_mesh.iter_mut().zip(dv) {
                *a += b;
            }
            if any_rgb {
                for (a, b) in d_mesh.iter_mut().zip(rasterize_backward(&gb, &mesh, cam, &d_pos)?) {
                    *a += b;
                }
            }
        }
    }

    let (l_reg, reg_grad) = sdf_regularizer_with_grad(&state.field.sdf, &edges)?;
    let losses = FitLosses {
        mask: l_mask,
        rgb: l_rgb,
        reg: l_reg,
        total: cfg.mask_weight * l_mask + cfg.rgb_weight * l_rgb + cfg.reg_weight * l_reg,
    };
    if !want_grad {
        return Ok((losses, Vec::new()));
    }

    let mut grad = Vec::with_capacity(4 * nv);
    if cfg.freeze_geometry {
        grad.resize(4 * nv, 0.0);
    } else {
        let mg = marching_tetrahedra_backward(&state.grid, &state.field, &mesh, &d_mesh)?;
        grad.extend(mg.d_sdf.iter().zip(&reg_grad).map(|(a, b)| a + cfg.reg_weight * b));
        grad.extend(mg.d_deform.iter().flat_map(|d| [d.x, d.y, d.z]));
    }
    let d_latent = state.texture.decoder.modulate_backward(&state.latent, &m, &d_mod, &mut tgrad.decoder);
    tgrad.visit_params(&mut |_, _, v| grad.extend_from_slice(v));
    grad.extend_from_slice(&d_latent);
    Ok((losses, grad))
}

/// Adam on the fitting objective starting from `state`. Geometry and texture
/// use separate step sizes; the field is clamped back into its bounds after
/// every step.
pub fn fit_from(mut state: FitState, targets: &[View], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_targets(targets)?;
    state.field.validate(&state.grid)?;
    state.texture.validate()?;
    let ng = state.num_geometry_params();
    let mut flat = state.flatten();
    let mut adam_geo = Adam::new(ng, cfg.geometry_step_size, cfg.beta1, cfg.beta2);
    let mut adam_tex = Adam::new(flat.len() - ng, cfg.step_size, cfg.beta1, cfg.beta2);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (losses, grad) = fit_objective(&state, targets, cfg, true)?;
        trace.push(losses);
        if !cfg.freeze_geometry {
            adam_geo.step(&mut flat[..ng], &grad[..ng]);
        }
        adam_tex.step(&mut flat[ng..], &grad[ng..]);
        state.unflatten(&flat);
        state.field.clamp_in_place();
        flat[..ng].copy_from_slice(&state.flatten()[..ng]);
    }
    trace.push(fit_objective(&state, targets, cfg, false)?.0);
    Ok(FitResult { state, trace })
}

/// Fit geometry and texture to the target views from a visual-hull start.
pub fn fit_shape(targets: &[View], cfg: &FitConfig) -> Result<FitResult> {
    let state = init_fit_state(targets, cfg)?;
    fit_from(state, targets, cfg)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smoothed(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
