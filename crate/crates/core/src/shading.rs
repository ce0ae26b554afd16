//! Spherical-Gaussian lighting: SG algebra, deferred shading of base color /
//! roughness / metallic under an SG environment, and SG fitting of
//! equirectangular environment maps.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::isosurface::SurfaceMesh;
use crate::math::{Adam, Vec3};
use crate::render::{Camera, GBuffer, Image};

/// Sharpness of the SG approximating the clamped cosine `(n·ω)+`.
pub const COSINE_SHARPNESS: f64 = 2.133;
/// Roughness floor for the specular lobe.
pub const MIN_ROUGHNESS: f64 = 0.08;
/// Sharpness floor for degenerate SG products.
pub const SHARPNESS_EPS: f64 = 1e-8;
pub const DIELECTRIC_F0: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgLobe {
    pub axis: Vec3,
    pub sharpness: f64,
    pub amplitude: [f64; 3],
}

impl SgLobe {
    pub fn new(axis: Vec3, sharpness: f64, amplitude: [f64; 3]) -> Result<Self> {
        let l = Self {
            axis: axis.normalize(),
            sharpness,
            amplitude,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((self.axis.norm() - 1.0).abs() < 1e-9, "SG axis must be unit length");
        ensure!(self.sharpness > 0.0 && self.sharpness.is_finite(), "SG sharpness must be positive");
        ensure!(self.amplitude.iter().all(|a| a.is_finite()), "SG amplitude must be finite");
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            amplitude: self.amplitude.map(|a| a * s),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflectance {
    pub base_color: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

impl Reflectance {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        ensure!(self.base_color.iter().all(|&c| unit(c)), "base color must be in [0, 1]");
        ensure!(unit(self.roughness), "roughness must be in [0, 1]");
        ensure!(unit(self.metallic), "metallic must be in [0, 1]");
        Ok(())
    }
}

/// `a · exp(λ (μ·d − 1))`.
pub fn sg_eval(lobe: &SgLobe, dir: &Vec3) -> [f64; 3] {
    let e = (lobe.sharpness * (lobe.axis.dot(dir) - 1.0)).exp();
    lobe.amplitude.map(|a| a * e)
}

/// Scalar factor `2π/λ · (1 − e^{−2λ})`.
fn sg_integral_factor(lambda: f64) -> f64 {
    2.0 * PI * -(-2.0 * lambda).exp_m1() / lambda
}

/// Integral of the lobe over the sphere.
pub fn sg_integral(lobe: &SgLobe) -> [f64; 3] {
    let f = sg_integral_factor(lobe.sharpness);
    lobe.amplitude.map(|a| a * f)
}

/// The product of two SGs as a single SG.
pub fn sg_product(l1: &SgLobe, l2: &SgLobe) -> SgLobe {
    let um = l1.axis * l1.sharpness + l2.axis * l2.sharpness;
    let lm = um.norm();
    let (axis, sharpness) = if lm < SHARPNESS_EPS { (l1.axis, SHARPNESS_EPS) } else { (um / lm, lm) };
    let scale = (sharpness - l1.sharpness - l2.sharpness).exp();
    SgLobe {
        axis,
        sharpness,
        amplitude: [0, 1, 2].map(|c| l1.amplitude[c] * l2.amplitude[c] * scale),
    }
}

/// Amplitude that makes the cosine SG integrate to π over the sphere.
pub fn cosine_amplitude() -> f64 {
    PI / sg_integral_factor(COSINE_SHARPNESS)
}

/// SG approximation of the clamped cosine lobe about `n`.
pub fn cosine_lobe(n: &Vec3) -> SgLobe {
    let a = cosine_amplitude();
    SgLobe {
        axis: *n,
        sharpness: COSINE_SHARPNESS,
        amplitude: [a; 3],
    }
}

/// Which BRDF terms [`shade_point`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadingTerms {
    pub diffuse: bool,
    pub specular: bool,
}

impl ShadingTerms {
    pub const ALL: Self = Self {
        diffuse: true,
        specular: true,
    };
    pub const DIFFUSE: Self = Self {
        diffuse: true,
        specular: false,
    };
}

fn schlick_g1(x: f64, k: f64) -> f64 {
    x / (x * (1.0 - k) + k)
}

/// Outgoing radiance toward `o` at a surface point with normal `n`.
/// Normals facing away from the viewer are flipped (surfaces are two-sided).
pub fn shade_point(n: &Vec3, o: &Vec3, refl: &Reflectance, lights: &[SgLobe], terms: ShadingTerms) -> [f64; 3] {
    let mut out = [0.0; 3];
    if lights.is_empty() {
        return out;
    }
    let n = if n.dot(o) < 0.0 { -n } else { *n };
    if terms.diffuse {
        let cos = cosine_lobe(&n);
        let kd = 1.0 - refl.metallic;
        for l in lights {
            let irr = sg_integral(&sg_product(l, &cos));
            for c in 0..3 {
                out[c] += kd * refl.base_color[c] / PI * irr[c];
            }
        }
    }
    if terms.specular {
        let no = n.dot(o).max(1e-4);
        let beta = refl.roughness.max(MIN_ROUGHNESS);
        let alpha = beta * beta;
        let r = (n * (2.0 * no) - o).normalize();
        let ndf = SgLobe {
            axis: r,
            sharpness: 2.0 / (alpha * alpha) / (4.0 * no),
            amplitude: [1.0 / (PI * alpha * alpha); 3],
        };
        let ni = n.dot(&r).max(0.0);
        if ni > 0.0 {
            let h = (o + r).normalize();
            let oh = o.dot(&h).clamp(0.0, 1.0);
            let k = alpha / 2.0;
            let g = schlick_g1(ni, k) * schlick_g1(no, k);
            let fw = (1.0 - oh).powi(5);
            for l in lights {
                let li = sg_integral(&sg_product(l, &ndf));
                for c in 0..3 {
                    let f0 = DIELECTRIC_F0 * (1.0 - refl.metallic) + refl.base_color[c] * refl.metallic;
                    let f = f0 + (1.0 - f0) * fw;
                    out[c] += li[c] * f * g / (4.0 * no);
                }
            }
        }
    }
    out.map(|v| v.max(0.0))
}

/// Deferred SG shading of covered pixels; uncovered pixels are black.
pub fn shade_sg(gbuf: &GBuffer, refl: &[Reflectance], normals: &[Vec3], lights: &[SgLobe], cam: &Camera) -> Result<Image> {
    shade_sg_terms(gbuf, refl, normals, lights, cam, ShadingTerms::ALL)
}

pub fn shade_sg_terms(
    gbuf: &GBuffer,
    refl: &[Reflectance],
    normals: &[Vec3],
    lights: &[SgLobe],
    cam: &Camera,
    terms: ShadingTerms,
) -> Result<Image> {
    let n = gbuf.num_pixels();
    ensure!(refl.len() == n && normals.len() == n, "per-pixel inputs must have {n} entries");
    for l in lights {
        l.validate()?;
    }
    for i in (0..n).filter(|&i| gbuf.covered(i)) {
        ensure!((normals[i].norm() - 1.0).abs() < 1e-6, "normal at pixel {i} is not unit length");
        refl[i].validate()?;
    }
    let eye = cam.eye();
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            if !gbuf.covered(i) {
                return [0.0; 3];
            }
            let o = (eye - gbuf.position[i]).normalize();
            shade_point(&normals[i], &o, &refl[i], lights, terms)
        })
        .collect();
    Ok(Image {
        width: gbuf.width,
        height: gbuf.height,
        channels: 3,
        data,
    })
}

/// Area-weighted vertex normals; vertices without incident area get +z.
pub fn mesh_normals(mesh: &SurfaceMesh) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); mesh.vertices.len()];
    for f in &mesh.faces {
        let [a, b, c] = f.map(|v| mesh.vertices[v as usize]);
        let n = (b - a).cross(&(c - a));
        for &v in f {
            acc[v as usize] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let l = n.norm();
            if l > 1e-300 {
                n / l
            } else {
                Vec3::z()
            }
        })
        .collect()
}

/// Barycentric interpolation of vertex normals into the G-buffer, renormalized.
pub fn gbuffer_normals(gbuf: &GBuffer, mesh: &SurfaceMesh, vertex_normals: &[Vec3]) -> Vec<Vec3> {
    (0..gbuf.num_pixels())
        .map(|i| match gbuf.triangle[i] {
            None => Vec3::z(),
            Some(t) => {
                let f = mesh.faces[t as usize];
                let b = gbuf.bary[i];
                let n: Vec3 = (0..3).map(|k| vertex_normals[f[k] as usize] * b[k]).sum();
                let l = n.norm();
                if l > 1e-300 {
                    n / l
                } else {
                    Vec3::z()
                }
            }
        })
        .collect()
}

/// Equirectangular RGB radiance map. Row 0 looks straight up (+y); column
/// `i` has azimuth `2π (i + 0.5) / width` measured from +z toward +x.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl EnvironmentMap {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(&Vec3) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(&direction(width, height, i, j)));
            }
        }
        Self { width, height, data }
    }

    pub fn constant(width: usize, height: usize, c: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![c; width * height],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0 && self.height > 0, "environment map is empty");
        ensure!(self.data.len() == self.width * self.height, "environment map size mismatch");
        ensure!(
            self.data.iter().flatten().all(|v| v.is_finite() && *v >= 0.0),
            "environment map must be finite and nonnegative"
        );
        Ok(())
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        ensure!(img.channels == 3, "environment map must have 3 channels");
        let env = Self {
            width: img.width,
            height: img.height,
            data: img.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        };
        env.validate()?;
        Ok(env)
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flatten().copied().collect(),
        }
    }
}

/// Unit direction at the center of texel `(i, j)`.
pub fn direction(width: usize, height: usize, i: usize, j: usize) -> Vec3 {
    let theta = PI * (j as f64 + 0.5) / height as f64;
    let phi = 2.0 * PI * (i as f64 + 0.5) / width as f64;
    Vec3::new(theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos())
}

/// Fitting result.
#[derive(Debug, Clone)]
pub struct SgFit {
    pub lobes: Vec<SgLobe>,
    pub loss: f64,
    /// Accepted loss after every step (index 0 is the initial loss).
    pub trace: Vec<f64>,
}

struct FitParams {
    axes: Vec<Vec3>,
    log_sharp: Vec<f64>,
    amp: Vec<[f64; 3]>,
}

impl FitParams {
    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.axes.len() * 7);
        for k in 0..self.axes.len() {
            v.extend_from_slice(self.axes[k].as_slice());
            v.push(self.log_sharp[k]);
            v.extend_from_slice(&self.amp[k]);
        }
        v
    }

    fn unflatten(&mut self, v: &[f64]) {
        for k in 0..self.axes.len() {
            let p = &v[k * 7..(k + 1) * 7];
            self.axes[k] = Vec3::new(p[0], p[1], p[2]);
            self.log_sharp[k] = p[3];
            self.amp[k] = [p[4], p[5], p[6]];
        }
    }

    /// Renormalize axes and clamp amplitudes after an update.
    fn project(&mut self) {
        for a in &mut self.axes {
            let n = a.norm();
            *a = if n > 1e-12 { *a / n } else { Vec3::y() };
        }
        for a in &mut self.amp {
            a.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        for s in &mut self.log_sharp {
            *s = s.clamp(-12.0, 12.0);
        }
    }

    fn lobes(&self) -> Vec<SgLobe> {
        (0..self.axes.len())
            .map(|k| SgLobe {
                axis: self.axes[k],
                sharpness: self.log_sharp[k].exp(),
                amplitude: self.amp[k],
            })
            .collect()
    }
}

/// Solid-angle-weighted MSE and its gradient w.r.t. the flattened parameters.
fn fit_loss(env: &EnvironmentMap, p: &FitParams, want_grad: bool) -> (f64, Vec<f64>) {
    let k = p.axes.len();
    let lobes = p.lobes();
    let rows: Vec<(f64, f64, Vec<f64>)> = (0..env.height)
        .into_par_iter()
        .map(|j| {
            let wrow = (PI * (j as f64 + 0.5) / env.height as f64).sin();
            let mut loss = 0.0;
            let mut wsum = 0.0;
            let mut grad = if want_grad { vec![0.0; k * 7] } else { Vec::new() };
            let mut e = vec![0.0; k];
            for i in 0..env.width {
                let d = direction(env.width, env.height, i, j);
                let mut pred = [0.0; 3];
                for (q, l) in lobes.iter().enumerate() {
                    e[q] = (l.sharpness * (l.axis.dot(&d) - 1.0)).exp();
                    for c in 0..3 {
                        pred[c] += l.amplitude[c] * e[q];
                    }
                }
                let target = env.data[j * env.width + i];
                let res = [0, 1, 2].map(|c| pred[c] - target[c]);
                loss += wrow * res.iter().map(|r| r * r).sum::<f64>();
                wsum += wrow;
                if want_grad {
                    for (q, l) in lobes.iter().enumerate() {
                        let ra: f64 = (0..3).map(|c| res[c] * l.amplitude[c]).sum::<f64>() * e[q];
                        let g = &mut grad[q * 7..(q + 1) * 7];
                        let dmu = d * (2.0 * wrow * ra * l.sharpness);
                        g[0] += dmu.x;
                        g[1] += dmu.y;
                        g[2] += dmu.z;
                        g[3] += 2.0 * wrow * ra * (l.axis.dot(&d) - 1.0) * l.sharpness;
                        for c in 0..3 {
                            g[4 + c] += 2.0 * wrow * res[c] * e[q];
                        }
                    }
                }
            }
            (loss, wsum, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut wsum = 0.0;
    let mut grad = vec![0.0; if want_grad { k * 7 } else { 0 }];
    for (l, w, g) in rows {
        loss += l;
        wsum += w;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|v| *v /= wsum);
    (loss / wsum, grad)
}

/// Fit `k` SG lobes to `env` with Adam on the solid-angle-weighted MSE. Axes are
/// renormalized after every step, sharpness is optimized in log space and
/// amplitudes are clamped at zero. A step that increases the loss is undone and
/// the step size halved, so the accepted loss never increases.
pub fn fit_sg_environment(env: &EnvironmentMap, k: usize, steps: usize, step_size: f64) -> Result<SgFit> {
    env.validate()?;
    ensure!(k >= 1, "need at least one lobe");
    ensure!(step_size > 0.0 && step_size.is_finite(), "step size must be positive");
    let mean = {
        let s: f64 = env.data.iter().flatten().sum();
        s / (3 * env.data.len()) as f64
    };
    // Fibonacci sphere initialization
    let golden = PI * (3.0 - 5f64.sqrt());
    let axes: Vec<Vec3> = (0..k)
        .map(|q| {
            let y = if k == 1 { 1.0 } else { 1.0 - 2.0 * (q as f64 + 0.5) / k as f64 };
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * q as f64;
            Vec3::new(r * phi.sin(), y, r * phi.cos())
        })
        .collect();
    let mut p = FitParams {
        axes,
        log_sharp: vec![(k as f64).max(1.0).ln(); k],
        amp: vec![[mean; 3]; k],
    };
    let mut adam = Adam::new(k * 7, step_size, 0.9, 0.999);
    let (mut loss, mut grad) = fit_loss(env, &p, true);
    let mut trace = vec![loss];
    for _ in 0..steps {
        let before = p.flatten();
        let saved = adam.clone();
        let mut flat = before.clone();
        adam.step(&mut flat, &grad);
        p.unflatten(&flat);
        p.project();
        let (new_loss, new_grad) = fit_loss(env, &p, true);
        if new_loss <= loss {
            loss = new_loss;
            grad = new_grad;
        } else {
            p.unflatten(&before);
            adam = saved;
            adam.lr *= 0.5;
        }
        trace.push(loss);
    }
    Ok(SgFit {
        lobes: p.lobes(),
        loss,
        trace,
    })
}

/// Evaluate a lobe mixture at `dir`.
pub fn sg_mixture(lobes: &[SgLobe], dir: &Vec3) -> [f64; 3] {
    let mut out = [0.0; 3];
    for l in lobes {
        let v = sg_eval(l, dir);
        for c in 0..3 {
            out[c] += v[c];
        }
    }
    out
}
