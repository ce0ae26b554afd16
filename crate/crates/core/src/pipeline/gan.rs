//! Toy adversarial training: the small modulated generator against two
//! pooled-feature discriminators, one on RGB and one on silhouettes.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{render_targets, View};
use crate::blob::Blob;
use crate::error::{ensure, Result};
use crate::fields::{GeometryNet, GeometryTrace, MappingNetwork, Parameterized, TextureField};
use crate::isosurface::{marching_tetrahedra, marching_tetrahedra_backward, SurfaceMesh};
use crate::losses::{
    discriminator_objective, discriminator_objective_grad, generator_loss, generator_loss_grad, sdf_regularizer_with_grad, DEFAULT_REG_WEIGHT,
};
use crate::math::{leaky_relu, leaky_relu_grad, sigmoid, Adam, Vec3};
use crate::render::{
    antialias, antialias_backward, antialias_silhouette, rasterize, rasterize_backward, sample_camera, shade_with_texture, AaTrace, Camera,
    CameraDistribution, GBuffer, Image,
};
use crate::sdf::AnalyticShape;
use crate::tetgrid::{unique_edges, GeometryField, TetGrid};

const D_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyGanConfig {
    pub latent_dim: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub image_size: usize,
    pub tet_res: u32,
    pub triplane_res: usize,
    pub triplane_channels: usize,
    /// Side of the square average-pooling window of both discriminators.
    pub disc_pool: usize,
    pub disc_hidden: usize,
    /// λ of the R1 penalty.
    pub r1_weight: f64,
    /// R1 is applied every `r1_interval` discriminator steps, scaled by the interval.
    pub r1_interval: usize,
    pub reg_weight: f64,
    pub g_step_size: f64,
    pub d_step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Steps regressing the generator onto spheres before adversarial training.
    pub warmup_steps: usize,
    pub warmup_step_size: f64,
    /// Radius range of the sphere family.
    pub radius_range: [f64; 2],
    pub dataset_size: usize,
    pub camera_radius: f64,
    pub seed: u64,
}

impl Default for ToyGanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            batch_size: 4,
            steps: 200,
            image_size: 32,
            tet_res: 8,
            triplane_res: 8,
            triplane_channels: 4,
            disc_pool: 4,
            disc_hidden: 32,
            r1_weight: 10.0,
            r1_interval: 16,
            reg_weight: DEFAULT_REG_WEIGHT,
            g_step_size: 0.002,
            d_step_size: 0.002,
            beta1: 0.9,
            beta2: 0.99,
            warmup_steps: 300,
            warmup_step_size: 0.03,
            radius_range: [0.35, 0.6],
            dataset_size: 32,
            camera_radius: 2.2,
            seed: 0,
        }
    }
}

impl ToyGanConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("gan.latent_dim", self.latent_dim),
            ("gan.batch_size", self.batch_size),
            ("gan.image_size", self.image_size),
            ("gan.triplane_channels", self.triplane_channels),
            ("gan.disc_pool", self.disc_pool),
            ("gan.disc_hidden", self.disc_hidden),
            ("gan.r1_interval", self.r1_interval),
            ("gan.dataset_size", self.dataset_size),
        ] {
            ensure!(v >= 1, "{k} must be positive");
        }
        ensure!(self.tet_res >= 1, "gan.tet_res must be positive");
        ensure!(self.triplane_res >= 2, "gan.triplane_res must be at least 2");
        ensure!(self.image_size % self.disc_pool == 0, "gan.image_size must be a multiple of gan.disc_pool");
        for (k, v) in [
            ("gan.r1_weight", self.r1_weight),
            ("gan.reg_weight", self.reg_weight),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), "{k} must be nonnegative");
        }
        for (k, v) in [
            ("gan.g_step_size", self.g_step_size),
            ("gan.d_step_size", self.d_step_size),
            ("gan.warmup_step_size", self.warmup_step_size),
            ("gan.camera_radius", self.camera_radius),
        ] {
            ensure!(v > 0.0 && v.is_finite(), "{k} must be positive");
        }
        for (k, v) in [("gan.beta1", self.beta1), ("gan.beta2", self.beta2)] {
            ensure!((0.0..1.0).contains(&v), "{k} must be in [0, 1)");
        }
        let [lo, hi] = self.radius_range;
        ensure!(0.0 < lo && lo <= hi && hi < 1.0, "gan.radius_range must satisfy 0 < lo <= hi < 1");
        Ok(())
    }

    pub fn camera_distribution(&self) -> CameraDistribution {
        CameraDistribution {
            radius: self.camera_radius,
            width: self.image_size,
            height: self.image_size,
            ..CameraDistribution::default()
        }
    }
}

/// Color of a family member: a fixed function of its radius.
pub fn family_color(radius: f64) -> [f64; 3] {
    [0.2 + radius, 0.5, 0.9 - radius]
}

/// Views of spheres with radii uniform in `radius_range`, each from a camera
/// drawn from `dist`.
pub fn sphere_family_dataset(n: usize, radius_range: [f64; 2], dist: &CameraDistribution, rng: &mut impl Rng) -> Result<Vec<View>> {
    ensure!(n >= 1, "dataset must be nonempty");
    (0..n)
        .map(|_| {
            let r = radius_range[0] + (radius_range[1] - radius_range[0]) * rng.random::<f64>();
            let cam = sample_camera(dist, rng)?;
            let c = family_color(r);
            Ok(render_targets(&AnalyticShape::Sphere { radius: r }, |_| c, &[cam], 24)?.remove(0))
        })
        .collect()
}

/// Average pooling by `k`, then a leaky-ReLU hidden layer and a linear logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub channels: usize,
    pub size: usize,
    pub pool: usize,
    pub hidden: usize,
    /// Row-major `hidden x features`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Forward values kept for the backward passes of [`Discriminator`].
#[derive(Debug, Clone)]
pub struct DiscTrace {
    feat: Vec<f64>,
    pre: Vec<f64>,
}

impl Discriminator {
    pub fn random(channels: usize, size: usize, pool: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let nf = channels * (size / pool) * (size / pool);
        let s1 = (2.0 / nf as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
        Self {
            channels,
            size,
            pool,
            hidden,
            w1: (0..hidden * nf).map(|_| normal(s1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden).map(|_| normal(s2)).collect(),
            b2: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.hidden],
            w2: vec![0.0; self.hidden],
            b2: 0.0,
            ..self.clone()
        }
    }

    pub fn num_features(&self) -> usize {
        self.channels * (self.size / self.pool).pow(2)
    }

    /// Feature `c * cells + cy * side + cx` averages channel `c` over one `pool x pool` block.
    fn pool_image(&self, img: &Image) -> Vec<f64> {
        let side = self.size / self.pool;
        let norm = 1.0 / (self.pool * self.pool) as f64;
        let mut f = vec![0.0; self.num_features()];
        for y in 0..self.size {
            for x in 0..self.size {
                let cell = (y / self.pool) * side + x / self.pool;
                for c in 0..self.channels {
                    f[c * side * side + cell] += norm * img.data[(y * self.size + x) * self.channels + c];
                }
            }
        }
        f
    }

    pub fn forward(&self, img: &Image) -> Result<(f64, DiscTrace)> {
        ensure!(
            img.width == self.size && img.height == self.size && img.channels == self.channels,
            "discriminator expects {0}x{0}x{1} images",
            self.size,
            self.channels
        );
        let feat = self.pool_image(img);
        let nf = feat.len();
        let pre: Vec<f64> = (0..self.hidden)
            .map(|h| self.b1[h] + self.w1[h * nf..(h + 1) * nf].iter().zip(&feat).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let logit = self.b2 + pre.iter().zip(&self.w2).map(|(p, w)| leaky_relu(*p, D_SLOPE) * w).sum::<f64>();
        Ok((logit, DiscTrace { feat, pre }))
    }

    /// `u = σ'(pre) ⊙ w2` and `q = W1ᵀ u`, so that `∂D/∂feat = q`.
    fn feature_grad(&self, t: &DiscTrace) -> (Vec<f64>, Vec<f64>) {
        let nf = t.feat.len();
        let u: Vec<f64> = (0..self.hidden).map(|h| leaky_relu_grad(t.pre[h], D_SLOPE) * self.w2[h]).collect();
        let mut q = vec![0.0; nf];
        for h in 0..self.hidden {
            for j in 0..nf {
                q[j] += self.w1[h * nf + j] * u[h];
            }
        }
        (u, q)
    }

    /// `∂D/∂image`, image-shaped.
    pub fn input_grad(&self, t: &DiscTrace) -> Image {
        let (_, q) = self.feature_grad(t);
        let side = self.size / self.pool;
        let norm = 1.0 / (self.pool * self.pool) as f64;
        let mut g = Image::new(self.size, self.size, self.channels);
        for y in 0..self.size {
            for x in 0..self.size {
                let cell = (y / self.pool) * side + x / self.pool;
                for c in 0..self.channels {
                    g.data[(y * self.size + x) * self.channels + c] = norm * q[c * side * side + cell];
                }
            }
        }
        g
    }

    /// `|∂D/∂image|²`. Pooling rows are orthogonal with squared norm `1/k²`, so this is `|q|² / k²`.
    pub fn r1(&self, t: &DiscTrace) -> f64 {
        let (_, q) = self.feature_grad(t);
        q.iter().map(|x| x * x).sum::<f64>() / (self.pool * self.pool) as f64
    }

    /// Accumulate `scale · ∂D/∂θ` into `grad`.
    pub fn backward_logit(&self, t: &DiscTrace, scale: f64, grad: &mut Discriminator) {
        let nf = t.feat.len();
        grad.b2 += scale;
        for h in 0..self.hidden {
            grad.w2[h] += scale * leaky_relu(t.pre[h], D_SLOPE);
            let dpre = scale * self.w2[h] * leaky_relu_grad(t.pre[h], D_SLOPE);
            grad.b1[h] += dpre;
            for j in 0..nf {
                grad.w1[h * nf + j] += dpre * t.feat[j];
            }
        }
    }

    /// Accumulate `scale · ∂R1/∂θ` into `grad`. The leaky-ReLU slopes are
    /// locally constant, so only `W1` and `w2` receive gradient.
    pub fn backward_r1(&self, t: &DiscTrace, scale: f64, grad: &mut Discriminator) {
        let nf = t.feat.len();
        let (u, q) = self.feature_grad(t);
        let c = 2.0 * scale / (self.pool * self.pool) as f64;
        for h in 0..self.hidden {
            let wq: f64 = (0..nf).map(|j| self.w1[h * nf + j] * q[j]).sum();
            grad.w2[h] += c * leaky_relu_grad(t.pre[h], D_SLOPE) * wq;
            for j in 0..nf {
                grad.w1[h * nf + j] += c * u[h] * q[j];
            }
        }
    }
}

impl Parameterized for Discriminator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let nf = self.num_features();
        f("w1", &[self.hidden, nf], &mut self.w1);
        f("b1", &[self.hidden], &mut self.b1);
        f("w2", &[self.hidden], &mut self.w2);
        f("b2", &[1], std::slice::from_mut(&mut self.b2));
    }
}

/// Mapping network, geometry network and texture field.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub mapping: MappingNetwork,
    pub geometry: GeometryNet,
    pub texture: TextureField,
}

impl Parameterized for Generator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.mapping.visit_params(f);
        self.geometry.visit_params(f);
        self.texture.visit_params(f);
    }
}

/// One generated sample with everything its backward pass needs.
pub struct GenSample {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pres: Vec<Vec<f64>>,
    pub field: GeometryField,
    gtrace: GeometryTrace,
    pub mesh: SurfaceMesh,
    gbuf: GBuffer,
    rgb_hard: Image,
    aa_rgb: AaTrace,
    aa_mask: AaTrace,
    pub rgb: Image,
    pub mask: Image,
}

impl Generator {
    pub fn random(cfg: &ToyGanConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.latent_dim;
        Self {
            mapping: MappingNetwork::random(&[d, d, d], rng),
            geometry: GeometryNet::random(d, rng),
            texture: TextureField::random(cfg.triplane_res, cfg.triplane_channels, 2 * d, true, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mapping: self.mapping.zeros_like(),
            geometry: self.geometry.zeros_like(),
            texture: self.texture.zeros_like(),
        }
    }

    /// Geometry field for a noise vector.
    pub fn field(&self, grid: &TetGrid, z: &[f64]) -> Result<GeometryField> {
        let w = self.mapping.forward(z)?;
        Ok(self.geometry.eval(grid, &w)?.0)
    }

    pub fn generate(&self, grid: &TetGrid, z: &[f64], cam: &Camera) -> Result<GenSample> {
        let (w, pres) = self.mapping.forward_traced(z)?;
        let (field, gtrace) = self.geometry.eval(grid, &w)?;
        let mesh = marching_tetrahedra(grid, &field)?;
        let gbuf = rasterize(&mesh, cam)?;
        let m = self.texture.condition(&w, &w)?;
        let rgb_hard = shade_with_texture(&gbuf, |p| self.texture.color(&m, p), [0.0; 3]);
        let (rgb, aa_rgb) = antialias(&rgb_hard, &gbuf, &mesh, cam)?;
        let (mask, aa_mask) = antialias_silhouette(&gbuf, &mesh, cam)?;
        Ok(GenSample {
            z: z.to_vec(),
            w,
            pres,
            field,
            gtrace,
            mesh,
            gbuf,
            rgb_hard,
            aa_rgb,
            aa_mask,
            rgb,
            mask,
        })
    }

    /// Backward from image gradients and field gradients of one sample;
    /// accumulates into `grad`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        grid: &TetGrid,
        s: &GenSample,
        cam: &Camera,
        d_rgb: &Image,
        d_mask: &Image,
        d_sdf_extra: &[f64],
        grad: &mut Generator,
    ) -> Result<()> {
        let nv = grid.num_vertices();
        let mut d_sdf = d_sdf_extra.to_vec();
        let mut d_deform = vec![Vec3::zeros(); nv];
        if !s.mesh.is_empty() {
            let (d_hard, dv_rgb) = antialias_backward(&s.aa_rgb, &s.rgb_hard, &s.mesh, cam, d_rgb)?;
            let (_, dv_mask) = antialias_backward(&s.aa_mask, &s.gbuf.mask(), &s.mesh, cam, d_mask)?;
            let m = self.texture.condition(&s.w, &s.w)?;
            let mut d_mod = self.texture.decoder.zero_mod_buffers();
            let mut d_pos = vec![Vec3::zeros(); s.gbuf.num_pixels()];
            for i in (0..s.gbuf.num_pixels()).filter(|&i| s.gbuf.covered(i)) {
                let g = d_hard.pixel(i);
                if g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                d_pos[i] = self.texture.color_backward(&m, &s.gbuf.position[i], &[g[0], g[1], g[2]], &mut d_mod, &mut grad.texture);
            }
            let dv_pos = rasterize_backward(&s.gbuf, &s.mesh, cam, &d_pos)?;
            let dv: Vec<Vec3> = (0..s.mesh.vertices.len()).map(|k| dv_rgb[k] + dv_mask[k] + dv_pos[k]).collect();
            let mg = marching_tetrahedra_backward(grid, &s.field, &s.mesh, &dv)?;
            for k in 0..nv {
                d_sdf[k] += mg.d_sdf[k];
                d_deform[k] = mg.d_deform[k];
            }
            let wcat: Vec<f64> = s.w.iter().chain(&s.w).copied().collect();
            let dw_tex = self.texture.decoder.modulate_backward(&wcat, &m, &d_mod, &mut grad.texture.decoder);
            let d = s.w.len();
            let mut dw = self.geometry.backward(grid, &s.w, &s.gtrace, &d_sdf, &d_deform, &mut grad.geometry);
            for k in 0..d {
                dw[k] += dw_tex[k] + dw_tex[d + k];
            }
            self.mapping.backward(&s.z, &s.pres, &dw, &mut grad.mapping);
        } else {
            let dw = self.geometry.backward(grid, &s.w, &s.gtrace, &d_sdf, &d_deform, &mut grad.geometry);
            self.mapping.backward(&s.z, &s.pres, &dw, &mut grad.mapping);
        }
        Ok(())
    }
}

/// Target radius the warm-start assigns to a noise vector.
pub fn warmup_radius(z: &[f64], range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * sigmoid(z.first().copied().unwrap_or(0.0))
}

/// Losses of the two discriminators and the generator at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualLosses {
    pub d_rgb: f64,
    pub d_mask: f64,
    pub g_rgb: f64,
    pub g_mask: f64,
}

/// Discriminator objectives and generator losses for both image kinds.
pub fn dual_losses(rgb_real: &[f64], rgb_fake: &[f64], mask_real: &[f64], mask_fake: &[f64], r1_rgb: &[f64], r1_mask: &[f64], lambda: f64) -> Result<DualLosses> {
    Ok(DualLosses {
        d_rgb: discriminator_objective(rgb_real, rgb_fake, r1_rgb, lambda)?,
        d_mask: discriminator_objective(mask_real, mask_fake, r1_mask, lambda)?,
        g_rgb: generator_loss(rgb_fake)?,
        g_mask: generator_loss(mask_fake)?,
    })
}

/// All loss terms of one training step. R1 values are present on R1 steps only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanRecord {
    pub step: usize,
    pub losses: DualLosses,
    pub r1_rgb: Option<f64>,
    pub r1_mask: Option<f64>,
    /// Mean SDF regularizer over the generator batch.
    pub l_reg: f64,
}

impl GanRecord {
    /// `(term, value)` pairs for the CSV loss trace.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("d_rgb", self.losses.d_rgb),
            ("d_mask", self.losses.d_mask),
            ("g_rgb", self.losses.g_rgb),
            ("g_mask", self.losses.g_mask),
            ("l_reg", self.l_reg),
        ];
        if let Some(r) = self.r1_rgb {
            v.push(("r1_rgb", r));
        }
        if let Some(r) = self.r1_mask {
            v.push(("r1_mask", r));
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct GanState {
    pub generator: Generator,
    pub d_rgb: Discriminator,
    pub d_mask: Discriminator,
}

impl GanState {
    pub fn to_blob(&self, cfg: &ToyGanConfig) -> Result<Blob> {
        let mut b = Blob::new("toy_gan", serde_json::to_value(cfg)?);
        let mut s = self.clone();
        b.push_params("gen.", &mut s.generator)?;
        b.push_params("d_rgb.", &mut s.d_rgb)?;
        b.push_params("d_mask.", &mut s.d_mask)?;
        Ok(b)
    }

    /// Rebuild from a blob; returns the config stored in its header too.
    pub fn from_blob(b: &Blob) -> Result<(Self, ToyGanConfig)> {
        ensure!(b.header.kind == "toy_gan", "blob kind {} is not toy_gan", b.header.kind);
        let cfg: ToyGanConfig = serde_json::from_value(b.header.meta.clone())?;
        cfg.validate()?;
        let mut s = init_gan_state(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        b.load_params("gen.", &mut s.generator)?;
        b.load_params("d_rgb.", &mut s.d_rgb)?;
        b.load_params("d_mask.", &mut s.d_mask)?;
        Ok((s, cfg))
    }
}

pub fn init_gan_state(cfg: &ToyGanConfig, rng: &mut impl Rng) -> GanState {
    GanState {
        generator: Generator::random(cfg, rng),
        d_rgb: Discriminator::random(3, cfg.image_size, cfg.disc_pool, cfg.disc_hidden, rng),
        d_mask: Discriminator::random(1, cfg.image_size, cfg.disc_pool, cfg.disc_hidden, rng),
    }
}

#[derive(Debug, Clone)]
pub struct GanResult {
    pub state: GanState,
    pub history: Vec<GanRecord>,
    /// Mean squared SDF error at the end of the warm-start.
    pub warmup_loss: f64,
}

fn sample_z(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Regress the generator's SDF onto spheres of radius [`warmup_radius`]`(z)`.
pub fn warm_start(gen: &mut Generator, grid: &TetGrid, cfg: &ToyGanConfig, rng: &mut impl Rng) -> Result<f64> {
    let mut flat = gen.flatten();
    let mut adam = Adam::new(flat.len(), cfg.warmup_step_size, cfg.beta1, cfg.beta2);
    let nv = grid.num_vertices();
    let mut last = f64::NAN;
    for _ in 0..cfg.warmup_steps {
        let mut grad = gen.zeros_like();
        let mut loss = 0.0;
        let scale = 1.0 / (nv * cfg.batch_size) as f64;
        for _ in 0..cfg.batch_size {
            let z = sample_z(cfg.latent_dim, rng);
            let r = warmup_radius(&z, cfg.radius_range);
            let (w, pres) = gen.mapping.forward_traced(&z)?;
            let (field, trace) = gen.geometry.eval(grid, &w)?;
            let d_sdf: Vec<f64> = grid
                .vertices
                .iter()
                .zip(&field.sdf)
                .map(|(p, s)| {
                    let e = s - (p.norm() - r).clamp(-1.0, 1.0);
                    loss += scale * e * e;
                    2.0 * scale * e
                })
                .collect();
            let dw = gen.geometry.backward(grid, &w, &trace, &d_sdf, &vec![Vec3::zeros(); nv], &mut grad.geometry);
            gen.mapping.backward(&z, &pres, &dw, &mut grad.mapping);
        }
        adam.step(&mut flat, &grad.flatten());
        gen.unflatten(&flat);
        last = loss;
    }
    Ok(last)
}

/// Alternating discriminator / generator updates on a rendered dataset.
pub fn toy_gan_train(dataset: &[View], cfg: &ToyGanConfig) -> Result<GanResult> {
    cfg.validate()?;
    ensure!(!dataset.is_empty(), "dataset must be nonempty");
    for v in dataset {
        v.validate()?;
        ensure!(
            v.camera.width == cfg.image_size && v.camera.height == cfg.image_size,
            "dataset views must be {0}x{0}",
            cfg.image_size
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = TetGrid::regular(cfg.tet_res)?;
    let edges = unique_edges(&grid.tets);
    let dist = cfg.camera_distribution();
    let mut st = init_gan_state(cfg, &mut rng);
    let warmup_loss = warm_start(&mut st.generator, &grid, cfg, &mut rng)?;

    let mut g_flat = st.generator.flatten();
    let mut drgb_flat = st.d_rgb.flatten();
    let mut dmask_flat = st.d_mask.flatten();
    let mut g_adam = Adam::new(g_flat.len(), cfg.g_step_size, cfg.beta1, cfg.beta2);
    let mut drgb_adam = Adam::new(drgb_flat.len(), cfg.d_step_size, cfg.beta1, cfg.beta2);
    let mut dmask_adam = Adam::new(dmask_flat.len(), cfg.d_step_size, cfg.beta1, cfg.beta2);
    let b = cfg.batch_size;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let cam = sample_camera(&dist, &mut rng)?;

        // discriminator update
        let reals: Vec<&View> = (0..b).map(|_| dataset.choose(&mut rng).unwrap()).collect();
        let mut fakes = Vec::with_capacity(b);
        for _ in 0..b {
            fakes.push(st.generator.generate(&grid, &sample_z(cfg.latent_dim, &mut rng), &cam)?);
        }
        let fwd = |d: &Discriminator, imgs: Vec<&Image>| -> Result<Vec<(f64, DiscTrace)>> { imgs.into_iter().map(|i| d.forward(i)).collect() };
        let rr = fwd(&st.d_rgb, reals.iter().map(|v| &v.rgb).collect())?;
        let rf = fwd(&st.d_rgb, fakes.iter().map(|s| &s.rgb).collect())?;
        let mr = fwd(&st.d_mask, reals.iter().map(|v| &v.mask).collect())?;
        let mf = fwd(&st.d_mask, fakes.iter().map(|s| &s.mask).collect())?;
        let logits = |v: &[(f64, DiscTrace)]| v.iter().map(|x| x.0).collect::<Vec<_>>();
        let r1_step = step % cfg.r1_interval == 0;
        let lam = cfg.r1_weight * cfg.r1_interval as f64;
        let (r1_rgb, r1_mask): (Vec<f64>, Vec<f64>) = if r1_step {
            (rr.iter().map(|(_, t)| st.d_rgb.r1(t)).collect(), mr.iter().map(|(_, t)| st.d_mask.r1(t)).collect())
        } else {
            (Vec::new(), Vec::new())
        };
        let losses = dual_losses(&logits(&rr), &logits(&rf), &logits(&mr), &logits(&mf), &r1_rgb, &r1_mask, lam)?;

        for (d, real, fake, flat, adam) in [
            (&st.d_rgb, &rr, &rf, &mut drgb_flat, &mut drgb_adam),
            (&st.d_mask, &mr, &mf, &mut dmask_flat, &mut dmask_adam),
        ] {
            let mut grad = d.zeros_like();
            let (gr, gf) = discriminator_objective_grad(&logits(real), &logits(fake));
            for ((_, t), g) in real.iter().zip(&gr) {
                d.backward_logit(t, *g, &mut grad);
            }
            for ((_, t), g) in fake.iter().zip(&gf) {
                d.backward_logit(t, *g, &mut grad);
            }
            if r1_step {
                for (_, t) in real.iter() {
                    d.backward_r1(t, lam / b as f64, &mut grad);
                }
            }
            adam.step(flat, &grad.flatten());
        }
        st.d_rgb.unflatten(&drgb_flat);
        st.d_mask.unflatten(&dmask_flat);

        // generator update
        let mut ggrad = st.generator.zeros_like();
        let mut l_reg = 0.0;
        let mut samples = Vec::with_capacity(b);
        for _ in 0..b {
            samples.push(st.generator.generate(&grid, &sample_z(cfg.latent_dim, &mut rng), &cam)?);
        }
        let frgb: Vec<(f64, DiscTrace)> = samples.iter().map(|s| st.d_rgb.forward(&s.rgb)).collect::<Result<_>>()?;
        let fmask: Vec<(f64, DiscTrace)> = samples.iter().map(|s| st.d_mask.forward(&s.mask)).collect::<Result<_>>()?;
        let grgb = generator_loss_grad(&logits(&frgb));
        let gmask = generator_loss_grad(&logits(&fmask));
        for (k, s) in samples.iter().enumerate() {
            let mut d_rgb = st.d_rgb.input_grad(&frgb[k].1);
            d_rgb.data.iter_mut().for_each(|x| *x *= grgb[k]);
            let mut d_mask = st.d_mask.input_grad(&fmask[k].1);
            d_mask.data.iter_mut().for_each(|x| *x *= gmask[k]);
            let (reg, reg_grad) = sdf_regularizer_with_grad(&s.field.sdf, &edges)?;
            l_reg += reg / b as f64;
            let d_sdf: Vec<f64> = reg_grad.iter().map(|g| g * cfg.reg_weight / b as f64).collect();
            st.generator.backward(&grid, s, &cam, &d_rgb, &d_mask, &d_sdf, &mut ggrad)?;
        }
        g_adam.step(&mut g_flat, &ggrad.flatten());
        st.generator.unflatten(&g_flat);

        let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
        history.push(GanRecord {
            step,
            losses,
            r1_rgb: mean(&r1_rgb),
            r1_mask: mean(&r1_mask),
            l_reg,
        });
    }
    Ok(GanResult {
        state: st,
        history,
        warmup_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::discriminator_objective;

    fn tiny_cfg() -> ToyGanConfig {
        ToyGanConfig {
            steps: 6,
            batch_size: 2,
            image_size: 16,
            tet_res: 5,
            warmup_steps: 20,
            dataset_size: 4,
            ..ToyGanConfig::default()
        }
    }

    fn rand_image(c: usize, size: usize, r: &mut ChaCha8Rng) -> Image {
        let mut img = Image::new(size, size, c);
        img.data.iter_mut().for_each(|x| *x = r.random::<f64>());
        img
    }

    #[test]
    fn discriminator_gradients_match_fd() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let d = Discriminator::random(3, 8, 2, 6, &mut r);
        let img = rand_image(3, 8, &mut r);
        let (_, t) = d.forward(&img).unwrap();
        let h = 1e-6;
        // input gradient
        let gi = d.input_grad(&t);
        for k in [0, 17, 100, 191] {
            let mut a = img.clone();
            a.data[k] += h;
            let mut b = img.clone();
            b.data[k] -= h;
            let fd = (d.forward(&a).unwrap().0 - d.forward(&b).unwrap().0) / (2.0 * h);
            assert!((gi.data[k] - fd).abs() < 1e-7, "input {k}");
        }
        assert!((d.r1(&t) - gi.data.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
        // parameter gradients of the logit and of R1
        let mut gl = d.zeros_like();
        d.backward_logit(&t, 1.0, &mut gl);
        let mut gr = d.zeros_like();
        d.backward_r1(&t, 1.0, &mut gr);
        let (gl, gr) = (gl.clone().flatten(), gr.clone().flatten());
        let base = d.clone().flatten();
        for i in (0..base.len()).step_by(7) {
            let at = |delta: f64| {
                let mut q = base.clone();
                q[i] += delta;
                let mut e = d.clone();
                e.unflatten(&q);
                let (l, tr) = e.forward(&img).unwrap();
                (l, e.r1(&tr))
            };
            let (p, m) = (at(h), at(-h));
            let (fl, fr) = ((p.0 - m.0) / (2.0 * h), (p.1 - m.1) / (2.0 * h));
            assert!((gl[i] - fl).abs() < 1e-6 * fl.abs().max(1.0), "logit param {i}");
            assert!((gr[i] - fr).abs() < 1e-6 * fr.abs().max(1.0), "r1 param {i}: {} vs {fr}", gr[i]);
        }
    }

    #[test]
    fn symmetric_real_logits_match_losses_module() {
        let real = [0.3, -1.2, 2.0];
        let l = dual_losses(&real, &real, &real, &real, &[], &[], 10.0).unwrap();
        let d = discriminator_objective(&real, &real, &[], 10.0).unwrap();
        let g = generator_loss(&real).unwrap();
        assert_eq!(l.d_rgb, d);
        assert_eq!(l.d_mask, d);
        assert_eq!(l.g_rgb, g);
        assert_eq!(l.g_mask, g);
    }

    #[test]
    fn generator_backward_matches_fd() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let grid = TetGrid::regular(cfg.tet_res).unwrap();
        let mut gen = Generator::random(&cfg, &mut r);
        warm_start(&mut gen, &grid, &ToyGanConfig { warmup_steps: 300, ..cfg.clone() }, &mut r).unwrap();
        let cam = sample_camera(&cfg.camera_distribution(), &mut r).unwrap();
        let z = sample_z(cfg.latent_dim, &mut r);
        let s = gen.generate(&grid, &z, &cam).unwrap();
        assert!(!s.mesh.is_empty());
        // scalar objective: <A, rgb> + <B, mask> + <c, sdf>
        let a = rand_image(3, cfg.image_size, &mut r);
        let bm = rand_image(1, cfg.image_size, &mut r);
        let c: Vec<f64> = (0..grid.num_vertices()).map(|_| r.random_range(-1.0..1.0)).collect();
        let obj = |g: &Generator| -> (f64, Vec<Option<u32>>) {
            let s = g.generate(&grid, &z, &cam).unwrap();
            let v = a.data.iter().zip(&s.rgb.data).map(|(x, y)| x * y).sum::<f64>()
                + bm.data.iter().zip(&s.mask.data).map(|(x, y)| x * y).sum::<f64>()
                + c.iter().zip(&s.field.sdf).map(|(x, y)| x * y).sum::<f64>();
            (v, s.gbuf.triangle.clone())
        };
        let mut grad = gen.zeros_like();
        gen.backward(&grid, &s, &cam, &a, &bm, &c, &mut grad).unwrap();
        let g = grad.flatten();
        let base = gen.clone().flatten();
        let (_, ref_tri) = obj(&gen);
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..base.len()).step_by(13) {
            let at = |d: f64| {
                let mut q = base.clone();
                q[i] += d;
                let mut e = gen.clone();
                e.unflatten(&q);
                obj(&e)
            };
            let ((p, tp), (m, tm)) = (at(h), at(-h));
            if tp != ref_tri || tm != ref_tri {
                continue;
            }
            let fd = (p - m) / (2.0 * h);
            // the objective is O(100), so FD carries ~1e-8 absolute noise
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "param {i}: {} vs {fd}", g[i]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn tiny_run_finite_and_deterministic() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        let data = sphere_family_dataset(cfg.dataset_size, cfg.radius_range, &cfg.camera_distribution(), &mut r).unwrap();
        let a = toy_gan_train(&data, &cfg).unwrap();
        let b = toy_gan_train(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), cfg.steps);
        assert!(a.history.iter().all(GanRecord::all_finite));
        assert!(a.history[0].r1_rgb.is_some() && a.history[1].r1_rgb.is_none());
        let blob = Blob::from_bytes(&a.state.to_blob(&cfg).unwrap().to_bytes().unwrap()).unwrap();
        let (back, cfg2) = GanState::from_blob(&blob).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.generator, a.state.generator);
        assert_eq!(back.d_rgb, a.state.d_rgb);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(toy_gan_train(&[], &tiny_cfg()).is_err());
        assert!(ToyGanConfig { image_size: 30, ..ToyGanConfig::default() }.validate().is_err());
    }
}
