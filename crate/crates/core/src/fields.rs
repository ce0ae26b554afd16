//! Neural-field building blocks.
//!
//! Every forward op here has a matching backward that returns (or accumulates)
//! the vector–Jacobian product. Gradient containers reuse the parameter types:
//! a `ModFc` full of zeros is the gradient buffer for a `ModFc`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};
use crate::math::{leaky_relu, leaky_relu_grad, sigmoid, Vec3};
use crate::tetgrid::{GeometryField, TetGrid};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEMOD_EPS: f64 = 1e-8;

/// Visits every trainable tensor as `(name, shape, values)`.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_params(&mut |_, _, v| {
            v.copy_from_slice(&flat[at..at + v.len()]);
            at += v.len();
        });
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }
}

/// Three axis-aligned feature planes (XY, XZ, YZ) spanning `[-1, 1]^2`, with
/// nodes on a regular `res x res` lattice including the borders.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlane {
    pub res: usize,
    pub channels: usize,
    /// `planes[e][(row * res + col) * channels + c]`, `col` along the first axis of the plane.
    pub planes: [Vec<f64>; 3],
}

/// Plane axes: XY, XZ, YZ.
pub const PLANE_AXES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

struct Bilinear {
    idx: [usize; 4],
    wts: [f64; 4],
    /// d(weights)/du and d(weights)/dv in plane-normalized units, zero when clamped.
    dwu: [f64; 4],
    dwv: [f64; 4],
}

impl TriPlane {
    pub fn zeros(res: usize, channels: usize) -> Self {
        let n = res * res * channels;
        Self {
            res,
            channels,
            planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn random(res: usize, channels: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut tp = Self::zeros(res, channels);
        for plane in &mut tp.planes {
            for v in plane.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = scale * z;
            }
        }
        tp
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.res >= 2, "tri-plane resolution must be >= 2");
        ensure!(self.channels >= 1, "tri-plane needs at least one channel");
        for p in &self.planes {
            ensure!(p.len() == self.res * self.res * self.channels, "tri-plane buffer size mismatch");
            ensure!(p.iter().all(|v| v.is_finite()), "tri-plane contains non-finite values");
        }
        Ok(())
    }

    /// Node coordinate `k` maps to `-1 + 2k/(res-1)`.
    pub fn node_coord(&self, k: usize) -> f64 {
        -1.0 + 2.0 * k as f64 / (self.res - 1) as f64
    }

    pub fn at_mut(&mut self, plane: usize, row: usize, col: usize) -> &mut [f64] {
        let c = self.channels;
        let base = (row * self.res + col) * c;
        &mut self.planes[plane][base..base + c]
    }

    fn bilinear(&self, u: f64, v: f64) -> Bilinear {
        let scale = (self.res - 1) as f64 / 2.0;
        let axis = |x: f64| -> (usize, f64, f64) {
            // returns (cell, frac, d frac / d x)
            let inside = (-1.0..=1.0).contains(&x);
            let g = ((x.clamp(-1.0, 1.0) + 1.0) * scale).min((self.res - 1) as f64);
            let cell = (g.floor() as usize).min(self.res - 2);
            (cell, g - cell as f64, if inside { scale } else { 0.0 })
        };
        let (cu, fu, su) = axis(u);
        let (cv, fv, sv) = axis(v);
        let node = |r: usize, c: usize| (r * self.res + c) * self.channels;
        Bilinear {
            idx: [node(cv, cu), node(cv, cu + 1), node(cv + 1, cu), node(cv + 1, cu + 1)],
            wts: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
            dwu: [-(1.0 - fv) * su, (1.0 - fv) * su, -fv * su, fv * su],
            dwv: [-(1.0 - fu) * sv, -fu * sv, (1.0 - fu) * sv, fu * sv],
        }
    }

    /// Sum over the three planes of the bilinearly interpolated features at the
    /// projections of `p`; coordinates outside `[-1, 1]` are clamped.
    pub fn sample(&self, p: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for (e, [a, b]) in PLANE_AXES.iter().enumerate() {
            let bl = self.bilinear(p[*a], p[*b]);
            let plane = &self.planes[e];
            for k in 0..4 {
                let w = bl.wts[k];
                let base = bl.idx[k];
                for c in 0..self.channels {
                    out[c] += w * plane[base + c];
                }
            }
        }
        out
    }

    /// Accumulates `d_out`-weighted feature gradients into `grad` and returns d/dp.
    pub fn sample_backward(&self, p: &Vec3, d_out: &[f64], grad: Option<&mut TriPlane>) -> Vec3 {
        let mut dp = Vec3::zeros();
        let mut grad = grad;
        for (e, [a, b]) in PLANE_AXES.iter().enumerate() {
            let bl = self.bilinear(p[*a], p[*b]);
            let plane = &self.planes[e];
            for k in 0..4 {
                let base = bl.idx[k];
                let mut dot = 0.0;
                for c in 0..self.channels {
                    dot += d_out[c] * plane[base + c];
                }
                dp[*a] += bl.dwu[k] * dot;
                dp[*b] += bl.dwv[k] * dot;
                if let Some(g) = grad.as_deref_mut() {
                    let gp = &mut g.planes[e];
                    for c in 0..self.channels {
                        gp[base + c] += bl.wts[k] * d_out[c];
                    }
                }
            }
        }
        dp
    }
}

impl Parameterized for TriPlane {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.res, self.res, self.channels];
        for (e, name) in ["triplane.xy", "triplane.xz", "triplane.yz"].iter().enumerate() {
            f(name, &shape, &mut self.planes[e]);
        }
    }
}

/// `[sin(p), cos(p)]`.
pub fn positional_encoding(p: &Vec3) -> [f64; 6] {
    [p.x.sin(), p.y.sin(), p.z.sin(), p.x.cos(), p.y.cos(), p.z.cos()]
}

pub fn positional_encoding_backward(p: &Vec3, d_out: &[f64]) -> Vec3 {
    Vec3::new(
        d_out[0] * p.x.cos() - d_out[3] * p.x.sin(),
        d_out[1] * p.y.cos() - d_out[4] * p.y.sin(),
        d_out[2] * p.z.cos() - d_out[5] * p.z.sin(),
    )
}

/// Fully connected layer whose weights are modulated by a per-input style
/// `h = A w + a` and demodulated to unit-norm output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModFc {
    pub in_dim: usize,
    pub out_dim: usize,
    pub latent_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Row-major `in_dim x latent_dim`.
    pub affine: Vec<f64>,
    pub affine_bias: Vec<f64>,
    /// Leaky-ReLU slope, `None` for a linear output.
    pub activation: Option<f64>,
    pub demodulate: bool,
}

/// Weights of a [`ModFc`] after modulation by a particular latent.
#[derive(Debug, Clone)]
pub struct Modulated {
    pub style: Vec<f64>,
    /// Row-major `out x in`, modulated and (optionally) demodulated.
    pub weight: Vec<f64>,
    /// Row norms of the modulated (pre-demodulation) weights.
    pub row_norm: Vec<f64>,
}

/// Forward values needed by [`ModFc::apply_backward`].
#[derive(Debug, Clone)]
pub struct FcCache {
    pub pre: Vec<f64>,
}

impl ModFc {
    pub fn zeros(in_dim: usize, out_dim: usize, latent_dim: usize, activation: Option<f64>) -> Self {
        Self {
            in_dim,
            out_dim,
            latent_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
            affine: vec![0.0; in_dim * latent_dim],
            affine_bias: vec![0.0; in_dim],
            activation,
            demodulate: true,
        }
    }

    /// Standard-normal weights, affine scaled by `1/sqrt(latent_dim)`, style bias 1.
    pub fn random(in_dim: usize, out_dim: usize, latent_dim: usize, activation: Option<f64>, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(in_dim, out_dim, latent_dim, activation);
        let mut normal = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        };
        for w in &mut l.weight {
            *w = normal(1.0);
        }
        let s = 1.0 / (latent_dim.max(1) as f64).sqrt();
        for a in &mut l.affine {
            *a = normal(s);
        }
        l.affine_bias.iter_mut().for_each(|b| *b = 1.0);
        l
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim, self.latent_dim, self.activation)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.weight.len() == self.out_dim * self.in_dim, "ModFc weight shape mismatch");
        ensure!(self.bias.len() == self.out_dim, "ModFc bias shape mismatch");
        ensure!(self.affine.len() == self.in_dim * self.latent_dim, "ModFc affine shape mismatch");
        ensure!(self.affine_bias.len() == self.in_dim, "ModFc affine bias shape mismatch");
        let all = self.weight.iter().chain(&self.bias).chain(&self.affine).chain(&self.affine_bias);
        ensure!(all.into_iter().all(|v| v.is_finite()), "ModFc has non-finite parameters");
        Ok(())
    }

    pub fn style(&self, w: &[f64]) -> Vec<f64> {
        (0..self.in_dim)
            .map(|i| {
                let row = &self.affine[i * self.latent_dim..(i + 1) * self.latent_dim];
                self.affine_bias[i] + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Modulate with the style derived from `w`.
    pub fn modulate(&self, w: &[f64]) -> Result<Modulated> {
        ensure!(
            w.len() == self.latent_dim,
            "latent has {} entries, layer expects {}",
            w.len(),
            self.latent_dim
        );
        Ok(self.modulate_with_style(self.style(w)))
    }

    /// Modulate with an explicit style vector `h`.
    pub fn modulate_with_style(&self, style: Vec<f64>) -> Modulated {
        let mut weight = vec![0.0; self.out_dim * self.in_dim];
        let mut row_norm = vec![0.0; self.out_dim];
        for j in 0..self.out_dim {
            let row = &mut weight[j * self.in_dim..(j + 1) * self.in_dim];
            for i in 0..self.in_dim {
                row[i] = self.weight[j * self.in_dim + i] * style[i];
            }
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row_norm[j] = n;
            if self.demodulate {
                let d = n.max(DEMOD_EPS);
                row.iter_mut().for_each(|x| *x /= d);
            }
        }
        Modulated {
            style,
            weight,
            row_norm,
        }
    }

    /// `y = act(W'' x + b)`.
    pub fn apply(&self, m: &Modulated, x: &[f64]) -> (Vec<f64>, FcCache) {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut pre = self.bias.clone();
        for j in 0..self.out_dim {
            let row = &m.weight[j * self.in_dim..(j + 1) * self.in_dim];
            pre[j] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let y = match self.activation {
            Some(s) => pre.iter().map(|&v| leaky_relu(v, s)).collect(),
            None => pre.clone(),
        };
        (y, FcCache { pre })
    }

    /// Backward through [`ModFc::apply`]. Accumulates d/dW'' into `d_mod_weight`
    /// and d/db into `grad.bias`; returns d/dx.
    pub fn apply_backward(
        &self,
        m: &Modulated,
        x: &[f64],
        cache: &FcCache,
        dy: &[f64],
        d_mod_weight: &mut [f64],
        grad: &mut ModFc,
    ) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for j in 0..self.out_dim {
            let dpre = match self.activation {
                Some(s) => dy[j] * leaky_relu_grad(cache.pre[j], s),
                None => dy[j],
            };
            if dpre == 0.0 {
                continue;
            }
            grad.bias[j] += dpre;
            let row = &m.weight[j * self.in_dim..(j + 1) * self.in_dim];
            let drow = &mut d_mod_weight[j * self.in_dim..(j + 1) * self.in_dim];
            for i in 0..self.in_dim {
                dx[i] += dpre * row[i];
                drow[i] += dpre * x[i];
            }
        }
        dx
    }

    /// Backward through [`ModFc::modulate`]: from d/dW'' to the layer weights and
    /// affine map (accumulated into `grad`); returns d/dw.
    pub fn modulate_backward(&self, w: &[f64], m: &Modulated, d_mod_weight: &[f64], grad: &mut ModFc) -> Vec<f64> {
        let dstyle = self.modulate_backward_style(m, d_mod_weight, grad);
        let mut dw = vec![0.0; self.latent_dim];
        for i in 0..self.in_dim {
            grad.affine_bias[i] += dstyle[i];
            let row = &self.affine[i * self.latent_dim..(i + 1) * self.latent_dim];
            let grow = &mut grad.affine[i * self.latent_dim..(i + 1) * self.latent_dim];
            for k in 0..self.latent_dim {
                grow[k] += dstyle[i] * w[k];
                dw[k] += dstyle[i] * row[k];
            }
        }
        dw
    }

    /// Backward from d/dW'' to the raw weights (accumulated) and to the style vector.
    pub fn modulate_backward_style(&self, m: &Modulated, d_mod_weight: &[f64], grad: &mut ModFc) -> Vec<f64> {
        let mut dstyle = vec![0.0; self.in_dim];
        for j in 0..self.out_dim {
            let r = j * self.in_dim..(j + 1) * self.in_dim;
            let wdd = &m.weight[r.clone()];
            let g = &d_mod_weight[r.clone()];
            // d/dW' (modulated, pre-demodulation)
            let dprime: Vec<f64> = if !self.demodulate {
                g.to_vec()
            } else if m.row_norm[j] > DEMOD_EPS {
                let n = m.row_norm[j];
                let proj: f64 = g.iter().zip(wdd).map(|(a, b)| a * b).sum();
                g.iter().zip(wdd).map(|(gi, wi)| (gi - wi * proj) / n).collect()
            } else {
                g.iter().map(|gi| gi / DEMOD_EPS).collect()
            };
            for i in 0..self.in_dim {
                let raw = self.weight[j * self.in_dim + i];
                grad.weight[j * self.in_dim + i] += dprime[i] * m.style[i];
                dstyle[i] += dprime[i] * raw;
            }
        }
        dstyle
    }

    /// Single-input convenience forward.
    pub fn forward(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        ensure!(x.len() == self.in_dim, "input has {} entries, layer expects {}", x.len(), self.in_dim);
        let m = self.modulate(w)?;
        Ok(self.apply(&m, x).0)
    }
}

impl Parameterized for ModFc {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        f("weight", &[self.out_dim, self.in_dim], &mut self.weight);
        f("bias", &[self.out_dim], &mut self.bias);
        f("affine", &[self.in_dim, self.latent_dim], &mut self.affine);
        f("affine_bias", &[self.in_dim], &mut self.affine_bias);
    }
}

/// Stack of [`ModFc`] layers sharing one conditioning latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModMlp {
    pub layers: Vec<ModFc>,
}

/// Per-layer modulated weights for one latent.
#[derive(Debug, Clone)]
pub struct ModulatedMlp {
    pub layers: Vec<Modulated>,
}

/// Activations recorded by [`ModMlp::apply`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer followed by the final output.
    pub acts: Vec<Vec<f64>>,
    pub caches: Vec<FcCache>,
}

impl ModMlp {
    /// `dims = [in, hidden.., out]`; leaky ReLU on all but the last layer.
    pub fn random(dims: &[usize], latent_dim: usize, rng: &mut impl Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 < n { Some(LEAKY_SLOPE) } else { None };
                ModFc::random(dims[k], dims[k + 1], latent_dim, act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(ModFc::zeros_like).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[0].latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.layers.is_empty(), "decoder has no layers");
        for (k, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if k > 0 {
                ensure!(
                    self.layers[k - 1].out_dim == l.in_dim,
                    "decoder layer {k} expects {} inputs but previous layer emits {}",
                    l.in_dim,
                    self.layers[k - 1].out_dim
                );
            }
            ensure!(l.latent_dim == self.layers[0].latent_dim, "decoder layers disagree on latent size");
        }
        Ok(())
    }

    pub fn modulate(&self, w: &[f64]) -> Result<ModulatedMlp> {
        Ok(ModulatedMlp {
            layers: self.layers.iter().map(|l| l.modulate(w)).collect::<Result<_>>()?,
        })
    }

    pub fn apply(&self, m: &ModulatedMlp, x: &[f64]) -> MlpTrace {
        let mut acts = vec![x.to_vec()];
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, ml) in self.layers.iter().zip(&m.layers) {
            let (y, c) = l.apply(ml, acts.last().unwrap());
            acts.push(y);
            caches.push(c);
        }
        MlpTrace { acts, caches }
    }

    /// Backward through [`ModMlp::apply`]; accumulates into `d_mod` (one buffer per
    /// layer, shaped like the modulated weights) and biases in `grad`. Returns d/dx.
    pub fn apply_backward(
        &self,
        m: &ModulatedMlp,
        trace: &MlpTrace,
        dy: &[f64],
        d_mod: &mut [Vec<f64>],
        grad: &mut ModMlp,
    ) -> Vec<f64> {
        let mut d = dy.to_vec();
        for k in (0..self.layers.len()).rev() {
            d = self.layers[k].apply_backward(&m.layers[k], &trace.acts[k], &trace.caches[k], &d, &mut d_mod[k], &mut grad.layers[k]);
        }
        d
    }

    pub fn zero_mod_buffers(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| vec![0.0; l.in_dim * l.out_dim]).collect()
    }

    /// Finish the backward pass through modulation; returns d/dw.
    pub fn modulate_backward(&self, w: &[f64], m: &ModulatedMlp, d_mod: &[Vec<f64>], grad: &mut ModMlp) -> Vec<f64> {
        let mut dw = vec![0.0; self.latent_dim()];
        for k in 0..self.layers.len() {
            let d = self.layers[k].modulate_backward(w, &m.layers[k], &d_mod[k], &mut grad.layers[k]);
            dw.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        dw
    }
}

impl Parameterized for ModMlp {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&mut |name, shape, v| f(&format!("layer{k}.{name}"), shape, v));
        }
    }
}

/// Plain fully connected layer with leaky ReLU, used by the mapping network.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    pub fn random(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        let s = (2.0 / in_dim as f64).sqrt();
        for w in &mut l.weight {
            let z: f64 = StandardNormal.sample(rng);
            *w = s * z;
        }
        l
    }

    fn pre(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|j| self.bias[j] + self.weight[j * self.in_dim..(j + 1) * self.in_dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

/// Maps a noise vector to a style-space latent through leaky-ReLU FC layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork {
    pub layers: Vec<FcLayer>,
}

impl MappingNetwork {
    pub fn random(dims: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|d| FcLayer::random(d[0], d[1], rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| FcLayer::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.layers.is_empty(), "mapping network has no layers");
        for (k, l) in self.layers.iter().enumerate() {
            ensure!(
                l.weight.len() == l.in_dim * l.out_dim && l.bias.len() == l.out_dim,
                "mapping layer {k} shape mismatch"
            );
            if k > 0 {
                ensure!(self.layers[k - 1].out_dim == l.in_dim, "mapping layer {k} input dim mismatch");
            }
        }
        Ok(())
    }

    /// Forward pass; returns every layer's pre-activation for the backward pass.
    pub fn forward_traced(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.validate()?;
        ensure!(
            z.len() == self.layers[0].in_dim,
            "mapping input has {} entries, network expects {}",
            z.len(),
            self.layers[0].in_dim
        );
        let mut x = z.to_vec();
        let mut pres = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let pre = l.pre(&x);
            x = pre.iter().map(|&v| leaky_relu(v, LEAKY_SLOPE)).collect();
            pres.push(pre);
        }
        Ok((x, pres))
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(z)?.0)
    }

    /// Accumulates parameter gradients into `grad`; returns d/dz.
    pub fn backward(&self, z: &[f64], pres: &[Vec<f64>], dy: &[f64], grad: &mut MappingNetwork) -> Vec<f64> {
        let mut d = dy.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let input: Vec<f64> = if k == 0 {
                z.to_vec()
            } else {
                pres[k - 1].iter().map(|&v| leaky_relu(v, LEAKY_SLOPE)).collect()
            };
            let dpre: Vec<f64> = d.iter().zip(&pres[k]).map(|(g, p)| g * leaky_relu_grad(*p, LEAKY_SLOPE)).collect();
            let mut dx = vec![0.0; l.in_dim];
            let gl = &mut grad.layers[k];
            for j in 0..l.out_dim {
                gl.bias[j] += dpre[j];
                for i in 0..l.in_dim {
                    gl.weight[j * l.in_dim + i] += dpre[j] * input[i];
                    dx[i] += dpre[j] * l.weight[j * l.in_dim + i];
                }
            }
            d = dx;
        }
        d
    }
}

impl Parameterized for MappingNetwork {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            f(&format!("map{k}.weight"), &[l.out_dim, l.in_dim], &mut l.weight);
            f(&format!("map{k}.bias"), &[l.out_dim], &mut l.bias);
        }
    }
}

/// Conditional texture field: tri-plane features decoded to RGB by a small
/// modulated MLP conditioned on `w_geo ⊕ w_tex`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureField {
    pub triplane: TriPlane,
    pub decoder: ModMlp,
    /// Concatenate `[sin p, cos p]` to the tri-plane feature before decoding.
    pub use_pe: bool,
}

/// Hidden width of the texture and geometry decoders.
pub const DECODER_HIDDEN: usize = 16;

impl TextureField {
    pub fn random(res: usize, channels: usize, latent_dim: usize, use_pe: bool, rng: &mut impl Rng) -> Self {
        let input = channels + if use_pe { 6 } else { 0 };
        Self {
            triplane: TriPlane::random(res, channels, 0.1, rng),
            decoder: ModMlp::random(&[input, DECODER_HIDDEN, DECODER_HIDDEN, 3], latent_dim, rng),
            use_pe,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            triplane: TriPlane::zeros(self.triplane.res, self.triplane.channels),
            decoder: self.decoder.zeros_like(),
            use_pe: self.use_pe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.triplane.validate()?;
        self.decoder.validate()?;
        let expect = self.triplane.channels + if self.use_pe { 6 } else { 0 };
        ensure!(
            self.decoder.in_dim() == expect,
            "decoder input dim {} does not match tri-plane features {}",
            self.decoder.in_dim(),
            expect
        );
        ensure!(self.decoder.out_dim() == 3, "texture decoder must emit 3 channels");
        Ok(())
    }

    /// Modulate the decoder with `w_geo ⊕ w_tex`.
    pub fn condition(&self, w_geo: &[f64], w_tex: &[f64]) -> Result<ModulatedMlp> {
        let w: Vec<f64> = w_geo.iter().chain(w_tex).copied().collect();
        ensure!(
            w.len() == self.decoder.latent_dim(),
            "concatenated latent has {} entries, decoder expects {}",
            w.len(),
            self.decoder.latent_dim()
        );
        self.decoder.modulate(&w)
    }

    fn features(&self, p: &Vec3) -> Vec<f64> {
        let mut x = self.triplane.sample(p);
        if self.use_pe {
            x.extend_from_slice(&positional_encoding(p));
        }
        x
    }

    pub fn color(&self, m: &ModulatedMlp, p: &Vec3) -> [f64; 3] {
        let t = self.decoder.apply(m, &self.features(p));
        let o = t.acts.last().unwrap();
        [sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2])]
    }

    /// Backward through [`TextureField::color`]. Accumulates tri-plane and bias
    /// gradients into `grad` and modulated-weight gradients into `d_mod`; returns d/dp.
    pub fn color_backward(&self, m: &ModulatedMlp, p: &Vec3, d_rgb: &[f64; 3], d_mod: &mut [Vec<f64>], grad: &mut TextureField) -> Vec3 {
        let x = self.features(p);
        let t = self.decoder.apply(m, &x);
        let o = t.acts.last().unwrap();
        let dy: Vec<f64> = (0..3)
            .map(|c| {
                let s = sigmoid(o[c]);
                d_rgb[c] * s * (1.0 - s)
            })
            .collect();
        let dx = self.decoder.apply_backward(m, &t, &dy, d_mod, &mut grad.decoder);
        let c = self.triplane.channels;
        let mut dp = self.triplane.sample_backward(p, &dx[..c], Some(&mut grad.triplane));
        if self.use_pe {
            dp += positional_encoding_backward(p, &dx[c..]);
        }
        dp
    }
}

impl Parameterized for TextureField {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.triplane.visit_params(f);
        self.decoder.visit_params(&mut |name, shape, v| f(&format!("texdec.{name}"), shape, v));
    }
}

/// Color at `p` for latents `w_geo`, `w_tex`: tri-plane sample, decoder, sigmoid.
pub fn texture_color(p: &Vec3, field: &TextureField, w_geo: &[f64], w_tex: &[f64]) -> Result<[f64; 3]> {
    field.validate()?;
    let m = field.condition(w_geo, w_tex)?;
    Ok(field.color(&m, p))
}

/// Per-vertex geometry generator: `[sin v, cos v]` decoded by a modulated MLP
/// with four outputs, squashed by `tanh` (deformation scaled by `1/tet_res`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryNet {
    pub mlp: ModMlp,
}

/// Pre-activation outputs of [`GeometryNet::eval`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GeometryTrace {
    pub modulated: ModulatedMlp,
    pub raw: Vec<[f64; 4]>,
}

impl GeometryNet {
    pub fn random(latent_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: ModMlp::random(&[6, DECODER_HIDDEN, DECODER_HIDDEN, 4], latent_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        ensure!(self.mlp.in_dim() == 6, "geometry net must take the 6-d positional encoding");
        ensure!(self.mlp.out_dim() == 4, "geometry net must emit 4 channels (sdf + deformation)");
        Ok(())
    }

    pub fn eval(&self, grid: &TetGrid, w: &[f64]) -> Result<(GeometryField, GeometryTrace)> {
        self.validate()?;
        let m = self.mlp.modulate(w)?;
        let bound = grid.deform_bound();
        let raw: Vec<[f64; 4]> = grid
            .vertices
            .iter()
            .map(|v| {
                let t = self.mlp.apply(&m, &positional_encoding(v));
                let o = t.acts.last().unwrap();
                [o[0], o[1], o[2], o[3]]
            })
            .collect();
        let field = GeometryField {
            sdf: raw.iter().map(|r| r[0].tanh()).collect(),
            deform: raw.iter().map(|r| Vec3::new(r[1].tanh(), r[2].tanh(), r[3].tanh()) * bound).collect(),
            deform_bound: bound,
        };
        Ok((field, GeometryTrace { modulated: m, raw }))
    }

    /// Backward from per-vertex field gradients to network parameters
    /// (accumulated into `grad`); returns d/dw.
    pub fn backward(&self, grid: &TetGrid, w: &[f64], trace: &GeometryTrace, d_sdf: &[f64], d_deform: &[Vec3], grad: &mut GeometryNet) -> Vec<f64> {
        let bound = grid.deform_bound();
        let mut d_mod = self.mlp.zero_mod_buffers();
        for (v, p) in grid.vertices.iter().enumerate() {
            let r = &trace.raw[v];
            let dy = [
                d_sdf[v] * (1.0 - r[0].tanh().powi(2)),
                d_deform[v].x * bound * (1.0 - r[1].tanh().powi(2)),
                d_deform[v].y * bound * (1.0 - r[2].tanh().powi(2)),
                d_deform[v].z * bound * (1.0 - r[3].tanh().powi(2)),
            ];
            if dy.iter().all(|&x| x == 0.0) {
                continue;
            }
            let t = self.mlp.apply(&trace.modulated, &positional_encoding(p));
            self.mlp.apply_backward(&trace.modulated, &t, &dy, &mut d_mod, &mut grad.mlp);
        }
        self.mlp.modulate_backward(w, &trace.modulated, &d_mod, &mut grad.mlp)
    }
}

impl Parameterized for GeometryNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.mlp.visit_params(&mut |name, shape, v| f(&format!("geodec.{name}"), shape, v));
    }
}

/// Evaluate the toy geometry generator on every grid vertex.
pub fn toy_geometry_field(grid: &TetGrid, w: &[f64], net: &GeometryNet) -> Result<GeometryField> {
    Ok(net.eval(grid, w)?.0)
}

/// `(1 - t) a + t b`.
pub fn lerp_latent(a: &[f64], b: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure!(a.len() == b.len(), "latent dims differ: {} vs {}", a.len(), b.len());
    Ok(a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isosurface::{marching_tetrahedra, marching_tetrahedra_backward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random_point(r: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(r.random_range(-0.95..0.95), r.random_range(-0.95..0.95), r.random_range(-0.95..0.95))
    }

    #[test]
    fn triplane_constant_planes_sum() {
        let mut tp = TriPlane::zeros(4, 1);
        for (e, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            tp.planes[e].iter_mut().for_each(|x| *x = *v);
        }
        let mut r = rng(1);
        for _ in 0..20 {
            assert!((tp.sample(&random_point(&mut r))[0] - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn triplane_reproduces_bilinear_functions() {
        let mut tp = TriPlane::zeros(5, 1);
        let (a, b, c) = (0.3, -1.2, 0.7);
        for e in 0..3 {
            for row in 0..5 {
                for col in 0..5 {
                    let (u, v) = (tp.node_coord(col), tp.node_coord(row));
                    let val = if e == 0 { a + b * u + c * v + 0.5 * u * v } else { 0.0 };
                    tp.at_mut(e, row, col)[0] = val;
                }
            }
        }
        let mut r = rng(2);
        for _ in 0..50 {
            let p = random_point(&mut r);
            let expect = a + b * p.x + c * p.y + 0.5 * p.x * p.y;
            assert!((tp.sample(&p)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn triplane_matches_four_corner_oracle() {
        let mut r = rng(3);
        let tp = TriPlane::random(7, 3, 1.0, &mut r);
        for _ in 0..30 {
            let p = random_point(&mut r);
            let got = tp.sample(&p);
            let mut expect = vec![0.0; 3];
            for (e, [ax, bx]) in PLANE_AXES.iter().enumerate() {
                let gu = (p[*ax] + 1.0) / 2.0 * 6.0;
                let gv = (p[*bx] + 1.0) / 2.0 * 6.0;
                let (i0, j0) = (gu.floor() as usize, gv.floor() as usize);
                let (fu, fv) = (gu - i0 as f64, gv - j0 as f64);
                for c in 0..3 {
                    let at = |i: usize, j: usize| tp.planes[e][(j * 7 + i) * 3 + c];
                    expect[c] += at(i0, j0) * (1.0 - fu) * (1.0 - fv)
                        + at(i0 + 1, j0) * fu * (1.0 - fv)
                        + at(i0, j0 + 1) * (1.0 - fu) * fv
                        + at(i0 + 1, j0 + 1) * fu * fv;
                }
            }
            for c in 0..3 {
                assert!((got[c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triplane_clamps_outside_domain() {
        let mut r = rng(4);
        let tp = TriPlane::random(5, 2, 1.0, &mut r);
        let inside = tp.sample(&Vec3::new(1.0, -1.0, 1.0));
        let outside = tp.sample(&Vec3::new(3.0, -7.0, 1.5));
        assert_eq!(inside, outside);
    }

    #[test]
    fn triplane_gradients_match_fd() {
        let mut r = rng(5);
        for _ in 0..20 {
            let tp = TriPlane::random(6, 2, 1.0, &mut r);
            let p = random_point(&mut r);
            let d_out = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let loss = |tp: &TriPlane, p: &Vec3| -> f64 { tp.sample(p).iter().zip(&d_out).map(|(a, b)| a * b).sum() };
            let mut g = TriPlane::zeros(6, 2);
            let dp = tp.sample_backward(&p, &d_out, Some(&mut g));
            let h = 1e-5;
            for k in 0..3 {
                let mut pp = p;
                pp[k] += h;
                let mut pm = p;
                pm[k] -= h;
                let fd = (loss(&tp, &pp) - loss(&tp, &pm)) / (2.0 * h);
                assert!(rel_err(dp[k], fd) < 1e-4, "dp[{k}] {} vs {}", dp[k], fd);
            }
            for _ in 0..5 {
                let e = r.random_range(0..3);
                let i = r.random_range(0..tp.planes[e].len());
                let mut tpp = tp.clone();
                tpp.planes[e][i] += h;
                let mut tpm = tp.clone();
                tpm.planes[e][i] -= h;
                let fd = (loss(&tpp, &p) - loss(&tpm, &p)) / (2.0 * h);
                assert!((g.planes[e][i] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn triplane_is_linear_in_features() {
        let mut r = rng(6);
        let a = TriPlane::random(5, 2, 1.0, &mut r);
        let b = TriPlane::random(5, 2, 1.0, &mut r);
        let (alpha, beta) = (0.7, -1.3);
        let mut comb = a.clone();
        for e in 0..3 {
            for i in 0..comb.planes[e].len() {
                comb.planes[e][i] = alpha * a.planes[e][i] + beta * b.planes[e][i];
            }
        }
        let p = random_point(&mut r);
        let (sa, sb, sc) = (a.sample(&p), b.sample(&p), comb.sample(&p));
        for c in 0..2 {
            assert!((sc[c] - (alpha * sa[c] + beta * sb[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_values() {
        assert_eq!(positional_encoding(&Vec3::zeros()), [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let pe = positional_encoding(&Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        let expect = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        for k in 0..6 {
            assert!((pe[k] - expect[k]).abs() < 1e-15);
        }
        let mut r = rng(7);
        for _ in 0..10 {
            let p = random_point(&mut r);
            let pe = positional_encoding(&p);
            for k in 0..3 {
                assert_eq!(pe[k], p[k].sin());
                assert_eq!(pe[k + 3], p[k].cos());
            }
        }
    }

    #[test]
    fn demodulation_hand_example() {
        let mut l = ModFc::zeros(2, 1, 1, None);
        l.weight = vec![3.0, 4.0];
        let m = l.modulate_with_style(vec![1.0, 1.0]);
        assert!((m.weight[0] - 0.6).abs() < 1e-15 && (m.weight[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn demodulation_cancels_uniform_style() {
        let mut r = rng(8);
        let l = ModFc::random(5, 4, 3, Some(LEAKY_SLOPE), &mut r);
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let base = l.apply(&l.modulate_with_style(vec![1.0; 5]), &x).0;
        for c in [0.1, 2.0, 17.0] {
            let y = l.apply(&l.modulate_with_style(vec![c; 5]), &x).0;
            for (a, b) in y.iter().zip(&base) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let m = l.modulate(&[0.3, -0.2, 0.9]).unwrap();
        for j in 0..4 {
            let n: f64 = m.weight[j * 5..(j + 1) * 5].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_row_guarded() {
        let l = ModFc::zeros(3, 2, 2, None);
        let y = l.forward(&[1.0, 2.0, 3.0], &[0.5, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert!(l.forward(&[1.0, 2.0], &[0.5, 0.5]).is_err());
        assert!(l.forward(&[1.0, 2.0, 3.0], &[0.5]).is_err());
    }

    /// Loss `sum(dy * layer(x, w))` and all its analytic gradients.
    fn modfc_loss_and_grads(l: &ModFc, x: &[f64], w: &[f64], dy: &[f64]) -> (f64, Vec<f64>, Vec<f64>, ModFc) {
        let m = l.modulate(w).unwrap();
        let (y, cache) = l.apply(&m, x);
        let loss = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        let mut grad = l.zeros_like();
        let mut dmod = vec![0.0; l.in_dim * l.out_dim];
        let dx = l.apply_backward(&m, x, &cache, dy, &mut dmod, &mut grad);
        let dw = l.modulate_backward(w, &m, &dmod, &mut grad);
        (loss, dx, dw, grad)
    }

    #[test]
    fn modfc_gradients_match_fd() {
        let mut r = rng(9);
        let h = 1e-6;
        for trial in 0..20 {
            let (din, dout, dl) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
            let act = if trial % 2 == 0 { Some(LEAKY_SLOPE) } else { None };
            let l = ModFc::random(din, dout, dl, act, &mut r);
            let x: Vec<f64> = (0..din).map(|_| r.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..dl).map(|_| r.random_range(-1.0..1.0)).collect();
            let dy: Vec<f64> = (0..dout).map(|_| r.random_range(-1.0..1.0)).collect();
            let (_, dx, dw, mut grad) = modfc_loss_and_grads(&l, &x, &w, &dy);
            let f = |l: &ModFc, x: &[f64], w: &[f64]| modfc_loss_and_grads(l, x, w, &dy).0;
            for i in 0..din {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (f(&l, &xp, &w) - f(&l, &xm, &w)) / (2.0 * h);
                assert!(rel_err(dx[i], fd) < 1e-5 || (dx[i] - fd).abs() < 1e-9, "dx {} {}", dx[i], fd);
            }
            for k in 0..dl {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[k] += h;
                wm[k] -= h;
                let fd = (f(&l, &x, &wp) - f(&l, &x, &wm)) / (2.0 * h);
                assert!(rel_err(dw[k], fd) < 1e-5 || (dw[k] - fd).abs() < 1e-9, "dw {} {}", dw[k], fd);
            }
            let analytic = grad.flatten();
            let mut lp = l.clone();
            let base = lp.flatten();
            for idx in 0..base.len() {
                let mut p = base.clone();
                p[idx] += h;
                lp.unflatten(&p);
                let fp = f(&lp, &x, &w);
                p[idx] -= 2.0 * h;
                lp.unflatten(&p);
                let fm = f(&lp, &x, &w);
                let fd = (fp - fm) / (2.0 * h);
                assert!(rel_err(analytic[idx], fd) < 1e-5 || (analytic[idx] - fd).abs() < 1e-9, "param {idx}: {} vs {}", analytic[idx], fd);
            }
            let _ = grad.num_params();
        }
    }

    #[test]
    fn texture_color_range_and_zero_decoder() {
        let mut r = rng(10);
        let mut tf = TextureField::random(8, 4, 6, false, &mut r);
        let (wg, wt) = (vec![0.2; 3], vec![-0.4; 3]);
        for _ in 0..50 {
            let c = texture_color(&random_point(&mut r), &tf, &wg, &wt).unwrap();
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for l in &mut tf.decoder.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let c = texture_color(&random_point(&mut r), &tf, &wg, &wt).unwrap();
        assert_eq!(c, [0.5, 0.5, 0.5]);
        assert!(texture_color(&Vec3::zeros(), &tf, &wg, &[0.0; 2]).is_err());
    }

    #[test]
    fn texture_chain_gradients_match_fd() {
        let mut r = rng(11);
        let h = 1e-6;
        for trial in 0..6 {
            let tf = TextureField::random(5, 3, 4, trial % 2 == 0, &mut r);
            let (wg, wt) = (vec![0.3, -0.1], vec![0.5, 0.2]);
            let p = random_point(&mut r);
            let d_rgb = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let loss = |tf: &TextureField, p: &Vec3| -> f64 {
                let c = texture_color(p, tf, &wg, &wt).unwrap();
                (0..3).map(|k| c[k] * d_rgb[k]).sum()
            };
            let m = tf.condition(&wg, &wt).unwrap();
            let mut grad = tf.zeros_like();
            let mut dmod = tf.decoder.zero_mod_buffers();
            let dp = tf.color_backward(&m, &p, &d_rgb, &mut dmod, &mut grad);
            let w: Vec<f64> = wg.iter().chain(&wt).copied().collect();
            tf.decoder.modulate_backward(&w, &m, &dmod, &mut grad.decoder);
            for k in 0..3 {
                let (mut pp, mut pm) = (p, p);
                pp[k] += h;
                pm[k] -= h;
                let fd = (loss(&tf, &pp) - loss(&tf, &pm)) / (2.0 * h);
                assert!(rel_err(dp[k], fd) < 1e-4 || (dp[k] - fd).abs() < 1e-9);
            }
            let analytic = grad.flatten();
            let mut tp = tf.clone();
            let base = tp.flatten();
            for _ in 0..40 {
                let idx = r.random_range(0..base.len());
                let mut q = base.clone();
                q[idx] += h;
                tp.unflatten(&q);
                let fp = loss(&tp, &p);
                q[idx] -= 2.0 * h;
                tp.unflatten(&q);
                let fm = loss(&tp, &p);
                let fd = (fp - fm) / (2.0 * h);
                assert!(rel_err(analytic[idx], fd) < 1e-4 || (analytic[idx] - fd).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mapping_network_cases() {
        let zero = MappingNetwork {
            layers: vec![FcLayer::zeros(3, 3)],
        };
        assert_eq!(zero.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        let id = MappingNetwork {
            layers: vec![FcLayer::identity(3)],
        };
        assert_eq!(id.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(id.forward(&[1.0]).is_err());

        let mut r = rng(12);
        let net = MappingNetwork::random(&[4, 5, 3], &mut r);
        let z: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut x = z.clone();
        for l in &net.layers {
            let mut y = vec![0.0; l.out_dim];
            for j in 0..l.out_dim {
                let mut acc = l.bias[j];
                for i in 0..l.in_dim {
                    acc += l.weight[j * l.in_dim + i] * x[i];
                }
                y[j] = if acc >= 0.0 { acc } else { 0.2 * acc };
            }
            x = y;
        }
        assert_eq!(net.forward(&z).unwrap(), x);

        // gradient check
        let dy = [0.3, -0.7, 1.1];
        let f = |n: &MappingNetwork, z: &[f64]| -> f64 { n.forward(z).unwrap().iter().zip(&dy).map(|(a, b)| a * b).sum() };
        let (_, pres) = net.forward_traced(&z).unwrap();
        let mut g = net.zeros_like();
        let dz = net.backward(&z, &pres, &dy, &mut g);
        let h = 1e-6;
        for i in 0..4 {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[i] += h;
            zm[i] -= h;
            let fd = (f(&net, &zp) - f(&net, &zm)) / (2.0 * h);
            assert!(rel_err(dz[i], fd) < 1e-5 || (dz[i] - fd).abs() < 1e-9);
        }
        let analytic = g.flatten();
        let mut np = net.clone();
        let base = np.flatten();
        for idx in 0..base.len() {
            let mut q = base.clone();
            q[idx] += h;
            np.unflatten(&q);
            let fp = f(&np, &z);
            q[idx] -= 2.0 * h;
            np.unflatten(&q);
            let fm = f(&np, &z);
            let fd = (fp - fm) / (2.0 * h);
            assert!(rel_err(analytic[idx], fd) < 1e-5 || (analytic[idx] - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn toy_geometry_field_bounds_and_zero_net() {
        let mut r = rng(13);
        let g = TetGrid::regular(4).unwrap();
        let net = GeometryNet::random(5, &mut r);
        for _ in 0..5 {
            let w: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
            let f = toy_geometry_field(&g, &w, &net).unwrap();
            f.validate(&g).unwrap();
        }
        let zero = net.zeros_like();
        let f = toy_geometry_field(&g, &[0.0; 5], &zero).unwrap();
        assert!(f.sdf.iter().all(|&s| s == 0.0));
        assert!(f.deform.iter().all(|d| *d == Vec3::zeros()));
        assert!(toy_geometry_field(&g, &[0.0; 4], &net).is_err());
    }

    #[test]
    fn mesh_vertex_gradient_through_generator_matches_fd() {
        // loss = sum_k u_k . m_k over the extracted mesh, differentiated w.r.t. w
        let g = TetGrid::regular(3).unwrap();
        let mut r = rng(14);
        let mut checked = 0;
        for _ in 0..20 {
            let net = GeometryNet::random(4, &mut r);
            let w: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let (field, trace) = net.eval(&g, &w).unwrap();
            let mesh = marching_tetrahedra(&g, &field).unwrap();
            if mesh.is_empty() {
                continue;
            }
            let up: Vec<Vec3> = (0..mesh.vertices.len())
                .map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
                .collect();
            let mg = marching_tetrahedra_backward(&g, &field, &mesh, &up).unwrap();
            let mut grad = net.zeros_like();
            let dw = net.backward(&g, &w, &trace, &mg.d_sdf, &mg.d_deform, &mut grad);
            let loss = |w: &[f64]| -> Option<f64> {
                let f = toy_geometry_field(&g, w, &net).unwrap();
                let m = marching_tetrahedra(&g, &f).unwrap();
                (m.vertex_origin == mesh.vertex_origin && m.faces == mesh.faces)
                    .then(|| m.vertices.iter().zip(&up).map(|(a, b)| a.dot(b)).sum())
            };
            let h = 1e-6;
            for k in 0..4 {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[k] += h;
                wm[k] -= h;
                if let (Some(fp), Some(fm)) = (loss(&wp), loss(&wm)) {
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(rel_err(dw[k], fd) < 1e-4 || (dw[k] - fd).abs() < 1e-8, "dw {} vs {}", dw[k], fd);
                    checked += 1;
                }
            }
        }
        assert!(checked >= 20);
    }
}
