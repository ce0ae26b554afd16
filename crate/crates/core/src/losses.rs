//! Training objectives.
//!
//! Sign conventions: `g(u) = -log(1 + e^-u)`. [`discriminator_loss`] returns the
//! literal adversarial expression `E[g(fake)] + E[g(-real)] + λ E[|∇D|²]`, which
//! is unbounded below in the logits. The quantity the discriminator actually
//! descends during training is [`discriminator_objective`],
//! `E[softplus(fake)] + E[softplus(-real)] + λ E[|∇D|²] = -E[g(-fake)] - E[g(real)] + ...`,
//! which pushes real logits up and fake logits down. The generator descends
//! [`generator_loss`] `= E[-g(fake)]`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::math::{sigmoid, softplus};
use crate::tetgrid::{is_inside, GeometryField};

/// Default weight of the SDF regularizer.
pub const DEFAULT_REG_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub r1_weight: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            r1_weight: 10.0,
            reg_weight: DEFAULT_REG_WEIGHT,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.r1_weight >= 0.0 && self.r1_weight.is_finite(), "r1_weight must be a nonnegative number");
        ensure!(self.reg_weight >= 0.0 && self.reg_weight.is_finite(), "reg_weight must be a nonnegative number");
        Ok(())
    }
}

/// `g(u) = -log(1 + exp(-u))`.
#[inline]
pub fn g(u: f64) -> f64 {
    if u < -30.0 {
        u
    } else if u > 30.0 {
        -(-u).exp()
    } else {
        -softplus(-u)
    }
}

/// `g'(u) = sigmoid(-u)`.
#[inline]
pub fn g_grad(u: f64) -> f64 {
    sigmoid(-u)
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// `mean g(fake) + mean g(-real) + λ mean |∇D(real)|²`.
pub fn discriminator_loss(real_logits: &[f64], fake_logits: &[f64], r1_grad_sq_norms: &[f64], lambda: f64) -> Result<f64> {
    ensure!(!real_logits.is_empty() && !fake_logits.is_empty(), "discriminator_loss needs nonempty batches");
    let pen = if r1_grad_sq_norms.is_empty() { 0.0 } else { mean(r1_grad_sq_norms.iter().copied()) };
    Ok(mean(fake_logits.iter().map(|&f| g(f))) + mean(real_logits.iter().map(|&r| g(-r))) + lambda * pen)
}

/// The bounded logistic loss the discriminator minimizes:
/// `mean softplus(fake) + mean softplus(-real) + λ mean |∇D(real)|²`.
pub fn discriminator_objective(real_logits: &[f64], fake_logits: &[f64], r1_grad_sq_norms: &[f64], lambda: f64) -> Result<f64> {
    ensure!(!real_logits.is_empty() && !fake_logits.is_empty(), "discriminator_objective needs nonempty batches");
    let pen = if r1_grad_sq_norms.is_empty() { 0.0 } else { mean(r1_grad_sq_norms.iter().copied()) };
    Ok(mean(fake_logits.iter().map(|&f| softplus(f))) + mean(real_logits.iter().map(|&r| softplus(-r))) + lambda * pen)
}

/// Per-logit derivatives of [`discriminator_objective`] (without the penalty):
/// `(d/d real_i, d/d fake_i)`.
pub fn discriminator_objective_grad(real_logits: &[f64], fake_logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nr = real_logits.len() as f64;
    let nf = fake_logits.len() as f64;
    (
        real_logits.iter().map(|&r| -sigmoid(-r) / nr).collect(),
        fake_logits.iter().map(|&f| sigmoid(f) / nf).collect(),
    )
}

/// Non-saturating generator loss `mean(-g(fake))`.
pub fn generator_loss(fake_logits: &[f64]) -> Result<f64> {
    ensure!(!fake_logits.is_empty(), "generator_loss needs a nonempty batch");
    Ok(mean(fake_logits.iter().map(|&f| -g(f))))
}

/// Per-logit derivative of [`generator_loss`].
pub fn generator_loss_grad(fake_logits: &[f64]) -> Vec<f64> {
    let n = fake_logits.len() as f64;
    fake_logits.iter().map(|&f| -g_grad(f) / n).collect()
}

/// Mean over the batch of squared L2 norms of per-sample input gradients.
pub fn r1_penalty(grad_images: &[Vec<f64>]) -> f64 {
    if grad_images.is_empty() {
        return 0.0;
    }
    mean(grad_images.iter().map(|gi| gi.iter().map(|x| x * x).sum::<f64>()))
}

/// Binary cross-entropy of `sigmoid(x)` against `target`, in logit form.
#[inline]
fn bce_logit(x: f64, target: f64) -> f64 {
    softplus(x) - target * x
}

#[inline]
fn sign_target(s: f64) -> f64 {
    if is_inside(s) {
        0.0
    } else {
        1.0
    }
}

/// Cross-entropy regularizer over sign-flip edges, and its gradient w.r.t. each SDF value.
pub fn sdf_regularizer_with_grad(sdf: &[f64], edges: &[[u32; 2]]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; sdf.len()];
    let mut total = 0.0;
    for &[a, b] in edges {
        let (a, b) = (a as usize, b as usize);
        ensure!(a < sdf.len() && b < sdf.len(), "edge ({a}, {b}) out of range for {} values", sdf.len());
        let (si, sj) = (sdf[a], sdf[b]);
        if is_inside(si) == is_inside(sj) {
            continue;
        }
        let (ti, tj) = (sign_target(sj), sign_target(si));
        total += bce_logit(si, ti) + bce_logit(sj, tj);
        grad[a] += sigmoid(si) - ti;
        grad[b] += sigmoid(sj) - tj;
    }
    Ok((total, grad))
}

/// `Σ_{sign-flip edges} H(σ(s_i), t(s_j)) + H(σ(s_j), t(s_i))` with `t(s) = (sign(s)+1)/2`.
pub fn sdf_regularizer(field: &GeometryField, edges: &[[u32; 2]]) -> Result<f64> {
    Ok(sdf_regularizer_with_grad(&field.sdf, edges)?.0)
}

/// Number of edges whose endpoints lie on opposite sides of the surface.
pub fn sign_flip_count(sdf: &[f64], edges: &[[u32; 2]]) -> usize {
    edges.iter().filter(|&&[a, b]| is_inside(sdf[a as usize]) != is_inside(sdf[b as usize])).count()
}

/// `L_rgb + L_mask + μ L_reg`.
pub fn total_loss(l_rgb: f64, l_mask: f64, l_reg: f64, mu: f64) -> f64 {
    l_rgb + l_mask + mu * l_reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tetgrid::{unique_edges, TetGrid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn g_values() {
        assert!((g(0.0) + std::f64::consts::LN_2).abs() < 1e-12);
        // -ln(1 + e^-2) computed with extended care
        assert!((g(2.0) + 0.126_928_011_042_972_6).abs() < 1e-12);
        let expect = -50.0 - (-50f64).exp().ln_1p();
        assert!((g(-50.0) - expect).abs() < 1e-12);
        assert!(g(1e8).is_finite() && g(-1e8) == -1e8);
        assert!(g(1e8) < 0.0 || g(1e8) == -0.0);
    }

    #[test]
    fn discriminator_loss_examples() {
        let z = [0.0; 4];
        assert!((discriminator_loss(&z, &z, &[], 0.0).unwrap() + 1.386_294_361_119_890_6).abs() < 1e-12);
        let v = discriminator_loss(&z, &z, &[25.0, 25.0], 10.0).unwrap();
        assert!((v - (250.0 - 1.386_294_361_119_890_6)).abs() < 1e-9);
        assert!(discriminator_loss(&[], &z, &[], 0.0).is_err());
        assert!(discriminator_loss(&z, &[], &[], 0.0).is_err());
    }

    #[test]
    fn discriminator_loss_loop_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = r.random_range(1..10);
            let real: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
            let fake: Vec<f64> = (0..n + 1).map(|_| r.random_range(-5.0..5.0)).collect();
            let gs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..3.0)).collect();
            let lam = r.random_range(0.0..5.0);
            let naive = |u: f64| -(1.0 + (-u).exp()).ln();
            let mut acc_f = 0.0;
            for f in &fake {
                acc_f += naive(*f);
            }
            let mut acc_r = 0.0;
            for x in &real {
                acc_r += naive(-*x);
            }
            let mut acc_g = 0.0;
            for x in &gs {
                acc_g += x;
            }
            let expect = acc_f / fake.len() as f64 + acc_r / n as f64 + lam * acc_g / n as f64;
            assert!((discriminator_loss(&real, &fake, &gs, lam).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_descent_direction() {
        // Raising real logits and lowering fake logits lowers the objective.
        let real = [0.3, -0.2];
        let fake = [0.1, 0.5];
        let base = discriminator_objective(&real, &fake, &[], 0.0).unwrap();
        let (dr, df) = discriminator_objective_grad(&real, &fake);
        assert!(dr.iter().all(|&d| d < 0.0) && df.iter().all(|&d| d > 0.0));
        let step = 0.1;
        let real2: Vec<f64> = real.iter().zip(&dr).map(|(x, d)| x - step * d).collect();
        let fake2: Vec<f64> = fake.iter().zip(&df).map(|(x, d)| x - step * d).collect();
        assert!(discriminator_objective(&real2, &fake2, &[], 0.0).unwrap() < base);
        // at zero logits the two forms differ only in sign
        let z = [0.0];
        let lit = discriminator_loss(&z, &z, &[], 0.0).unwrap();
        let obj = discriminator_objective(&z, &z, &[], 0.0).unwrap();
        assert!((lit + obj).abs() < 1e-15);
    }

    #[test]
    fn generator_loss_examples() {
        assert!((generator_loss(&[0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(generator_loss(&[1e4]).unwrap() < 1e-300);
        assert!(generator_loss(&[]).is_err());
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let fake: Vec<f64> = (0..7).map(|_| r.random_range(-8.0..8.0)).collect();
        let expect = fake.iter().map(|f| (1.0 + (-f).exp()).ln()).sum::<f64>() / 7.0;
        assert!((generator_loss(&fake).unwrap() - expect).abs() < 1e-12);
        let gr = generator_loss_grad(&fake);
        let h = 1e-6;
        for i in 0..7 {
            let mut p = fake.clone();
            p[i] += h;
            let mut m = fake.clone();
            m[i] -= h;
            let fd = (generator_loss(&p).unwrap() - generator_loss(&m).unwrap()) / (2.0 * h);
            assert!((gr[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn r1_examples() {
        assert_eq!(r1_penalty(&[vec![3.0, 4.0]]), 25.0);
        assert_eq!(r1_penalty(&[vec![0.0; 5]]), 0.0);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let gs: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let mut acc = 0.0;
        for gi in &gs {
            for x in gi {
                acc += x * x;
            }
        }
        assert!((r1_penalty(&gs) - acc / 4.0).abs() < 1e-12);
    }

    #[test]
    fn reg_single_edge() {
        let (v, gr) = sdf_regularizer_with_grad(&[0.5, -0.5], &[[0, 1]]).unwrap();
        let oracle = 2.0 * -(1.0 / (1.0 + 0.5f64.exp())).ln();
        assert!((v - 1.948_154).abs() < 1e-6);
        assert!((v - oracle).abs() < 1e-12);
        assert!(gr[0] > 0.0 && gr[1] < 0.0);
        assert_eq!(sdf_regularizer_with_grad(&[0.5, 0.2], &[[0, 1]]).unwrap().0, 0.0);
        assert!(sdf_regularizer_with_grad(&[0.5], &[[0, 1]]).is_err());
    }

    #[test]
    fn reg_gradient_fd() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let sdf: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
            let edges: Vec<[u32; 2]> = (0..20)
                .map(|_| {
                    let a = r.random_range(0..12u32);
                    let mut b = r.random_range(0..12u32);
                    while b == a {
                        b = r.random_range(0..12u32);
                    }
                    [a, b]
                })
                .collect();
            let (_, gr) = sdf_regularizer_with_grad(&sdf, &edges).unwrap();
            let h = 1e-5;
            for i in 0..12 {
                let mut p = sdf.clone();
                p[i] += h;
                let mut m = sdf.clone();
                m[i] -= h;
                if is_inside(p[i]) != is_inside(m[i]) {
                    continue;
                }
                let fd = (sdf_regularizer_with_grad(&p, &edges).unwrap().0 - sdf_regularizer_with_grad(&m, &edges).unwrap().0) / (2.0 * h);
                let rel = (gr[i] - fd).abs() / gr[i].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5 || (gr[i] - fd).abs() < 1e-10, "{} vs {}", gr[i], fd);
            }
        }
    }

    #[test]
    fn reg_descent_removes_floaters() {
        // noisy sphere SDF: sign islands near the surface get absorbed
        let grid = TetGrid::regular(6).unwrap();
        let edges = unique_edges(&grid.tets);
        for seed in 0..3 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut sdf: Vec<f64> = grid.vertices.iter().map(|v| v.norm() - 0.6 + r.random_range(-0.2..0.2)).collect();
            let start = sign_flip_count(&sdf, &edges);
            for _ in 0..50 {
                let (_, gr) = sdf_regularizer_with_grad(&sdf, &edges).unwrap();
                sdf.iter_mut().zip(&gr).for_each(|(s, d)| *s -= 0.1 * d);
            }
            let end = sign_flip_count(&sdf, &edges);
            assert!(end < start, "{start} -> {end}");
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.0), 3.0);
        assert!((total_loss(1.0, 2.0, 3.0, 0.01) - 3.03).abs() < 1e-12);
    }

    #[test]
    fn losses_finite_for_large_logits() {
        for u in [-1e4, -100.0, -1.0, 0.0, 1.0, 100.0, 1e4] {
            assert!(g(u).is_finite());
            assert!(generator_loss(&[u]).unwrap().is_finite());
            assert!(discriminator_loss(&[u], &[-u], &[1.0], 1.0).unwrap().is_finite());
            assert!(discriminator_objective(&[u], &[-u], &[1.0], 1.0).unwrap().is_finite());
        }
    }

    proptest! {
        #[test]
        fn g_softplus_identity(u in -200.0f64..200.0) {
            prop_assert!((g(u) - u - g(-u)).abs() < 1e-12 * (1.0 + u.abs()));
        }

        #[test]
        fn g_monotone_concave(u in -50.0f64..50.0, d in 1e-3f64..1.0) {
            prop_assert!(g(u + d) > g(u));
            prop_assert!(g(u) >= 0.5 * (g(u - d) + g(u + d)) - 1e-12);
        }

        #[test]
        fn reg_ignores_non_flip_edges(vals in proptest::collection::vec(-1.0f64..1.0, 6..12), extra in 0usize..5) {
            let n = vals.len() as u32;
            let mut edges: Vec<[u32; 2]> = (0..n - 1).map(|i| [i, i + 1]).collect();
            let base = sdf_regularizer_with_grad(&vals, &edges).unwrap().0;
            for i in 0..n {
                for j in i + 1..n {
                    if edges.len() >= (n as usize - 1) + extra { break; }
                    if is_inside(vals[i as usize]) == is_inside(vals[j as usize]) && j != i + 1 {
                        edges.push([i, j]);
                    }
                }
            }
            prop_assert_eq!(sdf_regularizer_with_grad(&vals, &edges).unwrap().0, base);
        }
    }
}
