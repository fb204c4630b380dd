//! Gauss-Hermite quadrature for the weight function `exp(-x^2)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Approximate `∫ f(x) exp(-x²) dx`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// Approximate `E[f(Z)]` for `Z ~ N(0, 1)`.
    pub fn expect_standard_normal<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let s = std::f64::consts::SQRT_2;
        self.integrate(|x| f(s * x)) / PI.sqrt()
    }
}

/// Nodes and weights of the `order`-point rule, exact for polynomials of
/// degree `2 * order - 1`.
///
/// Initial nodes are the eigenvalues of the Jacobi matrix; each is then
/// polished by Newton iteration on the orthonormal Hermite recurrence and
/// the weight taken from the derivative there, which keeps tail weights
/// accurate in relative terms. The positive half is mirrored.
pub fn gauss_hermite(order: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::InvalidArgument(format!(
            "quadrature order must be in 1..={MAX_ORDER}, got {order}"
        )));
    }
    let n = order;
    let pim4 = PI.powf(-0.25);
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    guesses.sort_by(|a, b| b.total_cmp(a));

    let half = n.div_ceil(2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for (i, &z0) in guesses.iter().take(half).enumerate() {
        let mut z = if n % 2 == 1 && i == half - 1 { 0.0 } else { z0 };
        for _ in 0..20 {
            let (p, dp) = orthonormal_hermite(n, z, pim4);
            let z1 = z - p / dp;
            let done = (z1 - z).abs() <= 1e-15 * z.abs().max(1.0);
            z = z1;
            if done {
                break;
            }
        }
        let (_, dp) = orthonormal_hermite(n, z, pim4);
        let w = 2.0 / (dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Value of the orthonormal Hermite polynomial of degree `n` at `z` and its
/// derivative.
fn orthonormal_hermite(n: usize, z: f64, pim4: f64) -> (f64, f64) {
    let mut p1 = pim4;
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    let pp = (2.0 * n as f64).sqrt() * p2;
    (p1, pp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::ln_gamma;

    /// ∫ x^k exp(-x²) dx = Γ((k+1)/2) for even k, 0 for odd k.
    fn moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            ln_gamma((k as f64 + 1.0) / 2.0).exp()
        }
    }

    #[test]
    fn order_one() {
        let r = gauss_hermite(1).unwrap();
        assert_eq!(r.nodes(), &[0.0]);
        assert!((r.weights()[0] - PI.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn order_two_matches_moment_matching() {
        // Moment matching: symmetric nodes ±a with weights w solve
        // 2w = √π and 2 w a² = √π/2, so a = 1/√2 and w = √π/2.
        let r = gauss_hermite(2).unwrap();
        let a = 0.5f64.sqrt();
        assert!((r.nodes()[0] + a).abs() < 1e-14);
        assert!((r.nodes()[1] - a).abs() < 1e-14);
        for w in r.weights() {
            assert!((w - PI.sqrt() / 2.0).abs() < 1e-14);
        }
        assert!((r.nodes()[1] - 0.7071067812).abs() < 1e-10);
        assert!((r.weights()[0] - 0.8862269255).abs() < 1e-10);
    }

    #[test]
    fn order_seventy_tenth_moment() {
        let r = gauss_hermite(70).unwrap();
        let q = r.integrate(|x| x.powi(10));
        assert!(((q - moment(10)) / moment(10)).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_and_symmetry() {
        for n in [1, 2, 3, 7, 20, 30, 70, 100, 150, 200] {
            let r = gauss_hermite(n).unwrap();
            let s: f64 = r.weights().iter().sum();
            assert!((s - PI.sqrt()).abs() < 1e-12, "n={n} sum={s}");
            for i in 0..n {
                assert_eq!(r.nodes()[i], -r.nodes()[n - 1 - i]);
                assert!(r.weights()[i] > 0.0);
            }
            assert!(r.nodes().windows(2).all(|w| w[0] < w[1]), "n={n} nodes not sorted");
        }
    }

    #[test]
    fn order_bounds() {
        assert!(gauss_hermite(0).is_err());
        assert!(gauss_hermite(201).is_err());
    }

    #[test]
    fn polynomial_exactness_up_to_forty() {
        for n in 1..=40usize {
            let r = gauss_hermite(n).unwrap();
            for k in 0..(2 * n as u32) {
                let q = r.integrate(|x| x.powi(k as i32));
                let m = moment(k);
                if k % 2 == 1 {
                    assert!(q.abs() < 1e-12 * moment(k - 1).max(1.0), "n={n} k={k} q={q}");
                } else {
                    assert!(((q - m) / m).abs() < 1e-10, "n={n} k={k}");
                }
            }
        }
    }
}
