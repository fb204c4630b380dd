//! Newton-Raphson maximisation with step halving and box bounds.
//!
//! The Hessian is either supplied by the objective or built by central
//! differences of the gradient. When it is not negative definite the
//! eigenvalues are reflected and floored so the step is still an ascent
//! direction. Coordinates sitting on a bound with the gradient pointing
//! outwards are frozen for the iteration.
//!
//! Iteration stops when the largest free gradient component is below
//! `grad_tol` and the last relative change is below `rel_tol`. Large
//! objectives can have a gradient rounding floor above `grad_tol`; three
//! accepted steps without a measurable gain, with the gradient below
//! `sqrt(grad_tol)`, also count as convergence.

use nalgebra::{DMatrix, DVector};

pub trait Objective {
    fn dim(&self) -> usize;

    /// Objective value; `-inf` or NaN marks an infeasible point.
    fn value(&self, x: &[f64]) -> f64;

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>);

    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub hessian_step: f64,
    pub max_halvings: usize,
    /// Largest change of any coordinate in a single step.
    pub max_step: f64,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            max_iter: 200,
            hessian_step: 1e-4,
            max_halvings: 40,
            max_step: 5.0,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max |gradient| over coordinates not held at a bound.
    pub max_gradient: f64,
    /// Objective values after each accepted step, starting value first.
    pub trace: Vec<f64>,
}

/// Central-difference Hessian of the gradient, symmetrised.
pub fn fd_hessian<O: Objective + ?Sized>(obj: &O, x: &[f64], step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + step;
        let (_, gp) = obj.value_and_gradient(&xp);
        xp[j] = x[j] - step;
        let (_, gm) = obj.value_and_gradient(&xp);
        xp[j] = x[j];
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Central-difference gradient of `value`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            xp[j] = x[j] + step;
            let fp = f(&xp);
            xp[j] = x[j] - step;
            let fm = f(&xp);
            xp[j] = x[j];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

fn clamp(x: &mut [f64], opts: &NewtonOptions) {
    if let Some(lo) = &opts.lower {
        for (v, l) in x.iter_mut().zip(lo) {
            *v = v.max(*l);
        }
    }
    if let Some(hi) = &opts.upper {
        for (v, h) in x.iter_mut().zip(hi) {
            *v = v.min(*h);
        }
    }
}

fn frozen(x: &[f64], g: &[f64], opts: &NewtonOptions) -> Vec<bool> {
    (0..x.len())
        .map(|i| {
            let at_lo = opts.lower.as_ref().is_some_and(|lo| x[i] <= lo[i] && g[i] < 0.0);
            let at_hi = opts.upper.as_ref().is_some_and(|hi| x[i] >= hi[i] && g[i] > 0.0);
            at_lo || at_hi
        })
        .collect()
}

/// Ascent direction `(-H)^{-1} g` on the free coordinates with eigenvalue
/// repair of `-H`.
fn newton_direction(h: &DMatrix<f64>, g: &[f64], free: &[usize]) -> Vec<f64> {
    let m = free.len();
    let mut neg_h = DMatrix::zeros(m, m);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            neg_h[(a, b)] = -h[(i, j)];
        }
    }
    let eig = neg_h.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-10).max(1e-12);
    let gv = DVector::from_iterator(m, free.iter().map(|&i| g[i]));
    let proj = eig.eigenvectors.transpose() * gv;
    let scaled = DVector::from_iterator(
        m,
        proj.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(p, l)| p / l.abs().max(floor)),
    );
    let d = eig.eigenvectors * scaled;
    let mut out = vec![0.0; h.nrows()];
    for (a, &i) in free.iter().enumerate() {
        out[i] = d[a];
    }
    out
}

pub fn maximize<O: Objective + ?Sized>(obj: &O, x0: &[f64], opts: &NewtonOptions) -> NewtonResult {
    let mut x = x0.to_vec();
    clamp(&mut x, opts);
    let (mut f, mut g) = obj.value_and_gradient(&x);
    let mut trace = vec![f];
    let mut last_rel_change = f64::INFINITY;
    let mut iterations = 0;

    let max_free_grad = |x: &[f64], g: &[f64]| -> f64 {
        let fz = frozen(x, g, opts);
        g.iter()
            .zip(fz)
            .filter(|(_, z)| !z)
            .fold(0.0f64, |m, (v, _)| m.max(v.abs()))
    };

    if !f.is_finite() {
        return NewtonResult {
            max_gradient: f64::INFINITY,
            x,
            value: f,
            gradient: g,
            iterations,
            converged: false,
            trace,
        };
    }

    let mut converged = false;
    let mut stalled = 0;
    while iterations < opts.max_iter {
        let gmax = max_free_grad(&x, &g);
        if gmax < opts.grad_tol && last_rel_change < opts.rel_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let fz = frozen(&x, &g, opts);
        let free: Vec<usize> = (0..x.len()).filter(|&i| !fz[i]).collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let h = obj
            .hessian(&x)
            .unwrap_or_else(|| fd_hessian(obj, &x, opts.hessian_step));
        let mut d = newton_direction(&h, &g, &free);
        let longest = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if longest > opts.max_step {
            let s = opts.max_step / longest;
            d.iter_mut().for_each(|v| *v *= s);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            clamp(&mut xt, opts);
            let ft = obj.value(&xt);
            if ft.is_finite() && ft >= f {
                accepted = Some((xt, ft));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((xt, _)) => {
                let (fnew, gnew) = obj.value_and_gradient(&xt);
                last_rel_change = (fnew - f).abs() / f.abs().max(1.0);
                stalled = if fnew - f <= 4.0 * f64::EPSILON * f.abs() { stalled + 1 } else { 0 };
                x = xt;
                f = fnew;
                g = gnew;
                trace.push(f);
                if stalled >= 3 && max_free_grad(&x, &g) < opts.grad_tol.sqrt() {
                    converged = true;
                    break;
                }
            }
            None => {
                // no ascent possible at working precision
                converged = max_free_grad(&x, &g) < opts.grad_tol.sqrt();
                break;
            }
        }
    }
    if !converged && iterations >= opts.max_iter {
        converged = max_free_grad(&x, &g) < opts.grad_tol && last_rel_change < opts.rel_tol;
    }
    NewtonResult {
        max_gradient: max_free_grad(&x, &g),
        x,
        value: f,
        gradient: g,
        iterations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosen;
    impl Objective for Rosen {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> f64 {
            -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        }
        fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
            let g0 = 2.0 * (1.0 - x[0]) + 400.0 * x[0] * (x[1] - x[0] * x[0]);
            let g1 = -200.0 * (x[1] - x[0] * x[0]);
            (self.value(x), vec![g0, g1])
        }
    }

    #[test]
    fn maximizes_rosenbrock_monotonically() {
        let r = maximize(&Rosen, &[-1.2, 1.0], &NewtonOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    struct Quad;
    impl Objective for Quad {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> f64 {
            -(x[0] + 3.0).powi(2) - (x[1] - 1.0).powi(2)
        }
        fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
            (self.value(x), vec![-2.0 * (x[0] + 3.0), -2.0 * (x[1] - 1.0)])
        }
    }

    #[test]
    fn respects_bounds() {
        let opts = NewtonOptions {
            lower: Some(vec![-1.0, -10.0]),
            upper: Some(vec![10.0, 10.0]),
            ..Default::default()
        };
        let r = maximize(&Quad, &[2.0, 5.0], &opts);
        assert!(r.converged);
        assert_eq!(r.x[0], -1.0);
        assert!((r.x[1] - 1.0).abs() < 1e-8);
    }

    /// Large quadratic whose gradient never drops below a rounding-like
    /// floor.
    struct Floor;
    impl Objective for Floor {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> f64 {
            -5000.0 - 1e4 * x[0] * x[0]
        }
        fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
            (self.value(x), vec![-2e4 * x[0] - 3e-5f64.copysign(x[0])])
        }
    }

    #[test]
    fn gradient_floor_stops_on_stall() {
        let r = maximize(&Floor, &[1.0], &NewtonOptions::default());
        assert!(r.converged);
        assert!(r.iterations < 10);
        assert!(r.max_gradient > 1e-6);
    }
}
