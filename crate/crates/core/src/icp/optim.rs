use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// Adaptive-moment step rule with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0,
        }
    }

    /// Returns the update to add to the parameters.
    pub fn step(&mut self, grad: &DVector<f64>, alpha: f64) -> DVector<f64> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.m = &self.m * b1 + grad * (1.0 - b1);
        self.v = &self.v * b2 + grad.component_mul(grad) * (1.0 - b2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        DVector::from_iterator(
            grad.len(),
            self.m
                .iter()
                .zip(self.v.iter())
                .map(|(m, v)| -alpha * (m / c1) / ((v / c2).sqrt() + self.eps)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the cost decreases by less than `ftol * |f|` in one step.
    pub ftol: f64,
    /// Stop when `||g||_inf <= gtol`.
    pub gtol: f64,
    /// Armijo constant of the backtracking line search.
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 200,
            ftol: 1e-12,
            gtol: 1e-10,
            c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub history: Vec<f64>,
}

/// Limited-memory BFGS with a backtracking Armijo line search. Only steps
/// that decrease the cost are accepted, so the cost never increases.
pub fn lbfgs<F>(mut fg: F, x0: DVector<f64>, cfg: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut x = x0;
    let (mut f, mut g) = fg(&x)?;
    let mut history = vec![f];
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        if g.amax() <= cfg.gtol {
            converged = true;
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            q *= s.dot(y) / y.dot(y);
        } else {
            q *= 1.0 / g.norm().max(1e-300);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            pairs.clear();
            dir = -&g / g.norm();
            slope = g.dot(&dir);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let xn = &x + &dir * t;
            match fg(&xn) {
                Ok((fnew, gnew)) if fnew.is_finite() && fnew <= f + cfg.c1 * t * slope => {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
                _ => t *= 0.5,
            }
        }
        iterations += 1;
        let Some((xn, fnew, gnew)) = accepted else {
            // no decrease representable along the descent direction
            converged = true;
            break;
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - fnew;
        x = xn;
        f = fnew;
        g = gnew;
        history.push(f);
        if decrease <= cfg.ftol * f.abs() {
            converged = true;
            break;
        }
    }
    Ok(LbfgsOutcome {
        x,
        cost: f,
        iterations,
        converged,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iter: usize,
    /// Stop when an accepted step lowers the cost by less than `ftol * |f|`.
    pub ftol: f64,
    pub gtol: f64,
    pub lambda0: f64,
    /// Give up once the damping exceeds this value.
    pub lambda_max: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ftol: 1e-12,
            gtol: 1e-10,
            lambda0: 1e-3,
            lambda_max: 1e12,
        }
    }
}

/// Damped Newton iteration on a positive semidefinite curvature model.
/// `fgh` returns cost, gradient and curvature; `f` only the cost. The step
/// solves `(H + lambda diag(H)) d = -g`, and only cost decreases are accepted.
pub fn levenberg_marquardt<F, G>(mut fgh: F, mut f: G, x0: DVector<f64>, cfg: &LmConfig) -> Result<LbfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>,
    G: FnMut(&DVector<f64>) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g, mut h) = fgh(&x)?;
    let mut history = vec![fx];
    let mut lambda = cfg.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        if g.amax() <= cfg.gtol {
            converged = true;
            break;
        }
        iterations += 1;
        let diag_floor = 1e-12 * h.diagonal().amax().max(1e-300);
        let mut accepted = None;
        while lambda <= cfg.lambda_max {
            let mut a = h.clone();
            for i in 0..n {
                a[(i, i)] += lambda * h[(i, i)].max(diag_floor);
            }
            let step = a.cholesky().map(|c| c.solve(&(-&g)));
            if let Some(d) = step.filter(|d| d.iter().all(|v| v.is_finite())) {
                let xn = &x + &d;
                if let Ok(fnew) = f(&xn) {
                    if fnew.is_finite() && fnew < fx {
                        accepted = Some((xn, fnew));
                        break;
                    }
                }
            }
            lambda *= 4.0;
        }
        let Some((xn, fnew)) = accepted else {
            converged = true;
            break;
        };
        lambda = (lambda / 3.0).max(1e-12);
        let decrease = fx - fnew;
        x = xn;
        (fx, g, h) = fgh(&x)?;
        history.push(fx);
        if decrease <= cfg.ftol * fx.abs() {
            converged = true;
            break;
        }
    }
    Ok(LbfgsOutcome {
        x,
        cost: fx,
        iterations,
        converged,
        history,
    })
}
