//! Gradient-based first stage: a log-barrier interior method driven by
//! BFGS with finite-difference gradients.

/// Central finite differences with step `rel_step * max(|x_k|, 1)`.
///
/// Falls back to a one-sided difference when one probe is non-finite.
pub fn central_difference<F>(f: &mut F, x: &[f64], fx: f64, rel_step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let h = rel_step * x[k].abs().max(1.0);
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            match (up.is_finite(), down.is_finite()) {
                (true, true) => (up - down) / (2.0 * h),
                (true, false) => (up - fx) / h,
                (false, true) => (fx - down) / h,
                (false, false) => 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BarrierOptions {
    /// Relative change in the barrier objective that ends an inner solve.
    pub ftol: f64,
    pub gradient_step: f64,
    pub initial_weight: f64,
    pub final_weight: f64,
    pub weight_factor: f64,
    pub max_iterations: usize,
    /// Longest step, in parameter units, taken by one line search.
    pub max_step: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            ftol: 1e-10,
            gradient_step: 1e-6,
            initial_weight: 1e-2,
            final_weight: 1e-10,
            weight_factor: 1e-2,
            max_iterations: 100,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierResult {
    pub x: Vec<f64>,
    /// Objective (without the barrier term) at `x`.
    pub value: f64,
    pub evals: usize,
}

/// Minimizes `objective` subject to `constraints(x) > 0` starting from a
/// strictly feasible `x0`.
///
/// `constraints` writes the constraint values into its output buffer.
/// Returns `None` if `x0` is not strictly feasible.
pub fn minimize_with_barrier<F, C>(
    mut objective: F,
    mut constraints: C,
    x0: &[f64],
    opts: &BarrierOptions,
) -> Option<BarrierResult>
where
    F: FnMut(&[f64]) -> f64,
    C: FnMut(&[f64], &mut Vec<f64>),
{
    let mut buf = Vec::new();
    let mut evals = 0usize;
    let mut barrier = |x: &[f64], weight: f64| -> (f64, f64) {
        evals += 1;
        constraints(x, &mut buf);
        if buf.iter().any(|c| !(*c > 0.0)) {
            return (f64::INFINITY, f64::INFINITY);
        }
        let f = objective(x);
        if !f.is_finite() {
            return (f64::INFINITY, f64::INFINITY);
        }
        (f - weight * buf.iter().map(|c| c.ln()).sum::<f64>(), f)
    };

    let (phi0, f0) = barrier(x0, opts.initial_weight);
    if !phi0.is_finite() {
        return None;
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f0;
    let mut weight = opts.initial_weight;
    loop {
        let mut phi = barrier(&x, weight).0;
        let mut grad = central_difference(
            &mut |p: &[f64]| barrier(p, weight).0,
            &x,
            phi,
            opts.gradient_step,
        );
        let mut h_inv = identity(n);
        let mut stalled = 0;
        for _ in 0..opts.max_iterations {
            let mut dir: Vec<f64> = mat_vec(&h_inv, &grad).into_iter().map(|v| -v).collect();
            let mut slope = dot(&dir, &grad);
            if !(slope < 0.0) {
                // not a descent direction; restart from steepest descent
                h_inv = identity(n);
                dir = grad.iter().map(|g| -g).collect();
                slope = dot(&dir, &grad);
                if !(slope < 0.0) {
                    break;
                }
            }
            let norm = dir.iter().map(|d| d.abs()).fold(0.0, f64::max);
            let mut t = if norm > opts.max_step {
                opts.max_step / norm
            } else {
                1.0
            };
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                let (phi_t, f_t) = barrier(&trial, weight);
                if phi_t <= phi + 1e-4 * t * slope {
                    accepted = Some((trial, phi_t, f_t));
                    break;
                }
                t *= 0.5;
            }
            let Some((x_new, phi_new, f_new)) = accepted else {
                break;
            };
            let grad_new = central_difference(
                &mut |p: &[f64]| barrier(p, weight).0,
                &x_new,
                phi_new,
                opts.gradient_step,
            );
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
            bfgs_update(&mut h_inv, &s, &y);
            let change = (phi - phi_new).abs();
            x = x_new;
            grad = grad_new;
            fx = f_new;
            let done = change <= opts.ftol * phi_new.abs().max(1.0);
            phi = phi_new;
            if done {
                stalled += 1;
                if stalled >= 2 {
                    break;
                }
            } else {
                stalled = 0;
            }
        }
        if weight <= opts.final_weight {
            break;
        }
        weight *= opts.weight_factor;
    }
    Some(BarrierResult {
        x,
        value: fx,
        evals,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| dot(row, v)).collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64]) {
    let sy = dot(s, y);
    if !(sy > 1e-300) {
        return;
    }
    let n = s.len();
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}
