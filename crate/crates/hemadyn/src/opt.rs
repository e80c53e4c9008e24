//! Optimizers shared by all pipelines: Adam with an exponential decay
//! schedule, and a Nelder-Mead simplex for the derivative-free mechanistic
//! fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponentially decaying learning rate:
/// `lr(epoch) = lr_start * exp(decay * min(floor(epoch / decay_step_length), n_decay_steps))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_start: f64,
    /// Exponent factor applied per completed decay step; non-positive.
    pub decay: f64,
    /// Epochs between adjustments.
    pub decay_step_length: usize,
    /// Cap on the number of adjustments.
    pub n_decay_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { lr_start: 1e-3, decay: -0.3, decay_step_length: 400, n_decay_steps: 5 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_step_length).min(self.n_decay_steps);
        self.lr_start * (self.decay * steps as f64).exp()
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.lr_start *= factor;
        self
    }
}

/// Adam optimizer state (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// One update in place with the scheduled learning rate for `epoch`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], schedule: &LrSchedule, epoch: usize) {
        self.step_lr(params, grad, schedule.lr_at(epoch))
    }

    pub fn step_lr(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    /// Terminate when the simplex diameter falls below this.
    pub diameter_tol: f64,
    pub max_iters: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { diameter_tol: 1e-8, max_iters: 2000, initial_step: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Standard Nelder-Mead simplex (reflection 1, expansion 2, contraction
/// 0.5, shrink 0.5). A non-finite objective value during the search
/// triggers a restart with a shrunken simplex around the best point, up to
/// three times.
pub fn nelder_mead(
    objective: &mut dyn FnMut(&[f64]) -> f64,
    initial: &[f64],
    opts: &NelderMeadOptions,
) -> Result<NelderMeadResult> {
    let f0 = objective(initial);
    if !f0.is_finite() {
        return Err(Error::Optimizer("objective not finite at initial point".into()));
    }
    let mut center = initial.to_vec();
    let mut step = opts.initial_step;
    for restart in 0..=3 {
        match nm_run(objective, &center, step, opts) {
            Ok(res) => return Ok(res),
            Err(best) => {
                if restart == 3 {
                    return Err(Error::Optimizer(
                        "non-finite objective after 3 simplex restarts".into(),
                    ));
                }
                center = best;
                step *= 0.25;
            }
        }
    }
    unreachable!()
}

/// Inner run; Err carries the best point seen when a non-finite value is hit.
fn nm_run(
    objective: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    opts: &NelderMeadOptions,
) -> std::result::Result<NelderMeadResult, Vec<f64>> {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = Vec::with_capacity(n + 1);
    for v in &simplex {
        let f = objective(v);
        if !f.is_finite() {
            return Err(x0.to_vec());
        }
        values.push(f);
    }

    let mut evals_bad = |x: &[f64], best: &[f64]| -> std::result::Result<f64, Vec<f64>> {
        let f = objective(x);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(best.to_vec())
        }
    };

    for iter in 0..opts.max_iters {
        // sort ascending by value
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let sorted: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let sorted_vals: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        simplex = sorted;
        values = sorted_vals;

        let diameter = (1..=n)
            .map(|i| {
                simplex[i]
                    .iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0_f64, f64::max);
        if diameter < opts.diameter_tol {
            return Ok(NelderMeadResult {
                x: simplex[0].clone(),
                value: values[0],
                iterations: iter,
                converged: true,
            });
        }

        // centroid of all but worst
        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst)
            .map(|(c, w)| c + (c - w))
            .collect();
        let f_r = evals_bad(&reflect, &simplex[0])?;

        if f_r < values[0] {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + 2.0 * (c - w))
                .collect();
            let f_e = evals_bad(&expand, &simplex[0])?;
            if f_e < f_r {
                simplex[n] = expand;
                values[n] = f_e;
            } else {
                simplex[n] = reflect;
                values[n] = f_r;
            }
        } else if f_r < values[n - 1] {
            simplex[n] = reflect;
            values[n] = f_r;
        } else {
            // contraction, inside or outside
            let towards = if f_r < values[n] { &reflect } else { &worst };
            let contract: Vec<f64> = centroid
                .iter()
                .zip(towards)
                .map(|(c, w)| c + 0.5 * (w - c))
                .collect();
            let f_c = evals_bad(&contract, &simplex[0])?;
            if f_c < values[n].min(f_r) {
                simplex[n] = contract;
                values[n] = f_c;
            } else {
                // shrink toward best
                for i in 1..=n {
                    let best = simplex[0].clone();
                    for (x, b) in simplex[i].iter_mut().zip(&best) {
                        *x = b + 0.5 * (*x - b);
                    }
                    values[i] = evals_bad(&simplex[i].clone(), &simplex[0])?;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..=n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    Ok(NelderMeadResult {
        x: simplex[order[0]].clone(),
        value: values[order[0]],
        iterations: opts.max_iters,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_formula() {
        let s = LrSchedule { lr_start: 1e-2, decay: -0.5, decay_step_length: 200, n_decay_steps: 5 };
        let lr = s.lr_at(450); // 2 completed steps
        assert!((lr - 1e-2 * (-1.0f64).exp()).abs() < 1e-12);
        // capped at n_decay_steps
        assert_eq!(s.lr_at(10_000), s.lr_at(5 * 200));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        let orig = p.clone();
        adam.step_lr(&mut p, &[0.0; 3], 1e-2);
        assert_eq!(p, orig);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(x) = (x - 3)^2
        let mut adam = Adam::new(1);
        let mut x = vec![0.0];
        let sched = LrSchedule { lr_start: 0.05, decay: -0.3, decay_step_length: 1000, n_decay_steps: 3 };
        for epoch in 0..5000 {
            let g = 2.0 * (x[0] - 3.0);
            adam.step(&mut x, &[g], &sched, epoch);
        }
        assert!((x[0] - 3.0).abs() < 1e-6, "x = {}", x[0]);
    }

    #[test]
    fn nm_quadratic_bowl_3d() {
        let mut f = |x: &[f64]| {
            (x[0] - 1.0).powi(2) + 2.0 * (x[1] + 0.5).powi(2) + 0.5 * (x[2] - 2.0).powi(2)
        };
        let res = nelder_mead(&mut f, &[0.0, 0.0, 0.0], &NelderMeadOptions::default()).unwrap();
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-6);
        assert!((res.x[1] + 0.5).abs() < 1e-6);
        assert!((res.x[2] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn nm_no_worse_than_initial() {
        let mut f = |x: &[f64]| x[0] * x[0] + x[1] * x[1];
        let res = nelder_mead(&mut f, &[0.0, 0.0], &NelderMeadOptions::default()).unwrap();
        assert!(res.value <= 0.0 + 1e-30);
    }

    #[test]
    fn nm_rosenbrock() {
        let mut f = |x: &[f64]| {
            let a = 1.0 - x[0];
            let b = x[1] - x[0] * x[0];
            a * a + 100.0 * b * b
        };
        let res = nelder_mead(&mut f, &[-1.2, 1.0], &NelderMeadOptions::default()).unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-4, "{:?}", res.x);
        assert!((res.x[1] - 1.0).abs() < 1e-4, "{:?}", res.x);
    }

    #[test]
    fn nm_nonfinite_errors_after_restarts() {
        let mut f = |x: &[f64]| if x[0] == 0.0 { 0.0 } else { f64::NAN };
        let err = nelder_mead(&mut f, &[0.0], &NelderMeadOptions::default());
        assert!(err.is_err());
    }
}
