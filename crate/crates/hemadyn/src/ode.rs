//! Fixed-step RK4 integration on a daily output grid, with the piecewise
//! constant treatment signal handled by stepping day by day so the drug
//! effect never changes inside a step.

use std::path::Path;

use crate::data::TreatmentSchedule;
use crate::error::{Error, Result};

/// Default integrator step: 1/24 day.
pub const DEFAULT_STEP: f64 = 1.0 / 24.0;

/// Right-hand side: (time, state, exogenous relative dose, out derivative).
///
/// The exogenous input is the relative dose in effect during the current
/// day (0 off treatment); model code turns it into a drug effect.
pub trait Rhs {
    fn eval(&self, t: f64, state: &[f64], dose: f64, deriv: &mut [f64]);
}

impl<F: Fn(f64, &[f64], f64, &mut [f64])> Rhs for F {
    fn eval(&self, t: f64, state: &[f64], dose: f64, deriv: &mut [f64]) {
        self(t, state, dose, deriv)
    }
}

pub struct OdeProblem<'a> {
    pub dimension: usize,
    pub rhs: &'a dyn Rhs,
    pub initial_state: Vec<f64>,
    /// Integration span in whole days.
    pub t_span: (i64, i64),
}

/// Dense solution sampled at integer days. The observable platelet count is
/// the last compartment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: i64,
    /// One row per grid day, `t1 - t0 + 1` rows.
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn t1(&self) -> i64 {
        self.t0 + self.states.len() as i64 - 1
    }

    pub fn state_at(&self, day: i64) -> Option<&[f64]> {
        let idx = day.checked_sub(self.t0)?;
        if idx < 0 {
            return None;
        }
        self.states.get(idx as usize).map(|s| s.as_slice())
    }

    /// Platelet counts (last compartment) on the daily grid.
    pub fn observable(&self) -> Vec<f64> {
        self.states.iter().map(|s| *s.last().unwrap()).collect()
    }

    pub fn observable_at(&self, day: i64) -> Option<f64> {
        self.state_at(day).map(|s| *s.last().unwrap())
    }

    /// CSV export: `day,compartment_0..k,platelets`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let dim = self.states.first().map(|s| s.len()).unwrap_or(0);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["day".to_string()];
        header.extend((0..dim).map(|i| format!("compartment_{i}")));
        header.push("platelets".into());
        w.write_record(&header)?;
        for (i, state) in self.states.iter().enumerate() {
            let mut row = vec![(self.t0 + i as i64).to_string()];
            row.extend(state.iter().map(|v| format!("{v}")));
            row.push(format!("{}", state.last().unwrap()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn substeps_per_day(step: f64) -> Result<usize> {
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("non-positive step {step}")));
    }
    let n = 1.0 / step;
    if (n - n.round()).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "step {step} does not divide 1 day evenly"
        )));
    }
    Ok(n.round() as usize)
}

/// One classical RK4 step from `t` with width `h` and frozen dose `dose`.
pub fn rk4_step(rhs: &dyn Rhs, t: f64, h: f64, y: &[f64], dose: f64, out: &mut [f64]) {
    let dim = y.len();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    rhs.eval(t, y, dose, &mut k1);
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    rhs.eval(t + 0.5 * h, &tmp, dose, &mut k2);
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    rhs.eval(t + 0.5 * h, &tmp, dose, &mut k3);
    for i in 0..dim {
        tmp[i] = y[i] + h * k3[i];
    }
    rhs.eval(t + h, &tmp, dose, &mut k4);
    for i in 0..dim {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn integrate_with_dose(
    problem: &OdeProblem,
    step: f64,
    dose_of_day: impl Fn(i64) -> f64,
) -> Result<Trajectory> {
    let n_sub = substeps_per_day(step)?;
    let (t0, t1) = problem.t_span;
    if t1 <= t0 {
        return Err(Error::Invalid(format!("empty time span ({t0}, {t1})")));
    }
    let dim = problem.dimension;
    let h = 1.0 / n_sub as f64;

    let mut y = problem.initial_state.clone();
    let mut next = vec![0.0; dim];
    let mut states = Vec::with_capacity((t1 - t0 + 1) as usize);
    states.push(y.clone());

    for day in t0..t1 {
        let dose = dose_of_day(day);
        for sub in 0..n_sub {
            let t = day as f64 + sub as f64 * h;
            rk4_step(problem.rhs, t, h, &y, dose, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integration { time: t + h });
            }
            std::mem::swap(&mut y, &mut next);
        }
        states.push(y.clone());
    }
    Ok(Trajectory { t0, states })
}

/// RK4 with no exogenous input.
pub fn integrate_rk4(problem: &OdeProblem, step: f64) -> Result<Trajectory> {
    integrate_with_dose(problem, step, |_| 0.0)
}

/// RK4 with the treatment signal held constant over each day interval
/// `[d, d+1)`. Stepping restarts at day boundaries, so the discontinuous
/// drug effect is exact for the discretized dynamics.
pub fn integrate_piecewise(
    problem: &OdeProblem,
    schedule: &TreatmentSchedule,
    step: f64,
) -> Result<Trajectory> {
    integrate_with_dose(problem, step, |day| schedule.relative_dose(day))
}
