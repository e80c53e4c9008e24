//! Hybrid UDE models: the Friberg equations with a neural augmentation of
//! the stem-cell feedback (UDE-add) or a full replacement of the feedback
//! term (UDE-rep).
//!
//! Non-negativity of the network contribution is enforced by the tanh(aP)
//! factor, which vanishes exactly at P = 0. Training gradients are
//! discretize-then-optimize: reverse accumulation through every RK4 stage
//! of the fixed-step integration, so they are exact for the discretized
//! loss. Mechanistic parameters are co-trained in log space, standardized
//! by a spread factor around the individually fitted Friberg values.

use serde::{Deserialize, Serialize};

use crate::data::TreatmentSchedule;
use crate::error::{Error, Result};
use crate::mech::FribergParams;
use crate::mlp::{MlpNet, MlpSpec};
use crate::objective::{smse_with_grad, SmseWeights};
use crate::ode::{integrate_piecewise, OdeProblem, Trajectory, DEFAULT_STEP};

/// Default non-negativity scale, calibrated to counts expressed in
/// 1e9 cells per liter.
pub const DEFAULT_A: f64 = 0.005;
/// Counts are stored per liter; the tanh factor operates on counts in
/// 1e9/L so the default `a` keeps it in its smooth regime.
pub const COUNT_UNIT: f64 = 1e9;
/// Default log-space spread standardization of the mechanistic parameters.
pub const DEFAULT_SPREAD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UdeVariant {
    Add,
    Rep,
}

impl UdeVariant {
    pub fn id(&self) -> &'static str {
        match self {
            UdeVariant::Add => "ude-add",
            UdeVariant::Rep => "ude-rep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdeModel {
    pub variant: UdeVariant,
    pub base: FribergParams,
    pub net: MlpNet,
    /// Non-negativity scale in tanh(a P).
    pub a: f64,
}

impl UdeModel {
    pub fn new(variant: UdeVariant, base: FribergParams, net: MlpNet) -> Self {
        Self { variant, base, net, a: DEFAULT_A }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdeLossConfig {
    /// L2 penalty on network weights.
    pub l2: f64,
    /// Weight of the steady-state deviation penalty over the
    /// pre-treatment window.
    pub couple_steady: f64,
    pub smse: SmseWeights,
    /// Log-space standardization spread for the mechanistic parameters.
    pub spread: f64,
    /// Integrator step in days.
    pub step: f64,
}

impl Default for UdeLossConfig {
    fn default() -> Self {
        Self {
            l2: 0.0,
            couple_steady: 0.1,
            smse: SmseWeights::default(),
            spread: DEFAULT_SPREAD,
            step: DEFAULT_STEP,
        }
    }
}

/// Network inputs are normalized to (P/C0, C/C0, relative dose); raw cell
/// counts would saturate the activations. The network output is scaled by
/// k_tr * C0 so unit outputs are commensurate with the mechanistic fluxes.
fn net_inputs(p: f64, c: f64, c0: f64, dose: f64) -> [f64; 3] {
    [p / c0, c / c0, dose]
}

/// Hybrid right-hand side. `dose` is the relative dose of the current day;
/// the drug effect is `e_eff * dose`.
pub fn ude_rhs(model: &UdeModel, state: &[f64], dose: f64, deriv: &mut [f64]) -> Result<()> {
    let bp = &model.base;
    let k = bp.k_tr();
    let e = bp.e_eff * dose;
    let (p, t1, t2, t3, c) = (state[0], state[1], state[2], state[3], state[4]);
    let tau = (model.a * p / COUNT_UNIT).tanh();
    let n_out = model.net.forward(&net_inputs(p, c, bp.c0, dose));
    if !n_out.is_finite() {
        return Err(Error::Domain("non-finite network output".into()));
    }
    let scale = k * bp.c0;
    deriv[0] = match model.variant {
        UdeVariant::Add => {
            if !(c > 0.0) {
                return Err(Error::Domain(format!("feedback undefined for C = {c}")));
            }
            let fb = (bp.c0 / c).powf(bp.gamma);
            k * p * (1.0 - e) * fb - k * p + tau * n_out * scale
        }
        UdeVariant::Rep => tau * n_out * scale * (1.0 - e) - k * p,
    };
    deriv[1] = k * (p - t1);
    deriv[2] = k * (t1 - t2);
    deriv[3] = k * (t2 - t3);
    deriv[4] = k * (t3 - c);
    Ok(())
}

/// Daily platelet trajectory from the Friberg steady state at C0.
pub fn simulate_ude(
    model: &UdeModel,
    schedule: &TreatmentSchedule,
    horizon_days: i64,
    step: f64,
) -> Result<Trajectory> {
    model.base.validate()?;
    let rhs = |_t: f64, y: &[f64], dose: f64, dy: &mut [f64]| {
        if ude_rhs(model, y, dose, dy).is_err() {
            dy.fill(f64::NAN);
        }
    };
    let problem = OdeProblem {
        dimension: 5,
        rhs: &rhs,
        initial_state: vec![model.base.c0; 5],
        t_span: (0, horizon_days),
    };
    integrate_piecewise(&problem, schedule, step)
}

/// Index order of the co-trained mechanistic parameters inside the flat
/// training vector, after the network block.
pub const MECH_PARAM_NAMES: [&str; 4] = ["gamma", "k_tr", "c0", "e_eff"];

/// A UDE training problem over a flat parameter vector
/// `[net parameters..., u_gamma, u_ktr, u_c0, u_eeff]` where each
/// mechanistic parameter is `ref * exp(spread * u)`.
pub struct UdeTrainProblem<'a> {
    pub variant: UdeVariant,
    pub a: f64,
    pub spec: MlpSpec,
    /// Reference point of the log-space standardization (the individually
    /// fitted Friberg parameters).
    pub refs: FribergParams,
    pub schedule: &'a TreatmentSchedule,
    /// (day, log platelet count) training observations.
    pub train_obs: Vec<(i64, f64)>,
    /// Simulation horizon for the training loss.
    pub horizon: i64,
    pub config: UdeLossConfig,
}

impl<'a> UdeTrainProblem<'a> {
    pub fn dim(&self) -> usize {
        self.spec.param_count() + 4
    }

    /// Initial parameter vector: given network, mechanistic u = 0.
    pub fn theta_from_net(&self, net: &MlpNet) -> Vec<f64> {
        let mut theta = net.to_flat();
        theta.extend_from_slice(&[0.0; 4]);
        theta
    }

    fn mech_of(&self, theta: &[f64]) -> FribergParams {
        let m = self.spec.param_count();
        let s = self.config.spread;
        let gamma = self.refs.gamma * (s * theta[m]).exp();
        let k_tr = self.refs.k_tr() * (s * theta[m + 1]).exp();
        let c0 = self.refs.c0 * (s * theta[m + 2]).exp();
        let e_eff = self.refs.e_eff * (s * theta[m + 3]).exp();
        FribergParams { gamma, mtt_h: 96.0 / k_tr, c0, e_eff }
    }

    pub fn model_from(&self, theta: &[f64]) -> Result<UdeModel> {
        let m = self.spec.param_count();
        let net = MlpNet::from_flat(self.spec.clone(), &theta[..m])?;
        Ok(UdeModel {
            variant: self.variant,
            base: self.mech_of(theta),
            net,
            a: self.a,
        })
    }

    /// Grid days before the first treatment event, used by the
    /// steady-state deviation penalty.
    fn steady_window(&self) -> Vec<i64> {
        match self.schedule.first_event_day() {
            Some(first) => (0..first.min(self.horizon + 1)).collect(),
            None => Vec::new(),
        }
    }

    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.eval(theta, false)?.0)
    }

    pub fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (value, grad) = self.eval(theta, true)?;
        let grad = grad.unwrap();
        if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index: idx });
        }
        Ok((value, grad))
    }

    fn eval(&self, theta: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        if self.train_obs.is_empty() {
            return Err(Error::Invalid("empty training split".into()));
        }
        let model = self.model_from(theta)?;
        let n_sub = (1.0 / self.config.step).round() as usize;
        let h = 1.0 / n_sub as f64;
        let n_steps = self.horizon as usize * n_sub;

        // forward pass, storing the state at every substep
        let mut states: Vec<[f64; 5]> = Vec::with_capacity(n_steps + 1);
        let mut y = [model.base.c0; 5];
        states.push(y);
        for n in 0..n_steps {
            let day = (n / n_sub) as i64;
            let dose = self.schedule.relative_dose(day);
            y = rk4_step_ude(&model, &y, dose, h)?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integration { time: (n + 1) as f64 * h });
            }
            states.push(y);
        }

        // daily log observable
        let log_c: Vec<f64> = (0..=self.horizon as usize)
            .map(|d| {
                let c = states[d * n_sub][4];
                if c > 0.0 {
                    Ok(c.ln())
                } else {
                    Err(Error::Domain(format!("non-positive platelet count on day {d}")))
                }
            })
            .collect::<Result<_>>()?;

        let (data_term, smse_grad) =
            smse_with_grad(&self.train_obs, 0, &log_c, &self.config.smse)?;

        let ln_c0 = model.base.c0.ln();
        let window = self.steady_window();
        let mut steady_term = 0.0;
        let mut steady_grad = vec![0.0; log_c.len()];
        let mut steady_dlnc0 = 0.0;
        if !window.is_empty() && self.config.couple_steady > 0.0 {
            let w = window.len() as f64;
            for &d in &window {
                let dlt = log_c[d as usize] - ln_c0;
                steady_term += dlt * dlt / w;
                steady_grad[d as usize] = 2.0 * dlt / w * self.config.couple_steady;
                steady_dlnc0 -= 2.0 * dlt / w * self.config.couple_steady;
            }
        }

        let l2_term = self.config.l2 * model.net.weight_sq_sum();
        let value = data_term + self.config.couple_steady * steady_term + l2_term;
        if !want_grad {
            return Ok((value, None));
        }

        // seeds: dL/dC_day from the data term and the steady penalty
        let seeds: Vec<f64> = (0..log_c.len())
            .map(|d| (smse_grad[d] + steady_grad[d]) / states[d * n_sub][4])
            .collect();

        let m = self.spec.param_count();
        let mut net_grad = vec![0.0; m];
        let mut p_grad = [0.0f64; 4]; // gamma, k_tr, c0, e_eff in parameter space

        let mut lambda = [0.0f64; 5];
        lambda[4] += seeds[self.horizon as usize];
        for n in (0..n_steps).rev() {
            let day = n / n_sub;
            let dose = self.schedule.relative_dose(day as i64);
            backprop_rk4_step(
                &model,
                &states[n],
                dose,
                h,
                &mut lambda,
                &mut net_grad,
                &mut p_grad,
            );
            if n % n_sub == 0 {
                lambda[4] += seeds[day];
            }
        }
        // initial state y0 = [c0; 5]
        p_grad[2] += lambda.iter().sum::<f64>();
        // direct C0 dependence of the steady penalty
        p_grad[2] += steady_dlnc0 / model.base.c0;

        let mut grad = net_grad;
        let mut l2g = vec![0.0; m];
        {
            let mut net = model.net.clone();
            let mut spec = net.spec.clone();
            spec.l2 = self.config.l2;
            net.spec = spec;
            net.add_l2_gradient(&mut l2g);
        }
        for (g, l) in grad.iter_mut().zip(&l2g) {
            *g += l;
        }
        // chain to the standardized log-space coordinates
        let s = self.config.spread;
        let p = [
            model.base.gamma,
            model.base.k_tr(),
            model.base.c0,
            model.base.e_eff,
        ];
        for i in 0..4 {
            grad.push(p_grad[i] * s * p[i]);
        }
        Ok((value, Some(grad)))
    }
}

fn rk4_step_ude(model: &UdeModel, y: &[f64; 5], dose: f64, h: f64) -> Result<[f64; 5]> {
    let mut k1 = [0.0; 5];
    let mut k2 = [0.0; 5];
    let mut k3 = [0.0; 5];
    let mut k4 = [0.0; 5];
    let mut tmp = [0.0; 5];
    ude_rhs(model, y, dose, &mut k1)?;
    for i in 0..5 {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    ude_rhs(model, &tmp, dose, &mut k2)?;
    for i in 0..5 {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    ude_rhs(model, &tmp, dose, &mut k3)?;
    for i in 0..5 {
        tmp[i] = y[i] + h * k3[i];
    }
    ude_rhs(model, &tmp, dose, &mut k4)?;
    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

/// Vector-Jacobian product of the hybrid right-hand side at one stage:
/// accumulates w^T df/d(state) into `gy` and w^T df/d(parameters) into the
/// network and mechanistic gradients.
fn ude_rhs_vjp(
    model: &UdeModel,
    y: &[f64; 5],
    dose: f64,
    w: &[f64; 5],
    gy: &mut [f64; 5],
    net_grad: &mut [f64],
    p_grad: &mut [f64; 4],
) {
    let bp = &model.base;
    let k = bp.k_tr();
    let c0 = bp.c0;
    let e = bp.e_eff * dose;
    let (p, t1, t2, t3, c) = (y[0], y[1], y[2], y[3], y[4]);
    let a_eff = model.a / COUNT_UNIT;
    let tau = (a_eff * p).tanh();
    let sech2 = 1.0 - tau * tau;
    let scale = k * c0;

    let inputs = net_inputs(p, c, c0, dose);
    let (n_out, cache) = model.net.forward_cached(&inputs);

    // transit chain rows 1..4 (shared by both variants)
    gy[0] += w[1] * k;
    gy[1] += -w[1] * k + w[2] * k;
    gy[2] += -w[2] * k + w[3] * k;
    gy[3] += -w[3] * k + w[4] * k;
    gy[4] += -w[4] * k;
    p_grad[1] += w[1] * (p - t1) + w[2] * (t1 - t2) + w[3] * (t2 - t3) + w[4] * (t3 - c);

    match model.variant {
        UdeVariant::Add => {
            let fb = (c0 / c).powf(bp.gamma);
            // mechanistic part of row 0
            gy[0] += w[0] * (k * (1.0 - e) * fb - k);
            gy[4] += w[0] * (k * p * (1.0 - e) * (-bp.gamma * fb / c));
            p_grad[0] += w[0] * k * p * (1.0 - e) * fb * (c0 / c).ln();
            p_grad[1] += w[0] * (p * (1.0 - e) * fb - p);
            p_grad[2] += w[0] * k * p * (1.0 - e) * bp.gamma * fb / c0;
            p_grad[3] += -w[0] * k * p * fb * dose;
            // network term tau * N * scale
            let upstream = w[0] * tau * scale;
            let (pg, ig) = model.net.gradient_from_cache(&cache, upstream);
            for (g, d) in net_grad.iter_mut().zip(&pg) {
                *g += d;
            }
            gy[0] += w[0] * a_eff * sech2 * n_out * scale + ig[0] / c0;
            gy[4] += ig[1] / c0;
            p_grad[1] += w[0] * tau * n_out * c0;
            p_grad[2] += w[0] * tau * n_out * k + ig[0] * (-p / (c0 * c0)) + ig[1] * (-c / (c0 * c0));
        }
        UdeVariant::Rep => {
            // row 0 = tau * N * scale * (1 - e) - k p
            let fac = 1.0 - e;
            let upstream = w[0] * tau * scale * fac;
            let (pg, ig) = model.net.gradient_from_cache(&cache, upstream);
            for (g, d) in net_grad.iter_mut().zip(&pg) {
                *g += d;
            }
            gy[0] += w[0] * (a_eff * sech2 * n_out * scale * fac - k) + ig[0] / c0;
            gy[4] += ig[1] / c0;
            p_grad[1] += w[0] * (tau * n_out * c0 * fac - p);
            p_grad[2] += w[0] * tau * n_out * k * fac
                + ig[0] * (-p / (c0 * c0))
                + ig[1] * (-c / (c0 * c0));
            p_grad[3] += -w[0] * tau * n_out * scale * dose;
        }
    }
}

/// Reverse accumulation through one RK4 step: on entry `lambda` is
/// dL/d(y_{n+1}); on exit it is dL/d(y_n). Stage states are recomputed
/// from the stored step input.
fn backprop_rk4_step(
    model: &UdeModel,
    y: &[f64; 5],
    dose: f64,
    h: f64,
    lambda: &mut [f64; 5],
    net_grad: &mut [f64],
    p_grad: &mut [f64; 4],
) {
    let mut k1 = [0.0; 5];
    let mut k2 = [0.0; 5];
    let mut k3 = [0.0; 5];
    ude_rhs(model, y, dose, &mut k1).expect("forward pass succeeded");
    let mut y2 = [0.0; 5];
    let mut y3 = [0.0; 5];
    let mut y4 = [0.0; 5];
    for i in 0..5 {
        y2[i] = y[i] + 0.5 * h * k1[i];
    }
    ude_rhs(model, &y2, dose, &mut k2).expect("forward pass succeeded");
    for i in 0..5 {
        y3[i] = y[i] + 0.5 * h * k2[i];
    }
    ude_rhs(model, &y3, dose, &mut k3).expect("forward pass succeeded");
    for i in 0..5 {
        y4[i] = y[i] + h * k3[i];
    }

    let lam = *lambda;
    let mut b = [0.0; 5];

    // stage 4: k4 = f(y4), weight h/6
    let mut gy4 = [0.0; 5];
    for i in 0..5 {
        b[i] = h / 6.0 * lam[i];
    }
    ude_rhs_vjp(model, &y4, dose, &b, &mut gy4, net_grad, p_grad);

    // stage 3: k3 enters y4 with factor h and the sum with h/3
    let mut gy3 = [0.0; 5];
    for i in 0..5 {
        b[i] = h / 3.0 * lam[i] + h * gy4[i];
    }
    ude_rhs_vjp(model, &y3, dose, &b, &mut gy3, net_grad, p_grad);

    // stage 2: k2 enters y3 with h/2 and the sum with h/3
    let mut gy2 = [0.0; 5];
    for i in 0..5 {
        b[i] = h / 3.0 * lam[i] + 0.5 * h * gy3[i];
    }
    ude_rhs_vjp(model, &y2, dose, &b, &mut gy2, net_grad, p_grad);

    // stage 1: k1 enters y2 with h/2 and the sum with h/6
    let mut gy1 = [0.0; 5];
    for i in 0..5 {
        b[i] = h / 6.0 * lam[i] + 0.5 * h * gy2[i];
    }
    ude_rhs_vjp(model, y, dose, &b, &mut gy1, net_grad, p_grad);

    for i in 0..5 {
        lambda[i] = lam[i] + gy1[i] + gy2[i] + gy3[i] + gy4[i];
    }
}
