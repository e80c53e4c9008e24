//! Purely data-driven NARX forecaster: a GRU fed its own previous output
//! (log platelet count, normalized around the patient baseline) plus the
//! exogenous drug signal, rolled out day by day in closed loop. Training
//! gradients are exact backpropagation through time, including the
//! closed-loop feedback path.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::objective::{smse_with_grad, SmseWeights};
use crate::opt::LrSchedule;

/// Log counts are centered at the patient baseline and scaled by this
/// typical log-dynamic range before entering the network.
pub const NORM_SCALE: f64 = 2.0;
/// Days of closed-loop spin-up before the first treatment event.
pub const WARMUP_DAYS: i64 = 3;

/// GRU with input size 2 (autoregressive signal, drug signal), one hidden
/// layer of size `hidden` and a linear readout. Parameters live in one
/// flat vector: W_z, b_z, W_r, b_r, W_n, b_n, W_out, b_out, with each
/// gate matrix row-major over the concatenated input [x, h].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruNet {
    pub hidden: usize,
    flat: Vec<f64>,
}

pub fn gru_param_count(hidden: usize) -> usize {
    3 * (hidden * (2 + hidden) + hidden) + hidden + 1
}

struct Offsets {
    wz: usize,
    bz: usize,
    wr: usize,
    br: usize,
    wn: usize,
    bn: usize,
    wo: usize,
    bo: usize,
}

fn offsets(h: usize) -> Offsets {
    let m = h * (2 + h);
    Offsets {
        wz: 0,
        bz: m,
        wr: m + h,
        br: 2 * m + h,
        wn: 2 * m + 2 * h,
        bn: 3 * m + 2 * h,
        wo: 3 * m + 3 * h,
        bo: 3 * m + 4 * h,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediate values of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    x: [f64; 2],
    h_in: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    h_out: Vec<f64>,
}

impl GruNet {
    pub fn zeros(hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Invalid("hidden size must be positive".into()));
        }
        Ok(Self { hidden, flat: vec![0.0; gru_param_count(hidden)] })
    }

    /// Glorot-uniform gate and readout weights, zero biases.
    pub fn glorot(hidden: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let off = offsets(hidden);
        let gate_limit = (6.0 / (2 + 2 * hidden) as f64).sqrt();
        for idx in [off.wz, off.wr, off.wn] {
            for w in &mut net.flat[idx..idx + hidden * (2 + hidden)] {
                *w = rng.random_range(-gate_limit..gate_limit);
            }
        }
        let out_limit = (6.0 / (hidden + 1) as f64).sqrt();
        for w in &mut net.flat[off.wo..off.wo + hidden] {
            *w = rng.random_range(-out_limit..out_limit);
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.flat.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.flat.clone()
    }

    pub fn from_flat(hidden: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != gru_param_count(hidden) {
            return Err(Error::Invalid(format!(
                "flat vector length {} != parameter count {}",
                flat.len(),
                gru_param_count(hidden)
            )));
        }
        Ok(Self { hidden, flat: flat.to_vec() })
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        *self = Self::from_flat(self.hidden, flat)?;
        Ok(())
    }

    /// Sum of squared gate and readout weights, biases excluded.
    pub fn weight_sq_sum(&self) -> f64 {
        let h = self.hidden;
        let off = offsets(h);
        let mut total = 0.0;
        for idx in [off.wz, off.wr, off.wn] {
            total += self.flat[idx..idx + h * (2 + h)].iter().map(|w| w * w).sum::<f64>();
        }
        total += self.flat[off.wo..off.wo + h].iter().map(|w| w * w).sum::<f64>();
        total
    }

    pub fn add_l2_gradient(&self, l2: f64, grad: &mut [f64]) {
        let h = self.hidden;
        let off = offsets(h);
        for idx in [off.wz, off.wr, off.wn] {
            for (g, w) in grad[idx..].iter_mut().zip(&self.flat[idx..idx + h * (2 + h)]) {
                *g += 2.0 * l2 * w;
            }
        }
        for (g, w) in grad[off.wo..].iter_mut().zip(&self.flat[off.wo..off.wo + h]) {
            *g += 2.0 * l2 * w;
        }
    }

    fn matvec(&self, w_off: usize, x: &[f64; 2], h: &[f64], out: &mut [f64]) {
        let n_in = 2 + self.hidden;
        for o in 0..self.hidden {
            let row = &self.flat[w_off + o * n_in..w_off + (o + 1) * n_in];
            let mut acc = row[0] * x[0] + row[1] * x[1];
            for (w, v) in row[2..].iter().zip(h) {
                acc += w * v;
            }
            out[o] += acc;
        }
    }

    /// One recurrence step: standard GRU gates plus the linear readout.
    pub fn step(&self, input: &[f64; 2], hidden: &[f64]) -> (f64, Vec<f64>) {
        let (out, cache) = self.step_cached(input, hidden);
        (out, cache.h_out)
    }

    pub fn step_cached(&self, input: &[f64; 2], hidden: &[f64]) -> (f64, GruStepCache) {
        assert_eq!(hidden.len(), self.hidden);
        let h = self.hidden;
        let off = offsets(h);

        let mut z = self.flat[off.bz..off.bz + h].to_vec();
        self.matvec(off.wz, input, hidden, &mut z);
        for v in &mut z {
            *v = sigmoid(*v);
        }
        let mut r = self.flat[off.br..off.br + h].to_vec();
        self.matvec(off.wr, input, hidden, &mut r);
        for v in &mut r {
            *v = sigmoid(*v);
        }
        let rh: Vec<f64> = r.iter().zip(hidden).map(|(a, b)| a * b).collect();
        let mut n = self.flat[off.bn..off.bn + h].to_vec();
        self.matvec(off.wn, input, &rh, &mut n);
        for v in &mut n {
            *v = v.tanh();
        }
        let h_out: Vec<f64> = (0..h).map(|i| (1.0 - z[i]) * n[i] + z[i] * hidden[i]).collect();
        let mut out = self.flat[off.bo];
        for (w, v) in self.flat[off.wo..off.wo + h].iter().zip(&h_out) {
            out += w * v;
        }
        let cache = GruStepCache {
            x: *input,
            h_in: hidden.to_vec(),
            z,
            r,
            n,
            h_out: h_out.clone(),
        };
        (out, cache)
    }

    /// Backward pass of one step: given upstream gradients on the output
    /// scalar and on the new hidden state, accumulates the parameter
    /// gradient and returns (gradient w.r.t. input, gradient w.r.t. the
    /// incoming hidden state).
    pub fn step_backward(
        &self,
        cache: &GruStepCache,
        g_out: f64,
        g_h_out: &[f64],
        param_grad: &mut [f64],
    ) -> ([f64; 2], Vec<f64>) {
        let h = self.hidden;
        let n_in = 2 + h;
        let off = offsets(h);

        // readout
        let mut gh: Vec<f64> = g_h_out.to_vec();
        for i in 0..h {
            gh[i] += g_out * self.flat[off.wo + i];
            param_grad[off.wo + i] += g_out * cache.h_out[i];
        }
        param_grad[off.bo] += g_out;

        // h' = (1-z) n + z h
        let mut g_n = vec![0.0; h];
        let mut g_z = vec![0.0; h];
        let mut g_h_in = vec![0.0; h];
        for i in 0..h {
            g_n[i] = gh[i] * (1.0 - cache.z[i]);
            g_z[i] = gh[i] * (cache.h_in[i] - cache.n[i]);
            g_h_in[i] = gh[i] * cache.z[i];
        }

        let mut g_x = [0.0; 2];
        let mut g_r = vec![0.0; h];

        // candidate gate: n = tanh(W_n [x, r*h] + b_n)
        for o in 0..h {
            let d = g_n[o] * (1.0 - cache.n[o] * cache.n[o]);
            param_grad[off.bn + o] += d;
            let row = off.wn + o * n_in;
            param_grad[row] += d * cache.x[0];
            param_grad[row + 1] += d * cache.x[1];
            g_x[0] += d * self.flat[row];
            g_x[1] += d * self.flat[row + 1];
            for i in 0..h {
                let rh = cache.r[i] * cache.h_in[i];
                param_grad[row + 2 + i] += d * rh;
                let w = self.flat[row + 2 + i];
                g_r[i] += d * w * cache.h_in[i];
                g_h_in[i] += d * w * cache.r[i];
            }
        }

        // sigmoid gates
        for (w_off, b_off, g, act) in [
            (off.wz, off.bz, &g_z, &cache.z),
            (off.wr, off.br, &g_r, &cache.r),
        ] {
            for o in 0..h {
                let d = g[o] * act[o] * (1.0 - act[o]);
                param_grad[b_off + o] += d;
                let row = w_off + o * n_in;
                param_grad[row] += d * cache.x[0];
                param_grad[row + 1] += d * cache.x[1];
                g_x[0] += d * self.flat[row];
                g_x[1] += d * self.flat[row + 1];
                for i in 0..h {
                    param_grad[row + 2 + i] += d * cache.h_in[i];
                    g_h_in[i] += d * self.flat[row + 2 + i];
                }
            }
        }

        (g_x, g_h_in)
    }
}

fn obs_log_by_day(record: &PatientRecord) -> HashMap<i64, f64> {
    let mut map = HashMap::new();
    for obs in &record.observations {
        map.insert(obs.day(), obs.platelet_count.ln());
    }
    map
}

fn rollout_start(record: &PatientRecord, start_day: i64) -> i64 {
    match record.schedule.first_event_day() {
        Some(first) => start_day.min((first - WARMUP_DAYS).max(0)),
        None => start_day,
    }
}

/// Daily closed-loop predictions of the log platelet count for
/// `start_day..=end_day`. The recurrence spins up from a zero hidden
/// state a few days before the first treatment event; the autoregressive
/// input starts at the patient baseline. With `teacher_forcing`, observed
/// days substitute the observation for the fed-back prediction.
pub fn rollout(
    net: &GruNet,
    record: &PatientRecord,
    start_day: i64,
    end_day: i64,
    teacher_forcing: bool,
) -> Result<Vec<f64>> {
    let obs = if teacher_forcing { obs_log_by_day(record) } else { HashMap::new() };
    rollout_with_teacher(net, record, start_day, end_day, &obs)
}

/// Rollout with an explicit teacher map (day -> log count) substituted for
/// the fed-back prediction; used for forecasting past a training window
/// where only the training observations may be fed back.
pub fn rollout_with_teacher(
    net: &GruNet,
    record: &PatientRecord,
    start_day: i64,
    end_day: i64,
    obs: &HashMap<i64, f64>,
) -> Result<Vec<f64>> {
    if start_day < 0 || end_day < start_day {
        return Err(Error::Invalid(format!("bad rollout window [{start_day}, {end_day}]")));
    }
    let baseline = record.baseline_log();
    let day0 = rollout_start(record, start_day);
    let mut hidden = vec![0.0; net.hidden];
    let mut a = 0.0;
    let mut preds = Vec::with_capacity((end_day - start_day + 1) as usize);
    for day in day0..=end_day {
        let x = [a, record.schedule.relative_dose(day)];
        let (out, h_next) = net.step(&x, &hidden);
        if !out.is_finite() {
            return Err(Error::Integration { time: day as f64 });
        }
        hidden = h_next;
        if day >= start_day {
            preds.push(baseline + NORM_SCALE * out);
        }
        a = match obs.get(&day) {
            Some(&y) => (y - baseline) / NORM_SCALE,
            None => out,
        };
    }
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArxConfig {
    pub hidden: usize,
    pub l2: f64,
    /// Regularization toward the patient baseline over pre-treatment days.
    pub baseline_penalty: f64,
    pub smse: SmseWeights,
    pub schedule: LrSchedule,
}

impl Default for ArxConfig {
    fn default() -> Self {
        Self {
            hidden: 5,
            l2: 1e-4,
            baseline_penalty: 0.1,
            smse: SmseWeights::default(),
            schedule: LrSchedule::default(),
        }
    }
}

/// ARX-GRU training problem: closed-loop rollout over `[0, horizon]`
/// scored by SMSE on the training observations (log scale), plus L2 and
/// the baseline deviation penalty.
pub struct ArxTrainProblem<'a> {
    pub record: &'a PatientRecord,
    /// (day, log count) training observations.
    pub train_obs: Vec<(i64, f64)>,
    pub horizon: i64,
    /// Substitute training observations for the fed-back prediction
    /// (one-step-ahead pre-training mode).
    pub teacher_forcing: bool,
    pub config: ArxConfig,
}

impl<'a> ArxTrainProblem<'a> {
    fn pretreatment_days(&self) -> Vec<i64> {
        match self.record.schedule.first_event_day() {
            Some(first) => (0..first.min(self.horizon + 1)).collect(),
            None => Vec::new(),
        }
    }

    pub fn loss(&self, net: &GruNet) -> Result<f64> {
        Ok(self.eval(net, false)?.0)
    }

    pub fn loss_grad(&self, net: &GruNet) -> Result<(f64, Vec<f64>)> {
        let (value, grad) = self.eval(net, true)?;
        let grad = grad.unwrap();
        if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index: idx });
        }
        Ok((value, grad))
    }

    fn eval(&self, net: &GruNet, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        if self.train_obs.is_empty() {
            return Err(Error::Invalid("empty training split".into()));
        }
        let baseline = self.record.baseline_log();
        let end = self.horizon;

        let teacher: HashMap<i64, f64> = if self.teacher_forcing {
            self.train_obs.iter().copied().collect()
        } else {
            HashMap::new()
        };

        // forward rollout, keeping per-step caches
        let mut hidden = vec![0.0; net.hidden];
        let mut a = 0.0;
        let mut caches: Vec<GruStepCache> = Vec::with_capacity(end as usize + 1);
        let mut preds = Vec::with_capacity(end as usize + 1);
        let mut fed_back = Vec::with_capacity(end as usize + 1);
        for day in 0..=end {
            let x = [a, self.record.schedule.relative_dose(day)];
            let (out, cache) = net.step_cached(&x, &hidden);
            if !out.is_finite() {
                return Err(Error::Integration { time: day as f64 });
            }
            hidden = cache.h_out.clone();
            preds.push(baseline + NORM_SCALE * out);
            match teacher.get(&day) {
                Some(&y) => {
                    a = (y - baseline) / NORM_SCALE;
                    fed_back.push(false);
                }
                None => {
                    a = out;
                    fed_back.push(true);
                }
            }
            caches.push(cache);
        }

        let (data_term, smse_grad) = smse_with_grad(&self.train_obs, 0, &preds, &self.config.smse)?;

        let window = self.pretreatment_days();
        let mut base_term = 0.0;
        let mut seeds = smse_grad;
        if !window.is_empty() && self.config.baseline_penalty > 0.0 {
            let w = window.len() as f64;
            for &d in &window {
                let dlt = preds[d as usize] - baseline;
                base_term += dlt * dlt / w;
                seeds[d as usize] += 2.0 * dlt / w * self.config.baseline_penalty;
            }
        }
        let value =
            data_term + self.config.baseline_penalty * base_term + self.config.l2 * net.weight_sq_sum();
        if !want_grad {
            return Ok((value, None));
        }

        // backpropagation through time, including the closed-loop feedback
        let mut grad = vec![0.0; net.param_count()];
        let mut g_h = vec![0.0; net.hidden];
        let mut g_a = 0.0;
        for day in (0..=end).rev() {
            let fb = if fed_back[day as usize] { g_a } else { 0.0 };
            let g_out = NORM_SCALE * seeds[day as usize] + fb;
            let (g_x, g_h_in) = net.step_backward(&caches[day as usize], g_out, &g_h, &mut grad);
            g_h = g_h_in;
            g_a = g_x[0];
        }
        net.add_l2_gradient(self.config.l2, &mut grad);
        Ok((value, Some(grad)))
    }
}
