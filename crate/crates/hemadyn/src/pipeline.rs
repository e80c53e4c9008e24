//! End-to-end training workflows: penalized mechanistic likelihood fits,
//! two-stage UDE training with transfer learning for the replacement
//! variant, and ARX-GRU pre-training on virtual therapy scenarios followed
//! by fine-tuning on the real observations.
//!
//! Every pipeline is a pure function of (record, split, config): all
//! randomness comes from per-purpose seeds derived from the master seed
//! and the patient id, so reruns reproduce results exactly.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arx::{rollout_with_teacher, ArxConfig, ArxTrainProblem, GruNet};
use crate::cohort::{build_schedule, derive_seed, ScheduleTemplate};
use crate::data::{CycleSplit, Observation, PatientRecord, TreatmentSchedule};
use crate::error::{Error, Result};
use crate::mech::{simulate, FribergParams, MechModel, MechParams};
use crate::mlp::{Activation, MlpNet, MlpSpec};
use crate::objective::{penalized_objective, PenaltyConfig, SmseWeights};
use crate::opt::{nelder_mead, Adam, LrSchedule, NelderMeadOptions};
use crate::ude::{simulate_ude, UdeLossConfig, UdeModel, UdeTrainProblem, UdeVariant, DEFAULT_A};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedModel {
    Mech { model: MechModel, params: MechParams },
    Ude(UdeModel),
    Arx(GruNet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model_id: String,
    pub patient_id: String,
    pub n_train_cycles: usize,
    pub fitted: FittedModel,
    pub train_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn friberg_base(&self) -> Option<FribergParams> {
        match &self.fitted {
            FittedModel::Mech { model: MechModel::Friberg, params } => Some(params.base),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Hidden layer sizes of the UDE augmentation network.
    pub mlp_hidden: Vec<usize>,
    pub activation: Activation,
    /// Glorot scale factor for initial network weights.
    pub init_scale: f64,
    pub ude_epochs: usize,
    /// UDE-rep stage A epochs (pre-training on the Friberg solution).
    pub ude_pretrain_epochs: usize,
    pub arx_pretrain_epochs: usize,
    pub arx_finetune_epochs: usize,
    pub lr: LrSchedule,
    /// Schedule for the transfer/pre-training stages, which cover larger
    /// parameter distances than fine-tuning.
    pub pretrain_lr: LrSchedule,
    pub ude_loss: UdeLossConfig,
    pub arx: ArxConfig,
    /// Virtual therapy scenarios for ARX-GRU pre-training.
    pub n_scenarios: usize,
    /// Skip UDE-rep stage A (HP table ablation flag).
    pub skip_pretrain: bool,
    /// Pre-train ARX scenarios at population instead of the individual fit.
    pub scenario_population_params: bool,
    /// Weight of the scenario closed-loop loss retained in ARX
    /// fine-tuning, anchoring the rollout beyond the training window.
    pub arx_anchor: f64,
    /// ARX training restarts; the net with the lowest anchored
    /// fine-tuning objective wins.
    pub arx_restarts: usize,
    pub nm: NelderMeadOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mlp_hidden: vec![5],
            activation: Activation::Tanh,
            init_scale: 0.1,
            ude_epochs: 2000,
            ude_pretrain_epochs: 2000,
            arx_pretrain_epochs: 1000,
            arx_finetune_epochs: 1000,
            lr: LrSchedule::default(),
            pretrain_lr: LrSchedule { lr_start: 1e-2, ..LrSchedule::default() },
            ude_loss: UdeLossConfig::default(),
            arx: ArxConfig::default(),
            n_scenarios: 50,
            skip_pretrain: false,
            scenario_population_params: false,
            arx_anchor: 0.3,
            arx_restarts: 3,
            nm: NelderMeadOptions::default(),
        }
    }
}

fn train_days(split: &CycleSplit) -> Vec<(i64, f64)> {
    split
        .train_obs
        .iter()
        .map(|o| (o.day(), o.platelet_count.ln()))
        .collect()
}

/// Schedule restricted to events and cycles before `boundary`, so the fit
/// only ever integrates the training window.
fn truncate_schedule(schedule: &TreatmentSchedule, boundary: i64) -> Result<TreatmentSchedule> {
    TreatmentSchedule::new(
        schedule
            .events
            .iter()
            .filter(|(d, _)| *d < boundary)
            .copied()
            .collect(),
        schedule
            .cycle_starts
            .iter()
            .filter(|&&d| d < boundary)
            .copied()
            .collect(),
        schedule.cycle_length,
    )
}

/// Penalized likelihood fit of the shared Friberg parameters
/// (gamma, k_tr, C0, E_eff) in log space by Nelder-Mead; the structural
/// extension parameters (f_tr, f_p, k_cyc, k_cyc2) stay at their
/// population values.
pub fn fit_mechanistic(
    model: MechModel,
    record: &PatientRecord,
    split: &CycleSplit,
    penalty: &PenaltyConfig,
    nm_opts: &NelderMeadOptions,
) -> Result<FitResult> {
    let obs = train_days(split);
    if obs.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let y: Vec<f64> = obs.iter().map(|&(_, v)| v).collect();
    let horizon = split.boundary_day - 1;
    let sched = truncate_schedule(&record.schedule, split.boundary_day)?;

    let pop = MechParams::population(model);
    let x0 = [
        pop.base.gamma.ln(),
        pop.base.k_tr().ln(),
        pop.base.c0.ln(),
        pop.base.e_eff.ln(),
    ];
    let params_of = |x: &[f64]| -> MechParams {
        MechParams {
            base: FribergParams {
                gamma: x[0].exp(),
                mtt_h: 96.0 / x[1].exp(),
                c0: x[2].exp(),
                e_eff: x[3].exp(),
            },
            ..pop
        }
    };
    let mut objective = |x: &[f64]| -> f64 {
        let params = params_of(x);
        let traj = match simulate(model, &params, &sched, horizon, None) {
            Ok(t) => t,
            Err(_) => return f64::NAN,
        };
        let mut yhat = Vec::with_capacity(obs.len());
        for &(d, _) in &obs {
            match traj.observable_at(d) {
                Some(c) if c > 0.0 => yhat.push(c.ln()),
                _ => return f64::NAN,
            }
        }
        let p = [x[0].exp(), x[1].exp(), x[2].exp(), x[3].exp()];
        penalized_objective(&y, &yhat, &p, penalty).unwrap_or(f64::NAN)
    };

    let res = nelder_mead(&mut objective, &x0, nm_opts)?;
    Ok(FitResult {
        model_id: model.id().to_string(),
        patient_id: record.id.clone(),
        n_train_cycles: split.n_train_cycles,
        fitted: FittedModel::Mech { model, params: params_of(&res.x) },
        train_loss: res.value,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Population-mean penalty over (gamma, k_tr, C0, E_eff) for `model`.
pub fn default_penalty(model: MechModel) -> PenaltyConfig {
    let pop = MechParams::population(model);
    PenaltyConfig::new(vec![pop.base.gamma, pop.base.k_tr(), pop.base.c0, pop.base.e_eff])
}

fn require_friberg_fit(fit: &FitResult) -> Result<FribergParams> {
    if !fit.converged {
        return Err(Error::Invalid(format!(
            "mechanistic fit for {} did not converge",
            fit.patient_id
        )));
    }
    fit.friberg_base().ok_or_else(|| {
        Error::Invalid(format!("expected a Friberg fit, got {}", fit.model_id))
    })
}

/// Adam loop with the divergence policy: a non-finite loss or gradient
/// restarts the whole run once with the learning rate halved.
fn adam_train<F>(
    dim: usize,
    init: &[f64],
    epochs: usize,
    lr: &LrSchedule,
    mut loss_grad: F,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut schedule = *lr;
    for attempt in 0..2 {
        let mut theta = init.to_vec();
        let mut adam = Adam::new(dim);
        let mut diverged = false;
        let mut last = f64::NAN;
        for epoch in 0..epochs {
            match loss_grad(&theta) {
                Ok((value, grad)) => {
                    last = value;
                    adam.step(&mut theta, &grad, &schedule, epoch);
                }
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
        }
        if !diverged {
            match loss_grad(&theta) {
                Ok((value, _)) => return Ok((theta, value)),
                Err(_) => diverged = true,
            }
        }
        if diverged {
            if attempt == 1 {
                return Err(Error::Diverged(format!(
                    "training diverged twice (last finite loss {last})"
                )));
            }
            schedule = schedule.scaled(0.5);
        }
    }
    unreachable!()
}

fn ude_problem<'a>(
    variant: UdeVariant,
    refs: FribergParams,
    record: &'a PatientRecord,
    train_obs: Vec<(i64, f64)>,
    horizon: i64,
    config: &PipelineConfig,
) -> UdeTrainProblem<'a> {
    UdeTrainProblem {
        variant,
        a: DEFAULT_A,
        spec: MlpSpec::new(&config.mlp_hidden, config.activation, 0.0),
        refs,
        schedule: &record.schedule,
        train_obs,
        horizon,
        config: config.ude_loss.clone(),
    }
}

fn scaled_glorot(spec: MlpSpec, seed: u64, scale: f64) -> Result<MlpNet> {
    let net = MlpNet::glorot(spec.clone(), seed)?;
    let flat: Vec<f64> = net.to_flat().iter().map(|w| w * scale).collect();
    MlpNet::from_flat(spec, &flat)
}

/// UDE-add training: stage 1 adopts the fitted Friberg parameters as the
/// log-space reference, stage 2 trains network and log-parameters jointly.
pub fn train_ude_add(
    record: &PatientRecord,
    split: &CycleSplit,
    friberg_fit: &FitResult,
    config: &PipelineConfig,
) -> Result<FitResult> {
    let refs = require_friberg_fit(friberg_fit)?;
    let problem = ude_problem(
        UdeVariant::Add,
        refs,
        record,
        train_days(split),
        split.boundary_day,
        config,
    );
    let seed = derive_seed(config.seed, &format!("{}/ude-add", record.id));
    let net = scaled_glorot(problem.spec.clone(), seed, config.init_scale)?;
    let init = problem.theta_from_net(&net);
    let (theta, loss) = adam_train(init.len(), &init, config.ude_epochs, &config.lr, |t| {
        problem.loss_grad(t)
    })?;
    Ok(FitResult {
        model_id: "ude-add".into(),
        patient_id: record.id.clone(),
        n_train_cycles: split.n_train_cycles,
        fitted: FittedModel::Ude(problem.model_from(&theta)?),
        train_loss: loss,
        iterations: config.ude_epochs,
        converged: true,
    })
}

/// Daily log trajectory of the fitted Friberg model over the full
/// schedule, the stage A transfer target for UDE-rep.
fn friberg_log_solution(refs: FribergParams, record: &PatientRecord) -> Result<Vec<(i64, f64)>> {
    let horizon = record.schedule.cycle_starts.last().unwrap() + record.schedule.cycle_length;
    let traj = simulate(
        MechModel::Friberg,
        &MechParams::from_base(refs),
        &record.schedule,
        horizon,
        None,
    )?;
    traj.observable()
        .iter()
        .enumerate()
        .map(|(d, &c)| {
            if c > 0.0 {
                Ok((d as i64, c.ln()))
            } else {
                Err(Error::Domain(format!("non-positive count on day {d}")))
            }
        })
        .collect()
}

/// UDE-rep training: stage A pre-trains the replacement network against
/// the fitted Friberg daily solution (mechanistic parameters frozen),
/// stage B fine-tunes everything on the real observations.
pub fn train_ude_rep(
    record: &PatientRecord,
    split: &CycleSplit,
    friberg_fit: &FitResult,
    config: &PipelineConfig,
) -> Result<FitResult> {
    let refs = require_friberg_fit(friberg_fit)?;
    let spec = MlpSpec::new(&config.mlp_hidden, config.activation, 0.0);
    let seed = derive_seed(config.seed, &format!("{}/ude-rep", record.id));
    let net = {
        let small = scaled_glorot(spec.clone(), seed, config.init_scale)?;
        // start the replacement term at the drug-free fixed point: with
        // output ~ bias = 1/tanh(a P0), dP/dt vanishes at steady state
        let mut flat = small.to_flat();
        let n = flat.len();
        flat[n - 1] = 1.0 / (DEFAULT_A * refs.c0 / crate::ude::COUNT_UNIT).tanh();
        MlpNet::from_flat(spec.clone(), &flat)?
    };

    let theta;
    if config.skip_pretrain {
        let problem = ude_problem(UdeVariant::Rep, refs, record, vec![], 1, config);
        theta = problem.theta_from_net(&net);
    } else {
        let target = friberg_log_solution(refs, record)?;
        let horizon = target.last().unwrap().0;
        let mut pre_config = config.clone();
        // plain MSE on the dense grid; no steady-state term needed when
        // the target itself starts at steady state
        pre_config.ude_loss.smse.neighbor_weight = 0.0;
        pre_config.ude_loss.couple_steady = 0.0;
        let problem = ude_problem(UdeVariant::Rep, refs, record, target, horizon, &pre_config);
        let init = problem.theta_from_net(&net);
        let n_net = problem.spec.param_count();
        let (t, _) = adam_train(
            init.len(),
            &init,
            config.ude_pretrain_epochs,
            &config.pretrain_lr,
            |t| {
                let (v, mut g) = problem.loss_grad(t)?;
                // mechanistic parameters are frozen during transfer
                for gi in &mut g[n_net..] {
                    *gi = 0.0;
                }
                Ok((v, g))
            },
        )?;
        theta = t;
    }

    let problem = ude_problem(
        UdeVariant::Rep,
        refs,
        record,
        train_days(split),
        split.boundary_day,
        config,
    );
    let (theta, loss) = adam_train(theta.len(), &theta, config.ude_epochs, &config.lr, |t| {
        problem.loss_grad(t)
    })?;
    Ok(FitResult {
        model_id: "ude-rep".into(),
        patient_id: record.id.clone(),
        n_train_cycles: split.n_train_cycles,
        fitted: FittedModel::Ude(problem.model_from(&theta)?),
        train_loss: loss,
        iterations: config.ude_epochs,
        converged: true,
    })
}

/// Pre-training fidelity of a UDE-rep checkpoint: mean squared log error
/// against the Friberg solution on the daily grid.
pub fn rep_transfer_mse(model: &UdeModel, record: &PatientRecord) -> Result<f64> {
    let target = friberg_log_solution(model.base, record)?;
    let horizon = target.last().unwrap().0;
    let traj = simulate_ude(model, &record.schedule, horizon, crate::ode::DEFAULT_STEP)?;
    let mut total = 0.0;
    for &(d, y) in &target {
        let c = traj.observable_at(d).unwrap();
        if !(c > 0.0) {
            return Err(Error::Domain(format!("non-positive count on day {d}")));
        }
        let r = y - c.ln();
        total += r * r;
    }
    Ok(total / target.len() as f64)
}

/// Sampling stride of the virtual scenario observations. Gaps between
/// teacher-forced days make the pre-training loss penalize multi-step
/// closed-loop drift instead of rewarding one-step persistence.
const SCENARIO_OBS_STRIDE: usize = 3;

/// One virtual therapy scenario for ARX pre-training: the fitted Friberg
/// model under a jittered schedule, observed densely (every few days).
fn scenario_record(
    base: FribergParams,
    template: &ScheduleTemplate,
    rng: &mut ChaCha8Rng,
    idx: usize,
) -> Result<PatientRecord> {
    let schedule = build_schedule(rng, template, 3);
    let horizon = schedule.cycle_starts.last().unwrap() + template.cycle_length;
    let traj = simulate(
        MechModel::Friberg,
        &MechParams::from_base(base),
        &schedule,
        horizon,
        None,
    )?;
    let observations: Vec<Observation> = traj
        .observable()
        .iter()
        .enumerate()
        .step_by(SCENARIO_OBS_STRIDE)
        .map(|(d, &c)| Observation::new(d as f64, c))
        .collect::<Result<_>>()?;
    PatientRecord::new(format!("scenario-{idx}"), observations, schedule)
}

fn template_from_record(record: &PatientRecord) -> ScheduleTemplate {
    let schedule = &record.schedule;
    let first = schedule.cycle_starts[0];
    let treatment_days = schedule
        .events
        .iter()
        .filter(|(d, _)| *d >= first && *d < first + schedule.cycle_length)
        .count()
        .max(1) as i64;
    ScheduleTemplate {
        cycle_length: schedule.cycle_length,
        n_cycles: schedule.n_cycles(),
        treatment_days,
        dose_jitter: 0.2,
        start_jitter: 2,
        density: crate::cohort::Density::Dense,
    }
}

/// ARX-GRU training: teacher-forced pre-training on virtual scenarios
/// simulated from the fitted Friberg model, then closed-loop fine-tuning
/// on the patient's training observations.
pub fn train_arx_gru(
    record: &PatientRecord,
    split: &CycleSplit,
    friberg_fit: &FitResult,
    config: &PipelineConfig,
) -> Result<FitResult> {
    let base = if config.scenario_population_params {
        require_friberg_fit(friberg_fit)?;
        FribergParams::population()
    } else {
        require_friberg_fit(friberg_fit)?
    };
    let template = template_from_record(record);
    let mut scenarios = Vec::with_capacity(config.n_scenarios);
    for k in 0..config.n_scenarios {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &format!("{}/arx-scenario-{k}", record.id),
        ));
        scenarios.push(scenario_record(base, &template, &mut rng, k)?);
    }
    // Scenario data is a noiseless simulation, so the neighbor smoothing
    // of the SMSE (meant for noisy, irregularly timed counts) would only
    // damp the learned amplitude; score scenarios on exact days.
    let scenario_config = ArxConfig {
        smse: SmseWeights { neighbor_weight: 0.0, ..config.arx.smse },
        ..config.arx.clone()
    };
    let scenario_problems = |teacher_forcing: bool| -> Vec<ArxTrainProblem<'_>> {
        scenarios
            .iter()
            .map(|rec| ArxTrainProblem {
                record: rec,
                train_obs: rec
                    .observations
                    .iter()
                    .map(|o| (o.day(), o.platelet_count.ln()))
                    .collect(),
                horizon: rec.last_observation_day(),
                teacher_forcing,
                config: scenario_config.clone(),
            })
            .collect()
    };

    let hidden = config.arx.hidden;
    let fine_problem = ArxTrainProblem {
        record,
        train_obs: train_days(split),
        horizon: split.boundary_day,
        teacher_forcing: false,
        config: config.arx.clone(),
    };
    let anchor = config.arx_anchor;
    let anchor_problems = scenario_problems(false);

    // Closed-loop BPTT is highly sensitive to the initial weights: some
    // seeds converge to nets whose free-running amplitude collapses. Train
    // a few restarts and keep the one with the lowest anchored objective,
    // which exposes such nets through the scenario term.
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..config.arx_restarts.max(1) {
        let seed = derive_seed(config.seed, &format!("{}/arx-gru/{restart}", record.id));
        let net0 = GruNet::glorot(hidden, seed)?;
        let mut pretrained: Vec<f64> =
            net0.to_flat().iter().map(|w| w * config.init_scale).collect();

        // Curriculum: teacher-forced epochs land in the right basin
        // cheaply, then free-running epochs on the same scenarios
        // stabilize the long closed-loop rollout that one-step-ahead
        // training leaves unconstrained.
        if config.n_scenarios > 0 && config.arx_pretrain_epochs > 0 {
            let phase_a = config.arx_pretrain_epochs / 2;
            let phases = [
                (phase_a, scenario_problems(true)),
                (config.arx_pretrain_epochs - phase_a, scenario_problems(false)),
            ];
            for (epochs, problems) in &phases {
                if *epochs == 0 {
                    continue;
                }
                let (theta, _) = adam_train(
                    pretrained.len(),
                    &pretrained,
                    *epochs,
                    &config.pretrain_lr,
                    |t| {
                        let net = GruNet::from_flat(hidden, t)?;
                        let mut total = 0.0;
                        let mut grad = vec![0.0; t.len()];
                        for problem in problems {
                            let (v, g) = problem.loss_grad(&net)?;
                            total += v / problems.len() as f64;
                            for (a, b) in grad.iter_mut().zip(&g) {
                                *a += b / problems.len() as f64;
                            }
                        }
                        Ok((total, grad))
                    },
                )?;
                pretrained = theta;
            }
        }

        // The scenario loss stays in the fine-tuning objective at reduced
        // weight: the sparse patient window says nothing about the rollout
        // beyond the split boundary, and without the anchor the
        // closed-loop dose response learned in pre-training degrades
        // there.
        let (theta, loss) = adam_train(
            pretrained.len(),
            &pretrained,
            config.arx_finetune_epochs,
            &config.lr,
            |t| {
                let net = GruNet::from_flat(hidden, t)?;
                let (mut v, mut g) = fine_problem.loss_grad(&net)?;
                if anchor > 0.0 && !anchor_problems.is_empty() {
                    let w = anchor / anchor_problems.len() as f64;
                    for problem in &anchor_problems {
                        let (av, ag) = problem.loss_grad(&net)?;
                        v += w * av;
                        for (a, b) in g.iter_mut().zip(&ag) {
                            *a += w * b;
                        }
                    }
                }
                Ok((v, g))
            },
        )?;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, theta));
        }
    }
    let (loss, theta) = best.expect("at least one restart runs");
    Ok(FitResult {
        model_id: "arx-gru".into(),
        patient_id: record.id.clone(),
        n_train_cycles: split.n_train_cycles,
        fitted: FittedModel::Arx(GruNet::from_flat(hidden, &theta)?),
        train_loss: loss,
        iterations: config.arx_restarts.max(1)
            * (config.arx_pretrain_epochs + config.arx_finetune_epochs),
        converged: true,
    })
}

/// Daily log-count predictions of a fitted model from day 0 to `horizon`.
/// ARX forecasts feed back training observations (days before the split
/// boundary) and run closed loop beyond them.
pub fn predict_log(
    fit: &FitResult,
    record: &PatientRecord,
    split: &CycleSplit,
    horizon: i64,
) -> Result<Vec<f64>> {
    match &fit.fitted {
        FittedModel::Mech { model, params } => {
            let sim_horizon = horizon.max(record.schedule.last_event_day().unwrap_or(0));
            let traj = simulate(*model, params, &record.schedule, sim_horizon, None)?;
            traj.observable()
                .iter()
                .take(horizon as usize + 1)
                .enumerate()
                .map(|(d, &c)| {
                    if c > 0.0 {
                        Ok(c.ln())
                    } else {
                        Err(Error::Domain(format!("non-positive prediction on day {d}")))
                    }
                })
                .collect()
        }
        FittedModel::Ude(model) => {
            let traj = simulate_ude(model, &record.schedule, horizon, crate::ode::DEFAULT_STEP)?;
            traj.observable()
                .iter()
                .enumerate()
                .map(|(d, &c)| {
                    if c > 0.0 {
                        Ok(c.ln())
                    } else {
                        Err(Error::Domain(format!("non-positive prediction on day {d}")))
                    }
                })
                .collect()
        }
        FittedModel::Arx(net) => {
            let teacher: HashMap<i64, f64> = split
                .train_obs
                .iter()
                .map(|o| (o.day(), o.platelet_count.ln()))
                .collect();
            rollout_with_teacher(net, record, 0, horizon, &teacher)
        }
    }
}
