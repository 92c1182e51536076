//! Forward sensitivity propagation.
//!
//! The carried state is `Δ^k_N = dR^k_N/dP`, one `|R^k| x |P|` block per
//! recurrent loop. Each step advances it with
//!
//! ```text
//! Δ^k_N = dR^k_N/dP_N + Σ_l (dR^k_N/dR^l_{N-1}) · (a · Δ^l_{N-1})
//! ```
//!
//! where `a` is the attenuation (1 for the exact method), and the output
//! gradient at step `N` is assembled from the *previous* carry:
//!
//! ```text
//! dY_N/dP = dY_N/dP_N + Σ_k (dY_N/dR^k_{N-1}) · Δ^k_{N-1}
//! ```
//!
//! Cost per step is independent of `N`; nothing older than `Δ_{N-1}` and
//! `R_{N-1}` is kept.
//!
//! `R_{-1}` is a constant independent of `P`, so `Δ_{-1} = 0`.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::baselines::{TapeStep, TrajectoryTape};
use crate::cells::{Cell, CellJacobians, CellSignature};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    pub deltas: Vec<Matrix>,
    pub step_index: usize,
    pub attenuation: f64,
}

impl SensitivityState {
    pub fn with_attenuation(mut self, attenuation: f64) -> Result<Self> {
        check_attenuation(attenuation)?;
        self.attenuation = attenuation;
        Ok(self)
    }

    /// Results are exact only without attenuation.
    pub fn is_exact(&self) -> bool {
        self.attenuation == 1.0
    }

    /// Frobenius norm of the stacked blocks.
    pub fn frobenius_norm(&self) -> f64 {
        self.deltas
            .iter()
            .map(|d| d.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.deltas.iter().all(Matrix::is_finite)
    }

    pub fn stacked(&self) -> Matrix {
        Matrix::vstack(&self.deltas).expect("blocks share the parameter width")
    }
}

fn check_attenuation(a: f64) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "attenuation must lie in (0, 1], got {a}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradient {
    pub dy_dp: Matrix,
    pub step_index: usize,
}

pub fn init_state(sig: &CellSignature) -> SensitivityState {
    SensitivityState {
        deltas: sig
            .loop_dims
            .iter()
            .map(|&d| Matrix::zeros(d, sig.param_dim))
            .collect(),
        step_index: 0,
        attenuation: 1.0,
    }
}

fn check_carry(state: &SensitivityState, jac: &CellJacobians) -> Result<()> {
    if state.deltas.len() != jac.loops() {
        return Err(Error::length(
            "sensitivity blocks",
            jac.loops(),
            state.deltas.len(),
        ));
    }
    for (k, d) in state.deltas.iter().enumerate() {
        if d.shape() != jac.dr_dp[k].shape() {
            return Err(Error::ShapeMismatch {
                op: "sensitivity block",
                left: jac.dr_dp[k].shape(),
                right: d.shape(),
            });
        }
    }
    Ok(())
}

fn carried(state: &SensitivityState, k: usize) -> std::borrow::Cow<'_, Matrix> {
    if state.attenuation == 1.0 {
        std::borrow::Cow::Borrowed(&state.deltas[k])
    } else {
        std::borrow::Cow::Owned(state.deltas[k].scale(state.attenuation))
    }
}

/// Single-loop step: `Δ_N = dR_N/dP_N + (dR_N/dR_{N-1}) · (a · Δ_{N-1})`.
pub fn fse_step(state: &SensitivityState, jac: &CellJacobians) -> Result<SensitivityState> {
    if jac.loops() != 1 || state.deltas.len() != 1 {
        return Err(Error::MultiLoop {
            loops: jac.loops().max(state.deltas.len()),
        });
    }
    check_carry(state, jac)?;
    let carry = jac.dr_drprev[0][0].matmul(&carried(state, 0))?;
    let delta = jac.dr_dp[0].add(&carry)?;
    Ok(SensitivityState {
        deltas: vec![delta],
        step_index: state.step_index + 1,
        attenuation: state.attenuation,
    })
}

/// Multi-loop step, cross terms included:
/// `Δ^k_N = dR^k_N/dP_N + Σ_l (dR^k_N/dR^l_{N-1}) · (a · Δ^l_{N-1})`.
///
/// Every cross block is evaluated; none are assumed to vanish.
pub fn fse_step_multi(state: &SensitivityState, jac: &CellJacobians) -> Result<SensitivityState> {
    check_carry(state, jac)?;
    let k_loops = jac.loops();
    if jac.dr_drprev.len() != k_loops || jac.dr_drprev.iter().any(|row| row.len() != k_loops) {
        return Err(Error::length("dR/dRprev grid", k_loops, jac.dr_drprev.len()));
    }
    let carries: Vec<_> = (0..k_loops).map(|l| carried(state, l)).collect();
    let mut deltas = Vec::with_capacity(k_loops);
    for k in 0..k_loops {
        let mut acc = jac.dr_dp[k].clone();
        for (l, carry) in carries.iter().enumerate() {
            acc.add_assign(&jac.dr_drprev[k][l].matmul(carry)?)?;
        }
        deltas.push(acc);
    }
    Ok(SensitivityState {
        deltas,
        step_index: state.step_index + 1,
        attenuation: state.attenuation,
    })
}

/// `dY_N/dP = dY_N/dP_N + Σ_k (dY_N/dR^k_{N-1}) · Δ^k_{N-1}`, with `state`
/// still holding `Δ_{N-1}`.
pub fn assemble_output_gradient(
    state: &SensitivityState,
    jac: &CellJacobians,
) -> Result<OutputGradient> {
    check_carry(state, jac)?;
    let mut dy_dp = jac.dy_dp.clone();
    for (k, delta) in state.deltas.iter().enumerate() {
        dy_dp.add_assign(&jac.dy_drprev[k].matmul(delta)?)?;
    }
    Ok(OutputGradient {
        dy_dp,
        step_index: state.step_index,
    })
}

/// `P - eta * (dC/dY)^T · dY/dP`.
pub fn sgd_update(p: &[f64], dc_dy: &[f64], grad: &OutputGradient, eta: f64) -> Result<Vector> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {eta}"
        )));
    }
    if p.len() != grad.dy_dp.cols() {
        return Err(Error::length("parameter vector", grad.dy_dp.cols(), p.len()));
    }
    let g = grad.dy_dp.vec_mul(dc_dy)?;
    Ok(p.iter().zip(&g).map(|(p, g)| p - eta * g).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    /// `C = ½‖Y − T‖²`
    #[default]
    SquaredError,
    /// `C = Σ|Y − T|`, subgradient 0 at a tie.
    AbsoluteError,
}

impl LossSpec {
    /// Returns `(C, dC/dY)`.
    pub fn eval(&self, y: &[f64], target: &[f64]) -> Result<(f64, Vector)> {
        if y.len() != target.len() {
            return Err(Error::length("loss target", y.len(), target.len()));
        }
        let diff = y.iter().zip(target).map(|(y, t)| y - t);
        Ok(match self {
            LossSpec::SquaredError => {
                let d: Vector = diff.collect();
                (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
            }
            LossSpec::AbsoluteError => {
                let d: Vector = diff.collect();
                let grad = d
                    .iter()
                    .map(|v| if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                (d.iter().map(|v| v.abs()).sum(), grad)
            }
        })
    }
}

/// One row of a run log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_rel_err_vs_oracle: Option<f64>,
    pub delta_frobenius: f64,
    pub per_step_micros: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub step: usize,
    pub what: &'static str,
}

#[derive(Debug, Clone)]
pub struct OnlineConfig {
    pub loss: LossSpec,
    pub eta: f64,
    pub update_params: bool,
    pub attenuation: f64,
    pub record_tape: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::SquaredError,
            eta: 0.0,
            update_params: false,
            attenuation: 1.0,
            record_tape: true,
        }
    }
}

/// Everything one engine step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub step: usize,
    pub output: Vector,
    pub loss: f64,
    pub dc_dy: Vector,
    pub gradient: OutputGradient,
    /// Parameters in force during this step's forward pass.
    pub params_used: Vector,
    pub jacobians: CellJacobians,
    pub delta_frobenius: f64,
    pub micros: f64,
    pub divergence: Option<Divergence>,
}

/// Online training state machine driven one `(x, target)` pair at a time.
///
/// Per step `N`: forward with `P_N`, Jacobians at `(x_N, R_{N-1}, P_N)`,
/// output gradient from `Δ_{N-1}`, loss, `Δ_N`, then (optionally) the SGD
/// update producing `P_{N+1}`. The update never touches step `N`'s
/// Jacobians; it takes effect from step `N+1`.
pub struct OnlineEngine {
    cell: Arc<dyn Cell>,
    params: Vector,
    recurred: Vec<Vector>,
    state: SensitivityState,
    config: OnlineConfig,
    tape: TrajectoryTape,
    loss_gradient: Vector,
}

impl OnlineEngine {
    pub fn new(
        cell: Arc<dyn Cell>,
        params: Vector,
        initial_state: Vec<Vector>,
        config: OnlineConfig,
    ) -> Result<Self> {
        let sig = cell.signature().clone();
        if params.len() != sig.param_dim {
            return Err(Error::length("initial parameters", sig.param_dim, params.len()));
        }
        if initial_state.len() != sig.loops()
            || initial_state.iter().zip(&sig.loop_dims).any(|(r, &d)| r.len() != d)
        {
            return Err(Error::InvalidArgument(format!(
                "initial recurred state must have loop widths {:?}",
                sig.loop_dims
            )));
        }
        if !(config.eta >= 0.0) || !config.eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                config.eta
            )));
        }
        let state = init_state(&sig).with_attenuation(config.attenuation)?;
        Ok(Self {
            loss_gradient: vec![0.0; sig.param_dim],
            cell,
            params,
            recurred: initial_state,
            state,
            config,
            tape: TrajectoryTape::default(),
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn state(&self) -> &SensitivityState {
        &self.state
    }

    pub fn recurred(&self) -> &[Vector] {
        &self.recurred
    }

    pub fn tape(&self) -> &TrajectoryTape {
        &self.tape
    }

    pub fn into_tape(self) -> TrajectoryTape {
        self.tape
    }

    pub fn cell(&self) -> &Arc<dyn Cell> {
        &self.cell
    }

    /// Sum over processed steps of `(dC_N/dY_N) · dY_N/dP`.
    pub fn loss_gradient(&self) -> &[f64] {
        &self.loss_gradient
    }

    pub fn step(&mut self, x: &[f64], target: &[f64]) -> Result<StepOutcome> {
        let started = Instant::now();
        let n = self.state.step_index;
        let fwd = self.cell.step(x, &self.recurred, &self.params)?;
        let jac = self.cell.jacobians_unchecked(x, &self.recurred, &self.params);
        let gradient = assemble_output_gradient(&self.state, &jac)?;
        let (loss, dc_dy) = self.config.loss.eval(&fwd.output, target)?;
        let next = if jac.loops() == 1 {
            fse_step(&self.state, &jac)?
        } else {
            fse_step_multi(&self.state, &jac)?
        };
        let params_used = if self.config.update_params {
            let updated = sgd_update(&self.params, &dc_dy, &gradient, self.config.eta)?;
            std::mem::replace(&mut self.params, updated)
        } else {
            self.params.clone()
        };
        let micros = started.elapsed().as_secs_f64() * 1e6;

        let g = gradient.dy_dp.vec_mul(&dc_dy)?;
        for (acc, v) in self.loss_gradient.iter_mut().zip(&g) {
            *acc += v;
        }
        if self.config.record_tape {
            self.tape.steps.push(TapeStep {
                x: x.to_vec(),
                r_prev: self.recurred.clone(),
                p_snapshot: params_used.clone(),
                y: fwd.output.clone(),
                r: fwd.recurred.clone(),
            });
        }
        let delta_frobenius = next.frobenius_norm();
        let divergence = if !loss.is_finite() {
            Some(Divergence { step: n, what: "non-finite loss" })
        } else if !next.is_finite() {
            Some(Divergence { step: n, what: "non-finite sensitivity" })
        } else if !self.params.iter().all(|v| v.is_finite()) {
            Some(Divergence { step: n, what: "non-finite parameters" })
        } else {
            None
        };
        self.recurred = fwd.recurred;
        self.state = next;
        Ok(StepOutcome {
            step: n,
            output: fwd.output,
            loss,
            dc_dy,
            gradient,
            params_used,
            jacobians: jac,
            delta_frobenius,
            micros,
            divergence,
        })
    }
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub records: Vec<StepRecord>,
    pub gradients: Vec<OutputGradient>,
    pub loss_gradient: Vector,
    pub params: Vector,
    pub state: SensitivityState,
    pub tape: TrajectoryTape,
    pub divergence: Option<Divergence>,
}

/// Runs the engine over a whole sequence, stopping at the first non-finite
/// loss, sensitivity or parameter (the offending step is still recorded).
pub fn run_online(
    cell: Arc<dyn Cell>,
    params: Vector,
    initial_state: Vec<Vector>,
    inputs: &[Vector],
    targets: &[Vector],
    config: OnlineConfig,
) -> Result<OnlineRun> {
    if inputs.len() != targets.len() {
        return Err(Error::length("targets", inputs.len(), targets.len()));
    }
    let mut engine = OnlineEngine::new(cell, params, initial_state, config)?;
    let mut records = Vec::with_capacity(inputs.len());
    let mut gradients = Vec::with_capacity(inputs.len());
    let mut divergence = None;
    for (x, t) in inputs.iter().zip(targets) {
        let out = engine.step(x, t)?;
        records.push(StepRecord {
            step: out.step,
            loss: out.loss,
            grad_rel_err_vs_oracle: None,
            delta_frobenius: out.delta_frobenius,
            per_step_micros: out.micros,
        });
        gradients.push(out.gradient);
        if out.divergence.is_some() {
            divergence = out.divergence;
            break;
        }
    }
    Ok(OnlineRun {
        records,
        gradients,
        loss_gradient: engine.loss_gradient.clone(),
        params: engine.params.clone(),
        state: engine.state.clone(),
        tape: engine.tape,
        divergence,
    })
}
