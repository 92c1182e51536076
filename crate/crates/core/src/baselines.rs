//! Reference and comparison gradient methods over a recorded trajectory.
//!
//! All of these replay a [`TrajectoryTape`] rather than re-running the
//! forward pass, so they see bit-identical states to the online engine.
//!
//! | method      | terms `dY_N/dP_n` kept     | parameters used for Jacobians |
//! |-------------|----------------------------|-------------------------------|
//! | naive       | `0 ..= N`                  | per-step snapshot `P_n`       |
//! | expanded    | `0 ..= N`                  | per-step snapshot `P_n`       |
//! | nth-order k | `N-k ..= N`                | per-step snapshot `P_n`       |
//! | truncated w | `N-w+1 ..= N`              | constant `P_N`                |
//!
//! `naive` accumulates each term through a backward row-vector sweep whose
//! cost is linear in `N`. `expanded` evaluates the chain-rule expansion
//! literally, recomputing each telescoping product from scratch on the
//! concatenated recurrent state (quadratic in `N`); the two only share the
//! cell Jacobians.

use std::fmt;
use std::str::FromStr;

use crate::cells::{Cell, CellJacobians};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::sensitivity::{self, OutputGradient};

#[derive(Debug, Clone, PartialEq)]
pub struct TapeStep {
    pub x: Vector,
    pub r_prev: Vec<Vector>,
    /// Parameters in force during this step's forward pass.
    pub p_snapshot: Vector,
    pub y: Vector,
    pub r: Vec<Vector>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryTape {
    pub steps: Vec<TapeStep>,
}

impl TrajectoryTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks that every step's previous state is the prior step's output.
    pub fn validate(&self) -> Result<()> {
        for (n, pair) in self.steps.windows(2).enumerate() {
            if pair[1].r_prev != pair[0].r {
                return Err(Error::InvalidArgument(format!(
                    "tape step {} does not continue from step {n}",
                    n + 1
                )));
            }
        }
        Ok(())
    }

    fn check_step(&self, at: usize) -> Result<()> {
        if at >= self.steps.len() {
            return Err(Error::StepOutOfRange {
                step: at,
                len: self.steps.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Fse,
    Naive,
    Expanded,
    Truncated,
    NthOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientMethod {
    pub kind: MethodKind,
    /// Truncation window or approximation order; unused by exact methods.
    pub window: usize,
}

impl GradientMethod {
    pub const FSE: Self = Self {
        kind: MethodKind::Fse,
        window: 0,
    };
    pub const NAIVE: Self = Self {
        kind: MethodKind::Naive,
        window: 0,
    };
    pub const EXPANDED: Self = Self {
        kind: MethodKind::Expanded,
        window: 0,
    };

    pub fn truncated(window: usize) -> Self {
        Self {
            kind: MethodKind::Truncated,
            window,
        }
    }

    pub fn nth_order(order: usize) -> Self {
        Self {
            kind: MethodKind::NthOrder,
            window: order,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(
            self.kind,
            MethodKind::Fse | MethodKind::Naive | MethodKind::Expanded
        )
    }
}

impl FromStr for GradientMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownName {
            kind: "method",
            token: s.to_string(),
        };
        match s.split_once(':') {
            None => match s {
                "fse" => Ok(Self::FSE),
                "naive" => Ok(Self::NAIVE),
                "expanded" => Ok(Self::EXPANDED),
                _ => Err(unknown()),
            },
            Some(("tbptt", k)) => {
                let k: usize = k.parse().map_err(|_| unknown())?;
                if k == 0 {
                    return Err(unknown());
                }
                Ok(Self::truncated(k))
            }
            Some(("nth", k)) => Ok(Self::nth_order(k.parse().map_err(|_| unknown())?)),
            Some(_) => Err(unknown()),
        }
    }
}

impl fmt::Display for GradientMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MethodKind::Fse => f.write_str("fse"),
            MethodKind::Naive => f.write_str("naive"),
            MethodKind::Expanded => f.write_str("expanded"),
            MethodKind::Truncated => write!(f, "tbptt:{}", self.window),
            MethodKind::NthOrder => write!(f, "nth:{}", self.window),
        }
    }
}

fn jacobians_at(
    cell: &dyn Cell,
    step: &TapeStep,
    params: Option<&[f64]>,
) -> Result<CellJacobians> {
    cell.jacobians(&step.x, &step.r_prev, params.unwrap_or(&step.p_snapshot))
}

/// Backward sweep: `dY_N/dP_N + Σ_{n=first}^{N-1} dY_N/dR_{N-1} (Π dR/dR) dR_n/dP_n`,
/// carrying the row-block adjoint `dY_N/dR^k_n` from `n = N-1` downwards.
fn backward_window(
    cell: &dyn Cell,
    tape: &TrajectoryTape,
    at: usize,
    first: usize,
    params: Option<&[f64]>,
) -> Result<Matrix> {
    let top = jacobians_at(cell, &tape.steps[at], params)?;
    let mut grad = top.dy_dp;
    let mut adjoint = top.dy_drprev;
    let k_loops = adjoint.len();
    for n in (first..at).rev() {
        let jac = jacobians_at(cell, &tape.steps[n], params)?;
        for (adj, dr_dp) in adjoint.iter().zip(&jac.dr_dp) {
            grad.add_assign(&adj.matmul(dr_dp)?)?;
        }
        if n > first {
            let mut next = Vec::with_capacity(k_loops);
            for l in 0..k_loops {
                let mut acc = adjoint[0].matmul(&jac.dr_drprev[0][l])?;
                for k in 1..k_loops {
                    acc.add_assign(&adjoint[k].matmul(&jac.dr_drprev[k][l])?)?;
                }
                next.push(acc);
            }
            adjoint = next;
        }
    }
    Ok(grad)
}

/// Fully unrolled BPTT: `dY_N/dP = Σ_{n=0}^{N} dY_N/dP_n`.
pub fn naive_bptt_gradient(
    cell: &dyn Cell,
    tape: &TrajectoryTape,
    at_step: usize,
) -> Result<OutputGradient> {
    tape.check_step(at_step)?;
    Ok(OutputGradient {
        dy_dp: backward_window(cell, tape, at_step, 0, None)?,
        step_index: at_step,
    })
}

/// Concatenated-state view of one step's Jacobians.
struct Stacked {
    dr_dp: Matrix,
    dr_drprev: Matrix,
    dy_dp: Matrix,
    dy_drprev: Matrix,
}

impl Stacked {
    fn from(jac: CellJacobians) -> Result<Self> {
        let rows: Vec<Matrix> = jac
            .dr_drprev
            .iter()
            .map(|row| Matrix::hstack(row))
            .collect::<Result<_>>()?;
        Ok(Self {
            dr_dp: Matrix::vstack(&jac.dr_dp)?,
            dr_drprev: Matrix::vstack(&rows)?,
            dy_dp: jac.dy_dp,
            dy_drprev: Matrix::hstack(&jac.dy_drprev)?,
        })
    }
}

/// The chain-rule expansion evaluated term by term:
///
/// ```text
/// dY_N/dP_N
///   + dY_N/dR_{N-1} · dR_{N-1}/dP_{N-1}
///   + Σ_{n=0}^{N-2} dY_N/dR_{N-1} · (Π_{k=n}^{N-2} dR_{k+1}/dR_k) · dR_n/dP_n
/// ```
///
/// Each product is rebuilt from scratch, left to right.
pub fn expanded_bptt_gradient(
    cell: &dyn Cell,
    tape: &TrajectoryTape,
    at_step: usize,
) -> Result<OutputGradient> {
    tape.check_step(at_step)?;
    let n_top = at_step;
    let jacs: Vec<Stacked> = tape.steps[..=n_top]
        .iter()
        .map(|s| Stacked::from(jacobians_at(cell, s, None)?))
        .collect::<Result<_>>()?;

    let mut grad = jacs[n_top].dy_dp.clone();
    if n_top >= 1 {
        let head = &jacs[n_top].dy_drprev;
        grad.add_assign(&head.matmul(&jacs[n_top - 1].dr_dp)?)?;
        for n in 0..n_top - 1 {
            let mut prod = head.clone();
            for k in (n..=n_top - 2).rev() {
                // dR_{k+1}/dR_k lives in step k+1's Jacobians.
                prod = prod.matmul(&jacs[k + 1].dr_drprev)?;
            }
            grad.add_assign(&prod.matmul(&jacs[n].dr_dp)?)?;
        }
    }
    Ok(OutputGradient {
        dy_dp: grad,
        step_index: at_step,
    })
}

/// Sliding-window truncated BPTT: only the last `window` steps contribute
/// (`n >= N - window + 1`), and every Jacobian in the window is evaluated at
/// the constant parameter snapshot `P_N`.
pub fn truncated_bptt_gradient(
    cell: &dyn Cell,
    tape: &TrajectoryTape,
    at_step: usize,
    window: usize,
) -> Result<OutputGradient> {
    if window == 0 {
        return Err(Error::InvalidArgument(
            "truncation window must be >= 1".into(),
        ));
    }
    tape.check_step(at_step)?;
    let first = (at_step + 1).saturating_sub(window);
    let p_const = tape.steps[at_step].p_snapshot.clone();
    Ok(OutputGradient {
        dy_dp: backward_window(cell, tape, at_step, first, Some(&p_const))?,
        step_index: at_step,
    })
}

/// Nth-order approximation: terms reaching back at most `order` steps
/// (`n >= N - order`), each with its own parameter snapshot. Order 0 keeps
/// only `dY_N/dP_N`.
pub fn nth_order_gradient(
    cell: &dyn Cell,
    tape: &TrajectoryTape,
    at_step: usize,
    order: usize,
) -> Result<OutputGradient> {
    tape.check_step(at_step)?;
    let first = at_step.saturating_sub(order);
    Ok(OutputGradient {
        dy_dp: backward_window(cell, tape, at_step, first, None)?,
        step_index: at_step,
    })
}

/// Replays the forward sensitivity recurrence over the tape and assembles
/// the output gradient at `at_step`.
pub fn fse_replay_gradient(
    cell: &dyn Cell,
    tape: &TrajectoryTape,
    at_step: usize,
) -> Result<OutputGradient> {
    tape.check_step(at_step)?;
    let mut state = sensitivity::init_state(cell.signature());
    for step in &tape.steps[..at_step] {
        let jac = jacobians_at(cell, step, None)?;
        state = sensitivity::fse_step_multi(&state, &jac)?;
    }
    let jac = jacobians_at(cell, &tape.steps[at_step], None)?;
    sensitivity::assemble_output_gradient(&state, &jac)
}

/// Dispatches on `method`, replaying from the tape.
pub fn gradient(
    cell: &dyn Cell,
    tape: &TrajectoryTape,
    at_step: usize,
    method: GradientMethod,
) -> Result<OutputGradient> {
    match method.kind {
        MethodKind::Fse => fse_replay_gradient(cell, tape, at_step),
        MethodKind::Naive => naive_bptt_gradient(cell, tape, at_step),
        MethodKind::Expanded => expanded_bptt_gradient(cell, tape, at_step),
        MethodKind::Truncated => truncated_bptt_gradient(cell, tape, at_step, method.window),
        MethodKind::NthOrder => nth_order_gradient(cell, tape, at_step, method.window),
    }
}

/// Records a frozen-parameter trajectory of `cell` over `inputs`.
pub fn record_tape(
    cell: &dyn Cell,
    params: &[f64],
    initial_state: Vec<Vector>,
    inputs: &[Vector],
) -> Result<TrajectoryTape> {
    let mut r = initial_state;
    let mut steps = Vec::with_capacity(inputs.len());
    for x in inputs {
        let s = cell.step(x, &r, params)?;
        steps.push(TapeStep {
            x: x.clone(),
            r_prev: std::mem::replace(&mut r, s.recurred.clone()),
            p_snapshot: params.to_vec(),
            y: s.output,
            r: s.recurred,
        });
    }
    Ok(TrajectoryTape { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{build_cell, ScalarLinear};
    use crate::linalg::max_rel_err;
    use crate::tasks::SplitMix64;

    fn scalar_tape(steps: usize) -> TrajectoryTape {
        record_tape(&ScalarLinear::new(), &[0.5, 1.0], vec![vec![1.0]], &vec![vec![0.0]; steps])
            .unwrap()
    }

    fn random_tape(cell: &dyn Cell, seed: u64, steps: usize) -> TrajectoryTape {
        let mut rng = SplitMix64::new(seed);
        let p = cell.init_params(&mut rng);
        let sig = cell.signature();
        let inputs: Vec<Vector> = (0..steps)
            .map(|_| (0..sig.input_dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        record_tape(cell, &p, sig.zero_state(), &inputs).unwrap()
    }

    #[test]
    fn method_names() {
        for s in ["fse", "naive", "expanded", "tbptt:5", "nth:0", "nth:3"] {
            assert_eq!(s.parse::<GradientMethod>().unwrap().to_string(), s);
        }
        for s in ["tbptt:0", "tbptt", "nth:x", "bogus", "fse:1"] {
            let e = s.parse::<GradientMethod>().unwrap_err();
            assert!(e.to_string().contains(s));
        }
    }

    #[test]
    fn closed_form_scalar() {
        let cell = ScalarLinear::new();
        let tape = scalar_tape(2);
        tape.validate().unwrap();
        let want = Matrix::from_rows(&[&[1.0, 0.0]]);
        assert_eq!(naive_bptt_gradient(&cell, &tape, 1).unwrap().dy_dp, want);
        assert_eq!(expanded_bptt_gradient(&cell, &tape, 1).unwrap().dy_dp, want);
        assert_eq!(fse_replay_gradient(&cell, &tape, 1).unwrap().dy_dp, want);
        // N = 0: first term only
        let g0 = naive_bptt_gradient(&cell, &tape, 0).unwrap().dy_dp;
        assert_eq!(g0, Matrix::from_rows(&[&[1.0, 0.0]]));
        assert_eq!(expanded_bptt_gradient(&cell, &tape, 0).unwrap().dy_dp, g0);
        assert_eq!(nth_order_gradient(&cell, &tape, 0, 0).unwrap().dy_dp, g0);
    }

    #[test]
    fn out_of_range() {
        let cell = ScalarLinear::new();
        let tape = scalar_tape(3);
        for m in ["fse", "naive", "expanded", "tbptt:2", "nth:1"] {
            let err = gradient(&cell, &tape, 3, m.parse().unwrap()).unwrap_err();
            assert_eq!(err, Error::StepOutOfRange { step: 3, len: 3 });
        }
        assert!(truncated_bptt_gradient(&cell, &tape, 1, 0).is_err());
    }

    #[test]
    fn expanded_n1_is_two_terms() {
        let cell = build_cell("vanilla-tanh", 2, &[3], 2).unwrap();
        let tape = random_tape(cell.as_ref(), 4, 2);
        let j1 = cell.jacobians(&tape.steps[1].x, &tape.steps[1].r_prev, &tape.steps[1].p_snapshot).unwrap();
        let j0 = cell.jacobians(&tape.steps[0].x, &tape.steps[0].r_prev, &tape.steps[0].p_snapshot).unwrap();
        let want = j1.dy_dp.add(&j1.dy_drprev[0].matmul(&j0.dr_dp[0]).unwrap()).unwrap();
        assert_eq!(expanded_bptt_gradient(cell.as_ref(), &tape, 1).unwrap().dy_dp, want);
    }

    #[test]
    fn exact_methods_agree() {
        for name in ["vanilla-tanh", "two-loop-gated"] {
            let cell = build_cell(name, 2, &[3], 2).unwrap();
            let tape = random_tape(cell.as_ref(), 12, 12);
            for at in [0, 1, 5, 11] {
                let naive = naive_bptt_gradient(cell.as_ref(), &tape, at).unwrap().dy_dp;
                let exp = expanded_bptt_gradient(cell.as_ref(), &tape, at).unwrap().dy_dp;
                let fse = fse_replay_gradient(cell.as_ref(), &tape, at).unwrap().dy_dp;
                assert!(max_rel_err(&naive, &exp, 1e-10).unwrap() <= 1e-12, "{name}");
                assert!(max_rel_err(&naive, &fse, 1e-10).unwrap() <= 1e-10, "{name}");
            }
        }
    }

    #[test]
    fn wide_windows_recover_exact_gradient() {
        let cell = build_cell("two-loop-gated", 1, &[2], 1).unwrap();
        let tape = random_tape(cell.as_ref(), 3, 8);
        let at = 7;
        let exact = naive_bptt_gradient(cell.as_ref(), &tape, at).unwrap().dy_dp;
        let tb = truncated_bptt_gradient(cell.as_ref(), &tape, at, at + 1).unwrap().dy_dp;
        let tb_more = truncated_bptt_gradient(cell.as_ref(), &tape, at, at + 10).unwrap().dy_dp;
        let nth = nth_order_gradient(cell.as_ref(), &tape, at, at).unwrap().dy_dp;
        assert!(max_rel_err(&exact, &tb, 1e-10).unwrap() <= 1e-12);
        assert_eq!(tb, tb_more);
        assert!(max_rel_err(&exact, &nth, 1e-10).unwrap() <= 1e-12);
    }

    #[test]
    fn window_w_equals_order_w_minus_one_when_frozen() {
        let cell = build_cell("vanilla-tanh", 1, &[3], 1).unwrap();
        let tape = random_tape(cell.as_ref(), 8, 10);
        for w in 1..=6 {
            let tb = truncated_bptt_gradient(cell.as_ref(), &tape, 9, w).unwrap().dy_dp;
            let nth = nth_order_gradient(cell.as_ref(), &tape, 9, w - 1).unwrap().dy_dp;
            assert_eq!(tb, nth, "window {w}");
        }
    }

    #[test]
    fn truncation_uses_constant_parameters() {
        let cell = build_cell("vanilla-tanh", 1, &[2], 1).unwrap();
        let mut tape = random_tape(cell.as_ref(), 5, 4);
        let p_last = tape.steps[3].p_snapshot.clone();
        for s in &mut tape.steps[..3] {
            s.p_snapshot.iter_mut().for_each(|v| *v *= 0.5);
        }
        let tb = truncated_bptt_gradient(cell.as_ref(), &tape, 3, 4).unwrap().dy_dp;
        let exact = naive_bptt_gradient(cell.as_ref(), &tape, 3).unwrap().dy_dp;
        assert!(max_rel_err(&tb, &exact, 1e-10).unwrap() > 1e-6);

        let mut frozen = tape.clone();
        frozen.steps.iter_mut().for_each(|s| s.p_snapshot = p_last.clone());
        assert_eq!(tb, naive_bptt_gradient(cell.as_ref(), &frozen, 3).unwrap().dy_dp);
        // order N keeps the per-step snapshots
        assert_eq!(nth_order_gradient(cell.as_ref(), &tape, 3, 3).unwrap().dy_dp, exact);
    }

    #[test]
    fn tape_continuity() {
        let mut tape = scalar_tape(3);
        tape.steps[2].r_prev = vec![vec![9.0]];
        assert!(tape.validate().is_err());
    }
}
