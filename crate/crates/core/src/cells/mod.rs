//! Recurrent cells: `(x_N, R_{N-1}, P_N) -> (Y_N, R_N)`.
//!
//! A cell may carry several recurrent loops `R^1..R^K`. Besides the forward
//! step, each cell reports the four Jacobian families the sensitivity
//! recurrence consumes, evaluated at the same point as the step:
//!
//! * `dR^k/dP`         one `|R^k| x |P|` block per loop
//! * `dR^k/dR^l_prev`  a `K x K` grid of `|R^k| x |R^l|` blocks
//! * `dY/dP`           `|Y| x |P|`
//! * `dY/dR^k_prev`    one `|Y| x |R^k|` block per loop
//!
//! All derivatives are partial with respect to *this step's* parameters and
//! previous state, so the carried sensitivity supplies the history.

mod concat;
mod delay_line;
mod gated;
mod scalar_linear;
mod vanilla_tanh;

use std::sync::Arc;

use serde::Serialize;

pub use concat::ConcatView;
pub use delay_line::DelayLine;
pub use gated::{GatedParams, TwoLoopGated};
pub use scalar_linear::ScalarLinear;
pub use vanilla_tanh::{TanhParams, VanillaTanh};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::tasks::SplitMix64;

/// Relative-error floor for comparing analytic Jacobians with
/// [`fd_jacobians`] at [`FD_JACOBIAN_STEP`]. Central-difference roundoff is
/// about `eps * |f| / h ~ 1e-10` in absolute terms, so entries smaller than
/// `1e-10 / 1e-5` cannot be resolved to `1e-5` relative; below that the
/// comparison is effectively absolute.
pub const FD_JACOBIAN_FLOOR: f64 = 1e-5;

/// Default central-difference step for Jacobian checks.
pub const FD_JACOBIAN_STEP: f64 = 1e-6;
/// Default central-difference step for loss-level checks.
pub const FD_LOSS_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellSignature {
    pub input_dim: usize,
    pub output_dim: usize,
    pub param_dim: usize,
    pub loop_dims: Vec<usize>,
}

impl CellSignature {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        param_dim: usize,
        loop_dims: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || param_dim == 0 {
            return Err(Error::InvalidArgument(
                "cell dimensions must all be >= 1".into(),
            ));
        }
        if loop_dims.is_empty() || loop_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "a cell needs at least one recurrent loop of width >= 1".into(),
            ));
        }
        Ok(Self {
            input_dim,
            output_dim,
            param_dim,
            loop_dims,
        })
    }

    pub fn loops(&self) -> usize {
        self.loop_dims.len()
    }

    pub fn state_dim(&self) -> usize {
        self.loop_dims.iter().sum()
    }

    pub fn zero_state(&self) -> Vec<Vector> {
        self.loop_dims.iter().map(|&d| vec![0.0; d]).collect()
    }

    fn check_inputs(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::length("cell input", self.input_dim, x.len()));
        }
        if p.len() != self.param_dim {
            return Err(Error::length("cell parameters", self.param_dim, p.len()));
        }
        if r_prev.len() != self.loops() {
            return Err(Error::length("recurrent loops", self.loops(), r_prev.len()));
        }
        for (k, (r, &d)) in r_prev.iter().zip(&self.loop_dims).enumerate() {
            if r.len() != d {
                return Err(Error::length(format!("recurrent state of loop {k}"), d, r.len()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStep {
    pub output: Vector,
    pub recurred: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellJacobians {
    pub dr_dp: Vec<Matrix>,
    /// `dr_drprev[k][l]` is `dR^k_N / dR^l_{N-1}`.
    pub dr_drprev: Vec<Vec<Matrix>>,
    pub dy_dp: Matrix,
    pub dy_drprev: Vec<Matrix>,
}

impl CellJacobians {
    pub fn zeros(sig: &CellSignature) -> Self {
        let p = sig.param_dim;
        Self {
            dr_dp: sig.loop_dims.iter().map(|&d| Matrix::zeros(d, p)).collect(),
            dr_drprev: sig
                .loop_dims
                .iter()
                .map(|&dk| sig.loop_dims.iter().map(|&dl| Matrix::zeros(dk, dl)).collect())
                .collect(),
            dy_dp: Matrix::zeros(sig.output_dim, p),
            dy_drprev: sig
                .loop_dims
                .iter()
                .map(|&d| Matrix::zeros(sig.output_dim, d))
                .collect(),
        }
    }

    pub fn loops(&self) -> usize {
        self.dr_dp.len()
    }

    /// Checks every block against the signature.
    pub fn check_shapes(&self, sig: &CellSignature) -> Result<()> {
        let k = sig.loops();
        let p = sig.param_dim;
        let expect = |m: &Matrix, shape: (usize, usize), what: &'static str| {
            if m.shape() != shape {
                Err(Error::ShapeMismatch {
                    op: what,
                    left: shape,
                    right: m.shape(),
                })
            } else {
                Ok(())
            }
        };
        if self.dr_dp.len() != k || self.dr_drprev.len() != k || self.dy_drprev.len() != k {
            return Err(Error::length("jacobian loop blocks", k, self.dr_dp.len()));
        }
        expect(&self.dy_dp, (sig.output_dim, p), "dY/dP")?;
        for (a, &da) in sig.loop_dims.iter().enumerate() {
            expect(&self.dr_dp[a], (da, p), "dR/dP")?;
            expect(&self.dy_drprev[a], (sig.output_dim, da), "dY/dRprev")?;
            if self.dr_drprev[a].len() != k {
                return Err(Error::length("dR/dRprev row", k, self.dr_drprev[a].len()));
            }
            for (b, &db) in sig.loop_dims.iter().enumerate() {
                expect(&self.dr_drprev[a][b], (da, db), "dR/dRprev")?;
            }
        }
        Ok(())
    }
}

/// A parameterized recurrent step function with analytic Jacobians.
///
/// Implementors provide the unchecked kernels; callers go through
/// [`Cell::step`] and [`Cell::jacobians`], which validate dimensions first.
pub trait Cell: Send + Sync {
    fn name(&self) -> &str;

    fn signature(&self) -> &CellSignature;

    fn step_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellStep;

    fn jacobians_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellJacobians;

    /// Draws a parameter vector deterministically from `rng`.
    fn init_params(&self, rng: &mut SplitMix64) -> Vector;

    fn step(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> Result<CellStep> {
        self.signature().check_inputs(x, r_prev, p)?;
        Ok(self.step_unchecked(x, r_prev, p))
    }

    fn jacobians(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> Result<CellJacobians> {
        self.signature().check_inputs(x, r_prev, p)?;
        Ok(self.jacobians_unchecked(x, r_prev, p))
    }
}

/// Central-difference estimate of every Jacobian block, perturbing each
/// parameter and each coordinate of each previous recurred state by `±h`.
pub fn fd_jacobians(
    cell: &dyn Cell,
    x: &[f64],
    r_prev: &[Vector],
    p: &[f64],
    h: f64,
) -> Result<CellJacobians> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let sig = cell.signature();
    sig.check_inputs(x, r_prev, p)?;
    let mut jac = CellJacobians::zeros(sig);
    let inv = 1.0 / (2.0 * h);

    let mut pp = p.to_vec();
    for j in 0..sig.param_dim {
        let orig = pp[j];
        pp[j] = orig + h;
        let plus = cell.step_unchecked(x, r_prev, &pp);
        pp[j] = orig - h;
        let minus = cell.step_unchecked(x, r_prev, &pp);
        pp[j] = orig;
        for (k, block) in jac.dr_dp.iter_mut().enumerate() {
            for i in 0..block.rows() {
                block.set(i, j, (plus.recurred[k][i] - minus.recurred[k][i]) * inv);
            }
        }
        for i in 0..sig.output_dim {
            jac.dy_dp.set(i, j, (plus.output[i] - minus.output[i]) * inv);
        }
    }

    let mut rp: Vec<Vector> = r_prev.to_vec();
    for l in 0..sig.loops() {
        for j in 0..sig.loop_dims[l] {
            let orig = rp[l][j];
            rp[l][j] = orig + h;
            let plus = cell.step_unchecked(x, &rp, p);
            rp[l][j] = orig - h;
            let minus = cell.step_unchecked(x, &rp, p);
            rp[l][j] = orig;
            for k in 0..sig.loops() {
                let block = &mut jac.dr_drprev[k][l];
                for i in 0..block.rows() {
                    block.set(i, j, (plus.recurred[k][i] - minus.recurred[k][i]) * inv);
                }
            }
            for i in 0..sig.output_dim {
                jac.dy_drprev[l].set(i, j, (plus.output[i] - minus.output[i]) * inv);
            }
        }
    }
    Ok(jac)
}

/// Names accepted by [`build_cell`].
pub const CELL_NAMES: [&str; 4] = ["scalar-linear", "vanilla-tanh", "two-loop-gated", "delay-line"];

/// Builds a built-in cell by name.
///
/// `hidden` lists loop widths: vanilla-tanh takes one, two-loop-gated one or
/// two equal widths, delay-line one (the delay). scalar-linear is fixed at
/// width 1 and requires all dims to be 1.
pub fn build_cell(
    name: &str,
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
) -> Result<Arc<dyn Cell>> {
    let bad = |msg: String| Error::InvalidArgument(format!("{name}: {msg}"));
    let one_width = || -> Result<usize> {
        match hidden {
            [h] => Ok(*h),
            _ => Err(bad(format!("expects one hidden width, got {hidden:?}"))),
        }
    };
    match name {
        "scalar-linear" => {
            if input_dim != 1 || output_dim != 1 || hidden != [1] {
                return Err(bad("dims must be 1,1,1".into()));
            }
            Ok(Arc::new(ScalarLinear::new()))
        }
        "vanilla-tanh" => Ok(Arc::new(VanillaTanh::new(input_dim, one_width()?, output_dim)?)),
        "two-loop-gated" => {
            let h = match hidden {
                [h] => *h,
                [h, c] if h == c => *h,
                _ => {
                    return Err(bad(format!(
                        "loop widths must be equal (elementwise gating), got {hidden:?}"
                    )))
                }
            };
            Ok(Arc::new(TwoLoopGated::new(input_dim, h, output_dim)?))
        }
        "delay-line" => {
            if output_dim != input_dim {
                return Err(bad("output dim must equal input dim".into()));
            }
            Ok(Arc::new(DelayLine::new(input_dim, one_width()?)?))
        }
        _ => Err(Error::UnknownName {
            kind: "cell",
            token: name.to_string(),
        }),
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
pub(crate) mod test_cells {
    //! Tiny cells used only to pin down the finite-difference machinery.
    use super::*;

    /// `r = p^2`, `y = r`.
    pub struct Quadratic(pub CellSignature);

    impl Quadratic {
        pub fn new() -> Self {
            Self(CellSignature::new(1, 1, 1, vec![1]).unwrap())
        }
    }

    impl Cell for Quadratic {
        fn name(&self) -> &str {
            "quadratic"
        }
        fn signature(&self) -> &CellSignature {
            &self.0
        }
        fn step_unchecked(&self, _x: &[f64], _r: &[Vector], p: &[f64]) -> CellStep {
            CellStep {
                output: vec![p[0] * p[0]],
                recurred: vec![vec![p[0] * p[0]]],
            }
        }
        fn jacobians_unchecked(&self, _x: &[f64], _r: &[Vector], p: &[f64]) -> CellJacobians {
            let mut j = CellJacobians::zeros(&self.0);
            j.dr_dp[0].set(0, 0, 2.0 * p[0]);
            j.dy_dp.set(0, 0, 2.0 * p[0]);
            j
        }
        fn init_params(&self, rng: &mut SplitMix64) -> Vector {
            vec![rng.uniform(-1.0, 1.0)]
        }
    }

    /// `r_n = r_{n-1}`, `y = r`; the single parameter is ignored.
    pub struct Identity(pub CellSignature);

    impl Identity {
        pub fn new(width: usize) -> Self {
            Self(CellSignature::new(1, width, 1, vec![width]).unwrap())
        }
    }

    impl Cell for Identity {
        fn name(&self) -> &str {
            "identity"
        }
        fn signature(&self) -> &CellSignature {
            &self.0
        }
        fn step_unchecked(&self, _x: &[f64], r: &[Vector], _p: &[f64]) -> CellStep {
            CellStep {
                output: r[0].clone(),
                recurred: r.to_vec(),
            }
        }
        fn jacobians_unchecked(&self, _x: &[f64], _r: &[Vector], _p: &[f64]) -> CellJacobians {
            let mut j = CellJacobians::zeros(&self.0);
            j.dr_drprev[0][0] = Matrix::identity(self.0.loop_dims[0]);
            j.dy_drprev[0] = Matrix::identity(self.0.loop_dims[0]);
            j
        }
        fn init_params(&self, _rng: &mut SplitMix64) -> Vector {
            vec![0.0]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_cells::*;
    use super::*;
    use crate::linalg::max_rel_err;

    pub(crate) fn max_jac_err(a: &CellJacobians, b: &CellJacobians, floor: f64) -> f64 {
        let mut worst = max_rel_err(&a.dy_dp, &b.dy_dp, floor).unwrap();
        for k in 0..a.loops() {
            worst = worst.max(max_rel_err(&a.dr_dp[k], &b.dr_dp[k], floor).unwrap());
            worst = worst.max(max_rel_err(&a.dy_drprev[k], &b.dy_drprev[k], floor).unwrap());
            for l in 0..a.loops() {
                worst = worst
                    .max(max_rel_err(&a.dr_drprev[k][l], &b.dr_drprev[k][l], floor).unwrap());
            }
        }
        worst
    }

    #[test]
    fn quadratic_fd() {
        let cell = Quadratic::new();
        let j = fd_jacobians(&cell, &[0.0], &[vec![0.0]], &[3.0], 1e-4).unwrap();
        assert!((j.dr_dp[0].get(0, 0) - 6.0).abs() <= 1e-7);
    }

    #[test]
    fn identity_fd() {
        let cell = Identity::new(3);
        let r = vec![vec![0.3, -1.0, 2.0]];
        let j = fd_jacobians(&cell, &[0.5], &r, &[1.0], FD_JACOBIAN_STEP).unwrap();
        assert!(max_rel_err(&j.dr_drprev[0][0], &Matrix::identity(3), 1e-12).unwrap() < 1e-9);
        assert_eq!(j.dr_dp[0], Matrix::zeros(3, 1));
        assert!(max_jac_err(&j, &cell.jacobians(&[0.5], &r, &[1.0]).unwrap(), 1e-8) < 1e-9);
    }

    #[test]
    fn fd_rejects_bad_step() {
        let cell = Quadratic::new();
        assert!(fd_jacobians(&cell, &[0.0], &[vec![0.0]], &[3.0], 0.0).is_err());
        assert!(fd_jacobians(&cell, &[0.0], &[vec![0.0]], &[3.0], -1.0).is_err());
    }

    #[test]
    fn dimension_checks() {
        let cell = ScalarLinear::new();
        assert!(cell.step(&[0.0, 1.0], &[vec![1.0]], &[0.5, 1.0]).is_err());
        assert!(cell.step(&[0.0], &[vec![1.0], vec![1.0]], &[0.5, 1.0]).is_err());
        assert!(cell.step(&[0.0], &[vec![1.0]], &[0.5]).is_err());
        assert!(cell.jacobians(&[0.0], &[vec![]], &[0.5, 1.0]).is_err());
    }

    #[test]
    fn registry() {
        assert_eq!(build_cell("vanilla-tanh", 2, &[3], 1).unwrap().signature().param_dim, 9 + 6 + 3 + 3 + 1);
        assert_eq!(build_cell("two-loop-gated", 2, &[4, 4], 1).unwrap().signature().loop_dims, vec![4, 4]);
        assert!(build_cell("two-loop-gated", 2, &[4, 3], 1).is_err());
        assert!(build_cell("scalar-linear", 2, &[1], 1).is_err());
        assert!(build_cell("delay-line", 2, &[5], 1).is_err());
        let err = build_cell("nosuch", 1, &[1], 1).err().unwrap();
        assert!(err.to_string().contains("nosuch"));
    }

    /// Every built-in cell, each analytic Jacobian against central
    /// differences at 100 random points.
    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let cells: Vec<Arc<dyn Cell>> = vec![
            build_cell("scalar-linear", 1, &[1], 1).unwrap(),
            build_cell("vanilla-tanh", 3, &[4], 2).unwrap(),
            build_cell("two-loop-gated", 2, &[3], 2).unwrap(),
            build_cell("delay-line", 2, &[3], 2).unwrap(),
            Arc::new(ConcatView::new(build_cell("two-loop-gated", 2, &[3], 2).unwrap())),
        ];
        for cell in &cells {
            let sig = cell.signature().clone();
            let mut rng = SplitMix64::new(11);
            for _ in 0..100 {
                let p = cell.init_params(&mut rng);
                let x: Vec<f64> = (0..sig.input_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let r: Vec<Vector> = sig
                    .loop_dims
                    .iter()
                    .map(|&d| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect())
                    .collect();
                let analytic = cell.jacobians(&x, &r, &p).unwrap();
                analytic.check_shapes(&sig).unwrap();
                let fd = fd_jacobians(cell.as_ref(), &x, &r, &p, FD_JACOBIAN_STEP).unwrap();
                let err = max_jac_err(&analytic, &fd, FD_JACOBIAN_FLOOR);
                assert!(err <= 1e-5, "{}: {err}", cell.name());
                // Floor of 1 turns the measure absolute for sub-unit entries.
                let abs = max_jac_err(&analytic, &fd, 1.0);
                assert!(abs <= 1e-9, "{}: absolute {abs}", cell.name());
            }
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let cell = build_cell("two-loop-gated", 2, &[3], 2).unwrap();
        let mut rng = SplitMix64::new(5);
        let p = cell.init_params(&mut rng);
        let r = cell.signature().zero_state();
        let a = cell.step(&[0.1, 0.2], &r, &p).unwrap();
        let b = cell.step(&[0.1, 0.2], &r, &p).unwrap();
        assert_eq!(a, b);
    }
}
