use super::{Cell, CellJacobians, CellSignature, CellStep};
use crate::linalg::Vector;
use crate::tasks::SplitMix64;

/// `r_n = w * r_{n-1} + u * x_n`, `y_n = r_n`, with `P = [w, u]`.
///
/// Every gradient of this cell has a closed form, which makes it the
/// hand-checkable reference for the sensitivity recurrence.
#[derive(Debug, Clone)]
pub struct ScalarLinear {
    sig: CellSignature,
}

impl ScalarLinear {
    pub fn new() -> Self {
        Self {
            sig: CellSignature {
                input_dim: 1,
                output_dim: 1,
                param_dim: 2,
                loop_dims: vec![1],
            },
        }
    }
}

impl Default for ScalarLinear {
    fn default() -> Self {
        Self::new()
    }
}

impl Cell for ScalarLinear {
    fn name(&self) -> &str {
        "scalar-linear"
    }

    fn signature(&self) -> &CellSignature {
        &self.sig
    }

    fn step_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellStep {
        let r = p[0] * r_prev[0][0] + p[1] * x[0];
        CellStep {
            output: vec![r],
            recurred: vec![vec![r]],
        }
    }

    fn jacobians_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellJacobians {
        let mut j = CellJacobians::zeros(&self.sig);
        let r_prev = r_prev[0][0];
        j.dr_dp[0].set(0, 0, r_prev);
        j.dr_dp[0].set(0, 1, x[0]);
        j.dr_drprev[0][0].set(0, 0, p[0]);
        j.dy_dp.set(0, 0, r_prev);
        j.dy_dp.set(0, 1, x[0]);
        j.dy_drprev[0].set(0, 0, p[0]);
        j
    }

    fn init_params(&self, rng: &mut SplitMix64) -> Vector {
        vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{fd_jacobians, FD_JACOBIAN_STEP};
    use crate::linalg::Matrix;

    #[test]
    fn closed_form_step() {
        let s = ScalarLinear::new().step(&[0.0], &[vec![1.0]], &[0.5, 1.0]).unwrap();
        assert_eq!(s.recurred, vec![vec![0.5]]);
        assert_eq!(s.output, vec![0.5]);
    }

    #[test]
    fn closed_form_jacobians() {
        let j = ScalarLinear::new().jacobians(&[0.0], &[vec![1.0]], &[0.5, 1.0]).unwrap();
        assert_eq!(j.dr_dp[0], Matrix::from_rows(&[&[1.0, 0.0]]));
        assert_eq!(j.dr_drprev[0][0], Matrix::from_rows(&[&[0.5]]));
    }

    #[test]
    fn fd_agrees_to_second_order() {
        let cell = ScalarLinear::new();
        let (x, r, p) = ([0.7], [vec![-1.3]], [0.9, -0.4]);
        let a = cell.jacobians(&x, &r, &p).unwrap();
        let fd = fd_jacobians(&cell, &x, &r, &p, FD_JACOBIAN_STEP).unwrap();
        for (m, n) in [(&a.dr_dp[0], &fd.dr_dp[0]), (&a.dr_drprev[0][0], &fd.dr_drprev[0][0])] {
            for (u, v) in m.as_slice().iter().zip(n.as_slice()) {
                assert!((u - v).abs() <= 1e-9);
            }
        }
    }
}
