use std::sync::Arc;

use super::{Cell, CellJacobians, CellSignature, CellStep};
use crate::linalg::{Matrix, Vector};
use crate::tasks::SplitMix64;

/// Presents a K-loop cell as a single-loop cell whose recurred state is the
/// concatenation `[R^1; ...; R^K]`. Jacobians are block assemblies of the
/// wrapped cell's blocks.
#[derive(Clone)]
pub struct ConcatView {
    inner: Arc<dyn Cell>,
    sig: CellSignature,
    name: String,
}

impl ConcatView {
    pub fn new(inner: Arc<dyn Cell>) -> Self {
        let s = inner.signature();
        let sig = CellSignature {
            input_dim: s.input_dim,
            output_dim: s.output_dim,
            param_dim: s.param_dim,
            loop_dims: vec![s.state_dim()],
        };
        let name = format!("concat-view({})", inner.name());
        Self { inner, sig, name }
    }

    pub fn inner(&self) -> &Arc<dyn Cell> {
        &self.inner
    }

    pub fn split(&self, r: &[f64]) -> Vec<Vector> {
        let mut out = Vec::with_capacity(self.inner.signature().loops());
        let mut off = 0;
        for &d in &self.inner.signature().loop_dims {
            out.push(r[off..off + d].to_vec());
            off += d;
        }
        out
    }

    pub fn join(parts: &[Vector]) -> Vector {
        parts.concat()
    }
}

impl Cell for ConcatView {
    fn name(&self) -> &str {
        &self.name
    }

    fn signature(&self) -> &CellSignature {
        &self.sig
    }

    fn step_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellStep {
        let s = self.inner.step_unchecked(x, &self.split(&r_prev[0]), p);
        CellStep {
            output: s.output,
            recurred: vec![Self::join(&s.recurred)],
        }
    }

    fn jacobians_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellJacobians {
        let j = self.inner.jacobians_unchecked(x, &self.split(&r_prev[0]), p);
        let rows: Vec<Matrix> = j
            .dr_drprev
            .iter()
            .map(|row| Matrix::hstack(row).expect("block widths"))
            .collect();
        CellJacobians {
            dr_dp: vec![Matrix::vstack(&j.dr_dp).expect("block widths")],
            dr_drprev: vec![vec![Matrix::vstack(&rows).expect("block widths")]],
            dy_dp: j.dy_dp,
            dy_drprev: vec![Matrix::hstack(&j.dy_drprev).expect("block heights")],
        }
    }

    fn init_params(&self, rng: &mut SplitMix64) -> Vector {
        self.inner.init_params(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::build_cell;

    #[test]
    fn reproduces_wrapped_cell() {
        let inner = build_cell("two-loop-gated", 2, &[3], 2).unwrap();
        let view = ConcatView::new(inner.clone());
        assert_eq!(view.signature().loop_dims, vec![6]);
        let mut rng = SplitMix64::new(2);
        let p = inner.init_params(&mut rng);
        let parts = vec![vec![0.1, -0.3, 0.5], vec![0.9, 0.0, -0.2]];
        let x = [0.4, -0.7];

        let a = inner.step(&x, &parts, &p).unwrap();
        let b = view.step(&x, &[ConcatView::join(&parts)], &p).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(ConcatView::join(&a.recurred), b.recurred[0]);

        let ja = inner.jacobians(&x, &parts, &p).unwrap();
        let jb = view.jacobians(&x, &[ConcatView::join(&parts)], &p).unwrap();
        assert_eq!(jb.dr_dp[0].block(3, 0, 3, p.len()), ja.dr_dp[1]);
        assert_eq!(jb.dr_drprev[0][0].block(0, 3, 3, 3), ja.dr_drprev[0][1]);
        assert_eq!(jb.dr_drprev[0][0].block(3, 0, 3, 3), ja.dr_drprev[1][0]);
        assert_eq!(jb.dy_drprev[0].block(0, 3, 2, 3), ja.dy_drprev[1]);
        assert_eq!(jb.dy_dp, ja.dy_dp);
    }
}
