use super::{Cell, CellJacobians, CellSignature, CellStep};
use crate::error::Result;
use crate::linalg::Vector;
use crate::tasks::SplitMix64;

/// Pure delay: the input is gained by `u` (one weight per channel), then
/// shifted through `delay` stages of a shift register, and the output reads
/// the last stage of the *previous* state:
///
/// ```text
/// stage_0(n)     = u * x_n
/// stage_j(n)     = stage_{j-1}(n-1)       for 1 <= j < delay
/// y_n            = stage_{delay-1}(n-1)   = u * x_{n-delay}
/// ```
///
/// `Y_N` depends on `P` only through the forward step at `N - delay`, so any
/// gradient method that looks back fewer than `delay + 1` steps sees exactly
/// zero. The recurred state is the stages laid out stage-major.
#[derive(Debug, Clone)]
pub struct DelayLine {
    sig: CellSignature,
    channels: usize,
    delay: usize,
}

impl DelayLine {
    pub fn new(channels: usize, delay: usize) -> Result<Self> {
        Ok(Self {
            sig: CellSignature::new(channels, channels, channels, vec![delay * channels])?,
            channels,
            delay,
        })
    }

    pub fn delay(&self) -> usize {
        self.delay
    }
}

impl Cell for DelayLine {
    fn name(&self) -> &str {
        "delay-line"
    }

    fn signature(&self) -> &CellSignature {
        &self.sig
    }

    fn step_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellStep {
        let ch = self.channels;
        let prev = &r_prev[0];
        let mut r = Vec::with_capacity(prev.len());
        r.extend(x.iter().zip(p).map(|(x, u)| u * x));
        r.extend_from_slice(&prev[..prev.len() - ch]);
        CellStep {
            output: prev[prev.len() - ch..].to_vec(),
            recurred: vec![r],
        }
    }

    fn jacobians_unchecked(&self, x: &[f64], _r_prev: &[Vector], _p: &[f64]) -> CellJacobians {
        let ch = self.channels;
        let width = ch * self.delay;
        let mut j = CellJacobians::zeros(&self.sig);
        for c in 0..ch {
            j.dr_dp[0].set(c, c, x[c]);
            j.dy_drprev[0].set(c, width - ch + c, 1.0);
        }
        for row in ch..width {
            j.dr_drprev[0][0].set(row, row - ch, 1.0);
        }
        j
    }

    fn init_params(&self, rng: &mut SplitMix64) -> Vector {
        (0..self.channels).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }
}
