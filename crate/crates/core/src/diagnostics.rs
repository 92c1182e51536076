//! Temporal gradient explosion tracking and cross-loop interaction reports.

use serde::Serialize;

use crate::cells::CellJacobians;
use crate::error::{Error, Result};

/// Half-width of the "stable" band around a growth ratio of 1.
pub const VERDICT_BAND: f64 = 0.05;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.5;
/// Added to the denominator of each pairwise asymmetry term.
pub const ASYMMETRY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Exploding,
    Vanishing,
    Stable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplosionReport {
    pub per_step_norms: Vec<f64>,
    /// Geometric mean of successive norm ratios over the tail; `None` when
    /// fewer than one usable pair exists.
    pub growth_ratio_estimate: Option<f64>,
    pub verdict: Verdict,
    pub first_nonfinite_step: Option<usize>,
}

/// Classifies a sequence of sensitivity norms.
///
/// Only the finite prefix is analysed; a non-finite norm is reported by
/// index and forces an `Exploding` verdict. Pairs involving a zero norm
/// are skipped.
pub fn track_explosion(norms: &[f64], tail_fraction: f64) -> Result<ExplosionReport> {
    if norms.is_empty() {
        return Err(Error::InvalidArgument("norm sequence is empty".into()));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tail_fraction must lie in (0, 1], got {tail_fraction}"
        )));
    }
    let first_nonfinite_step = norms.iter().position(|v| !v.is_finite());
    let finite = &norms[..first_nonfinite_step.unwrap_or(norms.len())];

    let tail_len = ((finite.len() as f64) * tail_fraction).ceil() as usize;
    let tail = &finite[finite.len() - tail_len.min(finite.len())..];
    let logs: Vec<f64> = tail
        .windows(2)
        .filter(|w| w[0] > 0.0 && w[1] > 0.0)
        .map(|w| (w[1] / w[0]).ln())
        .collect();
    let growth_ratio_estimate = if logs.is_empty() {
        None
    } else {
        Some((logs.iter().sum::<f64>() / logs.len() as f64).exp())
    };

    let verdict = if first_nonfinite_step.is_some() {
        Verdict::Exploding
    } else {
        match growth_ratio_estimate {
            Some(r) if r > 1.0 + VERDICT_BAND => Verdict::Exploding,
            Some(r) if r < 1.0 - VERDICT_BAND => Verdict::Vanishing,
            _ => Verdict::Stable,
        }
    };
    Ok(ExplosionReport {
        per_step_norms: norms.to_vec(),
        growth_ratio_estimate,
        verdict,
        first_nonfinite_step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTermReport {
    /// `block_norms[k][l]` is the mean of `‖dR^k/dR^l_prev‖_F` over steps.
    pub block_norms: Vec<Vec<f64>>,
    /// Mean over unordered loop pairs of `|n_kl - n_lk| / (n_kl + n_lk + floor)`:
    /// 0 for symmetric coupling, 1 for one-directional coupling.
    pub asymmetry_index: f64,
    pub steps: usize,
}

/// Running accumulator behind [`cross_term_report`], for callers that do
/// not keep every step's Jacobians.
#[derive(Debug, Clone)]
pub struct CrossTermAccumulator {
    sums: Vec<Vec<f64>>,
    steps: usize,
}

impl CrossTermAccumulator {
    pub fn new(loops: usize) -> Result<Self> {
        if loops < 2 {
            return Err(Error::InvalidArgument(format!(
                "cross terms need at least two recurrent loops, got {loops}"
            )));
        }
        Ok(Self {
            sums: vec![vec![0.0; loops]; loops],
            steps: 0,
        })
    }

    pub fn push(&mut self, jac: &CellJacobians) -> Result<()> {
        let k = self.sums.len();
        if jac.dr_drprev.len() != k || jac.dr_drprev.iter().any(|row| row.len() != k) {
            return Err(Error::length("dR/dRprev grid", k, jac.dr_drprev.len()));
        }
        for (sum_row, jac_row) in self.sums.iter_mut().zip(&jac.dr_drprev) {
            for (s, block) in sum_row.iter_mut().zip(jac_row) {
                *s += block.frobenius_norm();
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn report(&self) -> CrossTermReport {
        let k = self.sums.len();
        let denom = self.steps.max(1) as f64;
        let block_norms: Vec<Vec<f64>> = self
            .sums
            .iter()
            .map(|row| row.iter().map(|s| s / denom).collect())
            .collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for a in 0..k {
            for b in a + 1..k {
                let (x, y) = (block_norms[a][b], block_norms[b][a]);
                total += (x - y).abs() / (x + y + ASYMMETRY_FLOOR);
                pairs += 1;
            }
        }
        CrossTermReport {
            block_norms,
            asymmetry_index: total / pairs as f64,
            steps: self.steps,
        }
    }
}

pub fn cross_term_report(jacs: &[CellJacobians]) -> Result<CrossTermReport> {
    let loops = jacs.first().map_or(0, CellJacobians::loops);
    let mut acc = CrossTermAccumulator::new(loops)?;
    for j in jacs {
        acc.push(j)?;
    }
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{build_cell, Cell, CellSignature, ScalarLinear};
    use crate::linalg::Matrix;
    use crate::sensitivity::{run_online, OnlineConfig};
    use crate::tasks::SplitMix64;
    use std::sync::Arc;

    #[test]
    fn geometric_growth() {
        let r = track_explosion(&[1.0, 2.0, 4.0, 8.0], 1.0).unwrap();
        assert!((r.growth_ratio_estimate.unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::Exploding);
        let r = track_explosion(&[1.0, 0.5, 0.25, 0.125], 1.0).unwrap();
        assert_eq!(r.verdict, Verdict::Vanishing);
    }

    #[test]
    fn constant_is_stable() {
        let r = track_explosion(&[3.0; 10], 0.5).unwrap();
        assert_eq!(r.growth_ratio_estimate, Some(1.0));
        assert_eq!(r.verdict, Verdict::Stable);
    }

    #[test]
    fn zeros_and_nonfinite() {
        let r = track_explosion(&[0.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(r.growth_ratio_estimate, None);
        assert_eq!(r.verdict, Verdict::Stable);

        let r = track_explosion(&[1.0, 2.0, f64::INFINITY, f64::NAN], 1.0).unwrap();
        assert_eq!(r.first_nonfinite_step, Some(2));
        assert_eq!(r.verdict, Verdict::Exploding);
        assert!((r.growth_ratio_estimate.unwrap() - 2.0).abs() < 1e-12);

        let r = track_explosion(&[f64::NAN], 0.5).unwrap();
        assert_eq!(r.first_nonfinite_step, Some(0));
        assert!(track_explosion(&[], 0.5).is_err());
        assert!(track_explosion(&[1.0], 0.0).is_err());
        assert!(track_explosion(&[1.0], 1.5).is_err());
    }

    #[test]
    fn tail_only() {
        // transient collapse then steady doubling
        let mut norms = vec![100.0, 1.0, 0.01];
        norms.extend((0..7).map(|i| 2f64.powi(i)));
        let r = track_explosion(&norms, 0.5).unwrap();
        assert!((r.growth_ratio_estimate.unwrap() - 2.0).abs() < 1e-12);
    }

    /// Sensitivity norms of the scalar-linear cell held at its fixed point
    /// `r ≡ 1` (`x ≡ (1 - w)`, `u = 1`), so `dR/dP = [1, 1 - w]` stays
    /// constant and only the carried term can grow.
    fn fixed_point_norms(w: f64, attenuation: f64, steps: usize) -> Vec<f64> {
        let cell: Arc<dyn Cell> = Arc::new(ScalarLinear::new());
        let inputs = vec![vec![1.0 - w]; steps];
        let run = run_online(
            cell,
            vec![w, 1.0],
            vec![vec![1.0]],
            &inputs,
            &inputs,
            OnlineConfig {
                attenuation,
                ..OnlineConfig::default()
            },
        )
        .unwrap();
        run.records.iter().map(|r| r.delta_frobenius).collect()
    }

    #[test]
    fn ratio_tracks_carry_factor() {
        for (w, a) in [(1.5, 1.0), (2.0, 0.8), (3.0, 0.5), (-1.5, 1.0)] {
            let r = track_explosion(&fixed_point_norms(w, a, 100), DEFAULT_TAIL_FRACTION).unwrap();
            let want = f64::abs(w) * a;
            let got = r.growth_ratio_estimate.unwrap();
            assert!((got - want).abs() <= 0.05 * want, "w={w} a={a}: {got}");
            assert_eq!(r.verdict, Verdict::Exploding);
        }
    }

    #[test]
    fn attenuated_norms_are_bounded() {
        for (w, a) in [(1.5, 0.5), (0.75, 1.0), (1.75, 0.5)] {
            let norms = fixed_point_norms(w, a, 200);
            let d_rmax = (1.0 + (1.0 - w) * (1.0 - w)).sqrt();
            let bound = d_rmax / (1.0 - f64::abs(w) * a);
            assert!(norms.iter().all(|n| *n <= bound * (1.0 + 1e-12)), "w={w} a={a}");
            let r = track_explosion(&norms, DEFAULT_TAIL_FRACTION).unwrap();
            assert_ne!(r.verdict, Verdict::Exploding);
        }
    }

    #[test]
    fn cross_terms_directional() {
        let sig = CellSignature::new(1, 1, 1, vec![1, 1]).unwrap();
        let mut j = CellJacobians::zeros(&sig);
        j.dr_drprev[0][1] = Matrix::from_rows(&[&[1.0]]);
        let rep = cross_term_report(&[j.clone(), j]).unwrap();
        assert!((rep.asymmetry_index - 1.0).abs() < 1e-9);
        assert_eq!(rep.block_norms[0][1], 1.0);
        assert_eq!(rep.block_norms[1][0], 0.0);
    }

    #[test]
    fn cross_terms_absent() {
        let sig = CellSignature::new(1, 1, 1, vec![2, 2]).unwrap();
        let mut j = CellJacobians::zeros(&sig);
        j.dr_drprev[0][0] = Matrix::identity(2);
        j.dr_drprev[1][1] = Matrix::identity(2);
        let rep = cross_term_report(&[j]).unwrap();
        assert_eq!(rep.asymmetry_index, 0.0);
        assert_eq!(rep.block_norms[0][1], 0.0);
        assert!((rep.block_norms[1][1] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cross_terms_need_two_loops() {
        let j = ScalarLinear::new().jacobians(&[0.0], &[vec![1.0]], &[0.5, 1.0]).unwrap();
        assert!(cross_term_report(&[j]).is_err());
        assert!(cross_term_report(&[]).is_err());
    }

    #[test]
    fn gated_cell_report_is_emitted() {
        let cell = build_cell("two-loop-gated", 2, &[4], 1).unwrap();
        let mut rng = SplitMix64::new(17);
        let p = cell.init_params(&mut rng);
        let mut r = cell.signature().zero_state();
        let mut jacs = Vec::new();
        for _ in 0..50 {
            let x = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            jacs.push(cell.jacobians(&x, &r, &p).unwrap());
            r = cell.step(&x, &r, &p).unwrap().recurred;
        }
        let rep = cross_term_report(&jacs).unwrap();
        assert_eq!(rep.steps, 50);
        assert!((0.0..=1.0).contains(&rep.asymmetry_index));
        assert!(rep.block_norms.iter().flatten().all(|v| *v >= 0.0));
    }
}
