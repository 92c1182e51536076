//! Deterministic synthetic sequence tasks with controlled dependency span.
//!
//! Random inputs come from [`SplitMix64`], whose integer recurrence is:
//!
//! ```text
//! state  = state + 0x9E3779B97F4A7C15            (mod 2^64)
//! z      = state
//! z      = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2^64)
//! z      = (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2^64)
//! output = z ^ (z >> 31)
//! ```
//!
//! A uniform double in `[0, 1)` is `(output >> 11) * 2^-53`; uniform in
//! `[lo, hi)` is `lo + (hi - lo) * u`. Any language reproducing these steps
//! gets bit-identical task streams for the same seed.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Logistic-map growth rate, in the chaotic regime.
pub const LOGISTIC_RATE: f64 = 3.9;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Target is the input from `delay` steps earlier.
    DelayedRecall,
    /// Target is the running mean of every input so far.
    RunningSum,
    /// Input is a logistic-map orbit; target is the next point.
    ChaoticLogistic,
    /// Every input entry equals the given value; target is zero.
    Constant(f64),
}

/// Parsed task selector, e.g. `delayed-recall:20`, before length, width and
/// seed are attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSelector {
    pub kind: TaskKind,
    pub delay: usize,
}

impl FromStr for TaskSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownName {
            kind: "task",
            token: s.to_string(),
        };
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("delayed-recall", Some(d)) => {
                let delay = d.parse().map_err(|_| unknown())?;
                Ok(TaskSelector {
                    kind: TaskKind::DelayedRecall,
                    delay,
                })
            }
            ("running-sum", None) => Ok(TaskSelector {
                kind: TaskKind::RunningSum,
                delay: 0,
            }),
            ("chaotic-logistic", None) => Ok(TaskSelector {
                kind: TaskKind::ChaoticLogistic,
                delay: 0,
            }),
            ("constant", Some(v)) => {
                let v: f64 = v.parse().map_err(|_| unknown())?;
                if !v.is_finite() {
                    return Err(unknown());
                }
                Ok(TaskSelector {
                    kind: TaskKind::Constant(v),
                    delay: 0,
                })
            }
            _ => Err(unknown()),
        }
    }
}

impl fmt::Display for TaskSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TaskKind::DelayedRecall => write!(f, "delayed-recall:{}", self.delay),
            TaskKind::RunningSum => f.write_str("running-sum"),
            TaskKind::ChaoticLogistic => f.write_str("chaotic-logistic"),
            TaskKind::Constant(v) => write!(f, "constant:{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub delay: usize,
    pub length: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(selector: TaskSelector, length: usize, input_dim: usize, seed: u64) -> Self {
        Self {
            kind: selector.kind,
            delay: selector.delay,
            length,
            input_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("task input_dim must be >= 1".into()));
        }
        // An empty run is allowed whatever the delay.
        if self.length > 0 && self.delay >= self.length {
            return Err(Error::InvalidArgument(format!(
                "task delay {} must be smaller than length {}",
                self.delay, self.length
            )));
        }
        Ok(())
    }
}

/// Input and target sequences for a task, each of `spec.length` vectors of
/// width `spec.input_dim`.
pub fn generate(spec: &TaskSpec) -> Result<(Vec<Vector>, Vec<Vector>)> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let n = spec.length;
    let dim = spec.input_dim;
    let uniform_inputs = |rng: &mut SplitMix64| -> Vec<Vector> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    };
    match spec.kind {
        TaskKind::DelayedRecall => {
            let inputs = uniform_inputs(&mut rng);
            let targets = delayed_targets(&inputs, spec.delay, dim);
            Ok((inputs, targets))
        }
        TaskKind::RunningSum => {
            let inputs = uniform_inputs(&mut rng);
            let targets = running_means(&inputs, dim);
            Ok((inputs, targets))
        }
        TaskKind::ChaoticLogistic => {
            let starts: Vec<f64> = (0..dim).map(|_| rng.uniform(0.1, 0.9)).collect();
            let orbits: Vec<Vec<f64>> = starts
                .iter()
                .map(|&z0| logistic_orbit(z0, LOGISTIC_RATE, n + 1))
                .collect();
            let inputs = (0..n).map(|t| orbits.iter().map(|o| o[t]).collect()).collect();
            let targets = (0..n)
                .map(|t| orbits.iter().map(|o| o[t + 1]).collect())
                .collect();
            Ok((inputs, targets))
        }
        TaskKind::Constant(v) => Ok((vec![vec![v; dim]; n], vec![vec![0.0; dim]; n])),
    }
}

pub fn delayed_targets(inputs: &[Vector], delay: usize, dim: usize) -> Vec<Vector> {
    (0..inputs.len())
        .map(|t| {
            if t >= delay {
                inputs[t - delay].clone()
            } else {
                vec![0.0; dim]
            }
        })
        .collect()
}

pub fn running_means(inputs: &[Vector], dim: usize) -> Vec<Vector> {
    let mut sum = vec![0.0; dim];
    inputs
        .iter()
        .enumerate()
        .map(|(t, x)| {
            for (s, v) in sum.iter_mut().zip(x) {
                *s += v;
            }
            sum.iter().map(|s| s / (t + 1) as f64).collect()
        })
        .collect()
}

/// `len` points of `z_{n+1} = rate * z_n * (1 - z_n)` starting at `z0`.
pub fn logistic_orbit(z0: f64, rate: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut z = z0;
    for _ in 0..len {
        out.push(z);
        z = rate * z * (1.0 - z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sel: &str, length: usize, seed: u64) -> TaskSpec {
        TaskSpec::new(sel.parse().unwrap(), length, 2, seed)
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of splitmix64 seeded with 0.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn delayed_recall_shifts_inputs() {
        let xs: Vec<Vector> = [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&v| vec![v]).collect();
        let ts = delayed_targets(&xs, 3, 1);
        let flat: Vec<f64> = ts.iter().map(|t| t[0]).collect();
        assert_eq!(flat, vec![0.0, 0.0, 0.0, 1.0, 2.0]);

        let (inputs, targets) = generate(&spec("delayed-recall:4", 40, 9)).unwrap();
        for t in 4..40 {
            assert_eq!(targets[t], inputs[t - 4]);
        }
        assert!(inputs.iter().flatten().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn running_sum_is_cumulative_mean() {
        let ts = running_means(&[vec![1.0], vec![3.0]], 1);
        assert_eq!(ts, vec![vec![1.0], vec![2.0]]);
    }

    #[test]
    fn logistic_first_step() {
        let orbit = logistic_orbit(0.5, LOGISTIC_RATE, 2);
        assert_eq!(orbit[1], 0.975);
        let (inputs, targets) = generate(&spec("chaotic-logistic", 10, 1)).unwrap();
        for t in 0..9 {
            assert_eq!(targets[t], inputs[t + 1]);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        for sel in ["delayed-recall:2", "running-sum", "chaotic-logistic", "constant:-0.5"] {
            let a = generate(&spec(sel, 25, 42)).unwrap();
            let b = generate(&spec(sel, 25, 42)).unwrap();
            let bits = |v: &(Vec<Vector>, Vec<Vector>)| -> Vec<u64> {
                v.0.iter().chain(&v.1).flatten().map(|x| x.to_bits()).collect()
            };
            assert_eq!(bits(&a), bits(&b), "{sel}");
        }
        let a = generate(&spec("running-sum", 5, 1)).unwrap();
        let b = generate(&spec("running-sum", 5, 2)).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn selector_parsing() {
        assert_eq!(
            "delayed-recall:20".parse::<TaskSelector>().unwrap().delay,
            20
        );
        for bad in ["delayed-recall", "delayed-recall:x", "running-sum:3", "nosuch", "constant:inf"] {
            let err = bad.parse::<TaskSelector>().unwrap_err();
            assert!(err.to_string().contains(bad), "{err}");
        }
        for good in ["delayed-recall:3", "running-sum", "chaotic-logistic", "constant:-0.5"] {
            assert_eq!(good.parse::<TaskSelector>().unwrap().to_string(), good);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&spec("delayed-recall:5", 5, 0)).is_err());
        assert!(generate(&TaskSpec::new("running-sum".parse().unwrap(), 3, 0, 0)).is_err());
        let (i, t) = generate(&spec("delayed-recall:5", 0, 0)).unwrap();
        assert!(i.is_empty() && t.is_empty());
    }
}
