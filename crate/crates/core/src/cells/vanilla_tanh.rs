use super::{Cell, CellJacobians, CellSignature, CellStep};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::tasks::SplitMix64;

/// Elman cell: `r_n = tanh(W_rec r_{n-1} + W_in x_n + b)`,
/// `y_n = W_out r_n + c`.
///
/// Flat parameter layout, each matrix row-major:
/// `W_rec (h*h) | W_in (h*i) | b (h) | W_out (o*h) | c (o)`.
#[derive(Debug, Clone)]
pub struct VanillaTanh {
    sig: CellSignature,
    input: usize,
    hidden: usize,
    output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TanhParams {
    pub w_rec: Matrix,
    pub w_in: Matrix,
    pub b: Vector,
    pub w_out: Matrix,
    pub c: Vector,
}

impl TanhParams {
    pub fn flatten(&self) -> Vector {
        let mut p = Vec::new();
        p.extend_from_slice(self.w_rec.as_slice());
        p.extend_from_slice(self.w_in.as_slice());
        p.extend_from_slice(&self.b);
        p.extend_from_slice(self.w_out.as_slice());
        p.extend_from_slice(&self.c);
        p
    }
}

impl VanillaTanh {
    pub fn new(input: usize, hidden: usize, output: usize) -> Result<Self> {
        let param_dim = hidden * hidden + hidden * input + hidden + output * hidden + output;
        Ok(Self {
            sig: CellSignature::new(input, output, param_dim, vec![hidden])?,
            input,
            hidden,
            output,
        })
    }

    fn offsets(&self) -> [usize; 5] {
        let (h, i, o) = (self.hidden, self.input, self.output);
        let w_in = h * h;
        let b = w_in + h * i;
        let w_out = b + h;
        let c = w_out + o * h;
        [0, w_in, b, w_out, c]
    }

    pub fn unflatten(&self, p: &[f64]) -> Result<TanhParams> {
        if p.len() != self.sig.param_dim {
            return Err(Error::length("vanilla-tanh parameters", self.sig.param_dim, p.len()));
        }
        let (h, i, o) = (self.hidden, self.input, self.output);
        let [w_rec, w_in, b, w_out, c] = self.offsets();
        Ok(TanhParams {
            w_rec: Matrix::from_vec(h, h, p[w_rec..w_in].to_vec())?,
            w_in: Matrix::from_vec(h, i, p[w_in..b].to_vec())?,
            b: p[b..w_out].to_vec(),
            w_out: Matrix::from_vec(o, h, p[w_out..c].to_vec())?,
            c: p[c..].to_vec(),
        })
    }

    /// Hidden pre-activation, row by row, read straight from the flat vector.
    fn hidden_state(&self, x: &[f64], r_prev: &[f64], p: &[f64]) -> Vector {
        let (h, i) = (self.hidden, self.input);
        let [w_rec, w_in, b, ..] = self.offsets();
        (0..h)
            .map(|j| {
                let rec: f64 = p[w_rec + j * h..w_rec + (j + 1) * h]
                    .iter()
                    .zip(r_prev)
                    .map(|(w, r)| w * r)
                    .sum();
                let inp: f64 = p[w_in + j * i..w_in + (j + 1) * i]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum();
                (rec + inp + p[b + j]).tanh()
            })
            .collect()
    }

    fn output_of(&self, r: &[f64], p: &[f64]) -> Vector {
        let h = self.hidden;
        let [.., w_out, c] = self.offsets();
        (0..self.output)
            .map(|m| {
                let s: f64 = p[w_out + m * h..w_out + (m + 1) * h]
                    .iter()
                    .zip(r)
                    .map(|(w, v)| w * v)
                    .sum();
                s + p[c + m]
            })
            .collect()
    }
}

impl Cell for VanillaTanh {
    fn name(&self) -> &str {
        "vanilla-tanh"
    }

    fn signature(&self) -> &CellSignature {
        &self.sig
    }

    fn step_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellStep {
        let r = self.hidden_state(x, &r_prev[0], p);
        let y = self.output_of(&r, p);
        CellStep {
            output: y,
            recurred: vec![r],
        }
    }

    fn jacobians_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellJacobians {
        let (h, i, o) = (self.hidden, self.input, self.output);
        let [w_rec, w_in, b, w_out, c] = self.offsets();
        let r_prev = &r_prev[0];
        let r = self.hidden_state(x, r_prev, p);
        let d: Vec<f64> = r.iter().map(|v| 1.0 - v * v).collect();

        let mut jac = CellJacobians::zeros(&self.sig);
        let dr_dp = &mut jac.dr_dp[0];
        for j in 0..h {
            let row = dr_dp.row_mut(j);
            for k in 0..h {
                row[w_rec + j * h + k] = d[j] * r_prev[k];
            }
            for k in 0..i {
                row[w_in + j * i + k] = d[j] * x[k];
            }
            row[b + j] = d[j];
        }

        let w_rec_m = Matrix::from_vec(h, h, p[w_rec..w_in].to_vec()).expect("layout");
        let dr_drprev = &mut jac.dr_drprev[0][0];
        for j in 0..h {
            for k in 0..h {
                dr_drprev.set(j, k, d[j] * w_rec_m.get(j, k));
            }
        }

        let w_out_m = Matrix::from_vec(o, h, p[w_out..c].to_vec()).expect("layout");
        let mut dy_dp = w_out_m.matmul(&jac.dr_dp[0]).expect("layout");
        for m in 0..o {
            let row = dy_dp.row_mut(m);
            for k in 0..h {
                row[w_out + m * h + k] += r[k];
            }
            row[c + m] += 1.0;
        }
        jac.dy_dp = dy_dp;
        jac.dy_drprev[0] = w_out_m.matmul(&jac.dr_drprev[0][0]).expect("layout");
        jac
    }

    /// Uniform in `±1/sqrt(fan_in)` per weight matrix, biases included.
    fn init_params(&self, rng: &mut SplitMix64) -> Vector {
        let (h, i, o) = (self.hidden, self.input, self.output);
        let s_rec = 1.0 / ((h + i) as f64).sqrt();
        let s_out = 1.0 / (h as f64).sqrt();
        let mut p = Vec::with_capacity(self.sig.param_dim);
        p.extend((0..h * h + h * i + h).map(|_| rng.uniform(-s_rec, s_rec)));
        p.extend((0..o * h + o).map(|_| rng.uniform(-s_out, s_out)));
        p
    }
}
