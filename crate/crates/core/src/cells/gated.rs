use super::{sigmoid, Cell, CellJacobians, CellSignature, CellStep};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::tasks::SplitMix64;

/// Minimal LSTM-like cell with two interacting loops, `h` (loop 0) and
/// `c` (loop 1), both of width `H`:
///
/// ```text
/// z   = [x_n; h_{n-1}]
/// g   = sigmoid(W_g z)
/// c_n = g * c_{n-1} + (1 - g) * tanh(W_c z)
/// h_n = tanh(c_n)
/// y_n = W_out h_n
/// ```
///
/// Flat layout, row-major: `W_g (H*(i+H)) | W_c (H*(i+H)) | W_out (o*H)`.
#[derive(Debug, Clone)]
pub struct TwoLoopGated {
    sig: CellSignature,
    input: usize,
    hidden: usize,
    output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedParams {
    pub w_g: Matrix,
    pub w_c: Matrix,
    pub w_out: Matrix,
}

impl GatedParams {
    pub fn flatten(&self) -> Vector {
        let mut p = Vec::new();
        p.extend_from_slice(self.w_g.as_slice());
        p.extend_from_slice(self.w_c.as_slice());
        p.extend_from_slice(self.w_out.as_slice());
        p
    }
}

/// Intermediate values shared by the step and its Jacobians.
struct Forward {
    z: Vector,
    g: Vector,
    cand: Vector,
    c: Vector,
    h: Vector,
}

impl TwoLoopGated {
    pub fn new(input: usize, hidden: usize, output: usize) -> Result<Self> {
        let zw = input + hidden;
        let param_dim = 2 * hidden * zw + output * hidden;
        Ok(Self {
            sig: CellSignature::new(input, output, param_dim, vec![hidden, hidden])?,
            input,
            hidden,
            output,
        })
    }

    fn z_width(&self) -> usize {
        self.input + self.hidden
    }

    pub fn unflatten(&self, p: &[f64]) -> Result<GatedParams> {
        if p.len() != self.sig.param_dim {
            return Err(Error::length("two-loop-gated parameters", self.sig.param_dim, p.len()));
        }
        let (h, o, zw) = (self.hidden, self.output, self.z_width());
        let blk = h * zw;
        Ok(GatedParams {
            w_g: Matrix::from_vec(h, zw, p[..blk].to_vec())?,
            w_c: Matrix::from_vec(h, zw, p[blk..2 * blk].to_vec())?,
            w_out: Matrix::from_vec(o, h, p[2 * blk..].to_vec())?,
        })
    }

    fn forward(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> Forward {
        let (hd, zw) = (self.hidden, self.z_width());
        let mut z = Vec::with_capacity(zw);
        z.extend_from_slice(x);
        z.extend_from_slice(&r_prev[0]);
        let c_prev = &r_prev[1];
        let dot = |off: usize, j: usize| -> f64 {
            p[off + j * zw..off + (j + 1) * zw]
                .iter()
                .zip(&z)
                .map(|(w, v)| w * v)
                .sum()
        };
        let g: Vector = (0..hd).map(|j| sigmoid(dot(0, j))).collect();
        let cand: Vector = (0..hd).map(|j| dot(hd * zw, j).tanh()).collect();
        let c: Vector = (0..hd)
            .map(|j| g[j] * c_prev[j] + (1.0 - g[j]) * cand[j])
            .collect();
        let h: Vector = c.iter().map(|v| v.tanh()).collect();
        Forward { z, g, cand, c, h }
    }

    fn output_of(&self, h: &[f64], p: &[f64]) -> Vector {
        let hd = self.hidden;
        let off = 2 * hd * self.z_width();
        (0..self.output)
            .map(|m| {
                p[off + m * hd..off + (m + 1) * hd]
                    .iter()
                    .zip(h)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }
}

impl Cell for TwoLoopGated {
    fn name(&self) -> &str {
        "two-loop-gated"
    }

    fn signature(&self) -> &CellSignature {
        &self.sig
    }

    fn step_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellStep {
        let f = self.forward(x, r_prev, p);
        let y = self.output_of(&f.h, p);
        CellStep {
            output: y,
            recurred: vec![f.h, f.c],
        }
    }

    fn jacobians_unchecked(&self, x: &[f64], r_prev: &[Vector], p: &[f64]) -> CellJacobians {
        let (hd, i, o, zw) = (self.hidden, self.input, self.output, self.z_width());
        let f = self.forward(x, r_prev, p);
        let c_prev = &r_prev[1];
        let wc_off = hd * zw;
        let out_off = 2 * hd * zw;

        // dc_j/d(W_g z)_j and dc_j/d(W_c z)_j
        let a_g: Vec<f64> = (0..hd)
            .map(|j| (c_prev[j] - f.cand[j]) * f.g[j] * (1.0 - f.g[j]))
            .collect();
        let a_c: Vec<f64> = (0..hd)
            .map(|j| (1.0 - f.g[j]) * (1.0 - f.cand[j] * f.cand[j]))
            .collect();
        let dh_dc: Vec<f64> = f.h.iter().map(|v| 1.0 - v * v).collect();

        let mut jac = CellJacobians::zeros(&self.sig);

        let mut dc_dp = Matrix::zeros(hd, self.sig.param_dim);
        let mut dc_dh = Matrix::zeros(hd, hd);
        let mut dc_dc = Matrix::zeros(hd, hd);
        for j in 0..hd {
            let row = dc_dp.row_mut(j);
            for m in 0..zw {
                row[j * zw + m] = a_g[j] * f.z[m];
                row[wc_off + j * zw + m] = a_c[j] * f.z[m];
            }
            for m in 0..hd {
                let wg = p[j * zw + i + m];
                let wc = p[wc_off + j * zw + i + m];
                dc_dh.set(j, m, a_g[j] * wg + a_c[j] * wc);
            }
            dc_dc.set(j, j, f.g[j]);
        }

        let scale_rows = |m: &Matrix| -> Matrix {
            let mut out = m.clone();
            for (j, s) in dh_dc.iter().enumerate() {
                out.row_mut(j).iter_mut().for_each(|v| *v *= s);
            }
            out
        };
        let dh_dp = scale_rows(&dc_dp);
        let dh_dh = scale_rows(&dc_dh);
        let dh_dcp = scale_rows(&dc_dc);

        let w_out = Matrix::from_vec(o, hd, p[out_off..].to_vec()).expect("layout");
        let mut dy_dp = w_out.matmul(&dh_dp).expect("layout");
        for m in 0..o {
            let row = dy_dp.row_mut(m);
            for k in 0..hd {
                row[out_off + m * hd + k] += f.h[k];
            }
        }
        jac.dy_dp = dy_dp;
        jac.dy_drprev = vec![
            w_out.matmul(&dh_dh).expect("layout"),
            w_out.matmul(&dh_dcp).expect("layout"),
        ];
        jac.dr_dp = vec![dh_dp, dc_dp];
        jac.dr_drprev = vec![vec![dh_dh, dh_dcp], vec![dc_dh, dc_dc]];
        jac
    }

    fn init_params(&self, rng: &mut SplitMix64) -> Vector {
        let (hd, o, zw) = (self.hidden, self.output, self.z_width());
        let s_in = 1.0 / (zw as f64).sqrt();
        let s_out = 1.0 / (hd as f64).sqrt();
        let mut p = Vec::with_capacity(self.sig.param_dim);
        p.extend((0..2 * hd * zw).map(|_| rng.uniform(-s_in, s_in)));
        p.extend((0..o * hd).map(|_| rng.uniform(-s_out, s_out)));
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line scalar evaluation of the defining formulas, written
    /// against the unflattened matrices.
    fn scalar_reference(
        params: &GatedParams,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = h_prev.len();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for j in 0..hd {
            let mut sg = 0.0;
            let mut sc = 0.0;
            for (m, xv) in x.iter().enumerate() {
                sg += params.w_g.get(j, m) * xv;
                sc += params.w_c.get(j, m) * xv;
            }
            for (m, hv) in h_prev.iter().enumerate() {
                sg += params.w_g.get(j, x.len() + m) * hv;
                sc += params.w_c.get(j, x.len() + m) * hv;
            }
            let g = 1.0 / (1.0 + (-sg).exp());
            c[j] = g * c_prev[j] + (1.0 - g) * sc.tanh();
            h[j] = c[j].tanh();
        }
        let y = params.w_out.mul_vec(&h).unwrap();
        (y, h, c)
    }

    #[test]
    fn step_matches_scalar_reference() {
        let cell = TwoLoopGated::new(3, 4, 2).unwrap();
        let mut rng = SplitMix64::new(21);
        for _ in 0..20 {
            let p = cell.init_params(&mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let hp: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let cp: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let (y, h, c) = scalar_reference(&cell.unflatten(&p).unwrap(), &x, &hp, &cp);
            let s = cell.step(&x, &[hp, cp], &p).unwrap();
            for (a, b) in s.output.iter().zip(&y).chain(s.recurred[0].iter().zip(&h)).chain(s.recurred[1].iter().zip(&c)) {
                assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn loops_interact() {
        let cell = TwoLoopGated::new(2, 3, 1).unwrap();
        let mut rng = SplitMix64::new(4);
        let p = cell.init_params(&mut rng);
        let r = vec![vec![0.3, -0.2, 0.5], vec![0.1, 0.7, -0.4]];
        let j = cell.jacobians(&[0.2, -0.6], &r, &p).unwrap();
        assert!(j.dr_drprev[0][1].frobenius_norm() > 0.0);
        assert!(j.dr_drprev[1][0].frobenius_norm() > 0.0);
    }

    #[test]
    fn flatten_round_trip() {
        let cell = TwoLoopGated::new(2, 3, 2).unwrap();
        let p = cell.init_params(&mut SplitMix64::new(1));
        assert_eq!(cell.unflatten(&p).unwrap().flatten(), p);
    }
}
