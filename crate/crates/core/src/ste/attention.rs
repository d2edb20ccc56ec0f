use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{layer_norm_rows, softmax_in_place, Matrix};
use crate::error::{Error, Result};

/// Multi-head attention projections with a post-norm residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionBlock {
    pub n_heads: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
}

/// Attention result with the per-head weight matrices (`n_queries x n_keys`).
#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    pub output: Matrix,
    pub weights: Vec<Matrix>,
}

impl Attended {
    /// Row sums of every head's weights, head-major.
    pub fn row_sums(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flat_map(|w| (0..w.rows).map(move |r| w.row(r).iter().sum::<f64>()))
            .collect()
    }
}

impl AttentionBlock {
    pub fn random<R: Rng>(dim: usize, n_heads: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        AttentionBlock {
            n_heads,
            w_q: Matrix::uniform(dim, dim, bound, rng),
            w_k: Matrix::uniform(dim, dim, bound, rng),
            w_v: Matrix::uniform(dim, dim, bound, rng),
            w_o: Matrix::uniform(dim, dim, bound, rng),
            ln_gamma: vec![1.0; dim],
            ln_beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        if self.n_heads == 0 || !dim.is_multiple_of(self.n_heads) {
            return Err(Error::config("n_heads", format!("{} does not divide C = {dim}", self.n_heads)));
        }
        for (m, what) in [(&self.w_q, "W_Q"), (&self.w_k, "W_K"), (&self.w_v, "W_V"), (&self.w_o, "W_O")] {
            m.expect_shape(dim, dim, what)?;
            if !m.is_finite() {
                return Err(Error::Shape(format!("{what} has non-finite entries")));
            }
        }
        if self.ln_gamma.len() != dim || self.ln_beta.len() != dim {
            return Err(Error::Shape(format!("layer-norm parameters must have length {dim}")));
        }
        Ok(())
    }

    /// Scaled dot-product attention over all heads, then the output projection.
    pub fn attend(&self, q_in: &Matrix, k_in: &Matrix, v_in: &Matrix) -> Result<Attended> {
        let dim = self.dim();
        self.check(dim)?;
        if q_in.cols != dim || k_in.cols != dim || v_in.cols != dim || k_in.rows != v_in.rows {
            return Err(Error::Shape(format!(
                "attention inputs q {}x{}, k {}x{}, v {}x{} with C = {dim}",
                q_in.rows, q_in.cols, k_in.rows, k_in.cols, v_in.rows, v_in.cols
            )));
        }
        let q = q_in.matmul(&self.w_q)?;
        let k = k_in.matmul(&self.w_k)?;
        let v = v_in.matmul(&self.w_v)?;
        let d = dim / self.n_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut concat = Matrix::zeros(q.rows, dim);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = h * d..(h + 1) * d;
            let mut w = Matrix::zeros(q.rows, k.rows);
            for i in 0..q.rows {
                let qi = &q.row(i)[cols.clone()];
                let row = &mut w.data[i * k.rows..(i + 1) * k.rows];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                for (j, &a) in row.iter().enumerate() {
                    let vj = &v.row(j)[cols.clone()];
                    for (c, x) in cols.clone().zip(vj) {
                        concat.data[i * dim + c] += a * x;
                    }
                }
            }
            weights.push(w);
        }
        Ok(Attended {
            output: concat.matmul(&self.w_o)?,
            weights,
        })
    }

    /// `LN(residual + attention(q_in, k_in, v_in))`.
    pub fn residual_norm(&self, residual: &Matrix, q_in: &Matrix, k_in: &Matrix, v_in: &Matrix) -> Result<Attended> {
        let att = self.attend(q_in, k_in, v_in)?;
        let summed = residual.add(&att.output)?;
        Ok(Attended {
            output: layer_norm_rows(&summed, &self.ln_gamma, &self.ln_beta),
            weights: att.weights,
        })
    }
}
