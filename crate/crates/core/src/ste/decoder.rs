//! Minimal reference decoder: object encoder (self-attention over frame
//! queries), object decoder (cross-attention + feed-forward), class head and
//! mask-embedding head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttentionBlock;
use super::tensor::{layer_norm_rows, softmax_in_place, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn random<R: Rng>(input: usize, output: usize, bound: f64, rng: &mut R) -> Self {
        let weight = Matrix::uniform(input, output, bound, rng);
        let bias = (0..output).map(|_| rng.gen_range(-bound..=bound)).collect();
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if self.bias.len() != self.weight.cols {
            return Err(Error::Shape(format!(
                "bias length {} for a {}x{} layer",
                self.bias.len(),
                self.weight.rows,
                self.weight.cols
            )));
        }
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias);
        Ok(y)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
}

impl FeedForward {
    /// `LN(x + W2 relu(W1 x + b1) + b2)`.
    pub fn residual_norm(&self, x: &Matrix) -> Result<Matrix> {
        let h = self.hidden.forward(x)?.map(relu);
        let y = self.out.forward(&h)?;
        Ok(layer_norm_rows(&x.add(&y)?, &self.ln_gamma, &self.ln_beta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderLayer {
    pub cross: AttentionBlock,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefDecoderParams {
    pub encoder: Vec<AttentionBlock>,
    pub decoder: Vec<DecoderLayer>,
    pub mask_head: [Linear; 3],
    pub classifier: Matrix,
}

/// Output of one decoder step for all slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub prototypes: Matrix,
    pub class_probs: Matrix,
    pub mask_embeddings: Matrix,
    /// Per encoder block, per head attention weights.
    pub encoder_weights: Vec<Vec<Matrix>>,
    /// Per decoder layer, per head attention weights.
    pub decoder_weights: Vec<Vec<Matrix>>,
}

impl Propagation {
    pub fn attention_row_sums(&self) -> Vec<f64> {
        self.encoder_weights
            .iter()
            .chain(&self.decoder_weights)
            .flatten()
            .flat_map(|w| (0..w.rows).map(move |r| w.row(r).iter().sum::<f64>()))
            .collect()
    }
}

impl RefDecoderParams {
    /// Seeded uniform init in `[-1/sqrt(C), 1/sqrt(C)]`; layer norms start at
    /// unit scale and zero shift.
    pub fn random<R: Rng>(dim: usize, num_classes: usize, n_heads: usize, depth: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let encoder = (0..depth).map(|_| AttentionBlock::random(dim, n_heads, rng)).collect();
        let decoder = (0..depth)
            .map(|_| DecoderLayer {
                cross: AttentionBlock::random(dim, n_heads, rng),
                ffn: FeedForward {
                    hidden: Linear::random(dim, 2 * dim, bound, rng),
                    out: Linear::random(2 * dim, dim, bound, rng),
                    ln_gamma: vec![1.0; dim],
                    ln_beta: vec![0.0; dim],
                },
            })
            .collect();
        let mask_head = [
            Linear::random(dim, dim, bound, rng),
            Linear::random(dim, dim, bound, rng),
            Linear::random(dim, dim, bound, rng),
        ];
        let classifier = Matrix::uniform(dim, num_classes + 1, bound, rng);
        RefDecoderParams {
            encoder,
            decoder,
            mask_head,
            classifier,
        }
    }

    pub fn dim(&self) -> usize {
        self.classifier.rows
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        for block in &self.encoder {
            block.check(dim)?;
        }
        for layer in &self.decoder {
            layer.cross.check(dim)?;
            layer.ffn.hidden.weight.expect_shape(dim, 2 * dim, "feed-forward hidden")?;
            layer.ffn.out.weight.expect_shape(2 * dim, dim, "feed-forward out")?;
            if layer.ffn.ln_gamma.len() != dim || layer.ffn.ln_beta.len() != dim {
                return Err(Error::Shape(format!("feed-forward layer norm must have length {dim}")));
            }
        }
        for (i, l) in self.mask_head.iter().enumerate() {
            l.weight.expect_shape(dim, dim, &format!("mask head layer {i}"))?;
        }
        if self.classifier.rows != dim || self.classifier.cols < 2 {
            return Err(Error::Shape(format!(
                "classifier must be {dim}x(K+1), got {}x{}",
                self.classifier.rows, self.classifier.cols
            )));
        }
        Ok(())
    }

    pub fn mask_embeddings(&self, prototypes: &Matrix) -> Result<Matrix> {
        let [l1, l2, l3] = &self.mask_head;
        let h = l1.forward(prototypes)?.map(relu);
        let h = l2.forward(&h)?.map(relu);
        l3.forward(&h)
    }

    pub fn class_probs(&self, prototypes: &Matrix) -> Result<Matrix> {
        let mut logits = prototypes.matmul(&self.classifier)?;
        let cols = logits.cols;
        for r in 0..logits.rows {
            softmax_in_place(&mut logits.data[r * cols..(r + 1) * cols]);
        }
        Ok(logits)
    }
}

/// One online step: encode the frame queries, decode the instance queries
/// against them, then produce class probabilities and mask embeddings.
pub fn propagate(queries: &Matrix, frame_queries: &Matrix, params: &RefDecoderParams) -> Result<Propagation> {
    let dim = params.dim();
    params.check(dim)?;
    queries.expect_shape(queries.rows, dim, "instance queries")?;
    frame_queries.expect_shape(frame_queries.rows, dim, "frame queries")?;
    if frame_queries.rows == 0 {
        return Err(Error::Shape("no frame queries".into()));
    }

    let mut encoded = frame_queries.clone();
    let mut encoder_weights = Vec::with_capacity(params.encoder.len());
    for block in &params.encoder {
        let att = block.residual_norm(&encoded, &encoded, &encoded, &encoded)?;
        encoded = att.output;
        encoder_weights.push(att.weights);
    }

    let mut x = queries.clone();
    let mut decoder_weights = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let att = layer.cross.residual_norm(&x, &x, &encoded, &encoded)?;
        x = layer.ffn.residual_norm(&att.output)?;
        decoder_weights.push(att.weights);
    }

    Ok(Propagation {
        class_probs: params.class_probs(&x)?,
        mask_embeddings: params.mask_embeddings(&x)?,
        prototypes: x,
        encoder_weights,
        decoder_weights,
    })
}
