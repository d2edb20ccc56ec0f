//! Spatio-temporal enhancement and the online query-propagation loop.
//!
//! Between frames, each slot's predicted mask mattes the pixel embeddings,
//! the matted field is average-pooled into one spatial vector per slot, and
//! the slot prototypes cross-attend to those vectors to form the next
//! frame's instance queries. Prototypes and spatial vectors share one
//! per-slot positional table (added to queries and keys, never values).

mod attention;
mod decoder;
mod tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{AttentionBlock, Attended};
pub use decoder::{propagate, DecoderLayer, FeedForward, Linear, Propagation, RefDecoderParams};
pub use tensor::{layer_norm_rows, softmax_in_place, Matrix, LAYER_NORM_EPS};

use crate::cost::sigmoid;
use crate::error::{Error, Result};
use crate::model::{Mask, PredictionTrack, SoftMask};

pub const DEFAULT_MATTING_THRESHOLD: f64 = 0.5;

/// Largest f64 strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// `C x h x w` field, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

pub type PixelEmbeddings = FeatureMap;

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn uniform<R: Rng>(c: usize, h: usize, w: usize, bound: f64, rng: &mut R) -> Self {
        FeatureMap {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, ch: usize, i: usize, j: usize) -> f64 {
        self.data[(ch * self.h + i) * self.w + j]
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if self.h != h || self.w != w || self.data.len() != self.c * h * w {
            return Err(Error::Shape(format!(
                "feature map {}x{}x{} vs mask {h}x{w}",
                self.c, self.h, self.w
            )));
        }
        Ok(())
    }
}

/// Pooled per-slot spatial vector; `empty` marks pooling over an empty mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialFeature {
    pub vector: Vec<f64>,
    pub empty: bool,
}

/// Cross-attention parameters of the enhancement step plus the shared
/// per-slot positional table (`N_v x C`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhcaParams {
    pub attention: AttentionBlock,
    pub pos: Matrix,
}

impl MhcaParams {
    pub fn random<R: Rng>(dim: usize, n_slots: usize, n_heads: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let attention = AttentionBlock::random(dim, n_heads, rng);
        let pos = Matrix::uniform(n_slots, dim, bound, rng);
        MhcaParams { attention, pos }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteParams {
    pub mhca: MhcaParams,
    pub threshold: f64,
}

/// Zeroes every channel of `pixels` where `mask < threshold`.
pub fn spatial_matting(pixels: &PixelEmbeddings, mask: &SoftMask, threshold: f64) -> Result<FeatureMap> {
    pixels.check_grid(mask.h, mask.w)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("threshold", format!("must lie in (0, 1), got {threshold}")));
    }
    let n = mask.h * mask.w;
    let mut out = pixels.clone();
    for (cell, &p) in mask.data.iter().enumerate() {
        if p < threshold {
            for ch in 0..pixels.c {
                out.data[ch * n + cell] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Per-channel mean of `field` over the cells of `mask`.
pub fn masked_average_pool(field: &FeatureMap, mask: &Mask) -> Result<SpatialFeature> {
    field.check_grid(mask.h, mask.w)?;
    let count = mask.area();
    if count == 0 {
        return Ok(SpatialFeature {
            vector: vec![0.0; field.c],
            empty: true,
        });
    }
    let vector = (0..field.c)
        .map(|ch| {
            let sum: f64 = field
                .channel(ch)
                .iter()
                .zip(&mask.data)
                .filter(|(_, &m)| m != 0)
                .map(|(v, _)| v)
                .sum();
            sum / count as f64
        })
        .collect();
    Ok(SpatialFeature { vector, empty: false })
}

/// Next-frame instance queries from the current prototypes attending to the
/// pooled spatial features of all slots.
pub fn cross_attention_update(
    prototypes: &Matrix,
    spatial: &[SpatialFeature],
    params: &MhcaParams,
) -> Result<Attended> {
    let n = prototypes.rows;
    let dim = prototypes.cols;
    if spatial.len() != n || params.pos.rows != n {
        return Err(Error::Shape(format!(
            "{n} prototypes, {} spatial features, {} positional rows",
            spatial.len(),
            params.pos.rows
        )));
    }
    params.pos.expect_shape(n, dim, "positional table")?;
    if let Some(s) = spatial.iter().find(|s| s.vector.len() != dim) {
        return Err(Error::Shape(format!("spatial feature of length {} with C = {dim}", s.vector.len())));
    }
    let values = Matrix::from_rows(&spatial.iter().map(|s| s.vector.clone()).collect::<Vec<_>>())?;
    let queries = prototypes.add(&params.pos)?;
    let keys = values.add(&params.pos)?;
    params.attention.residual_norm(prototypes, &queries, &keys, &values)
}

/// Per-slot soft masks from the dot product of mask embeddings with the
/// pixel embeddings. Outputs are kept strictly inside (0, 1).
pub fn segment_frame(mask_embeddings: &Matrix, pixels: &PixelEmbeddings) -> Result<Vec<SoftMask>> {
    if mask_embeddings.cols != pixels.c {
        return Err(Error::Shape(format!(
            "mask embeddings have {} channels, pixel embeddings {}",
            mask_embeddings.cols, pixels.c
        )));
    }
    pixels.check_grid(pixels.h, pixels.w)?;
    let n = pixels.h * pixels.w;
    Ok((0..mask_embeddings.rows)
        .map(|k| {
            let emb = mask_embeddings.row(k);
            let mut acc = vec![0.0; n];
            for (ch, &e) in emb.iter().enumerate() {
                for (a, &p) in acc.iter_mut().zip(pixels.channel(ch)) {
                    *a += e * p;
                }
            }
            SoftMask {
                h: pixels.h,
                w: pixels.w,
                data: acc.into_iter().map(|x| sigmoid(x).clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)).collect(),
            }
        })
        .collect())
}

/// Inputs of one frame: the condensed frame queries and the pixel embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameInput {
    pub frame_queries: Matrix,
    pub pixels: PixelEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub queries: Matrix,
    pub prototypes: Matrix,
    pub class_probs: Matrix,
    pub decoder_attention_row_sums: Vec<f64>,
    /// Present when enhancement ran after this frame.
    pub spatial: Option<Vec<SpatialFeature>>,
    pub ste_attention_row_sums: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRun {
    pub tracks: Vec<PredictionTrack>,
    pub frames: Vec<FrameTrace>,
}

/// Runs the online loop over a clip. With enhancement disabled the next
/// queries are the current prototypes; otherwise they are the output of
/// [`cross_attention_update`] on the matted and pooled current frame.
pub fn run_clip(
    initial_queries: &Matrix,
    frames: &[FrameInput],
    decoder: &RefDecoderParams,
    ste: &SteParams,
    ste_enabled: bool,
) -> Result<ClipRun> {
    if frames.is_empty() {
        return Err(Error::Shape("clip has no frames".into()));
    }
    let n_slots = initial_queries.rows;
    let mut tracks: Vec<PredictionTrack> = (0..n_slots)
        .map(|_| PredictionTrack {
            class_probs: Vec::with_capacity(frames.len()),
            mask_probs: Vec::with_capacity(frames.len()),
        })
        .collect();
    let mut traces = Vec::with_capacity(frames.len());
    let mut queries = initial_queries.clone();

    for (t, frame) in frames.iter().enumerate() {
        let step = propagate(&queries, &frame.frame_queries, decoder)?;
        let masks = segment_frame(&step.mask_embeddings, &frame.pixels)?;
        for (k, track) in tracks.iter_mut().enumerate() {
            track.class_probs.push(step.class_probs.row(k).to_vec());
            track.mask_probs.push(masks[k].clone());
        }

        let mut trace = FrameTrace {
            queries: queries.clone(),
            prototypes: step.prototypes.clone(),
            class_probs: step.class_probs.clone(),
            decoder_attention_row_sums: step.attention_row_sums(),
            spatial: None,
            ste_attention_row_sums: None,
        };

        if t + 1 < frames.len() {
            queries = if ste_enabled {
                let spatial = masks
                    .iter()
                    .map(|m| {
                        let matted = spatial_matting(&frame.pixels, m, ste.threshold)?;
                        let binary = Mask {
                            h: m.h,
                            w: m.w,
                            data: m.data.iter().map(|&p| (p >= ste.threshold) as u8).collect(),
                        };
                        masked_average_pool(&matted, &binary)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let att = cross_attention_update(&step.prototypes, &spatial, &ste.mhca)?;
                trace.ste_attention_row_sums = Some(att.row_sums());
                trace.spatial = Some(spatial);
                att.output
            } else {
                step.prototypes
            };
        }
        traces.push(trace);
    }

    Ok(ClipRun { tracks, frames: traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn matting_identity_and_annihilation() {
        let mut rng = stream(1, "t", 0);
        let p = FeatureMap::uniform(3, 4, 5, 1.0, &mut rng);
        let ones = SoftMask::filled(4, 5, 1.0);
        assert_eq!(spatial_matting(&p, &ones, 0.5).unwrap(), p);
        let zeros = SoftMask::filled(4, 5, 0.0);
        assert!(spatial_matting(&p, &zeros, 0.5).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(spatial_matting(&p, &ones, 1.0).is_err());
    }

    #[test]
    fn pooling_constant_and_empty() {
        let field = FeatureMap {
            c: 2,
            h: 2,
            w: 2,
            data: vec![3.5, 3.5, 0.0, 3.5, -1.25, -1.25, 0.0, -1.25],
        };
        let mask = Mask {
            h: 2,
            w: 2,
            data: vec![1, 1, 0, 1],
        };
        let s = masked_average_pool(&field, &mask).unwrap();
        assert_eq!(s.vector, vec![3.5, -1.25]);
        assert!(!s.empty);
        let e = masked_average_pool(&field, &Mask::zeros(2, 2)).unwrap();
        assert_eq!(e.vector, vec![0.0, 0.0]);
        assert!(e.empty);
    }

    #[test]
    fn zero_value_path_gives_layer_norm_of_prototypes() {
        let mut rng = stream(2, "t", 0);
        let mut params = MhcaParams::random(4, 3, 2, &mut rng);
        params.attention.w_v = Matrix::zeros(4, 4);
        let protos = Matrix::uniform(3, 4, 1.0, &mut rng);
        let spatial: Vec<_> = (0..3)
            .map(|_| SpatialFeature {
                vector: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                empty: false,
            })
            .collect();
        let out = cross_attention_update(&protos, &spatial, &params).unwrap();
        let expected = layer_norm_rows(&protos, &params.attention.ln_gamma, &params.attention.ln_beta);
        for (a, b) in out.output.data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn count_mismatch_rejected() {
        let mut rng = stream(3, "t", 0);
        let params = MhcaParams::random(4, 3, 1, &mut rng);
        let protos = Matrix::zeros(3, 4);
        let spatial = vec![
            SpatialFeature {
                vector: vec![0.0; 4],
                empty: true
            };
            2
        ];
        assert!(cross_attention_update(&protos, &spatial, &params).is_err());
    }

    #[test]
    fn zero_mask_embedding_is_half() {
        let mut rng = stream(4, "t", 0);
        let p = FeatureMap::uniform(3, 2, 2, 1.0, &mut rng);
        let masks = segment_frame(&Matrix::zeros(2, 3), &p).unwrap();
        assert!(masks.iter().all(|m| m.data.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn aligned_channel_saturates() {
        let mut p = FeatureMap::zeros(3, 2, 2);
        // channel 1 is one on the diagonal
        p.data[4] = 1.0;
        p.data[7] = 1.0;
        let m = Matrix::from_rows(&[vec![0.0, 10.0, 0.0]]).unwrap();
        let mask = &segment_frame(&m, &p).unwrap()[0];
        assert!(mask.get(0, 0) > 0.9999 && mask.get(1, 1) > 0.9999);
        assert_eq!(mask.get(0, 1), 0.5);
        let huge = Matrix::from_rows(&[vec![0.0, 1e3, 0.0]]).unwrap();
        let mask = &segment_frame(&huge, &p).unwrap()[0];
        assert!(mask.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_weight_decoder_is_uniform() {
        let mut rng = stream(5, "t", 0);
        let mut params = RefDecoderParams::random(4, 3, 2, 1, &mut rng);
        let zero = |m: &mut Matrix| m.data.iter_mut().for_each(|v| *v = 0.0);
        for b in &mut params.encoder {
            for m in [&mut b.w_q, &mut b.w_k, &mut b.w_v, &mut b.w_o] {
                zero(m);
            }
            b.ln_gamma.iter_mut().for_each(|v| *v = 0.0);
        }
        for l in &mut params.decoder {
            for m in [&mut l.cross.w_q, &mut l.cross.w_k, &mut l.cross.w_v, &mut l.cross.w_o] {
                zero(m);
            }
            l.cross.ln_gamma.iter_mut().for_each(|v| *v = 0.0);
            zero(&mut l.ffn.hidden.weight);
            zero(&mut l.ffn.out.weight);
            l.ffn.hidden.bias.iter_mut().for_each(|v| *v = 0.0);
            l.ffn.out.bias.iter_mut().for_each(|v| *v = 0.0);
            l.ffn.ln_gamma.iter_mut().for_each(|v| *v = 0.0);
        }
        zero(&mut params.classifier);
        let q = Matrix::uniform(2, 4, 1.0, &mut rng);
        let f = Matrix::uniform(3, 4, 1.0, &mut rng);
        let out = propagate(&q, &f, &params).unwrap();
        assert!(out.prototypes.data.iter().all(|&v| v == 0.0));
        assert!(out.class_probs.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_frame_query_gets_full_weight() {
        let mut rng = stream(6, "t", 0);
        let params = RefDecoderParams::random(4, 2, 2, 1, &mut rng);
        let q = Matrix::uniform(3, 4, 1.0, &mut rng);
        let f = Matrix::uniform(1, 4, 1.0, &mut rng);
        let out = propagate(&q, &f, &params).unwrap();
        for w in out.decoder_weights.iter().flatten() {
            assert!(w.data.iter().all(|&v| v == 1.0));
        }
    }
}
