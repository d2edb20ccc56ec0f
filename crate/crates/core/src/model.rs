//! Clips, tracks and predictions, with the corpus file format.
//!
//! All masks live on the stride-`S` grid (`h = H / S`, `w = W / S`).
//! Ground-truth masks are binary and serialize as column-major RLE;
//! soft prediction masks serialize as row-major number arrays.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance for per-frame class probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "S")]
    pub stride: usize,
    #[serde(rename = "K")]
    pub num_classes: usize,
    #[serde(rename = "N_v")]
    pub num_slots: usize,
    #[serde(rename = "C")]
    pub embed_dim: usize,
}

impl ClipSpec {
    pub fn grid_h(&self) -> usize {
        self.height / self.stride.max(1)
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.stride.max(1)
    }

    pub fn cells(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Index of the no-object entry in a class probability vector.
    pub fn no_object(&self) -> usize {
        self.num_classes
    }

    /// Rule violations of the spec itself, as `(field, reason)` pairs.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (field, v) in [
            ("T", self.frames),
            ("K", self.num_classes),
            ("N_v", self.num_slots),
            ("C", self.embed_dim),
            ("S", self.stride),
            ("H", self.height),
            ("W", self.width),
        ] {
            if v == 0 {
                out.push((field, "must be >= 1".to_string()));
            }
        }
        if self.stride > 0 {
            if !self.height.is_multiple_of(self.stride) {
                out.push(("S", format!("stride {} does not divide H = {}", self.stride, self.height)));
            }
            if !self.width.is_multiple_of(self.stride) {
                out.push(("S", format!("stride {} does not divide W = {}", self.stride, self.width)));
            }
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            None => Ok(()),
            Some((field, reason)) => Err(Error::config(field, reason)),
        }
    }
}

/// Binary mask on the `h x w` grid, stored row-major with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j) as u8);
            }
        }
        Mask { h, w, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j] != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.w + j] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|&v| v as f64)
    }
}

/// Soft mask with per-cell foreground probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl SoftMask {
    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        SoftMask {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    /// Cells with probability strictly above `threshold`.
    pub fn binarize_above(&self, threshold: f64) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&p| (p > threshold) as u8).collect(),
        }
    }
}

impl From<&Mask> for SoftMask {
    fn from(m: &Mask) -> Self {
        SoftMask {
            h: m.h,
            w: m.w,
            data: m.values().collect(),
        }
    }
}

/// Column-major run-length record; runs alternate 0s and 1s starting with 0s.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleRecord {
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn encode_mask_rle(mask: &Mask) -> RleRecord {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for j in 0..mask.w {
        for i in 0..mask.h {
            let v = (mask.data[i * mask.w + j] != 0) as u8;
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleRecord {
        size: [mask.h, mask.w],
        counts,
    }
}

pub fn decode_mask_rle(record: &RleRecord) -> Result<Mask> {
    let [h, w] = record.size;
    let total: usize = record.counts.iter().sum();
    if total != h * w {
        return Err(Error::RleLength {
            got: total,
            expected: h * w,
            h,
            w,
        });
    }
    let mut mask = Mask::zeros(h, w);
    let mut pos = 0usize;
    for (k, &run) in record.counts.iter().enumerate() {
        if k % 2 == 1 {
            for p in pos..pos + run {
                // column-major position -> row-major storage
                let (j, i) = (p / h, p % h);
                mask.data[i * w + j] = 1;
            }
        }
        pos += run;
    }
    Ok(mask)
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        encode_mask_rle(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = RleRecord::deserialize(d)?;
        decode_mask_rle(&rec).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SoftMaskRecord {
    size: [usize; 2],
    data: Vec<f64>,
}

impl Serialize for SoftMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SoftMaskRecord {
            size: [self.h, self.w],
            data: self.data.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SoftMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = SoftMaskRecord::deserialize(d)?;
        let [h, w] = rec.size;
        if rec.data.len() != h * w {
            return Err(serde::de::Error::custom(format!(
                "soft mask has {} values, expected {}x{}",
                rec.data.len(),
                h,
                w
            )));
        }
        Ok(SoftMask { h, w, data: rec.data })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthTrack {
    pub class_id: usize,
    pub masks: Vec<Mask>,
}

impl GroundTruthTrack {
    /// First frame (0-based) with a nonempty mask.
    pub fn first_visible_frame(&self) -> Option<usize> {
        self.masks.iter().position(|m| !m.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionTrack {
    pub class_probs: Vec<Vec<f64>>,
    pub mask_probs: Vec<SoftMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clip {
    pub gt: Vec<GroundTruthTrack>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred: Option<Vec<PredictionTrack>>,
}

/// Provenance written by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub generator: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corpus {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<CorpusHeader>,
    pub spec: ClipSpec,
    pub seed: u64,
    pub clips: Vec<Clip>,
}

impl Corpus {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("corpus serialization is infallible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackKind {
    Gt,
    Pred,
}

/// One broken invariant, located as precisely as the rule allows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub clip: Option<usize>,
    pub kind: Option<TrackKind>,
    pub track: Option<usize>,
    pub frame: Option<usize>,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut loc = Vec::new();
        if let Some(c) = self.clip {
            loc.push(format!("clip {c}"));
        }
        if let (Some(k), Some(t)) = (self.kind, self.track) {
            loc.push(format!("{} track {t}", if k == TrackKind::Gt { "gt" } else { "pred" }));
        }
        if let Some(fr) = self.frame {
            loc.push(format!("frame {fr}"));
        }
        if loc.is_empty() {
            write!(f, "{}", self.rule)
        } else {
            write!(f, "{}: {}", loc.join(", "), self.rule)
        }
    }
}

struct Collector {
    clip: Option<usize>,
    kind: Option<TrackKind>,
    track: Option<usize>,
    out: Vec<Violation>,
}

impl Collector {
    fn push(&mut self, frame: Option<usize>, rule: impl Into<String>) {
        self.out.push(Violation {
            clip: self.clip,
            kind: self.kind,
            track: self.track,
            frame,
            rule: rule.into(),
        });
    }
}

pub fn validate_gt_track(spec: &ClipSpec, track: &GroundTruthTrack) -> Vec<Violation> {
    let mut c = Collector {
        clip: None,
        kind: Some(TrackKind::Gt),
        track: None,
        out: Vec::new(),
    };
    check_gt(spec, track, &mut c);
    c.out
}

pub fn validate_pred_track(spec: &ClipSpec, track: &PredictionTrack) -> Vec<Violation> {
    let mut c = Collector {
        clip: None,
        kind: Some(TrackKind::Pred),
        track: None,
        out: Vec::new(),
    };
    check_pred(spec, track, &mut c);
    c.out
}

fn check_gt(spec: &ClipSpec, track: &GroundTruthTrack, c: &mut Collector) {
    if track.class_id >= spec.num_classes {
        c.push(None, format!("class_id {} not in [0, {})", track.class_id, spec.num_classes));
    }
    if track.masks.len() != spec.frames {
        c.push(None, format!("mask count {} ≠ T = {}", track.masks.len(), spec.frames));
    }
    let (h, w) = (spec.grid_h(), spec.grid_w());
    for (t, m) in track.masks.iter().enumerate() {
        if m.h != h || m.w != w || m.data.len() != h * w {
            c.push(Some(t), format!("mask shape {}x{} ≠ grid {h}x{w}", m.h, m.w));
        }
        if m.data.iter().any(|&v| v > 1) {
            c.push(Some(t), "mask entry not in {0,1}");
        }
    }
    if track.masks.iter().all(Mask::is_empty) {
        c.push(None, "track is empty on every frame");
    }
}

fn check_pred(spec: &ClipSpec, track: &PredictionTrack, c: &mut Collector) {
    let n_probs = spec.num_classes + 1;
    if track.class_probs.len() != spec.frames {
        c.push(None, format!("class_probs count {} ≠ T = {}", track.class_probs.len(), spec.frames));
    }
    if track.mask_probs.len() != spec.frames {
        c.push(None, format!("mask count {} ≠ T = {}", track.mask_probs.len(), spec.frames));
    }
    for (t, probs) in track.class_probs.iter().enumerate() {
        if probs.len() != n_probs {
            c.push(Some(t), format!("class_probs length {} ≠ K+1 = {n_probs}", probs.len()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            c.push(Some(t), "class probability negative or not finite");
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            c.push(Some(t), format!("class probabilities sum to {sum}, not 1"));
        }
    }
    let (h, w) = (spec.grid_h(), spec.grid_w());
    for (t, m) in track.mask_probs.iter().enumerate() {
        if m.h != h || m.w != w || m.data.len() != h * w {
            c.push(Some(t), format!("mask shape {}x{} ≠ grid {h}x{w}", m.h, m.w));
        }
        if m.data.iter().any(|p| !(0.0..=1.0).contains(p)) {
            c.push(Some(t), "mask probability outside [0,1]");
        }
    }
}

/// Every broken invariant in the corpus. Empty iff the corpus is well formed.
pub fn validate(corpus: &Corpus) -> Vec<Violation> {
    let spec = &corpus.spec;
    let mut c = Collector {
        clip: None,
        kind: None,
        track: None,
        out: Vec::new(),
    };
    for (field, reason) in spec.problems() {
        c.push(None, format!("spec {field}: {reason}"));
    }
    for (ci, clip) in corpus.clips.iter().enumerate() {
        c.clip = Some(ci);
        c.kind = None;
        c.track = None;
        if clip.gt.len() > spec.num_slots {
            c.push(None, format!("{} gt tracks exceed N_v = {}", clip.gt.len(), spec.num_slots));
        }
        c.kind = Some(TrackKind::Gt);
        for (ti, track) in clip.gt.iter().enumerate() {
            c.track = Some(ti);
            check_gt(spec, track, &mut c);
        }
        if let Some(preds) = &clip.pred {
            c.kind = None;
            c.track = None;
            if preds.len() != spec.num_slots {
                c.push(None, format!("{} prediction tracks ≠ N_v = {}", preds.len(), spec.num_slots));
            }
            c.kind = Some(TrackKind::Pred);
            for (ti, track) in preds.iter().enumerate() {
                c.track = Some(ti);
                check_pred(spec, track, &mut c);
            }
        }
    }
    c.out
}
