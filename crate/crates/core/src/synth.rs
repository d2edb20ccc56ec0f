//! Seeded synthetic clips and a prediction simulator with controlled
//! failure modes.
//!
//! Objects are rectangles or discs moving linearly with reflection at the
//! grid border. When occlusion is enabled, a track loses the cells covered
//! by any track with a larger index. The simulator's `early_swap` mode makes
//! two slots exchange the gt they follow from a given frame on, so the
//! first-frame matching and the whole-clip matching disagree.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::sigmoid;
use crate::error::{Error, Result};
use crate::model::{Clip, ClipSpec, Corpus, CorpusHeader, GroundTruthTrack, Mask, PredictionTrack, SoftMask};
use crate::rng::{self, GENERATOR_NAME};

const MAX_SCENE_ATTEMPTS: usize = 64;

/// Probability mass extra slots leave off the no-object class.
const EXTRA_SLOT_CLASS_MASS: f64 = 0.05;
/// Mean logit of extra-slot masks; cells get a uniform offset in [-0.5, 0.5].
const EXTRA_SLOT_MASK_LOGIT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Disc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Inclusive object count range.
    pub n_objects: [usize; 2],
    pub shapes: Vec<Shape>,
    /// Inclusive speed range in grid cells per frame.
    pub velocity: [f64; 2],
    /// Inclusive half-extent (rectangles) or radius (discs) range in cells.
    pub object_size: [usize; 2],
    pub allow_occlusion: bool,
    /// Inclusive 1-based range of the frame an object first appears on.
    pub entry_frame: [usize; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_objects: [1, 3],
            shapes: vec![Shape::Rectangle, Shape::Disc],
            velocity: [0.0, 1.5],
            object_size: [1, 3],
            allow_occlusion: true,
            entry_frame: [1, 1],
        }
    }
}

impl SceneConfig {
    pub fn check(&self, spec: &ClipSpec) -> Result<()> {
        spec.check()?;
        let [lo, hi] = self.n_objects;
        if lo > hi {
            return Err(Error::config("n_objects", format!("empty range [{lo}, {hi}]")));
        }
        if hi > spec.num_slots {
            return Err(Error::config(
                "n_objects",
                format!("maximum {hi} exceeds N_v = {}", spec.num_slots),
            ));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("shapes", "at least one shape is required"));
        }
        let [vlo, vhi] = self.velocity;
        if !(vlo.is_finite() && vhi.is_finite() && 0.0 <= vlo && vlo <= vhi) {
            return Err(Error::config("velocity", format!("need 0 <= min <= max, got [{vlo}, {vhi}]")));
        }
        let [slo, shi] = self.object_size;
        if slo > shi {
            return Err(Error::config("object_size", format!("empty range [{slo}, {shi}]")));
        }
        let short_side = spec.grid_h().min(spec.grid_w());
        if 2 * shi + 1 > short_side {
            return Err(Error::config(
                "object_size",
                format!("objects of size {shi} do not fit a {}x{} grid", spec.grid_h(), spec.grid_w()),
            ));
        }
        let [elo, ehi] = self.entry_frame;
        if elo == 0 || elo > ehi || ehi > spec.frames {
            return Err(Error::config(
                "entry_frame",
                format!("need 1 <= min <= max <= T = {}, got [{elo}, {ehi}]", spec.frames),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapMode {
    None,
    EarlySwap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Per-cell flip probability for cells on a mask boundary.
    pub mask_jitter: f64,
    /// Class probability mass moved off the true class.
    pub class_confusion: f64,
    pub swap_mode: SwapMode,
    /// 1-based frame from which the swapped slots follow each other's gt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_frame: Option<usize>,
    /// Logit magnitude of simulated soft masks.
    pub sharpness: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mask_jitter: 0.0,
            class_confusion: 0.0,
            swap_mode: SwapMode::None,
            swap_frame: None,
            sharpness: 30.0,
        }
    }
}

impl NoiseConfig {
    pub fn check(&self, spec: &ClipSpec) -> Result<()> {
        for (field, v) in [("mask_jitter", self.mask_jitter), ("class_confusion", self.class_confusion)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.sharpness.is_finite() && self.sharpness > 0.0) {
            return Err(Error::config("sharpness", "must be finite and > 0"));
        }
        if self.swap_mode == SwapMode::EarlySwap {
            match self.swap_frame {
                Some(s) if (2..=spec.frames).contains(&s) => {}
                other => {
                    return Err(Error::config(
                        "swap_frame",
                        format!("early_swap needs swap_frame in [2, T = {}], got {other:?}", spec.frames),
                    ))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    half: (f64, f64),
    class_id: usize,
    entry: usize,
    pos: (f64, f64),
    vel: (f64, f64),
}

fn reflect(x: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *x = lo;
        *v = 0.0;
        return;
    }
    *x += *v;
    // large velocities can cross the interval more than once
    for _ in 0..64 {
        if *x > hi {
            *x = 2.0 * hi - *x;
            *v = -*v;
        } else if *x < lo {
            *x = 2.0 * lo - *x;
            *v = -*v;
        } else {
            return;
        }
    }
    *x = x.clamp(lo, hi);
}

fn render(obj: &Object, pos: (f64, f64), h: usize, w: usize) -> Mask {
    let (cy, cx) = pos;
    match obj.shape {
        Shape::Rectangle => {
            let (ry, rx) = (cy.round(), cx.round());
            Mask::from_fn(h, w, |i, j| {
                (i as f64 - ry).abs() <= obj.half.0 && (j as f64 - rx).abs() <= obj.half.1
            })
        }
        Shape::Disc => {
            let r2 = obj.half.0 * obj.half.0;
            Mask::from_fn(h, w, |i, j| {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                dy * dy + dx * dx <= r2
            })
        }
    }
}

fn sample_object<R: Rng>(spec: &ClipSpec, cfg: &SceneConfig, rng: &mut R) -> Object {
    let shape = *cfg.shapes.choose(rng).expect("shapes checked nonempty");
    let size = |rng: &mut R| rng.gen_range(cfg.object_size[0]..=cfg.object_size[1]) as f64;
    let half = match shape {
        Shape::Rectangle => (size(rng), size(rng)),
        Shape::Disc => {
            let r = size(rng);
            (r, r)
        }
    };
    let class_id = rng.gen_range(0..spec.num_classes);
    let entry = rng.gen_range(cfg.entry_frame[0]..=cfg.entry_frame[1]);
    let (h, w) = (spec.grid_h() as f64, spec.grid_w() as f64);
    let start = |rng: &mut R, extent: f64, half: f64| {
        let (lo, hi) = (half, extent - 1.0 - half);
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    };
    let pos = (start(rng, h, half.0), start(rng, w, half.1));
    let speed = if cfg.velocity[1] > cfg.velocity[0] {
        rng.gen_range(cfg.velocity[0]..=cfg.velocity[1])
    } else {
        cfg.velocity[0]
    };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    Object {
        shape,
        half,
        class_id,
        entry,
        pos,
        vel: (speed * angle.sin(), speed * angle.cos()),
    }
}

fn render_scene(spec: &ClipSpec, objects: &[Object], occlusion: bool) -> Vec<GroundTruthTrack> {
    let (h, w) = (spec.grid_h(), spec.grid_w());
    let mut tracks: Vec<GroundTruthTrack> = objects
        .iter()
        .map(|o| {
            let (mut pos, mut vel) = (o.pos, o.vel);
            let (lo_y, hi_y) = (o.half.0, h as f64 - 1.0 - o.half.0);
            let (lo_x, hi_x) = (o.half.1, w as f64 - 1.0 - o.half.1);
            let masks = (1..=spec.frames)
                .map(|t| {
                    if t < o.entry {
                        return Mask::zeros(h, w);
                    }
                    if t > o.entry {
                        reflect(&mut pos.0, &mut vel.0, lo_y, hi_y);
                        reflect(&mut pos.1, &mut vel.1, lo_x, hi_x);
                    }
                    render(o, pos, h, w)
                })
                .collect();
            GroundTruthTrack {
                class_id: o.class_id,
                masks,
            }
        })
        .collect();

    if occlusion {
        for t in 0..spec.frames {
            for top in (1..tracks.len()).rev() {
                let cover = tracks[top].masks[t].clone();
                for below in tracks[..top].iter_mut() {
                    for (cell, &c) in below.masks[t].data.iter_mut().zip(&cover.data) {
                        if c != 0 {
                            *cell = 0;
                        }
                    }
                }
            }
        }
    }
    tracks
}

/// Ground-truth tracks for one clip, deterministic in `seed`.
pub fn generate_clip(spec: &ClipSpec, cfg: &SceneConfig, seed: u64) -> Result<Vec<GroundTruthTrack>> {
    cfg.check(spec)?;
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.n_objects[0]..=cfg.n_objects[1]);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let objects: Vec<Object> = (0..n).map(|_| sample_object(spec, cfg, &mut rng)).collect();
        let tracks = render_scene(spec, &objects, cfg.allow_occlusion);
        if tracks.iter().all(|t| t.first_visible_frame().is_some()) {
            return Ok(tracks);
        }
    }
    Err(Error::config(
        "n_objects",
        format!("could not place {n} visible objects in {MAX_SCENE_ATTEMPTS} attempts"),
    ))
}

/// The two gt indices whose slots exchange identities under `early_swap`:
/// the first two tracks (by index) visible before the swap frame.
pub fn swap_pair(gt: &[GroundTruthTrack], noise: &NoiseConfig) -> Option<(usize, usize)> {
    if noise.swap_mode != SwapMode::EarlySwap {
        return None;
    }
    let swap_frame = noise.swap_frame?;
    let mut early = gt
        .iter()
        .enumerate()
        .filter(|(_, g)| g.first_visible_frame().is_some_and(|f| f + 1 < swap_frame))
        .map(|(k, _)| k);
    Some((early.next()?, early.next()?))
}

fn is_boundary(m: &Mask, i: usize, j: usize) -> bool {
    let v = m.get(i, j);
    (i > 0 && m.get(i - 1, j) != v)
        || (i + 1 < m.h && m.get(i + 1, j) != v)
        || (j > 0 && m.get(i, j - 1) != v)
        || (j + 1 < m.w && m.get(i, j + 1) != v)
}

fn jittered_mask<R: Rng>(m: &Mask, noise: &NoiseConfig, rng: &mut R) -> SoftMask {
    let mut data = Vec::with_capacity(m.h * m.w);
    for i in 0..m.h {
        for j in 0..m.w {
            let mut logit = if m.get(i, j) { noise.sharpness } else { -noise.sharpness };
            if is_boundary(m, i, j) {
                // drawn for every boundary cell so streams align across jitter levels
                let u: f64 = rng.gen();
                if u < noise.mask_jitter {
                    logit = -logit;
                }
            }
            data.push(sigmoid(logit));
        }
    }
    SoftMask { h: m.h, w: m.w, data }
}

/// `N_v` prediction tracks: slot `i < N_gt` follows gt `i` (subject to the
/// swap), remaining slots predict no-object with faint masks.
pub fn simulate_predictions(
    gt: &[GroundTruthTrack],
    noise: &NoiseConfig,
    spec: &ClipSpec,
    seed: u64,
) -> Result<Vec<PredictionTrack>> {
    noise.check(spec)?;
    if gt.len() > spec.num_slots {
        return Err(Error::TooManyRows {
            rows: gt.len(),
            cols: spec.num_slots,
        });
    }
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let k = spec.num_classes;
    let (h, w) = (spec.grid_h(), spec.grid_w());
    let swap = swap_pair(gt, noise);
    let swap_from = noise.swap_frame.unwrap_or(usize::MAX);

    let followed = |slot: usize, t: usize| -> usize {
        match swap {
            Some((a, b)) if t + 1 >= swap_from && slot == a => b,
            Some((a, b)) if t + 1 >= swap_from && slot == b => a,
            _ => slot,
        }
    };

    let mut out = Vec::with_capacity(spec.num_slots);
    for slot in 0..spec.num_slots {
        let mut track = PredictionTrack {
            class_probs: Vec::with_capacity(spec.frames),
            mask_probs: Vec::with_capacity(spec.frames),
        };
        for t in 0..spec.frames {
            if slot < gt.len() {
                let g = &gt[followed(slot, t)];
                let mut probs = vec![noise.class_confusion / k as f64; k + 1];
                probs[g.class_id] = 1.0 - noise.class_confusion;
                track.class_probs.push(probs);
                track.mask_probs.push(jittered_mask(&g.masks[t], noise, &mut rng));
            } else {
                let mut probs = vec![EXTRA_SLOT_CLASS_MASS / k as f64; k + 1];
                probs[k] = 1.0 - EXTRA_SLOT_CLASS_MASS;
                track.class_probs.push(probs);
                let data = (0..h * w)
                    .map(|_| sigmoid(EXTRA_SLOT_MASK_LOGIT + rng.gen_range(-0.5..=0.5)))
                    .collect();
                track.mask_probs.push(SoftMask { h, w, data });
            }
        }
        out.push(track);
    }
    Ok(out)
}

/// Clip `index` of a corpus seeded by `master_seed`; independent of any
/// other clip so clips can be produced in parallel.
pub fn synthesize_clip(
    spec: &ClipSpec,
    scene: &SceneConfig,
    noise: Option<&NoiseConfig>,
    master_seed: u64,
    index: u64,
) -> Result<Clip> {
    let gt = generate_clip(spec, scene, rng::derive_seed(master_seed, "scene", index))?;
    let pred = match noise {
        Some(n) => Some(simulate_predictions(&gt, n, spec, rng::derive_seed(master_seed, "predictions", index))?),
        None => None,
    };
    Ok(Clip { gt, pred })
}

#[derive(Serialize)]
struct GeneratorConfig<'a> {
    scene: &'a SceneConfig,
    noise: Option<&'a NoiseConfig>,
    clips: usize,
}

pub fn corpus_header(scene: &SceneConfig, noise: Option<&NoiseConfig>, clips: usize, seed: u64) -> CorpusHeader {
    CorpusHeader {
        generator: GENERATOR_NAME.to_string(),
        seed,
        config: serde_json::to_value(GeneratorConfig { scene, noise, clips }).expect("config serializes"),
    }
}

pub fn generate_corpus(
    spec: &ClipSpec,
    scene: &SceneConfig,
    noise: Option<&NoiseConfig>,
    clips: usize,
    seed: u64,
) -> Result<Corpus> {
    scene.check(spec)?;
    if let Some(n) = noise {
        n.check(spec)?;
    }
    let clips_out = (0..clips as u64)
        .map(|i| synthesize_clip(spec, scene, noise, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        header: Some(corpus_header(scene, noise, clips, seed)),
        spec: *spec,
        seed,
        clips: clips_out,
    })
}
