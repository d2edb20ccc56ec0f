use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tcovis_core::assignment::{build_global_cost_matrix, global_instance_assignment, hungarian, locpro_assignment, CostMatrix};
use tcovis_core::cost::{CostConfig, LossWeights};
use tcovis_core::eval::{audit_clip, compute_metrics, summarize_audit, EvalConfig, EvalReport, IOU_THRESHOLDS};
use tcovis_core::model::{validate, ClipSpec, Corpus, GroundTruthTrack, Mask, PredictionTrack, SoftMask};
use tcovis_core::rng::{stream, GENERATOR_NAME};
use tcovis_core::ste::{run_clip, FeatureMap, FrameInput, FrameTrace, Matrix, MhcaParams, RefDecoderParams, SteParams};
use tcovis_core::synth::{corpus_header, synthesize_clip};

use crate::config::{DemoConfig, RunConfig};

/// Attention rows must sum to one within this tolerance for a trace to be written.
pub const ROW_SUM_TOL: f64 = 1e-9;

pub fn thread_pool(threads: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_bytes(path, &w.into_inner()?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let corpus = Corpus::from_json(&text).with_context(|| format!("parsing corpus {}", path.display()))?;
    let violations = validate(&corpus);
    if let Some(first) = violations.first() {
        bail!("corpus {} has {} violation(s), first: {first}", path.display(), violations.len());
    }
    Ok(corpus)
}

// ---------------------------------------------------------------- gen

pub fn build_corpus(cfg: &RunConfig, seed: u64, pool: &rayon::ThreadPool) -> anyhow::Result<Corpus> {
    cfg.check()?;
    let noise = cfg.noise.as_ref();
    let clips = pool.install(|| {
        (0..cfg.clips as u64)
            .into_par_iter()
            .map(|i| synthesize_clip(&cfg.spec, &cfg.scene, noise, seed, i))
            .collect::<tcovis_core::Result<Vec<_>>>()
    })?;
    let corpus = Corpus {
        header: Some(corpus_header(&cfg.scene, noise, cfg.clips, seed)),
        spec: cfg.spec,
        seed,
        clips,
    };
    let violations = validate(&corpus);
    if let Some(first) = violations.first() {
        bail!("generated corpus failed validation: {first}");
    }
    Ok(corpus)
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub path: PathBuf,
    pub clips: usize,
    pub sha256: String,
}

pub fn cmd_gen(cfg: &RunConfig, seed: u64, out: &Path, pool: &rayon::ThreadPool) -> anyhow::Result<GenSummary> {
    let corpus = build_corpus(cfg, seed, pool)?;
    let text = corpus.to_json();
    write_bytes(out, text.as_bytes())?;
    Ok(GenSummary {
        path: out.to_path_buf(),
        clips: corpus.clips.len(),
        sha256: sha256_hex(text.as_bytes()),
    })
}

// ---------------------------------------------------------------- assign

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Gia,
    Locpro,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignRow {
    pub clip: usize,
    pub n_gt: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gia_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locpro_cost: Option<f64>,
    /// `locpro_cost - gia_cost`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_agreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gia_pairs: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locpro_pairs: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignReport {
    pub strategy: Strategy,
    pub weights: LossWeights,
    pub rows: Vec<AssignRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_gia_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_locpro_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_pair_agreement: Option<f64>,
}

/// Flat CSV view of an [`AssignRow`]; absent columns stay empty.
#[derive(Serialize)]
struct AssignCsvRow {
    clip: usize,
    n_gt: usize,
    gia_cost: Option<f64>,
    locpro_cost: Option<f64>,
    delta: Option<f64>,
    pair_agreement: Option<f64>,
    gia_pairs: Option<String>,
    locpro_pairs: Option<String>,
}

fn pairs_text(pairs: &Option<Vec<(usize, usize)>>) -> Option<String> {
    pairs.as_ref().map(|p| p.iter().map(|(g, s)| format!("{g}:{s}")).collect::<Vec<_>>().join(";"))
}

fn assign_row(index: usize, clip: &tcovis_core::model::Clip, strategy: Strategy, cost: &CostConfig) -> tcovis_core::Result<AssignRow> {
    let mut row = AssignRow {
        clip: index,
        n_gt: clip.gt.len(),
        gia_cost: None,
        locpro_cost: None,
        delta: None,
        pair_agreement: None,
        gia_pairs: None,
        locpro_pairs: None,
    };
    let pred = clip.pred.as_deref().ok_or(tcovis_core::Error::MissingPredictions(index))?;
    match strategy {
        Strategy::Gia => {
            let a = global_instance_assignment(&clip.gt, pred, cost)?;
            row.gia_cost = Some(a.total_cost);
            row.gia_pairs = Some(a.pairs);
        }
        Strategy::Locpro => {
            let a = locpro_assignment(&clip.gt, pred, cost)?;
            row.locpro_cost = Some(a.total_cost);
            row.locpro_pairs = Some(a.pairs);
        }
        Strategy::Both => {
            let a = audit_clip(index, clip, cost)?;
            row.gia_cost = Some(a.gia_cost);
            row.locpro_cost = Some(a.locpro_cost);
            row.delta = Some(a.locpro_cost - a.gia_cost);
            row.pair_agreement = Some(a.pair_agreement);
            row.gia_pairs = Some(a.gia_pairs);
            row.locpro_pairs = Some(a.locpro_pairs);
        }
    }
    Ok(row)
}

fn mean_of(rows: &[AssignRow], f: impl Fn(&AssignRow) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().map(f).collect::<Option<_>>()?;
    Some(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

pub fn assign_report(
    corpus: &Corpus,
    strategy: Strategy,
    weights: LossWeights,
    pool: &rayon::ThreadPool,
) -> anyhow::Result<AssignReport> {
    let cost = CostConfig::with_weights(weights);
    cost.check()?;
    let rows = pool.install(|| {
        corpus
            .clips
            .par_iter()
            .enumerate()
            .map(|(i, c)| assign_row(i, c, strategy, &cost))
            .collect::<tcovis_core::Result<Vec<_>>>()
    })?;
    let has = |s: Strategy| strategy == s || strategy == Strategy::Both;
    Ok(AssignReport {
        strategy,
        weights,
        mean_gia_cost: if has(Strategy::Gia) { mean_of(&rows, |r| r.gia_cost) } else { None },
        mean_locpro_cost: if has(Strategy::Locpro) { mean_of(&rows, |r| r.locpro_cost) } else { None },
        mean_delta: if strategy == Strategy::Both { mean_of(&rows, |r| r.delta) } else { None },
        mean_pair_agreement: if strategy == Strategy::Both { mean_of(&rows, |r| r.pair_agreement) } else { None },
        rows,
    })
}

pub fn cmd_assign(
    corpus_path: &Path,
    strategy: Strategy,
    weights: LossWeights,
    out: &Path,
    pool: &rayon::ThreadPool,
) -> anyhow::Result<AssignReport> {
    let corpus = load_corpus(corpus_path)?;
    let report = assign_report(&corpus, strategy, weights, pool)?;
    write_json(out, &report)?;
    let csv_rows: Vec<AssignCsvRow> = report
        .rows
        .iter()
        .map(|r| AssignCsvRow {
            clip: r.clip,
            n_gt: r.n_gt,
            gia_cost: r.gia_cost,
            locpro_cost: r.locpro_cost,
            delta: r.delta,
            pair_agreement: r.pair_agreement,
            gia_pairs: pairs_text(&r.gia_pairs),
            locpro_pairs: pairs_text(&r.locpro_pairs),
        })
        .collect();
    write_csv(&out.with_extension("csv"), &csv_rows)?;
    Ok(report)
}

// ---------------------------------------------------------------- enhance

/// Seeded random parameters and inputs of the enhancement demo.
#[derive(Debug, Clone)]
pub struct Demo {
    pub initial_queries: Matrix,
    pub frames: Vec<FrameInput>,
    pub decoder: RefDecoderParams,
    pub ste: SteParams,
}

pub fn build_demo(cfg: &RunConfig, seed: u64) -> anyhow::Result<Demo> {
    cfg.check()?;
    let s = &cfg.spec;
    let (c, d) = (s.embed_dim, &cfg.demo);
    let decoder = RefDecoderParams::random(c, s.num_classes, d.n_heads, d.depth, &mut stream(seed, "demo-decoder", 0));
    let ste = SteParams {
        mhca: MhcaParams::random(c, s.num_slots, d.n_heads, &mut stream(seed, "demo-ste", 0)),
        threshold: d.threshold,
    };
    let initial_queries = Matrix::uniform(s.num_slots, c, 1.0, &mut stream(seed, "demo-queries", 0));
    let frames = (0..s.frames as u64)
        .map(|t| {
            let mut rng = stream(seed, "demo-frame", t);
            FrameInput {
                frame_queries: Matrix::uniform(cfg.frame_tokens(), c, 1.0, &mut rng),
                pixels: FeatureMap::uniform(c, s.grid_h(), s.grid_w(), 1.0, &mut rng),
            }
        })
        .collect();
    Ok(Demo {
        initial_queries,
        frames,
        decoder,
        ste,
    })
}

/// Written by `enhance`. The enhancement flag itself is not recorded so
/// that runs where it has no effect produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnhanceTrace {
    pub generator: String,
    pub seed: u64,
    pub spec: ClipSpec,
    pub demo: DemoConfig,
    pub frames: Vec<FrameTrace>,
}

impl EnhanceTrace {
    /// Largest deviation of any attention row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.frames
            .iter()
            .flat_map(|f| f.decoder_attention_row_sums.iter().chain(f.ste_attention_row_sums.iter().flatten()))
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn enhance_trace(cfg: &RunConfig, seed: u64, ste_enabled: bool) -> anyhow::Result<EnhanceTrace> {
    let demo = build_demo(cfg, seed)?;
    let run = run_clip(&demo.initial_queries, &demo.frames, &demo.decoder, &demo.ste, ste_enabled)?;
    let trace = EnhanceTrace {
        generator: GENERATOR_NAME.to_string(),
        seed,
        spec: cfg.spec,
        demo: cfg.demo,
        frames: run.frames,
    };
    let err = trace.max_row_sum_error();
    if err.is_nan() || err > ROW_SUM_TOL {
        bail!("attention row sums deviate from 1 by {err:e}");
    }
    Ok(trace)
}

pub fn cmd_enhance(cfg: &RunConfig, seed: u64, ste_enabled: bool, out: &Path) -> anyhow::Result<EnhanceTrace> {
    let trace = enhance_trace(cfg, seed, ste_enabled)?;
    write_json(out, &trace)?;
    Ok(trace)
}

// ---------------------------------------------------------------- eval

pub fn eval_report(
    corpus: &Corpus,
    cfg: &EvalConfig,
    weights: LossWeights,
    pool: &rayon::ThreadPool,
) -> anyhow::Result<EvalReport> {
    let cost = CostConfig::with_weights(weights);
    cost.check()?;
    let m = compute_metrics(corpus, cfg)?;
    let rows = pool.install(|| {
        corpus
            .clips
            .par_iter()
            .enumerate()
            .map(|(i, c)| audit_clip(i, c, &cost))
            .collect::<tcovis_core::Result<Vec<_>>>()
    })?;
    Ok(EvalReport {
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        ap_per_threshold: m.ap_per_threshold,
        ap: m.ap,
        ap50: m.ap50,
        ap75: m.ap75,
        ar1: m.ar1,
        ar10: m.ar10,
        audit: summarize_audit(rows),
    })
}

#[derive(Serialize)]
struct MetricRow {
    metric: String,
    value: f64,
}

pub fn cmd_eval(
    corpus_path: &Path,
    weights: LossWeights,
    out: &Path,
    pool: &rayon::ThreadPool,
) -> anyhow::Result<EvalReport> {
    let corpus = load_corpus(corpus_path)?;
    let report = eval_report(&corpus, &EvalConfig::default(), weights, pool)?;
    write_json(out, &report)?;
    let mut rows: Vec<MetricRow> = [
        ("AP", report.ap),
        ("AP50", report.ap50),
        ("AP75", report.ap75),
        ("AR1", report.ar1),
        ("AR10", report.ar10),
    ]
    .into_iter()
    .map(|(m, v)| MetricRow {
        metric: m.to_string(),
        value: v,
    })
    .collect();
    rows.extend(report.iou_thresholds.iter().zip(&report.ap_per_threshold).map(|(t, v)| MetricRow {
        metric: format!("AP@{t:.2}"),
        value: *v,
    }));
    write_csv(&out.with_extension("csv"), &rows)?;
    Ok(report)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub rows: usize,
    pub cols: usize,
    pub repeats: usize,
    pub hungarian_median_ms: f64,
    pub cost_matrix_median_ms: f64,
}

const BENCH_FRAMES: usize = 3;
const BENCH_GRID: usize = 8;
const BENCH_CLASSES: usize = 3;

/// Slots per gt in benchmark matrices: `ceil(1.2 n)`.
pub fn bench_cols(n: usize) -> usize {
    (6 * n).div_ceil(5)
}

fn median_ms(mut f: impl FnMut(), repeats: usize) -> f64 {
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    }
}

pub fn random_cost_matrix(rows: usize, cols: usize, seed: u64) -> CostMatrix {
    let mut rng = stream(seed, "bench-matrix", (rows * 1_000_003 + cols) as u64);
    CostMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect()).expect("rows <= cols")
}

fn bench_tracks(n_gt: usize, n_pred: usize, seed: u64) -> (Vec<GroundTruthTrack>, Vec<PredictionTrack>) {
    let mut rng = stream(seed, "bench-tracks", n_gt as u64);
    let g = BENCH_GRID;
    let gts = (0..n_gt)
        .map(|_| GroundTruthTrack {
            class_id: rng.gen_range(0..BENCH_CLASSES),
            masks: (0..BENCH_FRAMES).map(|_| Mask::from_fn(g, g, |_, _| rng.gen_bool(0.3))).collect(),
        })
        .collect();
    let preds = (0..n_pred)
        .map(|_| PredictionTrack {
            class_probs: (0..BENCH_FRAMES)
                .map(|_| {
                    let raw: Vec<f64> = (0..=BENCH_CLASSES).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / z).collect()
                })
                .collect(),
            mask_probs: (0..BENCH_FRAMES)
                .map(|_| SoftMask {
                    h: g,
                    w: g,
                    data: (0..g * g).map(|_| rng.gen_range(0.0..1.0)).collect(),
                })
                .collect(),
        })
        .collect();
    (gts, preds)
}

pub fn bench_size(n: usize, repeats: usize, seed: u64) -> anyhow::Result<BenchRow> {
    let cols = bench_cols(n);
    let m = random_cost_matrix(n, cols, seed);
    let mut failure = None;
    let hungarian_median_ms = median_ms(
        || {
            if let Err(e) = hungarian(&m) {
                failure = Some(e);
            }
        },
        repeats,
    );
    let (gts, preds) = bench_tracks(n, cols, seed);
    let cost = CostConfig::default();
    let cost_matrix_median_ms = median_ms(
        || {
            if let Err(e) = build_global_cost_matrix(&gts, &preds, &cost) {
                failure = Some(e);
            }
        },
        repeats,
    );
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(BenchRow {
        rows: n,
        cols,
        repeats,
        hungarian_median_ms,
        cost_matrix_median_ms,
    })
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    /// Median hungarian time on the 100x120 budget matrix.
    pub budget_median_ms: f64,
}

pub const BUDGET_ROWS: usize = 100;
pub const BUDGET_COLS: usize = 120;

pub fn cmd_bench(sizes: &[usize], repeats: usize, budget_ms: f64, seed: u64, out: &Path) -> anyhow::Result<BenchSummary> {
    if repeats == 0 {
        bail!("--repeats must be positive");
    }
    let rows = sizes.iter().map(|&n| bench_size(n, repeats, seed)).collect::<anyhow::Result<Vec<_>>>()?;
    write_csv(out, &rows)?;
    let m = random_cost_matrix(BUDGET_ROWS, BUDGET_COLS, seed);
    let budget_median_ms = median_ms(
        || {
            hungarian(&m).expect("valid matrix");
        },
        repeats,
    );
    if budget_median_ms >= budget_ms {
        bail!("hungarian on {BUDGET_ROWS}x{BUDGET_COLS} took {budget_median_ms:.2} ms median, budget {budget_ms} ms");
    }
    Ok(BenchSummary { rows, budget_median_ms })
}
