//! Acceptance gate: runs each criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tcovis_core::assignment::*;
use tcovis_core::cost::{global_matching_cost, mask_loss_from_logits, mask_loss_grad, CostConfig};
use tcovis_core::eval::{compute_metrics, EvalConfig};
use tcovis_core::model::*;
use tcovis_core::ste::*;
use tcovis_core::synth::{generate_corpus, swap_pair, NoiseConfig, SceneConfig, SwapMode};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let e = start.elapsed();
    if e < limit {
        Ok(())
    } else {
        Err(format!("took {e:?}, limit {limit:?}"))
    }
}

fn hungarian_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    for case in 0..200 {
        let rows = r.gen_range(1..=7);
        let cols = r.gen_range(rows..=9);
        let m = CostMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(0.0..10.0)).collect()).unwrap();
        let h = hungarian(&m).map_err(|e| e.to_string())?;
        let b = brute_force_assign(&m).map_err(|e| e.to_string())?;
        ensure!(h.total_cost == b.total_cost, "case {case}: cost {} vs {}", h.total_cost, b.total_cost);
        ensure!(h.pairs == b.pairs, "case {case}: pairs {:?} vs {:?}", h.pairs, b.pairs);
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!("200 matrices up to 7x9 agree exactly in {:?}", start.elapsed()))
}

/// One gt on the left half. Slot 0 is exact on frame 1 and then drifts to
/// the right half (the pre-swap identity); slot 1 is soft on frame 1 and
/// exact afterwards (the post-swap identity).
fn hand_built_swap() -> (Vec<GroundTruthTrack>, Vec<PredictionTrack>) {
    let left = Mask::from_fn(4, 4, |_, j| j < 2);
    let right = Mask::from_fn(4, 4, |_, j| j >= 2);
    let probs = vec![vec![0.9, 0.1]; 4];
    let pre = PredictionTrack {
        class_probs: probs.clone(),
        mask_probs: vec![SoftMask::from(&left), SoftMask::from(&right), SoftMask::from(&right), SoftMask::from(&right)],
    };
    let soft_left = SoftMask {
        h: 4,
        w: 4,
        data: left.values().map(|v| if v > 0.5 { 0.7 } else { 0.3 }).collect(),
    };
    let post = PredictionTrack {
        class_probs: probs,
        mask_probs: vec![soft_left, SoftMask::from(&left), SoftMask::from(&left), SoftMask::from(&left)],
    };
    let gt = GroundTruthTrack {
        class_id: 0,
        masks: vec![left; 4],
    };
    (vec![gt], vec![pre, post])
}

fn gia_dominance() -> Outcome {
    let start = Instant::now();
    let cfg = CostConfig::default();
    let spec = ClipSpec {
        frames: 6,
        height: 32,
        width: 32,
        stride: 2,
        num_classes: 4,
        num_slots: 6,
        embed_dim: 8,
    };
    let scene = SceneConfig {
        n_objects: [2, 4],
        ..SceneConfig::default()
    };
    let noise = NoiseConfig {
        swap_mode: SwapMode::EarlySwap,
        swap_frame: Some(2),
        ..NoiseConfig::default()
    };
    let corpus = generate_corpus(&spec, &scene, Some(&noise), 100, 2024).map_err(|e| e.to_string())?;
    let mut swapped = 0;
    for (i, clip) in corpus.clips.iter().enumerate() {
        let pred = clip.pred.as_ref().unwrap();
        let gia = global_instance_assignment(&clip.gt, pred, &cfg).unwrap();
        let loc = locpro_assignment(&clip.gt, pred, &cfg).unwrap();
        let g = assignment_total_global_cost(&gia, &clip.gt, pred, &cfg).unwrap();
        let l = assignment_total_global_cost(&loc, &clip.gt, pred, &cfg).unwrap();
        ensure!(g <= l, "clip {i}: gia {g} > locpro {l}");
        if swap_pair(&clip.gt, &noise).is_some() {
            swapped += 1;
            ensure!(g < l, "clip {i}: swap occurred but gia {g} == locpro {l}");
        }
    }
    ensure!(swapped > 0, "no clip had a swap");

    let (gts, preds) = hand_built_swap();
    let gia = global_instance_assignment(&gts, &preds, &cfg).unwrap();
    let loc = locpro_assignment(&gts, &preds, &cfg).unwrap();
    ensure!(gia.pairs == vec![(0, 1)], "hand-built: gia picked {:?}", gia.pairs);
    ensure!(loc.pairs == vec![(0, 0)], "hand-built: locpro picked {:?}", loc.pairs);
    let (g, l) = (
        global_matching_cost(&gts[0], &preds[1], &cfg).unwrap(),
        global_matching_cost(&gts[0], &preds[0], &cfg).unwrap(),
    );
    ensure!(g < l, "hand-built: post-swap cost {g} not below pre-swap {l}");
    within(start, Duration::from_secs(30))?;
    Ok(format!(
        "gia <= locpro on 100/100 clips, strict on {swapped}/{swapped} swapped; hand-built clip splits as expected"
    ))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = CostConfig::default();
    let mut r = rng(3);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (t, gh, gw) = (r.gen_range(1..=3), r.gen_range(1..=8), r.gen_range(1..=8));
        let gt: Vec<Mask> = (0..t).map(|_| random_mask(&mut r, gh, gw, 0.4)).collect();
        let logits: Vec<Vec<f64>> = (0..t).map(|_| (0..gh * gw).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
        let analytic = mask_loss_grad(&gt, &logits, &cfg).unwrap();
        for f in 0..t {
            for c in 0..gh * gw {
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus[f][c] += h;
                minus[f][c] -= h;
                let numeric = (mask_loss_from_logits(&gt, &plus, &cfg).unwrap()
                    - mask_loss_from_logits(&gt, &minus, &cfg).unwrap())
                    / (2.0 * h);
                let a = analytic[f][c];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                worst = worst.max(rel);
                ensure!(rel < 1e-4, "case {case} frame {f} cell {c}: analytic {a} numeric {numeric}");
            }
        }
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("100 instances, worst relative error {worst:.2e}"))
}

fn ste_invariants() -> Outcome {
    let mut r = rng(4);
    let mut worst_sum: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for case in 0..50 {
        let (n, c) = (r.gen_range(2..7), 4);
        let params = MhcaParams::random(c, n, 2, &mut r);
        let protos = Matrix::uniform(n, c, 1.0, &mut r);
        let spatial: Vec<SpatialFeature> = (0..n)
            .map(|_| SpatialFeature {
                vector: (0..c).map(|_| r.gen_range(-1.0..1.0)).collect(),
                empty: false,
            })
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permuted = MhcaParams {
            attention: params.attention.clone(),
            pos: params.pos.permute_rows(&perm),
        };
        let ps: Vec<SpatialFeature> = perm.iter().map(|&i| spatial[i].clone()).collect();
        let a = cross_attention_update(&protos, &spatial, &params).unwrap();
        let b = cross_attention_update(&protos.permute_rows(&perm), &ps, &permuted).unwrap();
        let d = max_abs_diff(&b.output.data, &a.output.permute_rows(&perm).data);
        worst_perm = worst_perm.max(d);
        ensure!(d <= 1e-9, "case {case}: permutation mismatch {d:e}");
        for s in a.row_sums().into_iter().chain(b.row_sums()) {
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        ensure!(worst_sum <= 1e-9, "case {case}: row sum off by {worst_sum:e}");
    }

    let field = FeatureMap {
        c: 3,
        h: 5,
        w: 4,
        data: [0.37, -2.5, 1e3].iter().flat_map(|&v| std::iter::repeat_n(v, 20)).collect(),
    };
    let mut mask = random_mask(&mut r, 5, 4, 0.5);
    mask.set(0, 0, true);
    let pooled = masked_average_pool(&field, &mask).unwrap();
    ensure!(!pooled.empty, "nonempty mask flagged empty");
    ensure!(max_abs_diff(&pooled.vector, &[0.37, -2.5, 1e3]) <= 1e-12, "constant pooling gave {:?}", pooled.vector);
    let empty = masked_average_pool(&field, &Mask::zeros(5, 4)).unwrap();
    ensure!(empty.empty && empty.vector == vec![0.0; 3], "empty pooling gave {empty:?}");

    // T = 1: enhancement never runs, so on/off must agree exactly.
    let (c, n) = (8, 4);
    let decoder = RefDecoderParams::random(c, 3, 2, 1, &mut r);
    let ste = SteParams {
        mhca: MhcaParams::random(c, n, 2, &mut r),
        threshold: 0.5,
    };
    let init = Matrix::uniform(n, c, 1.0, &mut r);
    let frames = vec![FrameInput {
        frame_queries: Matrix::uniform(n, c, 1.0, &mut r),
        pixels: FeatureMap::uniform(c, 6, 6, 1.0, &mut r),
    }];
    let on = run_clip(&init, &frames, &decoder, &ste, true).unwrap();
    let off = run_clip(&init, &frames, &decoder, &ste, false).unwrap();
    ensure!(on.tracks == off.tracks && on.frames == off.frames, "T=1 on/off differ");
    for f in &on.frames {
        for s in &f.decoder_attention_row_sums {
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
    }
    ensure!(worst_sum <= 1e-9, "decoder row sum off by {worst_sum:e}");
    Ok(format!(
        "50 instances: max row-sum error {worst_sum:.1e}, max permutation error {worst_perm:.1e}; pooling and T=1 checks hold"
    ))
}

fn mask_head_oracle() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (n, c, h, w) = (r.gen_range(1..6), r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let m = Matrix::uniform(n, c, 2.0, &mut r);
        let p = FeatureMap::uniform(c, h, w, 2.0, &mut r);
        let got = segment_frame(&m, &p).unwrap();
        for k in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += p.get(ch, i, j) * m.get(k, ch);
                    }
                    let d = (got[k].get(i, j) - 1.0 / (1.0 + (-dot).exp())).abs();
                    worst = worst.max(d);
                    ensure!(d <= 1e-12, "case {case} slot {k} cell ({i},{j}) off by {d:e}");
                }
            }
        }
    }
    Ok(format!("50 instances, max deviation {worst:.1e}"))
}

fn metric_sanity() -> Outcome {
    let spec = ClipSpec {
        frames: 3,
        height: 32,
        width: 32,
        stride: 2,
        num_classes: 4,
        num_slots: 6,
        embed_dim: 8,
    };
    let scene = SceneConfig {
        n_objects: [1, 4],
        ..SceneConfig::default()
    };
    let eval = EvalConfig::default();
    let perfect = generate_corpus(&spec, &scene, Some(&NoiseConfig::default()), 10, 6).unwrap();
    let m = compute_metrics(&perfect, &eval).unwrap();
    ensure!(m.ap == 1.0 && m.ap50 == 1.0 && m.ap75 == 1.0, "perfect corpus: {m:?}");

    let single = Corpus {
        header: None,
        spec: ClipSpec {
            frames: 1,
            height: 10,
            width: 10,
            stride: 1,
            num_classes: 1,
            num_slots: 1,
            embed_dim: 1,
        },
        seed: 0,
        clips: vec![Clip {
            gt: vec![GroundTruthTrack {
                class_id: 0,
                masks: vec![Mask::from_fn(10, 10, |i, _| i < 6)],
            }],
            pred: Some(vec![PredictionTrack {
                class_probs: vec![vec![0.9, 0.1]],
                mask_probs: vec![SoftMask::filled(10, 10, 1.0)],
            }]),
        }],
    };
    let m = compute_metrics(&single, &eval).unwrap();
    ensure!(m.ap == 0.3 && m.ap50 == 1.0 && m.ap75 == 0.0, "IoU 0.6 clip: {m:?}");

    let noise = NoiseConfig {
        mask_jitter: 0.6,
        class_confusion: 0.5,
        sharpness: 2.0,
        ..NoiseConfig::default()
    };
    let mut r = rng(6);
    for seed in 0..10 {
        let corpus = generate_corpus(&spec, &scene, Some(&noise), 8, seed).unwrap();
        let base = compute_metrics(&corpus, &eval).unwrap();
        let mut shuffled = corpus.clone();
        shuffled.clips.shuffle(&mut r);
        for clip in &mut shuffled.clips {
            clip.pred.as_mut().unwrap().shuffle(&mut r);
        }
        let other = compute_metrics(&shuffled, &eval).unwrap();
        ensure!(base == other, "seed {seed}: permuted corpus gave {other:?} vs {base:?}");
    }
    Ok("perfect = 1.0 exactly; IoU 0.6 clip AP = 0.3; invariant to clip/slot permutation on 10 corpora".into())
}

fn run_cli(args: &[&str], threads: usize) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tcovis"))
        .args(args)
        .env("TCOVIS_THREADS", threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "tcovis {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let config = d.join("run.json");
    std::fs::write(
        &config,
        r#"{
  "version": 1,
  "spec": {"T": 4, "H": 32, "W": 32, "S": 2, "K": 4, "N_v": 6, "C": 8},
  "scene": {"n_objects": [1, 4], "entry_frame": [1, 2]},
  "noise": {"mask_jitter": 0.3, "class_confusion": 0.2, "swap_mode": "early_swap", "swap_frame": 2, "sharpness": 4.0},
  "clips": 24,
  "demo": {"n_heads": 2, "depth": 2}
}"#,
    )
    .map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap();
    let files = ["corpus.json", "audit.json", "audit.csv", "trace.json", "report.json", "report.csv"];
    let mut reference: Option<Vec<Vec<u8>>> = None;
    let mut runs = 0;
    for (threads, rep) in [(1, 0), (1, 1), (2, 0), (8, 0), (8, 1)] {
        let run = d.join(format!("t{threads}-{rep}"));
        let p = |f: &str| run.join(f).to_str().unwrap().to_string();
        run_cli(&["gen", cfg, "--seed", "99", "--out", &p("corpus.json")], threads)?;
        run_cli(&["assign", &p("corpus.json"), "--strategy", "both", "--out", &p("audit.json")], threads)?;
        run_cli(&["enhance", "--demo", cfg, "--seed", "99", "--out", &p("trace.json")], threads)?;
        run_cli(&["eval", &p("corpus.json"), "--out", &p("report.json")], threads)?;
        let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(run.join(f)).unwrap()).collect();
        match &reference {
            None => reference = Some(bytes),
            Some(r) => {
                for (i, f) in files.iter().enumerate() {
                    ensure!(r[i] == bytes[i], "{f} differs with {threads} threads (repeat {rep})");
                }
            }
        }
        runs += 1;
    }
    Ok(format!("{} output files byte-identical across {runs} runs at 1, 2 and 8 threads", files.len()))
}

fn performance_floor() -> Outcome {
    let mut r = rng(8);
    let m = CostMatrix::new(100, 120, (0..12_000).map(|_| r.gen_range(0.0..10.0)).collect()).unwrap();
    let mut times: Vec<Duration> = (0..5)
        .map(|_| {
            let start = Instant::now();
            let a = hungarian(&m).unwrap();
            assert_eq!(a.pairs.len(), 100);
            start.elapsed()
        })
        .collect();
    times.sort();
    let median = times[2];
    ensure!(median < Duration::from_millis(250), "100x120 median {median:?}");
    Ok(format!("100x120 median {median:?} (< 250 ms)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("hungarian matches brute-force oracle", hungarian_oracle),
        ("global assignment dominates LocPro", gia_dominance),
        ("mask loss gradient check", gradient_check),
        ("enhancement invariants", ste_invariants),
        ("mask head oracle", mask_head_oracle),
        ("metric sanity", metric_sanity),
        ("determinism across runs and threads", determinism),
        ("performance floor", performance_floor),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} — {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name} — {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed in {:?}", criteria.len() - failed, criteria.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
