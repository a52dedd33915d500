//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use rand::Rng;
use viewcond::analysis::{geometric_correspondence_score, lds_score};
use viewcond::attention::{aggregated_attention, attention_backward, AttentionBlockInput, Mat};
use viewcond::features::{extract_features, FeatureFamily, ViewContext};
use viewcond::geometry::{anchor_pixel, rasterize, warp_features, FeatureGrid, WarpedPlane};
use viewcond::io::{read_rnvt, save_bundle, write_rnvt, RnvtTensor, SceneBundle, TensorData};
use viewcond::metrics::{psnr, ssim};
use viewcond::probe::{loss_and_grad, ProbeArch, ProbeDecoder, ProbeSample, TrainConfig};
use viewcond::protocol::{
    benchmark_families, probe_experiment, robustness, warped_image_baseline, ProbeExperiment, Split, Suite,
    SuiteConfig,
};
use viewcond::scene::{ArcSpec, SceneSpec};
use viewcond::Grid;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bundle(seed: u64) -> SceneBundle {
    SceneBundle::generate(seed, &SceneSpec::default(), &ArcSpec::default()).unwrap()
}

fn ctx(b: &SceneBundle, k: usize) -> ViewContext {
    ViewContext { norm: b.manifest.normalization, scene_seed: b.manifest.seed, view_index: k as u64 }
}

fn rasterizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut mismatches = 0;
    let mut points = 0;
    for _ in 0..100 {
        let (w, h) = (r.random_range(1..=64), r.random_range(1..=64));
        let cam = random_camera(&mut r, w, h);
        let channels = r.random_range(0..=4);
        let cloud = random_cloud(&mut r, 10_000, channels);
        points += cloud.len();
        let got = rasterize(&cloud, &cam, (w, h)).unwrap();
        let want = brute_force_rasterize(&cloud, &cam, w, h);
        let same_depth = got.depth.iter().zip(&want.depth).all(|(a, b)| a.to_bits() == b.to_bits());
        if got.mask != want.mask || !same_depth || got.payload.data() != &want.payload[..] {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 60.0,
        format!("{mismatches}/100 clouds differ ({points} points), {secs:.1} s"),
    )
}

fn identity_warp() -> Outcome {
    let fam = FeatureFamily::oracle_geom(0.0, 0);
    let (mut kept, mut valid) = (0usize, 0usize);
    let mut worst = 1.0f64;
    for seed in 0..10 {
        let b = bundle(500 + seed);
        for (k, v) in b.views.iter().enumerate() {
            let grid = extract_features(v, &fam, 8, &ctx(&b, k)).unwrap();
            let plane = warp_features(&[grid.clone()], &[v.pointmap.clone()], &[v.camera.clone()], &v.camera).unwrap();
            let (mut kv, mut vv) = (0, 0);
            for cell in 0..grid.tokens.cells() {
                let (ti, tj) = (cell / grid.cols(), cell % grid.cols());
                if !grid.valid[cell] || !v.pointmap.is_valid(anchor_pixel(ti, tj, 8, v.rgb.width())) {
                    continue;
                }
                vv += 1;
                kv += usize::from(!plane.mask[cell] && plane.payload.cell(cell) == grid.tokens.cell(cell));
            }
            if vv > 0 {
                worst = worst.min(kv as f64 / vv as f64);
            }
            kept += kv;
            valid += vv;
        }
    }
    check(
        worst >= 0.99,
        format!("{kept}/{valid} tokens kept, worst view {:.4}", worst),
    )
}

fn attention_loss(input: &AttentionBlockInput, upstream: &Mat) -> f64 {
    let out = aggregated_attention(input, false).unwrap().output;
    out.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
}

fn attention_matrices(input: &mut AttentionBlockInput) -> Vec<&mut Mat> {
    let mut out = vec![&mut input.q, &mut input.target_kv.0, &mut input.target_kv.1];
    for (k, v) in &mut input.ref_kv {
        out.push(k);
        out.push(v);
    }
    out
}

fn attention_contract() -> Outcome {
    let mut r = rng(77);
    let (mut sum_dev, mut perm_dev, mut naive_dev, mut fd_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let refs: Vec<usize> = (0..r.random_range(2..5)).map(|_| r.random_range(1..5)).collect();
        let (t, d, dv) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..4));
        let mut input = random_attention_input(&mut r, t, &refs, d, dv);
        input.q.data.iter_mut().for_each(|x| *x *= r.random_range(0.1..20.0));
        let out = aggregated_attention(&input, true).unwrap();
        let w = out.weights.unwrap();
        for row in 0..w.rows {
            sum_dev = sum_dev.max((w.row(row).iter().sum::<f64>() - 1.0).abs());
        }
        for (row, want) in naive_attention(&input).iter().enumerate() {
            for (a, b) in out.output.row(row).iter().zip(want) {
                naive_dev = naive_dev.max((a - b).abs());
            }
        }
        let mut perm = input.clone();
        perm.ref_kv.reverse();
        perm.ref_kv.rotate_left(1);
        let other = aggregated_attention(&perm, false).unwrap().output;
        for (a, b) in out.output.data.iter().zip(&other.data) {
            perm_dev = perm_dev.max((a - b).abs());
        }
    }
    for _ in 0..5 {
        let input = random_attention_input(&mut r, 3, &[2, 3], 3, 2);
        let upstream = random_mat(&mut r, 3, 2);
        let g = attention_backward(&input, &upstream).unwrap();
        let mut analytic = vec![&g.dq, &g.d_target.0, &g.d_target.1];
        for (k, v) in &g.d_refs {
            analytic.push(k);
            analytic.push(v);
        }
        let h = 1e-5;
        for (m, grad) in analytic.iter().enumerate() {
            for e in 0..grad.data.len() {
                let mut plus = input.clone();
                attention_matrices(&mut plus)[m].data[e] += h;
                let mut minus = input.clone();
                attention_matrices(&mut minus)[m].data[e] -= h;
                let numeric = (attention_loss(&plus, &upstream) - attention_loss(&minus, &upstream)) / (2.0 * h);
                fd_err = fd_err.max(rel_err(grad.data[e], numeric));
            }
        }
    }
    check(
        sum_dev <= 1e-6 && perm_dev <= 1e-12 && naive_dev <= 1e-10 && fd_err <= 1e-4,
        format!("row sum {sum_dev:.1e}, permutation {perm_dev:.1e}, naive {naive_dev:.1e}, finite diff {fd_err:.1e}"),
    )
}

fn probe_sample(seed: u64, rows: usize, cols: usize, c: usize, patch: usize) -> ProbeSample {
    let mut r = rng(seed);
    let mut payload = Grid::zeros(rows, cols, c);
    payload.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    let mask: Vec<bool> = (0..rows * cols).map(|_| r.random_bool(0.25)).collect();
    for (cell, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        payload.cell_mut(cell).fill(0.0);
    }
    let target = Grid::from_vec(
        rows * patch,
        cols * patch,
        3,
        (0..rows * cols * patch * patch * 3).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let input = WarpedPlane { payload, depth: vec![1.0; rows * cols], mask, has_coords: false };
    ProbeSample { input, target }
}

fn probe_gradients() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut worst = 0.0f64;
    for attn in [false, true] {
        let arch = ProbeArch { c_in: 6, c_red: 4, hidden: 5, patch: 2, attn, pos_embed: attn };
        let mut dec = ProbeDecoder::new(arch, 3).unwrap();
        let sample = probe_sample(4 + attn as u64, 8, 8, 6, 2);
        let (_, g) = loss_and_grad(&dec, &sample).unwrap();
        let h = 1e-5;
        let mut err = 0.0f64;
        for k in 0..dec.num_params() {
            let orig = dec.params()[k];
            dec.params_mut()[k] = orig + h;
            let lp = loss_and_grad(&dec, &sample).unwrap().0;
            dec.params_mut()[k] = orig - h;
            let lm = loss_and_grad(&dec, &sample).unwrap().0;
            dec.params_mut()[k] = orig;
            err = err.max(rel_err(g[k], (lp - lm) / (2.0 * h)));
        }
        details.push(format!("attn={attn}: {} params, max rel err {err:.1e}", dec.num_params()));
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-4 && secs < 300.0, format!("{}, {secs:.1} s", details.join("; ")))
}

struct Benchmark {
    suite: Suite,
    experiments: Vec<ProbeExperiment>,
    secs: f64,
}

fn benchmark() -> Benchmark {
    let start = Instant::now();
    let suite = Suite::generate(SuiteConfig::benchmark()).unwrap();
    let cfg = TrainConfig::benchmark();
    let experiments = benchmark_families().iter().map(|f| probe_experiment(&suite, f, &cfg).unwrap()).collect();
    Benchmark { suite, experiments, secs: start.elapsed().as_secs_f64() }
}

fn feature_ordering(bench: &Benchmark) -> Outcome {
    let psnr_of = |name: &str| {
        bench.experiments.iter().find(|e| e.family == name).unwrap().report.overall.mean_psnr_db
    };
    let (rnd, app, mix) = (psnr_of("random"), psnr_of("appearance"), psnr_of("mixed"));
    let test_scenes = match bench.suite.config.split {
        Split::HeldOutScenes { test_scenes } => test_scenes,
        Split::HeldOutViews { .. } => bench.suite.config.num_scenes,
    };
    check(
        mix - app >= 0.5 && app - rnd >= 0.5 && bench.secs < 1800.0,
        format!(
            "{test_scenes} test scenes: random {rnd:.2} dB, appearance {app:.2} dB, mixed {mix:.2} dB \
             (gaps {:.2}, {:.2}); pipeline {:.0} s",
            app - rnd,
            mix - app,
            bench.secs
        ),
    )
}

fn view_count(bench: &Benchmark) -> Outcome {
    let rows = warped_image_baseline(&bench.suite).unwrap();
    let mean = |c: usize| {
        let v: Vec<f64> = rows.iter().filter(|r| r.view_count == c).map(|r| r.psnr_db).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (p1, p2) = (mean(1), mean(2));
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.scene_seed).collect();
    seeds.dedup();
    let mut bad = 0;
    for s in &seeds {
        let holes = |c: usize| {
            let v: Vec<f64> = rows.iter().filter(|r| r.scene_seed == *s && r.view_count == c).map(|r| r.hole_fraction).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        bad += usize::from(holes(2) > holes(1));
    }
    check(
        p2 - p1 >= 0.5 && bad == 0,
        format!("1 view {p1:.2} dB, 2 views {p2:.2} dB; {bad}/{} scenes with more holes at 2 views", seeds.len()),
    )
}

fn correspondence() -> Outcome {
    let run = |fam: &FeatureFamily| {
        let (mut hits, mut total, mut chance) = (0usize, 0usize, 0.0);
        for s in 600..610 {
            let b = bundle(s);
            for (a, c) in [(0, 1), (2, 3), (4, 5)] {
                let ga = extract_features(&b.views[a], fam, 8, &ctx(&b, a)).unwrap();
                let gb = extract_features(&b.views[c], fam, 8, &ctx(&b, c)).unwrap();
                let r = geometric_correspondence_score(&ga, &gb, &b.views[a], &b.views[c], 1, 1000, s).unwrap();
                let valid_b = gb.valid_count() as f64;
                for q in &r.per_query {
                    hits += usize::from(q.hit);
                    chance += neighbourhood(&gb, q.ground_truth, 1) as f64 / valid_b;
                }
                total += r.num_queries;
            }
        }
        (hits as f64 / total as f64, chance / total as f64)
    };
    let (oracle, _) = run(&FeatureFamily::oracle_geom(0.0, 0));
    let (random, chance) = run(&FeatureFamily::random(7));
    check(
        oracle >= 0.95 && random <= 2.0 * chance,
        format!("oracle PCK@1 {oracle:.4}, random PCK@1 {random:.4} (chance {chance:.4})"),
    )
}

/// Valid cells of `grid` within Chebyshev distance `tau` of `cell`.
fn neighbourhood(grid: &FeatureGrid, cell: (usize, usize), tau: usize) -> usize {
    let mut n = 0;
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            if r.abs_diff(cell.0) <= tau && c.abs_diff(cell.1) <= tau && grid.valid[r * grid.cols() + c] {
                n += 1;
            }
        }
    }
    n
}

fn removal(bench: &Benchmark) -> Outcome {
    let mixed = bench.experiments.iter().find(|e| e.family == "mixed").unwrap();
    let rows = robustness(&bench.suite, &FeatureFamily::mixed(0.0, 7), &mixed.decoder, &[0.5], 11).unwrap();
    let drop = -rows[1].delta_psnr_db;
    check(
        drop <= 1.0,
        format!("mixed {:.2} dB intact, {:.2} dB at 50% removal (drop {drop:.3} dB)", rows[0].psnr_db, rows[1].psnr_db),
    )
}

fn metric_units() -> Outcome {
    let mut r = rng(9);
    let a = Grid::from_vec(16, 16, 3, (0..768).map(|_| r.random_range(0.0..0.9)).collect()).unwrap();
    let p = psnr(&a, &a.map(|v| v + 0.1), None).unwrap();
    let s = ssim(&a, &a).unwrap();
    let constant = FeatureGrid::new(Grid::from_vec(8, 8, 3, [0.3, -1.1, 2.0].repeat(64)).unwrap(), 8, vec![true; 64]).unwrap();
    let lds = lds_score(&constant, 1, 4).unwrap();
    check(
        (p - 20.0).abs() <= 1e-9 && (s - 1.0).abs() <= 1e-9 && lds == 0.0,
        format!("PSNR {p:.12}, SSIM {s:.12}, LDS {lds}"),
    )
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(10);
    let shapes: Vec<Vec<u64>> = vec![vec![], vec![0], vec![3, 0, 2], vec![1], vec![2, 3], vec![2, 1, 4, 3]];
    let mut failures = Vec::new();
    let mut count = 0;
    for dims in &shapes {
        let n: usize = dims.iter().product::<u64>() as usize;
        let mut f64s: Vec<f64> = (0..n).map(|_| f64::from_bits(r.random())).collect();
        let mut f32s: Vec<f32> = (0..n).map(|_| f32::from_bits(r.random())).collect();
        // make sure special values are exercised where there is room
        for (k, v) in [f64::NAN, -0.0, f64::INFINITY, f64::MIN_POSITIVE / 2.0].into_iter().enumerate().take(n) {
            f64s[k] = v;
            f32s[k] = v as f32;
        }
        let datas = [
            TensorData::F32(f32s),
            TensorData::F64(f64s),
            TensorData::U8((0..n).map(|_| r.random()).collect()),
            TensorData::I64((0..n).map(|_| r.random()).collect()),
        ];
        for data in datas {
            let t = RnvtTensor::new(dims.clone(), data).unwrap();
            let path = dir.path().join(format!("t{count}.rnvt"));
            count += 1;
            write_rnvt(&path, &t).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            let back = read_rnvt(&path).unwrap();
            if back.encode() != bytes || bytes != t.encode() || back.dims() != t.dims() {
                failures.push(format!("{:?} {:?}", t.dtype(), dims));
            }
        }
    }
    let (a, b) = (dir.path().join("scene_a"), dir.path().join("scene_b"));
    save_bundle(&a, &bundle(42)).unwrap();
    save_bundle(&b, &bundle(42)).unwrap();
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    let same_scene = !ta.is_empty() && ta == tb;
    check(
        failures.is_empty() && same_scene,
        format!(
            "{count} tensors, failures {failures:?}; scene files {} identical: {same_scene}",
            ta.len()
        ),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {id:>2} {name}: {detail} [{secs:.1} s]");
    outcome.is_ok()
}

fn main() {
    let mut passed = Vec::new();
    passed.push(run(1, "rasterizer equals brute force", rasterizer_oracle));
    passed.push(run(2, "identity warp", identity_warp));
    passed.push(run(3, "attention contract", attention_contract));
    passed.push(run(4, "probe gradient check", probe_gradients));
    let bench = catch_unwind(benchmark).ok();
    let missing = || Err("benchmark pipeline failed".to_string());
    passed.push(run(5, "feature family ordering", || bench.as_ref().map_or_else(missing, feature_ordering)));
    passed.push(run(6, "reference view count", || bench.as_ref().map_or_else(missing, view_count)));
    passed.push(run(7, "correspondence sanity", correspondence));
    passed.push(run(8, "point removal robustness", || bench.as_ref().map_or_else(missing, removal)));
    passed.push(run(9, "metric units", metric_units));
    passed.push(run(10, "format round trip and determinism", format_round_trip));
    let n = passed.iter().filter(|p| **p).count();
    println!("acceptance: {n}/{} criteria passed", passed.len());
    if n != passed.len() {
        std::process::exit(1);
    }
}
