//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when any
//! criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use casc_core::backends::AnalyticBackend;
use casc_core::labeling::{assign_label, clip_probabilities, layer_cam, threshold_mask};
use casc_core::metrics::{dsc, hd95};
use casc_core::orchestrator::{self, plan, PipelineConfig, RunOptions, Stage};
use casc_core::prompting::{build_prompts, extract_roi, PointLabel};
use casc_core::s3f::{self, filter_pool, PoolEntry, PoolStage, TrainingPool};
use casc_core::synth::{self, SynthCase, SynthConfig};
use casc_core::tensor::Tensor;
use casc_core::{Grid2, Grid3, Mask2D, Mask3D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (bool, String);

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("metric oracle equivalence", metric_oracle),
        ("layer-cam oracle", layer_cam_oracle),
        ("probability properties", probability_properties),
        ("threshold/filter rank correctness", rank_correctness),
        ("prompt geometry", prompt_geometry),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("s3f validity", s3f_validity),
        ("determinism and resume", determinism_and_resume),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let (pass, detail) = match std::panic::catch_unwind(check) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += !pass as usize;
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xACCE_0000 + tag)
}

// ---------------------------------------------------------------- metrics

type Voxel = (usize, usize, usize);

fn voxels(m: &Mask3D) -> HashSet<Voxel> {
    let (d, h, w) = m.shape();
    let mut out = HashSet::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if m[(z, y, x)] {
                    out.insert((z, y, x));
                }
            }
        }
    }
    out
}

fn oracle_surface(set: &HashSet<Voxel>) -> Vec<Voxel> {
    let mut out: Vec<Voxel> = set
        .iter()
        .copied()
        .filter(|&(z, y, x)| {
            let n = [
                z.checked_sub(1).map(|z| (z, y, x)),
                Some((z + 1, y, x)),
                y.checked_sub(1).map(|y| (z, y, x)),
                Some((z, y + 1, x)),
                x.checked_sub(1).map(|x| (z, y, x)),
                Some((z, y, x + 1)),
            ];
            n.iter().any(|p| p.is_none_or(|p| !set.contains(&p)))
        })
        .collect();
    out.sort();
    out
}

fn oracle_hd95(a: &Mask3D, b: &Mask3D, s: [f64; 3]) -> f64 {
    let (va, vb) = (voxels(a), voxels(b));
    let (d, h, w) = a.shape();
    match (va.is_empty(), vb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => {
            return ((d as f64 * s[0]).powi(2) + (h as f64 * s[1]).powi(2) + (w as f64 * s[2]).powi(2)).sqrt()
        }
        _ => {}
    }
    let (sa, sb) = (oracle_surface(&va), oracle_surface(&vb));
    let dist = |p: Voxel, q: Voxel| {
        let dz = (p.0 as f64 - q.0 as f64) * s[0];
        let dy = (p.1 as f64 - q.1 as f64) * s[1];
        let dx = (p.2 as f64 - q.2 as f64) * s[2];
        (dz * dz + dy * dy + dx * dx).sqrt()
    };
    let mut all = Vec::new();
    for (from, to) in [(&sa, &sb), (&sb, &sa)] {
        for &p in from.iter() {
            all.push(to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
    }
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let rank = ((95 * n).div_ceil(100)).clamp(1, n);
    all[rank - 1]
}

fn random_mask3(r: &mut ChaCha8Rng, shape: Voxel) -> Mask3D {
    match r.gen_range(0..20) {
        0 => Grid3::filled(shape, false),
        1 => Grid3::filled(shape, true),
        2..=9 => {
            let p = r.gen_range(0.02..0.6);
            Grid3::from_fn(shape, |_, _, _| r.gen_bool(p))
        }
        _ => {
            // a few overlapping boxes
            let mut m = Grid3::filled(shape, false);
            for _ in 0..r.gen_range(1..4) {
                let lo = [shape.0, shape.1, shape.2].map(|n| r.gen_range(0..n));
                let hi = [0, 1, 2].map(|k| r.gen_range(lo[k]..[shape.0, shape.1, shape.2][k]));
                for z in lo[0]..=hi[0] {
                    for y in lo[1]..=hi[1] {
                        for x in lo[2]..=hi[2] {
                            m[(z, y, x)] = true;
                        }
                    }
                }
            }
            m
        }
    }
}

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut r = rng(1);
    let pairs = 250;
    let (mut dsc_bad, mut worst) = (0, 0.0f64);
    for i in 0..pairs {
        let shape = (r.gen_range(1..=16), r.gen_range(1..=16), r.gen_range(1..=16));
        let spacing = if i % 2 == 0 {
            [1.0; 3]
        } else {
            [0; 3].map(|_| r.gen_range(0.3..3.0))
        };
        let a = random_mask3(&mut r, shape);
        let b = random_mask3(&mut r, shape);
        let (va, vb) = (voxels(&a), voxels(&b));
        let want = if va.is_empty() && vb.is_empty() {
            1.0
        } else {
            2.0 * va.intersection(&vb).count() as f64 / (va.len() + vb.len()) as f64
        };
        if dsc(&a, &b).unwrap() != want {
            dsc_bad += 1;
        }
        let got = hd95(&a, &b, spacing, None).unwrap();
        worst = worst.max((got - oracle_hd95(&a, &b, spacing)).abs());
    }
    let secs = start.elapsed();
    (
        dsc_bad == 0 && worst <= 1e-9 && secs < Duration::from_secs(60),
        format!(
            "{pairs} pairs, {dsc_bad} dsc mismatches, max |hd95 - oracle| = {worst:.2e} mm, {:.1}s",
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- labeling

fn layer_cam_oracle() -> Check {
    let mut r = rng(2);
    let n = 120;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let k = r.gen_range(1..=8);
        let g: Vec<[[f64; 8]; 8]> = (0..k)
            .map(|_| {
                let mut a = [[0.0; 8]; 8];
                for row in a.iter_mut() {
                    for v in row.iter_mut() {
                        *v = r.gen_range(-1.0..1.0);
                    }
                }
                a
            })
            .collect();
        let mut want = [[0.0f64; 8]; 8];
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for ch in &g {
                    let mut mean = 0.0;
                    for row in ch {
                        for v in row {
                            mean += v;
                        }
                    }
                    mean /= 64.0;
                    s += mean * ch[i][j].max(0.0);
                }
                want[i][j] = s.max(0.0);
            }
        }
        let grids: Vec<Grid2<f64>> = g
            .iter()
            .map(|a| Grid2::from_fn(8, 8, |i, j| a[i][j]))
            .collect();
        let got = layer_cam(&grids).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                worst = worst.max((got[(i, j)] - want[i][j]).abs());
            }
        }
    }
    (worst <= 1e-9, format!("{n} random 8x8 inputs, max deviation {worst:.2e}"))
}

fn random_vec(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            return v;
        }
    }
}

fn probability_properties() -> Check {
    let mut r = rng(3);
    let n = 150;
    let (mut sum_bad, mut argmax_bad, mut uniform_bad) = (0, 0, 0);
    for _ in 0..n {
        let dim = r.gen_range(3..48);
        let classes = r.gen_range(2..=5).min(dim - 1);
        let image = random_vec(&mut r, dim);
        let texts: Vec<Vec<f64>> = (0..classes).map(|_| random_vec(&mut r, dim)).collect();
        let p = clip_probabilities(&image, &texts).unwrap();
        if (p.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            sum_bad += 1;
        }
        let scale = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let image2 = scale(&image, r.gen_range(0.01..100.0));
        let texts2: Vec<Vec<f64>> = texts.iter().map(|t| scale(t, r.gen_range(0.01..100.0))).collect();
        if assign_label(&clip_probabilities(&image2, &texts2).unwrap()) != assign_label(&p) {
            argmax_bad += 1;
        }
        // texts at a common angle to the image: t_k = a*x + b*u_k with
        // orthonormal u_k orthogonal to x
        let basis = gram_schmidt(&mut r, dim, classes + 1);
        let x = scale(&basis[0], r.gen_range(0.1..10.0));
        let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(0.1..2.0));
        let sym: Vec<Vec<f64>> = (1..=classes)
            .map(|k| (0..dim).map(|i| a * basis[0][i] + b * basis[k][i]).collect())
            .collect();
        let u = clip_probabilities(&x, &sym).unwrap();
        if u.probs.iter().any(|&q| (q - 1.0 / classes as f64).abs() > 1e-9) {
            uniform_bad += 1;
        }
    }
    (
        sum_bad + argmax_bad + uniform_bad == 0,
        format!(
            "{n} vector sets: {sum_bad} sum violations, {argmax_bad} argmax changes under rescaling, {uniform_bad} non-uniform symmetric outputs"
        ),
    )
}

fn gram_schmidt(r: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < count {
        let mut v = random_vec(r, dim);
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn random_brain(r: &mut ChaCha8Rng, h: usize, w: usize) -> Mask2D {
    let p = r.gen_range(0.3..1.0);
    let mut m = Grid2::from_fn(h, w, |_, _| r.gen_bool(p));
    let (rr, cc) = (r.gen_range(0..h), r.gen_range(0..w));
    m[(rr, cc)] = true;
    m
}

fn distinct_cam(r: &mut ChaCha8Rng, h: usize, w: usize) -> Grid2<f64> {
    let mut values: Vec<f64> = (0..h * w).map(|i| i as f64 / (h * w) as f64).collect();
    values.shuffle(r);
    Grid2::from_vec(h, w, values).unwrap()
}

fn pool_of(scores: &[f64]) -> TrainingPool {
    TrainingPool::new(
        PoolStage::D3,
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| PoolEntry {
                volume_id: format!("v{i}"),
                label_ref: String::new(),
                score: Some(s),
                retained: true,
            })
            .collect(),
    )
}

fn rank_correctness() -> Check {
    let mut r = rng(4);
    let mut notes = Vec::new();
    // top-alpha selection against a rank-order oracle
    let (mut count_bad, mut order_bad) = (0, 0);
    for _ in 0..100 {
        let (h, w) = (r.gen_range(2..24), r.gen_range(2..24));
        let brain = random_brain(&mut r, h, w);
        let cam = distinct_cam(&mut r, h, w);
        let alpha = r.gen_range(0.0..=100.0);
        let sel = threshold_mask(&cam, alpha, &brain).unwrap();
        let n = brain.count();
        if (sel.count() as f64 - alpha * n as f64 / 100.0).abs() > 1.0 {
            count_bad += 1;
        }
        let mut inside: Vec<f64> = Vec::new();
        let mut lowest_selected = f64::INFINITY;
        for (i, (&b, &s)) in brain.data().iter().zip(sel.data()).enumerate() {
            if s && !b {
                order_bad += 1;
            }
            if b {
                inside.push(cam.data()[i]);
                if s {
                    lowest_selected = lowest_selected.min(cam.data()[i]);
                }
            }
        }
        let above = inside.iter().filter(|&&v| v >= lowest_selected).count();
        if sel.any() && above != sel.count() {
            order_bad += 1;
        }
    }
    notes.push(format!("threshold: {count_bad} count and {order_bad} rank violations in 100"));
    // ten distinct scores at beta 20
    let mut keep_bad = 0;
    for _ in 0..20 {
        let mut scores: Vec<f64> = (0..10).map(|i| i as f64 / 10.0 + r.gen_range(0.0..0.05)).collect();
        scores.shuffle(&mut r);
        let kept = filter_pool(&pool_of(&scores), 20.0).unwrap().retained().count();
        if kept != 8 {
            keep_bad += 1;
        }
    }
    notes.push(format!("beta=20 over 10 distinct: {keep_bad} of 20 draws not keeping 8"));
    let mut alpha_bad = 0;
    for _ in 0..50 {
        let (h, w) = (r.gen_range(2..24), r.gen_range(2..24));
        let brain = random_brain(&mut r, h, w);
        let cam = distinct_cam(&mut r, h, w);
        let (a1, a2) = (r.gen_range(0.0..=100.0f64), r.gen_range(0.0..=100.0f64));
        let (lo, hi) = (a1.min(a2), a1.max(a2));
        let s1 = threshold_mask(&cam, lo, &brain).unwrap();
        let s2 = threshold_mask(&cam, hi, &brain).unwrap();
        if s1.data().iter().zip(s2.data()).any(|(&x, &y)| x && !y) {
            alpha_bad += 1;
        }
    }
    let mut beta_bad = 0;
    for _ in 0..50 {
        let n = r.gen_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let (b1, b2) = (r.gen_range(0.0..99.9f64), r.gen_range(0.0..99.9f64));
        let (lo, hi) = (b1.min(b2), b1.max(b2));
        let k1 = filter_pool(&pool_of(&scores), lo).unwrap();
        let k2 = filter_pool(&pool_of(&scores), hi).unwrap();
        if k1.entries.iter().zip(&k2.entries).any(|(x, y)| y.retained && !x.retained) {
            beta_bad += 1;
        }
    }
    notes.push(format!("monotonicity: {alpha_bad} alpha and {beta_bad} beta violations in 50 each"));
    (
        count_bad + order_bad + keep_bad + alpha_bad + beta_bad == 0,
        notes.join("; "),
    )
}

// ---------------------------------------------------------------- prompting

fn random_blobs(r: &mut ChaCha8Rng, h: usize, w: usize) -> Mask2D {
    let mut m = Grid2::filled(h, w, false);
    for _ in 0..r.gen_range(1..4) {
        let (cr, cc) = (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64));
        let (ar, ac) = (r.gen_range(0.5..h as f64 / 2.0 + 1.0), r.gen_range(0.5..w as f64 / 2.0 + 1.0));
        let ring = r.gen_bool(0.3);
        for y in 0..h {
            for x in 0..w {
                let q = ((y as f64 - cr) / ar).powi(2) + ((x as f64 - cc) / ac).powi(2);
                if q <= 1.0 && !(ring && q < 0.4) {
                    m[(y, x)] = true;
                }
            }
        }
    }
    if !m.any() {
        let (y, x) = (r.gen_range(0..h), r.gen_range(0..w));
        m[(y, x)] = true;
    }
    m
}

fn prompt_geometry() -> Check {
    let mut r = rng(5);
    let n = 220;
    let (mut tight, mut fg, mut bg, mut equiv) = (0, 0, 0, 0);
    for _ in 0..n {
        let (h, w) = (r.gen_range(1..40), r.gen_range(1..40));
        let mask = random_blobs(&mut r, h, w);
        let roi = extract_roi(&mask);
        let p = build_prompts(&roi).unwrap();
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if roi[(y, x)] {
                    r0 = r0.min(y);
                    r1 = r1.max(y);
                    c0 = c0.min(x);
                    c1 = c1.max(x);
                }
            }
        }
        if p.bbox != [r0, c0, r1, c1] {
            tight += 1;
        }
        let fgs: Vec<_> = p.points.iter().filter(|q| q.label == PointLabel::Fg).collect();
        if fgs.len() != 1 || !roi[(fgs[0].rc[0], fgs[0].rc[1])] {
            fg += 1;
        }
        let mut bgs: Vec<[usize; 2]> = p
            .points
            .iter()
            .filter(|q| q.label == PointLabel::Bg)
            .map(|q| q.rc)
            .collect();
        bgs.sort();
        let mut corners = vec![[r0, c0], [r0, c1], [r1, c0], [r1, c1]];
        corners.sort();
        if bgs != corners {
            bg += 1;
        }
        let (dr, dc) = (r.gen_range(0..12), r.gen_range(0..12));
        let shifted = Grid2::from_fn(h + dr + r.gen_range(0..4), w + dc + r.gen_range(0..4), |y, x| {
            y >= dr && x >= dc && y - dr < h && x - dc < w && mask[(y - dr, x - dc)]
        });
        let q = build_prompts(&extract_roi(&shifted)).unwrap();
        let moved: Vec<_> = p
            .points
            .iter()
            .map(|pt| ([pt.rc[0] + dr, pt.rc[1] + dc], pt.label))
            .collect();
        let got: Vec<_> = q.points.iter().map(|pt| (pt.rc, pt.label)).collect();
        if q.bbox != [r0 + dr, c0 + dc, r1 + dr, c1 + dc] || got != moved {
            equiv += 1;
        }
    }
    (
        tight + fg + bg + equiv == 0,
        format!(
            "{n} random masks: {tight} loose boxes, {fg} bad fg points, {bg} bad bg points, {equiv} translation failures"
        ),
    )
}

// ---------------------------------------------------------------- pipeline

fn corpus() -> &'static [SynthCase] {
    static CORPUS: OnceLock<Vec<SynthCase>> = OnceLock::new();
    CORPUS.get_or_init(|| synth::generate(&SynthConfig::default()))
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temp dir")).path()
}

fn fresh_workdir(tag: &str) -> PathBuf {
    let dir = scratch().join(tag);
    let _ = std::fs::remove_dir_all(&dir);
    synth::write_corpus(&dir, corpus()).expect("corpus written");
    dir
}

fn config(workdir: &Path, jobs: usize) -> PipelineConfig {
    PipelineConfig {
        workdir: workdir.to_path_buf(),
        jobs,
        alpha: 20.0,
        beta: 20.0,
        rounds: 2,
        ..Default::default()
    }
}

fn run_all(cfg: &PipelineConfig) -> orchestrator::RunReport {
    orchestrator::run(cfg, &AnalyticBackend::default(), &RunOptions::default()).expect("pipeline run")
}

/// Reference run shared by the end-to-end, S3F and determinism checks.
fn reference() -> &'static (PathBuf, Duration) {
    static REF: OnceLock<(PathBuf, Duration)> = OnceLock::new();
    REF.get_or_init(|| {
        let dir = fresh_workdir("reference");
        let start = Instant::now();
        run_all(&config(&dir, 1));
        (dir, start.elapsed())
    })
}

fn synthetic_end_to_end() -> Check {
    let (dir, took) = reference();
    let report = orchestrator::read_report(dir).expect("report");
    let o = &report.metrics.overall;
    let pass = o.dsc.mean >= 0.90 && o.hd95_mm.mean <= 4.0 && *took < Duration::from_secs(600);
    (
        pass,
        format!(
            "{} test volumes, DSC {:.4}±{:.4}, HD95 {:.3}±{:.3} mm, round {} selected, single-threaded run {:.1}s",
            o.dsc.n,
            o.dsc.mean,
            o.dsc.std,
            o.hd95_mm.mean,
            o.hd95_mm.std,
            report.selected_round,
            took.as_secs_f64()
        ),
    )
}

fn load_mask(path: &Path) -> Mask3D {
    Tensor::load(path).unwrap().into_mask3().unwrap()
}

fn gt_of(id: &str) -> &'static Mask3D {
    &corpus().iter().find(|c| c.volume.id == id).expect("known id").gt
}

/// Moves the mask to a place where it stays inside `brain` and misses `gt`.
fn displace(mask: &Mask3D, brain: &Mask3D, gt: &Mask3D) -> Option<Mask3D> {
    let (d, h, w) = mask.shape();
    let set: Vec<Voxel> = voxels(mask).into_iter().collect();
    let mut shifts: Vec<[i64; 3]> = Vec::new();
    for dz in -4..=4i64 {
        for dy in -4..=4i64 {
            for dx in -4..=4i64 {
                shifts.push([dz * 4, dy * 4, dx * 4]);
            }
        }
    }
    shifts.sort_by_key(|s| (s.iter().map(|v| v * v).sum::<i64>(), *s));
    for s in shifts {
        let moved: Option<Vec<Voxel>> = set
            .iter()
            .map(|&(z, y, x)| {
                let p = [z as i64 + s[0], y as i64 + s[1], x as i64 + s[2]];
                let inside = p[0] >= 0 && p[1] >= 0 && p[2] >= 0 && p[0] < d as i64 && p[1] < h as i64 && p[2] < w as i64;
                inside.then(|| (p[0] as usize, p[1] as usize, p[2] as usize))
            })
            .collect();
        let Some(moved) = moved else { continue };
        if moved.iter().all(|&v| brain[v] && !gt[v]) {
            let mut out = Grid3::filled(mask.shape(), false);
            for v in moved {
                out[v] = true;
            }
            return Some(out);
        }
    }
    None
}

/// Spearman correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                out[idx[k]] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn s3f_validity() -> Check {
    let dir = fresh_workdir("s3f");
    let cfg = config(&dir, 1);
    let backend = AnalyticBackend::default();
    let upto_round1: Vec<String> = ["labels", "cam_q0", "amda", "cam_q1", "sam", "round1"]
        .map(String::from)
        .to_vec();
    orchestrator::run(&cfg, &backend, &RunOptions { stages: Some(upto_round1), force: false })
        .expect("stages up to round1");
    let split: orchestrator::Split =
        serde_json::from_slice(&std::fs::read(dir.join("labels/split.json")).unwrap()).unwrap();
    let mut ids = split.train.clone();
    ids.shuffle(&mut rng(7));
    let n_bad = (split.train.len() as f64 * 0.2).round() as usize;
    let mut corrupted = HashSet::new();
    for id in ids.iter() {
        if corrupted.len() == n_bad {
            break;
        }
        let path = dir.join(format!("pseudo/round1/{id}.tns"));
        let t = Tensor::load(&path).unwrap();
        let spacing = t.spacing.clone();
        let mask = t.into_mask3().unwrap();
        let case = corpus().iter().find(|c| &c.volume.id == id).unwrap();
        let brain = casc_core::volume::brain_mask(&case.volume);
        if let Some(moved) = displace(&mask, &brain, &case.gt) {
            let mut out = Tensor::from_mask3(&moved).with_id(id.clone());
            out.spacing = spacing;
            out.save(&path).unwrap();
            corrupted.insert(id.clone());
        }
    }
    orchestrator::run(&cfg, &backend, &RunOptions { stages: Some(vec!["s3f_r2".into()]), force: false })
        .expect("s3f stage");
    let records = s3f::read_manifest(&dir.join("pseudo/reseg/pool.jsonl")).unwrap();
    let f: Vec<f64> = records.iter().map(|r| r.score.unwrap()).collect();
    let truth: Vec<f64> = records
        .iter()
        .map(|r| dsc(&load_mask(&dir.join(format!("pseudo/round1/{}.tns", r.volume_id))), gt_of(&r.volume_id)).unwrap())
        .collect();
    let rho = spearman(&f, &truth);
    let t_beta = casc_core::percentile::percentile(&f, 20.0).unwrap();
    let rejected = records
        .iter()
        .filter(|r| corrupted.contains(&r.volume_id) && !r.retained)
        .count();
    let frac = rejected as f64 / corrupted.len().max(1) as f64;
    (
        corrupted.len() == n_bad && rho > 0.5 && frac >= 0.7,
        format!(
            "{} of {} pool entries displaced, Spearman(F, true DSC) = {rho:.3}, {rejected}/{} corrupted at or below T_20 = {t_beta:.4}",
            corrupted.len(),
            records.len(),
            corrupted.len()
        ),
    )
}

/// Every file under `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Artifact differences between two workdirs, ledgers compared without timings.
fn differences(a: &Path, b: &Path) -> Vec<String> {
    let (ta, tb) = (tree(a), tree(b));
    let mut diffs = Vec::new();
    for key in ta.keys().chain(tb.keys()).collect::<std::collections::BTreeSet<_>>() {
        if key == "ledger.json" {
            continue;
        }
        if ta.get(key) != tb.get(key) {
            diffs.push(key.clone());
        }
    }
    let la = orchestrator::load_ledger(a).unwrap().without_timings();
    let lb = orchestrator::load_ledger(b).unwrap().without_timings();
    if la != lb {
        diffs.push("ledger.json".into());
    }
    diffs
}

fn determinism_and_resume() -> Check {
    let (reference_dir, _) = reference();
    let mut notes = Vec::new();
    let mut ok = true;
    for jobs in [1, 4] {
        let dir = fresh_workdir(&format!("repeat-{jobs}"));
        run_all(&config(&dir, jobs));
        let diffs = differences(reference_dir, &dir);
        ok &= diffs.is_empty();
        notes.push(format!("repeat with {jobs} jobs: {} differing files", diffs.len()));
        let _ = std::fs::remove_dir_all(&dir);
    }
    let stages: Vec<Stage> = plan(2);
    let reference_ledger = orchestrator::load_ledger(reference_dir).unwrap().without_timings();
    let mut resume_bad = Vec::new();
    for (i, stage) in stages.iter().enumerate() {
        let dir = fresh_workdir("resume");
        let cfg = config(&dir, 1);
        let prefix: Vec<String> = stages[..=i].iter().map(|s| s.name()).collect();
        orchestrator::run(&cfg, &AnalyticBackend::default(), &RunOptions { stages: Some(prefix), force: false })
            .expect("prefix run");
        // a kill inside the next stage leaves a stray temp file and a torn output
        if let Some(next) = stages.get(i + 1) {
            std::fs::write(dir.join("ledger.json.tmp"), b"{").unwrap();
            if *next == Stage::Eval {
                std::fs::create_dir_all(dir.join("reports")).unwrap();
                std::fs::write(dir.join("reports/report.json"), b"{\"torn\"").unwrap();
            }
        }
        let report = run_all(&cfg);
        let skipped = report.actions.iter().take(i + 1).all(|(_, a)| *a == orchestrator::StageAction::Skipped);
        let _ = std::fs::remove_file(dir.join("ledger.json.tmp"));
        let same_ledger = orchestrator::load_ledger(&dir).unwrap().without_timings() == reference_ledger;
        let diffs = differences(reference_dir, &dir);
        if !(skipped && same_ledger && diffs.is_empty()) {
            resume_bad.push(format!("{} (skipped prefix {skipped}, ledger {same_ledger}, {} diffs)", stage.name(), diffs.len()));
        }
    }
    ok &= resume_bad.is_empty();
    notes.push(format!(
        "killed after each of {} stages: {}",
        stages.len(),
        if resume_bad.is_empty() {
            "all resumed to the reference ledger and artifacts".to_string()
        } else {
            format!("mismatch after {}", resume_bad.join(", "))
        }
    ));
    let rerun = run_all(&config(reference_dir, 1));
    let all_skipped = rerun.actions.iter().all(|(_, a)| *a == orchestrator::StageAction::Skipped);
    ok &= all_skipped;
    notes.push(format!("unchanged rerun skipped every stage: {all_skipped}"));
    (ok, notes.join("; "))
}
