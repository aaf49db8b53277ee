//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always printed.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p dinomaly-core --test acceptance -- 1 4 6`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use dinomaly_core::data::{load_mvtec_layout, synth_dataset, EncoderSpec, FeatureCache, Split, SynthSpec};
use dinomaly_core::metrics::{aupro, auroc, average_precision, f1_max, AuproConfig, EvalReport};
use dinomaly_core::model::attention::{linear_attention, AttentionKind, AttentionParams};
use dinomaly_core::model::{DinomalyModel, GroupedFeatures, NoiseKind};
use dinomaly_core::objective::{current_k, global_cosine_loss, global_hm_loss, HardMiningConfig, MiningPool};
use dinomaly_core::optim::{lr_at, stable_adamw_step, OptimConfig, OptimState};
use dinomaly_core::trainer::{evaluate, train, train_per_class, LogRow, TrainConfig};
use dinomaly_core::{GridShape, TokenGrid};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    gating: bool,
    detail: String,
}

impl Verdict {
    fn gate(pass: bool, detail: String) -> Self {
        Self { pass, gating: true, detail }
    }
}

fn normal_f64(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn normal_f32(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f32 = StandardNormal.sample(rng);
        z * std
    })
}

fn phi(x: f32) -> f32 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

// ---------------------------------------------------------------- 1

fn attention_identities() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (64, 16);
    let shape = GridShape::new(1, 8, 8);

    let mut worst_row = 0.0f64;
    let mut min_weight = f32::INFINITY;
    for trial in 0..20 {
        let scale = [0.1, 1.0, 4.0][trial % 3];
        let x = normal_f32(&mut rng, n, d, scale);
        let params = AttentionParams::<f32>::new(&mut rng, d, 2, 0.5).unwrap();
        for kind in [AttentionKind::Softmax, AttentionKind::Linear { normalize: true }] {
            for w in params.attention_weights(kind, x.view(), shape).unwrap() {
                for row in w.rows() {
                    let s: f64 = row.iter().map(|&v| v as f64).sum();
                    worst_row = worst_row.max((s - 1.0).abs());
                    min_weight = min_weight.min(row.iter().copied().fold(f32::INFINITY, f32::min));
                }
            }
        }
    }

    // identity projections: the library evaluates phi(Q) (phi(K)^T V); the
    // oracle below multiplies in the other order
    let eye = Array2::<f32>::eye(d);
    let id = AttentionParams::from_matrices(eye.clone(), eye.clone(), eye.clone(), eye.clone(), 1).unwrap();
    let mut worst_assoc = 0.0f32;
    for _ in 0..20 {
        let x = normal_f32(&mut rng, n, d, 1.0);
        let grid = TokenGrid::from_rows(x.clone(), shape).unwrap();
        let fast = linear_attention(&grid, &id, true).unwrap().to_rows();
        let q = x.mapv(phi);
        let scores = q.dot(&q.t());
        let sums = scores.sum_axis(Axis(1));
        let slow = scores.dot(&x) / &sums.insert_axis(Axis(1));
        worst_assoc = worst_assoc.max((&fast - &slow).iter().fold(0.0f32, |m, v| m.max(v.abs())));
    }

    // a zero key projection makes every key identical
    let mut worst_mean = 0.0f64;
    for _ in 0..20 {
        let x = normal_f32(&mut rng, n, d, 1.0);
        let w_q = normal_f32(&mut rng, d, d, 0.5);
        let w_v = normal_f32(&mut rng, d, d, 0.5);
        let p = AttentionParams::from_matrices(w_q, Array2::zeros((d, d)), w_v.clone(), eye.clone(), 1).unwrap();
        let grid = TokenGrid::from_rows(x.clone(), shape).unwrap();
        let out = linear_attention(&grid, &p, true).unwrap().to_rows();
        let v = x.mapv(|a| a as f64).dot(&w_v.mapv(|a| a as f64));
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                worst_mean = worst_mean.max((*a as f64 - b).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict::gate(
        worst_row <= 1e-6 && min_weight >= 0.0 && worst_assoc < 1e-5 && worst_mean <= 1e-6 && secs < 10.0,
        format!(
            "row-sum err {worst_row:.2e}, min weight {min_weight:.2e}, order diff {worst_assoc:.2e}, \
             identical-key err {worst_mean:.2e}, {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- 2 and 3

const PAIRS: usize = 2;
const BATCH: usize = 2;
const SIDE: usize = 4;
const DIM: usize = 8;

fn random_pairs(rng: &mut ChaCha8Rng) -> GroupedFeatures<f64> {
    let shape = GridShape::new(BATCH, SIDE, SIDE);
    let pairs = (0..PAIRS)
        .map(|_| {
            let e = normal_f64(rng, &[shape.rows(), DIM], 1.0).into_dimensionality().unwrap();
            let noise: Array2<f64> = normal_f64(rng, &[shape.rows(), DIM], 0.6).into_dimensionality().unwrap();
            let d = &e + &noise;
            (TokenGrid::from_rows(e, shape).unwrap(), TokenGrid::from_rows(d, shape).unwrap())
        })
        .collect();
    GroupedFeatures::new(pairs).unwrap()
}

/// Hard mining reaching 50% after 100 iterations.
fn mining(k_max: f64) -> HardMiningConfig {
    HardMiningConfig {
        k_max,
        warmup_iters: 100,
        shrink_factor: 0.1,
        pool: MiningPool::Joint,
    }
}

fn gradient_shrink() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = mining(50.0);
    let (mut worst, mut masked_total, mut bitwise) = (0.0f64, 0usize, true);
    let mut unmasked_exact = true;
    for _ in 0..25 {
        let g = random_pairs(&mut rng);
        let base = global_hm_loss(&g, 0, &cfg).unwrap();
        let mined = global_hm_loss(&g, 100, &cfg).unwrap();
        bitwise &= base.loss.to_bits() == mined.loss.to_bits();
        for p in 0..PAIRS {
            let (g0, gk) = (&base.grads[p], &mined.grads[p]);
            for ((i, t, c), &v0) in g0.indexed_iter() {
                let vk = gk[[i, t, c]];
                if mined.masks[p][[i, t]] {
                    let rel = (vk - 0.1 * v0).abs() / (0.1 * v0).abs().max(1e-300);
                    worst = worst.max(rel);
                } else {
                    unmasked_exact &= vk == v0;
                }
            }
            masked_total += mined.masks[p].iter().filter(|&&m| m).count();
        }
    }
    let expected = 25 * PAIRS * BATCH * SIDE * SIDE / 2;
    Verdict::gate(
        worst < 1e-6 && bitwise && unmasked_exact && masked_total == expected,
        format!(
            "max rel diff {worst:.2e}, loss bitwise equal: {bitwise}, unmasked unchanged: {unmasked_exact}, \
             masked {masked_total}/{expected}"
        ),
    )
}

/// Cosine distance of two vectors, computed independently of the library.
fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Points that the hard-mining selection should shrink: the half of all
/// points, pooled across pairs and images, with the smallest distance.
fn oracle_masks(g: &GroupedFeatures<f64>, k: f64) -> Vec<Array2<bool>> {
    let mut all = Vec::new();
    for (p, (e, d)) in g.pairs.iter().enumerate() {
        for i in 0..BATCH {
            for t in 0..SIDE * SIDE {
                let ev: Vec<f64> = e.data().slice(ndarray::s![i, t, ..]).to_vec();
                let dv: Vec<f64> = d.data().slice(ndarray::s![i, t, ..]).to_vec();
                all.push((cos_dist(&ev, &dv), p, i, t));
            }
        }
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let take = (k / 100.0 * all.len() as f64).floor() as usize;
    let mut masks = vec![Array2::from_elem((BATCH, SIDE * SIDE), false); PAIRS];
    for &(_, p, i, t) in &all[..take] {
        masks[p][[i, t]] = true;
    }
    masks
}

fn loss_gradient_check() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = mining(50.0);
    let h = 1e-6;
    let mut worst = [0.0f64; 2];
    for _ in 0..5 {
        let g = random_pairs(&mut rng);
        for (slot, iteration) in [0usize, 100].into_iter().enumerate() {
            let k = current_k(iteration, &cfg);
            let analytic = global_hm_loss(&g, iteration, &cfg).unwrap();
            let masks = oracle_masks(&g, k);
            for p in 0..PAIRS {
                let rows = g.pairs[p].1.to_rows();
                for r in 0..rows.nrows() {
                    for c in 0..DIM {
                        let shifted = |delta: f64| {
                            let mut moved = g.clone();
                            let mut m = rows.clone();
                            m[[r, c]] += delta;
                            moved.pairs[p].1 = TokenGrid::from_rows(m, g.pairs[p].1.shape()).unwrap();
                            global_cosine_loss(&moved).unwrap()
                        };
                        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                        let (i, t) = (r / (SIDE * SIDE), r % (SIDE * SIDE));
                        let want = if masks[p][[i, t]] { 0.1 * fd } else { fd };
                        let got = analytic.grads[p][[i, t, c]];
                        let rel = (got - want).abs() / got.abs().max(want.abs()).max(1e-8);
                        worst[slot] = worst[slot].max(rel);
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict::gate(
        worst[0] < 1e-3 && worst[1] < 1e-3 && secs < 30.0,
        format!("max rel err k=0 {:.2e}, k=50 {:.2e}, {secs:.2}s", worst[0], worst[1]),
    )
}

// ---------------------------------------------------------------- 4

fn brute_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Mean over positives of the precision at that positive's score.
fn brute_ap(s: &[f64], l: &[bool]) -> f64 {
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let mut total = 0.0;
    for i in (0..s.len()).filter(|&i| l[i]) {
        let above = (0..s.len()).filter(|&j| s[j] >= s[i]).count() as f64;
        let tp = (0..s.len()).filter(|&j| s[j] >= s[i] && l[j]).count() as f64;
        total += tp / above;
    }
    total / pos
}

fn brute_f1(s: &[f64], l: &[bool]) -> f64 {
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let mut best = 0.0f64;
    for &t in s {
        let tp = (0..s.len()).filter(|&j| s[j] >= t && l[j]).count() as f64;
        let fp = (0..s.len()).filter(|&j| s[j] >= t && !l[j]).count() as f64;
        if tp > 0.0 {
            let (p, r) = (tp / (tp + fp), tp / pos);
            best = best.max(2.0 * p * r / (p + r));
        }
    }
    best
}

/// 8-connected components by repeated min-label propagation.
fn brute_regions(mask: &Array2<bool>) -> Array2<usize> {
    let (h, w) = mask.dim();
    let mut lab = Array2::from_shape_fn((h, w), |(i, j)| if mask[[i, j]] { i * w + j + 1 } else { 0 });
    loop {
        let mut changed = false;
        for i in 0..h {
            for j in 0..w {
                if lab[[i, j]] == 0 {
                    continue;
                }
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (y, x) = (i as i64 + di, j as i64 + dj);
                        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                            continue;
                        }
                        let o = lab[[y as usize, x as usize]];
                        if o != 0 && o < lab[[i, j]] {
                            lab[[i, j]] = o;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return lab;
        }
    }
}

fn brute_aupro(maps: &[Array2<f32>], masks: &[Array2<bool>], limit: f64) -> f64 {
    let mut regions: Vec<Vec<(usize, usize, usize)>> = Vec::new();
    for (k, m) in masks.iter().enumerate() {
        let lab = brute_regions(m);
        let mut ids: BTreeMap<usize, Vec<(usize, usize, usize)>> = BTreeMap::new();
        for ((i, j), &l) in lab.indexed_iter() {
            if l != 0 {
                ids.entry(l).or_default().push((k, i, j));
            }
        }
        regions.extend(ids.into_values());
    }
    let normals: usize = masks.iter().map(|m| m.iter().filter(|&&v| !v).count()).sum();
    let mut thresholds: Vec<f32> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds {
        let fp: usize = maps
            .iter()
            .zip(masks)
            .map(|(m, g)| m.iter().zip(g.iter()).filter(|(&s, &a)| !a && s >= t).count())
            .sum();
        let pro: f64 = regions
            .iter()
            .map(|r| r.iter().filter(|&&(k, i, j)| maps[k][[i, j]] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fp as f64 / normals as f64, pro));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=30);
    let coarse = rng.random_bool(0.5);
    loop {
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if !l.iter().any(|&x| x) || l.iter().all(|&x| x) {
            continue;
        }
        let s = (0..n)
            .map(|_| {
                if coarse {
                    rng.random_range(0..5) as f64 / 4.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        return (s, l);
    }
}

fn metric_oracles() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = [0.0f64; 4];
    for _ in 0..200 {
        let (s, l) = random_scores(&mut rng);
        worst[0] = worst[0].max((auroc(&s, &l).unwrap() - brute_auroc(&s, &l)).abs());
        worst[1] = worst[1].max((average_precision(&s, &l).unwrap() - brute_ap(&s, &l)).abs());
        worst[2] = worst[2].max((f1_max(&s, &l).unwrap() - brute_f1(&s, &l)).abs());
    }
    let cfg = AuproConfig::default();
    let mut done = 0;
    while done < 50 {
        let images = rng.random_range(1..=3);
        let density = rng.random_range(0.1..0.5);
        let coarse = rng.random_bool(0.5);
        let masks: Vec<Array2<bool>> = (0..images)
            .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_bool(density)))
            .collect();
        let anomalous: usize = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
        if anomalous == 0 || anomalous == images * 64 {
            continue;
        }
        let maps: Vec<Array2<f32>> = masks
            .iter()
            .map(|m| {
                m.mapv(|a| {
                    let base = if a { 0.3f32 } else { 0.0 };
                    if coarse {
                        base + rng.random_range(0..4) as f32 / 4.0
                    } else {
                        base + rng.random::<f32>()
                    }
                })
            })
            .collect();
        let mv: Vec<_> = maps.iter().map(|m| m.view()).collect();
        let kv: Vec<_> = masks.iter().map(|m| m.view()).collect();
        let got = aupro(&mv, &kv, &cfg).unwrap();
        worst[3] = worst[3].max((got - brute_aupro(&maps, &masks, cfg.fpr_limit)).abs());
        done += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict::gate(
        worst.iter().all(|&w| w <= 1e-9) && secs < 60.0,
        format!(
            "max abs diff AUROC {:.1e}, AP {:.1e}, F1max {:.1e}, AUPRO {:.1e}, {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 5

fn schedules() -> Verdict {
    let o = OptimConfig::default();
    let m = HardMiningConfig::default();
    let at_peak = lr_at(100, &o);
    let at_end = lr_at(o.total_iters, &o);
    let ks: Vec<f64> = [1000, 1001, 5000, 10_000].iter().map(|&i| current_k(i, &m)).collect();
    let pass = at_peak == 2e-3 && (at_end - 2e-4).abs() <= 1e-9 && ks.iter().all(|&k| k == 90.0);
    Verdict::gate(
        pass,
        format!("lr(100) {at_peak:e}, lr({}) {at_end:e}, k(>=1000) {ks:?}", o.total_iters),
    )
}

// ---------------------------------------------------------------- 6

fn optimizer() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let cfg = OptimConfig::default();
    let (b1, b2, eps, wd) = (cfg.betas.0, cfg.betas.1, cfg.eps, cfg.weight_decay);
    let lr = 1.3e-3;

    // one step from a fresh state, written out by hand
    let p0: Array1<f64> = normal_f64(&mut rng, &[40], 1.0).into_dimensionality().unwrap();
    let g: Array1<f64> = normal_f64(&mut rng, &[40], 0.3).into_dimensionality().unwrap();
    let mut p = p0.clone().into_dyn();
    let mut state = OptimState::<f64>::new(&[40]);
    stable_adamw_step(p.view_mut(), g.view().into_dyn(), &mut state, lr, &cfg).unwrap();
    let m = g.mapv(|x| (1.0 - b1) * x);
    let v = g.mapv(|x| (1.0 - b2) * x * x);
    let m_hat = &m / (1.0 - b1);
    let v_hat = &v / (1.0 - b2);
    let rms = (g.iter().zip(v_hat.iter()).map(|(g, v)| g * g / v.max(eps * eps)).sum::<f64>() / 40.0).sqrt();
    let eff = lr / rms.max(1.0);
    let want = &p0 - &(eff * &m_hat / &(v_hat.mapv(f64::sqrt) + eps)) - &(lr * wd * &p0);
    let single = (&p - &want.into_dyn()).iter().fold(0.0f64, |a, d| a.max(d.abs()));

    // a small step then a large one trips the clip
    let no_decay = OptimConfig {
        weight_decay: 0.0,
        ..cfg
    };
    let mut p: ArrayD<f64> = normal_f64(&mut rng, &[30], 1.0);
    let mut state = OptimState::<f64>::new(&[30]);
    let small = normal_f64(&mut rng, &[30], 0.01);
    stable_adamw_step(p.view_mut(), small.view(), &mut state, lr, &no_decay).unwrap();
    let large = normal_f64(&mut rng, &[30], 10.0);
    let before = p.clone();
    let step = stable_adamw_step(p.view_mut(), large.view(), &mut state, lr, &no_decay).unwrap();
    let (bc1, bc2) = (1.0 - b1.powi(2), 1.0 - b2.powi(2));
    let v_hat = state.v_max.mapv(|v| v / bc2);
    let unclipped = lr * state.m.mapv(|m| m / bc1) / (v_hat.mapv(f64::sqrt) + eps);
    let rms = (large.iter().zip(v_hat.iter()).map(|(g, v)| g * g / v.max(eps * eps)).sum::<f64>() / 30.0).sqrt();
    let moved = &before - &p;
    let clip_err = moved
        .iter()
        .zip(unclipped.iter())
        .map(|(a, u)| (a - u / rms).abs() / (u / rms).abs())
        .fold(0.0f64, f64::max);

    // the running maximum never shrinks
    let mut state = OptimState::<f64>::new(&[25]);
    let mut p: ArrayD<f64> = normal_f64(&mut rng, &[25], 1.0);
    let mut monotone = true;
    for _ in 0..100 {
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let g = normal_f64(&mut rng, &[25], scale);
        let prev = state.v_max.clone();
        stable_adamw_step(p.view_mut(), g.view(), &mut state, lr, &cfg).unwrap();
        monotone &= state.v_max.iter().zip(prev.iter()).all(|(now, was)| now >= was);
    }
    Verdict::gate(
        single <= 1e-12 && rms > 1.0 && step.clipped && clip_err < 1e-12 && monotone,
        format!(
            "single-step max diff {single:.1e}, clip RMS {rms:.3} (reported {:.3}), \
             displacement rel err {clip_err:.1e}, max second moment nondecreasing: {monotone}",
            step.rms
        ),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_ITERS: usize = 2000;

struct DeskRun {
    report: EvalReport,
    log: Vec<LogRow>,
    model: DinomalyModel,
    secs: f64,
}

fn desk_root(seed: u64) -> PathBuf {
    std::env::temp_dir().join(format!("dinomaly_acceptance_{}_{seed}", std::process::id()))
}

fn desk_run(seed: u64, drop_rate: f64) -> DeskRun {
    let t0 = Instant::now();
    let root = desk_root(seed);
    if !root.join("manifest.json").is_file() {
        synth_dataset(&SynthSpec { seed, ..SynthSpec::default() }, &root).unwrap();
    }
    let data = load_mvtec_layout(&root).unwrap();
    let mut cfg = TrainConfig::default().with_iters(DESK_ITERS);
    cfg.seed = seed;
    cfg.eval.eval_size = (112, 112);
    cfg.reconstructor.bottleneck.noise = NoiseKind::Dropout { p: drop_rate };
    let out = train(&cfg, &data, None).unwrap();
    let (report, _) = evaluate(&out.model, &data, &cfg.preprocess, &cfg.eval).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "  desk run seed {seed} p {drop_rate}: I-AUROC {:.4}, P-AUROC {:.4}, {secs:.0}s",
        report.mean.i_auroc, report.mean.p_auroc
    );
    DeskRun {
        report,
        log: out.log,
        model: out.model,
        secs,
    }
}

fn row_entropy(w: &Array2<f32>) -> f64 {
    let total: f64 = w
        .rows()
        .into_iter()
        .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|&p| p as f64 * (p as f64).ln()).sum::<f64>())
        .sum();
    total / w.nrows() as f64
}

fn mean_entropy(model: &DinomalyModel, seed: u64, kind: AttentionKind) -> f64 {
    let data = load_mvtec_layout(&desk_root(seed)).unwrap();
    let samples: Vec<_> = data.split(Split::Test).step_by(15).collect();
    let preprocess = TrainConfig::default().preprocess;
    let weights = model.decoder_mixing_weights(&samples, &preprocess, kind).unwrap();
    weights.iter().map(row_entropy).sum::<f64>() / weights.len() as f64
}

fn mean_loss(log: &[LogRow]) -> f64 {
    log.iter().map(|r| r.loss).sum::<f64>() / log.len() as f64
}

fn desk_criteria(out: &mut Vec<(u32, &'static str, Verdict)>, wanted: &dyn Fn(u32) -> bool) {
    if !(wanted(7) || wanted(8) || wanted(9)) {
        return;
    }
    let runs: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(s, 0.2)).collect();
    let total: f64 = runs.iter().map(|r| r.secs).sum();
    let i_auroc: Vec<f64> = runs.iter().map(|r| r.report.mean.i_auroc).collect();
    let p_auroc: Vec<f64> = runs.iter().map(|r| r.report.mean.p_auroc).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    record(
        out,
        7,
        "desk run",
        Verdict::gate(
            mean(&i_auroc) >= 0.90 && mean(&p_auroc) >= 0.90 && total < 15.0 * 60.0,
            format!(
                "I-AUROC {:?} (mean {:.4}), P-AUROC {:?} (mean {:.4}), {total:.0}s for 3 seeds",
                rounded(&i_auroc),
                mean(&i_auroc),
                rounded(&p_auroc),
                mean(&p_auroc)
            ),
        ),
    );

    let trend: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| (mean_loss(&r.log[..100]), mean_loss(&r.log[DESK_ITERS - 100..])))
        .collect();
    record(
        out,
        7,
        "loss trend",
        Verdict::gate(
            trend.iter().all(|(early, late)| late < early),
            format!(
                "100-step mean loss early -> late: {}",
                trend.iter().map(|(a, b)| format!("{a:.4} -> {b:.4}")).collect::<Vec<_>>().join(", ")
            ),
        ),
    );

    let entropies: Vec<(f64, f64)> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| {
            (
                mean_entropy(&r.model, s, AttentionKind::Linear { normalize: true }),
                mean_entropy(&r.model, s, AttentionKind::Softmax),
            )
        })
        .collect();
    record(
        out,
        7,
        "unfocused mixing",
        Verdict::gate(
            entropies.iter().all(|(lin, soft)| lin >= soft),
            format!(
                "mean row entropy linear vs softmax: {} (uniform {:.4})",
                entropies.iter().map(|(l, s)| format!("{l:.4} vs {s:.4}")).collect::<Vec<_>>().join(", "),
                (64f64).ln()
            ),
        ),
    );

    if wanted(8) {
        let (deltas, pixel_deltas): (Vec<f64>, Vec<f64>) = SEEDS
            .iter()
            .zip(&runs)
            .map(|(&s, r)| {
                let plain = desk_run(s, 0.0).report.mean;
                (r.report.mean.i_auroc - plain.i_auroc, r.report.mean.p_auroc - plain.p_auroc)
            })
            .unzip();
        let wins = deltas.iter().filter(|&&d| d > 0.0).count();
        record(
            out,
            8,
            "noise ablation (soft)",
            Verdict {
                pass: wins >= 2,
                gating: false,
                detail: format!(
                    "I-AUROC(p=0.2) - I-AUROC(p=0) per seed {:?}, wins {wins}/3; P-AUROC deltas {:?}",
                    signed(&deltas),
                    signed(&pixel_deltas)
                ),
            },
        );
    }

    if wanted(9) {
        let again = desk_run(SEEDS[0], 0.2);
        let diff = again.report.max_abs_diff(&runs[0].report);
        record(
            out,
            9,
            "determinism",
            Verdict::gate(diff <= 1e-7, format!("max metric diff on rerun of seed {} {diff:.1e}", SEEDS[0])),
        );
    }
    for s in SEEDS {
        let _ = std::fs::remove_dir_all(desk_root(s));
    }
}

fn record(out: &mut Vec<(u32, &'static str, Verdict)>, n: u32, name: &'static str, v: Verdict) {
    print_verdict(n, name, &v);
    out.push((n, name, v));
}

fn signed(v: &[f64]) -> Vec<String> {
    v.iter().map(|d| format!("{d:+.4}")).collect()
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

// ---------------------------------------------------------------- 10

const CACHE_ENV: &str = "DINOMALY_FEATURE_CACHE";
const CACHE_DATA_ENV: &str = "DINOMALY_FEATURE_CACHE_DATA";
/// Class-separated mean I-AUROC reported for the full-size encoder.
const CLASS_SEPARATED_REFERENCE: f64 = 0.997;

fn feature_cache_spot_check() -> Option<Verdict> {
    let cache = PathBuf::from(std::env::var_os(CACHE_ENV)?);
    let data_root = PathBuf::from(std::env::var_os(CACHE_DATA_ENV)?);
    let dim = FeatureCache::open(&cache).unwrap().manifest.dim;
    let data = load_mvtec_layout(&data_root).unwrap();
    let cfg = TrainConfig::class_separated(EncoderSpec::FeatureCache { path: cache }, dim);
    let runs = train_per_class(&cfg, &data, None).unwrap();
    let mut scores = Vec::new();
    for (class, outcome) in &runs {
        let (report, _) = evaluate(&outcome.model, &data, &cfg.preprocess, &cfg.eval).unwrap();
        scores.push((class.clone(), report.per_class[class].i_auroc));
    }
    let worst = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    Some(Verdict::gate(
        worst >= CLASS_SEPARATED_REFERENCE - 0.015,
        format!("per-class I-AUROC {scores:?}, reference {CLASS_SEPARATED_REFERENCE}"),
    ))
}

// ----------------------------------------------------------------

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| picked.is_empty() || picked.contains(&n);
    let started = Instant::now();
    let mut verdicts: Vec<(u32, &'static str, Verdict)> = Vec::new();
    let quick: [(u32, &str, fn() -> Verdict); 6] = [
        (1, "attention identities", attention_identities),
        (2, "gradient shrink", gradient_shrink),
        (3, "loss gradient", loss_gradient_check),
        (4, "metric oracles", metric_oracles),
        (5, "schedules", schedules),
        (6, "optimizer", optimizer),
    ];
    for (n, name, check) in quick {
        if wanted(n) {
            let v = check();
            print_verdict(n, name, &v);
            verdicts.push((n, name, v));
        }
    }
    let mut desk = Vec::new();
    desk_criteria(&mut desk, &wanted);
    verdicts.extend(desk);
    if wanted(10) {
        match feature_cache_spot_check() {
            Some(v) => {
                print_verdict(10, "feature cache spot check", &v);
                verdicts.push((10, "feature cache spot check", v));
            }
            None => println!("criterion 10 feature cache spot check: SKIP ({CACHE_ENV} and {CACHE_DATA_ENV} not set)"),
        }
    }
    let failed: Vec<String> = verdicts
        .iter()
        .filter(|(_, _, v)| v.gating && !v.pass)
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    println!(
        "acceptance: {} checks, {} gating failures, {:.0}s",
        verdicts.len(),
        failed.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

fn print_verdict(n: u32, name: &str, v: &Verdict) {
    let status = match (v.pass, v.gating) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "MISS (non-gating)",
    };
    println!("criterion {n} {name}: {status} | {}", v.detail);
}
