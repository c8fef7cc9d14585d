//! Shared helpers: brute-force scalar loss oracles, random instances and a
//! central finite-difference checker.
#![allow(dead_code)]

use clod::detector::{BBox, DetectorOutput, GridSpec, OutputGrad};
use clod::taskloss::{assign, Assignment, ClassMask, GroundTruth, GtBox};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRIDS: [(usize, &[usize]); 4] = [(32, &[8, 16]), (64, &[16]), (64, &[8, 16]), (40, &[8])];

pub fn random_grid(rng: &mut ChaCha8Rng) -> GridSpec {
    let (size, strides) = GRIDS[rng.random_range(0..GRIDS.len())];
    GridSpec::new(size, strides.to_vec()).unwrap()
}

pub fn random_output(grid: &GridSpec, nc: usize, l: usize, rng: &mut ChaCha8Rng) -> DetectorOutput {
    let n = grid.num_anchors();
    DetectorOutput::new(
        grid.clone(),
        Array2::from_shape_fn((n, nc), |_| rng.random_range(-4.0..4.0)),
        Array3::from_shape_fn((n, 4, l), |_| rng.random_range(-3.0..3.0)),
    )
    .unwrap()
}

/// A few boxes of at least 12 px so that several anchor centres fall inside.
pub fn random_gt(grid: &GridSpec, classes: &[usize], rng: &mut ChaCha8Rng) -> GroundTruth {
    let size = grid.image_size() as f64;
    let count = rng.random_range(1..=3);
    let boxes = (0..count)
        .map(|_| {
            let w = rng.random_range(12.0..size * 0.7);
            let h = rng.random_range(12.0..size * 0.7);
            let l = rng.random_range(0.0..size - w);
            let t = rng.random_range(0.0..size - h);
            GtBox {
                bbox: BBox::new(l, t, l + w, t + h),
                class_id: classes[rng.random_range(0..classes.len())],
            }
        })
        .collect();
    GroundTruth { image_id: 0, boxes }
}

pub struct TaskCase {
    pub out: DetectorOutput,
    pub gt: GroundTruth,
    pub assignment: Assignment,
    pub mask: ClassMask,
}

/// Random instance with classes `0..nc`, the first `old` of them masked.
pub fn task_case(rng: &mut ChaCha8Rng) -> TaskCase {
    let grid = random_grid(rng);
    let nc = rng.random_range(2..=5);
    let l = rng.random_range(4..=8);
    let old = rng.random_range(0..nc);
    let active: Vec<usize> = (old..nc).collect();
    let out = random_output(&grid, nc, l, rng);
    let gt = random_gt(&grid, &active, rng);
    let mask = ClassMask::new(active, 0..old, nc).unwrap();
    let assignment = assign(&out, &gt, rng.random_range(1..=10), &mask).unwrap();
    TaskCase {
        out,
        gt,
        assignment,
        mask,
    }
}

// ---- scalar oracles -------------------------------------------------------

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce(z: f64, y: f64) -> f64 {
    let p = sig(z);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn softmax_t(z: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn row(a: &Array3<f64>, k: usize, i: usize) -> Vec<f64> {
    (0..a.shape()[2]).map(|j| a[[k, i, j]]).collect()
}

pub fn oracle_lwf_reg(s: &Array3<f64>, t: &Array3<f64>, w: &[f64], tau: f64) -> f64 {
    let (n, sides, _) = s.dim();
    let mut total = 0.0;
    for k in 0..n {
        for i in 0..sides {
            let p = softmax_t(&row(t, k, i), tau);
            let q = softmax_t(&row(s, k, i), tau);
            let h: f64 = p.iter().zip(&q).map(|(p, q)| -p * q.ln()).sum();
            total += w[k] * h;
        }
    }
    total / (n * sides) as f64
}

pub fn oracle_lwf_cls(s: &Array2<f64>, t: &Array2<f64>, v: &[f64]) -> f64 {
    let (n, nc) = s.dim();
    let mut total = 0.0;
    for k in 0..n {
        for j in 0..nc {
            total += v[k] * bce(s[[k, j]], sig(t[[k, j]]));
        }
    }
    total / (n * nc) as f64
}

pub fn oracle_vanilla(s: &DetectorOutput, t: &DetectorOutput, lambda: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for (a, b) in s.class_logits.iter().zip(t.class_logits.iter()) {
        sum += (a - b) * (a - b);
        count += 1.0;
    }
    for (a, b) in s.dfl_logits.iter().zip(t.dfl_logits.iter()) {
        sum += (a - b) * (a - b);
        count += 1.0;
    }
    lambda * sum / count
}

/// Reference CIoU with the usual small stabilisers on heights, union,
/// enclosing diagonal and the α denominator.
pub fn oracle_ciou(p: &BBox, g: &BBox) -> f64 {
    let eps = 1e-7;
    let (w1, h1) = (p.right - p.left, p.bottom - p.top + eps);
    let (w2, h2) = (g.right - g.left, g.bottom - g.top + eps);
    let iw = (p.right.min(g.right) - p.left.max(g.left)).max(0.0);
    let ih = (p.bottom.min(g.bottom) - p.top.max(g.top)).max(0.0);
    let inter = iw * ih;
    let union = w1 * h1 + w2 * h2 - inter + eps;
    let iou = inter / union;
    let cw = p.right.max(g.right) - p.left.min(g.left);
    let ch = p.bottom.max(g.bottom) - p.top.min(g.top);
    let c2 = cw * cw + ch * ch + eps;
    let rho2 = ((g.left + g.right - p.left - p.right).powi(2) + (g.top + g.bottom - p.top - p.bottom).powi(2)) / 4.0;
    let v = 4.0 / std::f64::consts::PI.powi(2) * ((w2 / h2).atan() - (w1 / h1).atan()).powi(2);
    let alpha = v / (v - iou + 1.0 + eps);
    iou - rho2 / c2 - alpha * v
}

fn oracle_dfl(logits: &[f64], target: f64) -> f64 {
    let l = logits.len();
    let t = target.clamp(0.0, (l - 1) as f64);
    let lo = t.floor() as usize;
    let wu = t - lo as f64;
    let q = softmax_t(logits, 1.0);
    let mut v = -(1.0 - wu) * q[lo].ln();
    if wu > 0.0 {
        v -= wu * q[lo + 1].ln();
    }
    v
}

/// Anchor centres and strides recomputed from the grid geometry.
pub fn oracle_anchors(grid: &GridSpec) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for &s in grid.strides() {
        let side = grid.image_size() / s;
        for y in 0..side {
            for x in 0..side {
                out.push(((x as f64 + 0.5) * s as f64, (y as f64 + 0.5) * s as f64, s as f64));
            }
        }
    }
    out
}

/// `cls·BCE/A + box·(1 − CIoU)/P + dfl·DFL/(4P)` with `P` assigned anchors.
pub fn oracle_task_loss(
    out: &DetectorOutput,
    gt: &GroundTruth,
    assignment: &[Option<usize>],
    active: &[usize],
    gains: (f64, f64, f64),
) -> f64 {
    let (g_box, g_cls, g_dfl) = gains;
    let n = out.num_anchors();
    let mut cls = 0.0;
    for a in 0..n {
        for &c in active {
            let y = match assignment[a] {
                Some(g) if gt.boxes[g].class_id == c => 1.0,
                _ => 0.0,
            };
            cls += bce(out.class_logits[[a, c]], y);
        }
    }
    cls /= n as f64;
    let anchors = oracle_anchors(&out.grid);
    let assigned = assignment.iter().filter(|a| a.is_some()).count();
    let (mut bx, mut dfl) = (0.0, 0.0);
    for (a, g) in assignment.iter().enumerate() {
        let Some(g) = *g else { continue };
        let (x, y, s) = anchors[a];
        let e: Vec<f64> = (0..4)
            .map(|i| {
                softmax_t(&row(&out.dfl_logits, a, i), 1.0)
                    .iter()
                    .enumerate()
                    .map(|(j, p)| j as f64 * p)
                    .sum()
            })
            .collect();
        let pred = BBox::new(x - s * e[0], y - s * e[1], x + s * e[2], y + s * e[3]);
        let tb = gt.boxes[g].bbox;
        bx += 1.0 - oracle_ciou(&pred, &tb);
        let targets = [(x - tb.left) / s, (y - tb.top) / s, (tb.right - x) / s, (tb.bottom - y) / s];
        for i in 0..4 {
            dfl += oracle_dfl(&row(&out.dfl_logits, a, i), targets[i]) / 4.0;
        }
    }
    if assigned > 0 {
        bx /= assigned as f64;
        dfl /= assigned as f64;
    }
    g_cls * cls + g_box * bx + g_dfl * dfl
}

// ---- finite differences ---------------------------------------------------

/// Largest per-entry relative error between `analytic` and central
/// differences of `f` around `out`, with magnitudes floored at `1e-5`.
pub fn fd_max_rel_error(out: &DetectorOutput, analytic: &OutputGrad, h: f64, f: impl Fn(&DetectorOutput) -> f64) -> f64 {
    let mut x = out.clone();
    let mut worst: f64 = 0.0;
    let mut judge = |a: f64, num: f64| {
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-5);
        worst = worst.max(rel);
    };
    for idx in ndarray::indices(out.class_logits.dim()) {
        let orig = x.class_logits[idx];
        x.class_logits[idx] = orig + h;
        let up = f(&x);
        x.class_logits[idx] = orig - h;
        let down = f(&x);
        x.class_logits[idx] = orig;
        judge(analytic.class_logits[idx], (up - down) / (2.0 * h));
    }
    for idx in ndarray::indices(out.dfl_logits.dim()) {
        let orig = x.dfl_logits[idx];
        x.dfl_logits[idx] = orig + h;
        let up = f(&x);
        x.dfl_logits[idx] = orig - h;
        let down = f(&x);
        x.dfl_logits[idx] = orig;
        judge(analytic.dfl_logits[idx], (up - down) / (2.0 * h));
    }
    worst
}

/// L1 distance between the pooled class frequencies and uniform.
pub fn oracle_distance(samples: &[&clod::replay::MemorySample], classes: &std::collections::BTreeSet<usize>) -> f64 {
    let counts: Vec<f64> = classes
        .iter()
        .map(|c| samples.iter().map(|s| *s.histogram.get(c).unwrap_or(&0) as f64).sum())
        .collect();
    let total: f64 = counts.iter().sum();
    let u = 1.0 / classes.len() as f64;
    counts.iter().map(|&n| (if total > 0.0 { n / total } else { 0.0 } - u).abs()).sum()
}

/// Exhaustive minimum distance to uniform over all `m`-subsets of `pool`.
pub fn exhaustive_best_distance(
    pool: &[clod::replay::MemorySample],
    m: usize,
    classes: &std::collections::BTreeSet<usize>,
) -> f64 {
    let n = pool.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let chosen: Vec<&clod::replay::MemorySample> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| &pool[i]).collect();
        best = best.min(oracle_distance(&chosen, classes));
    }
    best
}

pub fn random_pool(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<clod::replay::MemorySample> {
    (0..n)
        .map(|i| {
            let objects = rng.random_range(1..=3);
            let classes: Vec<usize> = (0..objects).map(|_| rng.random_range(0..k)).collect();
            clod::replay::MemorySample::new(i as u64, classes, rng.random_range(0..2))
        })
        .collect()
}
