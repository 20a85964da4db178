//! Independent oracles shared by the integration tests. Everything here is
//! deliberately naive: loops over all candidates, no sorting tricks.

#![allow(dead_code)]

use lcnn_core::eval::{cosine_similarity, Identified, ScoredPair};
use lcnn_core::layers::{Layer, Pass};
use lcnn_core::{Rng, Shape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn random_tensor(shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform_range(lo, hi))
}

fn run(layer: &mut Layer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    // Dropout layers under test carry a frozen mask, so the seed is irrelevant.
    let mut rng = Rng::new(0);
    layer.forward(x, &mut Pass::Train(&mut rng)).expect("forward")
}

fn projected(layer: &mut Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    run(layer, x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Indices to probe: all of them for small tensors, an even sample otherwise.
fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Worst relative error between backprop and central differences of
/// `L = Σ r ⊙ layer(x)` over input entries and parameter entries.
pub fn check_layer(layer: &mut Layer<f64>, x: &Tensor<f64>, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    for p in layer.params_mut() {
        for v in p.param.value.data_mut() {
            *v = rng.uniform_range(-0.5, 0.5);
        }
        p.param.grad.fill(0.0);
    }
    let out = run(layer, x);
    let r = random_tensor(out.shape(), &mut rng, -1.0, 1.0);
    let dx = layer.backward(&r).expect("backward");
    let grads: Vec<Vec<f64>> = layer.params().iter().map(|(_, p)| p.grad.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for i in probe_indices(x.len(), 200) {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let num = (projected(layer, &xp, &r) - projected(layer, &xm, &r)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(dx.data()[i], num));
    }
    for (k, g) in grads.iter().enumerate() {
        for i in probe_indices(g.len(), 200) {
            let orig = layer.params_mut()[k].param.value.data()[i];
            layer.params_mut()[k].param.value.data_mut()[i] = orig + FD_STEP;
            let lp = projected(layer, x, &r);
            layer.params_mut()[k].param.value.data_mut()[i] = orig - FD_STEP;
            let lm = projected(layer, x, &r);
            layer.params_mut()[k].param.value.data_mut()[i] = orig;
            worst = worst.max(rel_err(g[i], (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Reference MFM: loops over every output element.
pub fn mfm_oracle(c: &Tensor<f32>) -> Tensor<f32> {
    let s = c.shape();
    let half = s.c / 2;
    Tensor::from_fn(Shape::new(s.n, half, s.h, s.w), |n, k, y, x| c.get(n, k, y, x).max(c.get(n, k + half, y, x)))
}

fn accuracy(pairs: &[ScoredPair], tau: f64) -> f64 {
    let mut correct = 0;
    for p in pairs {
        if (p.score >= tau) == p.same {
            correct += 1;
        }
    }
    correct as f64 / pairs.len() as f64
}

fn distinct_sorted(scores: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    for s in scores {
        if !v.contains(&s) {
            v.push(s);
        }
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Tries every midpoint threshold on the other folds, lowest wins ties.
pub fn verification_oracle(folds: &[Vec<ScoredPair>]) -> (f64, Vec<f64>) {
    let mut accs = Vec::new();
    for i in 0..folds.len() {
        let mut train = Vec::new();
        for (j, f) in folds.iter().enumerate() {
            if j != i {
                train.extend_from_slice(f);
            }
        }
        let scores = distinct_sorted(train.iter().map(|p| p.score));
        let mut best_tau = scores[0];
        let mut best_acc = -1.0;
        for w in scores.windows(2) {
            let tau = (w[0] + w[1]) / 2.0;
            let acc = accuracy(&train, tau);
            if acc > best_acc {
                best_acc = acc;
                best_tau = tau;
            }
        }
        accs.push(accuracy(&folds[i], best_tau));
    }
    (accs.iter().sum::<f64>() / accs.len() as f64, accs)
}

fn rate_at_least(scores: &[f64], tau: f64) -> f64 {
    scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len().max(1) as f64
}

/// Scans every observed score from the bottom up and takes the first one
/// whose false accept rate is within `far`.
pub fn far_threshold_oracle(negatives: &[f64], positives: &[f64], far: f64) -> f64 {
    let all = distinct_sorted(negatives.iter().chain(positives).copied());
    for &t in &all {
        if rate_at_least(negatives, t) <= far {
            return t;
        }
    }
    *all.last().unwrap()
}

pub fn tpr_oracle(pairs: &[ScoredPair], far: f64) -> f64 {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.same).map(|p| p.score).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| !p.same).map(|p| p.score).collect();
    rate_at_least(&pos, far_threshold_oracle(&neg, &pos, far))
}

/// Most similar gallery entry by exhaustive comparison; first index wins ties.
pub fn argmax_oracle(probe: &[f32], gallery: &[Identified<'_>]) -> (usize, f64) {
    let sims: Vec<f64> = gallery
        .iter()
        .map(|g| cosine_similarity(probe, g.embedding).unwrap())
        .collect();
    let mut best = 0;
    for j in 1..sims.len() {
        if sims[j] > sims[best] {
            best = j;
        }
    }
    (best, sims[best])
}

pub fn rank1_oracle(gallery: &[Identified<'_>], probes: &[Identified<'_>]) -> f64 {
    let hits = probes
        .iter()
        .filter(|p| gallery[argmax_oracle(p.embedding, gallery).0].identity == p.identity)
        .count();
    hits as f64 / probes.len() as f64
}

pub fn dir_oracle(gallery: &[Identified<'_>], genuine: &[Identified<'_>], impostors: &[Identified<'_>], far: f64) -> f64 {
    let imp: Vec<f64> = impostors.iter().map(|p| argmax_oracle(p.embedding, gallery).1).collect();
    let gen: Vec<(bool, f64)> = genuine
        .iter()
        .map(|p| {
            let (j, s) = argmax_oracle(p.embedding, gallery);
            (gallery[j].identity == p.identity, s)
        })
        .collect();
    let gen_scores: Vec<f64> = gen.iter().map(|g| g.1).collect();
    let tau = far_threshold_oracle(&imp, &gen_scores, far);
    gen.iter().filter(|&&(hit, s)| hit && s >= tau).count() as f64 / genuine.len() as f64
}

pub fn cross_pair_mean(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += cosine_similarity(x, y).unwrap();
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Scores on a coarse grid so that ties occur, positives shifted upward.
pub fn synthetic_pairs(n: usize, rng: &mut Rng, separation: f64) -> Vec<ScoredPair> {
    (0..n)
        .map(|_| {
            let same = rng.bernoulli(0.5);
            let raw = rng.gaussian(if same { separation } else { 0.0 }, 1.0);
            ScoredPair {
                score: (raw * 20.0).round() / 20.0,
                same,
            }
        })
        .collect()
}

pub fn random_embedding(rng: &mut Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.gaussian(0.0, 1.0) as f32).collect()
}

/// Output-size rows of both architectures as `(name, channels, height, width)`.
pub const SHAPES_A: &[(&str, usize, usize, usize)] = &[
    ("conv1_1", 48, 120, 120),
    ("conv1_2", 48, 120, 120),
    ("mfm1", 48, 120, 120),
    ("pool1", 48, 60, 60),
    ("conv2_1", 96, 56, 56),
    ("conv2_2", 96, 56, 56),
    ("mfm2", 96, 56, 56),
    ("pool2", 96, 28, 28),
    ("conv3_1", 128, 24, 24),
    ("conv3_2", 128, 24, 24),
    ("mfm3", 128, 24, 24),
    ("pool3", 128, 12, 12),
    ("conv4_1", 192, 9, 9),
    ("conv4_2", 192, 9, 9),
    ("mfm4", 192, 9, 9),
    ("pool4", 192, 5, 5),
    ("fc1", 256, 1, 1),
    ("fc2", 10_575, 1, 1),
];

pub const SHAPES_B: &[(&str, usize, usize, usize)] = &[
    ("conv1_1", 48, 128, 128),
    ("conv1_2", 48, 128, 128),
    ("mfm1", 48, 128, 128),
    ("pool1", 48, 64, 64),
    ("conv2_a", 48, 64, 64),
    ("conv2_1", 96, 64, 64),
    ("conv2_2", 96, 64, 64),
    ("mfm2", 96, 64, 64),
    ("pool2", 96, 32, 32),
    ("conv3_a", 96, 32, 32),
    ("conv3_1", 192, 32, 32),
    ("conv3_2", 192, 32, 32),
    ("mfm3", 192, 32, 32),
    ("pool3", 192, 16, 16),
    ("conv4_a", 192, 16, 16),
    ("conv4_1", 128, 16, 16),
    ("conv4_2", 128, 16, 16),
    ("mfm4", 128, 16, 16),
    ("pool4", 128, 8, 8),
    ("conv5_a", 128, 8, 8),
    ("conv5_1", 128, 8, 8),
    ("conv5_2", 128, 8, 8),
    ("mfm5", 128, 8, 8),
    ("pool5", 128, 4, 4),
    ("fc1", 256, 1, 1),
    ("fc2", 10_575, 1, 1),
];

/// Displayed `#param` cells, in thousands, as text.
pub const PARAMS_A: &[(&str, &str)] = &[
    ("conv1_1", "3.8"),
    ("conv1_2", "3.8"),
    ("conv2_1", "2.4"),
    ("conv2_2", "2.4"),
    ("conv3_1", "3.2"),
    ("conv3_2", "3.2"),
    ("conv4_1", "3"),
    ("conv4_2", "3"),
    ("fc1", "1,228"),
    ("fc2", "2,707"),
];

pub const PARAMS_B: &[(&str, &str)] = &[
    ("conv1_1", "1.2"),
    ("conv1_2", "1.2"),
    ("conv2_a", "0.04"),
    ("conv2_1", "0.8"),
    ("conv2_2", "0.8"),
    ("conv3_a", "0.09"),
    ("conv3_1", "1.7"),
    ("conv3_2", "1.7"),
    ("conv4_a", "0.19"),
    ("conv4_1", "1.1"),
    ("conv4_2", "1.1"),
    ("conv5_a", "0.12"),
    ("conv5_1", "1.1"),
    ("conv5_2", "1.1"),
    ("fc1", "524"),
    ("fc2", "2,707"),
];

pub const TOTAL_A: &str = "3,961";
pub const TOTAL_B: &str = "3,244";

/// True when `count / 1000`, truncated to the decimals shown in `display`,
/// reads as `display`.
pub fn matches_display(count: u64, display: &str) -> bool {
    let plain = display.replace(',', "");
    let (int, frac) = plain.split_once('.').unwrap_or((&plain, ""));
    let scale = 10u64.pow(frac.len() as u32);
    let shown: u64 = format!("{int}{frac}").parse().unwrap();
    count * scale / 1000 == shown
}
