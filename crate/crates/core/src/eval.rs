//! Embedding files, similarity, the verification / identification protocols
//! and MFM histogram instrumentation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{softmax_loss_batch, Pass};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::zoo::{NetworkModel, EMBEDDING_DIM};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"LCNE";
pub const EMBEDDING_VERSION: u32 = 1;

/// fc1 activations of a batch `(N, 1, 128, 128)`, one row per image.
pub fn extract_embeddings(model: &NetworkModel<f32>, batch: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
    let out = model.embed(batch)?;
    let rows: Vec<Vec<f32>> = (0..out.shape().n).map(|i| out.item(i).to_vec()).collect();
    if let Some(bad) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("extract", format!("embedding {bad} is not finite")));
    }
    Ok(rows)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn nonzero_norm(v: &[f32]) -> Result<f64> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid("cosine", "vector has zero or non-finite norm"));
    }
    Ok(n)
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", "length", a.len(), b.len()));
    }
    Ok(cosine_with_norms(a, nonzero_norm(a)?, b, nonzero_norm(b)?))
}

/// Verification score with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub same: bool,
}

fn check_scores(pairs: &[ScoredPair], op: &'static str) -> Result<()> {
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::invalid(op, format!("non-finite score {}", p.score)));
    }
    Ok(())
}

/// Fraction of pairs classified correctly by `score ≥ τ ⇒ same`.
pub fn accuracy_at(pairs: &[ScoredPair], threshold: f64) -> f64 {
    let correct = pairs.iter().filter(|p| (p.score >= threshold) == p.same).count();
    correct as f64 / pairs.len() as f64
}

/// Threshold maximizing accuracy among midpoints of adjacent distinct scores,
/// lowest on ties. With a single distinct score, that score.
pub fn best_threshold(pairs: &[ScoredPair]) -> f64 {
    let mut sorted: Vec<ScoredPair> = pairs.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Sweeping τ upward past a group of equal scores moves them from
    // "≥ τ" (predicted same) to "< τ" (predicted different).
    let mut correct = sorted.iter().filter(|p| p.same).count() as i64;
    let mut best: Option<(i64, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            correct += if sorted[i].same { -1 } else { 1 };
            i += 1;
        }
        if i < sorted.len() {
            let tau = (s + sorted[i].score) / 2.0;
            if best.is_none_or(|(c, _)| correct > c) {
                best = Some((correct, tau));
            }
        }
    }
    best.map_or(sorted[0].score, |(_, t)| t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// Each fold is tested with the threshold chosen on all other folds.
pub fn verification_10fold(folds: &[Vec<ScoredPair>]) -> Result<VerificationResult> {
    if folds.len() < 2 {
        return Err(Error::invalid("verification", format!("need at least 2 folds, got {}", folds.len())));
    }
    if let Some(i) = folds.iter().position(Vec::is_empty) {
        return Err(Error::invalid("verification", format!("fold {i} is empty")));
    }
    folds.iter().try_for_each(|f| check_scores(f, "verification"))?;
    let mut fold_accuracies = Vec::with_capacity(folds.len());
    let mut thresholds = Vec::with_capacity(folds.len());
    for (i, test) in folds.iter().enumerate() {
        let train: Vec<ScoredPair> = folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let tau = best_threshold(&train);
        thresholds.push(tau);
        fold_accuracies.push(accuracy_at(test, tau));
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / folds.len() as f64;
    Ok(VerificationResult {
        mean_accuracy,
        fold_accuracies,
        thresholds,
    })
}

/// Operating point chosen for a target false accept rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub far: f64,
}

/// Smallest observed score `τ` whose false accept rate (negatives with
/// score ≥ τ) is at most `far`. Between observed scores the rates are
/// constant, so no other threshold does better. If none qualifies, the
/// largest observed score.
fn threshold_for_far(negatives: &[f64], positives: &[f64], far: f64) -> f64 {
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let rate = |tau: f64| {
        let below = neg.partition_point(|&s| s < tau);
        (neg.len() - below) as f64 / neg.len() as f64
    };
    let mut candidates: Vec<f64> = negatives.iter().chain(positives).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // FAR is non-increasing in τ: binary search for the first qualifying one.
    let first = candidates.partition_point(|&t| rate(t) > far);
    candidates.get(first).copied().unwrap_or(*candidates.last().expect("negatives nonempty"))
}

fn fraction_at_least(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64
}

pub fn tpr_at_far(pairs: &[ScoredPair], far: f64) -> Result<RocPoint> {
    check_scores(pairs, "tpr@far")?;
    let (pos, neg): (Vec<ScoredPair>, Vec<ScoredPair>) = pairs.iter().partition(|p| p.same);
    if neg.is_empty() {
        return Err(Error::invalid("tpr@far", "no negative pairs"));
    }
    let pos: Vec<f64> = pos.iter().map(|p| p.score).collect();
    let neg: Vec<f64> = neg.iter().map(|p| p.score).collect();
    let threshold = threshold_for_far(&neg, &pos, far);
    Ok(RocPoint {
        threshold,
        tpr: fraction_at_least(&pos, threshold),
        far: fraction_at_least(&neg, threshold),
    })
}

/// An embedding tagged with its identity.
#[derive(Debug, Clone, Copy)]
pub struct Identified<'a> {
    pub identity: &'a str,
    pub embedding: &'a [f32],
}

/// Best gallery match: (index, similarity); ties go to the lowest index.
fn best_match(probe: &[f32], probe_norm: f64, gallery: &[Identified<'_>], norms: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, g) in gallery.iter().enumerate() {
        let s = cosine_with_norms(probe, probe_norm, g.embedding, norms[j]);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn gallery_norms(gallery: &[Identified<'_>]) -> Result<Vec<f64>> {
    if gallery.is_empty() {
        return Err(Error::invalid("identification", "empty gallery"));
    }
    gallery.iter().map(|g| nonzero_norm(g.embedding)).collect()
}

pub fn closed_set_rank1(gallery: &[Identified<'_>], probes: &[Identified<'_>]) -> Result<f64> {
    let norms = gallery_norms(gallery)?;
    let mut seen = HashSet::new();
    if let Some(dup) = gallery.iter().find(|g| !seen.insert(g.identity)) {
        return Err(Error::invalid("rank-1", format!("gallery identity {} appears more than once", dup.identity)));
    }
    if probes.is_empty() {
        return Err(Error::invalid("rank-1", "no probes"));
    }
    let mut hits = 0;
    for p in probes {
        let (j, _) = best_match(p.embedding, nonzero_norm(p.embedding)?, gallery, &norms);
        hits += (gallery[j].identity == p.identity) as usize;
    }
    Ok(hits as f64 / probes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirResult {
    pub dir: f64,
    pub threshold: f64,
    /// Fraction of impostors accepted at the threshold.
    pub far: f64,
}

/// Rank-1 detection and identification rate at a false alarm rate. The
/// gallery may hold several images per identity.
pub fn open_set_dir_far(
    gallery: &[Identified<'_>],
    genuine: &[Identified<'_>],
    impostors: &[Identified<'_>],
    far: f64,
) -> Result<DirResult> {
    let norms = gallery_norms(gallery)?;
    if impostors.is_empty() {
        return Err(Error::invalid("dir@far", "no impostor probes"));
    }
    let enrolled: HashSet<&str> = gallery.iter().map(|g| g.identity).collect();
    if let Some(p) = impostors.iter().find(|p| enrolled.contains(p.identity)) {
        return Err(Error::invalid("dir@far", format!("impostor identity {} is in the gallery", p.identity)));
    }
    let impostor_scores = impostors
        .iter()
        .map(|p| Ok(best_match(p.embedding, nonzero_norm(p.embedding)?, gallery, &norms).1))
        .collect::<Result<Vec<f64>>>()?;
    let genuine_matches = genuine
        .iter()
        .map(|p| {
            let (j, s) = best_match(p.embedding, nonzero_norm(p.embedding)?, gallery, &norms);
            Ok((gallery[j].identity == p.identity, s))
        })
        .collect::<Result<Vec<(bool, f64)>>>()?;
    let genuine_scores: Vec<f64> = genuine_matches.iter().map(|&(_, s)| s).collect();
    let threshold = threshold_for_far(&impostor_scores, &genuine_scores, far);
    let detected = genuine_matches.iter().filter(|&&(hit, s)| hit && s >= threshold).count();
    Ok(DirResult {
        dir: if genuine.is_empty() { 0.0 } else { detected as f64 / genuine.len() as f64 },
        threshold,
        far: fraction_at_least(&impostor_scores, threshold),
    })
}

/// Mean cosine similarity over all cross pairs of up to `n` frames sampled
/// without replacement from each video.
pub fn ytf_video_similarity(a: &[&[f32]], b: &[&[f32]], n: usize, rng: &mut Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("ytf", "video has no frames"));
    }
    let pick = |frames: &[&[f32]], rng: &mut Rng| -> Result<Vec<(usize, f64)>> {
        let mut idx = rng.sample_without_replacement(frames.len(), n.min(frames.len()));
        idx.sort_unstable();
        idx.into_iter().map(|i| Ok((i, nonzero_norm(frames[i])?))).collect()
    };
    let sa = pick(a, rng)?;
    let sb = pick(b, rng)?;
    let mut total = 0.0;
    for &(i, ni) in &sa {
        for &(j, nj) in &sb {
            total += cosine_with_norms(a[i], ni, b[j], nj);
        }
    }
    Ok(total / (sa.len() * sb.len()) as f64)
}

/// Ids and row-major vectors of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub ids: Vec<String>,
    pub data: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::shape("embedding", "dim", self.dim, values.len()));
        }
        let id = id.into();
        if id.contains('\n') {
            return Err(Error::invalid("embedding", format!("id {id:?} contains a newline")));
        }
        self.ids.push(id);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Id → row; the first occurrence wins.
    pub fn index(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::with_capacity(self.ids.len());
        for (i, id) in self.ids.iter().enumerate() {
            m.entry(id.as_str()).or_insert(i);
        }
        m
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| Error::Format("embedding file header truncated".into()))
        };
        if bytes.get(..4) != Some(EMBEDDING_MAGIC.as_slice()) {
            return Err(Error::Format("not an embedding file (bad magic)".into()));
        }
        let version = word(4)?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Version {
                found: version,
                expected: EMBEDDING_VERSION,
            });
        }
        let count = word(8)? as usize;
        let dim = word(12)? as usize;
        if dim != EMBEDDING_DIM {
            return Err(Error::Format(format!("embedding dim {dim}, expected {EMBEDDING_DIM}")));
        }
        let end = count
            .checked_mul(dim * 4)
            .and_then(|n| n.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("embedding file truncated".into()))?;
        let data = bytes[16..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let text = std::str::from_utf8(&bytes[end..]).map_err(|_| Error::Format("ids are not UTF-8".into()))?;
        let ids: Vec<String> = text.split_terminator('\n').map(str::to_string).collect();
        if ids.len() != count {
            return Err(Error::Format(format!("{} ids for {count} embeddings", ids.len())));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// A line of a pair list: `idA idB label(1/0) fold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub a: String,
    pub b: String,
    pub same: bool,
    pub fold: usize,
}

fn list_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<PairRecord>> {
    list_lines(text)
        .map(|(line, f)| {
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line,
                msg,
            };
            let [a, b, label, fold] = f[..] else {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            };
            let same = match label {
                "1" => true,
                "0" => false,
                _ => return Err(err(format!("label must be 1 or 0, got {label:?}"))),
            };
            let fold = fold.parse().map_err(|_| err(format!("bad fold index {fold:?}")))?;
            Ok(PairRecord {
                a: a.into(),
                b: b.into(),
                same,
                fold,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Gallery,
    Genuine,
    Impostor,
}

/// A line of a gallery/probe list: `id identity role`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListRecord {
    pub id: String,
    pub identity: String,
    pub role: Role,
}

pub fn parse_gallery(text: &str, source: &str) -> Result<Vec<ListRecord>> {
    list_lines(text)
        .map(|(line, f)| {
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line,
                msg,
            };
            let [id, identity, role] = f[..] else {
                return Err(err(format!("expected 3 fields, got {}", f.len())));
            };
            let role = match role {
                "gallery" => Role::Gallery,
                "genuine" => Role::Genuine,
                "impostor" => Role::Impostor,
                _ => return Err(err(format!("unknown role {role:?}"))),
            };
            Ok(ListRecord {
                id: id.into(),
                identity: identity.into(),
                role,
            })
        })
        .collect()
}

fn lookup<'a>(set: &'a EmbeddingSet, index: &HashMap<&str, usize>, id: &str) -> Result<&'a [f32]> {
    index
        .get(id)
        .map(|&i| set.vector(i))
        .ok_or_else(|| Error::invalid("eval", format!("id {id:?} not found in embedding file")))
}

/// Groups pairs by fold index in ascending order.
fn into_folds(pairs: &[PairRecord], mut score: impl FnMut(usize, &PairRecord) -> Result<f64>) -> Result<Vec<Vec<ScoredPair>>> {
    let mut folds: Vec<Vec<ScoredPair>> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if folds.len() <= p.fold {
            folds.resize_with(p.fold + 1, Vec::new);
        }
        folds[p.fold].push(ScoredPair {
            score: score(i, p)?,
            same: p.same,
        });
    }
    Ok(folds)
}

/// Image-pair verification: per-fold accuracy plus TPR at `far` over all pairs.
pub fn run_pair_verification(set: &EmbeddingSet, pairs: &[PairRecord], far: f64) -> Result<(VerificationResult, RocPoint)> {
    let index = set.index();
    let folds = into_folds(pairs, |_, p| cosine_similarity(lookup(set, &index, &p.a)?, lookup(set, &index, &p.b)?))?;
    let all: Vec<ScoredPair> = folds.iter().flatten().copied().collect();
    Ok((verification_10fold(&folds)?, tpr_at_far(&all, far)?))
}

/// Video id of a frame: everything before the last `/`.
pub fn video_id(frame_id: &str) -> &str {
    frame_id.rsplit_once('/').map_or(frame_id, |(v, _)| v)
}

/// Video-pair verification; pair `i` samples frames with stream `i` of `seed`.
pub fn run_video_verification(
    set: &EmbeddingSet,
    pairs: &[PairRecord],
    frames_per_video: usize,
    seed: u64,
) -> Result<VerificationResult> {
    let mut videos: HashMap<&str, Vec<&[f32]>> = HashMap::new();
    for (i, id) in set.ids.iter().enumerate() {
        videos.entry(video_id(id)).or_default().push(set.vector(i));
    }
    let frames = |v: &str| {
        videos
            .get(v)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid("eval", format!("video {v:?} not found in embedding file")))
    };
    let folds = into_folds(pairs, |i, p| {
        ytf_video_similarity(frames(&p.a)?, frames(&p.b)?, frames_per_video, &mut Rng::with_stream(seed, i as u64))
    })?;
    verification_10fold(&folds)
}

fn identified<'a>(set: &'a EmbeddingSet, index: &HashMap<&str, usize>, list: &'a [ListRecord], role: Role) -> Result<Vec<Identified<'a>>> {
    list.iter()
        .filter(|r| r.role == role)
        .map(|r| {
            Ok(Identified {
                identity: &r.identity,
                embedding: lookup(set, index, &r.id)?,
            })
        })
        .collect()
}

/// Closed-set rank-1 over the gallery and genuine rows of a list.
pub fn run_closed_set(set: &EmbeddingSet, list: &[ListRecord]) -> Result<f64> {
    let index = set.index();
    closed_set_rank1(&identified(set, &index, list, Role::Gallery)?, &identified(set, &index, list, Role::Genuine)?)
}

pub fn run_open_set(set: &EmbeddingSet, list: &[ListRecord], far: f64) -> Result<DirResult> {
    let index = set.index();
    open_set_dir_far(
        &identified(set, &index, list, Role::Gallery)?,
        &identified(set, &index, list, Role::Genuine)?,
        &identified(set, &index, list, Role::Impostor)?,
        far,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistKind {
    Value,
    Gradient,
}

impl HistKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HistKind::Value => "value",
            HistKind::Gradient => "gradient",
        }
    }
}

/// Exact zeros counted apart, the remaining values in equal-width bins
/// spanning their range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub layer: String,
    pub kind: HistKind,
    pub zero_count: u64,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(layer: &str, kind: HistKind, values: &[f32], bins: usize) -> Self {
        let bins = bins.max(1);
        let nonzero: Vec<f64> = values.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
        let zero_count = (values.len() - nonzero.len()) as u64;
        let (lo, hi) = nonzero
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let (lo, hi) = if nonzero.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0u64; bins];
        for v in nonzero {
            let b = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        Self {
            layer: layer.to_string(),
            kind,
            zero_count,
            edges,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.zero_count + self.counts.iter().sum::<u64>()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zero_count as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfmStats {
    pub histograms: Vec<Histogram>,
}

impl MfmStats {
    pub fn total(&self, kind: HistKind) -> u64 {
        self.histograms.iter().filter(|h| h.kind == kind).map(Histogram::total).sum()
    }

    /// Exact-zero fraction pooled over all layers.
    pub fn zero_fraction(&self, kind: HistKind) -> f64 {
        let zeros: u64 = self.histograms.iter().filter(|h| h.kind == kind).map(|h| h.zero_count).sum();
        zeros as f64 / self.total(kind).max(1) as f64
    }

    /// `layer,kind,bin_lo,bin_hi,count`; the exact-zero row has `bin_lo = bin_hi = 0`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,bin_lo,bin_hi,count\n");
        for h in &self.histograms {
            let kind = h.kind.as_str();
            let _ = writeln!(s, "{},{kind},0,0,{}", h.layer, h.zero_count);
            for (i, c) in h.counts.iter().enumerate() {
                let _ = writeln!(s, "{},{kind},{},{},{c}", h.layer, h.edges[i], h.edges[i + 1]);
            }
        }
        s
    }
}

/// Histograms of every MFM output and of the gradient reaching each MFM
/// input, from a test-mode forward pass and the softmax loss on `labels`.
pub fn mfm_stats(
    model: &mut NetworkModel<f32>,
    images: &[Tensor<f32>],
    labels: &[usize],
    bins: usize,
    batch_size: usize,
) -> Result<MfmStats> {
    if images.is_empty() {
        return Err(Error::invalid("mfm stats", "no images"));
    }
    if images.len() != labels.len() {
        return Err(Error::shape("mfm stats", "labels", images.len(), labels.len()));
    }
    model.set_mfm_probe(true);
    let result = (|| {
        let mut values: Vec<(String, Vec<f32>, Vec<f32>)> = Vec::new();
        for (chunk, chunk_labels) in images.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
            let batch = Tensor::stack(chunk)?;
            let logits = model.forward(&batch, &mut Pass::Eval)?;
            let (_, grad) = softmax_loss_batch(&logits, chunk_labels)?;
            model.backward(&grad)?;
            model.zero_grad();
            let probes = model.mfm_probes();
            if probes.is_empty() {
                return Err(Error::invalid("mfm stats", "model has no MFM layers"));
            }
            if values.is_empty() {
                values = probes.iter().map(|(n, _)| (n.to_string(), Vec::new(), Vec::new())).collect();
            }
            for ((_, v, g), (_, p)) in values.iter_mut().zip(&probes) {
                v.extend_from_slice(p.outputs.as_ref().expect("probed forward").data());
                g.extend_from_slice(p.input_grads.as_ref().expect("probed backward").data());
            }
        }
        let mut histograms = Vec::with_capacity(values.len() * 2);
        for (name, v, _) in &values {
            histograms.push(Histogram::from_values(name, HistKind::Value, v, bins));
        }
        for (name, _, g) in &values {
            histograms.push(Histogram::from_values(name, HistKind::Gradient, g, bins));
        }
        Ok(MfmStats { histograms })
    })();
    model.set_mfm_probe(false);
    model.clear_caches();
    result
}
