//! Retrieval metrics, zero-shot probing, MLP probes on frozen embeddings,
//! direction swap/removal experiments and DOA error breakdowns.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nncore::{uniform_init, Adam, CosineSchedule, ParamStore, Tape, Tensor};
use crate::roomsim::SpatialAttributes;
use crate::seeding::rng_for;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &[f64]) -> Vec<f64> {
    let n = norm(a).max(1e-12);
    a.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(1e-24)
}

/// Great-circle angle between two direction vectors, in degrees.
pub fn angular_error_deg(a: &[f64], b: &[f64]) -> f64 {
    let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    norm(&c).atan2(dot(a, b)).to_degrees()
}

/// Metrics for one query direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map10: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n: usize,
    pub audio_to_text: RankMetrics,
    pub text_to_audio: RankMetrics,
}

impl RetrievalReport {
    /// Mean mAP@10 over both directions (checkpoint selection score).
    pub fn mean_map10(&self) -> f64 {
        0.5 * (self.audio_to_text.map10 + self.text_to_audio.map10)
    }
}

/// 1-based rank of `target` among `scores` sorted descending, ties broken by
/// lower index first.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < target)).count()
}

fn rank_metrics(queries: &[Vec<f64>], keys: &[Vec<f64>]) -> RankMetrics {
    let ranks: Vec<usize> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let scores: Vec<f64> = keys.iter().map(|k| cosine(q, k)).collect();
            rank_of(&scores, i)
        })
        .collect();
    let n = ranks.len() as f64;
    let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let map10 = ranks.iter().map(|&r| if r <= 10 { 1.0 / r as f64 } else { 0.0 }).sum::<f64>() / n;
    RankMetrics { r1: frac(1), r5: frac(5), r10: frac(10), map10 }
}

/// Cross-modal retrieval where item `i` of each list is the only match of
/// item `i` of the other.
pub fn retrieval_report(audio: &[Vec<f64>], text: &[Vec<f64>]) -> Result<RetrievalReport> {
    if audio.len() != text.len() {
        return Err(Error::LengthMismatch(audio.len(), text.len()));
    }
    if audio.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(RetrievalReport {
        n: audio.len(),
        audio_to_text: rank_metrics(audio, text),
        text_to_audio: rank_metrics(text, audio),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub attribute: String,
    pub classes: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub n: usize,
}

/// Nearest-prototype classification by cosine. Index of the best prototype.
pub fn nearest_prototype(x: &[f64], prototypes: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_s = f64::NEG_INFINITY;
    for (i, p) in prototypes.iter().enumerate() {
        let s = cosine(x, p);
        if s > best_s {
            best_s = s;
            best = i;
        }
    }
    best
}

/// Zero-shot classification of audio embeddings against one probe embedding
/// per class. Samples with no label for this attribute are skipped.
pub fn zeroshot_classify(
    attribute: &str,
    audio: &[Vec<f64>],
    labels: &[Option<&str>],
    classes: &[&str],
    prototypes: &[Vec<f64>],
) -> Result<ZeroShotReport> {
    if audio.len() != labels.len() {
        return Err(Error::LengthMismatch(audio.len(), labels.len()));
    }
    if classes.len() != prototypes.len() {
        return Err(Error::LengthMismatch(classes.len(), prototypes.len()));
    }
    let mut confusion = vec![vec![0; classes.len()]; classes.len()];
    let mut n = 0;
    for (x, label) in audio.iter().zip(labels) {
        let Some(label) = label else { continue };
        let t = classes.iter().position(|c| c == label).ok_or_else(|| Error::MissingClass(label.to_string()))?;
        confusion[t][nearest_prototype(x, prototypes)] += 1;
        n += 1;
    }
    let correct: usize = (0..classes.len()).map(|i| confusion[i][i]).sum();
    Ok(ZeroShotReport {
        attribute: attribute.to_string(),
        classes: classes.iter().map(|c| c.to_string()).collect(),
        confusion,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    DoaRegression,
    Direction4Class,
    Distance2Class,
}

impl ProbeTask {
    pub fn metric_name(self) -> &'static str {
        match self {
            ProbeTask::DoaRegression => "mae_deg",
            _ => "accuracy",
        }
    }
}

/// Probe targets: unit direction vectors or class indices.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeTargets {
    Directions(Vec<[f64; 3]>),
    Classes { labels: Vec<usize>, n_classes: usize },
}

impl ProbeTargets {
    fn len(&self) -> usize {
        match self {
            ProbeTargets::Directions(v) => v.len(),
            ProbeTargets::Classes { labels, .. } => labels.len(),
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            ProbeTargets::Directions(_) => 3,
            ProbeTargets::Classes { n_classes, .. } => *n_classes,
        }
    }

    /// Regression-style rows (one-hot for classes).
    fn rows(&self) -> Vec<Vec<f64>> {
        match self {
            ProbeTargets::Directions(v) => v.iter().map(|d| d.to_vec()).collect(),
            ProbeTargets::Classes { labels, n_classes } => labels
                .iter()
                .map(|&c| (0..*n_classes).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }
}

/// Embeddings with the room each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub x: Vec<Vec<f64>>,
    pub rooms: Vec<u64>,
    pub targets: ProbeTargets,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 64, epochs: 60, batch_size: 128, peak_lr: 3e-3, ridge: 1e-6, seed: 0 }
    }
}

/// Two-layer MLP probe with a linear skip path. The skip path is the
/// closed-form ridge fit; the MLP learns the residual and its output layer
/// starts at zero, so training begins from the best linear probe.
#[derive(Debug, Clone)]
pub struct MlpProbe {
    pub task: ProbeTask,
    params: ParamStore,
    /// `out x (in + 1)`, last column is the bias.
    skip: DMatrix<f64>,
}

impl MlpProbe {
    fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &[Vec<f64>]) -> Result<crate::nncore::Var> {
        let xin = tape.input(Tensor::from_rows(x)?);
        let (w1, b1) = (tape.param_named("w1")?, tape.param_named("b1")?);
        let (w2, b2) = (tape.param_named("w2")?, tape.param_named("b2")?);
        let h = tape.linear(xin, w1, b1)?;
        let h = tape.relu(h);
        let y = tape.linear(h, w2, b2)?;
        let lin: Vec<Vec<f64>> = x.iter().map(|r| self.linear_part(r)).collect();
        let lin = tape.input(Tensor::from_rows(&lin)?);
        tape.add(y, lin)
    }

    fn linear_part(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..self.skip.nrows())
            .map(|o| (0..d).map(|i| self.skip[(o, i)] * x[i]).sum::<f64>() + self.skip[(o, d)])
            .collect()
    }

    /// Raw outputs (direction vector or class scores).
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(512) {
            let mut tape = Tape::new(&self.params);
            let y = self.forward(&mut tape, chunk)?;
            let t = tape.value(y);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        let y = self.predict(&[x.to_vec()])?.remove(0);
        Ok(argmax(&y))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

fn ridge_fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<DMatrix<f64>> {
    let d = x[0].len() + 1;
    let out = y[0].len();
    let xa = DMatrix::from_fn(x.len(), d, |r, c| if c + 1 == d { 1.0 } else { x[r][c] });
    let ym = DMatrix::from_fn(y.len(), out, |r, c| y[r][c]);
    let mut gram = xa.transpose() * &xa;
    for i in 0..d {
        gram[(i, i)] += lambda * x.len() as f64;
    }
    let rhs = xa.transpose() * ym;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Domain("ridge system is not positive definite".into()))?
        .solve(&rhs);
    Ok(w.transpose())
}

/// Probe outcome on train and test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: ProbeTask,
    pub metric: String,
    pub train_metric: f64,
    pub test_metric: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn check_split(train: &ProbeData, test: &ProbeData) -> Result<()> {
    for d in [train, test] {
        if d.x.is_empty() || d.x.len() != d.targets.len() || d.x.len() != d.rooms.len() {
            return Err(Error::DegenerateSplit("empty or misaligned probe data".into()));
        }
    }
    let train_rooms: HashSet<u64> = train.rooms.iter().copied().collect();
    if let Some(r) = test.rooms.iter().find(|r| train_rooms.contains(r)) {
        return Err(Error::DegenerateSplit(format!("room {r} appears in both splits")));
    }
    if let ProbeTargets::Classes { labels, .. } = &train.targets {
        if labels.iter().collect::<HashSet<_>>().len() < 2 {
            return Err(Error::DegenerateSplit("fewer than two classes in the training split".into()));
        }
    }
    if train.targets.out_dim() != test.targets.out_dim() {
        return Err(Error::DegenerateSplit("train and test targets differ in kind".into()));
    }
    Ok(())
}

/// Mean great-circle error of predicted directions, in degrees.
pub fn direction_mae_deg(pred: &[Vec<f64>], target: &[[f64; 3]]) -> f64 {
    let s: f64 = pred.iter().zip(target).map(|(p, t)| angular_error_deg(p, t)).sum();
    s / pred.len().max(1) as f64
}

fn score(probe: &MlpProbe, data: &ProbeData) -> Result<f64> {
    let pred = probe.predict(&data.x)?;
    Ok(match &data.targets {
        ProbeTargets::Directions(t) => direction_mae_deg(&pred, t),
        ProbeTargets::Classes { labels, .. } => {
            pred.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count() as f64 / labels.len() as f64
        }
    })
}

fn probe_loss(probe: &MlpProbe, data: &ProbeData, yrows: &[Vec<f64>]) -> Result<f64> {
    let pred = probe.predict(&data.x)?;
    Ok(match &data.targets {
        ProbeTargets::Classes { labels, .. } => pred
            .iter()
            .zip(labels)
            .map(|(p, &l)| {
                let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - p[l]
            })
            .sum(),
        ProbeTargets::Directions(_) => pred.iter().zip(yrows).map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum(),
    })
}

/// Trains a probe on frozen embeddings. Train and test must not share rooms.
pub fn train_probe(task: ProbeTask, train: &ProbeData, test: &ProbeData, cfg: &ProbeConfig) -> Result<(MlpProbe, ProbeResult)> {
    check_split(train, test)?;
    let ydim = train.targets.out_dim();
    let yrows = train.targets.rows();
    let skip = ridge_fit(&train.x, &yrows, cfg.ridge)?;
    let din = train.x[0].len();
    let mut rng = rng_for(&[cfg.seed, 0x70b3]);
    let mut params = ParamStore::new();
    params.add("w1", uniform_init(&mut rng, &[cfg.hidden, din], (6.0 / din as f64).sqrt()))?;
    params.add("b1", Tensor::zeros(&[cfg.hidden]))?;
    params.add("w2", Tensor::zeros(&[ydim, cfg.hidden]))?;
    params.add("b2", Tensor::zeros(&[ydim]))?;
    let mut probe = MlpProbe { task, params, skip };

    let bs = cfg.batch_size.max(1);
    let steps = (cfg.epochs * train.x.len().div_ceil(bs)) as u64;
    let mut opt = Adam::new(&probe.params, CosineSchedule { peak: cfg.peak_lr, floor: cfg.peak_lr * 0.01, total_steps: steps });
    let mut order: Vec<usize> = (0..train.x.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(bs) {
            let xb: Vec<Vec<f64>> = idx.iter().map(|&i| train.x[i].clone()).collect();
            let grads = {
                let mut tape = Tape::new(&probe.params);
                let y = probe.forward(&mut tape, &xb)?;
                let loss = match &train.targets {
                    ProbeTargets::Classes { labels, .. } => tape.cross_entropy(y, idx.iter().map(|&i| labels[i]).collect())?,
                    ProbeTargets::Directions(_) => {
                        let t: Vec<Vec<f64>> = idx.iter().map(|&i| yrows[i].clone()).collect();
                        let t = tape.input(Tensor::from_rows(&t)?);
                        let d = tape.sub(y, t)?;
                        let sq = tape.mul(d, d)?;
                        let n = tape.value(sq).numel();
                        tape.weighted_sum(sq, vec![1.0 / idx.len() as f64; n])?
                    }
                };
                tape.check_finite()?;
                tape.backward(loss)?
            };
            opt.step(&mut probe.params, &grads)?;
        }
    }
    // Keep the plain linear probe when the residual MLP did not lower the
    // training loss (Adam jitters around an exact linear fit).
    let trained_loss = probe_loss(&probe, train, &yrows)?;
    let mut linear_only = probe.clone();
    for name in ["w2", "b2"] {
        let id = linear_only.params.id(name).expect("probe parameter");
        linear_only.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    if probe_loss(&linear_only, train, &yrows)? <= trained_loss {
        probe = linear_only;
    }
    let result = ProbeResult {
        task,
        metric: task.metric_name().to_string(),
        train_metric: score(&probe, train)?,
        test_metric: score(&probe, test)?,
        n_train: train.x.len(),
        n_test: test.x.len(),
    };
    Ok((probe, result))
}

/// Text prototypes for the four horizontal directions, in
/// left/right/front/back order.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionPrototypes {
    pub protos: [Vec<f64>; 4],
}

impl DirectionPrototypes {
    pub fn new(protos: [Vec<f64>; 4]) -> Self {
        Self { protos: protos.map(|p| normalize(&p)) }
    }
}

/// `normalize(v - p_old + p_new)`.
pub fn swap_embedding(v: &[f64], old: usize, new: usize, protos: &DirectionPrototypes) -> Vec<f64> {
    let moved: Vec<f64> = v.iter().zip(&protos.protos[old]).zip(&protos.protos[new]).map(|((x, o), n)| x - o + n).collect();
    normalize(&moved)
}

/// `normalize(v - p_old)`.
pub fn remove_direction(v: &[f64], old: usize, protos: &DirectionPrototypes) -> Vec<f64> {
    let moved: Vec<f64> = v.iter().zip(&protos.protos[old]).map(|(x, o)| x - o).collect();
    normalize(&moved)
}

/// Swaps one embedding and reports whether the classifier now sees `new`.
pub fn direction_swap(
    v: &[f64],
    old: usize,
    new: usize,
    protos: &DirectionPrototypes,
    classify: &dyn Fn(&[f64]) -> usize,
) -> (Vec<f64>, bool) {
    let s = swap_embedding(v, old, new, protos);
    let ok = classify(&s) == new;
    (s, ok)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub n_test: usize,
    pub n_correct_before: usize,
    pub n_swaps: usize,
    /// Fraction of swaps classified as the new direction.
    pub swap_success_rate: f64,
    /// Fraction of successful swaps that classify as the original direction
    /// after swapping back.
    pub swap_back_rate: f64,
    /// Fraction of removals still classified as the original direction.
    pub removal_original_rate: f64,
    /// Per original direction, fraction of swaps that succeeded.
    pub per_direction_success: [f64; 4],
}

/// Runs swap and removal over every correctly classified sample and every
/// other target direction.
pub fn swap_experiment(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    protos: &DirectionPrototypes,
    classify: &(dyn Fn(&[f64]) -> usize + Sync),
) -> Result<SwapReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch(embeddings.len(), labels.len()));
    }
    let per: Vec<Option<(usize, [usize; 3], usize)>> = embeddings
        .par_iter()
        .zip(labels)
        .map(|(v, &old)| {
            if classify(v) != old {
                return None;
            }
            let (mut ok, mut back) = (0, 0);
            for new in (0..4).filter(|&n| n != old) {
                let (s, good) = direction_swap(v, old, new, protos, classify);
                if good {
                    ok += 1;
                    if direction_swap(&s, new, old, protos, classify).1 {
                        back += 1;
                    }
                }
            }
            let removed_same = usize::from(classify(&remove_direction(v, old, protos)) == old);
            Some((old, [ok, back, removed_same], 3))
        })
        .collect();
    let mut n_correct = 0;
    let (mut swaps, mut ok, mut back, mut removed_same) = (0, 0, 0, 0);
    let mut dir_ok = [0usize; 4];
    let mut dir_n = [0usize; 4];
    for (old, [o, b, r], n) in per.into_iter().flatten() {
        n_correct += 1;
        swaps += n;
        ok += o;
        back += b;
        removed_same += r;
        dir_ok[old] += o;
        dir_n[old] += n;
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(SwapReport {
        n_test: embeddings.len(),
        n_correct_before: n_correct,
        n_swaps: swaps,
        swap_success_rate: frac(ok, swaps),
        swap_back_rate: frac(back, ok),
        removal_original_rate: frac(removed_same, n_correct),
        per_direction_success: std::array::from_fn(|i| frac(dir_ok[i], dir_n[i])),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBin {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownSection {
    pub attribute: String,
    pub bins: Vec<ErrorBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaBreakdown {
    pub n: usize,
    pub mean_error_deg: f64,
    pub sections: Vec<BreakdownSection>,
}

pub const BREAKDOWN_BINS: usize = 10;

fn bin_section(name: &str, values: &[f64], errors: &[f64]) -> BreakdownSection {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / BREAKDOWN_BINS as f64;
    let mut groups = vec![Vec::new(); BREAKDOWN_BINS];
    for (&v, &e) in values.iter().zip(errors) {
        let b = if width > 0.0 { (((v - lo) / width) as usize).min(BREAKDOWN_BINS - 1) } else { 0 };
        groups[b].push(e);
    }
    let bins = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let count = g.len();
            let mean = if count == 0 { 0.0 } else { g.iter().sum::<f64>() / count as f64 };
            let var = if count == 0 { 0.0 } else { g.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / count as f64 };
            ErrorBin { lo: lo + i as f64 * width, hi: lo + (i + 1) as f64 * width, mean, std: var.sqrt(), count }
        })
        .collect();
    BreakdownSection { attribute: name.to_string(), bins }
}

/// Absolute DOA errors binned over azimuth, elevation, distance, floor area
/// and T30 (ten uniform bins each).
pub fn doa_error_breakdown(pred: &[Vec<f64>], target: &[[f64; 3]], attrs: &[SpatialAttributes]) -> Result<DoaBreakdown> {
    if pred.len() != target.len() || pred.len() != attrs.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len().min(attrs.len())));
    }
    let errors: Vec<f64> = pred.iter().zip(target).map(|(p, t)| angular_error_deg(p, t)).collect();
    let fields: [(&str, fn(&SpatialAttributes) -> f64); 5] = [
        ("azimuth_deg", |a| a.azimuth_deg),
        ("elevation_deg", |a| a.elevation_deg),
        ("distance_m", |a| a.distance_m),
        ("floor_area_m2", |a| a.floor_area_m2),
        ("t30_ms", |a| a.t30_ms),
    ];
    let sections = fields
        .iter()
        .map(|(name, f)| bin_section(name, &attrs.iter().map(f).collect::<Vec<_>>(), &errors))
        .collect();
    Ok(DoaBreakdown { n: errors.len(), mean_error_deg: errors.iter().sum::<f64>() / errors.len().max(1) as f64, sections })
}

impl DoaBreakdown {
    /// Aligned text table: attribute, range, mean, std, count.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14} {:>22} {:>9} {:>9} {:>6}\n", "attribute", "range", "mean", "std", "count");
        for sec in &self.sections {
            for b in &sec.bins {
                let range = format!("[{:.1}, {:.1}]", b.lo, b.hi);
                let _ = writeln!(s, "{:<14} {:>22} {:>9.2} {:>9.2} {:>6}", sec.attribute, range, b.mean, b.std, b.count);
            }
        }
        s
    }
}
