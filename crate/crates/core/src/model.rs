//! Dual audio/text encoder with spatial regression heads, its losses, and the
//! training loop.
//!
//! Audio path: a log-mel CNN (semantic branch) and a coordinate-augmented
//! intensity-vector CNN (spatial branch) are concatenated and projected into
//! the joint space. Text path: hashed bag of words, embedding, MLP. Both
//! outputs are unit-norm.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{retrieval_report, RetrievalReport};
use crate::features::{adaptive_pool, FeatureSet};
use crate::nncore::{uniform_init, Adam, Checkpoint, CosineSchedule, ParamStore, Tape, Tensor, Var};
use crate::seeding::{derive_seed, label_salt, rng_for};

/// Intensity-vector channels (active xyz, reactive xyz).
pub const IV_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElsaConfig {
    pub semantic_dim: usize,
    pub spatial_dim: usize,
    pub joint_dim: usize,
    pub projection_hidden: usize,
    pub semantic_channels: [usize; 2],
    pub spatial_channels: [usize; 2],
    pub text_hash_buckets: usize,
    pub text_embed_dim: usize,
    pub text_hidden: usize,
    pub head_hidden: usize,
    pub init_tau: f64,
    pub min_tau: f64,
    pub mix_nonspatial_fraction: f64,
    /// Log-mel input grid (frames, mel bands) after adaptive pooling.
    pub semantic_grid: [usize; 2],
    /// Intensity-vector input grid (frames, frequency bins).
    pub spatial_grid: [usize; 2],
}

impl Default for ElsaConfig {
    fn default() -> Self {
        Self {
            semantic_dim: 96,
            spatial_dim: 24,
            joint_dim: 64,
            projection_hidden: 128,
            semantic_channels: [8, 32],
            spatial_channels: [16, 32],
            text_hash_buckets: 4096,
            text_embed_dim: 64,
            text_hidden: 128,
            head_hidden: 32,
            init_tau: 0.07,
            min_tau: 0.01,
            mix_nonspatial_fraction: 0.25,
            semantic_grid: [32, 32],
            spatial_grid: [16, 16],
        }
    }
}

impl ElsaConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.semantic_dim,
            self.spatial_dim,
            self.joint_dim,
            self.projection_hidden,
            self.text_hash_buckets,
            self.text_embed_dim,
            self.text_hidden,
            self.head_hidden,
        ];
        let grids_ok = self.semantic_grid.iter().chain(&self.spatial_grid).all(|&g| g >= 4);
        let channels_ok = self.semantic_channels.iter().chain(&self.spatial_channels).all(|&c| c > 0);
        if dims.contains(&0)
            || !grids_ok
            || !channels_ok
            || !(self.min_tau > 0.0 && self.init_tau >= self.min_tau)
            || !(0.0..=1.0).contains(&self.mix_nonspatial_fraction)
        {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        Ok(())
    }

    pub fn audio_concat_dim(&self) -> usize {
        self.semantic_dim + self.spatial_dim
    }
}

/// Pooled network inputs of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioInput {
    /// `semantic_grid[0] x semantic_grid[1]`, raw log-mel values.
    pub logmel: Vec<f64>,
    /// `spatial_grid[0] x spatial_grid[1] x 6`.
    pub ivs: Vec<f64>,
}

impl AudioInput {
    pub fn from_features(fs: &FeatureSet, cfg: &ElsaConfig) -> Result<Self> {
        if fs.frames == 0 {
            return Err(Error::TooShort { len: 0, needed: 1 });
        }
        let [st, sm] = cfg.semantic_grid;
        let [it, ifr] = cfg.spatial_grid;
        Ok(Self {
            logmel: adaptive_pool(&fs.logmel, fs.frames, fs.mel_bands, 1, st, sm),
            ivs: adaptive_pool(&fs.ivs, fs.frames, fs.bins, IV_CHANNELS, it, ifr),
        })
    }

    fn check(&self, cfg: &ElsaConfig) -> Result<()> {
        let sem = cfg.semantic_grid[0] * cfg.semantic_grid[1];
        let spa = cfg.spatial_grid[0] * cfg.spatial_grid[1] * IV_CHANNELS;
        if self.logmel.len() != sem || self.ivs.len() != spa {
            return Err(Error::Shape { op: "audio_input", lhs: vec![self.logmel.len(), self.ivs.len()], rhs: vec![sem, spa] });
        }
        Ok(())
    }
}

/// Regression targets. Mono-replicated samples carry none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetLabels {
    pub direction: Option<[f64; 3]>,
    pub distance_m: Option<f64>,
    pub floor_area_m2: Option<f64>,
    pub is_spatial: bool,
}

impl TargetLabels {
    pub fn mono() -> Self {
        Self { direction: None, distance_m: None, floor_area_m2: None, is_spatial: false }
    }
}

/// Input normalisation and target z-scoring constants, fitted on the
/// training split and stored with the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scalers {
    pub logmel_mean: f64,
    pub logmel_std: f64,
    pub distance_mean: f64,
    pub distance_std: f64,
    pub area_mean: f64,
    pub area_std: f64,
}

impl Default for Scalers {
    fn default() -> Self {
        Self { logmel_mean: 0.0, logmel_std: 1.0, distance_mean: 0.0, distance_std: 1.0, area_mean: 0.0, area_std: 1.0 }
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        s += v;
        s2 += v * v;
    }
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let m = s / n;
    let sd = (s2 / n - m * m).max(0.0).sqrt();
    (m, if sd > 1e-9 { sd } else { 1.0 })
}

impl Scalers {
    pub fn fit(samples: &[Sample]) -> Self {
        let (logmel_mean, logmel_std) = mean_std(samples.iter().flat_map(|s| s.input.logmel.iter().copied()));
        let spatial = || samples.iter().filter(|s| s.targets.is_spatial);
        let (distance_mean, distance_std) = mean_std(spatial().filter_map(|s| s.targets.distance_m));
        let (area_mean, area_std) = mean_std(spatial().filter_map(|s| s.targets.floor_area_m2));
        Self { logmel_mean, logmel_std, distance_mean, distance_std, area_mean, area_std }
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: AudioInput,
    pub caption: String,
    pub targets: TargetLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip: f64,
    pub dir: f64,
    pub dist: f64,
    pub area: f64,
    pub total: f64,
}

/// Lower-cased alphanumeric tokens hashed into `buckets`.
pub fn tokenize(text: &str, buckets: usize) -> Result<Vec<usize>> {
    let ids: Vec<usize> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (label_salt(&t.to_lowercase()) % buckets as u64) as usize)
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyCaption);
    }
    Ok(ids)
}

/// `-log softmax_j(x_j . y / tau)[i]`.
pub fn infonce(candidates: &[Vec<f64>], i: usize, y: &[f64], tau: f64) -> f64 {
    let logits: Vec<f64> = candidates.iter().map(|x| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / tau).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() - logits[i]
}

/// Symmetric contrastive loss averaged over both retrieval directions.
pub fn clip_loss(za: &[Vec<f64>], zt: &[Vec<f64>], tau: f64) -> Result<f64> {
    if za.len() != zt.len() {
        return Err(Error::LengthMismatch(za.len(), zt.len()));
    }
    if za.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = za.len() as f64;
    let a: f64 = (0..za.len()).map(|i| infonce(zt, i, &za[i], tau)).sum();
    let t: f64 = (0..zt.len()).map(|i| infonce(za, i, &zt[i], tau)).sum();
    Ok((a + t) / (2.0 * n))
}

/// Forward outputs of the audio path.
pub struct AudioOut {
    /// Pre-normalisation joint vector feeding the regression heads.
    pub raw: Var,
    pub z: Var,
}

/// Audio embeddings with head predictions, for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbeddings {
    pub z: Vec<Vec<f64>>,
    pub raw: Vec<Vec<f64>>,
    pub direction: Vec<[f64; 3]>,
    pub distance_m: Vec<f64>,
    pub floor_area_m2: Vec<f64>,
}

/// Checkpoint configuration block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ElsaConfig,
    scalers: Scalers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElsaModel {
    pub config: ElsaConfig,
    pub params: ParamStore,
    pub scalers: Scalers,
}

fn he(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform_init(rng, shape, (6.0 / fan_in as f64).sqrt())
}

fn glorot(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    uniform_init(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

impl ElsaModel {
    pub fn new(config: ElsaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = rng_for(&[seed, label_salt("model-init")]);
        let mut p = ParamStore::new();
        let mut conv = |p: &mut ParamStore, name: &str, cin: usize, cout: usize| -> Result<()> {
            p.add(format!("{name}.w"), he(&mut rng, &[cout, cin, 3, 3], cin * 9))?;
            p.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
            Ok(())
        };
        let [s1, s2] = c.semantic_channels;
        let [t1, t2] = c.spatial_channels;
        conv(&mut p, "sem.conv1", 1, s1)?;
        conv(&mut p, "sem.conv2", s1, s2)?;
        conv(&mut p, "spa.conv1", IV_CHANNELS + 2, t1)?;
        conv(&mut p, "spa.conv2", t1, t2)?;
        let mut rng = rng_for(&[seed, label_salt("model-init-dense")]);
        let mut dense = |p: &mut ParamStore, name: &str, din: usize, dout: usize, relu_in: bool| -> Result<()> {
            let w = if relu_in { he(&mut rng, &[dout, din], din) } else { glorot(&mut rng, &[dout, din], din, dout) };
            p.add(format!("{name}.w"), w)?;
            p.add(format!("{name}.b"), Tensor::zeros(&[dout]))?;
            Ok(())
        };
        dense(&mut p, "sem.fc", s2, c.semantic_dim, true)?;
        dense(&mut p, "spa.fc", t2, c.spatial_dim, true)?;
        dense(&mut p, "proj.fc1", c.audio_concat_dim(), c.projection_hidden, true)?;
        dense(&mut p, "proj.fc2", c.projection_hidden, c.joint_dim, true)?;
        dense(&mut p, "text.fc1", c.text_embed_dim, c.text_hidden, false)?;
        dense(&mut p, "text.fc2", c.text_hidden, c.joint_dim, true)?;
        for (head, out) in [("head.dir", 3), ("head.dist", 1), ("head.area", 1)] {
            dense(&mut p, &format!("{head}.fc1"), c.joint_dim, c.head_hidden, false)?;
            dense(&mut p, &format!("{head}.fc2"), c.head_hidden, out, true)?;
        }
        let mut rng = rng_for(&[seed, label_salt("model-init-text")]);
        p.add("text.embed", uniform_init(&mut rng, &[c.text_hash_buckets, c.text_embed_dim], 1.0))?;
        p.add("logit_scale", Tensor::scalar((1.0 / c.init_tau).ln()))?;
        Ok(Self { config, params: p, scalers: Scalers::default() })
    }

    /// Current temperature after clamping.
    pub fn tau(&self) -> f64 {
        let s = self.params.get(self.params.id("logit_scale").expect("logit_scale")).data()[0];
        (-s.min((1.0 / self.config.min_tau).ln())).exp()
    }

    fn dense(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = tape.param_named(&format!("{name}.w"))?;
        let b = tape.param_named(&format!("{name}.b"))?;
        tape.linear(x, w, b)
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = tape.param_named(&format!("{name}.w"))?;
        let b = tape.param_named(&format!("{name}.b"))?;
        let y = tape.conv2d(x, w, b, 1, 1)?;
        Ok(tape.relu(y))
    }

    /// Semantic branch on normalised log-mel inputs: `[B, semantic_dim]`.
    pub fn semantic_forward(&self, tape: &mut Tape, inputs: &[&AudioInput]) -> Result<Var> {
        let [h, w] = self.config.semantic_grid;
        let s = &self.scalers;
        let mut data = Vec::with_capacity(inputs.len() * h * w);
        for a in inputs {
            a.check(&self.config)?;
            data.extend(a.logmel.iter().map(|v| (v - s.logmel_mean) / s.logmel_std));
        }
        let x = tape.input(Tensor::new(vec![inputs.len(), 1, h, w], data)?);
        let x = self.conv(tape, x, "sem.conv1")?;
        let x = tape.max_pool2d(x, 2)?;
        let x = self.conv(tape, x, "sem.conv2")?;
        let x = tape.max_pool2d(x, 2)?;
        let x = tape.global_avg_pool(x)?;
        self.dense(tape, x, "sem.fc")
    }

    /// Intensity-vector planes plus normalised time and frequency coordinate
    /// planes, `[B, 8, T, F]`. Cell (0, 0) gets coordinates (-1, -1).
    pub fn spatial_planes(&self, inputs: &[&AudioInput]) -> Result<Tensor> {
        let [h, w] = self.config.spatial_grid;
        let c = IV_CHANNELS + 2;
        let coord = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
        let mut data = vec![0.0; inputs.len() * c * h * w];
        for (b, a) in inputs.iter().enumerate() {
            a.check(&self.config)?;
            let base = b * c * h * w;
            for i in 0..h {
                for j in 0..w {
                    for k in 0..IV_CHANNELS {
                        data[base + (k * h + i) * w + j] = a.ivs[(i * w + j) * IV_CHANNELS + k];
                    }
                    data[base + (IV_CHANNELS * h + i) * w + j] = coord(i, h);
                    data[base + ((IV_CHANNELS + 1) * h + i) * w + j] = coord(j, w);
                }
            }
        }
        Tensor::new(vec![inputs.len(), c, h, w], data)
    }

    /// Spatial branch: `[B, spatial_dim]`.
    pub fn spatial_forward(&self, tape: &mut Tape, inputs: &[&AudioInput]) -> Result<Var> {
        let x = tape.input(self.spatial_planes(inputs)?);
        let x = self.conv(tape, x, "spa.conv1")?;
        let x = tape.max_pool2d(x, 2)?;
        let x = self.conv(tape, x, "spa.conv2")?;
        let x = tape.global_avg_pool(x)?;
        self.dense(tape, x, "spa.fc")
    }

    /// Full audio path; semantic features come first in the concatenation.
    pub fn audio_forward(&self, tape: &mut Tape, inputs: &[&AudioInput]) -> Result<AudioOut> {
        let sem = self.semantic_forward(tape, inputs)?;
        let spa = self.spatial_forward(tape, inputs)?;
        let x = tape.concat(sem, spa)?;
        let x = tape.relu(x);
        let x = self.dense(tape, x, "proj.fc1")?;
        let x = tape.relu(x);
        let raw = self.dense(tape, x, "proj.fc2")?;
        let z = tape.l2_normalize(raw)?;
        Ok(AudioOut { raw, z })
    }

    pub fn text_forward(&self, tape: &mut Tape, captions: &[&str]) -> Result<Var> {
        let ids = captions.iter().map(|c| tokenize(c, self.config.text_hash_buckets)).collect::<Result<Vec<_>>>()?;
        let table = tape.param_named("text.embed")?;
        let x = tape.embedding_mean(table, ids)?;
        let x = self.dense(tape, x, "text.fc1")?;
        let x = tape.relu(x);
        let x = self.dense(tape, x, "text.fc2")?;
        tape.l2_normalize(x)
    }

    fn head(&self, tape: &mut Tape, raw: Var, name: &str) -> Result<Var> {
        let h = self.dense(tape, raw, &format!("{name}.fc1"))?;
        let h = tape.relu(h);
        self.dense(tape, h, &format!("{name}.fc2"))
    }

    /// Direction (unit vectors), z-scored distance and z-scored area heads.
    pub fn heads_forward(&self, tape: &mut Tape, raw: Var) -> Result<(Var, Var, Var)> {
        let d = self.head(tape, raw, "head.dir")?;
        let d = tape.l2_normalize(d)?;
        let dist = self.head(tape, raw, "head.dist")?;
        let area = self.head(tape, raw, "head.area")?;
        Ok((d, dist, area))
    }

    fn logit_scale(&self, tape: &mut Tape) -> Result<Var> {
        let s = tape.param_named("logit_scale")?;
        let s = tape.clamp_max(s, (1.0 / self.config.min_tau).ln());
        Ok(tape.exp(s))
    }

    /// Contrastive loss on unit-norm embedding batches.
    pub fn clip_loss_on_tape(&self, tape: &mut Tape, za: Var, zt: Var) -> Result<Var> {
        let (na, nt) = (tape.value(za).rows(), tape.value(zt).rows());
        if na != nt {
            return Err(Error::LengthMismatch(na, nt));
        }
        let ztt = tape.transpose(zt)?;
        let sim = tape.matmul(za, ztt)?;
        let scale = self.logit_scale(tape)?;
        let logits = tape.mul_scalar_var(sim, scale)?;
        let diag: Vec<usize> = (0..na).collect();
        let a2t = tape.cross_entropy(logits, diag.clone())?;
        let lt = tape.transpose(logits)?;
        let t2a = tape.cross_entropy(lt, diag)?;
        let s = tape.add(a2t, t2a)?;
        Ok(tape.scale(s, 0.5))
    }

    /// Total loss and its parts. Mono samples only enter the contrastive term;
    /// with no spatial sample in the batch the heads are not evaluated.
    pub fn loss(&self, tape: &mut Tape, inputs: &[&AudioInput], captions: &[&str], targets: &[TargetLabels]) -> Result<(Var, LossBreakdown)> {
        if inputs.len() != captions.len() || inputs.len() != targets.len() {
            return Err(Error::LengthMismatch(inputs.len(), captions.len().min(targets.len())));
        }
        let audio = self.audio_forward(tape, inputs)?;
        let zt = self.text_forward(tape, captions)?;
        let clip = self.clip_loss_on_tape(tape, audio.z, zt)?;
        let mut parts = LossBreakdown { clip: tape.value(clip).data()[0], ..Default::default() };
        let n_spatial = targets.iter().filter(|t| t.is_spatial).count();
        if n_spatial == 0 {
            parts.total = parts.clip;
            return Ok((clip, parts));
        }
        let n = targets.len();
        let s = &self.scalers;
        let mut w = vec![0.0; n];
        let mut dir_t = vec![0.0; n * 3];
        let mut dist_t = vec![0.0; n];
        let mut area_t = vec![0.0; n];
        for (i, t) in targets.iter().enumerate() {
            if !t.is_spatial {
                continue;
            }
            let (Some(d), Some(r), Some(a)) = (t.direction, t.distance_m, t.floor_area_m2) else {
                return Err(Error::MissingLabel(i));
            };
            w[i] = 1.0 / n_spatial as f64;
            dir_t[i * 3..i * 3 + 3].copy_from_slice(&d);
            dist_t[i] = (r - s.distance_mean) / s.distance_std;
            area_t[i] = (a - s.area_mean) / s.area_std;
        }
        let (pd, pr, pa) = self.heads_forward(tape, audio.raw)?;
        let td = tape.input(Tensor::new(vec![n, 3], dir_t)?);
        let prod = tape.mul(pd, td)?;
        let cos = tape.row_sum(prod)?;
        let neg_w: Vec<f64> = w.iter().map(|x| -x).collect();
        let wc = tape.weighted_sum(cos, neg_w)?;
        let one = tape.input(Tensor::scalar(1.0));
        let dir = tape.add(wc, one)?;
        let mse = |tape: &mut Tape, pred: Var, target: Vec<f64>| -> Result<Var> {
            let t = tape.input(Tensor::new(vec![n, 1], target)?);
            let d = tape.sub(pred, t)?;
            let sq = tape.mul(d, d)?;
            tape.weighted_sum(sq, w.clone())
        };
        let dist = mse(tape, pr, dist_t)?;
        let area = mse(tape, pa, area_t)?;
        let total = tape.add(clip, dir)?;
        let total = tape.add(total, dist)?;
        let total = tape.add(total, area)?;
        parts.dir = tape.value(dir).data()[0];
        parts.dist = tape.value(dist).data()[0];
        parts.area = tape.value(area).data()[0];
        parts.total = tape.value(total).data()[0];
        Ok((total, parts))
    }

    /// Embeds audio in chunks, with head predictions mapped back to metres and
    /// square metres.
    pub fn embed_audio(&self, inputs: &[&AudioInput]) -> Result<AudioEmbeddings> {
        let mut out = AudioEmbeddings { z: vec![], raw: vec![], direction: vec![], distance_m: vec![], floor_area_m2: vec![] };
        let s = &self.scalers;
        for chunk in inputs.chunks(128) {
            let mut tape = Tape::new(&self.params);
            let a = self.audio_forward(&mut tape, chunk)?;
            let (d, r, ar) = self.heads_forward(&mut tape, a.raw)?;
            tape.check_finite()?;
            let rows = |v: Var| {
                let t = tape.value(v);
                (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>()
            };
            out.z.extend(rows(a.z));
            out.raw.extend(rows(a.raw));
            out.direction.extend(rows(d).into_iter().map(|v| [v[0], v[1], v[2]]));
            out.distance_m.extend(tape.value(r).data().iter().map(|z| z * s.distance_std + s.distance_mean));
            out.floor_area_m2.extend(tape.value(ar).data().iter().map(|z| z * s.area_std + s.area_mean));
        }
        Ok(out)
    }

    pub fn embed_text(&self, captions: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(captions.len());
        for chunk in captions.chunks(256) {
            let mut tape = Tape::new(&self.params);
            let z = self.text_forward(&mut tape, chunk)?;
            let t = tape.value(z);
            out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, optimizer: Option<Adam>) -> Result<Checkpoint> {
        let meta = CheckpointMeta { model: self.config.clone(), scalers: self.scalers };
        Ok(Checkpoint { config_json: serde_json::to_string(&meta)?, params: self.params.clone(), optimizer })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.config_json)?;
        let mut model = Self::new(meta.model, 0)?;
        model.params.load_values(&ck.params)?;
        model.scalers = meta.scalers;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 64, peak_lr: 3e-3, floor_lr: 1e-5, seed: 0 }
    }
}

impl TrainConfig {
    /// Optimiser settings of the full-size model (peak lr 5e-5, 40 epochs).
    /// Far too slow to converge for the toy encoders.
    pub fn full_scale() -> Self {
        Self { epochs: 40, peak_lr: 5e-5, floor_lr: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || !(self.peak_lr > 0.0) || self.floor_lr < 0.0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub tau: f64,
    pub train_loss: LossBreakdown,
    pub val: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best model by validation mAP@10, with parameters rounded exactly as a
    /// saved checkpoint stores them.
    pub best: ElsaModel,
    pub best_epoch: usize,
    pub best_val_map10: f64,
    pub log: Vec<EpochLog>,
}

/// Validation retrieval of a model over spatial samples.
pub fn validate_retrieval(model: &ElsaModel, val: &[Sample]) -> Result<RetrievalReport> {
    let inputs: Vec<&AudioInput> = val.iter().map(|s| &s.input).collect();
    let captions: Vec<&str> = val.iter().map(|s| s.caption.as_str()).collect();
    let za = model.embed_audio(&inputs)?.z;
    let zt = model.embed_text(&captions)?;
    retrieval_report(&za, &zt)
}

/// Trains with shuffled batches that mix spatial samples with a
/// `mix_nonspatial_fraction` share of mono samples, keeping the epoch with
/// the highest validation mAP@10. Deterministic for a given seed.
pub fn train(
    mut model: ElsaModel,
    cfg: &TrainConfig,
    spatial: &[Sample],
    mono: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if spatial.is_empty() || val.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let frac = if mono.is_empty() { 0.0 } else { model.config.mix_nonspatial_fraction };
    let n_mono = ((cfg.batch_size as f64 * frac).round() as usize).min(cfg.batch_size - 1);
    let n_spatial = cfg.batch_size - n_mono;
    let steps_per_epoch = spatial.len().div_ceil(n_spatial);
    let schedule = CosineSchedule { peak: cfg.peak_lr, floor: cfg.floor_lr, total_steps: (steps_per_epoch * cfg.epochs) as u64 };
    let mut opt = Adam::new(&model.params, schedule);

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut mono_order: Vec<usize> = (0..mono.len()).collect();
    let mut mono_pos = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(&[cfg.seed, label_salt("epoch"), epoch as u64]);
        let mut order: Vec<usize> = (0..spatial.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut lr = 0.0;
        for chunk in order.chunks(n_spatial) {
            let mut batch: Vec<&Sample> = chunk.iter().map(|&i| &spatial[i]).collect();
            for _ in 0..n_mono {
                if mono_pos == 0 {
                    mono_order.shuffle(&mut rng);
                }
                batch.push(&mono[mono_order[mono_pos]]);
                mono_pos = (mono_pos + 1) % mono.len();
            }
            let inputs: Vec<&AudioInput> = batch.iter().map(|s| &s.input).collect();
            let captions: Vec<&str> = batch.iter().map(|s| s.caption.as_str()).collect();
            let targets: Vec<TargetLabels> = batch.iter().map(|s| s.targets).collect();
            let (grads, parts) = {
                let mut tape = Tape::new(&model.params);
                let (loss, parts) = model.loss(&mut tape, &inputs, &captions, &targets)?;
                tape.check_finite()?;
                (tape.backward(loss)?, parts)
            };
            if !grads.is_finite() {
                return Err(Error::Domain(format!("non-finite gradient in epoch {epoch}")));
            }
            lr = opt.step(&mut model.params, &grads)?;
            sum.clip += parts.clip;
            sum.dir += parts.dir;
            sum.dist += parts.dist;
            sum.area += parts.area;
            sum.total += parts.total;
        }
        let k = 1.0 / steps_per_epoch as f64;
        let train_loss = LossBreakdown { clip: sum.clip * k, dir: sum.dir * k, dist: sum.dist * k, area: sum.area * k, total: sum.total * k };
        let val_report = validate_retrieval(&model, val)?;
        let entry = EpochLog { epoch, steps: opt.step_count(), lr, tau: model.tau(), train_loss, val: val_report };
        on_epoch(&entry);
        let score = val_report.mean_map10();
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.params.clone()));
        }
        log.push(entry);
    }
    let (best_val_map10, best_epoch, params) = best.expect("at least one epoch");
    let best = ElsaModel { params: Checkpoint::round_trip_params(&params), ..model };
    Ok(TrainOutcome { best, best_epoch, best_val_map10, log })
}

/// Deterministic per-run seed for model initialisation.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(&[seed, label_salt("init")])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambisonics::planewave_foa;
    use crate::features::{extract, replicate_mono, FeatureConfig};
    use crate::nncore::{gradcheck, GradcheckOptions};
    use crate::sphmath::SphericalDirection;
    use rand::Rng;

    fn small_config() -> ElsaConfig {
        ElsaConfig {
            semantic_dim: 12,
            spatial_dim: 6,
            joint_dim: 8,
            projection_hidden: 10,
            semantic_channels: [2, 3],
            spatial_channels: [3, 4],
            text_hash_buckets: 64,
            text_embed_dim: 6,
            text_hidden: 8,
            head_hidden: 5,
            semantic_grid: [8, 8],
            spatial_grid: [4, 4],
            ..Default::default()
        }
    }

    fn random_input(cfg: &ElsaConfig, seed: u64) -> AudioInput {
        let mut rng = rng_for(&[seed]);
        let [a, b] = cfg.semantic_grid;
        let [c, d] = cfg.spatial_grid;
        AudioInput {
            logmel: (0..a * b).map(|_| rng.random_range(-2.0..2.0)).collect(),
            ivs: (0..c * d * IV_CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn spatial_target(seed: u64) -> TargetLabels {
        let mut rng = rng_for(&[seed, 99]);
        let dir = SphericalDirection::new(rng.random_range(-3.0..3.0), rng.random_range(-0.8..0.8)).to_unit_vector();
        TargetLabels { direction: Some(dir), distance_m: Some(rng.random_range(0.5..4.0)), floor_area_m2: Some(rng.random_range(15.0..250.0)), is_spatial: true }
    }

    #[test]
    fn infonce_and_clip_fixtures() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((expected - 0.31326).abs() < 1e-5);
        assert!((infonce(&x, 0, &x[0], 1.0) - expected).abs() < 1e-12);
        assert_eq!(infonce(&x[..1], 0, &x[0], 0.5), 0.0);
        assert!((clip_loss(&x, &x, 1.0).unwrap() - expected).abs() < 1e-12);
        assert_eq!(clip_loss(&x[..1], &x[..1], 1.0).unwrap(), 0.0);
        assert!(matches!(clip_loss(&x, &x[..1], 1.0), Err(Error::LengthMismatch(2, 1))));
    }

    #[test]
    fn tape_clip_loss_matches_direct_evaluation() {
        let cfg = small_config();
        let mut model = ElsaModel::new(cfg, 1).unwrap();
        let id = model.params.id("logit_scale").unwrap();
        model.params.get_mut(id).data_mut()[0] = 0.0; // tau = 1
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut tape = Tape::new(&model.params);
        let a = tape.input(x.clone());
        let t = tape.input(x);
        let l = model.clip_loss_on_tape(&mut tape, a, t).unwrap();
        assert!((tape.value(l).data()[0] - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn clip_loss_invariances(seed in 0u64..1000, n in 2usize..8, tau in 0.05f64..2.0) {
            let mut rng = rng_for(&[seed]);
            let mut unit = |d: usize| crate::evalkit::normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            let za: Vec<Vec<f64>> = (0..n).map(|_| unit(3)).collect();
            let zt: Vec<Vec<f64>> = (0..n).map(|_| unit(3)).collect();
            let base = clip_loss(&za, &zt, tau).unwrap();
            let perm: Vec<usize> = (0..n).rev().collect();
            let pa: Vec<_> = perm.iter().map(|&i| za[i].clone()).collect();
            let pt: Vec<_> = perm.iter().map(|&i| zt[i].clone()).collect();
            proptest::prop_assert!((clip_loss(&pa, &pt, tau).unwrap() - base).abs() < 1e-9);
            let (c, s) = (0.3f64.cos(), 0.3f64.sin());
            let rot = |v: &Vec<f64>| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], -v[2]];
            let ra: Vec<_> = za.iter().map(rot).collect();
            let rt: Vec<_> = zt.iter().map(rot).collect();
            proptest::prop_assert!((clip_loss(&ra, &rt, tau).unwrap() - base).abs() < 1e-6);
            proptest::prop_assert!(base > 0.0);
        }
    }

    #[test]
    fn tokenizer_properties() {
        let b = 4096;
        assert!(matches!(tokenize("  ,.;", b), Err(Error::EmptyCaption)));
        assert_eq!(tokenize("A sound, coming!", b).unwrap(), tokenize("a SOUND coming", b).unwrap());
        let l = tokenize("left", b).unwrap();
        let r = tokenize("right", b).unwrap();
        assert_ne!(l, r);
        let model = ElsaModel::new(ElsaConfig::default(), 3).unwrap();
        let z = model.embed_text(&["A sound coming from the left", "A sound coming from the right", "the left from coming sound A"]).unwrap();
        assert_ne!(z[0], z[1]);
        for (a, b) in z[0].iter().zip(&z[2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(model.embed_text(&[""]).is_err());
    }

    #[test]
    fn outputs_are_unit_norm_and_finite() {
        let cfg = ElsaConfig::default();
        let model = ElsaModel::new(cfg.clone(), 4).unwrap();
        let mut zero = random_input(&cfg, 1);
        zero.logmel.iter_mut().for_each(|v| *v = 0.0);
        let inputs = [random_input(&cfg, 2), zero];
        let refs: Vec<&AudioInput> = inputs.iter().collect();
        let e = model.embed_audio(&refs).unwrap();
        for z in &e.z {
            assert!((crate::evalkit::norm(z) - 1.0).abs() < 1e-6);
        }
        for d in &e.direction {
            assert!((crate::evalkit::norm(d) - 1.0).abs() < 1e-6);
        }
        assert_eq!(model.embed_audio(&refs).unwrap(), e);
        assert!((model.tau() - 0.07).abs() < 1e-12);
    }

    #[test]
    fn coordinate_planes() {
        let cfg = small_config();
        let model = ElsaModel::new(cfg.clone(), 5).unwrap();
        let x = random_input(&cfg, 3);
        let t = model.spatial_planes(&[&x]).unwrap();
        let [h, w] = cfg.spatial_grid;
        let at = |c: usize, i: usize, j: usize| t.data()[(c * h + i) * w + j];
        assert_eq!((at(6, 0, 0), at(7, 0, 0)), (-1.0, -1.0));
        assert_eq!((at(6, h - 1, w - 1), at(7, h - 1, w - 1)), (1.0, 1.0));
        assert_eq!(at(2, 1, 2), x.ivs[(w + 2) * IV_CHANNELS + 2]);
    }

    #[test]
    fn concat_order_matters() {
        let cfg = small_config();
        let model = ElsaModel::new(cfg.clone(), 6).unwrap();
        let x = random_input(&cfg, 4);
        let base = model.embed_audio(&[&x]).unwrap().z;
        // swapping which branch feeds the first block of the projection input
        let mut swapped = model.clone();
        let id = swapped.params.id("proj.fc1.w").unwrap();
        let d = cfg.audio_concat_dim();
        let w = swapped.params.get(id).clone();
        let mut nw = w.clone();
        for r in 0..cfg.projection_hidden {
            for c in 0..d {
                nw.data_mut()[r * d + c] = w.data()[r * d + (c + cfg.semantic_dim) % d];
            }
        }
        *swapped.params.get_mut(id) = nw;
        assert_ne!(swapped.embed_audio(&[&x]).unwrap().z, base);
    }

    #[test]
    fn semantic_branch_is_lipschitz_in_offsets() {
        let cfg = small_config();
        let model = ElsaModel::new(cfg.clone(), 7).unwrap();
        let frob = |n: &str| crate::evalkit::norm(model.params.get(model.params.id(n).unwrap()).data());
        // 3x3 convolutions are bounded by 3 |W|_F; relu, max-pool and mean-pool are 1-Lipschitz
        let l = 3.0 * frob("sem.conv1.w") * 3.0 * frob("sem.conv2.w") * frob("sem.fc.w");
        let [h, w] = cfg.semantic_grid;
        let x = random_input(&cfg, 8);
        let emb = |inp: &AudioInput| {
            let mut tape = Tape::new(&model.params);
            let v = model.semantic_forward(&mut tape, &[inp]).unwrap();
            tape.value(v).data().to_vec()
        };
        let e0 = emb(&x);
        let mut ratios = Vec::new();
        for c in [1e-3, 1e-2, 1e-1, 1.0] {
            let mut y = x.clone();
            y.logmel.iter_mut().for_each(|v| *v += c);
            let d: Vec<f64> = emb(&y).iter().zip(&e0).map(|(a, b)| a - b).collect();
            let ratio = crate::evalkit::norm(&d) / (c * ((h * w) as f64).sqrt());
            assert!(ratio <= l, "{ratio} > {l}");
            ratios.push(ratio);
        }
        log::info!("semantic offset Lipschitz ratios {ratios:?} bound {l}");
    }

    #[test]
    fn mono_inputs_share_one_spatial_embedding() {
        let fc = FeatureConfig::toy();
        let cfg = ElsaConfig::default();
        let model = ElsaModel::new(cfg.clone(), 8).unwrap();
        let mut rng = rng_for(&[5]);
        let mut clip = || {
            let s: Vec<f64> = (0..16_000).map(|_| rng.random_range(-0.5..0.5)).collect();
            AudioInput::from_features(&extract(&replicate_mono(&s, 16_000), &fc).unwrap(), &cfg).unwrap()
        };
        let (a, b) = (clip(), clip());
        let emb = |x: &AudioInput| {
            let mut tape = Tape::new(&model.params);
            let v = model.spatial_forward(&mut tape, &[x]).unwrap();
            tape.value(v).data().to_vec()
        };
        assert_ne!(a.logmel, b.logmel);
        assert_eq!(emb(&a), emb(&b));
        let pw = planewave_foa(SphericalDirection::from_degrees(90.0, 0.0), &(0..16_000).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>(), 16_000);
        let c = AudioInput::from_features(&extract(&pw, &fc).unwrap(), &cfg).unwrap();
        assert_ne!(emb(&c), emb(&a));
    }

    #[test]
    fn gradcheck_full_loss() {
        let cfg = small_config();
        let mut model = ElsaModel::new(cfg.clone(), 9).unwrap();
        model.scalers = Scalers { distance_mean: 2.0, distance_std: 1.0, area_mean: 100.0, area_std: 60.0, ..Default::default() };
        let inputs: Vec<AudioInput> = (0..4).map(|i| random_input(&cfg, 10 + i)).collect();
        let refs: Vec<&AudioInput> = inputs.iter().collect();
        let caps = ["a low hum from the left", "clicks near the right", "a whistle up front", "wind far back"];
        let targets = [spatial_target(1), spatial_target(2), TargetLabels::mono(), spatial_target(3)];
        let opts = GradcheckOptions { max_per_param: 6, ..Default::default() };
        let r = gradcheck(&model.params, opts, |t| Ok(model.loss(t, &refs, &caps, &targets)?.0)).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        let r = gradcheck(&model.params, opts, |t| {
            let a = model.audio_forward(t, &refs)?;
            let n = t.value(a.z).numel();
            t.weighted_sum(a.z, (0..n).map(|i| (i % 5) as f64 - 2.0).collect())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn loss_parts_and_masking() {
        let cfg = small_config();
        let model = ElsaModel::new(cfg.clone(), 11).unwrap();
        let inputs: Vec<AudioInput> = (0..4).map(|i| random_input(&cfg, 20 + i)).collect();
        let refs: Vec<&AudioInput> = inputs.iter().collect();
        let caps = ["one", "two", "three", "four"];
        let targets: Vec<TargetLabels> = (0..4).map(spatial_target).collect();
        let mut tape = Tape::new(&model.params);
        let (_, p) = model.loss(&mut tape, &refs, &caps, &targets).unwrap();
        for v in [p.clip, p.dir, p.dist, p.area] {
            assert!(v.is_finite() && v > 0.0);
        }
        assert!((p.total - (p.clip + p.dir + p.dist + p.area)).abs() < 1e-9);

        // targets equal to the current predictions give a zero direction term
        let e = model.embed_audio(&refs).unwrap();
        let exact: Vec<TargetLabels> = e.direction.iter().map(|d| TargetLabels { direction: Some(*d), ..spatial_target(0) }).collect();
        let mut tape = Tape::new(&model.params);
        let (_, p) = model.loss(&mut tape, &refs, &caps, &exact).unwrap();
        assert!(p.dir.abs() < 1e-12);

        // mono-only batch: no gradient reaches the regression heads
        let mono = vec![TargetLabels::mono(); 4];
        let mut tape = Tape::new(&model.params);
        let (l, p) = model.loss(&mut tape, &refs, &caps, &mono).unwrap();
        assert_eq!((p.dir, p.dist, p.area), (0.0, 0.0, 0.0));
        let g = tape.backward(l).unwrap();
        for id in model.params.ids().filter(|&id| model.params.name(id).starts_with("head.")) {
            assert!(g.get(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        }

        let bad = [TargetLabels { direction: None, ..spatial_target(0) }, spatial_target(1), spatial_target(2), spatial_target(3)];
        let mut tape = Tape::new(&model.params);
        assert!(matches!(model.loss(&mut tape, &refs, &caps, &bad), Err(Error::MissingLabel(0))));
    }

    #[test]
    fn adam_halves_the_loss_on_a_fixed_batch() {
        let cfg = ElsaConfig { semantic_grid: [16, 16], spatial_grid: [8, 8], ..Default::default() };
        let mut model = ElsaModel::new(cfg.clone(), 12).unwrap();
        model.scalers = Scalers { distance_mean: 2.0, distance_std: 1.0, area_mean: 100.0, area_std: 60.0, ..Default::default() };
        let inputs: Vec<AudioInput> = (0..64).map(|i| random_input(&cfg, 100 + i)).collect();
        let refs: Vec<&AudioInput> = inputs.iter().collect();
        let words = ["hum", "whistle", "wind", "engine", "clock", "horn"];
        let dirs = ["left", "right", "front", "back"];
        let caps: Vec<String> = (0..64).map(|i| format!("the {} {} sound number {i}", words[i % 6], dirs[i % 4])).collect();
        let cap_refs: Vec<&str> = caps.iter().map(String::as_str).collect();
        let targets: Vec<TargetLabels> = (0..64).map(|i| spatial_target(i as u64)).collect();
        let mut opt = Adam::new(&model.params, CosineSchedule { peak: 1e-3, floor: 1e-4, total_steps: 200 });
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let mut tape = Tape::new(&model.params);
            let (l, p) = model.loss(&mut tape, &refs, &cap_refs, &targets).unwrap();
            let g = tape.backward(l).unwrap();
            first.get_or_insert(p.total);
            last = p.total;
            opt.step(&mut model.params, &g).unwrap();
        }
        let first = first.unwrap();
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_restores_the_model() {
        let cfg = small_config();
        let mut model = ElsaModel::new(cfg.clone(), 13).unwrap();
        model.scalers.area_mean = 42.0;
        let ck = model.to_checkpoint(None).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = ElsaModel::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.scalers, model.scalers);
        assert_eq!(back.params, Checkpoint::round_trip_params(&model.params));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<ElsaConfig>("{\"joint_dim\": 32}").is_ok());
        assert!(serde_json::from_str::<ElsaConfig>("{\"joint_dims\": 32}").is_err());
        assert!(ElsaConfig { mix_nonspatial_fraction: 1.5, ..Default::default() }.validate().is_err());
    }
}
