//! End-to-end stages over a run directory: corpus synthesis, featurization,
//! training, evaluation, probes, swap experiments and embedding export.
//!
//! A run directory holds `config.json` (the effective configuration),
//! `report.json` (one entry per stage), `checkpoints/`, `logs/`, plus the
//! stage outputs `corpus/`, `features/` and `embeddings/`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::captions::{
    attrs_to_descriptors, build_llm_prompt, probe_caption, rephrase_external, AttributeKind, CaptionRecord, DescriptorSet,
    Direction, Distance, RephraserEndpoint,
};
use crate::dataio::{
    find_matrix, make_synthetic_corpus, manifest_path, read_foa_wav, read_manifest, read_matrices, read_mono_wav,
    write_foa_wav, write_matrices, CorpusSummary, ManifestRecord, NamedMatrix, SyntheticCorpusSpec,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    angular_error_deg, doa_error_breakdown, retrieval_report, swap_experiment, train_probe, zeroshot_classify,
    DirectionPrototypes, DoaBreakdown, ProbeConfig, ProbeData, ProbeResult, ProbeTargets, ProbeTask, RetrievalReport,
    SwapReport, ZeroShotReport,
};
use crate::features::{extract, FeatureConfig};
use crate::model::{
    init_seed, train, AudioEmbeddings, AudioInput, ElsaConfig, ElsaModel, EpochLog, Sample, Scalers, TargetLabels,
    TrainConfig, IV_CHANNELS,
};
use crate::nncore::Checkpoint;
use crate::roomsim::{spatialize, AttributeRanges, RoomSampler, RoomSpec, SpatialAttributes, Split};

/// Every knob of a run. The top-level seed overrides the per-stage seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: SyntheticCorpusSpec,
    pub features: FeatureConfig,
    pub model: ElsaConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: SyntheticCorpusSpec::default(),
            features: FeatureConfig::toy(),
            model: ElsaConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Applies `seed` (if given) and pushes the top-level seed into every stage.
    pub fn resolved(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.probe.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.features.sample_rate != self.corpus.sample_rate {
            return Err(Error::Config(format!(
                "feature sample rate {} differs from corpus sample rate {}",
                self.features.sample_rate, self.corpus.sample_rate
            )));
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated pool of `workers` threads (0 = one per core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Fixed layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        fs::create_dir_all(run.checkpoints())?;
        fs::create_dir_all(run.logs())?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("best.ckpt")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings")
    }
    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::write(self.config_path(), serde_json::to_string_pretty(cfg)? + "\n")?;
        Ok(())
    }

    /// Stores `value` under `stage` in report.json, keeping other stages.
    pub fn record_report(&self, stage: &str, value: &impl Serialize) -> Result<()> {
        let mut all = match fs::read_to_string(self.report_path()) {
            Ok(text) => serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => serde_json::Map::new(),
            Err(e) => return Err(e.into()),
        };
        all.insert(stage.to_string(), serde_json::to_value(value)?);
        fs::write(self.report_path(), serde_json::to_string_pretty(&all)? + "\n")?;
        Ok(())
    }

    pub fn read_report(&self) -> Result<serde_json::Value> {
        Ok(serde_json::from_str(&fs::read_to_string(self.report_path())?)?)
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}", path.display())))
    }
}

/// Renders the synthetic corpus into `dir`, replacing earlier audio.
pub fn synth_corpus(cfg: &RunConfig, dir: &Path) -> Result<CorpusSummary> {
    cfg.corpus.validate()?;
    let audio = dir.join("audio");
    if audio.exists() {
        fs::remove_dir_all(&audio)?;
    }
    make_synthetic_corpus(&cfg.corpus, dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeReport {
    pub feature_config: FeatureConfig,
    pub logmel_dim: usize,
    pub ivs_dim: usize,
    pub records: BTreeMap<String, usize>,
}

pub fn features_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.elsamat"))
}

fn input_dims(model: &ElsaConfig) -> (usize, usize) {
    (model.semantic_grid[0] * model.semantic_grid[1], model.spatial_grid[0] * model.spatial_grid[1] * IV_CHANNELS)
}

/// Extracts and pools features for every manifest record into one matrix
/// file per split (`logmel` and `ivs`, one row per record in manifest order).
pub fn featurize(cfg: &RunConfig, corpus_dir: &Path, features_dir: &Path) -> Result<FeaturizeReport> {
    cfg.features.validate()?;
    cfg.model.validate()?;
    fs::create_dir_all(features_dir)?;
    let (lm_dim, iv_dim) = input_dims(&cfg.model);
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let mpath = manifest_path(corpus_dir, split);
        require(&mpath, "manifest")?;
        let (_, records) = read_manifest(&mpath)?;
        let inputs = records
            .par_iter()
            .map(|r| {
                let foa = read_foa_wav(&corpus_dir.join(&r.audio_path))?;
                if foa.sample_rate != cfg.features.sample_rate {
                    return Err(Error::Config(format!(
                        "{} is sampled at {} Hz, features expect {} Hz",
                        r.audio_path, foa.sample_rate, cfg.features.sample_rate
                    )));
                }
                AudioInput::from_features(&extract(&foa, &cfg.features)?, &cfg.model)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = inputs.len();
        let lm: Vec<f64> = inputs.iter().flat_map(|i| i.logmel.iter().copied()).collect();
        let iv: Vec<f64> = inputs.iter().flat_map(|i| i.ivs.iter().copied()).collect();
        write_matrices(
            &features_path(features_dir, split),
            &[NamedMatrix::from_f64("logmel", n, lm_dim, &lm)?, NamedMatrix::from_f64("ivs", n, iv_dim, &iv)?],
        )?;
        counts.insert(split.to_string(), n);
    }
    Ok(FeaturizeReport { feature_config: cfg.features, logmel_dim: lm_dim, ivs_dim: iv_dim, records: counts })
}

/// Manifest records of one split with their model-ready samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub records: Vec<ManifestRecord>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn spatial_samples(&self) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.targets.is_spatial).cloned().collect()
    }

    pub fn mono_samples(&self) -> Vec<Sample> {
        self.samples.iter().filter(|s| !s.targets.is_spatial).cloned().collect()
    }
}

pub fn targets_for(record: &ManifestRecord) -> Result<TargetLabels> {
    if !record.is_spatial {
        return Ok(TargetLabels::mono());
    }
    let a = record.attributes.ok_or_else(|| Error::Malformed(format!("spatial record {} has no attributes", record.id)))?;
    Ok(TargetLabels {
        direction: Some(a.direction().to_unit_vector()),
        distance_m: Some(a.distance_m),
        floor_area_m2: Some(a.floor_area_m2),
        is_spatial: true,
    })
}

pub fn load_dataset(cfg: &RunConfig, corpus_dir: &Path, features_dir: &Path, split: Split) -> Result<Dataset> {
    let mpath = manifest_path(corpus_dir, split);
    let fpath = features_path(features_dir, split);
    require(&mpath, "manifest")?;
    require(&fpath, "feature cache")?;
    let (_, records) = read_manifest(&mpath)?;
    let mats = read_matrices(&fpath)?;
    let (lm_dim, iv_dim) = input_dims(&cfg.model);
    let lm = find_matrix(&mats, "logmel", records.len(), lm_dim)?;
    let iv = find_matrix(&mats, "ivs", records.len(), iv_dim)?;
    let samples = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Sample {
                input: AudioInput { logmel: lm.row(i), ivs: iv.row(i) },
                caption: r.caption().to_string(),
                targets: targets_for(r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { split, records, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub parameters: usize,
    pub train_spatial: usize,
    pub train_mono: usize,
    pub val: usize,
    pub best_epoch: usize,
    pub best_val_map10: f64,
    pub epochs: Vec<EpochLog>,
}

/// Fits the scalers on the training split and trains from a seeded init.
pub fn train_stage(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ElsaModel, TrainReport)> {
    let mut model = ElsaModel::new(cfg.model.clone(), init_seed(cfg.seed))?;
    model.scalers = Scalers::fit(&train_set.samples);
    let spatial = train_set.spatial_samples();
    let mono = train_set.mono_samples();
    let val = val_set.spatial_samples();
    let parameters = model.params.numel();
    let outcome = train(model, &cfg.train, &spatial, &mono, &val, on_epoch)?;
    let report = TrainReport {
        parameters,
        train_spatial: spatial.len(),
        train_mono: mono.len(),
        val: val.len(),
        best_epoch: outcome.best_epoch,
        best_val_map10: outcome.best_val_map10,
        epochs: outcome.log,
    };
    Ok((outcome.best, report))
}

pub fn save_model(model: &ElsaModel, path: &Path) -> Result<()> {
    model.to_checkpoint(None)?.save(path)
}

pub fn load_model(path: &Path) -> Result<ElsaModel> {
    require(path, "checkpoint")?;
    ElsaModel::from_checkpoint(&Checkpoint::load(path)?)
}

/// Audio and caption embeddings of the spatial records of a split.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    pub records: Vec<ManifestRecord>,
    pub audio: AudioEmbeddings,
    pub text: Vec<Vec<f64>>,
}

impl SplitEmbeddings {
    pub fn attributes(&self) -> Vec<SpatialAttributes> {
        self.records.iter().filter_map(|r| r.attributes).collect()
    }

    pub fn descriptors(&self) -> Vec<DescriptorSet> {
        self.attributes().iter().map(attrs_to_descriptors).collect()
    }

    pub fn rooms(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.room_id.unwrap_or(u64::MAX)).collect()
    }
}

pub fn embed_spatial(model: &ElsaModel, ds: &Dataset) -> Result<SplitEmbeddings> {
    let (records, samples): (Vec<_>, Vec<_>) =
        ds.records.iter().zip(&ds.samples).filter(|(r, _)| r.is_spatial && r.attributes.is_some()).unzip();
    let inputs: Vec<&AudioInput> = samples.iter().map(|s| &s.input).collect();
    let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    Ok(SplitEmbeddings {
        records: records.into_iter().cloned().collect(),
        audio: model.embed_audio(&inputs)?,
        text: model.embed_text(&captions)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub retrieval: RetrievalReport,
    /// R@1 of a random ranking, 1/N.
    pub chance_r1: f64,
    /// Mean angular error of the direction head, degrees.
    pub head_direction_mae_deg: f64,
    /// Mean absolute error of the distance head, metres.
    pub head_distance_mae_m: f64,
}

pub fn evaluate(model: &ElsaModel, ds: &Dataset) -> Result<EvalReport> {
    let emb = embed_spatial(model, ds)?;
    let retrieval = retrieval_report(&emb.audio.z, &emb.text)?;
    let attrs = emb.attributes();
    let n = attrs.len() as f64;
    let dir_err: f64 = emb
        .audio
        .direction
        .iter()
        .zip(&attrs)
        .map(|(p, a)| angular_error_deg(p, &a.direction().to_unit_vector()))
        .sum::<f64>()
        / n;
    let dist_err: f64 = emb.audio.distance_m.iter().zip(&attrs).map(|(p, a)| (p - a.distance_m).abs()).sum::<f64>() / n;
    Ok(EvalReport {
        split: ds.split,
        retrieval,
        chance_r1: 1.0 / retrieval.n as f64,
        head_direction_mae_deg: dir_err,
        head_distance_mae_m: dist_err,
    })
}

/// Retrieval over a matrix file holding aligned `audio` and `text` matrices.
pub fn retrieval_from_matrix_file(path: &Path) -> Result<RetrievalReport> {
    let mats = read_matrices(path)?;
    let get = |name: &str| {
        mats.iter().find(|m| m.name == name).ok_or_else(|| Error::Malformed(format!("{}: no `{name}` matrix", path.display())))
    };
    let (a, t) = (get("audio")?, get("text")?);
    let rows = |m: &NamedMatrix| (0..m.rows).map(|i| m.row(i)).collect::<Vec<_>>();
    retrieval_report(&rows(a), &rows(t))
}

/// Probe-caption embeddings for the classes of one attribute family.
pub fn attribute_prototypes(model: &ElsaModel, kind: AttributeKind) -> Result<(Vec<&'static str>, Vec<Vec<f64>>)> {
    let classes = kind.classes();
    let captions = classes.iter().map(|c| probe_caption(c)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
    Ok((classes, model.embed_text(&refs)?))
}

pub fn zeroshot(model: &ElsaModel, emb: &SplitEmbeddings, kinds: &[AttributeKind]) -> Result<Vec<ZeroShotReport>> {
    let desc = emb.descriptors();
    kinds
        .iter()
        .map(|&kind| {
            let (classes, protos) = attribute_prototypes(model, kind)?;
            let labels: Vec<Option<&str>> = desc.iter().map(|d| kind.label_of(d)).collect();
            zeroshot_classify(kind.as_str(), &emb.audio.z, &labels, &classes, &protos)
        })
        .collect()
}

fn direction_index(d: &DescriptorSet) -> Option<usize> {
    d.direction.and_then(|x| Direction::ALL.iter().position(|&y| y == x))
}

fn distance_index(d: &DescriptorSet) -> Option<usize> {
    d.distance.and_then(|x| Distance::ALL.iter().position(|&y| y == x))
}

/// Probe inputs for a task. Records without a label for the task are dropped.
pub fn probe_data(emb: &SplitEmbeddings, task: ProbeTask) -> ProbeData {
    let rooms = emb.rooms();
    let attrs = emb.attributes();
    if task == ProbeTask::DoaRegression {
        return ProbeData {
            x: emb.audio.z.clone(),
            rooms,
            targets: ProbeTargets::Directions(attrs.iter().map(|a| a.direction().to_unit_vector()).collect()),
        };
    }
    let (label_of, n_classes): (fn(&DescriptorSet) -> Option<usize>, usize) = match task {
        ProbeTask::Direction4Class => (direction_index, 4),
        _ => (distance_index, 2),
    };
    let (mut x, mut r, mut labels) = (vec![], vec![], vec![]);
    for (i, d) in emb.descriptors().iter().enumerate() {
        if let Some(l) = label_of(d) {
            x.push(emb.audio.z[i].clone());
            r.push(rooms[i]);
            labels.push(l);
        }
    }
    ProbeData { x, rooms: r, targets: ProbeTargets::Classes { labels, n_classes } }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStageReport {
    pub zero_shot: Vec<ZeroShotReport>,
    pub probes: Vec<ProbeResult>,
}

/// Zero-shot probes over every attribute family, plus MLP direction and
/// distance classifiers trained on the training split.
pub fn probe_stage(cfg: &RunConfig, model: &ElsaModel, train_emb: &SplitEmbeddings, test_emb: &SplitEmbeddings) -> Result<ProbeStageReport> {
    let zero_shot = zeroshot(model, test_emb, &AttributeKind::ALL)?;
    let probes = [ProbeTask::Direction4Class, ProbeTask::Distance2Class]
        .into_iter()
        .map(|task| Ok(train_probe(task, &probe_data(train_emb, task), &probe_data(test_emb, task), &cfg.probe)?.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeStageReport { zero_shot, probes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaReport {
    pub probe: ProbeResult,
    pub breakdown: DoaBreakdown,
}

/// DOA regression probe on frozen embeddings with a binned error breakdown.
pub fn doa_stage(cfg: &RunConfig, train_emb: &SplitEmbeddings, test_emb: &SplitEmbeddings) -> Result<DoaReport> {
    let task = ProbeTask::DoaRegression;
    let test = probe_data(test_emb, task);
    let (probe, result) = train_probe(task, &probe_data(train_emb, task), &test, &cfg.probe)?;
    let ProbeTargets::Directions(targets) = &test.targets else { unreachable!("regression targets") };
    let breakdown = doa_error_breakdown(&probe.predict(&test.x)?, targets, &test_emb.attributes())?;
    Ok(DoaReport { probe: result, breakdown })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapStageReport {
    pub classifier: ProbeResult,
    pub swap: SwapReport,
}

/// Direction swap and removal on test embeddings, judged by a 4-class
/// direction probe trained on the training split; prototypes are the probe
/// caption embeddings.
pub fn swap_stage(cfg: &RunConfig, model: &ElsaModel, train_emb: &SplitEmbeddings, test_emb: &SplitEmbeddings) -> Result<SwapStageReport> {
    let task = ProbeTask::Direction4Class;
    let test = probe_data(test_emb, task);
    let (probe, classifier) = train_probe(task, &probe_data(train_emb, task), &test, &cfg.probe)?;
    let (_, protos) = attribute_prototypes(model, AttributeKind::Direction)?;
    let protos = DirectionPrototypes::new([protos[0].clone(), protos[1].clone(), protos[2].clone(), protos[3].clone()]);
    let ProbeTargets::Classes { labels, .. } = &test.targets else { unreachable!("class targets") };
    let classify = |v: &[f64]| probe.classify(v).unwrap_or(usize::MAX);
    let swap = swap_experiment(&test.x, labels, &protos, &classify)?;
    Ok(SwapStageReport { classifier, swap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub split: Split,
    pub rows: usize,
    pub joint_dim: usize,
    pub matrices: String,
    pub labels: String,
}

#[derive(Serialize)]
struct ExportLabel<'a> {
    row: usize,
    id: &'a str,
    semantic_class: &'a str,
    is_spatial: bool,
    room_id: Option<u64>,
    attributes: Option<SpatialAttributes>,
    descriptors: Option<DescriptorSet>,
    caption: &'a str,
}

/// Writes audio, caption and direction-head outputs for every record of a
/// split, with a JSON-lines label file aligned by row.
pub fn export_embeddings(model: &ElsaModel, ds: &Dataset, out_dir: &Path) -> Result<ExportReport> {
    fs::create_dir_all(out_dir)?;
    let inputs: Vec<&AudioInput> = ds.samples.iter().map(|s| &s.input).collect();
    let captions: Vec<&str> = ds.samples.iter().map(|s| s.caption.as_str()).collect();
    let audio = model.embed_audio(&inputs)?;
    let text = model.embed_text(&captions)?;
    let dirs: Vec<Vec<f64>> = audio.direction.iter().map(|d| d.to_vec()).collect();
    let n = ds.samples.len();
    let d = model.config.joint_dim;
    let mpath = out_dir.join(format!("{}.elsamat", ds.split));
    write_matrices(
        &mpath,
        &[
            NamedMatrix::from_f64("audio", n, d, &audio.z.concat())?,
            NamedMatrix::from_f64("text", n, d, &text.concat())?,
            NamedMatrix::from_f64("direction_head", n, 3, &dirs.concat())?,
        ],
    )?;
    let mut lines = String::new();
    for (i, r) in ds.records.iter().enumerate() {
        let label = ExportLabel {
            row: i,
            id: &r.id,
            semantic_class: &r.semantic_class,
            is_spatial: r.is_spatial,
            room_id: r.room_id,
            attributes: r.attributes,
            descriptors: r.attributes.as_ref().map(attrs_to_descriptors),
            caption: r.caption(),
        };
        lines.push_str(&serde_json::to_string(&label)?);
        lines.push('\n');
    }
    let lpath = out_dir.join(format!("{}.labels.jsonl", ds.split));
    fs::write(&lpath, lines)?;
    Ok(ExportReport {
        split: ds.split,
        rows: n,
        joint_dim: d,
        matrices: mpath.display().to_string(),
        labels: lpath.display().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub original_caption: String,
    pub spatial_caption: String,
    pub llm_prompt: String,
    /// Completion from the external rephraser, when one was configured.
    pub rephrased: Option<String>,
    pub rephraser_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub input: String,
    pub output: String,
    pub sample_rate: u32,
    pub room: RoomSpec,
    pub attributes: SpatialAttributes,
    pub descriptors: DescriptorSet,
    pub caption: Option<CaptionOutput>,
}

/// Spatializes a user WAV (mixed to mono) in room `room_index` of `split`
/// and optionally captions it.
pub fn simulate_file(
    cfg: &RunConfig,
    input: &Path,
    output: &Path,
    split: Split,
    room_index: u64,
    caption: Option<&str>,
    rephraser: Option<&RephraserEndpoint>,
) -> Result<SimulateReport> {
    require(input, "input audio")?;
    let (audio, sr) = read_mono_wav(input)?;
    let ranges = if split == Split::Test { AttributeRanges::test() } else { AttributeRanges::train() };
    let mut sampler = RoomSampler::new(split, ranges, cfg.seed);
    sampler.max_image_order = cfg.corpus.max_image_order;
    let room = sampler.sample_at(room_index)?;
    let (foa, attributes) = spatialize(&audio, &room, sr)?;
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    write_foa_wav(output, &foa)?;
    let caption = caption
        .map(|c| -> Result<CaptionOutput> {
            let rec = CaptionRecord::new(c, attributes, cfg.seed.wrapping_add(room_index))?;
            let llm_prompt = build_llm_prompt(c, &rec.descriptors)?;
            let (rephrased, rephraser_fallback) = match rephraser {
                Some(ep) => {
                    let r = rephrase_external(&llm_prompt, ep, &rec.spatial_caption);
                    (Some(r.text), r.used_fallback)
                }
                None => (None, false),
            };
            Ok(CaptionOutput {
                original_caption: rec.original_caption,
                spatial_caption: rec.spatial_caption,
                llm_prompt,
                rephrased,
                rephraser_fallback,
            })
        })
        .transpose()?;
    Ok(SimulateReport {
        input: input.display().to_string(),
        output: output.display().to_string(),
        sample_rate: sr,
        room,
        descriptors: attrs_to_descriptors(&attributes),
        attributes,
        caption,
    })
}

/// Reports of a full pipeline run, as stored in report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub corpus: CorpusSummary,
    pub features: FeaturizeReport,
    pub train: TrainReport,
    pub evaluate: EvalReport,
    pub probe: ProbeStageReport,
    pub swap: SwapStageReport,
    pub doa: DoaReport,
}

/// Runs every stage in order inside `run`, recording each report.
pub fn run_pipeline(cfg: &RunConfig, run: &RunDir, on_epoch: impl FnMut(&EpochLog)) -> Result<PipelineReport> {
    cfg.validate()?;
    run.write_config(cfg)?;
    let corpus = synth_corpus(cfg, &run.corpus())?;
    run.record_report("synth-corpus", &corpus)?;
    let features = featurize(cfg, &run.corpus(), &run.features())?;
    run.record_report("featurize", &features)?;
    let load = |split| load_dataset(cfg, &run.corpus(), &run.features(), split);
    let (train_set, val_set, test_set) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
    let (model, train) = train_stage(cfg, &train_set, &val_set, on_epoch)?;
    save_model(&model, &run.best_checkpoint())?;
    run.record_report("train", &train)?;
    let evaluate = evaluate(&model, &test_set)?;
    run.record_report("evaluate", &evaluate)?;
    let train_emb = embed_spatial(&model, &train_set)?;
    let test_emb = embed_spatial(&model, &test_set)?;
    let probe = probe_stage(cfg, &model, &train_emb, &test_emb)?;
    run.record_report("probe", &probe)?;
    let swap = swap_stage(cfg, &model, &train_emb, &test_emb)?;
    run.record_report("swap", &swap)?;
    let doa = doa_stage(cfg, &train_emb, &test_emb)?;
    fs::write(run.root().join("doa_breakdown.txt"), doa.breakdown.to_table())?;
    run.record_report("doa", &doa)?;
    Ok(PipelineReport { corpus, features, train, evaluate, probe, swap, doa })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_applies_seed() {
        assert!(RunConfig::from_json(r#"{"seed": 3, "bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 2, "lr": 1}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 3, "train": {"epochs": 2}}"#).unwrap().resolved(None);
        assert_eq!((c.train.epochs, c.train.seed, c.corpus.seed, c.probe.seed), (2, 3, 3, 3));
        assert_eq!(c.resolved(Some(9)).corpus.seed, 9);
        assert!(RunConfig::default().validate().is_ok());
        let mut bad = RunConfig::default();
        bad.features.sample_rate = 48_000;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn report_entries_merge() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path().join("r")).unwrap();
        run.record_report("b", &1).unwrap();
        run.record_report("a", &"x").unwrap();
        run.record_report("b", &2).unwrap();
        let v = run.read_report().unwrap();
        assert_eq!(v, serde_json::json!({"a": "x", "b": 2}));
        assert!(run.checkpoints().is_dir() && run.logs().is_dir());
    }

    #[test]
    fn worker_pool_runs_closure() {
        assert_eq!(with_workers(2, rayon::current_num_threads).unwrap(), 2);
    }
}
