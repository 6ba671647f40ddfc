//! File formats and corpus generation: 4-channel float WAV, named-matrix
//! containers for feature caches and embeddings, JSON-lines manifests, and the
//! synthetic spatial corpus.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::ambisonics::{FoaSignal, FOA_CHANNELS};
use crate::captions::{attrs_to_descriptors, parse_descriptors, CaptionRecord, Direction, Distance, Elevation};
use crate::dsp::fft_convolve;
use crate::error::{Error, Result};
use crate::features::replicate_mono;
use crate::roomsim::{normalize_peak, spatialize, trim_and_loop, AttributeRanges, RoomSampler, SpatialAttributes, Split};
use crate::seeding::{derive_seed, label_salt, rng_for};

/// Writes a 4-channel 32-bit float WAV.
pub fn write_foa_wav(path: &Path, sig: &FoaSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: FOA_CHANNELS as u16,
        sample_rate: sig.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..sig.len() {
        for ch in &sig.channels {
            w.write_sample(ch[i] as f32)?;
        }
    }
    w.finalize()?;
    Ok(())
}

/// Reads any PCM or float WAV and mixes it down to one channel in [-1, 1].
pub fn read_mono_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let ch = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 * scale)).collect::<std::result::Result<_, _>>()?
        }
    };
    let mono = interleaved.chunks_exact(ch).map(|f| f.iter().sum::<f64>() / ch as f64).collect();
    Ok((mono, spec.sample_rate))
}

/// Reads a 4-channel 32-bit float WAV.
pub fn read_foa_wav(path: &Path) -> Result<FoaSignal> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels as usize != FOA_CHANNELS {
        return Err(Error::ChannelCount { found: spec.channels, expected: FOA_CHANNELS as u16 });
    }
    if spec.sample_format != hound::SampleFormat::Float || spec.bits_per_sample != 32 {
        return Err(Error::Malformed(format!("{}: expected 32-bit float samples", path.display())));
    }
    let mut channels: [Vec<f64>; FOA_CHANNELS] = Default::default();
    for (i, s) in r.samples::<f32>().enumerate() {
        channels[i % FOA_CHANNELS].push(s? as f64);
    }
    if channels.iter().any(|c| c.len() != channels[0].len()) {
        return Err(Error::Malformed(format!("{}: incomplete final frame", path.display())));
    }
    FoaSignal::new(channels, spec.sample_rate)
}

const MATRIX_MAGIC: &[u8; 8] = b"ELSAMAT\0";
pub const MATRIX_VERSION: u32 = 1;

/// A named row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl NamedMatrix {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape { op: "NamedMatrix::new", lhs: vec![rows, cols], rhs: vec![data.len()] });
        }
        Ok(Self { name: name.into(), rows, cols, data })
    }

    pub fn from_f64(name: impl Into<String>, rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(name, rows, cols, data.iter().map(|&x| x as f32).collect())
    }

    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged rows".into()));
        }
        Self::from_f64(name, rows.len(), cols, &rows.concat())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data[i * self.cols..(i + 1) * self.cols].iter().map(|&x| x as f64).collect()
    }

    fn write_record(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.name.len() as u32).to_le_bytes())?;
        w.write_all(self.name.as_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        w.write_all(&bytes)?;
        Ok(())
    }
}

fn read_exact_or_malformed(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Malformed("truncated matrix file".into()),
        _ => Error::Io(e),
    })
}

fn check_matrix_header(r: &mut impl Read) -> Result<()> {
    let mut magic = [0; 8];
    read_exact_or_malformed(r, &mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Malformed("not a matrix file".into()));
    }
    let mut v = [0; 4];
    read_exact_or_malformed(r, &mut v)?;
    let version = u32::from_le_bytes(v);
    if version != MATRIX_VERSION {
        return Err(Error::Version { found: version, expected: MATRIX_VERSION });
    }
    Ok(())
}

/// Writes a fresh matrix file.
pub fn write_matrices(path: &Path, mats: &[NamedMatrix]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    for m in mats {
        m.write_record(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one matrix, creating the file (with header) if needed.
pub fn append_matrix(path: &Path, m: &NamedMatrix) -> Result<()> {
    let mut f = OpenOptions::new().read(true).append(true).create(true).open(path)?;
    if f.metadata()?.len() == 0 {
        f.write_all(MATRIX_MAGIC)?;
        f.write_all(&MATRIX_VERSION.to_le_bytes())?;
    } else {
        f.seek(SeekFrom::Start(0))?;
        check_matrix_header(&mut f)?;
    }
    let mut w = BufWriter::new(f);
    m.write_record(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads every matrix in a file, in order.
pub fn read_matrices(path: &Path) -> Result<Vec<NamedMatrix>> {
    let len = fs::metadata(path)?.len();
    let mut r = BufReader::new(File::open(path)?);
    check_matrix_header(&mut r)?;
    let mut pos = 12u64;
    let mut out = Vec::new();
    while pos < len {
        let mut b4 = [0; 4];
        read_exact_or_malformed(&mut r, &mut b4)?;
        let name_len = u32::from_le_bytes(b4) as u64;
        let mut b8 = [0; 8];
        if name_len > len - pos {
            return Err(Error::Malformed("matrix name runs past end of file".into()));
        }
        let mut name = vec![0; name_len as usize];
        read_exact_or_malformed(&mut r, &mut name)?;
        read_exact_or_malformed(&mut r, &mut b8)?;
        let rows = u64::from_le_bytes(b8);
        read_exact_or_malformed(&mut r, &mut b8)?;
        let cols = u64::from_le_bytes(b8);
        pos += 4 + name_len + 16;
        let bytes = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).filter(|&b| b <= len - pos);
        let Some(bytes) = bytes else {
            return Err(Error::Malformed(format!("matrix of {rows}x{cols} exceeds file size")));
        };
        let mut raw = vec![0; bytes as usize];
        read_exact_or_malformed(&mut r, &mut raw)?;
        pos += bytes;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let name = String::from_utf8(name).map_err(|e| Error::Malformed(e.to_string()))?;
        out.push(NamedMatrix { name, rows: rows as usize, cols: cols as usize, data });
    }
    Ok(out)
}

/// Looks up a matrix by name and checks its dimensions.
pub fn find_matrix<'a>(mats: &'a [NamedMatrix], name: &str, rows: usize, cols: usize) -> Result<&'a NamedMatrix> {
    let m = mats.iter().find(|m| m.name == name).ok_or_else(|| Error::Malformed(format!("no matrix named {name}")))?;
    if (m.rows, m.cols) != (rows, cols) {
        return Err(Error::Shape { op: "find_matrix", lhs: vec![m.rows, m.cols], rhs: vec![rows, cols] });
    }
    Ok(m)
}

pub const MANIFEST_SCHEMA: &str = "elsa-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
    pub split: Split,
    pub records: usize,
}

/// One clip of a corpus. Mono records have no attributes and no room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub original_caption: String,
    pub spatial_caption: String,
    pub attributes: Option<SpatialAttributes>,
    pub room_id: Option<u64>,
    pub split: Split,
    pub is_spatial: bool,
    pub semantic_class: String,
}

impl ManifestRecord {
    /// Caption used for training and retrieval.
    pub fn caption(&self) -> &str {
        if self.is_spatial { &self.spatial_caption } else { &self.original_caption }
    }
}

/// Writes a header line followed by one JSON record per line.
pub fn write_manifest(path: &Path, split: Split, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = ManifestHeader { schema: MANIFEST_SCHEMA.into(), version: MANIFEST_VERSION, split, records: records.len() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(ManifestHeader, Vec<ManifestRecord>)> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::Malformed(format!("{}: empty manifest", path.display())))??;
    let header: ManifestHeader = serde_json::from_str(&first)?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(Error::Malformed(format!("{}: schema {}", path.display(), header.schema)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(Error::Version { found: header.version, expected: MANIFEST_VERSION });
    }
    let mut records = Vec::with_capacity(header.records);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<ManifestRecord>(&line)?);
    }
    if records.len() != header.records {
        return Err(Error::Malformed(format!("{}: header says {} records, found {}", path.display(), header.records, records.len())));
    }
    Ok((header, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records: usize,
    pub spatial: usize,
    pub rooms_per_split: BTreeMap<String, usize>,
}

/// Checks id uniqueness, room disjointness across splits, and that every
/// spatial caption parses back to the descriptors of its attributes.
pub fn audit_records(records: &[ManifestRecord]) -> Result<AuditReport> {
    let mut ids = HashSet::new();
    let mut room_split: HashMap<u64, Split> = HashMap::new();
    let mut rooms: HashMap<String, HashSet<u64>> = HashMap::new();
    let mut spatial = 0;
    for r in records {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Malformed(format!("duplicate id {}", r.id)));
        }
        if !r.is_spatial {
            continue;
        }
        spatial += 1;
        let (Some(room), Some(attrs)) = (r.room_id, r.attributes) else {
            return Err(Error::Malformed(format!("spatial record {} lacks room or attributes", r.id)));
        };
        if let Some(prev) = room_split.insert(room, r.split) {
            if prev != r.split {
                return Err(Error::DegenerateSplit(format!("room {room} is in both {prev} and {}", r.split)));
            }
        }
        rooms.entry(r.split.to_string()).or_default().insert(room);
        let parsed = parse_descriptors(&r.spatial_caption, &r.original_caption)?;
        if parsed != attrs_to_descriptors(&attrs) {
            return Err(Error::Malformed(format!("caption of {} does not match its attributes", r.id)));
        }
    }
    Ok(AuditReport {
        records: records.len(),
        spatial,
        rooms_per_split: rooms.into_iter().map(|(k, v)| (k, v.len())).collect(),
    })
}

/// Parametric sound classes of the synthetic corpus with their base captions.
pub const SYNTH_CLASSES: [(&str, &str); 6] = [
    ("tone", "a low hum"),
    ("chirp", "a rising whistle"),
    ("band_noise", "rushing wind"),
    ("am_noise", "a rumbling engine"),
    ("click_train", "a ticking clock"),
    ("harmonic", "a buzzing horn"),
];

pub fn class_phrase(class: &str) -> Result<&'static str> {
    SYNTH_CLASSES.iter().find(|(c, _)| *c == class).map(|(_, p)| *p).ok_or_else(|| Error::UnknownLabel(class.to_string()))
}

fn band_limited_noise(rng: &mut impl Rng, n: usize, sr: f64, lo: f64, hi: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    // windowed-sinc band-pass, 257 taps
    let taps = 257;
    let m = (taps - 1) as f64 / 2.0;
    let sinc = |x: f64| if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    let h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - m;
            let bp = 2.0 * hi / sr * sinc(2.0 * hi / sr * t) - 2.0 * lo / sr * sinc(2.0 * lo / sr * t);
            bp * (0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos())
        })
        .collect();
    fft_convolve(&white, &h)[taps / 2..taps / 2 + n].to_vec()
}

fn scale_to(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let p = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if p > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / p);
    }
    x
}

/// Renders `seconds` of a synthetic class; parameters vary with `seed`.
pub fn synth_signal(class: &str, seconds: f64, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    if n < 16 {
        return Err(Error::TooShort { len: n, needed: 16 });
    }
    let mut rng = rng_for(&[seed, label_salt(class)]);
    let t = |i: usize| i as f64 / sr;
    let x: Vec<f64> = match class {
        "tone" => {
            let f0 = rng.random_range(90.0..160.0);
            let vib = rng.random_range(2.0..5.0);
            let mut phase = 0.0;
            (0..n)
                .map(|i| {
                    phase += 2.0 * PI * f0 * (1.0 + 0.01 * (2.0 * PI * vib * t(i)).sin()) / sr;
                    phase.sin() + 0.3 * (2.0 * phase).sin()
                })
                .collect()
        }
        "chirp" => {
            let f1 = rng.random_range(1000.0..1500.0);
            let f2 = rng.random_range(3000.0..4500.0);
            let period = rng.random_range(0.3..0.5);
            let mut phase = 0.0;
            (0..n)
                .map(|i| {
                    let u = (t(i) % period) / period;
                    phase += 2.0 * PI * (f1 + (f2 - f1) * u) / sr;
                    phase.sin() * (PI * u).sin().max(0.05)
                })
                .collect()
        }
        "band_noise" => {
            let lo = rng.random_range(500.0..900.0);
            let swell = rng.random_range(0.5..1.5);
            let b = band_limited_noise(&mut rng, n, sr, lo, (lo * 3.0).min(0.45 * sr));
            b.iter().enumerate().map(|(i, v)| v * (0.75 + 0.25 * (2.0 * PI * swell * t(i)).sin())).collect()
        }
        "am_noise" => {
            let fm = rng.random_range(6.0..14.0);
            let hi = rng.random_range(350.0..600.0);
            let b = band_limited_noise(&mut rng, n, sr, 60.0, hi);
            b.iter().enumerate().map(|(i, v)| v * (1.0 + 0.9 * (2.0 * PI * fm * t(i)).sin())).collect()
        }
        "click_train" => {
            let period = rng.random_range(0.08..0.15);
            let fc = rng.random_range(2500.0..3500.0);
            (0..n)
                .map(|i| {
                    let u = t(i) % period;
                    (2.0 * PI * fc * u).sin() * (-u / 0.002).exp()
                })
                .collect()
        }
        "harmonic" => {
            let f0 = rng.random_range(220.0..350.0);
            (0..n)
                .map(|i| (1..=10).map(|k| (2.0 * PI * f0 * k as f64 * t(i)).sin() / k as f64).sum())
                .collect()
        }
        other => return Err(Error::UnknownLabel(other.to_string())),
    };
    Ok(scale_to(x, 0.5))
}

/// Clips per (class, direction, distance) cell in each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub classes: Vec<String>,
    pub directions: Vec<Direction>,
    pub distances: Vec<Distance>,
    pub clips_per_cell: SplitCounts,
    /// Renderings of each base clip in the training split, each in its own room.
    pub train_augmentations: usize,
    /// Add a mono-replicated record for every base clip.
    pub include_mono: bool,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub max_image_order: u32,
    /// Azimuth half-width around each direction centre, degrees.
    pub azimuth_half_width_deg: f64,
    /// Elevation band (absolute degrees) for "up" and "down" clips.
    pub elevation_deg: (f64, f64),
    pub near_m: (f64, f64),
    pub far_m: (f64, f64),
    /// Reverberation band for corpus rooms, ms; must sit inside the room ranges.
    pub t30_ms: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            classes: SYNTH_CLASSES.iter().map(|(c, _)| c.to_string()).collect(),
            directions: Direction::ALL.to_vec(),
            distances: Distance::ALL.to_vec(),
            clips_per_cell: SplitCounts { train: 21, val: 4, test: 10 },
            train_augmentations: 2,
            include_mono: true,
            clip_seconds: 1.0,
            sample_rate: 16_000,
            max_image_order: 6,
            azimuth_half_width_deg: 30.0,
            elevation_deg: (41.0, 47.0),
            near_m: (0.5, 0.95),
            far_m: (2.1, 3.0),
            t30_ms: AttributeRanges::train().t30_ms,
            seed: 0,
        }
    }
}

fn direction_centre(d: Direction) -> f64 {
    match d {
        Direction::Left => -90.0,
        Direction::Right => 90.0,
        Direction::Front => 0.0,
        Direction::Back => 180.0,
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("need at least two semantic classes".into()));
        }
        for c in &self.classes {
            class_phrase(c)?;
        }
        if self.directions.is_empty() || self.distances.is_empty() {
            return Err(Error::Config("need at least one direction and one distance bin".into()));
        }
        if self.clips_per_cell.train > 0 && self.train_augmentations < 2 {
            return Err(Error::Config("training clips need at least two spatial augmentations".into()));
        }
        if !(self.clip_seconds > 0.0) || self.sample_rate < 8000 {
            return Err(Error::Config("invalid clip length or sample rate".into()));
        }
        if !(0.0..=35.0).contains(&self.azimuth_half_width_deg) {
            return Err(Error::Config("azimuth half-width must keep clips inside their direction band".into()));
        }
        let (e0, e1) = self.elevation_deg;
        if !(40.0 < e0 && e0 <= e1 && e1 <= AttributeRanges::train().elevation_deg.1.min(-AttributeRanges::train().elevation_deg.0)) {
            return Err(Error::Config(format!("elevation band {:?} must lie above 40 degrees and inside the room ranges", self.elevation_deg)));
        }
        let (n0, n1) = self.near_m;
        let (f0, f1) = self.far_m;
        if !(n0 >= AttributeRanges::train().distance_m.0 && n0 <= n1 && n1 < 1.0 && 2.0 < f0 && f0 <= f1 && f1 <= AttributeRanges::train().distance_m.1) {
            return Err(Error::Config("distance bins must stay inside the near/far bands".into()));
        }
        let (t0, t1) = self.t30_ms;
        let room = AttributeRanges::train().t30_ms;
        if !(room.0 <= t0 && t0 < t1 && t1 <= room.1) {
            return Err(Error::Config(format!("t30 band {:?} must lie inside {:?}", self.t30_ms, room)));
        }
        Ok(())
    }

    fn augmentations(&self, split: Split) -> usize {
        if split == Split::Train { self.train_augmentations } else { 1 }
    }

    /// Spatial records a split will contain.
    pub fn spatial_count(&self, split: Split) -> usize {
        self.classes.len() * self.directions.len() * self.distances.len() * self.clips_per_cell.get(split) * self.augmentations(split)
    }

    fn cell_ranges(&self, dir: Direction, dist: Distance, elev: Elevation) -> AttributeRanges {
        let c = direction_centre(dir);
        let w = self.azimuth_half_width_deg;
        let wrap = |a: f64| if a > 180.0 { a - 360.0 } else if a < -180.0 { a + 360.0 } else { a };
        let (e0, e1) = self.elevation_deg;
        AttributeRanges {
            azimuth_deg: (wrap(c - w), wrap(c + w)),
            elevation_deg: if elev == Elevation::Up { (e0, e1) } else { (-e1, -e0) },
            distance_m: if dist == Distance::Near { self.near_m } else { self.far_m },
            t30_ms: self.t30_ms,
            ..AttributeRanges::train()
        }
    }
}

#[derive(Debug, Clone)]
struct Job {
    split: Split,
    index: usize,
    class: String,
    signal_seed: u64,
    spatial: Option<(Direction, Distance, Elevation)>,
}

fn plan_jobs(spec: &SyntheticCorpusSpec, split: Split) -> Vec<Job> {
    let mut jobs = Vec::new();
    let mut mono = Vec::new();
    let clips = spec.clips_per_cell.get(split);
    for (ci, class) in spec.classes.iter().enumerate() {
        for (di, &dir) in spec.directions.iter().enumerate() {
            for (ri, &dist) in spec.distances.iter().enumerate() {
                for k in 0..clips {
                    let signal_seed = derive_seed(&[spec.seed, split.salt(), ci as u64, di as u64, ri as u64, k as u64]);
                    for a in 0..spec.augmentations(split) {
                        let elev = if (k + a) % 2 == 0 { Elevation::Up } else { Elevation::Down };
                        jobs.push(Job { split, index: jobs.len(), class: class.clone(), signal_seed, spatial: Some((dir, dist, elev)) });
                    }
                    if spec.include_mono {
                        mono.push(Job { split, index: mono.len(), class: class.clone(), signal_seed, spatial: None });
                    }
                }
            }
        }
    }
    jobs.extend(mono);
    jobs
}

fn render_job(spec: &SyntheticCorpusSpec, job: &Job, out_dir: &Path) -> Result<ManifestRecord> {
    let phrase = class_phrase(&job.class)?;
    let dry = synth_signal(&job.class, spec.clip_seconds, spec.sample_rate, job.signal_seed)?;
    match job.spatial {
        Some((dir, dist, elev)) => {
            let id = format!("{}-{:05}", job.split, job.index);
            let mut sampler = RoomSampler::new(job.split, AttributeRanges::train(), spec.seed);
            sampler.max_image_order = spec.max_image_order;
            let room = sampler.sample_constrained(job.index as u64, &spec.cell_ranges(dir, dist, elev))?;
            let (foa, attrs) = spatialize(&dry, &room, spec.sample_rate)?;
            let rel = format!("audio/{id}.wav");
            write_foa_wav(&out_dir.join(&rel), &foa)?;
            let template_seed = derive_seed(&[spec.seed, job.split.salt(), job.index as u64, label_salt("template")]);
            let cap = CaptionRecord::new(phrase, attrs, template_seed)?;
            Ok(ManifestRecord {
                id,
                audio_path: rel,
                original_caption: cap.original_caption,
                spatial_caption: cap.spatial_caption,
                attributes: Some(attrs),
                room_id: Some(((Split::ALL.iter().position(|&s| s == job.split).unwrap_or(0) as u64) << 32) | job.index as u64),
                split: job.split,
                is_spatial: true,
                semantic_class: job.class.clone(),
            })
        }
        None => {
            let id = format!("{}-mono-{:05}", job.split, job.index);
            let mut ch = vec![trim_and_loop(&dry, spec.sample_rate)?];
            normalize_peak(&mut ch);
            let foa = replicate_mono(&ch[0], spec.sample_rate);
            let rel = format!("audio/{id}.wav");
            write_foa_wav(&out_dir.join(&rel), &foa)?;
            Ok(ManifestRecord {
                id,
                audio_path: rel,
                original_caption: phrase.to_string(),
                spatial_caption: phrase.to_string(),
                attributes: None,
                room_id: None,
                split: job.split,
                is_spatial: false,
                semantic_class: job.class.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub spatial: BTreeMap<String, usize>,
    pub mono: BTreeMap<String, usize>,
    pub audit: AuditReport,
}

pub fn manifest_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Renders the corpus into `out_dir` (audio/ plus one manifest per split).
/// Records render in parallel; every record depends only on its own seed.
pub fn make_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("audio"))?;
    let mut spatial = BTreeMap::new();
    let mut mono = BTreeMap::new();
    let mut all = Vec::new();
    for split in Split::ALL {
        let jobs = plan_jobs(spec, split);
        let records = jobs.par_iter().map(|j| render_job(spec, j, out_dir)).collect::<Result<Vec<_>>>()?;
        write_manifest(&manifest_path(out_dir, split), split, &records)?;
        spatial.insert(split.to_string(), records.iter().filter(|r| r.is_spatial).count());
        mono.insert(split.to_string(), records.iter().filter(|r| !r.is_spatial).count());
        all.extend(records);
    }
    let audit = audit_records(&all)?;
    Ok(CorpusSummary { spatial, mono, audit })
}
