//! Shoebox room simulation: image sources plus a matched diffuse tail, encoded
//! directly to first-order ambisonics, and a seeded room sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::ambisonics::{FoaSignal, FOA_CHANNELS, SPEED_OF_SOUND};
use crate::dsp::fft_convolve;
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, label_salt, rng_for};
use crate::sphmath::{sph_harm_vector, wrap_angle, SphericalDirection};

/// Samples quieter than this (-60 dBFS) are trimmed from both ends.
pub const SILENCE_THRESHOLD: f64 = 1e-3;
/// Spatialized output is peak-normalised to -3 dBFS.
pub const OUTPUT_PEAK: f64 = 0.707_945_784_384_137_9;
/// Minimum duration of spatialized audio.
pub const MIN_DURATION_S: f64 = 4.0;
pub const DEFAULT_MAX_IMAGE_ORDER: u32 = 6;
pub const MIN_SOURCE_DISTANCE: f64 = 0.3;
/// Diffuse dipole channels sit 10 dB below the omni channel.
const TAIL_DIPOLE_GAIN: f64 = 0.316_227_766_016_837_94;
const CROSSFADE_S: f64 = 0.005;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn salt(self) -> u64 {
        label_salt(self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Shoebox room with one source and one receiver. Room coordinates are
/// right-handed with z up; a receiver with zero yaw faces +x and has +y on its
/// left. Surfaces are ordered `x=0, x=Lx, y=0, y=Ly, floor, ceiling`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims_m: [f64; 3],
    pub absorption: [f64; 6],
    pub source_pos: [f64; 3],
    pub receiver_pos: [f64; 3],
    pub receiver_yaw: f64,
    pub max_image_order: u32,
    pub seed: u64,
}

/// Ground-truth spatial attributes of a rendered clip. Azimuth is positive to
/// the right of the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialAttributes {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance_m: f64,
    pub floor_area_m2: f64,
    pub t30_ms: f64,
}

impl SpatialAttributes {
    pub fn direction(&self) -> SphericalDirection {
        SphericalDirection::from_degrees(self.azimuth_deg, self.elevation_deg)
    }
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims_m.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Domain(format!("room dimensions must be positive: {:?}", self.dims_m)));
        }
        if self.absorption.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Domain(format!("absorption must lie in (0, 1]: {:?}", self.absorption)));
        }
        for (name, p) in [("source", self.source_pos), ("receiver", self.receiver_pos)] {
            if (0..3).any(|i| !(p[i] > 0.0 && p[i] < self.dims_m[i])) {
                return Err(Error::Domain(format!("{name} position {p:?} is not inside the room")));
            }
        }
        if self.distance() < MIN_SOURCE_DISTANCE {
            return Err(Error::Domain(format!(
                "source-receiver distance {:.3} m is below {MIN_SOURCE_DISTANCE} m",
                self.distance()
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims_m.iter().product()
    }

    pub fn floor_area(&self) -> f64 {
        self.dims_m[0] * self.dims_m[1]
    }

    pub fn surface_areas(&self) -> [f64; 6] {
        let [lx, ly, lz] = self.dims_m;
        [ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly]
    }

    pub fn mean_absorption(&self) -> f64 {
        let s = self.surface_areas();
        let total: f64 = s.iter().sum();
        s.iter().zip(&self.absorption).map(|(s, a)| s * a).sum::<f64>() / total
    }

    pub fn distance(&self) -> f64 {
        dist(self.source_pos, self.receiver_pos)
    }

    /// Direction of a point in the receiver frame.
    pub fn relative_direction(&self, point: [f64; 3]) -> SphericalDirection {
        let d = [
            point[0] - self.receiver_pos[0],
            point[1] - self.receiver_pos[1],
            point[2] - self.receiver_pos[2],
        ];
        let phi = d[1].atan2(d[0]) - self.receiver_yaw;
        let el = d[2].atan2(d[0].hypot(d[1]));
        SphericalDirection::new(wrap_angle(-phi), el)
    }

    pub fn source_direction(&self) -> SphericalDirection {
        self.relative_direction(self.source_pos)
    }

    /// Attributes from geometry, with the given reverberation time.
    pub fn attributes(&self, t30_ms: f64) -> SpatialAttributes {
        let dir = self.source_direction();
        let mut az = dir.azimuth.to_degrees();
        if az <= -180.0 {
            az += 360.0;
        }
        SpatialAttributes {
            azimuth_deg: az,
            elevation_deg: dir.elevation.to_degrees(),
            distance_m: self.distance(),
            floor_area_m2: self.floor_area(),
            t30_ms,
        }
    }

    /// Attributes using the Sabine estimate for the reverberation time.
    pub fn nominal_attributes(&self) -> SpatialAttributes {
        self.attributes(sabine_t60(self) * 1000.0)
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Sabine reverberation time `0.161 V / sum(alpha_i S_i)` in seconds.
pub fn sabine_t60(room: &RoomSpec) -> f64 {
    let absorbing: f64 = room.surface_areas().iter().zip(&room.absorption).map(|(s, a)| s * a).sum();
    0.161 * room.volume() / absorbing
}

struct ImageSource {
    delay_s: f64,
    gain: f64,
    dir: SphericalDirection,
}

fn image_sources(room: &RoomSpec) -> Vec<ImageSource> {
    let order = room.max_image_order as i64;
    let beta: Vec<f64> = room.absorption.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
    let axis = |n: i64, u: i64| ((n - u).abs(), n.abs());
    let mut out = Vec::new();
    for nx in -order..=order {
        for ux in 0..2 {
            let (x0, x1) = axis(nx, ux);
            if x0 + x1 > order {
                continue;
            }
            for ny in -order..=order {
                for uy in 0..2 {
                    let (y0, y1) = axis(ny, uy);
                    if x0 + x1 + y0 + y1 > order {
                        continue;
                    }
                    for nz in -order..=order {
                        for uz in 0..2 {
                            let (z0, z1) = axis(nz, uz);
                            if x0 + x1 + y0 + y1 + z0 + z1 > order {
                                continue;
                            }
                            let hits = [x0, x1, y0, y1, z0, z1];
                            let refl: f64 = hits.iter().zip(&beta).map(|(&h, b)| b.powi(h as i32)).product();
                            if refl == 0.0 {
                                continue;
                            }
                            let img = [
                                (1 - 2 * ux) as f64 * room.source_pos[0] + 2.0 * nx as f64 * room.dims_m[0],
                                (1 - 2 * uy) as f64 * room.source_pos[1] + 2.0 * ny as f64 * room.dims_m[1],
                                (1 - 2 * uz) as f64 * room.source_pos[2] + 2.0 * nz as f64 * room.dims_m[2],
                            ];
                            let d = dist(img, room.receiver_pos);
                            out.push(ImageSource {
                                delay_s: d / SPEED_OF_SOUND,
                                gain: refl / d.max(0.1),
                                dir: room.relative_direction(img),
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mixing time `2 sqrt(V)` milliseconds, in seconds.
pub fn mixing_time(room: &RoomSpec) -> f64 {
    2.0 * room.volume().sqrt() / 1000.0
}

/// Simulates a first-order ambisonic room impulse response.
///
/// Image sources up to `max_image_order` are placed at the nearest sample.
/// After the mixing time (counted from the direct-path arrival) they are
/// cross-faded into seeded Gaussian noise whose energy decays at the Sabine
/// rate; the dipole channels of the tail carry independent noise 10 dB down.
pub fn simulate_foa_rir(room: &RoomSpec, sample_rate: u32) -> Result<FoaSignal> {
    room.validate()?;
    let fs = sample_rate as f64;
    let t60 = sabine_t60(room);
    let images = image_sources(room);
    let t_direct = room.distance() / SPEED_OF_SOUND;
    let last_image = images.iter().map(|i| i.delay_s).fold(0.0, f64::max);
    let len = ((last_image.max(t_direct + t60 * 7.0 / 6.0)) * fs).ceil() as usize + 1;
    let fade_start = t_direct + mixing_time(room);
    let fade_len = (CROSSFADE_S * fs).max(1.0);
    let fade = |n: usize| ((n as f64 - fade_start * fs) / fade_len).clamp(0.0, 1.0) * PI / 2.0;

    let mut ch: [Vec<f64>; FOA_CHANNELS] = std::array::from_fn(|_| vec![0.0; len]);
    for img in &images {
        let n = (img.delay_s * fs).round() as usize;
        let w = fade(n).cos() * img.gain;
        if w == 0.0 {
            continue;
        }
        for (c, y) in sph_harm_vector(1, img.dir).into_iter().enumerate() {
            ch[c][n] += w * y;
        }
    }

    let alpha = room.mean_absorption();
    if alpha < 1.0 {
        let y00 = sph_harm_vector(0, SphericalDirection::new(0.0, 0.0))[0];
        let base = y00 * y00 * 4.0 * PI * SPEED_OF_SOUND / (room.volume() * fs) * (1.0 - alpha);
        let mut rng = rng_for(&[room.seed, label_salt("diffuse-tail")]);
        let start = (fade_start * fs).floor() as usize;
        for n in start..len {
            let t = n as f64 / fs;
            let sigma = (base * (-13.815_510_557_964_274 * t / t60).exp()).sqrt() * fade(n).sin();
            let draws: [f64; FOA_CHANNELS] = std::array::from_fn(|_| rng.sample(StandardNormal));
            ch[0][n] += sigma * draws[0];
            for c in 1..FOA_CHANNELS {
                ch[c][n] += sigma * TAIL_DIPOLE_GAIN * draws[c];
            }
        }
    }
    FoaSignal::new(ch, sample_rate)
}

/// Full-band T30 in milliseconds from Schroeder backward integration of the
/// omni channel: a line is fitted to the decay curve between -5 and -35 dB
/// and the reported value is twice its 30 dB fall time. The points inside the
/// window must span at least 20 dB, otherwise the curve jumped across the
/// window (nearly anechoic rooms) and the decay counts as insufficient.
pub fn measure_t30(rir: &FoaSignal) -> Result<f64> {
    let w = &rir.channels[0];
    let mut tail = vec![0.0; w.len() + 1];
    for n in (0..w.len()).rev() {
        tail[n] = tail[n + 1] + w[n] * w[n];
    }
    let total = tail[0];
    if !(total > 0.0) {
        return Err(Error::Silent);
    }
    let fs = rir.sample_rate as f64;
    let (mut n_pts, mut st, mut sl, mut stt, mut stl) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut floor = 0.0f64;
    let (mut top, mut bottom) = (f64::NEG_INFINITY, f64::INFINITY);
    for (n, &s) in tail[..w.len()].iter().enumerate() {
        let level = 10.0 * (s / total).log10();
        if level > -5.0 || level < -35.0 || !level.is_finite() {
            if level.is_finite() {
                floor = floor.min(level);
            }
            continue;
        }
        floor = floor.min(level);
        top = top.max(level);
        bottom = bottom.min(level);
        let t = n as f64 / fs;
        n_pts += 1.0;
        st += t;
        sl += level;
        stt += t * t;
        stl += t * level;
    }
    let reached = tail[..w.len()].iter().any(|&s| s > 0.0 && 10.0 * (s / total).log10() <= -35.0);
    if n_pts < 2.0 || !reached || top - bottom < 20.0 {
        return Err(Error::InsufficientDecay(floor));
    }
    let slope = (n_pts * stl - st * sl) / (n_pts * stt - st * st);
    if !(slope < 0.0) {
        return Err(Error::InsufficientDecay(floor));
    }
    Ok(2.0 * 30.0 / -slope * 1000.0)
}

/// Trims leading and trailing silence and loop-pads with whole copies to at
/// least four seconds.
pub fn trim_and_loop(audio: &[f64], sample_rate: u32) -> Result<Vec<f64>> {
    let first = audio.iter().position(|x| x.abs() >= SILENCE_THRESHOLD).ok_or(Error::Silent)?;
    let last = audio.iter().rposition(|x| x.abs() >= SILENCE_THRESHOLD).ok_or(Error::Silent)?;
    let trimmed = &audio[first..=last];
    let min_len = (MIN_DURATION_S * sample_rate as f64).ceil() as usize;
    let reps = min_len.div_ceil(trimmed.len());
    Ok(trimmed.iter().copied().cycle().take(reps * trimmed.len()).collect())
}

/// Scales to the common output peak (-3 dBFS).
pub fn normalize_peak(channels: &mut [Vec<f64>]) {
    let peak = channels.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let g = OUTPUT_PEAK / peak;
        channels.iter_mut().flatten().for_each(|x| *x *= g);
    }
}

/// Trims silence, loop-pads to at least four seconds, convolves with the room
/// response and peak-normalises to -3 dBFS.
pub fn spatialize(audio: &[f64], room: &RoomSpec, sample_rate: u32) -> Result<(FoaSignal, SpatialAttributes)> {
    let padded = trim_and_loop(audio, sample_rate)?;

    let rir = simulate_foa_rir(room, sample_rate)?;
    let t30 = match measure_t30(&rir) {
        Ok(t) => t,
        Err(Error::InsufficientDecay(_)) => {
            log::debug!("RIR too short to measure T30; using the Sabine estimate");
            sabine_t60(room) * 1000.0
        }
        Err(e) => return Err(e),
    };
    let mut channels: [Vec<f64>; FOA_CHANNELS] = std::array::from_fn(|c| fft_convolve(&padded, &rir.channels[c]));
    normalize_peak(&mut channels);
    Ok((FoaSignal::new(channels, sample_rate)?, room.attributes(t30)))
}

/// Per-attribute bounds. An azimuth interval with `lo > hi` wraps through 180.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRanges {
    pub azimuth_deg: (f64, f64),
    pub elevation_deg: (f64, f64),
    pub distance_m: (f64, f64),
    pub floor_area_m2: (f64, f64),
    pub t30_ms: (f64, f64),
}

impl AttributeRanges {
    /// Training-set bounds.
    pub fn train() -> Self {
        Self {
            azimuth_deg: (-180.0, 180.0),
            elevation_deg: (-47.5, 48.7),
            distance_m: (0.5, 4.0),
            floor_area_m2: (13.3, 277.4),
            t30_ms: (144.5, 2671.9),
        }
    }

    /// Held-out test-set bounds.
    pub fn test() -> Self {
        Self {
            azimuth_deg: (-180.0, 180.0),
            elevation_deg: (-29.8, 42.4),
            distance_m: (0.9, 4.0),
            floor_area_m2: (14.3, 277.4),
            t30_ms: (167.8, 1254.8),
        }
    }

    fn azimuth_width(&self) -> f64 {
        let (lo, hi) = self.azimuth_deg;
        if lo <= hi { hi - lo } else { hi - lo + 360.0 }
    }

    pub fn contains_azimuth(&self, az: f64) -> bool {
        let (lo, hi) = self.azimuth_deg;
        if self.azimuth_width() >= 360.0 {
            true
        } else if lo <= hi {
            (lo..=hi).contains(&az)
        } else {
            az >= lo || az <= hi
        }
    }

    pub fn contains(&self, a: &SpatialAttributes) -> bool {
        let within = |(lo, hi): (f64, f64), x: f64| x >= lo && x <= hi;
        self.contains_azimuth(a.azimuth_deg)
            && within(self.elevation_deg, a.elevation_deg)
            && within(self.distance_m, a.distance_m)
            && within(self.floor_area_m2, a.floor_area_m2)
            && within(self.t30_ms, a.t30_ms)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let valid = ok(self.elevation_deg)
            && ok(self.distance_m)
            && ok(self.floor_area_m2)
            && ok(self.t30_ms)
            && self.elevation_deg.0 >= -90.0
            && self.elevation_deg.1 <= 90.0
            && self.distance_m.0 >= MIN_SOURCE_DISTANCE
            && self.floor_area_m2.0 > 0.0
            && self.t30_ms.0 > 0.0
            && self.azimuth_deg.0.is_finite()
            && self.azimuth_deg.1.is_finite();
        if valid {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid attribute ranges: {self:?}")))
        }
    }
}

/// Seeded room sampler. Room `i` of a split depends only on
/// `(seed, split, i)`, so samples can be drawn in any order or in parallel.
#[derive(Debug, Clone)]
pub struct RoomSampler {
    pub split: Split,
    pub ranges: AttributeRanges,
    pub seed: u64,
    pub max_image_order: u32,
    next_id: u64,
}

impl RoomSampler {
    pub fn new(split: Split, ranges: AttributeRanges, seed: u64) -> Self {
        Self { split, ranges, seed, max_image_order: DEFAULT_MAX_IMAGE_ORDER, next_id: 0 }
    }

    /// Draws room number `id` of this split.
    pub fn sample_at(&self, id: u64) -> Result<RoomSpec> {
        self.sample_constrained(id, &self.ranges)
    }

    /// Draws room number `id` with attributes inside `ranges` (which should be a
    /// subset of the split's own ranges).
    pub fn sample_constrained(&self, id: u64, ranges: &AttributeRanges) -> Result<RoomSpec> {
        ranges.validate()?;
        let key = derive_seed(&[self.seed, self.split.salt(), id]);
        let mut rng = rng_for(&[key]);
        let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| {
            (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
        };
        for _ in 0..MAX_REJECTIONS {
            let area = log_uniform(&mut rng, ranges.floor_area_m2);
            let aspect = rng.random_range(1.0..1.8);
            let lx = (area * aspect).sqrt();
            let ly = area / lx;
            let lz: f64 = rng.random_range(2.4..4.5);
            let (lx, ly) = if rng.random::<bool>() { (lx, ly) } else { (ly, lx) };

            let receiver = [
                rng.random_range(0.5..lx - 0.5),
                rng.random_range(0.5..ly - 0.5),
                rng.random_range(1.0..(lz - 0.3).min(2.2)),
            ];
            let yaw = rng.random_range(-PI..PI);
            let az = (ranges.azimuth_deg.0 + rng.random::<f64>() * ranges.azimuth_width()).to_radians();
            let (el_lo, el_hi) = ranges.elevation_deg;
            let el = rng.random_range(el_lo..=el_hi).to_radians();
            let (d_lo, d_hi) = ranges.distance_m;
            let d = rng.random_range(d_lo..=d_hi);
            let phi = yaw - az;
            let source = [
                receiver[0] + d * el.cos() * phi.cos(),
                receiver[1] + d * el.cos() * phi.sin(),
                receiver[2] + d * el.sin(),
            ];
            let dims = [lx, ly, lz];
            if (0..3).any(|i| source[i] < 0.1 || source[i] > dims[i] - 0.1) {
                continue;
            }

            let t60_target = log_uniform(&mut rng, ranges.t30_ms) / 1000.0;
            let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
            let base = 0.161 * lx * ly * lz / (surface * t60_target);
            let mut absorption = [0.0; 6];
            for a in &mut absorption {
                *a = (base * rng.random_range(0.85..1.15)).clamp(0.01, 1.0);
            }

            let room = RoomSpec {
                dims_m: dims,
                absorption,
                source_pos: source,
                receiver_pos: receiver,
                receiver_yaw: yaw,
                max_image_order: self.max_image_order,
                seed: derive_seed(&[key, label_salt("room")]),
            };
            if room.validate().is_ok() && ranges.contains(&room.nominal_attributes()) {
                return Ok(room);
            }
        }
        Err(Error::SamplingExhausted(MAX_REJECTIONS))
    }
}

/// Draws the next room from `sampler`.
pub fn sample_room(sampler: &mut RoomSampler) -> Result<RoomSpec> {
    let room = sampler.sample_at(sampler.next_id)?;
    sampler.next_id += 1;
    Ok(room)
}
