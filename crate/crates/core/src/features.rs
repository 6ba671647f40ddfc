//! Audio features: log-mel spectrogram of the omni channel and unit-norm
//! active/reactive intensity vectors.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ambisonics::{AmbisonicsStft, FoaSignal, FOA_CHANNELS};
use crate::dsp::stft;
use crate::error::{Error, Result};
use crate::sphmath::SphericalDirection;

/// Floor added before the logarithm.
pub const LOG_EPS: f64 = 1e-10;
/// Intensity vectors with a smaller norm are zeroed.
pub const IV_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub mel_bands: usize,
}

impl FeatureConfig {
    /// Full-rate defaults.
    pub fn full_rate() -> Self {
        Self { sample_rate: 48_000, win: 1024, hop: 480, mel_bands: 64 }
    }

    /// Reduced setting for 16 kHz toy training.
    pub fn toy() -> Self {
        Self { sample_rate: 16_000, win: 512, hop: 160, mel_bands: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win < self.hop || self.mel_bands == 0 || self.sample_rate == 0 {
            return Err(Error::Config(format!("invalid feature config {self:?}")));
        }
        Ok(())
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::full_rate()
    }
}

/// Per-clip features. `ivs` is `T x F x 6`: active xyz then reactive xyz, in
/// the ambisonic channel order (Y, Z, X).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub frames: usize,
    pub bins: usize,
    pub mel_bands: usize,
    pub logmel: Vec<f64>,
    pub ivs: Vec<f64>,
    pub frame_times: Vec<f64>,
}

impl FeatureSet {
    pub fn iv(&self, t: usize, f: usize) -> &[f64] {
        let s = (t * self.bins + f) * 6;
        &self.ivs[s..s + 6]
    }
}

/// Four identical channels carrying a non-spatial signal.
pub fn replicate_mono(signal: &[f64], sample_rate: u32) -> FoaSignal {
    FoaSignal { channels: std::array::from_fn(|_| signal.to_vec()), sample_rate }
}

/// STFT of every FOA channel packed as a first-order ambisonic tensor.
pub fn foa_stft(foa: &FoaSignal, win: usize, hop: usize) -> Result<AmbisonicsStft> {
    let refs: Vec<&[f64]> = foa.channels.iter().map(|c| c.as_slice()).collect();
    let specs = stft(&refs, win, hop)?;
    let (frames, bins) = (specs[0].frames, specs[0].bins);
    let mut data = Vec::with_capacity(frames * bins * FOA_CHANNELS);
    for t in 0..frames {
        for f in 0..bins {
            data.extend(specs.iter().map(|s| s.at(t, f)));
        }
    }
    AmbisonicsStft::new(data, frames, bins, 1, foa.sample_rate, hop)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// HTK triangular filterbank `V x F` spanning 0 Hz to Nyquist.
pub fn mel_filterbank(mel_bands: usize, bins: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mel_bands + 2).map(|i| mel_to_hz(top * i as f64 / (mel_bands + 1) as f64)).collect();
    let bin_hz = |f: usize| f as f64 * nyquist / (bins - 1) as f64;
    (0..mel_bands)
        .map(|v| {
            let (lo, mid, hi) = (edges[v], edges[v + 1], edges[v + 2]);
            (0..bins)
                .map(|f| {
                    let hz = bin_hz(f);
                    if hz <= lo || hz >= hi {
                        0.0
                    } else if hz <= mid {
                        (hz - lo) / (mid - lo)
                    } else {
                        (hi - hz) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// `log(sum_f |A_00(t,f)|^2 W(f, v) + eps)`, row-major `T x V`.
pub fn logmel(a: &AmbisonicsStft, mel_bands: usize) -> Vec<f64> {
    let fb = mel_filterbank(mel_bands, a.bins(), a.sample_rate);
    let mut out = Vec::with_capacity(a.frames() * mel_bands);
    for t in 0..a.frames() {
        let power: Vec<f64> = (0..a.bins()).map(|f| a.bin(t, f)[0].norm_sqr()).collect();
        for w in &fb {
            let e: f64 = w.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push((e + LOG_EPS).ln());
        }
    }
    out
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > IV_EPS {
        [v[0] / n, v[1] / n, v[2] / n]
    } else {
        [0.0; 3]
    }
}

/// Active and reactive intensity vectors, each normalised to unit length
/// separately, row-major `T x F x 6`.
pub fn intensity_vectors(a: &AmbisonicsStft) -> Result<Vec<f64>> {
    if a.order() < 1 {
        return Err(Error::Domain("intensity vectors need a first-order signal".into()));
    }
    let mut out = Vec::with_capacity(a.frames() * a.bins() * 6);
    for t in 0..a.frames() {
        for f in 0..a.bins() {
            let c = a.bin(t, f);
            let w: Complex64 = c[0].conj();
            let prod = [w * c[1], w * c[2], w * c[3]];
            out.extend(unit([prod[0].re, prod[1].re, prod[2].re]));
            out.extend(unit([prod[0].im, prod[1].im, prod[2].im]));
        }
    }
    Ok(out)
}

/// Computes the full feature set of an FOA clip.
pub fn extract(foa: &FoaSignal, cfg: &FeatureConfig) -> Result<FeatureSet> {
    cfg.validate()?;
    if foa.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "clip is {} Hz but features expect {} Hz",
            foa.sample_rate, cfg.sample_rate
        )));
    }
    let a = foa_stft(foa, cfg.win, cfg.hop)?;
    let frame_times = (0..a.frames())
        .map(|t| (t * cfg.hop) as f64 / cfg.sample_rate as f64)
        .collect();
    Ok(FeatureSet {
        frames: a.frames(),
        bins: a.bins(),
        mel_bands: cfg.mel_bands,
        logmel: logmel(&a, cfg.mel_bands),
        ivs: intensity_vectors(&a)?,
        frame_times,
    })
}

/// Direction of the mean active intensity vector, or `None` for silence.
pub fn iv_doa(features: &FeatureSet) -> Option<SphericalDirection> {
    let mut sum = [0.0; 3];
    for chunk in features.ivs.chunks_exact(6) {
        for i in 0..3 {
            sum[i] += chunk[i];
        }
    }
    // channel order (Y, Z, X) back to (x, y, z)
    SphericalDirection::from_vector([sum[2], sum[0], sum[1]])
}

/// Adaptive average pooling of a row-major `rows x cols x depth` array onto
/// `out_rows x out_cols`, matching the usual start/end index rule.
pub fn adaptive_pool(
    data: &[f64],
    rows: usize,
    cols: usize,
    depth: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<f64> {
    let span = |i: usize, n_in: usize, n_out: usize| (i * n_in / n_out, ((i + 1) * n_in).div_ceil(n_out));
    let mut out = vec![0.0; out_rows * out_cols * depth];
    for r in 0..out_rows {
        let (r0, r1) = span(r, rows, out_rows);
        for c in 0..out_cols {
            let (c0, c1) = span(c, cols, out_cols);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for d in 0..depth {
                let mut s = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        s += data[(i * cols + j) * depth + d];
                    }
                }
                out[(r * out_cols + c) * depth + d] = s / count;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambisonics::planewave_foa;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect()
    }

    fn random_dir(rng: &mut ChaCha8Rng) -> SphericalDirection {
        let z: f64 = rng.random_range(-1.0..1.0);
        SphericalDirection::new(rng.random_range(-PI..PI), z.asin())
    }

    fn cfg() -> FeatureConfig {
        FeatureConfig { sample_rate: 16_000, win: 512, hop: 160, mel_bands: 32 }
    }

    #[test]
    fn zero_audio_gives_log_eps() {
        let f = extract(&FoaSignal::zeros(4000, 16_000), &cfg()).unwrap();
        assert!(f.logmel.iter().all(|&x| (x - LOG_EPS.ln()).abs() < 1e-12));
        assert!((LOG_EPS.ln() + 23.02585).abs() < 1e-4);
        assert!(f.ivs.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gain_shifts_logmel() {
        let s = noise(8000, 1);
        let loud: Vec<f64> = s.iter().map(|x| x * 10.0).collect();
        let a = extract(&replicate_mono(&s, 16_000), &cfg()).unwrap();
        let b = extract(&replicate_mono(&loud, 16_000), &cfg()).unwrap();
        for (x, y) in a.logmel.iter().zip(&b.logmel) {
            assert!((y - x - 2.0 * 10f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn white_noise_mel_energy_follows_filter_mass() {
        let c = FeatureConfig { sample_rate: 16_000, win: 512, hop: 512, mel_bands: 32 };
        let s = noise(512 * 100, 2);
        let f = extract(&replicate_mono(&s, 16_000), &c).unwrap();
        assert_eq!(f.frames, 100);
        let fb = mel_filterbank(c.mel_bands, f.bins, c.sample_rate);
        let mass: Vec<f64> = fb.iter().map(|w| w.iter().sum()).collect();
        let mean: Vec<f64> = (0..c.mel_bands)
            .map(|v| (0..f.frames).map(|t| f.logmel[t * c.mel_bands + v].exp()).sum::<f64>() / f.frames as f64)
            .collect();
        // energy per unit of filter mass is flat for white noise; low bands spanning
        // only a few bins are too noisy to compare
        let ratios: Vec<f64> = (0..c.mel_bands).filter(|&v| mass[v] >= 4.0).map(|v| mean[v] / mass[v]).collect();
        let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(ratios.len() > 16);
        for r in ratios {
            assert!((r / avg - 1.0).abs() < 0.1, "{r} vs {avg}");
        }
    }

    #[test]
    fn planewave_iv_points_at_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = noise(4000, 3);
        for _ in 0..100 {
            let d = random_dir(&mut rng);
            let f = extract(&planewave_foa(d, &s, 16_000), &cfg()).unwrap();
            let u = d.to_unit_vector();
            for t in 0..f.frames {
                for b in 1..f.bins {
                    let iv = f.iv(t, b);
                    let v = [iv[2], iv[0], iv[1]];
                    let cos = v[0] * u[0] + v[1] * u[1] + v[2] * u[2];
                    assert!(cos.clamp(-1.0, 1.0).acos().to_degrees() < 1.0);
                }
            }
            assert!(iv_doa(&f).unwrap().angle_to(d).to_degrees() < 1.0);
        }
    }

    #[test]
    fn mono_replication_gives_constant_iv() {
        let s = noise(4000, 5);
        let foa = replicate_mono(&s, 16_000);
        assert!(foa.channels.iter().all(|c| c == &s));
        let f = extract(&foa, &cfg()).unwrap();
        let k = 1.0 / 3f64.sqrt();
        for chunk in f.ivs.chunks_exact(6) {
            for i in 0..3 {
                assert!((chunk[i] - k).abs() < 1e-9);
                assert_eq!(chunk[3 + i], 0.0);
            }
        }
        let omni_only = FoaSignal {
            channels: [s.clone(), vec![0.0; s.len()], vec![0.0; s.len()], vec![0.0; s.len()]],
            sample_rate: 16_000,
        };
        assert_eq!(extract(&omni_only, &cfg()).unwrap().logmel, f.logmel);
    }

    #[test]
    fn iv_norms_and_gain_invariance() {
        let s = noise(4000, 6);
        let d = SphericalDirection::from_degrees(-40.0, 15.0);
        let mut foa = planewave_foa(d, &s, 16_000);
        // add an uncorrelated component so reactive parts are non-trivial
        let extra = noise(4000, 7);
        for (x, e) in foa.channels[2].iter_mut().zip(&extra) {
            *x += e;
        }
        let f = extract(&foa, &cfg()).unwrap();
        for chunk in f.ivs.chunks_exact(3) {
            let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n <= 1.0 + 1e-6);
        }
        let mut scaled = foa.clone();
        scaled.channels.iter_mut().flatten().for_each(|x| *x *= 37.0);
        let g = extract(&scaled, &cfg()).unwrap();
        for (a, b) in f.ivs.iter().zip(&g.ivs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stationary_plane_wave_doa_is_frame_invariant() {
        let d = SphericalDirection::from_degrees(100.0, -30.0);
        let f = extract(&planewave_foa(d, &noise(8000, 8), 16_000), &cfg()).unwrap();
        let per_frame: Vec<f64> = (0..f.frames)
            .map(|t| {
                let mut v = [0.0; 3];
                for b in 0..f.bins {
                    let iv = f.iv(t, b);
                    v[0] += iv[2];
                    v[1] += iv[0];
                    v[2] += iv[1];
                }
                SphericalDirection::from_vector(v).unwrap().angle_to(d).to_degrees()
            })
            .collect();
        let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
        let std = (per_frame.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / per_frame.len() as f64).sqrt();
        assert!(std < 0.5);
    }

    #[test]
    fn adaptive_pool_averages_blocks() {
        let data: Vec<f64> = (0..12).map(|x| x as f64).collect();
        // 3 x 4 x 1 -> 1 x 2
        assert_eq!(adaptive_pool(&data, 3, 4, 1, 1, 2), vec![(0. + 1. + 4. + 5. + 8. + 9.) / 6.0, (2. + 3. + 6. + 7. + 10. + 11.) / 6.0]);
        assert_eq!(adaptive_pool(&data, 3, 4, 1, 3, 4), data);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn foa(az: f64, z: f64, seed: u64) -> FoaSignal {
            let mut foa = planewave_foa(SphericalDirection::new(az, z.asin()), &noise(2400, seed), 16_000);
            for (x, e) in foa.channels[1].iter_mut().zip(&noise(2400, seed + 1)) {
                *x += 0.5 * e;
            }
            foa
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn ivs_are_gain_invariant(az in -PI..PI, z in -0.99f64..0.99, seed in 0u64..1000, gain in 1e-3f64..1e3) {
                let a = foa(az, z, seed);
                let mut b = a.clone();
                b.channels.iter_mut().flatten().for_each(|x| *x *= gain);
                let (fa, fb) = (extract(&a, &cfg()).unwrap(), extract(&b, &cfg()).unwrap());
                prop_assert!(fa.ivs.iter().zip(&fb.ivs).all(|(x, y)| (x - y).abs() < 1e-9));
            }

            #[test]
            fn extraction_is_pure(az in -PI..PI, z in -0.99f64..0.99, seed in 0u64..1000) {
                let a = foa(az, z, seed);
                prop_assert_eq!(extract(&a, &cfg()).unwrap(), extract(&a, &cfg()).unwrap());
            }

            #[test]
            fn pooling_a_constant_is_constant(rows in 1usize..40, cols in 1usize..40, out_r in 1usize..20, out_c in 1usize..20, v in -5.0f64..5.0) {
                let out = adaptive_pool(&vec![v; rows * cols * 2], rows, cols, 2, out_r, out_c);
                prop_assert_eq!(out.len(), out_r * out_c * 2);
                prop_assert!(out.iter().all(|x| (x - v).abs() < 1e-12));
            }
        }
    }
}
