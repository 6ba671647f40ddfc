//! Ambisonic encoding: analytic plane-wave FOA synthesis, rigid-sphere
//! microphone pressure, least-squares encoding of array signals and decoding
//! onto direction grids.

use nalgebra::DMatrix;
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::sphmath::{
    channel_count, radial_function_rigid, sph_harm_vector, ShIndex, SphericalDirection,
};

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Radial equalisation floor, relative to `4 pi`.
pub const RADIAL_FLOOR: f64 = 1e-4;

/// Encoding fails above this condition number of the harmonic matrix.
pub const MAX_CONDITION: f64 = 1e6;

/// Number of ambisonic channels of a first-order signal.
pub const FOA_CHANNELS: usize = 4;

/// A rigid spherical microphone array.
#[derive(Debug, Clone, PartialEq)]
pub struct MicArrayGeometry {
    pub name: String,
    pub radius_m: f64,
    pub sensors: Vec<SphericalDirection>,
}

impl MicArrayGeometry {
    pub fn new(name: impl Into<String>, radius_m: f64, sensors: Vec<SphericalDirection>) -> Result<Self> {
        if !(radius_m > 0.0) {
            return Err(Error::Domain(format!("array radius must be > 0, got {radius_m}")));
        }
        for (i, a) in sensors.iter().enumerate() {
            for b in &sensors[i + 1..] {
                if a.angle_to(*b) < 1e-9 {
                    return Err(Error::Domain("duplicate sensor direction".into()));
                }
            }
        }
        Ok(Self { name: name.into(), radius_m, sensors })
    }

    fn from_vectors(name: &str, radius_m: f64, vecs: &[[f64; 3]]) -> Self {
        let sensors = vecs
            .iter()
            .map(|&v| SphericalDirection::from_vector(v).expect("non-zero vertex"))
            .collect();
        Self::new(name, radius_m, sensors).expect("valid preset")
    }

    /// Regular tetrahedron (4 sensors), the usual FOA capsule layout.
    pub fn tetrahedron(radius_m: f64) -> Self {
        Self::from_vectors(
            "tetrahedron",
            radius_m,
            &[[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]],
        )
    }

    /// Regular octahedron (6 sensors).
    pub fn octahedron(radius_m: f64) -> Self {
        Self::from_vectors(
            "octahedron",
            radius_m,
            &[
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
            ],
        )
    }

    /// Regular icosahedron (12 sensors, a spherical 5-design).
    pub fn icosahedron(radius_m: f64) -> Self {
        let g = (1.0 + 5f64.sqrt()) / 2.0;
        let mut v = Vec::with_capacity(12);
        for &a in &[-1.0, 1.0] {
            for &b in &[-g, g] {
                v.push([0.0, a, b]);
                v.push([a, b, 0.0]);
                v.push([b, 0.0, a]);
            }
        }
        Self::from_vectors("icosahedron", radius_m, &v)
    }

    /// Regular dodecahedron (20 sensors, a spherical 5-design).
    pub fn dodecahedron(radius_m: f64) -> Self {
        let g = (1.0 + 5f64.sqrt()) / 2.0;
        let ig = 1.0 / g;
        let mut v = Vec::with_capacity(20);
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    v.push([x, y, z]);
                }
            }
        }
        for &a in &[-ig, ig] {
            for &b in &[-g, g] {
                v.push([0.0, a, b]);
                v.push([a, b, 0.0]);
                v.push([b, 0.0, a]);
            }
        }
        Self::from_vectors("dodecahedron", radius_m, &v)
    }

    /// `Q x (N+1)^2` matrix of real harmonics sampled at the sensors.
    pub fn harmonic_matrix(&self, order: u32) -> DMatrix<f64> {
        let c = channel_count(order);
        let mut y = DMatrix::zeros(self.sensors.len(), c);
        for (q, &dir) in self.sensors.iter().enumerate() {
            for (acn, v) in sph_harm_vector(order, dir).into_iter().enumerate() {
                y[(q, acn)] = v;
            }
        }
        y
    }
}

/// Ambisonic STFT tensor `T x F x (N+1)^2`, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbisonicsStft {
    data: Vec<Complex64>,
    frames: usize,
    bins: usize,
    order: u32,
    pub sample_rate: u32,
    pub hop: usize,
}

impl AmbisonicsStft {
    pub fn new(
        data: Vec<Complex64>,
        frames: usize,
        bins: usize,
        order: u32,
        sample_rate: u32,
        hop: usize,
    ) -> Result<Self> {
        let c = channel_count(order);
        if frames == 0 || bins == 0 {
            return Err(Error::Domain("ambisonic STFT needs T, F >= 1".into()));
        }
        if data.len() != frames * bins * c {
            return Err(Error::Shape {
                op: "AmbisonicsStft::new",
                lhs: vec![data.len()],
                rhs: vec![frames, bins, c],
            });
        }
        Ok(Self { data, frames, bins, order, sample_rate, hop })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn channels(&self) -> usize {
        channel_count(self.order)
    }

    /// Coefficients of all channels at `(t, f)`.
    pub fn bin(&self, t: usize, f: usize) -> &[Complex64] {
        let c = self.channels();
        let start = (t * self.bins + f) * c;
        &self.data[start..start + c]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }
}

/// A four-channel first-order ambisonic signal in ACN order (W, Y, Z, X).
#[derive(Debug, Clone, PartialEq)]
pub struct FoaSignal {
    pub channels: [Vec<f64>; FOA_CHANNELS],
    pub sample_rate: u32,
}

impl FoaSignal {
    pub fn new(channels: [Vec<f64>; FOA_CHANNELS], sample_rate: u32) -> Result<Self> {
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Domain("FOA channels differ in length".into()));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Domain("FOA signal contains non-finite samples".into()));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { channels: std::array::from_fn(|_| vec![0.0; len]), sample_rate }
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn peak(&self) -> f64 {
        self.channels.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Encodes a mono source as a unit plane wave arriving from `dir`:
/// channel `acn(n, m)` carries `source * Y_n^m(dir)`.
pub fn planewave_foa(dir: SphericalDirection, source: &[f64], sample_rate: u32) -> FoaSignal {
    let gains = sph_harm_vector(1, dir);
    FoaSignal {
        channels: std::array::from_fn(|c| source.iter().map(|s| s * gains[c]).collect()),
        sample_rate,
    }
}

/// Analytic rigid-sphere pressure at each sensor for a unit plane wave from
/// `dir` at spatial frequency `k`, summing orders `0..=n_truncate`.
pub fn mic_pressure_planewave(
    geom: &MicArrayGeometry,
    dir: SphericalDirection,
    k: f64,
    n_truncate: u32,
) -> Result<Vec<Complex64>> {
    let kr = k * geom.radius_m;
    let radial = (0..=n_truncate)
        .map(|n| radial_function_rigid(n, kr, kr))
        .collect::<Result<Vec<_>>>()?;
    let coeffs = sph_harm_vector(n_truncate, dir);
    Ok(geom
        .sensors
        .iter()
        .map(|&s| {
            let ys = sph_harm_vector(n_truncate, s);
            (0..coeffs.len())
                .map(|acn| radial[ShIndex::from_acn(acn).order() as usize] * (coeffs[acn] * ys[acn]))
                .sum()
        })
        .collect())
}

/// Linear encoder from rigid-sphere array pressure to ambisonic coefficients:
/// `a = diag(b_n)^-1 Y^+ p`, with `|b_n|` floored at `RADIAL_FLOOR * 4 pi`.
#[derive(Debug, Clone)]
pub struct AmbisonicEncoder {
    geom: MicArrayGeometry,
    order: u32,
    pinv: DMatrix<f64>,
    cond: f64,
    pub speed_of_sound: f64,
}

impl AmbisonicEncoder {
    pub fn new(geom: &MicArrayGeometry, order: u32) -> Result<Self> {
        let c = channel_count(order);
        if geom.sensors.len() < c {
            return Err(Error::Domain(format!(
                "order {order} needs at least {c} sensors, array has {}",
                geom.sensors.len()
            )));
        }
        let y = geom.harmonic_matrix(order);
        let svd = y.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(Error::IllConditioned { cond, limit: MAX_CONDITION });
        }
        let pinv = svd
            .pseudo_inverse(smax * 1e-12)
            .map_err(|e| Error::Domain(e.to_string()))?;
        Ok(Self { geom: geom.clone(), order, pinv, cond, speed_of_sound: SPEED_OF_SOUND })
    }

    pub fn condition_number(&self) -> f64 {
        self.cond
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    /// Radial equaliser for each order at spatial frequency `k`.
    fn equaliser(&self, k: f64) -> Result<Vec<Complex64>> {
        let floor = RADIAL_FLOOR * 4.0 * PI;
        let kr = k * self.geom.radius_m;
        (0..=self.order)
            .map(|n| {
                let b = if kr > 0.0 {
                    radial_function_rigid(n, kr, kr)?
                } else if n == 0 {
                    Complex64::new(4.0 * PI, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                let mag = b.norm();
                Ok(if mag < floor {
                    if mag > 0.0 { b * (floor / mag) } else { Complex64::new(floor, 0.0) }
                } else {
                    b
                })
            })
            .collect()
    }

    /// Encodes one pressure snapshot at spatial frequency `k` (rad/m).
    pub fn encode_bin(&self, pressure: &[Complex64], k: f64) -> Result<Vec<Complex64>> {
        if pressure.len() != self.geom.sensors.len() {
            return Err(Error::Shape {
                op: "encode_bin",
                lhs: vec![pressure.len()],
                rhs: vec![self.geom.sensors.len()],
            });
        }
        let eq = self.equaliser(k)?;
        Ok((0..self.pinv.nrows())
            .map(|acn| {
                let s: Complex64 = (0..pressure.len()).map(|q| pressure[q] * self.pinv[(acn, q)]).sum();
                s / eq[ShIndex::from_acn(acn).order() as usize]
            })
            .collect())
    }

    /// Encodes array spectra `T x F x Q` (frame-major) into an ambisonic STFT.
    /// Bin `f` has frequency `f * sample_rate / n_fft`.
    pub fn encode_stft(
        &self,
        pressure: &[Complex64],
        frames: usize,
        bins: usize,
        n_fft: usize,
        sample_rate: u32,
        hop: usize,
    ) -> Result<AmbisonicsStft> {
        let q = self.geom.sensors.len();
        if pressure.len() != frames * bins * q {
            return Err(Error::Shape {
                op: "encode_stft",
                lhs: vec![pressure.len()],
                rhs: vec![frames, bins, q],
            });
        }
        let mut out = Vec::with_capacity(frames * bins * channel_count(self.order));
        for t in 0..frames {
            for f in 0..bins {
                let hz = f as f64 * sample_rate as f64 / n_fft as f64;
                let k = 2.0 * PI * hz / self.speed_of_sound;
                let start = (t * bins + f) * q;
                out.extend(self.encode_bin(&pressure[start..start + q], k)?);
            }
        }
        AmbisonicsStft::new(out, frames, bins, self.order, sample_rate, hop)
    }
}

/// Convenience wrapper around [`AmbisonicEncoder`] for a single snapshot.
pub fn encode_from_mics(
    pressure: &[Complex64],
    geom: &MicArrayGeometry,
    order: u32,
    k: f64,
) -> Result<Vec<Complex64>> {
    AmbisonicEncoder::new(geom, order)?.encode_bin(pressure, k)
}

/// Inverse spherical Fourier transform of one coefficient frame onto `grid`,
/// returning `|a(direction)|^2`.
pub fn decode_to_grid(coeffs: &[Complex64], grid: &[SphericalDirection]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Domain("decode grid is empty".into()));
    }
    let root = (coeffs.len() as f64).sqrt().round() as u32;
    if root == 0 || channel_count(root - 1) != coeffs.len() {
        return Err(Error::Domain(format!("{} coefficients is not a full ambisonic order", coeffs.len())));
    }
    let order = root - 1;
    Ok(grid
        .iter()
        .map(|&d| {
            let y = sph_harm_vector(order, d);
            let a: Complex64 = coeffs.iter().zip(&y).map(|(c, y)| c * y).sum();
            a.norm_sqr()
        })
        .collect())
}

/// Regular azimuth/elevation grid with `step_deg` spacing.
pub fn direction_grid(step_deg: f64) -> Vec<SphericalDirection> {
    let n_el = (180.0 / step_deg).round() as i64;
    let n_az = (360.0 / step_deg).round() as i64;
    let mut out = Vec::with_capacity(((n_el + 1) * n_az) as usize);
    for i in 0..=n_el {
        let el = -90.0 + i as f64 * step_deg;
        for j in 0..n_az {
            let az = -180.0 + (j + 1) as f64 * step_deg;
            out.push(SphericalDirection::from_degrees(az, el));
        }
    }
    out
}
