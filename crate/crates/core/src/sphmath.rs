//! Special functions for spherical acoustics: real spherical harmonics,
//! spherical Bessel/Hankel functions with derivatives and the rigid-sphere
//! radial function.
//!
//! Harmonics are real, fully orthonormal over the unit sphere (N3D), without
//! the Condon-Shortley phase, and indexed in ACN order. Directions use
//! azimuth/elevation rather than colatitude.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalDirection {
    /// Radians in (-pi, pi].
    pub azimuth: f64,
    /// Radians in [-pi/2, pi/2].
    pub elevation: f64,
}

impl SphericalDirection {
    /// Builds a direction, wrapping azimuth into (-pi, pi] and clamping elevation.
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth: wrap_angle(azimuth),
            elevation: elevation.clamp(-PI / 2.0, PI / 2.0),
        }
    }

    pub fn from_degrees(azimuth_deg: f64, elevation_deg: f64) -> Self {
        Self::new(azimuth_deg.to_radians(), elevation_deg.to_radians())
    }

    /// Unit vector `(cos el cos az, cos el sin az, sin el)`.
    pub fn to_unit_vector(self) -> [f64; 3] {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        [ce * ca, ce * sa, se]
    }

    /// Inverse of [`to_unit_vector`](Self::to_unit_vector); the input need not be normalised.
    /// Returns `None` for the zero vector.
    pub fn from_vector(v: [f64; 3]) -> Option<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        let el = (v[2] / norm).clamp(-1.0, 1.0).asin();
        let az = v[1].atan2(v[0]);
        Some(Self::new(az, el))
    }

    /// Great-circle angle to `other`, in radians.
    pub fn angle_to(self, other: Self) -> f64 {
        angle_between(self.to_unit_vector(), other.to_unit_vector())
    }
}

/// Great-circle angle between two (not necessarily unit) vectors, in radians.
pub fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    // atan2 of |a x b| and a.b is accurate near 0 and pi, unlike acos.
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let c = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    c.atan2(d)
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Spherical-harmonic order/mode pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShIndex {
    n: u32,
    m: i32,
}

impl ShIndex {
    pub fn new(n: u32, m: i32) -> Result<Self> {
        if m.unsigned_abs() > n {
            return Err(Error::Domain(format!("|m| = {} exceeds n = {n}", m.abs())));
        }
        Ok(Self { n, m })
    }

    pub fn order(self) -> u32 {
        self.n
    }

    pub fn mode(self) -> i32 {
        self.m
    }

    /// ACN channel number `n^2 + n + m`.
    pub fn acn(self) -> usize {
        ((self.n * self.n + self.n) as i64 + self.m as i64) as usize
    }

    pub fn from_acn(acn: usize) -> Self {
        let n = (acn as f64).sqrt().floor() as u32;
        // guard against sqrt rounding for large acn
        let n = if ((n + 1) * (n + 1)) as usize <= acn { n + 1 } else { n };
        let m = acn as i64 - (n * n + n) as i64;
        Self { n, m: m as i32 }
    }
}

/// Number of ambisonic channels for order `order`.
pub fn channel_count(order: u32) -> usize {
    ((order + 1) * (order + 1)) as usize
}

/// Associated Legendre function `P_n^m(x)` for `m >= 0`, without the
/// Condon-Shortley phase.
fn assoc_legendre(n: u32, m: u32, x: f64) -> f64 {
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= fact * somx2;
        fact += 2.0;
    }
    if n == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if n == m + 1 {
        return pmmp1;
    }
    let mut pnm = 0.0;
    for l in (m + 2)..=n {
        pnm = ((2 * l - 1) as f64 * x * pmmp1 - (l + m - 1) as f64 * pmm) / (l - m) as f64;
        pmm = pmmp1;
        pmmp1 = pnm;
    }
    pnm
}

fn factorial_ratio(n: u32, m: u32) -> f64 {
    // (n - m)! / (n + m)!
    let mut r = 1.0;
    for k in (n - m + 1)..=(n + m) {
        r /= k as f64;
    }
    r
}

/// Real orthonormal spherical harmonic `Y_n^m` at `dir`.
pub fn real_sph_harm(idx: ShIndex, dir: SphericalDirection) -> f64 {
    let n = idx.n;
    let am = idx.m.unsigned_abs();
    let p = assoc_legendre(n, am, dir.elevation.sin());
    let norm = ((2 * n + 1) as f64 / (4.0 * PI) * factorial_ratio(n, am)).sqrt();
    match idx.m {
        0 => norm * p,
        m if m > 0 => 2f64.sqrt() * norm * p * (am as f64 * dir.azimuth).cos(),
        _ => 2f64.sqrt() * norm * p * (am as f64 * dir.azimuth).sin(),
    }
}

/// All harmonics up to `order`, in ACN order.
pub fn sph_harm_vector(order: u32, dir: SphericalDirection) -> Vec<f64> {
    (0..channel_count(order))
        .map(|acn| real_sph_harm(ShIndex::from_acn(acn), dir))
        .collect()
}

/// Power series for `j_n(x)`, accurate for `x <= 1` and any order.
fn bessel_j_series(n: u32, x: f64) -> f64 {
    let mut lead = 1.0;
    for k in 1..=n {
        lead *= x / (2 * k + 1) as f64;
    }
    let z = -0.5 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60u32 {
        term *= z / (k as f64 * (2 * n + 2 * k + 1) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    lead * sum
}

/// Spherical Bessel function of the first kind `j_n(x)`, `x >= 0`.
pub fn sph_bessel_j(n: u32, x: f64) -> f64 {
    if x <= 1.0 {
        return bessel_j_series(n, x);
    }
    let (s, c) = x.sin_cos();
    let j0 = s / x;
    let j1 = s / (x * x) - c / x;
    match n {
        0 => j0,
        1 => j1,
        2 => (3.0 / (x * x) - 1.0) * s / x - 3.0 * c / (x * x),
        _ if (n as f64) <= x => {
            let (mut jm1, mut j) = (j0, j1);
            for k in 1..n {
                let next = (2 * k + 1) as f64 / x * j - jm1;
                jm1 = j;
                j = next;
            }
            j
        }
        _ => miller_downward(n, x, j0),
    }
}

/// Downward recurrence normalised against `j_0`, stable for `n > x`.
fn miller_downward(n: u32, x: f64, j0: f64) -> f64 {
    let start = n + 20 + (x as u32) + (40.0 * (n as f64).sqrt()) as u32;
    let mut jp1 = 0.0;
    let mut j = 1e-300;
    let mut at_n = 0.0;
    for k in (1..=start).rev() {
        let jm1 = (2 * k + 1) as f64 / x * j - jp1;
        jp1 = j;
        j = jm1;
        if k - 1 == n {
            at_n = j;
        }
        if j.abs() > 1e250 {
            j *= 1e-250;
            jp1 *= 1e-250;
            at_n *= 1e-250;
        }
    }
    // j now holds the unnormalised j_0
    at_n * (j0 / j)
}

/// Spherical Bessel function of the second kind `y_n(x)`, `x > 0`.
pub fn sph_bessel_y(n: u32, x: f64) -> f64 {
    let (s, c) = x.sin_cos();
    let y0 = -c / x;
    if n == 0 {
        return y0;
    }
    let y1 = -c / (x * x) - s / x;
    let (mut ym1, mut y) = (y0, y1);
    for k in 1..n {
        let next = (2 * k + 1) as f64 / x * y - ym1;
        ym1 = y;
        y = next;
    }
    y
}

/// Derivative `j_n'(x)`.
pub fn sph_bessel_j_deriv(n: u32, x: f64) -> f64 {
    if n == 0 {
        return -sph_bessel_j(1, x);
    }
    if x == 0.0 {
        return if n == 1 { 1.0 / 3.0 } else { 0.0 };
    }
    sph_bessel_j(n - 1, x) - (n + 1) as f64 / x * sph_bessel_j(n, x)
}

/// Spherical Hankel function of the first kind `h_n(x) = j_n(x) + i y_n(x)`.
pub fn sph_hankel_h1(n: u32, x: f64) -> Result<Complex64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("spherical Hankel needs x > 0, got {x}")));
    }
    Ok(Complex64::new(sph_bessel_j(n, x), sph_bessel_y(n, x)))
}

/// Derivative `h_n'(x)`.
pub fn sph_hankel_h1_deriv(n: u32, x: f64) -> Result<Complex64> {
    if n == 0 {
        return sph_hankel_h1(1, x).map(|h| -h);
    }
    let hm1 = sph_hankel_h1(n - 1, x)?;
    let h = sph_hankel_h1(n, x)?;
    Ok(hm1 - h * ((n + 1) as f64 / x))
}

/// Rigid-sphere radial function
/// `b_n(kr) = 4 pi i^n [ j_n(kr) - j_n'(kr0) / h_n'(kr0) * h_n(kr) ]`.
///
/// The `i^n` plane-wave expansion describes a wave arriving from the expansion
/// direction under `exp(+i w t)` time dependence, for which the outgoing
/// scattered wave is the Hankel function of the second kind, `h_n = conj(h_n^(1))`.
/// Using `h_n^(1)` here would place the pressure maximum on the shadow side.
pub fn radial_function_rigid(n: u32, kr: f64, kr0: f64) -> Result<Complex64> {
    if !(kr0 > 0.0) {
        return Err(Error::Domain(format!("rigid radius kr0 must be > 0, got {kr0}")));
    }
    if kr < kr0 {
        return Err(Error::Domain(format!("kr = {kr} lies inside the sphere (kr0 = {kr0})")));
    }
    let scatter = Complex64::new(sph_bessel_j_deriv(n, kr0), 0.0) / sph_hankel_h1_deriv(n, kr0)?.conj();
    let field = Complex64::new(sph_bessel_j(n, kr), 0.0) - scatter * sph_hankel_h1(n, kr)?.conj();
    Ok(i_pow(n) * field * (4.0 * PI))
}

/// Open-sphere radial function `4 pi i^n j_n(kr)`.
pub fn radial_function_open(n: u32, kr: f64) -> Complex64 {
    i_pow(n) * (4.0 * PI * sph_bessel_j(n, kr))
}

fn i_pow(n: u32) -> Complex64 {
    match n % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}
