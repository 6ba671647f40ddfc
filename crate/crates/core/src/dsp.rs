//! Shared signal-processing helpers: windows, STFT and FFT convolution.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Number of STFT frames without centering: `1 + (len - win) / hop`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        1 + (len - win) / hop
    }
}

/// Complex spectrogram of one channel, `T x (win/2 + 1)` stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }
}

/// Hann-windowed one-sided STFT of every channel.
pub fn stft(channels: &[&[f64]], win: usize, hop: usize) -> Result<Vec<Spectrogram>> {
    if hop == 0 || win < hop {
        return Err(Error::Domain(format!("need win >= hop > 0, got win={win} hop={hop}")));
    }
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let bins = win / 2 + 1;
    let mut out = Vec::with_capacity(channels.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); win];
    for ch in channels {
        if ch.len() < win {
            return Err(Error::TooShort { len: ch.len(), needed: win });
        }
        let frames = frame_count(ch.len(), win, hop);
        let mut data = Vec::with_capacity(frames * bins);
        for t in 0..frames {
            let seg = &ch[t * hop..t * hop + win];
            for (b, (&x, &w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
                *b = Complex64::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        out.push(Spectrogram { frames, bins, data });
    }
    Ok(out)
}

/// Full linear convolution `a * b` of length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let (mut fa, mut fb) = (pad(a), pad(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|c| c.re / n as f64).collect()
}
