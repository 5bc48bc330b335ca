//! STFT, inverse STFT and log-Mel analysis.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Floor applied to Mel energies before the log.
pub const LOG_MEL_FLOOR: f64 = 1e-5;

const WINDOW_SUM_FLOOR: f64 = 1e-11;

/// One-sided complex spectrogram, row-major `[frames, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn frame(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [Complex64] {
        &mut self.data[i * self.bins..(i + 1) * self.bins]
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Planned forward/inverse transforms for one `(n_fft, hop)` pair.
#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if n_fft < 2 || n_fft % 2 != 0 {
            return Err(Error::config(format!("n_fft must be even and ≥ 2, got {n_fft}")));
        }
        if hop == 0 || hop > n_fft {
            return Err(Error::config(format!("hop must be in 1..={n_fft}, got {hop}")));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_fft,
            hop,
            window: hann_window(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames are centered: the signal is reflect-padded by `n_fft/2` on
    /// both sides, giving `1 + len/hop` frames.
    pub fn forward(&self, wave: &[f32]) -> Result<Spectrogram> {
        let n = wave.len();
        if n < self.n_fft {
            return Err(Error::shape(
                "stft",
                format!("signal of {n} samples is shorter than n_fft {}", self.n_fft),
            ));
        }
        let pad = self.n_fft / 2;
        let padded: Vec<f64> = (0..n + 2 * pad)
            .map(|i| {
                let j = i as isize - pad as isize;
                let j = if j < 0 {
                    -j
                } else if j >= n as isize {
                    2 * (n as isize - 1) - j
                } else {
                    j
                };
                wave[j as usize] as f64
            })
            .collect();
        let frames = 1 + n / self.hop;
        let mut spec = Spectrogram::zeros(frames, self.bins());
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            let start = f * self.hop;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + k] * self.window[k], 0.0);
            }
            self.forward.process(&mut buf);
            spec.frame_mut(f).copy_from_slice(&buf[..self.bins()]);
        }
        Ok(spec)
    }

    /// Windowed overlap-add normalized by the squared-window sum; returns the
    /// samples `[trim, trim + length)` of the full reconstruction.
    fn overlap_add(&self, spec: &Spectrogram, trim: usize, length: usize) -> Result<Vec<f32>> {
        if spec.bins != self.bins() {
            return Err(Error::shape(
                "istft",
                format!("spectrogram has {} bins, expected {}", spec.bins, self.bins()),
            ));
        }
        let total = if spec.frames == 0 {
            0
        } else {
            (spec.frames - 1) * self.hop + self.n_fft
        };
        let mut acc = vec![0.0f64; total];
        let mut wsum = vec![0.0f64; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let half = self.n_fft / 2;
        for f in 0..spec.frames {
            let frame = spec.frame(f);
            buf[0] = Complex64::new(frame[0].re, 0.0);
            buf[half] = Complex64::new(frame[half].re, 0.0);
            for k in 1..half {
                buf[k] = frame[k];
                buf[self.n_fft - k] = frame[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for k in 0..self.n_fft {
                let w = self.window[k];
                acc[start + k] += buf[k].re / self.n_fft as f64 * w;
                wsum[start + k] += w * w;
            }
        }
        Ok((trim..trim + length)
            .map(|i| match (acc.get(i), wsum.get(i)) {
                (Some(&a), Some(&w)) if w > WINDOW_SUM_FLOOR => (a / w) as f32,
                _ => 0.0,
            })
            .collect())
    }

    /// Inverse of [`Stft::forward`] for a signal of `length` samples.
    pub fn inverse(&self, spec: &Spectrogram, length: usize) -> Result<Vec<f32>> {
        self.overlap_add(spec, self.n_fft / 2, length)
    }

    /// Synthesis-side inverse with "same" padding: exactly `frames · hop`
    /// samples, trimming `(n_fft − hop)/2` from each end.
    pub fn inverse_same(&self, spec: &Spectrogram) -> Result<Vec<f32>> {
        if (self.n_fft - self.hop) % 2 != 0 {
            return Err(Error::config("n_fft − hop must be even for same-padded synthesis"));
        }
        self.overlap_add(spec, (self.n_fft - self.hop) / 2, spec.frames * self.hop)
    }
}

pub fn stft(wave: &[f32], n_fft: usize, hop: usize) -> Result<Spectrogram> {
    Stft::new(n_fft, hop)?.forward(wave)
}

pub fn istft(spec: &Spectrogram, n_fft: usize, hop: usize, length: usize) -> Result<Vec<f32>> {
    Stft::new(n_fft, hop)?.inverse(spec, length)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank `[n_mels, n_fft/2 + 1]` spanning 0 Hz to
/// Nyquist, peak height 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<Tensor> {
    if n_mels == 0 {
        return Err(Error::config("n_mels must be positive"));
    }
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros([n_mels, bins]);
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb.data_mut()[m * bins + k] = w as f32;
        }
    }
    Ok(fb)
}

/// `log(max(mel · |X|², floor))` per frame.
pub fn log_mel(wave: &[f32], n_fft: usize, hop: usize, n_mels: usize, sample_rate: u32) -> Result<Tensor> {
    let spec = stft(wave, n_fft, hop)?;
    let fb = mel_filterbank(n_mels, n_fft, sample_rate)?;
    let mut out = Tensor::zeros([spec.frames, n_mels]);
    for f in 0..spec.frames {
        let power: Vec<f64> = spec.frame(f).iter().map(|c| c.norm_sqr()).collect();
        for m in 0..n_mels {
            let e: f64 = fb
                .row(m)
                .iter()
                .zip(&power)
                .map(|(&w, &p)| w as f64 * p)
                .sum();
            out.data_mut()[f * n_mels + m] = e.max(LOG_MEL_FLOOR).ln() as f32;
        }
    }
    Ok(out)
}
