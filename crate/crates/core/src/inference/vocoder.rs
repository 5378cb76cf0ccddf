//! Griffin-Lim mel inversion.
//!
//! The mel matrix is lifted back to a linear magnitude spectrogram through
//! the Moore-Penrose pseudo-inverse of the mel filter bank (`M^T (M M^T)^-1`,
//! exact for a full-row-rank bank), then phase is recovered by iterating
//! STFT/ISTFT round trips from a fixed all-zero initial phase, which keeps
//! the output deterministic.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::path::Path;

use super::SynthesisError;
use crate::corpus::AudioFrameSpec;

pub const DEFAULT_N_FFT: usize = 1024;
pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 32;

/// Triangular mel filter bank, `n_mels x (n_fft/2 + 1)`, HTK mel scale.
pub fn mel_filter_bank(spec: &AudioFrameSpec, n_fft: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let f_max = spec.sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let n_mels = spec.n_mels;
    let mel_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = spec.sample_rate as f64 / n_fft as f64;
    let mut bank = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (mel_points[m], mel_points[m + 1], mel_points[m + 2]);
        for bin in 0..n_bins {
            let f = bin as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            bank[(m, bin)] = w;
        }
    }
    bank
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Solve `A X = B` for square `A` by Gaussian elimination with partial
/// pivoting. Errors on (numerically) singular systems.
fn solve_linear(
    mut a: Array2<f64>,
    mut b: Array2<f64>,
) -> Result<Array2<f64>, SynthesisError> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.nrows(), n);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[(row, col)].abs() > a[(pivot, col)].abs() {
                pivot = row;
            }
        }
        if a[(pivot, col)].abs() < 1e-12 {
            return Err(SynthesisError::InvalidMelBasis(
                "mel gram matrix is singular (degenerate filters)".into(),
            ));
        }
        if pivot != col {
            for j in 0..n {
                a.swap((col, j), (pivot, j));
            }
            for j in 0..b.ncols() {
                b.swap((col, j), (pivot, j));
            }
        }
        let diag = a[(col, col)];
        for row in col + 1..n {
            let factor = a[(row, col)] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[(row, j)] -= factor * a[(col, j)];
            }
            for j in 0..b.ncols() {
                b[(row, j)] -= factor * b[(col, j)];
            }
        }
    }
    let mut x = Array2::zeros(b.dim());
    for col in (0..n).rev() {
        for j in 0..b.ncols() {
            let mut acc = b[(col, j)];
            for k in col + 1..n {
                acc -= a[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = acc / a[(col, col)];
        }
    }
    Ok(x)
}

/// `pinv(M) = M^T (M M^T)^-1` for a full-row-rank bank `M`.
fn mel_pseudo_inverse(bank: &Array2<f64>) -> Result<Array2<f64>, SynthesisError> {
    if bank.rows().into_iter().any(|r| r.sum() <= 0.0) {
        return Err(SynthesisError::InvalidMelBasis(
            "a mel filter has no support".into(),
        ));
    }
    let gram = bank.dot(&bank.t());
    let x = solve_linear(gram, bank.clone())?; // (M M^T)^-1 M
    Ok(x.t().to_owned()) // M^T (M M^T)^-1
}

fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    planner_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    planner_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Stft {
    fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann_window(n_fft),
            planner_fwd: planner.plan_fft_forward(n_fft),
            planner_inv: planner.plan_fft_inverse(n_fft),
        }
    }

    /// Centered STFT with zero padding; `n_frames` columns.
    fn forward(&self, x: &[f64], n_frames: usize) -> Vec<Vec<Complex<f64>>> {
        let half = self.n_fft / 2;
        (0..n_frames)
            .map(|t| {
                let center = t * self.hop;
                let mut buf: Vec<Complex<f64>> = (0..self.n_fft)
                    .map(|i| {
                        let idx = center as isize + i as isize - half as isize;
                        let v = if idx < 0 || idx as usize >= x.len() {
                            0.0
                        } else {
                            x[idx as usize]
                        };
                        Complex::new(v * self.window[i], 0.0)
                    })
                    .collect();
                self.planner_fwd.process(&mut buf);
                buf.truncate(self.n_fft / 2 + 1);
                buf
            })
            .collect()
    }

    /// Windowed overlap-add inverse; output cropped to `n_frames * hop`.
    fn inverse(&self, frames: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let n_frames = frames.len();
        let out_len = n_frames * self.hop;
        let half = self.n_fft / 2;
        let padded_len = out_len + self.n_fft;
        let mut acc = vec![0.0f64; padded_len];
        let mut norm = vec![0.0f64; padded_len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for (t, spectrum) in frames.iter().enumerate() {
            // Rebuild the full Hermitian spectrum from the half kept.
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i <= self.n_fft / 2 {
                    spectrum[i]
                } else {
                    spectrum[self.n_fft - i].conj()
                };
            }
            self.planner_inv.process(&mut buf);
            let start = t * self.hop; // == center - half + half padding offset
            for i in 0..self.n_fft {
                let w = self.window[i];
                acc[start + i] += buf[i].re / self.n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        // Frame t writes at padded offset t*hop, representing signal sample
        // t*hop - half; signal sample i therefore lives at padded index
        // i + half.
        (0..out_len)
            .map(|i| {
                let idx = i + half;
                if norm[idx] > 1e-9 {
                    acc[idx] / norm[idx]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Invert a mel spectrogram (`n_frames x n_mels`) to a waveform of exactly
/// `n_frames * hop_length` samples.
pub fn vocode_griffin_lim(
    mel: &Array2<f64>,
    spec: &AudioFrameSpec,
    iterations: usize,
) -> Result<Vec<f64>, SynthesisError> {
    assert!(iterations >= 1, "griffin-lim needs at least one iteration");
    if mel.ncols() != spec.n_mels {
        return Err(SynthesisError::Model(
            crate::model::ModelError::ShapeMismatch(format!(
                "mel has {} channels, frame spec says {}",
                mel.ncols(),
                spec.n_mels
            )),
        ));
    }
    let n_fft = DEFAULT_N_FFT;
    let bank = mel_filter_bank(spec, n_fft);
    let pinv = mel_pseudo_inverse(&bank)?;
    let n_frames = mel.nrows();
    let n_bins = n_fft / 2 + 1;

    // Per-frame linear magnitudes, clamped to non-negative.
    let magnitudes: Vec<Vec<f64>> = (0..n_frames)
        .map(|t| {
            let mel_row = mel.row(t);
            (0..n_bins)
                .map(|b| {
                    let v: f64 = pinv
                        .row(b)
                        .iter()
                        .zip(mel_row.iter())
                        .map(|(&w, &m)| w * m)
                        .sum();
                    v.max(0.0)
                })
                .collect()
        })
        .collect();

    let stft = Stft::new(n_fft, spec.hop_length as usize);
    // Zero initial phase.
    let mut frames: Vec<Vec<Complex<f64>>> = magnitudes
        .iter()
        .map(|mag| mag.iter().map(|&m| Complex::new(m, 0.0)).collect())
        .collect();
    let mut waveform = stft.inverse(&frames);
    for _ in 0..iterations {
        let analyzed = stft.forward(&waveform, n_frames);
        for (target, estimate) in frames.iter_mut().zip(&analyzed) {
            for (f, e) in target.iter_mut().zip(estimate) {
                let phase = if e.norm() > 0.0 {
                    e / e.norm()
                } else {
                    Complex::new(1.0, 0.0)
                };
                *f = phase * f.norm();
            }
        }
        waveform = stft.inverse(&frames);
    }
    debug_assert_eq!(waveform.len(), n_frames * spec.hop_length as usize);
    Ok(waveform)
}

/// 16-bit PCM mono WAV at the given sample rate; samples clamped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), SynthesisError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| SynthesisError::Io(std::io::Error::other(e)))?;
    for &s in samples {
        let clamped = s.clamp(-1.0, 1.0);
        writer
            .write_sample((clamped * i16::MAX as f64) as i16)
            .map_err(|e| SynthesisError::Io(std::io::Error::other(e)))?;
    }
    writer
        .finalize()
        .map_err(|e| SynthesisError::Io(std::io::Error::other(e)))?;
    Ok(())
}
