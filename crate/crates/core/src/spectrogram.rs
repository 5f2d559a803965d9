//! Log-magnitude STFT frontend with mel-style binning onto a fixed grid.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: f64,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_freq_bins: usize,
    pub n_time_frames: usize,
    pub log_floor: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000.0,
            window_ms: 50.0,
            hop_ms: 25.0,
            n_freq_bins: 128,
            n_time_frames: 128,
            log_floor: 1e-5,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.window_ms > 0.0 && self.hop_ms > 0.0) {
            return Err(Error::Config("sample rate, window and hop must be positive".into()));
        }
        if self.hop_ms > self.window_ms {
            return Err(Error::Config("hop_ms must not exceed window_ms".into()));
        }
        if self.n_freq_bins == 0 || self.n_time_frames == 0 {
            return Err(Error::Config("output grid must be non-empty".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if self.window_len() < 2 || self.hop_len() < 1 {
            return Err(Error::Config("window shorter than two samples".into()));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        (self.sample_rate * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate * self.hop_ms / 1000.0).round() as usize
    }

    /// Magnitude bins of one frame, DC through Nyquist.
    pub fn raw_bins(&self) -> usize {
        self.window_len() / 2 + 1
    }

    /// Raw STFT frames for a waveform of `len` samples (no padding).
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window_len() {
            0
        } else {
            (len - self.window_len()) / self.hop_len() + 1
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Triangular filters, `[n_freq_bins][raw_bins]`, centres evenly spaced in
/// mel between 0 Hz and Nyquist. A filter too narrow to cover any raw bin
/// takes the raw bin nearest its centre with weight 1.
pub fn filterbank(cfg: &StftConfig) -> Vec<Vec<f64>> {
    let n_raw = cfg.raw_bins();
    let nyquist = cfg.sample_rate / 2.0;
    let bin_hz = cfg.sample_rate / cfg.window_len() as f64;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.n_freq_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_freq_bins + 1) as f64))
        .collect();
    (0..cfg.n_freq_bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut w: Vec<f64> = (0..n_raw)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect();
            if w.iter().all(|&v| v == 0.0) {
                let k = ((mid / bin_hz).round() as usize).min(n_raw - 1);
                w[k] = 1.0;
            }
            w
        })
        .collect()
}

/// Magnitude spectrum of every frame, `[frames][raw_bins]`.
pub fn magnitude_frames(waveform: &[f64], cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let (win, hop) = (cfg.window_len(), cfg.hop_len());
    if waveform.len() < win {
        return Err(Error::Input(format!(
            "waveform has {} samples, shorter than one {win}-sample window",
            waveform.len()
        )));
    }
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    Ok((0..cfg.frame_count(waveform.len()))
        .map(|i| {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(waveform[i * hop + j] * window[j], 0.0);
            }
            fft.process(&mut buf);
            buf[..cfg.raw_bins()].iter().map(|c| c.norm()).collect()
        })
        .collect())
}

/// `n_time_frames × n_freq_bins` log spectrogram: magnitude STFT, triangular
/// binning, average pooling (or nearest stretching) onto the time grid, then
/// `ln(max(x, log_floor))`.
pub fn stft_log_spectrogram(waveform: &[f64], cfg: &StftConfig) -> Result<Tensor> {
    let frames = magnitude_frames(waveform, cfg)?;
    let bank = filterbank(cfg);
    let binned: Vec<Vec<f64>> = frames
        .iter()
        .map(|mag| {
            bank.iter()
                .map(|w| w.iter().zip(mag).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();

    let (src, dst, nf) = (binned.len(), cfg.n_time_frames, cfg.n_freq_bins);
    let mut out = vec![0.0; dst * nf];
    for j in 0..dst {
        let row = &mut out[j * nf..(j + 1) * nf];
        if src >= dst {
            let (lo, hi) = (j * src / dst, (j + 1) * src / dst);
            for frame in &binned[lo..hi] {
                for (o, v) in row.iter_mut().zip(frame) {
                    *o += v;
                }
            }
            let inv = 1.0 / (hi - lo) as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        } else {
            row.copy_from_slice(&binned[j * src / dst]);
        }
        for o in row.iter_mut() {
            *o = o.max(cfg.log_floor).ln();
        }
    }
    Ok(Tensor::new(vec![dst, nf], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> StftConfig {
        StftConfig {
            n_freq_bins: 32,
            n_time_frames: 16,
            ..StftConfig::default()
        }
    }

    #[test]
    fn paper_frontend_frame_arithmetic() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.window_len(), 400);
        assert_eq!(cfg.hop_len(), 200);
        assert_eq!(cfg.frame_count(10 * 8000), (10 * 8000 - 400) / 200 + 1);
        assert_eq!(cfg.frame_count(10 * 8000), 399);
        assert_eq!(cfg.raw_bins(), 201);
        let out = stft_log_spectrogram(&vec![0.1; 80_000], &cfg).unwrap();
        assert_eq!(out.shape(), &[128, 128]);
    }

    #[test]
    fn silence_sits_at_the_floor() {
        let cfg = small_cfg();
        let out = stft_log_spectrogram(&vec![0.0; 4000], &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == cfg.log_floor.ln()));
    }

    #[test]
    fn sinusoid_peaks_in_its_bin() {
        let cfg = small_cfg();
        let bank = filterbank(&cfg);
        for &hz in &[180.0, 440.0, 1000.0, 2500.0, 3600.0] {
            let wave: Vec<f64> = (0..8000)
                .map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / cfg.sample_rate).sin())
                .collect();
            let spec = stft_log_spectrogram(&wave, &cfg).unwrap();
            let mean_bin = |f: usize| {
                (0..cfg.n_time_frames)
                    .map(|t| spec.data()[t * cfg.n_freq_bins + f])
                    .sum::<f64>()
            };
            let got = (0..cfg.n_freq_bins)
                .max_by(|&a, &b| mean_bin(a).total_cmp(&mean_bin(b)))
                .unwrap();

            // Oracle: direct DFT of the first windowed frame, then the filter
            // with the largest weight on the peak raw bin.
            let win = cfg.window_len();
            let window = hann(win);
            let dft_mag = |k: usize| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, w) in window.iter().enumerate() {
                    let phase = -2.0 * std::f64::consts::PI * (k * n) as f64 / win as f64;
                    re += wave[n] * w * phase.cos();
                    im += wave[n] * w * phase.sin();
                }
                (re * re + im * im).sqrt()
            };
            let peak = (0..cfg.raw_bins())
                .max_by(|&a, &b| dft_mag(a).total_cmp(&dft_mag(b)))
                .unwrap();
            let expected = (0..cfg.n_freq_bins)
                .max_by(|&a, &b| bank[a][peak].total_cmp(&bank[b][peak]))
                .unwrap();
            assert_eq!(got, expected, "{hz} Hz");
        }
    }

    #[test]
    fn short_waveform_and_bad_config_are_errors() {
        let cfg = small_cfg();
        assert!(matches!(stft_log_spectrogram(&[0.0; 10], &cfg), Err(Error::Input(_))));
        let bad = StftConfig {
            hop_ms: 80.0,
            ..small_cfg()
        };
        assert!(matches!(
            stft_log_spectrogram(&[0.0; 4000], &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_shape_is_fixed_for_any_length() {
        let cfg = small_cfg();
        for len in [400, 401, 999, 3000, 12345] {
            let wave: Vec<f64> = (0..len).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
            assert_eq!(stft_log_spectrogram(&wave, &cfg).unwrap().shape(), &[16, 32]);
        }
    }
}
