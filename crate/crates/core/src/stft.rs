//! Short-time Fourier transform with a periodic Hann window and weighted
//! overlap-add resynthesis.
//!
//! Signals are zero-padded by `window_length - hop` samples at the head so that
//! every input sample is covered by the same number of frames. The frame count
//! for a signal of `len` samples is `ceil((len + pad) / hop)`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::MultichannelWaveform;
use crate::error::{Error, Result};

/// Analysis/synthesis parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 512,
            hop: 256,
            sample_rate: 16000,
        }
    }
}

impl StftConfig {
    pub fn new(window_length: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let cfg = Self {
            window_length,
            hop,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 || self.window_length % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "window length must be even and >= 2, got {}",
                self.window_length
            )));
        }
        if self.hop == 0 || self.window_length % self.hop != 0 {
            return Err(Error::InvalidArgument(format!(
                "hop {} must divide window length {}",
                self.hop, self.window_length
            )));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Zero padding applied before the first sample.
    pub fn pad(&self) -> usize {
        self.window_length - self.hop
    }

    pub fn n_frames(&self, len: usize) -> usize {
        (len + self.pad()).div_ceil(self.hop)
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n).cos())
            .collect()
    }
}

/// Complex STFT coefficients indexed `[channel][frequency][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    n_channels: usize,
    n_freqs: usize,
    n_frames: usize,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn zeros(config: StftConfig, n_channels: usize, n_frames: usize) -> Self {
        let n_freqs = config.n_freqs();
        Self {
            data: vec![Complex64::new(0.0, 0.0); n_channels * n_freqs * n_frames],
            n_channels,
            n_freqs,
            n_frames,
            config,
        }
    }

    pub fn from_vec(
        config: StftConfig,
        n_channels: usize,
        n_frames: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        let n_freqs = config.n_freqs();
        if data.len() != n_channels * n_freqs * n_frames {
            return Err(Error::Shape(format!(
                "spectrogram data has {} values, expected {}x{}x{}",
                data.len(),
                n_channels,
                n_freqs,
                n_frames
            )));
        }
        Ok(Self {
            data,
            n_channels,
            n_freqs,
            n_frames,
            config,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_freqs(&self) -> usize {
        self.n_freqs
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    #[inline]
    fn offset(&self, m: usize, f: usize) -> usize {
        (m * self.n_freqs + f) * self.n_frames
    }

    /// The time sequence of one channel at one frequency.
    pub fn row(&self, m: usize, f: usize) -> &[Complex64] {
        let o = self.offset(m, f);
        &self.data[o..o + self.n_frames]
    }

    pub fn row_mut(&mut self, m: usize, f: usize) -> &mut [Complex64] {
        let o = self.offset(m, f);
        let t = self.n_frames;
        &mut self.data[o..o + t]
    }

    pub fn get(&self, m: usize, f: usize, t: usize) -> Complex64 {
        self.data[self.offset(m, f) + t]
    }

    pub fn set(&mut self, m: usize, f: usize, t: usize, v: Complex64) {
        let o = self.offset(m, f) + t;
        self.data[o] = v;
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// A single-channel spectrogram holding channel `m`.
    pub fn channel(&self, m: usize) -> ComplexSpectrogram {
        let o = self.offset(m, 0);
        let len = self.n_freqs * self.n_frames;
        ComplexSpectrogram {
            data: self.data[o..o + len].to_vec(),
            n_channels: 1,
            n_freqs: self.n_freqs,
            n_frames: self.n_frames,
            config: self.config.clone(),
        }
    }

    /// Stacks single-channel spectrograms into one multichannel spectrogram.
    pub fn stack(parts: &[ComplexSpectrogram]) -> Result<ComplexSpectrogram> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * parts.len());
        let mut n_channels = 0;
        for p in parts {
            if p.n_freqs != first.n_freqs || p.n_frames != first.n_frames {
                return Err(Error::Shape("stacked spectrograms differ in shape".into()));
            }
            data.extend_from_slice(&p.data);
            n_channels += p.n_channels;
        }
        ComplexSpectrogram::from_vec(first.config.clone(), n_channels, first.n_frames, data)
    }
}

/// Reusable FFT plans and window for one [`StftConfig`].
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(cfg.window_length);
        let inverse = planner.plan_fft_inverse(cfg.window_length);
        Ok(Self {
            window: cfg.window(),
            cfg,
            forward,
            inverse,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Forward transform of one channel, returned as `[frequency][frame]` row-major.
    pub fn analyze(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        let n = self.cfg.window_length;
        if x.len() < n {
            return Err(Error::SignalTooShort {
                len: x.len(),
                min: n,
            });
        }
        let hop = self.cfg.hop;
        let pad = self.cfg.pad() as isize;
        let n_frames = self.cfg.n_frames(x.len());
        let n_freqs = self.cfg.n_freqs();
        let mut out = vec![Complex64::new(0.0, 0.0); n_freqs * n_frames];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let start = (t * hop) as isize - pad;
            for (k, b) in buf.iter_mut().enumerate() {
                let i = start + k as isize;
                let s = if i >= 0 && (i as usize) < x.len() {
                    x[i as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(s * self.window[k], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..n_freqs {
                out[f * n_frames + t] = buf[f];
            }
        }
        Ok(out)
    }

    /// Inverse transform of one `[frequency][frame]` block into `out_length` samples.
    pub fn synthesize(&self, spec: &[Complex64], n_frames: usize, out_length: usize) -> Result<Vec<f64>> {
        let n = self.cfg.window_length;
        let n_freqs = self.cfg.n_freqs();
        if spec.len() != n_freqs * n_frames {
            return Err(Error::Shape(format!(
                "spectrum block has {} values, expected {}x{}",
                spec.len(),
                n_freqs,
                n_frames
            )));
        }
        let hop = self.cfg.hop;
        let pad = self.cfg.pad();
        let padded_len = (n_frames.max(1) - 1) * hop + n;
        let mut acc = vec![0.0; padded_len];
        let mut wsum = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / n as f64;
        for t in 0..n_frames {
            self.hermitian_fill(&mut buf, |f| spec[f * n_frames + t]);
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * hop;
            for k in 0..n {
                acc[start + k] += buf[k].re * scale * self.window[k];
                wsum[start + k] += self.window[k] * self.window[k];
            }
        }
        Ok((0..out_length)
            .map(|i| {
                let j = i + pad;
                if j < padded_len && wsum[j] > 1e-10 {
                    acc[j] / wsum[j]
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Adjoint of [`Stft::synthesize`]: maps a gradient with respect to the
    /// output samples to the gradient with respect to the real and imaginary
    /// parts of each coefficient, packed as `d/dRe + i d/dIm`.
    pub fn synthesize_adjoint(&self, grad: &[f64], n_frames: usize) -> Vec<Complex64> {
        let n = self.cfg.window_length;
        let n_freqs = self.cfg.n_freqs();
        let hop = self.cfg.hop;
        let pad = self.cfg.pad();
        let padded_len = (n_frames.max(1) - 1) * hop + n;
        let mut wsum = vec![0.0; padded_len];
        for t in 0..n_frames {
            for k in 0..n {
                wsum[t * hop + k] += self.window[k] * self.window[k];
            }
        }
        let mut gp = vec![0.0; padded_len];
        for (i, &g) in grad.iter().enumerate() {
            let j = i + pad;
            if j < padded_len && wsum[j] > 1e-10 {
                gp[j] = g / wsum[j];
            }
        }
        let mut out = vec![Complex64::new(0.0, 0.0); n_freqs * n_frames];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        let inv_n = 1.0 / n as f64;
        for t in 0..n_frames {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(gp[t * hop + k] * self.window[k], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..n_freqs {
                let g = if f == 0 || f == n_freqs - 1 {
                    Complex64::new(buf[f].re * inv_n, 0.0)
                } else {
                    buf[f] * (2.0 * inv_n)
                };
                out[f * n_frames + t] = g;
            }
        }
        out
    }

    /// Full Hermitian spectrum from the one-sided half; imaginary parts of the
    /// DC and Nyquist bins are dropped.
    fn hermitian_fill(&self, buf: &mut [Complex64], half: impl Fn(usize) -> Complex64) {
        let n = self.cfg.window_length;
        let n_freqs = self.cfg.n_freqs();
        for f in 0..n_freqs {
            let mut v = half(f);
            if f == 0 || f == n_freqs - 1 {
                v.im = 0.0;
            }
            buf[f] = v;
            if f > 0 && f < n_freqs - 1 {
                buf[n - f] = v.conj();
            }
        }
    }
}

/// Forward STFT of every channel.
pub fn stft(x: &MultichannelWaveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let plan = Stft::new(cfg.clone())?;
    let n_frames = cfg.n_frames(x.len());
    let mut data = Vec::with_capacity(x.n_channels() * cfg.n_freqs() * n_frames);
    for ch in &x.channels {
        data.extend(plan.analyze(ch)?);
    }
    ComplexSpectrogram::from_vec(cfg.clone(), x.n_channels(), n_frames, data)
}

/// Inverse STFT of every channel, truncated or zero-padded to `out_length`.
pub fn istft(
    s: &ComplexSpectrogram,
    cfg: &StftConfig,
    out_length: usize,
) -> Result<MultichannelWaveform> {
    if s.config.window_length != cfg.window_length || s.config.hop != cfg.hop {
        return Err(Error::Shape(format!(
            "spectrogram was built with window {} / hop {}, asked to invert with {} / {}",
            s.config.window_length, s.config.hop, cfg.window_length, cfg.hop
        )));
    }
    let plan = Stft::new(cfg.clone())?;
    let block = s.n_freqs() * s.n_frames();
    let channels = (0..s.n_channels())
        .map(|m| plan.synthesize(&s.data()[m * block..(m + 1) * block], s.n_frames(), out_length))
        .collect::<Result<Vec<_>>>()?;
    MultichannelWaveform::new(cfg.sample_rate, channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Brute-force DFT of the windowed frame containing padded offset `start`.
    fn dft_frame(x: &[f64], cfg: &StftConfig, t: usize) -> Vec<Complex64> {
        let n = cfg.window_length;
        let w = cfg.window();
        let start = (t * cfg.hop) as isize - cfg.pad() as isize;
        (0..cfg.n_freqs())
            .map(|f| {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    let i = start + k as isize;
                    if i < 0 || i as usize >= x.len() {
                        continue;
                    }
                    let ang = -2.0 * PI * (f * k) as f64 / n as f64;
                    acc += Complex64::from_polar(x[i as usize] * w[k], ang);
                }
                acc
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn frame_count_and_bins() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_freqs(), 257);
        assert_eq!(cfg.n_frames(64000), 251);
        let s = stft(&MultichannelWaveform::zeros(16000, 1, 64000), &cfg).unwrap();
        assert_eq!(s.n_freqs(), 257);
        assert_eq!(s.n_frames(), 251);
        assert!(s.data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn short_signal_rejected() {
        let cfg = StftConfig::default();
        let err = stft(&MultichannelWaveform::zeros(16000, 1, 511), &cfg).unwrap_err();
        assert!(err.to_string().contains("signal too short"));
    }

    #[test]
    fn hop_must_divide_window() {
        assert!(StftConfig::new(512, 200, 16000).is_err());
    }

    #[test]
    fn impulse_gives_flat_magnitude() {
        let cfg = StftConfig::default();
        let mut x = vec![0.0; 4096];
        x[256] = 1.0;
        let plan = Stft::new(cfg.clone()).unwrap();
        let s = plan.analyze(&x).unwrap();
        let n_frames = cfg.n_frames(x.len());
        let w = cfg.window();
        // padded index of the impulse is 512; frames 1 and 2 contain it
        for t in [1usize, 2] {
            let offset = 512 - t * cfg.hop;
            for f in 0..cfg.n_freqs() {
                let mag = s[f * n_frames + t].norm();
                assert!((mag - w[offset]).abs() < 1e-12, "t={t} f={f}");
            }
        }
    }

    #[test]
    fn sinusoid_matches_direct_dft() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..16000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16000.0).sin())
            .collect();
        let plan = Stft::new(cfg.clone()).unwrap();
        let s = plan.analyze(&x).unwrap();
        let n_frames = cfg.n_frames(x.len());
        for t in [3usize, 20, 40] {
            let oracle = dft_frame(&x, &cfg, t);
            let peak = (0..cfg.n_freqs())
                .max_by(|&a, &b| oracle[a].norm().total_cmp(&oracle[b].norm()))
                .unwrap();
            assert_eq!(peak, 32);
            let scale = oracle[32].norm();
            for f in 0..cfg.n_freqs() {
                let d = (s[f * n_frames + t] - oracle[f]).norm();
                assert!(d <= 1e-10 * scale, "t={t} f={f} diff={d}");
            }
        }
    }

    #[test]
    fn round_trip_white_noise() {
        let cfg = StftConfig::default();
        let x = noise(64000, 7);
        let w = MultichannelWaveform::mono(16000, x.clone());
        let y = istft(&stft(&w, &cfg).unwrap(), &cfg, x.len()).unwrap();
        assert!(rel_err(&y.channels[0], &x) < 1e-12);
        let lo = cfg.window_length;
        let hi = x.len() - cfg.window_length;
        assert!(rel_err(&y.channels[0][lo..hi], &x[lo..hi]) < 1e-6);
    }

    #[test]
    fn dc_reconstructs_to_one() {
        let cfg = StftConfig::default();
        let w = MultichannelWaveform::mono(16000, vec![1.0; 8000]);
        let y = istft(&stft(&w, &cfg).unwrap(), &cfg, 8000).unwrap();
        assert!(y.channels[0].iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn zero_spectrogram_inverts_to_zero() {
        let cfg = StftConfig::default();
        let s = ComplexSpectrogram::zeros(cfg.clone(), 2, 30);
        let y = istft(&s, &cfg, 7000).unwrap();
        assert_eq!(y.len(), 7000);
        assert!(y.channels.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_config_rejected() {
        let cfg = StftConfig::default();
        let s = ComplexSpectrogram::zeros(cfg, 1, 10);
        assert!(istft(&s, &StftConfig::new(256, 128, 16000).unwrap(), 100).is_err());
    }

    #[test]
    fn windowed_parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = noise(4096, 3);
        let plan = Stft::new(cfg.clone()).unwrap();
        let s = plan.analyze(&x).unwrap();
        let n_frames = cfg.n_frames(x.len());
        let w = cfg.window();
        let n = cfg.window_length as f64;
        for t in 0..n_frames {
            let start = (t * cfg.hop) as isize - cfg.pad() as isize;
            let time_energy: f64 = (0..cfg.window_length)
                .map(|k| {
                    let i = start + k as isize;
                    if i < 0 || i as usize >= x.len() {
                        0.0
                    } else {
                        (x[i as usize] * w[k]).powi(2)
                    }
                })
                .sum();
            // one-sided spectrum: interior bins count twice
            let freq_energy: f64 = (0..cfg.n_freqs())
                .map(|f| {
                    let e = s[f * n_frames + t].norm_sqr();
                    if f == 0 || f == cfg.n_freqs() - 1 {
                        e
                    } else {
                        2.0 * e
                    }
                })
                .sum::<f64>()
                / n;
            assert!((time_energy - freq_energy).abs() <= 1e-8 * time_energy.max(1e-300));
        }
    }

    #[test]
    fn synthesis_adjoint_matches_inner_product() {
        // <synthesize(S), g> == <S, adjoint(g)> in the real inner product on (Re, Im)
        let cfg = StftConfig::new(16, 8, 16000).unwrap();
        let plan = Stft::new(cfg.clone()).unwrap();
        let len = 100;
        let n_frames = cfg.n_frames(len);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<Complex64> = (0..cfg.n_freqs() * n_frames)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let g = noise(len, 12);
        let y = plan.synthesize(&s, n_frames, len).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = plan.synthesize_adjoint(&g, n_frames);
        let rhs: f64 = s.iter().zip(&adj).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    proptest::proptest! {
        #[test]
        fn stft_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let cfg = StftConfig::new(64, 32, 16000).unwrap();
            let x = noise(700, seed);
            let y = noise(700, seed + 1);
            let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let plan = Stft::new(cfg).unwrap();
            let (sx, sy, sz) = (plan.analyze(&x).unwrap(), plan.analyze(&y).unwrap(), plan.analyze(&z).unwrap());
            let scale: f64 = sz.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt().max(1e-12);
            let err: f64 = sx.iter().zip(&sy).zip(&sz)
                .map(|((p, q), r)| (p * a + q * b - r).norm_sqr()).sum::<f64>().sqrt();
            proptest::prop_assert!(err <= 1e-10 * scale);
        }

        #[test]
        fn istft_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let cfg = StftConfig::new(64, 32, 16000).unwrap();
            let plan = Stft::new(cfg.clone()).unwrap();
            let n_frames = 12;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_spec = || -> Vec<Complex64> {
                (0..cfg.n_freqs() * n_frames)
                    .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect()
            };
            let (s1, s2) = (rand_spec(), rand_spec());
            let s3: Vec<Complex64> = s1.iter().zip(&s2).map(|(p, q)| p * a + q * b).collect();
            let len = 300;
            let y1 = plan.synthesize(&s1, n_frames, len).unwrap();
            let y2 = plan.synthesize(&s2, n_frames, len).unwrap();
            let y3 = plan.synthesize(&s3, n_frames, len).unwrap();
            let scale: f64 = y3.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let err: f64 = y1.iter().zip(&y2).zip(&y3)
                .map(|((p, q), r)| (a * p + b * q - r).powi(2)).sum::<f64>().sqrt();
            proptest::prop_assert!(err <= 1e-10 * scale);
        }
    }
}
