//! Surrogate "speech": amplitude-modulated, spectrally shaped noise.
//!
//! Each speaker gets its own resonances, spectral tilt and syllable timing so
//! that two surrogates are as distinguishable in time and frequency as two
//! talkers, without needing a licensed speech corpus.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Voice-like parameters of one surrogate speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    /// (center Hz, Q, linear gain) of each resonance.
    pub resonances: Vec<(f64, f64, f64)>,
    /// One-pole low-pass coefficient applied to the broadband floor.
    pub tilt: f64,
    /// Mean syllable duration in seconds.
    pub syllable: f64,
    /// Mean pause duration in seconds.
    pub pause: f64,
}

impl SpeakerProfile {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
        let f1 = rng.random_range(250.0..900.0);
        let f2 = rng.random_range(900.0..2500.0);
        let f3 = rng.random_range(2500.0..4500.0);
        let resonances = vec![
            (f1, rng.random_range(3.0..8.0), 1.0),
            (f2, rng.random_range(4.0..10.0), rng.random_range(0.4..0.9)),
            (f3, rng.random_range(5.0..12.0), rng.random_range(0.2..0.5)),
        ];
        Self {
            resonances,
            tilt: rng.random_range(0.6..0.95),
            syllable: rng.random_range(0.12..0.3),
            pause: rng.random_range(0.03..0.12),
        }
    }
}

/// Direct-form biquad band-pass with unit peak gain.
struct BandPass {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl BandPass {
    fn new(center: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * center / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

/// Syllable-like gating envelope with raised-cosine edges.
fn envelope(profile: &SpeakerProfile, rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let mut env = vec![0.0; len];
    let mut pos = (rng.random_range(0.0..0.05) * fs) as usize;
    while pos < len {
        let dur = ((profile.syllable * rng.random_range(0.5..1.5)) * fs) as usize;
        let amp = rng.random_range(0.3..1.0);
        let ramp = (dur / 4).max(1);
        for k in 0..dur.min(len - pos) {
            let edge = if k < ramp {
                0.5 - 0.5 * (PI * k as f64 / ramp as f64).cos()
            } else if k + ramp > dur {
                0.5 - 0.5 * (PI * (dur - k) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            env[pos + k] = amp * edge;
        }
        pos += dur + ((profile.pause * rng.random_range(0.3..2.0)) * fs) as usize;
    }
    env
}

/// Generates `len` samples for `profile`; deterministic in `seed`.
pub fn surrogate_utterance(profile: &SpeakerProfile, seed: u64, len: usize, fs: u32) -> Vec<f64> {
    let fs = fs as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut filters: Vec<(BandPass, f64)> = profile
        .resonances
        .iter()
        .map(|&(c, q, g)| (BandPass::new(c.min(0.45 * fs), q, fs), g))
        .collect();
    let mut low = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            low = profile.tilt * low + (1.0 - profile.tilt) * n;
            let formants: f64 = filters.iter_mut().map(|(f, g)| *g * f.tick(n)).sum();
            formants + 0.6 * low + 0.05 * n
        })
        .collect();
    let env = envelope(profile, &mut rng, len, fs);
    for (o, e) in out.iter_mut().zip(&env) {
        *o *= e;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        for o in &mut out {
            *o *= 0.05 / rms;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let p = SpeakerProfile::random(3);
        let a = surrogate_utterance(&p, 9, 32000, 16000);
        assert_eq!(a, surrogate_utterance(&p, 9, 32000, 16000));
        let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms - 0.05).abs() < 1e-12);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn speakers_differ() {
        assert_ne!(SpeakerProfile::random(1), SpeakerProfile::random(2));
    }

    #[test]
    fn has_pauses() {
        let p = SpeakerProfile::random(4);
        let a = surrogate_utterance(&p, 1, 64000, 16000);
        let silent = a.iter().filter(|v| **v == 0.0).count();
        assert!(silent > 1000, "{silent}");
    }
}
