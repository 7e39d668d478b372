//! End-to-end scene synthesis: scenario, RIRs, dry sources, overlap mix.

use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::MultichannelWaveform;
use crate::error::{Error, Result};
use crate::room::{
    mix_pair, overlap_layout, sample_scenario_in, simulate_rir, spatialize, MixtureScene,
    ScenarioRanges,
};
use crate::synth::{surrogate_utterance, SpeakerProfile};

/// Supplies dry single-channel utterances.
pub trait SourceProvider {
    /// Returns at least `min_len` samples for one talker; `slot` distinguishes
    /// the talkers of a scene.
    fn utterance(&mut self, rng: &mut ChaCha8Rng, slot: usize, min_len: usize) -> Result<Vec<f64>>;
}

/// Surrogate talkers drawn from a fixed pool of speaker profiles.
#[derive(Debug, Clone)]
pub struct SyntheticSources {
    profiles: Vec<SpeakerProfile>,
    sample_rate: u32,
}

impl SyntheticSources {
    pub fn new(n_profiles: usize, seed: u64, sample_rate: u32) -> Self {
        Self {
            profiles: (0..n_profiles as u64)
                .map(|k| SpeakerProfile::random(seed.wrapping_mul(1_000_003).wrapping_add(k)))
                .collect(),
            sample_rate,
        }
    }
}

impl SourceProvider for SyntheticSources {
    fn utterance(&mut self, rng: &mut ChaCha8Rng, slot: usize, min_len: usize) -> Result<Vec<f64>> {
        // distinct talkers per slot: offset the draw by the slot index
        let n = self.profiles.len();
        let base = rng.random_range(0..n);
        let profile = &self.profiles[(base + slot * (n / 2).max(1)) % n];
        Ok(surrogate_utterance(profile, rng.random(), min_len, self.sample_rate))
    }
}

/// Utterances read from a directory tree of WAV files (first channel used).
#[derive(Debug, Clone)]
pub struct WavCorpus {
    files: Vec<PathBuf>,
    sample_rate: u32,
}

impl WavCorpus {
    pub fn open(dir: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let mut files = Vec::new();
        collect_wavs(dir.as_ref(), &mut files)?;
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no .wav files under {}",
                dir.as_ref().display()
            )));
        }
        Ok(Self { files, sample_rate })
    }
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            out.push(path);
        }
    }
    Ok(())
}

impl SourceProvider for WavCorpus {
    fn utterance(&mut self, rng: &mut ChaCha8Rng, _slot: usize, min_len: usize) -> Result<Vec<f64>> {
        let path = &self.files[rng.random_range(0..self.files.len())];
        let wav = MultichannelWaveform::read_wav(path)?;
        if wav.sample_rate != self.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "{}: sample rate {} Hz, expected {}",
                path.display(),
                wav.sample_rate,
                self.sample_rate
            )));
        }
        let x = wav.channel(0);
        if x.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: empty file", path.display())));
        }
        // loop short files, trim long ones
        Ok((0..min_len).map(|i| x[i % x.len()]).collect())
    }
}

/// Scene synthesis settings.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub ranges: ScenarioRanges,
    pub n_samples: usize,
    pub sample_rate: u32,
    pub overlap_range: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            ranges: ScenarioRanges::default(),
            n_samples: 64000,
            sample_rate: 16000,
            overlap_range: (0.1, 1.0),
        }
    }
}

/// Seed for scene `index` of a run seeded with `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds one two-speaker scene. Images are returned in speaker order
/// (`images[n]` belongs to `scenario.speaker_positions[n]`); a fair coin picks
/// which speaker leads. Scenarios whose rt60 the room cannot reach are redrawn.
pub fn synthesize_scene(
    seed: u64,
    spec: &SceneSpec,
    sources: &mut dyn SourceProvider,
) -> Result<MixtureScene> {
    let mut attempt = 0u64;
    let (scenario, rirs) = loop {
        let scn = sample_scenario_in(scene_seed(seed, attempt), 2, &spec.ranges)?;
        match simulate_rir(&scn, None, spec.sample_rate) {
            Ok(r) => break (scn, r),
            Err(e @ Error::UnachievableRt60 { .. }) => {
                warn!("scene seed {seed}: {e}; redrawing");
                attempt += 1;
                if attempt > 1000 {
                    return Err(Error::SamplingExhausted(1000));
                }
            }
            Err(e) => return Err(e),
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5_5A5A_5A5A);
    let (lo, hi) = spec.overlap_range;
    let overlap_ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let ((a0, a1), (b0, b1)) = overlap_layout(overlap_ratio, spec.n_samples);
    let leading = if rng.random_bool(0.5) { 0 } else { 1 };
    let spans = if leading == 0 {
        [a1 - a0, b1 - b0]
    } else {
        [b1 - b0, a1 - a0]
    };
    let mut images = Vec::with_capacity(2);
    for (n, &span) in spans.iter().enumerate() {
        let dry = sources.utterance(&mut rng, n, span)?;
        let dry = MultichannelWaveform::mono(spec.sample_rate, dry);
        images.push(spatialize(&dry, &rirs.rirs[n])?);
    }
    let trailing = 1 - leading;
    let mut scene = mix_pair(
        &images[leading],
        &images[trailing],
        overlap_ratio,
        spec.n_samples,
        scenario,
    )?;
    if leading == 1 {
        scene.images.swap(0, 1);
    }
    Ok(scene)
}
