//! Training examples: normalized network inputs plus the targets both
//! training objectives need.

use ndarray::Array3;

use crate::audio::MultichannelWaveform;
use crate::error::{Error, Result};
use crate::features::{pack_input, pack_targets};
use crate::manifest::Manifest;
use crate::room::MixtureScene;
use crate::stft::{stft, StftConfig};

/// One utterance ready for the separator.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// `[F][2M][T]`, normalized per frequency.
    pub input: Array3<f64>,
    /// Per-frequency normalization of the reference channel.
    pub scales: Vec<f64>,
    /// Reference-channel spatial image of each speaker.
    pub targets: Vec<Vec<f64>>,
    /// Target spectra packed like the network output, `[F][2N][T]`.
    pub packed_targets: Array3<f64>,
}

impl Example {
    pub fn n_samples(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
}

pub fn prepare_example(
    id: impl Into<String>,
    mixture: &MultichannelWaveform,
    images: &[MultichannelWaveform],
    ref_channel: usize,
    cfg: &StftConfig,
) -> Result<Example> {
    let id = id.into();
    if ref_channel >= mixture.n_channels() {
        return Err(Error::InvalidArgument(format!(
            "{id}: reference channel {ref_channel} but mixture has {} channels",
            mixture.n_channels()
        )));
    }
    for img in images {
        if img.len() != mixture.len() || img.n_channels() <= ref_channel {
            return Err(Error::Shape(format!(
                "{id}: image has {} channels x {} samples, mixture {} x {}",
                img.n_channels(),
                img.len(),
                mixture.n_channels(),
                mixture.len()
            )));
        }
    }
    let spec = stft(mixture, cfg)?;
    let batch = pack_input(&spec, ref_channel)?;
    let targets: Vec<Vec<f64>> = images.iter().map(|i| i.channel(ref_channel).to_vec()).collect();
    let target_specs = targets
        .iter()
        .map(|t| stft(&MultichannelWaveform::mono(mixture.sample_rate, t.clone()), cfg))
        .collect::<Result<Vec<_>>>()?;
    let packed_targets = pack_targets(&target_specs, &batch.scales)?;
    Ok(Example {
        id,
        input: batch.inputs,
        scales: batch.scales,
        targets,
        packed_targets,
    })
}

pub fn example_from_scene(id: impl Into<String>, scene: &MixtureScene, ref_channel: usize, cfg: &StftConfig) -> Result<Example> {
    prepare_example(id, &scene.mixture, &scene.images, ref_channel, cfg)
}

/// Indexed access to examples.
pub trait ExampleSource {
    fn len(&self) -> usize;
    fn example(&self, i: usize) -> Result<Example>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }
    fn example(&self, i: usize) -> Result<Example> {
        Ok(self[i].clone())
    }
}

impl ExampleSource for Vec<Example> {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }
    fn example(&self, i: usize) -> Result<Example> {
        Ok(self[i].clone())
    }
}

/// Examples read from disk on demand.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    pub manifest: Manifest,
    pub ref_channel: usize,
    pub stft: StftConfig,
}

impl ExampleSource for ManifestDataset {
    fn len(&self) -> usize {
        self.manifest.len()
    }
    fn example(&self, i: usize) -> Result<Example> {
        let (mix, images) = self.manifest.load(i)?;
        prepare_example(self.manifest.entries[i].id.clone(), &mix, &images, self.ref_channel, &self.stft)
    }
}
