//! Inference: mixture in, one waveform per speaker out.

use ndarray::{s, Array3};
use num_complex::Complex64;

use crate::audio::MultichannelWaveform;
use crate::baselines::{align_permutations_correlation, FrequencyPermutationMap};
use crate::error::{Error, Result};
use crate::features::{pack_input, unpack_output};
use crate::fpit::assemble_fullband;
use crate::model::{forward, ModelParams, Real};
use crate::stft::{stft, Stft, StftConfig};

/// Frequencies per forward pass during inference; bounds activation memory.
pub const FREQ_CHUNK: usize = 64;

/// How per-frequency output slots are tied together across frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    /// Slot `k` at every frequency is speaker `k` (fPIT-trained models).
    #[default]
    None,
    /// Reorder slots by magnitude-envelope correlation.
    Correlation,
}

/// Separated speakers and the intermediate per-frequency estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub waveforms: Vec<Vec<f64>>,
    /// `[F][N][T]` after alignment, at the mixture's level.
    pub per_freq: Vec<Vec<Vec<Complex64>>>,
    pub alignment: FrequencyPermutationMap,
}

/// Network outputs `[F][2N][T]` for a normalized input `[F][2M][T]`.
pub fn network_outputs<F: Real>(params: &ModelParams<F>, input: &Array3<f64>) -> Result<Array3<f64>> {
    let (f_n, _, t_n) = input.dim();
    let mut out = Array3::zeros((f_n, params.shape.n_outputs, t_n));
    let mut start = 0;
    while start < f_n {
        let end = (start + FREQ_CHUNK).min(f_n);
        let chunk = input
            .slice(s![start..end, .., ..])
            .mapv(|v| F::from_f64(v).expect("finite input"));
        let (y, _) = forward(params, chunk.view())?;
        out.slice_mut(s![start..end, .., ..])
            .assign(&y.mapv(|v| v.to_f64().expect("finite output")));
        start = end;
    }
    Ok(out)
}

/// Runs the full pipeline: STFT, normalization, network, rescaling,
/// optional alignment, full-band assembly and inverse STFT.
pub fn separate<F: Real>(
    params: &ModelParams<F>,
    mixture: &MultichannelWaveform,
    ref_channel: usize,
    cfg: &StftConfig,
    alignment: Alignment,
) -> Result<Separation> {
    let expected = params.shape.n_inputs / 2;
    if mixture.n_channels() != expected {
        return Err(Error::InvalidArgument(format!(
            "mixture has {} channels; the model expects M = {expected}",
            mixture.n_channels()
        )));
    }
    let spec = stft(mixture, cfg)?;
    let batch = pack_input(&spec, ref_channel)?;
    let out = network_outputs(params, &batch.inputs)?;
    let per_freq = out
        .outer_iter()
        .zip(&batch.scales)
        .map(|(o, &sc)| unpack_output(o, sc))
        .collect::<Result<Vec<_>>>()?;
    let n = params.shape.n_speakers();
    let map = match alignment {
        Alignment::None => FrequencyPermutationMap::identity(per_freq.len(), n),
        Alignment::Correlation => align_permutations_correlation(&per_freq)?,
    };
    let per_freq = map.apply(&per_freq);
    let plan = Stft::new(cfg.clone())?;
    let est = assemble_fullband(&per_freq, &plan, mixture.len())?;
    Ok(Separation {
        waveforms: est.waveforms,
        per_freq,
        alignment: map,
    })
}
