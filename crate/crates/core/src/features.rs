//! Narrow-band network inputs and outputs.
//!
//! Every frequency of an utterance becomes one batch item: the multichannel
//! STFT sequence at that frequency, divided by the mean magnitude of the
//! reference channel, with real and imaginary parts interleaved per channel
//! as `(Re ch1, Im ch1, Re ch2, Im ch2, ...)`.

use ndarray::{Array3, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::stft::ComplexSpectrogram;

/// Floor on the per-frequency normalization factor.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Network inputs for a set of (utterance, frequency) items.
#[derive(Debug, Clone, PartialEq)]
pub struct NarrowbandBatch {
    /// `[item][2M][T]`
    pub inputs: Array3<f64>,
    /// Mean reference-channel magnitude per item.
    pub scales: Vec<f64>,
    /// `(utterance, frequency)` per item.
    pub provenance: Vec<(usize, usize)>,
}

impl NarrowbandBatch {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Concatenates batches along the item axis, renumbering utterances in order.
    pub fn concat(parts: &[NarrowbandBatch]) -> Result<NarrowbandBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("no batches to concatenate".into()))?;
        let (_, c, t) = first.inputs.dim();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut inputs = Array3::zeros((total, c, t));
        let mut scales = Vec::with_capacity(total);
        let mut provenance = Vec::with_capacity(total);
        let mut row = 0;
        for (u, p) in parts.iter().enumerate() {
            if p.inputs.dim().1 != c || p.inputs.dim().2 != t {
                return Err(Error::Shape("batches differ in channels or frames".into()));
            }
            inputs
                .slice_mut(ndarray::s![row..row + p.len(), .., ..])
                .assign(&p.inputs);
            row += p.len();
            scales.extend_from_slice(&p.scales);
            provenance.extend(p.provenance.iter().map(|&(_, f)| (u, f)));
        }
        Ok(NarrowbandBatch {
            inputs,
            scales,
            provenance,
        })
    }
}

/// Per-frequency mean magnitude of channel `ref_channel`, floored at [`SCALE_FLOOR`].
pub fn frequency_scales(s: &ComplexSpectrogram, ref_channel: usize) -> Vec<f64> {
    let t = s.n_frames().max(1) as f64;
    (0..s.n_freqs())
        .map(|f| {
            let mean = s.row(ref_channel, f).iter().map(|c| c.norm()).sum::<f64>() / t;
            mean.max(SCALE_FLOOR)
        })
        .collect()
}

/// Normalized, real-packed network input for every frequency of `s`.
pub fn pack_input(s: &ComplexSpectrogram, ref_channel: usize) -> Result<NarrowbandBatch> {
    if ref_channel >= s.n_channels() {
        return Err(Error::InvalidArgument(format!(
            "reference channel {} but spectrogram has {} channels",
            ref_channel,
            s.n_channels()
        )));
    }
    let scales = frequency_scales(s, ref_channel);
    let (m, f_n, t_n) = (s.n_channels(), s.n_freqs(), s.n_frames());
    let mut inputs = Array3::zeros((f_n, 2 * m, t_n));
    for (f, &scale) in scales.iter().enumerate() {
        for ch in 0..m {
            for (t, v) in s.row(ch, f).iter().enumerate() {
                inputs[[f, 2 * ch, t]] = v.re / scale;
                inputs[[f, 2 * ch + 1, t]] = v.im / scale;
            }
        }
    }
    Ok(NarrowbandBatch {
        inputs,
        scales,
        provenance: (0..f_n).map(|f| (0, f)).collect(),
    })
}

/// Packs per-speaker target spectra `[speaker] -> single-channel spectrogram`
/// into `[F][2N][T]`, normalized by the mixture's scales.
pub fn pack_targets(targets: &[ComplexSpectrogram], scales: &[f64]) -> Result<Array3<f64>> {
    let first = targets
        .first()
        .ok_or_else(|| Error::Shape("no targets".into()))?;
    let (f_n, t_n) = (first.n_freqs(), first.n_frames());
    if scales.len() != f_n {
        return Err(Error::Shape(format!(
            "{} scales for {} frequencies",
            scales.len(),
            f_n
        )));
    }
    let mut out = Array3::zeros((f_n, 2 * targets.len(), t_n));
    for (n, spec) in targets.iter().enumerate() {
        if spec.n_freqs() != f_n || spec.n_frames() != t_n {
            return Err(Error::Shape("target spectrograms differ in shape".into()));
        }
        for (f, &scale) in scales.iter().enumerate() {
            for (t, v) in spec.row(0, f).iter().enumerate() {
                out[[f, 2 * n, t]] = v.re / scale;
                out[[f, 2 * n + 1, t]] = v.im / scale;
            }
        }
    }
    Ok(out)
}

/// Turns one item's `[2N][T]` output into `N` complex sequences at the original level.
pub fn unpack_output(out: ArrayView2<'_, f64>, scale: f64) -> Result<Vec<Vec<Complex64>>> {
    let (rows, t_n) = out.dim();
    if rows % 2 != 0 {
        return Err(Error::Shape(format!(
            "output has {rows} rows; expected an even number (real/imag pairs)"
        )));
    }
    Ok((0..rows / 2)
        .map(|n| {
            (0..t_n)
                .map(|t| Complex64::new(out[[2 * n, t]], out[[2 * n + 1, t]]) * scale)
                .collect()
        })
        .collect())
}
