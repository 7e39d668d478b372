//! Full-band permutation invariant training criterion.
//!
//! Output slot `k` of the network at every frequency is bound into one
//! full-band spectrum, inverted to a waveform and scored against each target
//! with negative SI-SDR. The permutation with the lowest mean loss wins.

use ndarray::{Array2, Array3, ArrayView3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::features::unpack_output;
use crate::stft::{ComplexSpectrogram, Stft};

/// Clamp applied to the SI-SDR energy ratio; bounds the loss to about +-80 dB.
pub const SI_SDR_EPS: f64 = 1e-8;

/// Largest speaker count for exhaustive permutation search.
pub const MAX_PIT_SPEAKERS: usize = 6;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

struct Projection {
    alpha: f64,
    num: f64,
    den: f64,
    ratio: f64,
    clamped: bool,
}

fn project(reference: &[f64], est: &[f64]) -> Result<Projection> {
    if reference.len() != est.len() {
        return Err(Error::Shape(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            est.len()
        )));
    }
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::UndefinedSiSdr);
    }
    let dot: f64 = reference.iter().zip(est).map(|(y, e)| y * e).sum();
    let alpha = dot / energy;
    let num = alpha * alpha * energy;
    let den: f64 = reference
        .iter()
        .zip(est)
        .map(|(y, e)| {
            let d = alpha * y - e;
            d * d
        })
        .sum();
    if !(num.is_finite() && den.is_finite()) {
        return Err(Error::NonFinite("SI-SDR estimate"));
    }
    let top = num.max(SI_SDR_EPS * den);
    let bottom = den.max(SI_SDR_EPS * num);
    let clamped = top != num || bottom != den || (num == 0.0 && den == 0.0);
    let ratio = if num == 0.0 && den == 0.0 { SI_SDR_EPS } else { top / bottom };
    Ok(Projection {
        alpha,
        num,
        den,
        ratio,
        clamped,
    })
}

/// Negative scale-invariant SDR in dB (lower is better).
pub fn si_sdr_loss(reference: &[f64], est: &[f64]) -> Result<f64> {
    Ok(-DB * project(reference, est)?.ratio.ln())
}

/// Loss and its gradient with respect to `est`. The gradient is zero where the
/// ratio is clamped.
pub fn si_sdr_loss_grad(reference: &[f64], est: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p = project(reference, est)?;
    let loss = -DB * p.ratio.ln();
    if p.clamped {
        return Ok((loss, vec![0.0; est.len()]));
    }
    // d num / d est = 2 alpha y ; d den / d est = 2 (est - alpha y)
    let grad = reference
        .iter()
        .zip(est)
        .map(|(y, e)| {
            let target = p.alpha * y;
            -DB * (2.0 * target / p.num - 2.0 * (e - target) / p.den)
        })
        .collect();
    Ok((loss, grad))
}

/// Speaker estimates bound across frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct FullbandEstimate {
    /// `[slot][F][T]`
    pub spectra: ComplexSpectrogram,
    /// One waveform per slot.
    pub waveforms: Vec<Vec<f64>>,
}

impl FullbandEstimate {
    pub fn n_slots(&self) -> usize {
        self.waveforms.len()
    }
}

/// Result of the permutation search.
#[derive(Debug, Clone, PartialEq)]
pub struct FpitResult {
    pub loss: f64,
    /// `permutation[n]` is the prediction slot assigned to target `n`.
    pub permutation: Vec<usize>,
    /// `per_pair_losses[n][k]`: loss of slot `k` against target `n`.
    pub per_pair_losses: Vec<Vec<f64>>,
}

/// Binds `per_freq[f][slot][t]` (already rescaled) into full-band spectra and inverts them.
pub fn assemble_fullband(
    per_freq: &[Vec<Vec<Complex64>>],
    stft: &Stft,
    out_length: usize,
) -> Result<FullbandEstimate> {
    let cfg = stft.config().clone();
    let n_freqs = cfg.n_freqs();
    if per_freq.len() != n_freqs {
        return Err(Error::Shape(format!(
            "{} frequencies of output, STFT has {n_freqs}",
            per_freq.len()
        )));
    }
    let n_slots = per_freq[0].len();
    let n_frames = per_freq[0].first().map_or(0, Vec::len);
    let mut spectra = ComplexSpectrogram::zeros(cfg, n_slots, n_frames);
    for (f, slots) in per_freq.iter().enumerate() {
        if slots.len() != n_slots || slots.iter().any(|r| r.len() != n_frames) {
            return Err(Error::Shape(format!("ragged network output at frequency {f}")));
        }
        for (k, row) in slots.iter().enumerate() {
            spectra.row_mut(k, f).copy_from_slice(row);
        }
    }
    if spectra.data().iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("full-band spectra"));
    }
    let waveforms = (0..n_slots)
        .map(|k| {
            let block = &spectra.data()[k * n_freqs * n_frames..(k + 1) * n_freqs * n_frames];
            stft.synthesize(block, n_frames, out_length)
        })
        .collect::<Result<_>>()?;
    Ok(FullbandEstimate { spectra, waveforms })
}

/// Rescales raw `[F][2N][T]` network outputs and assembles them.
pub fn assemble_from_outputs(
    outputs: ArrayView3<'_, f64>,
    scales: &[f64],
    stft: &Stft,
    out_length: usize,
) -> Result<FullbandEstimate> {
    if outputs.dim().0 != scales.len() {
        return Err(Error::Shape(format!(
            "{} output frequencies, {} scales",
            outputs.dim().0,
            scales.len()
        )));
    }
    let per_freq = outputs
        .outer_iter()
        .zip(scales)
        .map(|(o, &s)| unpack_output(o, s))
        .collect::<Result<Vec<_>>>()?;
    assemble_fullband(&per_freq, stft, out_length)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
}

/// Best assignment for a square loss matrix `[target][slot]`. Ties go to the
/// lexicographically first permutation.
pub fn best_permutation(losses: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let n = losses.len();
    if n > MAX_PIT_SPEAKERS {
        return Err(Error::PermutationSearchTooLarge(n));
    }
    if n == 0 || losses.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("loss matrix must be square and non-empty".into()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(n) {
        let mean = p.iter().enumerate().map(|(t, &k)| losses[t][k]).sum::<f64>() / n as f64;
        if best.as_ref().is_none_or(|(b, _)| mean < *b) {
            best = Some((mean, p));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Permutation search over full-band estimates.
pub fn fpit(est: &FullbandEstimate, targets: &[Vec<f64>]) -> Result<FpitResult> {
    let n = targets.len();
    if n > MAX_PIT_SPEAKERS {
        return Err(Error::PermutationSearchTooLarge(n));
    }
    if est.n_slots() != n {
        return Err(Error::Shape(format!("{} slots for {n} targets", est.n_slots())));
    }
    let per_pair_losses = targets
        .iter()
        .map(|y| est.waveforms.iter().map(|w| si_sdr_loss(y, w)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let (loss, permutation) = best_permutation(&per_pair_losses)?;
    Ok(FpitResult {
        loss,
        permutation,
        per_pair_losses,
    })
}

/// Gradient of the chosen-permutation loss with respect to the raw network
/// outputs `[F][2N][T]`, holding the permutation fixed.
pub fn fpit_grad(
    est: &FullbandEstimate,
    targets: &[Vec<f64>],
    result: &FpitResult,
    stft: &Stft,
    scales: &[f64],
) -> Result<Array3<f64>> {
    let n = targets.len();
    let n_freqs = est.spectra.n_freqs();
    let n_frames = est.spectra.n_frames();
    if scales.len() != n_freqs {
        return Err(Error::Shape(format!("{} scales for {n_freqs} frequencies", scales.len())));
    }
    let mut grad = Array3::zeros((n_freqs, 2 * n, n_frames));
    for (target, &slot) in result.permutation.iter().enumerate() {
        let (_, g) = si_sdr_loss_grad(&targets[target], &est.waveforms[slot])?;
        let g: Vec<f64> = g.iter().map(|v| v / n as f64).collect();
        let spec_grad = stft.synthesize_adjoint(&g, n_frames);
        for f in 0..n_freqs {
            for t in 0..n_frames {
                let c = spec_grad[f * n_frames + t] * scales[f];
                grad[[f, 2 * slot, t]] = c.re;
                grad[[f, 2 * slot + 1, t]] = c.im;
            }
        }
    }
    Ok(grad)
}

/// Loss, search result and output gradient for one utterance.
pub fn fpit_loss_and_grad(
    outputs: ArrayView3<'_, f64>,
    scales: &[f64],
    targets: &[Vec<f64>],
    stft: &Stft,
) -> Result<(FpitResult, Array3<f64>)> {
    let out_length = targets.first().map_or(0, Vec::len);
    let est = assemble_from_outputs(outputs, scales, stft, out_length)?;
    let result = fpit(&est, targets)?;
    let grad = fpit_grad(&est, targets, &result, stft, scales)?;
    Ok((result, grad))
}

/// Per-frequency loss matrix helper used by diagnostics: mean squared error
/// between slot `k` and target `n` rows, `[n][k]`.
pub fn frequency_pair_mse(est: &[Vec<Complex64>], target: &[Vec<Complex64>]) -> Array2<f64> {
    let n = target.len();
    Array2::from_shape_fn((n, est.len()), |(i, k)| {
        let len = target[i].len().max(1) as f64;
        target[i]
            .iter()
            .zip(&est[k])
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / len
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{frequency_scales, pack_targets};
    use crate::stft::{stft, StftConfig};
    use crate::MultichannelWaveform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// `n` orthogonal to `y` with `|n|^2 = |y|^2 * 10^(-db/10)`.
    fn orthogonal_noise(y: &[f64], db: f64, seed: u64) -> Vec<f64> {
        let mut n = noise(y.len(), seed);
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let proj: f64 = n.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / yy;
        for (v, b) in n.iter_mut().zip(y) {
            *v -= proj * b;
        }
        let nn: f64 = n.iter().map(|v| v * v).sum();
        let gain = (yy * 10f64.powf(-db / 10.0) / nn).sqrt();
        n.iter().map(|v| v * gain).collect()
    }

    #[test]
    fn orthogonal_noise_gives_exact_ratio() {
        let y = noise(4000, 1);
        for db in [20.0, 30.0, 40.0] {
            let n = orthogonal_noise(&y, db, 2);
            let est: Vec<f64> = y.iter().zip(&n).map(|(a, b)| a + b).collect();
            assert!((si_sdr_loss(&y, &est).unwrap() + db).abs() < 1e-6);
        }
    }

    #[test]
    fn clamped_extremes() {
        let y = noise(1000, 3);
        let scaled: Vec<f64> = y.iter().map(|v| 5.0 * v).collect();
        assert!((si_sdr_loss(&y, &scaled).unwrap() + 80.0).abs() < 1e-6);
        let orth = orthogonal_noise(&y, 0.0, 4);
        assert!((si_sdr_loss(&y, &orth).unwrap() - 80.0).abs() < 1e-6);
        assert!((si_sdr_loss(&y, &vec![0.0; 1000]).unwrap() - 80.0).abs() < 1e-9);
    }

    #[test]
    fn zero_reference_is_undefined() {
        assert!(matches!(si_sdr_loss(&[0.0; 8], &[1.0; 8]), Err(Error::UndefinedSiSdr)));
    }

    #[test]
    fn scale_invariant_in_estimate() {
        let y = noise(500, 5);
        let e = noise(500, 6);
        let base = si_sdr_loss(&y, &e).unwrap();
        for c in [1e-3, -2.0, 1e3] {
            let s: Vec<f64> = e.iter().map(|v| c * v).collect();
            assert!((si_sdr_loss(&y, &s).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn si_sdr_gradient_matches_differences() {
        let y = noise(64, 7);
        let e: Vec<f64> = y.iter().zip(noise(64, 8)).map(|(a, b)| 0.7 * a + 0.4 * b).collect();
        let (_, g) = si_sdr_loss_grad(&y, &e).unwrap();
        let h = 1e-6;
        for i in 0..e.len() {
            let mut p = e.clone();
            p[i] += h;
            let mut m = e.clone();
            m[i] -= h;
            let fd = (si_sdr_loss(&y, &p).unwrap() - si_sdr_loss(&y, &m).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-3));
        }
    }

    #[test]
    fn lexicographic_permutations() {
        assert_eq!(permutations(3), vec![
            vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2],
            vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0],
        ]);
        assert_eq!(permutations(5).len(), 120);
    }

    #[test]
    fn two_speaker_matrix_example() {
        let (loss, perm) = best_permutation(&[vec![-10.0, -1.0], vec![-2.0, -12.0]]).unwrap();
        assert_eq!(perm, vec![0, 1]);
        assert!((loss + 11.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_identity() {
        let (_, perm) = best_permutation(&[vec![-5.0, -5.0], vec![-5.0, -5.0]]).unwrap();
        assert_eq!(perm, vec![0, 1]);
    }

    #[test]
    fn too_many_speakers() {
        let m = vec![vec![0.0; 7]; 7];
        assert!(matches!(best_permutation(&m), Err(Error::PermutationSearchTooLarge(7))));
    }

    fn small_stft() -> Stft {
        Stft::new(StftConfig::new(32, 16, 16000).unwrap()).unwrap()
    }

    fn pipeline(targets: &[Vec<f64>], st: &Stft) -> (Array3<f64>, Vec<f64>) {
        let cfg = st.config().clone();
        let imgs: Vec<_> = targets
            .iter()
            .map(|t| stft(&MultichannelWaveform::mono(16000, t.clone()), &cfg).unwrap())
            .collect();
        let mix: Vec<f64> = targets[0].iter().zip(&targets[1]).map(|(a, b)| a + b).collect();
        let m = stft(&MultichannelWaveform::mono(16000, mix), &cfg).unwrap();
        let scales = frequency_scales(&m, 0);
        (pack_targets(&imgs, &scales).unwrap(), scales)
    }

    #[test]
    fn normalized_targets_reassemble_to_waveforms() {
        let st = small_stft();
        let targets = vec![noise(400, 10), noise(400, 11)];
        let (packed, scales) = pipeline(&targets, &st);
        let est = assemble_from_outputs(packed.view(), &scales, &st, 400).unwrap();
        for (w, t) in est.waveforms.iter().zip(&targets) {
            let err: f64 = w.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / norm < 1e-6);
        }
        let r = fpit(&est, &targets).unwrap();
        assert_eq!(r.permutation, vec![0, 1]);
        assert!((r.loss + 80.0).abs() < 1e-6);
    }

    #[test]
    fn swapped_slots_are_found() {
        let st = small_stft();
        let targets = vec![noise(400, 12), noise(400, 13)];
        let (packed, scales) = pipeline(&targets, &st);
        let mut swapped = packed.clone();
        for f in 0..packed.dim().0 {
            for (a, b) in [(0, 2), (1, 3)] {
                let ra = packed.slice(ndarray::s![f, a, ..]).to_owned();
                swapped.slice_mut(ndarray::s![f, a, ..]).assign(&packed.slice(ndarray::s![f, b, ..]));
                swapped.slice_mut(ndarray::s![f, b, ..]).assign(&ra);
            }
        }
        let a = fpit(&assemble_from_outputs(packed.view(), &scales, &st, 400).unwrap(), &targets).unwrap();
        let b = fpit(&assemble_from_outputs(swapped.view(), &scales, &st, 400).unwrap(), &targets).unwrap();
        assert_eq!(b.permutation, vec![1, 0]);
        assert!((a.loss - b.loss).abs() < 1e-10);
    }

    #[test]
    fn zero_outputs_give_zero_waveforms() {
        let st = small_stft();
        let per_freq = vec![vec![vec![Complex64::new(0.0, 0.0); 5]; 2]; 17];
        let est = assemble_fullband(&per_freq, &st, 64).unwrap();
        assert!(est.waveforms.iter().flatten().all(|&v| v == 0.0));
    }

    fn perturbed(targets: &[Vec<f64>], st: &Stft, seed: u64) -> (Array3<f64>, Vec<f64>) {
        let (mut packed, scales) = pipeline(targets, st);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        packed.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
        (packed, scales)
    }

    fn loss_at(out: &Array3<f64>, scales: &[f64], targets: &[Vec<f64>], st: &Stft) -> f64 {
        let est = assemble_from_outputs(out.view(), scales, st, targets[0].len()).unwrap();
        fpit(&est, targets).unwrap().loss
    }

    #[test]
    fn output_gradient_matches_central_differences() {
        let st = small_stft();
        let targets = vec![noise(200, 20), noise(200, 21)];
        let (out, scales) = perturbed(&targets, &st, 22);
        let (_, g) = fpit_loss_and_grad(out.view(), &scales, &targets, &st).unwrap();
        let h = 1e-5;
        for idx in ndarray::indices(out.raw_dim()) {
            let mut p = out.clone();
            p[idx] += h;
            let mut m = out.clone();
            m[idx] -= h;
            let fd = (loss_at(&p, &scales, &targets, &st) - loss_at(&m, &scales, &targets, &st)) / (2.0 * h);
            let denom = fd.abs().max(g[idx].abs()).max(1e-6);
            assert!((fd - g[idx]).abs() / denom < 1e-4, "{idx:?}: fd {fd} analytic {}", g[idx]);
        }
    }

    #[test]
    fn perfect_match_gradient_is_saturated() {
        let st = small_stft();
        let targets = vec![noise(300, 30), noise(300, 31)];
        let (packed, scales) = pipeline(&targets, &st);
        let (r, g) = fpit_loss_and_grad(packed.view(), &scales, &targets, &st).unwrap();
        assert!(r.loss < -79.0);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3);
    }

    #[test]
    fn unmatched_target_does_not_leak() {
        let st = small_stft();
        let targets = vec![noise(200, 40), noise(200, 41)];
        let (out, scales) = perturbed(&targets, &st, 42);
        let est = assemble_from_outputs(out.view(), &scales, &st, 200).unwrap();
        let r = fpit(&est, &targets).unwrap();
        let g = fpit_grad(&est, &targets, &r, &st, &scales).unwrap();
        // swapping which slot each target is scored against only through the
        // chosen pairs: forcing the other permutation changes the gradient
        let other = FpitResult {
            permutation: r.permutation.iter().rev().copied().collect(),
            ..r.clone()
        };
        let g2 = fpit_grad(&est, &targets, &other, &st, &scales).unwrap();
        assert!(g.iter().zip(g2.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
        // with the chosen permutation fixed, the gradient depends only on matched pairs
        let slot0 = r.permutation[0];
        let g_slot0: Vec<f64> = g.slice(ndarray::s![.., 2 * slot0..2 * slot0 + 2, ..]).iter().copied().collect();
        let mut alt = targets.clone();
        alt[1] = noise(200, 99);
        let g3 = fpit_grad(&est, &alt, &r, &st, &scales).unwrap();
        let g3_slot0: Vec<f64> = g3.slice(ndarray::s![.., 2 * slot0..2 * slot0 + 2, ..]).iter().copied().collect();
        assert_eq!(g_slot0, g3_slot0);
    }
}
