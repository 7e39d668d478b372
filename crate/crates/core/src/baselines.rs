//! Reference systems: an oracle MVDR beamformer and per-frequency PIT with
//! correlation-based permutation alignment.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::ArrayView3;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fpit::permutations;
use crate::stft::ComplexSpectrogram;

/// Initial relative diagonal load.
pub const MVDR_LOADING: f64 = 1e-6;
/// Target covariance below this fraction of the mixture's is treated as silent.
const SILENT_TARGET: f64 = 1e-12;

/// Per-frequency beamformer.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    /// `[F][M]`; all zero at frequencies with no target energy.
    pub w: Vec<Vec<Complex64>>,
    /// Steering vector `[F][M]`, reference entry 1 (empty where silent).
    pub steering: Vec<Vec<Complex64>>,
    /// Diagonal load actually used per frequency.
    pub loading: Vec<f64>,
}

impl BeamformerWeights {
    /// `|w^H d - 1|` per frequency with a defined steering vector.
    pub fn distortionless_errors(&self) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.steering)
            .filter(|(_, d)| !d.is_empty())
            .map(|(w, d)| {
                let r: Complex64 = w.iter().zip(d).map(|(a, b)| a.conj() * b).sum();
                (r - 1.0).norm()
            })
            .collect()
    }
}

fn covariance(s: &ComplexSpectrogram, f: usize) -> DMatrix<Complex64> {
    let m = s.n_channels();
    let t_n = s.n_frames().max(1) as f64;
    let mut phi = DMatrix::<Complex64>::zeros(m, m);
    for i in 0..m {
        let ri = s.row(i, f);
        for j in i..m {
            let rj = s.row(j, f);
            let v: Complex64 = ri.iter().zip(rj).map(|(a, b)| a * b.conj()).sum::<Complex64>() / t_n;
            phi[(i, j)] = v;
            phi[(j, i)] = v.conj();
        }
    }
    phi
}

/// Principal eigenvector of `phi`, scaled so entry `r` is 1 when possible.
fn steering_vector(phi: &DMatrix<Complex64>, r: usize) -> DVector<Complex64> {
    let eig = SymmetricEigen::new(phi.clone());
    let k = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(k).into_owned();
    let vr = v[r];
    if vr.norm() > 1e-8 * v.norm() {
        v / vr
    } else {
        v
    }
}

/// `phi^-1 d / (d^H phi^-1 d)`, loading the diagonal until Cholesky succeeds.
fn mvdr_weights(phi: &DMatrix<Complex64>, d: &DVector<Complex64>) -> (DVector<Complex64>, f64) {
    let m = phi.nrows();
    let trace: f64 = (0..m).map(|i| phi[(i, i)].re).sum::<f64>() / m as f64;
    let base = if trace > 0.0 { trace } else { 1.0 };
    let mut delta = MVDR_LOADING;
    loop {
        let load = delta * base;
        let mut loaded = phi.clone();
        for i in 0..m {
            loaded[(i, i)] += Complex64::new(load, 0.0);
        }
        if let Some(chol) = loaded.cholesky() {
            let x = chol.solve(d);
            let denom = d.dotc(&x);
            if denom.norm() > 0.0 && denom.re.is_finite() {
                return (x / denom, load);
            }
        }
        delta *= 10.0;
    }
}

/// Oracle MVDR from the true target image and undesired signal.
///
/// Returns the weights and the single-channel beamformed spectrogram.
pub fn oracle_mvdr(
    mix: &ComplexSpectrogram,
    target_img: &ComplexSpectrogram,
    undesired: &ComplexSpectrogram,
    ref_channel: usize,
) -> Result<(BeamformerWeights, ComplexSpectrogram)> {
    let dims = |s: &ComplexSpectrogram| (s.n_channels(), s.n_freqs(), s.n_frames());
    if dims(mix) != dims(target_img) || dims(mix) != dims(undesired) {
        return Err(Error::Shape(format!(
            "mixture {:?}, target {:?} and undesired {:?} differ",
            dims(mix),
            dims(target_img),
            dims(undesired)
        )));
    }
    let (m, n_freqs, n_frames) = dims(mix);
    if ref_channel >= m {
        return Err(Error::InvalidArgument(format!(
            "reference channel {ref_channel} out of range for {m} channels"
        )));
    }
    let mut weights = BeamformerWeights {
        w: Vec::with_capacity(n_freqs),
        steering: Vec::with_capacity(n_freqs),
        loading: Vec::with_capacity(n_freqs),
    };
    let mut out = ComplexSpectrogram::zeros(mix.config.clone(), 1, n_frames);
    for f in 0..n_freqs {
        let phi_t = covariance(target_img, f);
        let phi_x = covariance(mix, f);
        let target_power: f64 = (0..m).map(|i| phi_t[(i, i)].re).sum();
        let mix_power: f64 = (0..m).map(|i| phi_x[(i, i)].re).sum();
        if target_power <= SILENT_TARGET * mix_power || target_power == 0.0 {
            weights.w.push(vec![Complex64::new(0.0, 0.0); m]);
            weights.steering.push(Vec::new());
            weights.loading.push(0.0);
            continue;
        }
        let d = steering_vector(&phi_t, ref_channel);
        let (w, load) = mvdr_weights(&covariance(undesired, f), &d);
        let row = out.row_mut(0, f);
        for (t, y) in row.iter_mut().enumerate() {
            *y = (0..m).map(|i| w[i].conj() * mix.get(i, f, t)).sum();
        }
        weights.w.push(w.iter().copied().collect());
        weights.steering.push(d.iter().copied().collect());
        weights.loading.push(load);
    }
    Ok((weights, out))
}

/// Slot assignment per frequency: `perm[f][n]` is the slot holding source `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyPermutationMap {
    pub perm: Vec<Vec<usize>>,
}

impl FrequencyPermutationMap {
    pub fn identity(n_freqs: usize, n: usize) -> Self {
        Self {
            perm: vec![(0..n).collect(); n_freqs],
        }
    }

    /// Reorders `sep[f][slot]` so that index `n` holds source `n`.
    pub fn apply<T: Clone>(&self, sep: &[Vec<T>]) -> Vec<Vec<T>> {
        sep.iter()
            .zip(&self.perm)
            .map(|(slots, p)| p.iter().map(|&k| slots[k].clone()).collect())
            .collect()
    }

    /// Frequencies where the two maps agree up to one global relabeling of
    /// sources, using the most common relative permutation.
    pub fn consistency_with(&self, other: &Self) -> f64 {
        if self.perm.is_empty() {
            return 1.0;
        }
        let relative: Vec<Vec<usize>> = self
            .perm
            .iter()
            .zip(&other.perm)
            .map(|(a, b)| {
                // source n in self sits in slot a[n]; other puts that slot at source inv_b[a[n]]
                let mut inv_b = vec![0; b.len()];
                for (n, &k) in b.iter().enumerate() {
                    inv_b[k] = n;
                }
                a.iter().map(|&k| inv_b[k]).collect()
            })
            .collect();
        let mut best = 0;
        for cand in &relative {
            best = best.max(relative.iter().filter(|r| *r == cand).count());
        }
        best as f64 / self.perm.len() as f64
    }
}

fn check_slots<T>(sep: &[Vec<Vec<T>>]) -> Result<(usize, usize)> {
    let n = sep.first().map_or(0, Vec::len);
    let t = sep.first().and_then(|s| s.first()).map_or(0, Vec::len);
    if sep.iter().any(|s| s.len() != n || s.iter().any(|r| r.len() != t)) {
        return Err(Error::Shape("ragged per-frequency slots".into()));
    }
    Ok((n, t))
}

fn best_by<F: Fn(&[usize]) -> f64>(perms: &[Vec<usize>], score: F, maximize: bool) -> Vec<usize> {
    let mut best = &perms[0];
    let mut best_score = score(best);
    for p in &perms[1..] {
        let s = score(p);
        if (maximize && s > best_score) || (!maximize && s < best_score) {
            best = p;
            best_score = s;
        }
    }
    best.clone()
}

/// Per-frequency permutation minimizing summed squared error between slots and targets.
pub fn per_frequency_pit(
    pred: &[Vec<Vec<Complex64>>],
    target: &[Vec<Vec<Complex64>>],
) -> Result<FrequencyPermutationMap> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predicted frequencies, {} target",
            pred.len(),
            target.len()
        )));
    }
    let (n, t) = check_slots(pred)?;
    if check_slots(target)? != (n, t) {
        return Err(Error::Shape("prediction and target slots differ".into()));
    }
    let perms = permutations(n);
    let perm = pred
        .iter()
        .zip(target)
        .map(|(p, y)| {
            let cost = |k: usize, src: usize| -> f64 {
                p[k].iter().zip(&y[src]).map(|(a, b)| (a - b).norm_sqr()).sum()
            };
            best_by(&perms, |pm| pm.iter().enumerate().map(|(src, &k)| cost(k, src)).sum(), false)
        })
        .collect();
    Ok(FrequencyPermutationMap { perm })
}

/// Same as [`per_frequency_pit`] on packed real/imaginary rows `[F][2N][T]`.
pub fn per_frequency_pit_packed(
    pred: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
) -> Result<FrequencyPermutationMap> {
    if pred.dim() != target.dim() || pred.dim().1 % 2 != 0 {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} must match with an even row count",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.dim().1 / 2;
    let perms = permutations(n);
    let perm = pred
        .outer_iter()
        .zip(target.outer_iter())
        .map(|(p, y)| {
            let cost = |k: usize, src: usize| -> f64 {
                let d0 = &p.row(2 * k) - &y.row(2 * src);
                let d1 = &p.row(2 * k + 1) - &y.row(2 * src + 1);
                d0.dot(&d0) + d1.dot(&d1)
            };
            best_by(&perms, |pm| pm.iter().enumerate().map(|(src, &k)| cost(k, src)).sum(), false)
        })
        .collect();
    Ok(FrequencyPermutationMap { perm })
}

/// Mean-removed, unit-variance magnitude envelope; `None` when constant.
fn standardized_envelope(row: &[Complex64]) -> Option<Vec<f64>> {
    let mags: Vec<f64> = row.iter().map(|c| c.norm()).collect();
    standardize(&mags)
}

fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-24) {
        return None;
    }
    let sd = var.sqrt();
    Some(x.iter().map(|v| (v - mean) / sd).collect())
}

fn pearson(a: Option<&[f64]>, b: Option<&[f64]>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64,
        _ => 0.0,
    }
}

/// Aligns per-frequency slots by correlating magnitude envelopes.
///
/// Frequency 0 fixes the labels. Each later frequency takes the permutation
/// whose envelopes best correlate with the running centroid of every source;
/// one more sweep then re-checks every frequency against the centroids built
/// from all other frequencies.
pub fn align_permutations_correlation(sep: &[Vec<Vec<Complex64>>]) -> Result<FrequencyPermutationMap> {
    if sep.len() < 2 {
        return Err(Error::InvalidArgument("correlation alignment needs at least 2 frequencies".into()));
    }
    let (n, t) = check_slots(sep)?;
    if n == 0 || t == 0 {
        return Err(Error::Shape("no slots or frames to align".into()));
    }
    let env: Vec<Vec<Option<Vec<f64>>>> = sep
        .iter()
        .map(|slots| slots.iter().map(|r| standardized_envelope(r)).collect())
        .collect();
    let perms = permutations(n);
    let zero = vec![0.0; t];
    let add = |sum: &mut Vec<Vec<f64>>, f: usize, p: &[usize], sign: f64| {
        for (src, &k) in p.iter().enumerate() {
            let e = env[f][k].as_deref().unwrap_or(&zero);
            for (s, v) in sum[src].iter_mut().zip(e) {
                *s += sign * v;
            }
        }
    };
    let choose = |sums: &Vec<Vec<f64>>, f: usize| -> Vec<usize> {
        let centroids: Vec<Option<Vec<f64>>> = sums.iter().map(|s| standardize(s)).collect();
        best_by(
            &perms,
            |p| {
                p.iter()
                    .enumerate()
                    .map(|(src, &k)| pearson(centroids[src].as_deref(), env[f][k].as_deref()))
                    .sum()
            },
            true,
        )
    };
    let mut map = FrequencyPermutationMap::identity(sep.len(), n);
    let mut sums = vec![vec![0.0; t]; n];
    add(&mut sums, 0, &map.perm[0].clone(), 1.0);
    for f in 1..sep.len() {
        let p = choose(&sums, f);
        add(&mut sums, f, &p, 1.0);
        map.perm[f] = p;
    }
    for f in 0..sep.len() {
        let old = map.perm[f].clone();
        add(&mut sums, f, &old, -1.0);
        let p = choose(&sums, f);
        add(&mut sums, f, &p, 1.0);
        map.perm[f] = p;
    }
    // keep source labels anchored to the slots of frequency 0
    let anchor = map.perm[0].clone();
    if anchor.iter().enumerate().any(|(i, &k)| i != k) {
        let mut inv = vec![0; n];
        for (src, &k) in anchor.iter().enumerate() {
            inv[k] = src;
        }
        for p in &mut map.perm {
            let old = p.clone();
            for (src, slot) in p.iter_mut().enumerate() {
                *slot = old[inv[src]];
            }
        }
    }
    Ok(map)
}
