//! Separation metrics and bucketed evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fpit::{best_permutation, si_sdr_loss, SI_SDR_EPS};

/// Scale-invariant SDR in dB (higher is better), clamped like the loss.
pub fn si_sdr_metric(reference: &[f64], est: &[f64]) -> Result<f64> {
    Ok(-si_sdr_loss(reference, est)?)
}

/// Distortion filter length of [`sdr_metric`], in taps.
pub const SDR_FILTER_LEN: usize = 512;

/// BSS-Eval style SDR in dB with a [`SDR_FILTER_LEN`]-tap distortion filter.
pub fn sdr_metric(reference: &[f64], est: &[f64]) -> Result<f64> {
    sdr_metric_with(reference, est, SDR_FILTER_LEN)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SDR where the target is the least-squares projection of the estimate onto
/// `taps` delayed copies of the reference. With one tap this is SI-SDR.
pub fn sdr_metric_with(reference: &[f64], est: &[f64], taps: usize) -> Result<f64> {
    let n = reference.len();
    if n != est.len() {
        return Err(Error::Shape(format!("reference has {n} samples, estimate {}", est.len())));
    }
    let r: Vec<f64> = (0..taps.clamp(1, n.max(1))).map(|k| dot(&reference[..n - k], &reference[k..])).collect();
    if n == 0 || r[0] <= 0.0 {
        return Err(Error::UndefinedSiSdr);
    }
    let taps = r.len();
    let c = DVector::from_iterator(taps, (0..taps).map(|k| dot(&reference[..n - k], &est[k..])));
    let gram = DMatrix::from_fn(taps, taps, |i, j| r[i.abs_diff(j)]);
    let g = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&c),
        // rank deficient references, e.g. long runs of zeros
        None => gram
            .svd(true, true)
            .solve(&c, 1e-12 * r[0])
            .map_err(|e| Error::InvalidArgument(format!("SDR projection: {e}")))?,
    };
    let mut target = vec![0.0; n + taps - 1];
    for (k, &gk) in g.iter().enumerate() {
        for (t, &y) in target[k..k + n].iter_mut().zip(reference) {
            *t += gk * y;
        }
    }
    let signal: f64 = target.iter().map(|v| v * v).sum();
    let distortion: f64 = target
        .iter()
        .enumerate()
        .map(|(t, &v)| (est.get(t).copied().unwrap_or(0.0) - v).powi(2))
        .sum();
    let ratio = if signal == 0.0 && distortion == 0.0 {
        SI_SDR_EPS
    } else {
        signal.max(SI_SDR_EPS * distortion) / distortion.max(SI_SDR_EPS * signal)
    };
    Ok(10.0 * ratio.log10())
}

/// Scores of one speaker of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerScore {
    pub id: String,
    /// 1-based speaker index in the reference order.
    pub speaker: usize,
    pub sdr: f64,
    pub si_sdr: f64,
    pub sdr_mix: f64,
    pub si_sdr_mix: f64,
    pub rt60: f64,
    pub angular_difference: f64,
    pub overlap_ratio: f64,
}

impl SpeakerScore {
    pub fn sdri(&self) -> f64 {
        self.sdr - self.sdr_mix
    }
    pub fn si_sdri(&self) -> f64 {
        self.si_sdr - self.si_sdr_mix
    }
}

/// Scene attributes used for grouping.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SceneTags {
    pub rt60: f64,
    pub angular_difference: f64,
    pub overlap_ratio: f64,
}

/// Scores every speaker of one utterance. Estimates are matched to references
/// by the best mean SI-SDR; the mixture's reference channel is the baseline.
pub fn score_utterance(
    id: &str,
    references: &[Vec<f64>],
    estimates: &[Vec<f64>],
    mixture_ref: &[f64],
    tags: SceneTags,
) -> Result<Vec<SpeakerScore>> {
    if references.len() != estimates.len() {
        return Err(Error::Shape(format!(
            "{id}: {} references, {} estimates",
            references.len(),
            estimates.len()
        )));
    }
    let losses = references
        .iter()
        .map(|y| estimates.iter().map(|e| si_sdr_loss(y, e)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let (_, perm) = best_permutation(&losses)?;
    references
        .iter()
        .zip(&perm)
        .enumerate()
        .map(|(n, (y, &k))| {
            Ok(SpeakerScore {
                id: id.to_string(),
                speaker: n + 1,
                sdr: sdr_metric(y, &estimates[k])?,
                si_sdr: -losses[n][k],
                sdr_mix: sdr_metric(y, mixture_ref)?,
                si_sdr_mix: si_sdr_metric(y, mixture_ref)?,
                rt60: tags.rt60,
                angular_difference: tags.angular_difference,
                overlap_ratio: tags.overlap_ratio,
            })
        })
        .collect()
}

/// Bucket edges; the last bucket of each list is closed on the right.
pub const RT60_EDGES: [f64; 4] = [0.1, 0.4, 0.7, 1.0];
pub const ANGLE_EDGES: [f64; 5] = [0.0, 30.0, 60.0, 90.0, 180.0];
pub const OVERLAP_EDGES: [f64; 5] = [0.1, 0.4, 0.7, 0.95, 1.0];

/// Index of the bucket holding `x`; values outside the edges go to the nearest end bucket.
pub fn bucket_index(edges: &[f64], x: f64) -> usize {
    let n = edges.len() - 1;
    (1..n).find(|&k| x < edges[k]).map_or(n - 1, |k| k - 1)
}

/// Mean metrics over a group of speaker rows.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Means {
    pub count: usize,
    pub sdr: f64,
    pub si_sdr: f64,
    pub sdri: f64,
    pub si_sdri: f64,
}

/// Per-utterance and pooled scores of one system.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub system: String,
    pub rows: Vec<SpeakerScore>,
    /// Utterances without estimates, skipped with a warning.
    pub missing: Vec<String>,
}

impl EvalReport {
    /// Averages speakers within each utterance, then utterances.
    pub fn means_of<'a>(rows: impl IntoIterator<Item = &'a SpeakerScore>) -> Means {
        let mut per_utt: Vec<(String, Vec<&SpeakerScore>)> = Vec::new();
        for r in rows {
            match per_utt.iter_mut().find(|(id, _)| *id == r.id) {
                Some((_, v)) => v.push(r),
                None => per_utt.push((r.id.clone(), vec![r])),
            }
        }
        let mut m = Means {
            count: per_utt.len(),
            ..Means::default()
        };
        if per_utt.is_empty() {
            return m;
        }
        for (_, rs) in &per_utt {
            let k = rs.len() as f64;
            m.sdr += rs.iter().map(|r| r.sdr).sum::<f64>() / k;
            m.si_sdr += rs.iter().map(|r| r.si_sdr).sum::<f64>() / k;
            m.sdri += rs.iter().map(|r| r.sdri()).sum::<f64>() / k;
            m.si_sdri += rs.iter().map(|r| r.si_sdri()).sum::<f64>() / k;
        }
        let n = per_utt.len() as f64;
        m.sdr /= n;
        m.si_sdr /= n;
        m.sdri /= n;
        m.si_sdri /= n;
        m
    }

    pub fn overall(&self) -> Means {
        Self::means_of(&self.rows)
    }

    /// Means per bucket of `key`, labeled `lo-hi`.
    pub fn bucketed(&self, edges: &[f64], key: impl Fn(&SpeakerScore) -> f64) -> Vec<(String, Means)> {
        (0..edges.len() - 1)
            .map(|b| {
                let label = format!("{}-{}", edges[b], edges[b + 1]);
                let rows = self.rows.iter().filter(|r| bucket_index(edges, key(r)) == b);
                (label, Self::means_of(rows))
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(
            "id,speaker,sdr,si_sdr,sdr_mix,si_sdr_mix,sdri,si_sdri,rt60,angular_difference,overlap_ratio\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.speaker,
                r.sdr,
                r.si_sdr,
                r.sdr_mix,
                r.si_sdr_mix,
                r.sdri(),
                r.si_sdri(),
                r.rt60,
                r.angular_difference,
                r.overlap_ratio
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "system: {}", self.system);
        let _ = writeln!(s, "SDR allows a {SDR_FILTER_LEN}-tap distortion filter; PESQ not computed.");
        let _ = writeln!(s, "utterances scored: {}, missing: {}", self.overall().count, self.missing.len());
        let _ = writeln!(s);
        let header = format!("{:<24}{:>6}{:>10}{:>10}{:>10}{:>10}", "group", "n", "SDR", "SI-SDR", "SDRi", "SI-SDRi");
        let line = |s: &mut String, name: &str, m: &Means| {
            if m.count == 0 {
                let _ = writeln!(s, "{:<24}{:>6}{:>10}{:>10}{:>10}{:>10}", name, 0, "-", "-", "-", "-");
            } else {
                let _ = writeln!(s, "{:<24}{:>6}{:>10.2}{:>10.2}{:>10.2}{:>10.2}", name, m.count, m.sdr, m.si_sdr, m.sdri, m.si_sdri);
            }
        };
        let _ = writeln!(s, "{header}");
        line(&mut s, "all", &self.overall());
        for (title, groups) in [
            ("rt60 [s]", self.bucketed(&RT60_EDGES, |r| r.rt60)),
            ("angle [deg]", self.bucketed(&ANGLE_EDGES, |r| r.angular_difference)),
            ("overlap", self.bucketed(&OVERLAP_EDGES, |r| r.overlap_ratio)),
        ] {
            let _ = writeln!(s, "\n{title}");
            for (label, m) in &groups {
                line(&mut s, label, m);
            }
        }
        if !self.missing.is_empty() {
            let _ = writeln!(s, "\nmissing estimates: {}", self.missing.join(", "));
        }
        s
    }

    /// Writes `report.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.csv", self.csv()), ("summary.txt", self.summary())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
