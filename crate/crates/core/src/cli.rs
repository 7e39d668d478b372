//! The four pipeline commands behind the `nbss` binary.
//!
//! Directory layouts:
//!
//! ```text
//! simulate:  <out>/manifest.jsonl, <out>/<id>/mix.wav, <out>/<id>/spk{n}.wav
//! train:     <out>/train_log.csv, <out>/epoch_{k}.ckpt
//! separate:  <out>/<id>/est_spk{n}.wav   (manifest input)
//!            <out>/est_spk{n}.wav        (single wav input)
//! eval:      <out>/report.csv, <out>/summary.txt
//! ```

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};

use crate::audio::MultichannelWaveform;
use crate::baselines::oracle_mvdr;
use crate::config::Config;
use crate::dataset::{ExampleSource, ManifestDataset};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry, SceneInfo};
use crate::metrics::{score_utterance, EvalReport, SceneTags};
use crate::model::ModelParams;
use crate::scene::{scene_seed, synthesize_scene, SourceProvider, SyntheticSources, WavCorpus};
use crate::separate::{separate, Alignment};
use crate::stft::{istft, stft, Stft};
use crate::training::{train, EpochReport, TrainOutput, TrainState};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Where dry utterances come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Sources {
    Synthetic,
    Corpus(PathBuf),
}

impl Sources {
    /// `--synthetic` wins; otherwise the config's `source_dir`.
    pub fn choose(synthetic: bool, cfg: &Config) -> Result<Self> {
        match (synthetic, &cfg.source_dir) {
            (true, _) => Ok(Sources::Synthetic),
            (false, Some(dir)) => Ok(Sources::Corpus(dir.clone())),
            (false, None) => Err(Error::Config(
                "no speech corpus: set source_dir or pass --synthetic".into(),
            )),
        }
    }
}

/// Simulates `n_scenes` mixtures and writes them with a manifest.
pub fn cmd_simulate(cfg: &Config, n_scenes: usize, sources: &Sources, out: &Path) -> Result<Manifest> {
    if n_scenes == 0 {
        return Err(Error::InvalidArgument("--n-scenes must be positive".into()));
    }
    let mut provider: Box<dyn SourceProvider> = match sources {
        Sources::Synthetic => Box::new(SyntheticSources::new(cfg.synthetic_profiles, cfg.seed, cfg.sample_rate)),
        Sources::Corpus(dir) => Box::new(WavCorpus::open(dir, cfg.sample_rate)?),
    };
    let spec = cfg.scene_spec();
    create_dir(out)?;
    let mut entries = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let id = format!("scene{i:05}");
        let seed = scene_seed(cfg.seed, i as u64);
        let scene = synthesize_scene(seed, &spec, provider.as_mut())?;
        let dir = out.join(&id);
        create_dir(&dir)?;
        let mix_path = format!("{id}/mix.wav");
        scene.mixture.write_wav(out.join(&mix_path))?;
        let mut image_paths = Vec::new();
        for (n, img) in scene.images.iter().enumerate() {
            let p = format!("{id}/spk{}.wav", n + 1);
            img.write_wav(out.join(&p))?;
            image_paths.push(p);
        }
        entries.push(ManifestEntry {
            id,
            mix_path,
            image_paths,
            scenario: SceneInfo {
                room: scene.scenario,
                overlap_ratio: scene.overlap_ratio,
            },
            seed,
        });
        if (i + 1) % 10 == 0 || i + 1 == n_scenes {
            info!("simulated {}/{n_scenes}", i + 1);
        }
    }
    let manifest = Manifest::new(out, entries);
    manifest.write(out.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Trains (or resumes) a separator. Checkpoints and the log go to `out`.
pub fn cmd_train(
    cfg: &Config,
    train_manifest: &Path,
    val_manifest: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<Vec<EpochReport>> {
    let stft_cfg = cfg.stft()?;
    let dataset = |p: &Path| -> Result<ManifestDataset> {
        Ok(ManifestDataset {
            manifest: Manifest::read(p)?,
            ref_channel: cfg.ref_channel,
            stft: stft_cfg.clone(),
        })
    };
    let train_set = dataset(train_manifest)?;
    let val_set = val_manifest.map(dataset).transpose()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let channels = train_set.manifest.load(0)?.0.n_channels();
    if channels != cfg.n_mics {
        return Err(Error::Config(format!(
            "training data has {channels} channels but n_mics = {}",
            cfg.n_mics
        )));
    }
    let tc = cfg.train_config();
    let mut state = match resume {
        Some(p) => {
            let st = TrainState::<f32>::load(p, &tc)?;
            if st.params.shape != cfg.model_shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: model shape {:?} does not match the config's {:?}",
                    p.display(),
                    st.params.shape,
                    cfg.model_shape()
                )));
            }
            st
        }
        None => TrainState::<f32>::fresh(cfg.model_shape(), &tc),
    };
    create_dir(out)?;
    let output = TrainOutput { dir: out.to_path_buf() };
    let plan = Stft::new(stft_cfg)?;
    train(
        &mut state,
        &train_set,
        val_set.as_ref().map(|v| v as &dyn ExampleSource),
        &tc,
        &plan,
        Some(&output),
        |_, _| ControlFlow::Continue(()),
    )
}

/// Which system produced (or produces) the estimates being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Mvdr,
    Nbss,
    NbssCorr,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Mvdr => "mvdr",
            System::Nbss => "nbss",
            System::NbssCorr => "nbss-corr",
        }
    }

    fn alignment(self) -> Alignment {
        match self {
            System::NbssCorr => Alignment::Correlation,
            _ => Alignment::None,
        }
    }
}

impl FromStr for System {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvdr" => Ok(System::Mvdr),
            "nbss" => Ok(System::Nbss),
            "nbss-corr" => Ok(System::NbssCorr),
            other => Err(Error::InvalidArgument(format!(
                "unknown system {other:?}: expected mvdr, nbss or nbss-corr"
            ))),
        }
    }
}

fn write_estimates(dir: &Path, waveforms: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    create_dir(dir)?;
    for (n, w) in waveforms.iter().enumerate() {
        MultichannelWaveform::mono(sample_rate, w.clone()).write_wav(dir.join(format!("est_spk{}.wav", n + 1)))?;
    }
    Ok(())
}

/// Separates a single `.wav` file or every mixture of a manifest.
/// Returns the number of mixtures processed.
pub fn cmd_separate(cfg: &Config, checkpoint_path: &Path, input: &Path, system: System, out: &Path) -> Result<usize> {
    if system == System::Mvdr {
        return Err(Error::InvalidArgument(
            "mvdr is an oracle baseline and needs the true images; use `eval --system mvdr`".into(),
        ));
    }
    let params = ModelParams::<f32>::load(checkpoint_path)?;
    let stft_cfg = cfg.stft()?;
    let is_wav = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let mix = MultichannelWaveform::read_wav(input)?;
        let sep = separate(&params, &mix, cfg.ref_channel, &stft_cfg, system.alignment())?;
        write_estimates(out, &sep.waveforms, mix.sample_rate)?;
        return Ok(1);
    }
    let manifest = Manifest::read(input)?;
    for e in &manifest.entries {
        let mix = MultichannelWaveform::read_wav(manifest.resolve(&e.mix_path))?;
        let sep = separate(&params, &mix, cfg.ref_channel, &stft_cfg, system.alignment())?;
        write_estimates(&out.join(&e.id), &sep.waveforms, mix.sample_rate)?;
        info!("separated {}", e.id);
    }
    Ok(manifest.len())
}

fn tags(e: &ManifestEntry) -> SceneTags {
    SceneTags {
        rt60: e.scenario.room.rt60,
        angular_difference: e.scenario.room.angular_difference,
        overlap_ratio: e.scenario.overlap_ratio,
    }
}

/// Oracle MVDR output for every speaker of a scene, at the reference channel.
pub fn mvdr_estimates(
    mix: &MultichannelWaveform,
    images: &[MultichannelWaveform],
    ref_channel: usize,
    cfg: &Config,
) -> Result<Vec<Vec<f64>>> {
    let stft_cfg = cfg.stft()?;
    let x = stft(mix, &stft_cfg)?;
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let rest = MultichannelWaveform::new(
            mix.sample_rate,
            mix.channels
                .iter()
                .zip(&img.channels)
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect())
                .collect(),
        )?;
        let (_, y) = oracle_mvdr(&x, &stft(img, &stft_cfg)?, &stft(&rest, &stft_cfg)?, ref_channel)?;
        out.push(istft(&y, &stft_cfg, mix.len())?.channels.swap_remove(0));
    }
    Ok(out)
}

/// Scores one system on a manifest and writes `report.csv` and `summary.txt`.
///
/// MVDR estimates are computed on the fly. Network systems read
/// `<est_dir>/<id>/est_spk{n}.wav`; entries with missing files are skipped
/// with a warning.
pub fn cmd_eval(cfg: &Config, system: System, manifest_path: &Path, est_dir: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let manifest = Manifest::read(manifest_path)?;
    let est_dir = match (system, est_dir) {
        (System::Mvdr, _) => None,
        (_, Some(d)) => Some(d),
        (_, None) => {
            return Err(Error::InvalidArgument(format!(
                "--est-dir is required for system {}",
                system.name()
            )))
        }
    };
    let mut report = EvalReport {
        system: system.name().to_string(),
        rows: Vec::new(),
        missing: Vec::new(),
    };
    for (i, e) in manifest.entries.iter().enumerate() {
        let (mix, images) = manifest.load(i)?;
        let estimates = match est_dir {
            None => mvdr_estimates(&mix, &images, cfg.ref_channel, cfg)?,
            Some(dir) => {
                let paths: Vec<PathBuf> = (1..=images.len())
                    .map(|n| dir.join(&e.id).join(format!("est_spk{n}.wav")))
                    .collect();
                if let Some(p) = paths.iter().find(|p| !p.is_file()) {
                    warn!("{}: missing {}, skipping", e.id, p.display());
                    report.missing.push(e.id.clone());
                    continue;
                }
                paths
                    .iter()
                    .map(|p| Ok(MultichannelWaveform::read_wav(p)?.channels.swap_remove(0)))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let refs: Vec<Vec<f64>> = images.iter().map(|im| im.channel(cfg.ref_channel).to_vec()).collect();
        let mut rows = score_utterance(&e.id, &refs, &estimates, mix.channel(cfg.ref_channel), tags(e))?;
        report.rows.append(&mut rows);
    }
    if report.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    create_dir(out)?;
    report.write(out)?;
    Ok(report)
}
