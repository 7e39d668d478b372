//! Oracle MVDR beamforming of each speaker in a simulated mixture.

use nbss::baselines::oracle_mvdr;
use nbss::metrics::si_sdr_metric;
use nbss::room::ScenarioRanges;
use nbss::scene::{synthesize_scene, SceneSpec, SyntheticSources};
use nbss::{istft, stft, StftConfig};

fn main() -> nbss::Result<()> {
    let spec = SceneSpec {
        ranges: ScenarioRanges::default().with_rt60(0.2, 0.6),
        ..SceneSpec::default()
    };
    let mut sources = SyntheticSources::new(16, 5, 16000);
    let scene = synthesize_scene(5, &spec, &mut sources)?;
    println!("rt60 {:.2} s, overlap {:.2}", scene.scenario.rt60, scene.overlap_ratio);

    let cfg = StftConfig::default();
    let x = stft(&scene.mixture, &cfg)?;
    for (n, img) in scene.images.iter().enumerate() {
        let other = &scene.images[1 - n];
        let (w, y) = oracle_mvdr(&x, &stft(img, &cfg)?, &stft(other, &cfg)?, 0)?;
        let errs = w.distortionless_errors();
        let out = istft(&y, &cfg, scene.mixture.len())?;
        let before = si_sdr_metric(img.channel(0), scene.mixture.channel(0))?;
        let after = si_sdr_metric(img.channel(0), out.channel(0))?;
        println!(
            "speaker {}: SI-SDR {before:.2} -> {after:.2} dB, max |w^H d - 1| {:.1e}",
            n + 1,
            errs.iter().fold(0.0f64, |a, &b| a.max(b))
        );
    }
    Ok(())
}
