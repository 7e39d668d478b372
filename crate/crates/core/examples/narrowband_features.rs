//! Turn a multichannel mixture into per-frequency network inputs.

use nbss::features::pack_input;
use nbss::scene::{synthesize_scene, SceneSpec, SyntheticSources};
use nbss::{stft, StftConfig};

fn main() -> nbss::Result<()> {
    let mut sources = SyntheticSources::new(4, 3, 16000);
    let scene = synthesize_scene(3, &SceneSpec::default(), &mut sources)?;
    let spec = stft(&scene.mixture, &StftConfig::default())?;
    let batch = pack_input(&spec, 0)?;
    let (f, c, t) = batch.inputs.dim();
    println!("{f} independent sequences of {c} features x {t} frames");

    // each frequency is scaled by the mean magnitude of the reference channel
    for k in [4, 64, 200] {
        let mean: f64 = (0..t)
            .map(|j| batch.inputs[[k, 0, j]].hypot(batch.inputs[[k, 1, j]]))
            .sum::<f64>()
            / t as f64;
        println!("f = {k:3}: scale {:.3e}, normalized ref magnitude {mean:.3}", batch.scales[k]);
    }
    Ok(())
}
