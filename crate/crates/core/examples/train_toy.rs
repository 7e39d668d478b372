//! Train a reduced separator on a handful of synthetic scenes and report the
//! SI-SDR improvement on them.
//!
//! cargo run --release --example train_toy -- [epochs] [scenes]

use std::ops::ControlFlow;

use nbss::dataset::example_from_scene;
use nbss::metrics::{score_utterance, SceneTags};
use nbss::model::ModelShape;
use nbss::room::ScenarioRanges;
use nbss::scene::{scene_seed, synthesize_scene, SceneSpec, SyntheticSources};
use nbss::separate::{separate, Alignment};
use nbss::training::{train, TrainConfig, TrainState};
use nbss::{Stft, StftConfig};

fn main() -> nbss::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(20);
    let n_scenes = args.get(1).copied().unwrap_or(4) as u64;

    let spec = SceneSpec {
        ranges: ScenarioRanges::default().with_rt60(0.1, 0.3),
        n_samples: 32000,
        ..SceneSpec::default()
    };
    let mut sources = SyntheticSources::new(2, 0, 16000);
    let scenes = (0..n_scenes)
        .map(|i| synthesize_scene(scene_seed(0, i), &spec, &mut sources))
        .collect::<nbss::Result<Vec<_>>>()?;
    let cfg = StftConfig::default();
    let data = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| example_from_scene(format!("s{i}"), s, 0, &cfg))
        .collect::<nbss::Result<Vec<_>>>()?;

    let tc = TrainConfig {
        utterances_per_batch: 1,
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f32>::fresh(ModelShape::new(8, 2, 64, 32), &tc);
    train(&mut state, &data, None, &tc, &Stft::new(cfg.clone())?, None, |r, _| {
        println!("epoch {:3}  loss {:7.3}  lr {:.1e}", r.epoch, r.train_loss, r.lr);
        ControlFlow::Continue(())
    })?;

    let mut total = 0.0;
    for (scene, ex) in scenes.iter().zip(&data) {
        let sep = separate(&state.params, &scene.mixture, 0, &cfg, Alignment::None)?;
        let rows = score_utterance(&ex.id, &ex.targets, &sep.waveforms, scene.mixture.channel(0), SceneTags::default())?;
        total += rows.iter().map(|r| r.si_sdri()).sum::<f64>() / rows.len() as f64;
    }
    println!("mean SI-SDRi {:.2} dB", total / scenes.len() as f64);
    Ok(())
}
