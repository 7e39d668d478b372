//! Score the unprocessed mixture and an oracle MVDR on a few scenes and
//! print the bucketed summary.

use nbss::cli::mvdr_estimates;
use nbss::config::Config;
use nbss::metrics::{score_utterance, EvalReport, SceneTags};
use nbss::scene::{scene_seed, synthesize_scene, SyntheticSources};

fn main() -> nbss::Result<()> {
    let cfg = Config::default();
    let spec = cfg.scene_spec();
    let mut sources = SyntheticSources::new(16, 4, 16000);
    let mut report = EvalReport {
        system: "mvdr".into(),
        ..EvalReport::default()
    };
    for i in 0..6 {
        let scene = synthesize_scene(scene_seed(4, i), &spec, &mut sources)?;
        let refs: Vec<Vec<f64>> = scene.images.iter().map(|im| im.channel(0).to_vec()).collect();
        let est = mvdr_estimates(&scene.mixture, &scene.images, 0, &cfg)?;
        let tags = SceneTags {
            rt60: scene.scenario.rt60,
            angular_difference: scene.scenario.angular_difference,
            overlap_ratio: scene.overlap_ratio,
        };
        report.rows.extend(score_utterance(&format!("u{i}"), &refs, &est, scene.mixture.channel(0), tags)?);
    }
    print!("{}", report.summary());
    Ok(())
}
