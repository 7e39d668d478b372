//! Draw a random room, simulate its impulse responses and check them against
//! geometry. Pass a directory to also write one mixture and its images.
//!
//! cargo run --release --example simulate_room -- [seed] [out_dir]

use nbss::room::{onset_index, sample_scenario, schroeder_t60, simulate_rir};
use nbss::scene::{synthesize_scene, SceneSpec, SyntheticSources};

fn main() -> nbss::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);

    let scn = sample_scenario(seed, 2)?;
    let [l, w, h] = scn.room_dims;
    println!("room {l:.2} x {w:.2} x {h:.2} m, rt60 {:.2} s, speakers {:.0} deg apart", scn.rt60, scn.angular_difference);
    let rirs = simulate_rir(&scn, None, 16000)?;
    for s in 0..2 {
        let h0 = &rirs.rirs[s][0];
        println!(
            "speaker {}: direct path {:.1} samples (onset {:?}), {} taps, Schroeder T60 {:?}",
            s + 1,
            rirs.direct_delay(s, 0),
            onset_index(h0),
            h0.len(),
            schroeder_t60(h0, 16000).map(|t| (t * 1000.0).round() / 1000.0)
        );
    }

    if let Some(dir) = args.get(1) {
        let mut sources = SyntheticSources::new(16, seed, 16000);
        let scene = synthesize_scene(seed, &SceneSpec::default(), &mut sources)?;
        std::fs::create_dir_all(dir).map_err(|e| nbss::Error::InvalidArgument(e.to_string()))?;
        scene.mixture.write_wav(format!("{dir}/mix.wav"))?;
        for (n, img) in scene.images.iter().enumerate() {
            img.write_wav(format!("{dir}/spk{}.wav", n + 1))?;
        }
        println!("wrote {dir}/mix.wav (overlap ratio {:.2})", scene.overlap_ratio);
    }
    Ok(())
}
