//! The whole command pipeline in a temporary directory: simulate, train,
//! separate with both network systems, and evaluate against oracle MVDR.
//!
//! cargo run --release --example cli_pipeline -- [epochs]

use nbss::cli::{cmd_eval, cmd_separate, cmd_simulate, cmd_train, Sources, System};
use nbss::config::Config;

fn main() -> nbss::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let cfg = Config {
        hidden1: 32,
        hidden2: 16,
        max_epochs: epochs,
        utterances_per_batch: 2,
        scene_seconds: 2.0,
        rt60_max: 0.4,
        seed: 11,
        ..Config::default()
    };
    let root = std::env::temp_dir().join("nbss_cli_pipeline");
    let _ = std::fs::remove_dir_all(&root);

    let data = root.join("data");
    cmd_simulate(&cfg, 6, &Sources::Synthetic, &data)?;
    let manifest = data.join("manifest.jsonl");
    let reports = cmd_train(&cfg, &manifest, None, None, &root.join("run"))?;
    let ckpt = root.join("run").join(format!("epoch_{}.ckpt", reports.len()));

    for system in [System::Nbss, System::NbssCorr] {
        let est = root.join(system.name());
        cmd_separate(&cfg, &ckpt, &manifest, system, &est)?;
        let report = cmd_eval(&cfg, system, &manifest, Some(&est), &root.join(format!("eval_{}", system.name())))?;
        println!("{:10} SI-SDRi {:6.2} dB", system.name(), report.overall().si_sdri);
    }
    let mvdr = cmd_eval(&cfg, System::Mvdr, &manifest, None, &root.join("eval_mvdr"))?;
    println!("{:10} SI-SDRi {:6.2} dB", "mvdr", mvdr.overall().si_sdri);
    println!("outputs under {}", root.display());
    Ok(())
}
