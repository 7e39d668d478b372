//! Analyse a 1 kHz tone, find its peak bin, and resynthesize it.
//!
//! cargo run --release --example stft_roundtrip

use nbss::{istft, stft, MultichannelWaveform, StftConfig};

fn main() -> nbss::Result<()> {
    let cfg = StftConfig::default();
    let fs = cfg.sample_rate as f64;
    let x: Vec<f64> = (0..64000).map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / fs).sin()).collect();
    let spec = stft(&MultichannelWaveform::mono(cfg.sample_rate, x.clone()), &cfg)?;
    println!("{} freqs x {} frames", spec.n_freqs(), spec.n_frames());

    let t = spec.n_frames() / 2;
    let peak = (0..spec.n_freqs())
        .max_by(|&a, &b| spec.get(0, a, t).norm().total_cmp(&spec.get(0, b, t).norm()))
        .unwrap();
    println!("peak bin {peak} ({} Hz)", peak as f64 * fs / cfg.window_length as f64);

    let y = istft(&spec, &cfg, x.len())?;
    let err: f64 = x.iter().zip(y.channel(0)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("relative reconstruction error {:.2e}", err / norm);
    Ok(())
}
