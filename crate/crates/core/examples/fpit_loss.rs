//! Full-band PIT on estimates whose slots are in the wrong order.

use nbss::fpit::{fpit, FullbandEstimate};
use nbss::{ComplexSpectrogram, StftConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nbss::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let targets = vec![noise(8000), noise(8000), noise(8000)];
    let leak = noise(8000);
    // slot k holds target (k + 1) % 3 plus some leakage
    let waveforms: Vec<Vec<f64>> = (0..3)
        .map(|k| targets[(k + 1) % 3].iter().zip(&leak).map(|(a, b)| a + 0.1 * (k + 1) as f64 * b).collect())
        .collect();
    let est = FullbandEstimate {
        spectra: ComplexSpectrogram::zeros(StftConfig::default(), 0, 0),
        waveforms,
    };
    let r = fpit(&est, &targets)?;
    println!("loss {:.2} dB, target n -> slot {:?}", r.loss, r.permutation);
    for (n, row) in r.per_pair_losses.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:7.2}")).collect();
        println!("target {n}: {}", cells.join(" "));
    }
    Ok(())
}
