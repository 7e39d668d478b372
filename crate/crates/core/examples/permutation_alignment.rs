//! Scramble the speaker order at random frequencies and undo it with
//! envelope-correlation alignment.

use nbss::baselines::{align_permutations_correlation, FrequencyPermutationMap};
use nbss::{stft, MultichannelWaveform, StftConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nbss::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = StftConfig::default();
    let rates = [2.5, 4.0];
    let specs = rates
        .iter()
        .map(|&r| {
            let x: Vec<f64> = (0..48000)
                .map(|i| (1.0 + (2.0 * std::f64::consts::PI * r * i as f64 / 16000.0).sin()).powi(2) * rng.random_range(-1.0..1.0))
                .collect();
            stft(&MultichannelWaveform::mono(16000, x), &cfg)
        })
        .collect::<nbss::Result<Vec<_>>>()?;
    let f_n = cfg.n_freqs();
    let mut sep: Vec<Vec<_>> = (0..f_n).map(|f| specs.iter().map(|s| s.row(0, f).to_vec()).collect()).collect();

    let mut truth = FrequencyPermutationMap::identity(f_n, 2);
    let mut freqs: Vec<usize> = (0..f_n).collect();
    freqs.shuffle(&mut rng);
    for &f in &freqs[..f_n / 3] {
        sep[f].swap(0, 1);
        truth.perm[f] = vec![1, 0];
    }
    let map = align_permutations_correlation(&sep)?;
    println!("{} of {f_n} frequencies scrambled", f_n / 3);
    println!("alignment agrees with the truth at {:.1}% of frequencies", 100.0 * map.consistency_with(&truth));
    Ok(())
}
