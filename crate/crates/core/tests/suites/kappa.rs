use fedfusion_core::metrics::{report, ConfusionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// κ from normalised cell probabilities, chance agreement accumulated pair by
/// pair over (truth, prediction) marginals.
pub fn kappa_oracle(counts: &[Vec<u64>]) -> f64 {
    let c = counts.len();
    let n: f64 = counts.iter().flatten().map(|&v| v as f64).sum();
    let p: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|&v| v as f64 / n).collect()).collect();
    let observed: f64 = (0..c).map(|i| p[i][i]).sum();
    let mut chance = 0.0;
    for i in 0..c {
        for j in 0..c {
            for k in 0..c {
                chance += p[i][j] * p[k][i];
            }
        }
    }
    (observed - chance) / (1.0 - chance)
}

pub fn kappa_of_the_hand_computed_matrix() {
    let m = ConfusionMatrix::from_counts(&[vec![50, 10], vec![5, 35]]).unwrap();
    let k = report(&m).unwrap().kappa.unwrap();
    assert!((k - 0.693877551).abs() < 1e-6);
    assert!((kappa_oracle(&[vec![50, 10], vec![5, 35]]) - k).abs() < 1e-12);
}

pub fn kappa_agrees_with_second_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let c = rng.gen_range(2..9);
        let counts: Vec<Vec<u64>> = (0..c).map(|_| (0..c).map(|_| rng.gen_range(0..60)).collect()).collect();
        let m = ConfusionMatrix::from_counts(&counts).unwrap();
        let r = report(&m).unwrap();
        assert!((r.kappa.unwrap() - kappa_oracle(&counts)).abs() < 1e-9);
        let oa = (0..c).map(|i| counts[i][i]).sum::<u64>() as f64 / m.total() as f64;
        assert!((r.oa - oa).abs() < 1e-12);
    }
}
