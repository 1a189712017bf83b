use fedfusion_core::codec::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(p: usize, q: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(p, q, (0..p * q).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Number of eigenvalues of the symmetric `m` below `x`, by Sylvester's law of
/// inertia on the LDLᵀ pivots of `m − xI`.
fn count_below(m: &[f64], n: usize, x: f64) -> usize {
    let mut a: Vec<f64> = m.to_vec();
    for i in 0..n {
        a[i * n + i] -= x;
    }
    let mut negative = 0;
    for k in 0..n {
        let mut pivot = a[k * n + k];
        if pivot == 0.0 {
            pivot = -1e-300;
        }
        if pivot < 0.0 {
            negative += 1;
        }
        for i in k + 1..n {
            let f = a[i * n + k] / pivot;
            for j in k + 1..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    negative
}

/// Eigenvalues of AᵀA in descending order by bisection.
pub fn gram_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.cols();
    let g = a.transpose().matmul(a).unwrap();
    let hi = g.data().iter().map(|v| v.abs()).sum::<f64>() + 1.0;
    (0..n)
        .map(|idx| {
            // idx-th largest = (n-1-idx)-th smallest
            let target = n - idx;
            let (mut lo, mut up) = (-1.0, hi);
            for _ in 0..200 {
                let mid = 0.5 * (lo + up);
                if count_below(g.data(), n, mid) >= target {
                    up = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + up)
        })
        .collect()
}

pub fn singular_values_match_gram_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(5, 4, &mut rng);
    let f = svd_decompose(&a).unwrap();
    let eig = gram_eigenvalues(&a);
    for (s, e) in f.sigma.iter().zip(&eig) {
        assert!((s * s - e).abs() < 1e-6, "{s}^2 vs {e}");
    }
}

pub fn eckart_young_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let p = rng.gen_range(1..=16);
        let q = rng.gen_range(1..=16);
        let a = random(p, q, &mut rng);
        let f = svd_decompose(&a).unwrap();
        let norm = a.frobenius();
        for k in 1..=p.min(q) {
            let err = truncate(&f, k).unwrap().reconstruct().unwrap().distance(&a).unwrap();
            let expected = f.sigma[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((err - expected).abs() <= 1e-6 * norm, "{p}x{q} k={k}: {err} vs {expected}");
        }
        // a tall copy so the oracle always works on the smaller Gram matrix
        let tall = if p >= q { a.clone() } else { a.transpose() };
        for (s, e) in f.sigma.iter().zip(gram_eigenvalues(&tall)) {
            assert!((s * s - e).abs() <= 1e-6 * norm * norm);
        }
    }
}


pub fn packet_sizes_over_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let meta = PacketMeta {
        sender: 1,
        round: 2,
        sample_start: 3,
    };
    for p in 8..=64 {
        for q in 2..=8 {
            let a = random(p, q, &mut rng);
            let f = svd_decompose(&a).unwrap();
            for k in 1..=q {
                let bytes = encode_packet(&truncate(&f, k).unwrap(), meta).unwrap().to_bytes();
                assert_eq!(bytes.len(), 26 + 2 * (p * k + k + k * q));
                assert_eq!(bytes.len(), factor_packet_bytes(p, q, k));
                for cut in [1, 2, bytes.len() - 26] {
                    assert!(FeaturePacket::from_bytes(&bytes[..bytes.len() - cut]).is_err());
                }
            }
        }
    }
}
