use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MultimodalDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of labelled pixels held out for testing.
pub const TEST_FRACTION: f64 = 0.05;

/// A pixel is background when its two nearest region centres are closer in
/// distance than this.
const BOUNDARY_MARGIN: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub bands1: usize,
    pub bands2: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            height: 64,
            width: 64,
            classes: 6,
            bands1: 8,
            bands2: 1,
            noise: 0.1,
        }
    }
}

/// Per-class clean signatures. Row 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Signatures {
    pub modality1: Vec<Vec<f64>>,
    pub modality2: Vec<Vec<f64>>,
}

impl Signatures {
    /// Modality 1 confuses classes 1/2 and 3/4; modality 2 confuses 1/3 and
    /// 2/4. Every class keeps a distinct joint signature.
    pub fn generate(classes: usize, bands1: usize, bands2: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut modality1: Vec<Vec<f64>> = (0..=classes).map(|_| smooth_curve(bands1, rng)).collect();
        if classes >= 2 {
            modality1[2] = modality1[1].clone();
        }
        if classes >= 4 {
            modality1[4] = modality1[3].clone();
        }
        let mut levels: Vec<f64> = (0..classes)
            .map(|k| 0.1 + 0.8 * k as f64 / (classes - 1).max(1) as f64)
            .collect();
        levels.shuffle(rng);
        let mut level = vec![0.0];
        level.extend(levels);
        if classes >= 3 {
            level[3] = level[1];
        }
        if classes >= 4 {
            level[4] = level[2];
        }
        let modality2 = level
            .iter()
            .map(|&l| (0..bands2).map(|j| l + 0.1 * j as f64).collect())
            .collect();
        Signatures { modality1, modality2 }
    }
}

/// Random values in [0.1, 0.9] smoothed by a three-tap moving average.
fn smooth_curve(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Voronoi label regions with background along region boundaries.
fn label_regions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<i32> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.classes);
    let cells = (3 * c).max(12);
    let centers: Vec<(f64, f64)> = (0..cells)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
        .collect();
    let mut cycle: Vec<i32> = (1..=c as i32).collect();
    cycle.shuffle(rng);
    let classes: Vec<i32> = cycle.iter().copied().cycle().take(cells).collect();
    let mut labels = vec![0; h * w];
    for r in 0..h {
        for col in 0..w {
            let (y, x) = (r as f64 + 0.5, col as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            let mut second = f64::INFINITY;
            for (i, &(cy, cx)) in centers.iter().enumerate() {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                if d < best.0 {
                    second = best.0;
                    best = (d, i);
                } else if d < second {
                    second = d;
                }
            }
            if second - best.0 >= BOUNDARY_MARGIN {
                labels[r * w + col] = classes[best.1];
            }
        }
    }
    labels
}

/// Generates a co-registered two-modality scene in which each modality alone
/// confuses class pairs that the other modality separates.
pub fn synth_generate(cfg: &SynthConfig) -> Result<MultimodalDataset> {
    if cfg.classes < 2 {
        return Err(Error::arg("synthetic scenes need at least two classes"));
    }
    if cfg.height < 7 || cfg.width < 7 {
        return Err(Error::arg("synthetic scenes need at least 7x7 pixels"));
    }
    if cfg.bands1 == 0 || cfg.bands2 == 0 {
        return Err(Error::arg("band counts must be positive"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::arg("noise must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sig = Signatures::generate(cfg.classes, cfg.bands1, cfg.bands2, &mut rng);
    let labels = label_regions(cfg, &mut rng);
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::arg(e.to_string()))?;
    let mut raster = |sigs: &[Vec<f64>], bands: usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity(labels.len() * bands);
        for &l in &labels {
            for &v in &sigs[l as usize] {
                data.push((v + normal.sample(&mut rng)) as f32);
            }
        }
        Tensor::new(vec![cfg.height, cfg.width, bands], data)
    };
    let modality1 = raster(&sig.modality1, cfg.bands1)?;
    let modality2 = raster(&sig.modality2, cfg.bands2)?;

    let mut labelled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    labelled.shuffle(&mut rng);
    let n_test = ((labelled.len() as f64) * TEST_FRACTION).round() as usize;
    let mut test_idx = labelled[..n_test].to_vec();
    let mut train_idx = labelled[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let d = MultimodalDataset {
        modality1,
        modality2,
        labels,
        height: cfg.height,
        width: cfg.width,
        class_count: cfg.classes,
        train_idx,
        test_idx,
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg).unwrap().to_bytes().unwrap();
        let b = synth_generate(&cfg).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let other = synth_generate(&SynthConfig { seed: 1, ..cfg }).unwrap().to_bytes().unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn noiseless_signatures_are_constant_per_class() {
        let d = synth_generate(&SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let c = d.channels(crate::model::Modality::M1);
        let mut first: Vec<Option<&[f32]>> = vec![None; d.class_count + 1];
        for (i, &l) in d.labels.iter().enumerate() {
            let px = &d.modality1.data()[i * c..(i + 1) * c];
            match first[l as usize] {
                None => first[l as usize] = Some(px),
                Some(f) => assert_eq!(f, px),
            }
        }
    }

    #[test]
    fn every_class_appears_and_split_is_95_5() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        for k in 1..=d.class_count as i32 {
            assert!(d.labels.contains(&k), "class {k} missing");
        }
        let n = d.train_idx.len() + d.test_idx.len();
        assert_eq!(d.test_idx.len(), (n as f64 * 0.05).round() as usize);
        assert!(d.labels.contains(&0));
    }

    #[test]
    fn collisions_are_resolved_jointly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Signatures::generate(6, 8, 1, &mut rng);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert_eq!(dist(&s.modality1[1], &s.modality1[2]), 0.0);
        assert_eq!(dist(&s.modality1[3], &s.modality1[4]), 0.0);
        assert_eq!(dist(&s.modality2[1], &s.modality2[3]), 0.0);
        assert_eq!(dist(&s.modality2[2], &s.modality2[4]), 0.0);
        for i in 1..=6 {
            for j in i + 1..=6 {
                let joint = dist(&s.modality1[i], &s.modality1[j]) + dist(&s.modality2[i], &s.modality2[j]);
                assert!(joint > 1e-3, "classes {i} and {j} collide jointly");
            }
        }
    }
}
