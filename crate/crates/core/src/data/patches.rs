use super::MultimodalDataset;
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 7;

/// Patches around labelled pixels together with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// `[B, c, s, s]`.
    pub patches: Tensor,
    /// One-hot `[B, C]`.
    pub targets: Tensor,
    /// Zero-based class of each patch.
    pub labels: Vec<usize>,
    /// Pixel index of each patch centre.
    pub indices: Vec<usize>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `rows` of every field.
    pub fn gather(&self, rows: &[usize]) -> Result<PatchSet> {
        Ok(PatchSet {
            patches: self.patches.gather_batch(rows)?,
            targets: self.targets.gather_batch(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        })
    }
}

/// Mirror index without repeating the edge: `-1 → 1`, `n → n − 2`.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn extract_patches(d: &MultimodalDataset, indices: &[usize], modality: Modality) -> Result<PatchSet> {
    extract_patches_sized(d, indices, modality, PATCH_SIZE)
}

/// Square `size × size` neighbourhoods by reflection padding. Background
/// centres are dropped.
pub fn extract_patches_sized(
    d: &MultimodalDataset,
    indices: &[usize],
    modality: Modality,
    size: usize,
) -> Result<PatchSet> {
    if indices.is_empty() {
        return Err(Error::arg("no pixel indices to extract"));
    }
    if size.is_multiple_of(2) {
        return Err(Error::arg(format!("patch size {size} must be odd")));
    }
    let (h, w) = (d.height, d.width);
    let raster = d.raster(modality);
    let c = raster.shape()[2];
    let src = raster.data();
    let half = (size / 2) as isize;
    let kept: Vec<usize> = indices.iter().copied().filter(|&i| d.labels.get(i).is_some_and(|&l| l > 0)).collect();
    if let Some(&bad) = indices.iter().find(|&&i| i >= h * w) {
        return Err(Error::arg(format!("pixel index {bad} outside the raster")));
    }
    if kept.is_empty() {
        return Err(Error::arg("every requested pixel is background"));
    }
    let classes = d.class_count;
    let mut patches = vec![0.0f32; kept.len() * c * size * size];
    let mut targets = vec![0.0f32; kept.len() * classes];
    let mut labels = Vec::with_capacity(kept.len());
    for (b, &idx) in kept.iter().enumerate() {
        let (r0, c0) = ((idx / w) as isize, (idx % w) as isize);
        let out = &mut patches[b * c * size * size..(b + 1) * c * size * size];
        for dy in 0..size {
            let r = reflect(r0 + dy as isize - half, h);
            for dx in 0..size {
                let col = reflect(c0 + dx as isize - half, w);
                let px = &src[(r * w + col) * c..(r * w + col + 1) * c];
                for (ch, &v) in px.iter().enumerate() {
                    out[(ch * size + dy) * size + dx] = v;
                }
            }
        }
        let label = (d.labels[idx] - 1) as usize;
        targets[b * classes + label] = 1.0;
        labels.push(label);
    }
    Ok(PatchSet {
        patches: Tensor::new(vec![kept.len(), c, size, size], patches)?,
        targets: Tensor::new(vec![kept.len(), classes], targets)?,
        labels,
        indices: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn scene() -> MultimodalDataset {
        let mut d = synth_generate(&SynthConfig {
            height: 9,
            width: 8,
            classes: 3,
            bands1: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        d.labels.iter_mut().for_each(|l| *l = 1 + (*l).max(0) % 3);
        d
    }

    #[test]
    fn centre_matches_raster() {
        let d = scene();
        let idx = 4 * 8 + 3;
        let p = extract_patches(&d, &[idx], Modality::M1).unwrap();
        for ch in 0..2 {
            assert_eq!(p.patches.data()[(ch * 7 + 3) * 7 + 3], d.modality1.data()[idx * 2 + ch]);
        }
        assert_eq!(p.targets.data()[p.labels[0]], 1.0);
    }

    #[test]
    fn corner_reflects_without_repeating_the_edge() {
        let d = scene();
        let p = extract_patches(&d, &[0], Modality::M2).unwrap();
        // patch row 0 is raster row 3; row 2 is raster row 1 (reflected)
        for dx in 0..7 {
            let col = reflect(dx as isize - 3, 8);
            assert_eq!(p.patches.data()[dx], d.modality2.data()[3 * 8 + col]);
            assert_eq!(p.patches.data()[2 * 7 + dx], d.modality2.data()[8 + col]);
            assert_eq!(p.patches.data()[4 * 7 + dx], d.modality2.data()[8 + col]);
        }
    }

    #[test]
    fn background_is_dropped() {
        let mut d = scene();
        d.labels[5] = 0;
        let p = extract_patches(&d, &[4, 5, 6], Modality::M1).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.indices, vec![4, 6]);
        assert!(extract_patches(&d, &[], Modality::M1).is_err());
        assert!(extract_patches(&d, &[1000], Modality::M1).is_err());
    }

    #[test]
    fn reflection_stays_in_range() {
        for n in 1..12 {
            for i in -20..30 {
                assert!(reflect(i, n) < n);
            }
        }
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
    }
}
