use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// RGB colours for classes `1..=classes`; index 0 is black background.
pub fn palette(classes: usize, seed: u64) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colours = vec![[0, 0, 0]];
    for _ in 0..classes {
        colours.push([rng.gen_range(48..=255), rng.gen_range(48..=255), rng.gen_range(48..=255)]);
    }
    colours
}

/// Binary PPM (P6, maxval 255) with one pixel per raster cell.
pub fn render_class_map(labels: &[i32], height: usize, width: usize, classes: usize, seed: u64) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::dim(format!(
            "{} labels for a {height}x{width} raster",
            labels.len()
        )));
    }
    let colours = palette(classes, seed);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(labels.len() * 3);
    for &l in labels {
        let c = usize::try_from(l)
            .ok()
            .and_then(|i| colours.get(i))
            .ok_or_else(|| Error::arg(format!("label {l} outside [0, {classes}]")))?;
        out.extend_from_slice(c);
    }
    Ok(out)
}

pub fn write_class_map(path: &Path, labels: &[i32], height: usize, width: usize, classes: usize, seed: u64) -> Result<()> {
    std::fs::write(path, render_class_map(labels, height, width, classes, seed)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size() {
        let img = render_class_map(&[0, 1, 2, 1, 0, 2], 2, 3, 2, 0).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 18);
    }

    #[test]
    fn background_is_black() {
        let img = render_class_map(&[0; 12], 3, 4, 5, 9).unwrap();
        assert!(img[b"P6\n4 3\n255\n".len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn palette_is_seeded() {
        assert_eq!(palette(6, 3), palette(6, 3));
        assert_ne!(palette(6, 3), palette(6, 4));
        assert!(palette(6, 3)[1..].iter().all(|c| c.iter().any(|&v| v > 0)));
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(render_class_map(&[3], 1, 1, 2, 0).is_err());
        assert!(render_class_map(&[-1], 1, 1, 2, 0).is_err());
    }
}
