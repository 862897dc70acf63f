//! Synthetic stand-in for the cell-image dataset.
//!
//! Both classes are a pale disc on a light background. Parasitized cells carry
//! a few dark purple spots (ring-stage look-alikes); uninfected cells are smooth.
//! Useful for smoke tests and demos without the real data.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DataError;

const BACKGROUND: [f64; 3] = [236.0, 230.0, 232.0];
const CYTOPLASM: [f64; 3] = [214.0, 160.0, 170.0];
const PARASITE: [f64; 3] = [92.0, 40.0, 120.0];

/// Render one synthetic cell of side `size`.
pub fn synthetic_cell(size: u32, parasitized: bool, rng: &mut impl Rng) -> RgbImage {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let cy = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let radius = s * rng.random_range(0.36..0.44);
    let tint: f64 = rng.random_range(-12.0..12.0);
    let spots: Vec<(f64, f64, f64)> = if parasitized {
        (0..rng.random_range(2..=4))
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let dist = radius * rng.random_range(0.0..0.6);
                let r = s * rng.random_range(0.06..0.1);
                (cx + dist * angle.cos(), cy + dist * angle.sin(), r)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut noise = ChaCha8Rng::seed_from_u64(rng.random());
    RgbImage::from_fn(size, size, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let inside = (px - cx).hypot(py - cy) <= radius;
        let mut colour = if inside { CYTOPLASM } else { BACKGROUND };
        if inside
            && spots
                .iter()
                .any(|&(sx, sy, r)| (px - sx).hypot(py - sy) <= r)
        {
            colour = PARASITE;
        }
        let jitter: f64 = noise.random_range(-6.0..6.0);
        Rgb(colour.map(|c| (c + tint + jitter).clamp(0.0, 255.0) as u8))
    })
}

/// Write `per_class` images into `root/Parasitized` and `root/Uninfected`.
pub fn write_synthetic_dataset(
    root: impl AsRef<Path>,
    per_class: usize,
    size: u32,
    seed: u64,
) -> Result<(), DataError> {
    let root = root.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (dir, parasitized) in [("Parasitized", true), ("Uninfected", false)] {
        let dir = root.join(dir);
        std::fs::create_dir_all(&dir).map_err(|source| DataError::Io {
            path: dir.clone(),
            source,
        })?;
        for i in 0..per_class {
            let path = dir.join(format!("cell_{i:04}.png"));
            synthetic_cell(size, parasitized, &mut rng)
                .save(&path)
                .map_err(|e| DataError::Decode(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}
