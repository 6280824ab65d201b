//! Deterministic stand-ins for image generation and image embedding, used by
//! the scripted and fallback backends.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const SYNTHETIC_DIMENSION: usize = 128;
const SYNTHETIC_SIDE: u32 = 64;
const GRID: u32 = 8;
const FEATURES: usize = (GRID * GRID * 3) as usize + 1;
const PROJECTION_SEED: [u8; 32] = *b"posterpanel grid embedder v1 ...";

/// A 64x64 image derived from a hash of `prompt`: a background plus a few
/// colored rectangles.
pub fn placeholder_image(prompt: &str) -> RgbImage {
    let seed: [u8; 32] = Sha256::digest(prompt.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let color = |rng: &mut ChaCha8Rng| Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
    let bg = color(&mut rng);
    let mut img = RgbImage::from_pixel(SYNTHETIC_SIDE, SYNTHETIC_SIDE, bg);
    for _ in 0..4 {
        let c = color(&mut rng);
        let x0 = rng.random_range(0..SYNTHETIC_SIDE - 8);
        let y0 = rng.random_range(0..SYNTHETIC_SIDE - 8);
        let x1 = rng.random_range(x0 + 4..=SYNTHETIC_SIDE);
        let y1 = rng.random_range(y0 + 4..=SYNTHETIC_SIDE);
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, c);
            }
        }
    }
    img
}

/// Block-mean color grid followed by a fixed random projection. Images with
/// different coarse layouts or palettes land in different directions.
pub struct SyntheticEmbedder {
    projection: Vec<f64>,
}

impl Default for SyntheticEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl SyntheticEmbedder {
    pub const ID: &'static str = "synthetic-grid8-d128-v1";

    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::from_seed(PROJECTION_SEED);
        let projection = (0..SYNTHETIC_DIMENSION * FEATURES)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SyntheticEmbedder { projection }
    }

    /// Unnormalized embedding; the gateway normalizes.
    pub fn embed(&self, img: &RgbImage) -> Vec<f64> {
        let f = grid_features(img);
        let mut out: Vec<f64> = (0..SYNTHETIC_DIMENSION)
            .map(|row| {
                let w = &self.projection[row * FEATURES..(row + 1) * FEATURES];
                w.iter().zip(&f).map(|(a, b)| a * b).sum()
            })
            .collect();
        if out.iter().all(|v| *v == 0.0) {
            out[0] = 1.0;
        }
        out
    }
}

fn grid_features(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width().max(1), img.height().max(1));
    let cells = (GRID * GRID) as usize;
    let mut sums = vec![0.0f64; cells * 3];
    let mut counts = vec![0u32; cells];
    for (x, y, p) in img.enumerate_pixels() {
        let cell = ((y * GRID / h) * GRID + x * GRID / w) as usize;
        counts[cell] += 1;
        for c in 0..3 {
            sums[cell * 3 + c] += p[c] as f64;
        }
    }
    let mut f: Vec<f64> = sums
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = counts[i / 3];
            if n == 0 {
                0.0
            } else {
                s / n as f64 / 255.0 - 0.5
            }
        })
        .collect();
    f.push(0.25);
    f
}
