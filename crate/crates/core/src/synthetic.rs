//! Seeded synthetic segmentation samples: an ellipse or rectangle of one
//! texture over a background of another.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Ellipse,
    Rectangle,
}

/// One RGB image `[1, 3, H, W]` in `[0, 1]` and its binary mask `[1, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub shape: Shape,
}

/// Generate sample `index` of the stream identified by `seed`.
pub fn sample(seed: u64, index: u64, height: usize, width: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let shape = if rng.gen_bool(0.5) { Shape::Ellipse } else { Shape::Rectangle };
    let (hf, wf) = (height as f64, width as f64);
    let cy = rng.gen_range(0.3..0.7) * hf;
    let cx = rng.gen_range(0.3..0.7) * wf;
    let ry = rng.gen_range(0.12..0.3) * hf;
    let rx = rng.gen_range(0.12..0.3) * wf;
    let fg: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.55..0.95));
    let bg: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.05..0.45));
    let freq = rng.gen_range(0.2..0.6);
    let noise = 0.08;

    let inside = |y: usize, x: usize| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        match shape {
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
            Shape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    };
    let n = height * width;
    let mut mask = Vec::with_capacity(n);
    for y in 0..height {
        for x in 0..width {
            mask.push(inside(y, x) as u8 as f64);
        }
    }
    let mut image = Vec::with_capacity(3 * n);
    for c in 0..3 {
        for i in 0..n {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            let base = if mask[i] == 1.0 { fg[c] } else { bg[c] };
            // stripes on the background only, so texture also separates the regions
            let stripe = if mask[i] == 1.0 { 0.0 } else { 0.05 * libm::sin(freq * (x + y)) };
            let v = base + stripe + rng.gen_range(-noise..noise);
            image.push(v.clamp(0.0, 1.0));
        }
    }
    SyntheticSample {
        image: Tensor::new(&[1, 3, height, width], image).expect("length matches shape"),
        mask: Tensor::new(&[1, 1, height, width], mask).expect("length matches shape"),
        shape,
    }
}

/// `count` consecutive samples of one stream.
pub fn dataset(seed: u64, count: usize, height: usize, width: usize) -> Vec<SyntheticSample> {
    (0..count as u64).map(|i| sample(seed, i, height, width)).collect()
}
