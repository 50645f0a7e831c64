use rand::Rng;

use crate::image_tensor::ImageTensor;
use crate::rng::{self, tag};

const FLIP_P: f64 = 0.5;
const ERASE_P: f64 = 0.5;
const ERASE_AREA: (f64, f64) = (0.02, 0.4);
const ERASE_ASPECT: (f64, f64) = (0.3, 3.3);
const ERASE_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseRect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl EraseRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentOutcome {
    pub flipped: bool,
    pub erased: Option<EraseRect>,
}

/// Random horizontal flip then random erasing, both with probability 0.5.
pub fn augment(image: &ImageTensor, seed: u64) -> ImageTensor {
    augment_detailed(image, seed).0
}

pub fn augment_detailed(image: &ImageTensor, seed: u64) -> (ImageTensor, AugmentOutcome) {
    let mut rng = rng::stream(seed, &[tag::AUGMENT]);
    let mut outcome = AugmentOutcome::default();
    let mut out = if rng.random::<f64>() < FLIP_P {
        outcome.flipped = true;
        image.flip_horizontal()
    } else {
        image.clone()
    };
    if rng.random::<f64>() < ERASE_P {
        let (h, w) = (out.height(), out.width());
        let area = (h * w) as f64;
        for _ in 0..ERASE_ATTEMPTS {
            let target = rng.random_range(ERASE_AREA.0..ERASE_AREA.1) * area;
            let aspect = rng
                .random_range(ERASE_ASPECT.0.ln()..ERASE_ASPECT.1.ln())
                .exp();
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let rect = EraseRect {
                y0: rng.random_range(0..=h - eh),
                x0: rng.random_range(0..=w - ew),
                height: eh,
                width: ew,
            };
            for y in rect.y0..rect.y0 + eh {
                for x in rect.x0..rect.x0 + ew {
                    let noise = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                    out.set_pixel(y, x, noise);
                }
            }
            outcome.erased = Some(rect);
            break;
        }
    }
    (out, outcome)
}
