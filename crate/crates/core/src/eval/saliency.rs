use std::path::Path;

use crate::encoders::{HumanEncoder, Mode};
use crate::error::{PgdsError, Result};
use crate::image_tensor::ImageTensor;
use crate::nn::Matrix;

/// Per-pixel channel-max of |d||f|| / d(pixel)|, scaled so the maximum is 1.
/// Row-major `height x width`.
pub fn saliency_map(human: &HumanEncoder, image: &ImageTensor) -> Result<Vec<f64>> {
    let x = ImageTensor::batch(&[image])?;
    let pass = human.forward(&x, Mode::Eval, true, None)?;
    let norm = pass.embedding.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut d = Matrix::zeros(1, pass.embedding.cols);
    if norm > 0.0 {
        for (g, v) in d.data.iter_mut().zip(&pass.embedding.data) {
            *g = v / norm;
        }
    }
    let mut enc = human.clone();
    let dx = enc
        .backward(&pass, &d, &[], false, true)
        .expect("input gradient requested");
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let mut sal: Vec<f64> = (0..plane)
        .map(|p| (0..3).map(|c| dx.data[c * plane + p].abs()).fold(0.0, f64::max))
        .collect();
    let max = sal.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        sal.iter_mut().for_each(|v| *v /= max);
    }
    Ok(sal)
}

/// Blue-cyan-yellow-red ramp for values in [0, 1].
fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Writes `saliency` as a colour overlay on `image`.
pub fn write_saliency_overlay(image: &ImageTensor, saliency: &[f64], path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    if saliency.len() != h * w {
        return Err(PgdsError::domain("saliency map does not match the image size"));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(y, x);
            let c = colormap(saliency[y * w + x]);
            out.set_pixel(y, x, [0.5 * px[0] + 0.5 * c[0], 0.5 * px[1] + 0.5 * c[1], 0.5 * px[2] + 0.5 * c[2]]);
        }
    }
    out.save_png(path)
}

/// Computes the saliency map of `image` and writes its overlay to `path`.
pub fn saliency_heatmap(human: &HumanEncoder, image: &ImageTensor, path: &Path) -> Result<Vec<f64>> {
    let sal = saliency_map(human, image)?;
    write_saliency_overlay(image, &sal, path)?;
    Ok(sal)
}
