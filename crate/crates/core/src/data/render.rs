use super::scene::Scene;
use crate::tensor::Tensor;

/// Background gray level.
pub const BACKGROUND: u8 = 128;

/// Rendered scene: interleaved 8-bit RGB rows plus one boolean mask per
/// shape (row-major, `width·height`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub masks: Vec<Vec<bool>>,
}

pub fn render(scene: &Scene) -> Rendered {
    let (w, h) = (scene.width, scene.height);
    let mut rgb = vec![BACKGROUND; w * h * 3];
    let masks = scene
        .shapes
        .iter()
        .map(|shape| {
            let mut mask = vec![false; w * h];
            let r = shape.radius;
            let (cx, cy) = shape.center;
            for y in cy.saturating_sub(r)..(cy + r + 1).min(h) {
                for x in cx.saturating_sub(r)..(cx + r + 1).min(w) {
                    if shape.contains(x, y) {
                        mask[y * w + x] = true;
                        rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&shape.color.rgb());
                    }
                }
            }
            mask
        })
        .collect();
    Rendered {
        width: w,
        height: h,
        rgb,
        masks,
    }
}

/// Interleaved RGB bytes to a `[3×H×W]` tensor in `[0, 1]`.
pub fn rgb_to_tensor(rgb: &[u8], width: usize, height: usize) -> Tensor {
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, height, width], data).expect("3·H·W values")
}

/// Inverse of [`rgb_to_tensor`] with rounding to the nearest level.
pub fn tensor_to_rgb(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = w * h;
    let d = image.data();
    (0..plane)
        .flat_map(|p| (0..3).map(move |c| (d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

pub fn mask_to_tensor(mask: &[bool], width: usize, height: usize) -> Tensor {
    Tensor::new(&[height, width], mask.iter().map(|&m| m as u8 as f64).collect()).expect("H·W values")
}
