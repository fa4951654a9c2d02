//! Pixel-level helpers shared by scene synthesis, the model and evaluation.

use crate::geometry::BBox;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Pixel, Rgb32FImage, RgbImage, Rgba, RgbaImage};

/// Alpha-blends `patch`, resized to the pixel extent of `bbox`, onto a copy
/// of `background`.
pub fn composite(background: &RgbImage, patch: &RgbaImage, bbox: &BBox) -> RgbImage {
    let mut out = background.clone();
    paste(&mut out, patch, bbox);
    out
}

/// In-place variant of [`composite`].
pub fn paste(target: &mut RgbImage, patch: &RgbaImage, bbox: &BBox) {
    let (w, h) = target.dimensions();
    let (x0, y0, x1, y1) = bbox.pixel_rect(w, h);
    if x1 <= x0 || y1 <= y0 || patch.width() == 0 || patch.height() == 0 {
        return;
    }
    let (pw, ph) = (x1 - x0, y1 - y0);
    let resized;
    let src = if patch.dimensions() == (pw, ph) {
        patch
    } else {
        resized = imageops::resize(patch, pw, ph, FilterType::Triangle);
        &resized
    };
    for (px, py, p) in src.enumerate_pixels() {
        let a = p[3] as u32;
        if a == 0 {
            continue;
        }
        let dst = target.get_pixel_mut(x0 + px, y0 + py);
        for c in 0..3 {
            let v = (a * p[c] as u32 + (255 - a) * dst[c] as u32 + 127) / 255;
            dst[c] = v as u8;
        }
    }
}

/// Resizes `patch` to fit a `size x size` square preserving aspect ratio,
/// centered on a transparent canvas.
pub fn letterbox(patch: &RgbaImage, size: u32) -> RgbaImage {
    let mut canvas = RgbaImage::from_pixel(size, size, Rgba([0, 0, 0, 0]));
    let Some((nw, nh, ox, oy)) = letterbox_rect(patch.dimensions(), size) else {
        return canvas;
    };
    let resized = imageops::resize(patch, nw, nh, FilterType::Triangle);
    imageops::overlay(&mut canvas, &resized, ox as i64, oy as i64);
    canvas
}

/// Size `(w, h)` and offset `(x, y)` of a patch scaled to fit a `size`
/// square, centered; `None` for empty inputs.
pub fn letterbox_rect((w, h): (u32, u32), size: u32) -> Option<(u32, u32, u32, u32)> {
    if w == 0 || h == 0 || size == 0 {
        return None;
    }
    let scale = size as f64 / w.max(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).clamp(1, size);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, size);
    Some((nw, nh, (size - nw) / 2, (size - nh) / 2))
}

pub fn to_float(img: &RgbImage) -> Rgb32FImage {
    ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        image::Rgb([
            p[0] as f32 / 255.0,
            p[1] as f32 / 255.0,
            p[2] as f32 / 255.0,
        ])
    })
}

pub fn to_u8(img: &Rgb32FImage) -> RgbImage {
    ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        image::Rgb(p.0.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Separable Gaussian blur with kernel radius `ceil(3 sigma)` and clamped
/// edges. `sigma == 0` returns the input unchanged.
pub fn gaussian_smooth<P>(
    img: &ImageBuffer<P, Vec<f32>>,
    sigma: f64,
) -> Result<ImageBuffer<P, Vec<f32>>, String>
where
    P: Pixel<Subpixel = f32>,
{
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(format!(
            "smoothing sigma must be finite and non-negative, got {sigma}"
        ));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let ch = P::CHANNEL_COUNT as usize;
    let src = img.as_raw();
    let idx = |x: i64, y: i64| ((y * w + x) as usize) * ch;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f64;
                for (i, k) in kernel.iter().enumerate() {
                    let xx = (x + i as i64 - r).clamp(0, w - 1);
                    acc += k * src[idx(xx, y) + c] as f64;
                }
                tmp[idx(x, y) + c] = acc as f32;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f64;
                for (i, k) in kernel.iter().enumerate() {
                    let yy = (y + i as i64 - r).clamp(0, h - 1);
                    acc += k * tmp[idx(x, yy) + c] as f64;
                }
                out[idx(x, y) + c] = acc as f32;
            }
        }
    }
    Ok(ImageBuffer::from_raw(img.width(), img.height(), out).expect("same dimensions"))
}

/// Normalized 1-D Gaussian weights over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opaque_patch_replaces_pixels() {
        let bg = RgbImage::from_pixel(8, 8, image::Rgb([10, 20, 30]));
        let patch = RgbaImage::from_pixel(4, 2, Rgba([200, 100, 50, 255]));
        let b = BBox::from_pixel_rect(2, 3, 6, 5, 8, 8).unwrap();
        let out = composite(&bg, &patch, &b);
        assert_eq!(out.get_pixel(2, 3).0, [200, 100, 50]);
        assert_eq!(out.get_pixel(5, 4).0, [200, 100, 50]);
        assert_eq!(out.get_pixel(6, 4).0, [10, 20, 30]);
        assert_eq!(out.get_pixel(2, 5).0, [10, 20, 30]);
    }

    #[test]
    fn transparent_patch_is_noop() {
        let bg = RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]));
        let patch = RgbaImage::from_pixel(3, 3, Rgba([255, 255, 255, 0]));
        let b = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        assert_eq!(composite(&bg, &patch, &b), bg);
    }

    #[test]
    fn letterbox_keeps_aspect() {
        let patch = RgbaImage::from_pixel(8, 4, Rgba([9, 9, 9, 255]));
        let out = letterbox(&patch, 16);
        assert_eq!(out.dimensions(), (16, 16));
        assert_eq!(out.get_pixel(8, 1)[3], 0);
        assert_eq!(out.get_pixel(8, 8)[3], 255);
    }
}
