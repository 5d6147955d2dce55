//! CHW float image tensors and the pixel-level operations shared by the
//! augmentation and encoding pipelines.
//!
//! Images are `Array3<f32>` with shape `(3, H, W)` and values in `[0, 1]`.
//! All geometry here is deterministic; nothing draws randomness.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::{Array3, Array4, ArrayView3};
use thiserror::Error;

pub type ImageTensor = Array3<f32>;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        source: image::ImageError,
    },
    #[error("image has zero width or height")]
    Empty,
}

/// Decode an image file into a CHW tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor, ImageError> {
    let img = image::open(path).map_err(|source| ImageError::Read {
        path: path.display().to_string(),
        source,
    })?;
    Ok(from_dynamic(&img))
}

pub fn from_dynamic(img: &DynamicImage) -> ImageTensor {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    out
}

pub fn to_rgb8(img: &ArrayView3<f32>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Encode a CHW tensor as a PNG file.
pub fn save_png(img: &ArrayView3<f32>, path: &Path) -> Result<(), ImageError> {
    to_rgb8(img).save(path).map_err(|source| ImageError::Write {
        path: path.display().to_string(),
        source,
    })
}

pub fn width(img: &ImageTensor) -> usize {
    img.shape()[2]
}

pub fn height(img: &ImageTensor) -> usize {
    img.shape()[1]
}

/// Bilinear resize to `(out_h, out_w)`. Uses the half-pixel-center convention
/// so that resizing to the same size is the identity.
pub fn resize_bilinear(img: &ArrayView3<f32>, out_h: usize, out_w: usize) -> ImageTensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let v00 = img[[ch, y0, x0]];
                let v01 = img[[ch, y0, x1]];
                let v10 = img[[ch, y1, x0]];
                let v11 = img[[ch, y1, x1]];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out[[ch, oy, ox]] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Extract the pixel rectangle `(x, y, w, h)`. Caller guarantees bounds.
pub fn crop_region(img: &ArrayView3<f32>, x: usize, y: usize, w: usize, h: usize) -> ImageTensor {
    img.slice(ndarray::s![.., y..y + h, x..x + w]).to_owned()
}

/// ITU-R 601 luma, replicated over all three channels.
pub fn to_grayscale(img: &ImageTensor) -> ImageTensor {
    let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = 0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]];
            for c in 0..3 {
                out[[c, y, x]] = l;
            }
        }
    }
    out
}

/// Stack same-shape images into an `(n, 3, H, W)` batch.
pub fn stack(images: &[ImageTensor]) -> Array4<f32> {
    assert!(!images.is_empty());
    let (c, h, w) = (
        images[0].shape()[0],
        images[0].shape()[1],
        images[0].shape()[2],
    );
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.shape(), images[0].shape(), "stack requires equal shapes");
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            ((c + 1) * (y * w + x)) as f32 / (3 * h * w) as f32
        })
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = ramp(7, 5);
        let out = resize_bilinear(&img.view(), 7, 5);
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_output_shape() {
        let img = ramp(10, 20);
        let out = resize_bilinear(&img.view(), 4, 4);
        assert_eq!(out.shape(), &[3, 4, 4]);
    }

    #[test]
    fn grayscale_channels_equal() {
        let img = ramp(4, 4);
        let g = to_grayscale(&img);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(g[[0, y, x]], g[[1, y, x]]);
                assert_eq!(g[[1, y, x]], g[[2, y, x]]);
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = ramp(6, 9);
        save_png(&img.view(), &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
