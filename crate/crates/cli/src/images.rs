//! Conversion between netpbm files and network tensors.

use std::path::Path;

use hodinet_core::nn::resize;
use hodinet_core::Tensor;

use crate::error::{CliError, Result};
use crate::netpbm::{self, Image, NetpbmError};

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    netpbm::decode(&bytes).map_err(|source| CliError::Image {
        path: path.to_owned(),
        source,
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, netpbm::encode(img)).map_err(|e| CliError::io(path, e))
}

fn expect(path: &Path, img: &Image, channels: usize) -> Result<()> {
    if img.channels != channels {
        let expected = if channels == 3 { "P6 (RGB)" } else { "P5 (grayscale)" };
        return Err(CliError::Image {
            path: path.to_owned(),
            source: NetpbmError::WrongKind {
                expected,
                found: img.kind(),
            },
        });
    }
    Ok(())
}

/// `(1, c, H, W)` with samples scaled to `[0, 1]`.
pub fn to_tensor(img: &Image) -> Tensor {
    let (h, w, c) = (img.height, img.width, img.channels);
    Tensor::from_fn([1, c, h, w], |_, ch, y, x| img.data[(y * w + x) * c + ch] as f64 / 255.0)
}

/// Single-channel map to bytes, `floor(255 p + 0.5)` after clamping to `[0, 1]`.
pub fn to_gray(t: &Tensor) -> Image {
    let s = t.shape();
    assert_eq!((s.n(), s.c()), (1, 1), "expected a single map");
    let data = t
        .data()
        .iter()
        .map(|p| (255.0 * p.clamp(0.0, 1.0) + 0.5).floor() as u8)
        .collect();
    Image::gray(s.w(), s.h(), data)
}

/// RGB tensor `(1, 3, H, W)` to an interleaved image.
pub fn to_rgb(t: &Tensor) -> Image {
    let s = t.shape();
    assert_eq!((s.n(), s.c()), (1, 3), "expected an RGB tensor");
    let mut data = Vec::with_capacity(3 * s.h() * s.w());
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..3 {
                data.push((255.0 * t.get(0, c, y, x).clamp(0.0, 1.0) + 0.5).floor() as u8);
            }
        }
    }
    Image::rgb(s.w(), s.h(), data)
}

fn resized(t: Tensor, size: Option<(usize, usize)>) -> Result<Tensor> {
    Ok(match size {
        Some((h, w)) => resize(&t, h, w)?,
        None => t,
    })
}

/// RGB input, optionally resized. Also returns the original `(H, W)`.
pub fn load_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<(Tensor, (usize, usize))> {
    let img = read_image(path)?;
    expect(path, &img, 3)?;
    Ok((resized(to_tensor(&img), size)?, (img.height, img.width)))
}

/// Depth map `(1, 1, H, W)`, optionally resized.
pub fn load_depth(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let img = read_image(path)?;
    expect(path, &img, 1)?;
    resized(to_tensor(&img), size)
}

/// Saliency map `(1, 1, H, W)` at native size.
pub fn load_map(path: &Path) -> Result<Tensor> {
    load_depth(path, None)
}

/// Ground truth binarised at 0.5 after any resize.
pub fn load_mask(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let mut t = load_depth(path, size)?;
    t.data_mut().iter_mut().for_each(|v| *v = (*v >= 0.5) as u8 as f64);
    Ok(t)
}

pub fn save_map(path: &Path, t: &Tensor) -> Result<()> {
    write_image(path, &to_gray(t))
}
