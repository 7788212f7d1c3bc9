use rand::Rng;

use super::{AugmentationPolicy, ImageRGB8};
use crate::error::{Error, Result};
use crate::graph::InputSpec;
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resampling with half-pixel centers: output pixel `x` samples
/// source coordinate `(x + 0.5)·in/out − 0.5`, clamped to the image.
pub fn resize_bilinear(img: &ImageRGB8, out_w: u32, out_h: u32) -> Result<ImageRGB8> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    if (out_w, out_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let taps = |out: u32, inp: u32| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp as usize - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let xs = taps(out_w, img.width);
    let ys = taps(out_h, img.height);
    let w = img.width as usize;
    let src = &img.pixels;
    let mut pixels = Vec::with_capacity(3 * out_w as usize * out_h as usize);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..3 {
                let p = |x: usize, y: usize| src[3 * (y * w + x) + ch] as f32;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                pixels.push(to_u8(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    ImageRGB8::new(out_w, out_h, pixels)
}

/// The `w×h` subregion whose top-left corner is `(x, y)`.
pub fn crop(img: &ImageRGB8, x: u32, y: u32, w: u32, h: u32) -> Result<ImageRGB8> {
    if w == 0 || h == 0 || x + w > img.width || y + h > img.height {
        return Err(Error::InvalidArgument(format!(
            "crop {w}x{h}+{x}+{y} does not fit a {}x{} image",
            img.width, img.height
        )));
    }
    let stride = 3 * img.width as usize;
    let mut pixels = Vec::with_capacity(3 * w as usize * h as usize);
    for row in y..y + h {
        let start = row as usize * stride + 3 * x as usize;
        pixels.extend_from_slice(&img.pixels[start..start + 3 * w as usize]);
    }
    ImageRGB8::new(w, h, pixels)
}

/// Centered `w×h` crop; odd leftovers go to the right/bottom edge.
pub fn center_crop(img: &ImageRGB8, w: u32, h: u32) -> Result<ImageRGB8> {
    if w > img.width || h > img.height {
        return Err(Error::InvalidArgument(format!(
            "center crop {w}x{h} is larger than the {}x{} image",
            img.width, img.height
        )));
    }
    crop(img, (img.width - w) / 2, (img.height - h) / 2, w, h)
}

/// Square crop whose side is a random fraction (from `policy.crop_scale`) of
/// the shorter image side, placed uniformly at random.
pub fn random_crop<R: Rng + ?Sized>(
    img: &ImageRGB8,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<ImageRGB8> {
    policy.validate()?;
    let (lo, hi) = policy.crop_scale;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let min_side = img.width.min(img.height);
    let side = ((scale * min_side as f64).round() as u32).clamp(1, min_side);
    let x = rng.random_range(0..=img.width - side);
    let y = rng.random_range(0..=img.height - side);
    crop(img, x, y, side, side)
}

/// `k` quarter-turns counterclockwise. One turn maps `(x, y)` to
/// `(y, W − 1 − x)`.
pub fn rotate90(img: &ImageRGB8, k: u32) -> ImageRGB8 {
    let (w, h) = (img.width, img.height);
    match k % 4 {
        0 => img.clone(),
        1 => ImageRGB8::from_fn(h, w, |nx, ny| img.get(w - 1 - ny, nx)),
        2 => ImageRGB8::from_fn(w, h, |nx, ny| img.get(w - 1 - nx, h - 1 - ny)),
        _ => ImageRGB8::from_fn(h, w, |nx, ny| img.get(ny, h - 1 - nx)),
    }
}

/// Mirror across the vertical axis.
pub fn flip_horizontal(img: &ImageRGB8) -> ImageRGB8 {
    let w = img.width;
    ImageRGB8::from_fn(w, img.height, |x, y| img.get(w - 1 - x, y))
}

/// Normalized 1-D Gaussian taps over radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Result<Vec<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as i32;
    let denom = 2.0 * (sigma as f64) * (sigma as f64);
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / denom).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| (v / total) as f32).collect())
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &ImageRGB8, sigma: f32) -> Result<ImageRGB8> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let at = |v: isize, len: isize| v.clamp(0, len - 1) as usize;

    let mut horiz = vec![0.0f32; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0f32;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sx = at(x + t as isize - radius, w);
                    acc += kv * img.pixels[3 * (y as usize * w as usize + sx) + ch] as f32;
                }
                horiz[3 * (y as usize * w as usize + x as usize) + ch] = acc;
            }
        }
    }
    let mut pixels = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0f32;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sy = at(y + t as isize - radius, h);
                    acc += kv * horiz[3 * (sy * w as usize + x as usize) + ch];
                }
                pixels[3 * (y as usize * w as usize + x as usize) + ch] = to_u8(acc);
            }
        }
    }
    ImageRGB8::new(img.width, img.height, pixels)
}

/// Resize to the spec's size, scale to `[0, 1]`, normalize per channel and
/// lay out as `1×3×H×W`.
pub fn to_input_tensor(img: &ImageRGB8, spec: &InputSpec) -> Result<Tensor> {
    spec.validate()?;
    if spec.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "RGB images need a 3-channel input spec, got {}",
            spec.channels
        )));
    }
    let resized = resize_bilinear(img, spec.width as u32, spec.height as u32)?;
    let plane = spec.width * spec.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in resized.pixels.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = (px[ch] as f32 / 255.0 - spec.mean[ch]) / spec.std[ch];
        }
    }
    Tensor::new([1, 3, spec.height, spec.width], data)
}
