//! RGB images: decoding, geometric transforms, preprocessing into model
//! input tensors, and the seeded training-time augmentation pipeline.

mod augment;
mod transform;

use std::io::Cursor;

use crate::error::{Error, Result};

pub use augment::{augment, drawn_rotation, AugmentationPolicy};
pub use transform::{
    center_crop, crop, flip_horizontal, gaussian_blur, gaussian_kernel, random_crop,
    resize_bilinear, rotate90, to_input_tensor,
};

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageRGB8 {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageRGB8 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageRGB8({}x{})", self.width, self.height)
    }
}

impl ImageRGB8 {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != 3 * width as usize * height as usize {
            return Err(Error::InvalidArgument(format!(
                "a {width}x{height} RGB image needs {} bytes, got {}",
                3 * width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(ImageRGB8 {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        ImageRGB8::new(width, height, pixels).expect("from_fn dimensions must be positive")
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageFormat {
    Png,
    Jpeg,
}

impl ImageFormat {
    /// Identifies PNG and JPEG streams by their signatures.
    pub fn sniff(bytes: &[u8]) -> Option<ImageFormat> {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Some(ImageFormat::Png)
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            Some(ImageFormat::Jpeg)
        } else {
            None
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Jpeg => "jpg",
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            ImageFormat::Png => "image/png",
            ImageFormat::Jpeg => "image/jpeg",
        }
    }

    fn codec(self) -> image::ImageFormat {
        match self {
            ImageFormat::Png => image::ImageFormat::Png,
            ImageFormat::Jpeg => image::ImageFormat::Jpeg,
        }
    }
}

/// Decodes to RGB: alpha is dropped and grayscale is replicated.
pub fn decode(bytes: &[u8], format: ImageFormat) -> Result<ImageRGB8> {
    let img = image::load_from_memory_with_format(bytes, format.codec())
        .map_err(|e| Error::Decode(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    ImageRGB8::new(w, h, img.into_raw())
}

/// Decodes a PNG or JPEG stream, identified by its signature.
pub fn decode_any(bytes: &[u8]) -> Result<ImageRGB8> {
    let format = ImageFormat::sniff(bytes)
        .ok_or_else(|| Error::Decode("not a PNG or JPEG stream".into()))?;
    decode(bytes, format)
}

pub fn encode_png(img: &ImageRGB8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::write_buffer_with_format(
        &mut Cursor::new(&mut out),
        &img.pixels,
        img.width,
        img.height,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Decode(format!("png encode failed: {e}")))?;
    Ok(out)
}
