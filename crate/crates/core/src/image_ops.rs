//! Raster images, side-by-side combination and data-URL encoding.

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{ImageFormat, RgbImage};

pub const DATA_URL_PREFIX: &str = "data:image/png;base64,";

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("no images to combine")]
    Empty,
    #[error("invalid image geometry {width}x{height} with {len} bytes")]
    Geometry { width: u32, height: u32, len: usize },
    #[error("cannot read image {path}: {message}")]
    Read { path: String, message: String },
    #[error("cannot write image {path}: {message}")]
    Write { path: String, message: String },
    #[error("png encoding failed: {0}")]
    Encode(String),
    #[error("not a png data url")]
    NotDataUrl,
    #[error("decode failed: {0}")]
    Decode(String),
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width as usize * height as usize * 3 {
            return Err(ImageError::Geometry {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn solid(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.iter().copied().cycle().take(n * 3).collect())
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

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Loads PNG or JPEG from disk. Alpha is flattened onto white.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: image::DynamicImage) -> Self {
        let rgba = img.into_rgba8();
        let (width, height) = rgba.dimensions();
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for p in rgba.pixels() {
            let [r, g, b, a] = p.0;
            pixels.extend([over_white(r, a), over_white(g, a), over_white(b, a)]);
        }
        Self { width, height, pixels }
    }

    /// Writes a PNG, creating missing parent directories.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.encode_png()?;
        let write_err = |e: std::io::Error| ImageError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(write_err)?;
        }
        std::fs::write(path, bytes).map_err(write_err)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let buf = RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("geometry checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        Ok(Self::from_dynamic(img))
    }

    /// Nearest-neighbour resize to the given geometry, sampling at pixel centres.
    pub fn resize_nearest(&self, width: u32, height: u32) -> Self {
        let (sw, sh) = (self.width as u64, self.height as u64);
        let (dw, dh) = (width as u64, height as u64);
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..dh {
            let sy = ((2 * y + 1) * sh / (2 * dh)) as u32;
            for x in 0..dw {
                let sx = ((2 * x + 1) * sw / (2 * dw)) as u32;
                pixels.extend(self.pixel(sx, sy));
            }
        }
        Self { width, height, pixels }
    }
}

fn over_white(c: u8, a: u8) -> u8 {
    let (c, a) = (c as u32, a as u32);
    ((c * a + 255 * (255 - a) + 127) / 255) as u8
}

/// Width of an image after aspect-preserving scaling to `target_height`.
///
/// Rounds to nearest, halves up, never below one pixel.
pub fn scaled_width(width: u32, height: u32, target_height: u32) -> u32 {
    let w = (2 * width as u64 * target_height as u64 + height as u64) / (2 * height as u64);
    w.max(1) as u32
}

/// Places the images left to right after scaling each to the tallest height.
pub fn combine(images: &[RasterImage]) -> Result<RasterImage, ImageError> {
    let height = images.iter().map(RasterImage::height).max().ok_or(ImageError::Empty)?;
    if images.len() == 1 {
        return Ok(images[0].clone());
    }
    let scaled: Vec<RasterImage> = images
        .iter()
        .map(|img| {
            if img.height == height {
                img.clone()
            } else {
                img.resize_nearest(scaled_width(img.width, img.height, height), height)
            }
        })
        .collect();
    let width: u32 = scaled.iter().map(RasterImage::width).sum();
    let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height as usize {
        for img in &scaled {
            let row = img.width as usize * 3;
            pixels.extend_from_slice(&img.pixels[y * row..(y + 1) * row]);
        }
    }
    RasterImage::new(width, height, pixels)
}

/// PNG-encodes the image as a `data:image/png;base64,` URL.
pub fn encode_for_wire(image: &RasterImage) -> Result<String, ImageError> {
    let png = image.encode_png()?;
    Ok(format!(
        "{DATA_URL_PREFIX}{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}

pub fn decode_data_url(url: &str) -> Result<RasterImage, ImageError> {
    let payload = url.strip_prefix(DATA_URL_PREFIX).ok_or(ImageError::NotDataUrl)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload)
        .map_err(|e| ImageError::Decode(e.to_string()))?;
    RasterImage::decode_png(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const RED: [u8; 3] = [255, 0, 0];
    const BLUE: [u8; 3] = [0, 0, 255];

    #[test]
    fn singleton_is_identity() {
        let img = RasterImage::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(combine(std::slice::from_ref(&img)).unwrap(), img);
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(combine(&[]), Err(ImageError::Empty)));
    }

    #[test]
    fn red_blue_pixel_buffer() {
        let red = RasterImage::solid(2, 2, RED).unwrap();
        let blue = RasterImage::solid(2, 2, BLUE).unwrap();
        let out = combine(&[red, blue]).unwrap();
        assert_eq!((out.width(), out.height()), (4, 2));
        #[rustfmt::skip]
        let expected: Vec<u8> = vec![
            255, 0, 0, 255, 0, 0, 0, 0, 255, 0, 0, 255,
            255, 0, 0, 255, 0, 0, 0, 0, 255, 0, 0, 255,
        ];
        assert_eq!(out.pixels(), expected.as_slice());
    }

    #[test]
    fn wide_and_tall_geometry() {
        let wide = RasterImage::solid(4, 2, RED).unwrap();
        let tall = RasterImage::solid(2, 4, BLUE).unwrap();
        let out = combine(&[wide, tall]).unwrap();
        assert_eq!((out.width(), out.height()), (10, 4));
        assert_eq!(out.pixel(7, 3), RED);
        assert_eq!(out.pixel(8, 0), BLUE);
    }

    #[test]
    fn alpha_flattens_onto_white() {
        assert_eq!(over_white(0, 0), 255);
        assert_eq!(over_white(0, 255), 0);
        assert_eq!(over_white(200, 255), 200);
        assert_eq!(over_white(0, 128), 127);
    }

    #[test]
    fn data_url_prefix_and_round_trip() {
        let black = RasterImage::solid(1, 1, [0, 0, 0]).unwrap();
        let url = encode_for_wire(&black).unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        assert_eq!(decode_data_url(&url).unwrap(), black);
        assert!(matches!(decode_data_url("data:image/jpeg;base64,AA"), Err(ImageError::NotDataUrl)));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(RasterImage::new(0, 1, vec![]).is_err());
        assert!(RasterImage::new(2, 2, vec![0; 11]).is_err());
    }
}
