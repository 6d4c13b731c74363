use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encoding: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decoding: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported image layout: {0}")]
    Layout(String),
}

/// Row-major `H·W·C` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Layout(format!("{} values for {width}×{height}×{channels}", data.len())));
        }
        Ok(Self { width, height, channels, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn encode<W: Write>(out: W, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, bytes: &[u8]) -> Result<(), ImageError> {
    let mut enc = png::Encoder::new(out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header()?.write_image_data(bytes)?;
    Ok(())
}

/// 8-bit RGB (or grayscale for one channel) PNG bytes; values are clamped
/// to [0, 1].
pub fn encode_png(img: &Image) -> Result<Vec<u8>, ImageError> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(ImageError::Layout(format!("{c} channels"))),
    };
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    encode(&mut out, img.width, img.height, color, png::BitDepth::Eight, &bytes)?;
    Ok(out)
}

pub fn write_png_rgb(path: impl AsRef<Path>, img: &Image) -> Result<(), ImageError> {
    let bytes = encode_png(img)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// 16-bit grayscale depth PNG in millimetres, saturating at 65.535 m.
pub fn write_png_depth16(path: impl AsRef<Path>, depth: &Image) -> Result<(), ImageError> {
    if depth.channels != 1 {
        return Err(ImageError::Layout(format!("depth must have 1 channel, got {}", depth.channels)));
    }
    let mut bytes = Vec::with_capacity(depth.data.len() * 2);
    for v in &depth.data {
        let mm = (v * 1000.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&mm.to_be_bytes());
    }
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, depth.width, depth.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)?;
    w.flush()?;
    Ok(())
}

/// Decodes an 8- or 16-bit grayscale/RGB(A) PNG into [0, 1] floats. Alpha
/// is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| ImageError::Layout("image too large".into()))?];
    let info = reader.next_frame(&mut buf)?;
    let (src_ch, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(ImageError::Layout(format!("{other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let sample = |k: usize| -> f64 {
        match info.bit_depth {
            png::BitDepth::Sixteen => u16::from_be_bytes([buf[2 * k], buf[2 * k + 1]]) as f64 / 65535.0,
            _ => buf[k] as f64 / 255.0,
        }
    };
    if !matches!(info.bit_depth, png::BitDepth::Eight | png::BitDepth::Sixteen) {
        return Err(ImageError::Layout(format!("bit depth {:?}", info.bit_depth)));
    }
    let mut img = Image::new(w, h, keep);
    for p in 0..w * h {
        for c in 0..keep {
            img.data[p * keep + c] = sample(p * src_ch + c);
        }
    }
    Ok(img)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_png(&bytes)
}

/// Raw float dump: three little-endian u32 (H, W, C) followed by `H·W·C`
/// little-endian f32 values.
pub fn write_raw_image(path: impl AsRef<Path>, img: &Image) -> Result<(), ImageError> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in [img.height, img.width, img.channels] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in &img.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(ImageError::Layout("truncated header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    if bytes.len() != 12 + 4 * n {
        return Err(ImageError::Layout(format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 12)));
    }
    let data = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Image::from_data(w, h, c, data)
}
