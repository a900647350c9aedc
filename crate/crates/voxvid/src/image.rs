//! Linear-RGB images and binary PPM (P6, 8-bit) IO.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, VoxvidError};

/// Row-major RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image { width, height, pixels: vec![[0.0; 3]; (width * height) as usize] }
    }

    #[inline]
    pub fn at(&self, row: u32, col: u32) -> [f64; 3] {
        self.pixels[(row * self.width + col) as usize]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, rgb: [f64; 3]) {
        self.pixels[(row * self.width + col) as usize] = rgb;
    }

    /// 8-bit quantization used on disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() * 3);
        for px in &self.pixels {
            for &c in px {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let mut data = Vec::new();
    write!(data, "P6\n{} {}\n255\n", img.width, img.height)
        .expect("in-memory write cannot fail");
    data.extend_from_slice(&img.to_bytes());
    fs::write(path, data).map_err(|e| VoxvidError::io(path.display().to_string(), e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let data = fs::read(path).map_err(|e| VoxvidError::io(path.display().to_string(), e))?;
    parse_ppm(&data).map_err(|msg| {
        VoxvidError::Dataset(format!("{}: {msg}", path.display()))
    })
}

fn parse_ppm(data: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0usize;
    let mut token = |data: &[u8]| -> std::result::Result<String, String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };

    if token(data)? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let width: u32 = token(data)?.parse().map_err(|_| "bad width")?;
    let height: u32 = token(data)?.parse().map_err(|_| "bad height")?;
    let maxval: u32 = token(data)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = (width as usize) * (height as usize) * 3;
    if data.len() < pos + need {
        return Err("truncated pixel data".into());
    }
    let mut img = Image::new(width, height);
    for (i, px) in img.pixels.iter_mut().enumerate() {
        for c in 0..3 {
            px[c] = data[pos + i * 3 + c] as f64 / 255.0;
        }
    }
    Ok(img)
}
