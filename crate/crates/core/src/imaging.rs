//! Dense float images and their on-disk formats (8-bit PNG, 32-bit PFM).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major, interleaved-channel image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Shape(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.shape(), other.shape(), "image shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.shape() != other.shape() {
            return Err(ImageError::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    /// Writes a 1- or 3-channel image as 8-bit PNG, clamping to [0, 1].
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => return Err(ImageError::Shape(format!("cannot write {n}-channel PNG"))),
        };
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color).map_err(|e| ImageError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| ImageError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Image::from_vec(w as usize, h as usize, 3, data)
    }

    /// Encodes as little-endian PFM (`PF` for 3 channels, `Pf` for 1).
    pub fn to_pfm_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            n => return Err(ImageError::Shape(format!("cannot write {n}-channel PFM"))),
        };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        let mut buf = vec![0u8; row * 4];
        // PFM stores scanlines bottom to top.
        for y in (0..self.height).rev() {
            for (i, v) in self.data[y * row..(y + 1) * row].iter().enumerate() {
                LittleEndian::write_f32(&mut buf[i * 4..i * 4 + 4], *v as f32);
            }
            out.extend_from_slice(&buf);
        }
        Ok(out)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let bytes = self.to_pfm_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|source| ImageError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_pfm(BufReader::new(file)).map_err(|message| ImageError::Format {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn parse_pfm(mut reader: impl BufRead) -> Result<Image, String> {
        let mut header = Vec::new();
        while header.len() < 3 {
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(|e| e.to_string())? == 0 {
                return Err("truncated PFM header".into());
            }
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        let channels = match header[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(format!("bad PFM magic {other:?}")),
        };
        let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PFM dimension {s:?}"));
        let (width, height) = (parse_dim(&header[1])?, parse_dim(&header[2])?);
        if header.len() < 4 {
            let mut line = String::new();
            reader.read_line(&mut line).map_err(|e| e.to_string())?;
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        let scale: f64 = header
            .get(3)
            .ok_or("missing PFM scale")?
            .parse()
            .map_err(|_| "bad PFM scale".to_string())?;
        let row = width * channels;
        let mut bytes = vec![0u8; row * height * 4];
        reader
            .read_exact(&mut bytes)
            .map_err(|_| "truncated PFM payload".to_string())?;
        let mut data = vec![0.0; row * height];
        for (file_row, chunk) in bytes.chunks_exact(row * 4).enumerate() {
            let y = height - 1 - file_row;
            for i in 0..row {
                let b = &chunk[i * 4..i * 4 + 4];
                let v = if scale < 0.0 {
                    LittleEndian::read_f32(b)
                } else {
                    BigEndian::read_f32(b)
                };
                data[y * row + i] = v as f64;
            }
        }
        Image::from_vec(width, height, channels, data).map_err(|e| e.to_string())
    }
}
