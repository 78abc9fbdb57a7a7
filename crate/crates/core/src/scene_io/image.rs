//! Floating-point image planes and their two on-disk encodings: 8-bit PNG
//! (gamma 2.2, for viewing) and little-endian portable float map (lossless
//! at single precision, used for every metric).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read};
use std::path::Path;

use crate::error::{Error, Result};

pub const DISPLAY_GAMMA: f64 = 2.2;

/// Row-major `height × width × channels` plane of linear values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, &vec![0.0; channels])
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let data = (0..width * height)
            .flat_map(|_| value.iter().copied())
            .collect();
        ImageBuffer {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!(
                "image shape {width}x{height}x{channels} is not supported"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "image dimensions differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel channel mean.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|p| p.iter().sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Every value rounded to single precision, i.e. what a float-map round trip yields.
    pub fn quantized_f32(&self) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|v| *v as f32 as f64).collect(),
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Pfm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => Ok(ImageFormat::Png),
            Some("pfm") => Ok(ImageFormat::Pfm),
            _ => Err(Error::UnsupportedFormat(format!(
                "{}: expected a .png or .pfm extension",
                path.display()
            ))),
        }
    }
}

pub fn write_image(path: impl AsRef<Path>, image: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    match ImageFormat::from_path(path)? {
        ImageFormat::Png => write_png(path, image),
        ImageFormat::Pfm => write_pfm(path, image),
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    match ImageFormat::from_path(path)? {
        ImageFormat::Png => read_png(path),
        ImageFormat::Pfm => read_pfm(path),
    }
}

/// `round(255 · clamp(v, 0, 1)^(1/2.2))`.
pub fn encode_display_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * v.powf(1.0 / DISPLAY_GAMMA)).round() as u8
}

pub fn decode_display_byte(b: u8) -> f64 {
    (b as f64 / 255.0).powf(DISPLAY_GAMMA)
}

pub fn encode_pfm(image: &ImageBuffer) -> Result<Vec<u8>> {
    let tag = match image.channels {
        3 => "PF",
        1 => "Pf",
        c => {
            return Err(Error::UnsupportedFormat(format!(
                "float map with {c} channels"
            )))
        }
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    let row_len = image.width * image.channels;
    // float maps store scanlines bottom to top
    for row in image.data.chunks_exact(row_len).rev() {
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], origin: &str) -> Result<ImageBuffer> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut reader = BufReader::new(bytes);
    let mut next_line = |line_no: usize| -> Result<String> {
        let mut s = String::new();
        reader
            .read_line(&mut s)
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        if s.is_empty() {
            return Err(parse_err(line_no, "unexpected end of header".into()));
        }
        Ok(s.trim().to_string())
    };
    let channels = match next_line(1)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(parse_err(1, format!("bad float-map tag `{other}`"))),
    };
    let dims = next_line(2)?;
    let parsed: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(2, format!("bad dimensions `{dims}`")))?;
    let [width, height] = parsed[..] else {
        return Err(parse_err(2, format!("bad dimensions `{dims}`")));
    };
    let scale_line = next_line(3)?;
    let scale: f64 = scale_line
        .parse()
        .map_err(|_| parse_err(3, format!("bad scale `{scale_line}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(parse_err(3, "scale must be nonzero".into()));
    }
    let little = scale < 0.0;

    let count = width * height * channels;
    let mut raw = vec![0u8; count * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| parse_err(4, format!("pixel data truncated, expected {count} floats")))?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            (if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }) as f64
        })
        .collect();
    let row_len = width * channels;
    let data = values
        .chunks_exact(row_len)
        .rev()
        .flatten()
        .copied()
        .collect();
    ImageBuffer::from_data(width, height, channels, data)
}

fn write_pfm(path: &Path, image: &ImageBuffer) -> Result<()> {
    let bytes = encode_pfm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_pfm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, &path.display().to_string())
}

fn write_png(path: &Path, image: &ImageBuffer) -> Result<()> {
    let color = match image.channels {
        3 => png::ColorType::Rgb,
        1 => png::ColorType::Grayscale,
        c => return Err(Error::UnsupportedFormat(format!("png with {c} channels"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    let bytes: Vec<u8> = image.data.iter().map(|v| encode_display_byte(*v)).collect();
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<ImageBuffer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let to_io = |e: png::DecodingError| Error::io(path, std::io::Error::other(e));
    let mut reader = decoder.read_info().map_err(to_io)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(to_io)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "{}: only 8-bit png is supported",
            path.display()
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: png color type {other:?} is not supported",
                path.display()
            )))
        }
    };
    let data = buf[..info.buffer_size()]
        .iter()
        .map(|b| decode_display_byte(*b))
        .collect();
    ImageBuffer::from_data(info.width as usize, info.height as usize, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gamma_half_is_186() {
        assert_eq!(encode_display_byte(0.5), 186);
        assert_eq!(encode_display_byte(1.5), 255);
        assert_eq!(encode_display_byte(-0.2), 0);
    }

    #[test]
    fn png_clamps_and_roundtrips_through_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageBuffer::from_data(2, 1, 3, vec![1.5, 0.5, 0.0, 0.25, 1.0, 0.75]).unwrap();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.data[0], 1.0);
        assert_eq!(back.data[2], 0.0);
        assert!((back.data[1] - 0.5).abs() < 0.01);
    }

    #[test]
    fn unsupported_extension() {
        let img = ImageBuffer::new(1, 1, 3);
        assert!(matches!(
            write_image("x.jpg", &img),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            read_image("x.exr"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn pfm_header_layout() {
        let img = ImageBuffer::from_data(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        let body = &bytes[12..];
        // bottom row first
        assert_eq!(&body[..4], &3.0f32.to_le_bytes());
        assert_eq!(body.len(), 16);
    }

    #[test]
    fn pfm_truncated_rejected() {
        let img = ImageBuffer::new(4, 4, 3);
        let bytes = encode_pfm(&img).unwrap();
        assert!(matches!(
            decode_pfm(&bytes[..bytes.len() - 3], "t"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            decode_pfm(b"P6\n1 1\n255\n", "t"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn pfm_roundtrip_is_bitwise(
            w in 1usize..6, h in 1usize..6, gray in proptest::bool::ANY,
            seed in proptest::collection::vec(-1e6f32..1e6, 108),
        ) {
            let c = if gray { 1 } else { 3 };
            let data: Vec<f64> = seed.iter().take(w * h * c).map(|v| *v as f64).collect();
            let img = ImageBuffer::from_data(w, h, c, data).unwrap();
            let back = decode_pfm(&encode_pfm(&img).unwrap(), "mem").unwrap();
            prop_assert_eq!(back.width, w);
            prop_assert_eq!(back.height, h);
            let same = img.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
