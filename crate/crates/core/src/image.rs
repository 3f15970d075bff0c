//! RGB images with `f32` channels in `[0, 1]`, stored row-major HWC.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * CHANNELS {
            return Err(Error::Invalid(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Exact sub-rectangle copy.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Geometry(format!(
                "crop {w}x{h} at ({x}, {y}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.pixel(self.width - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.pixel(x, self.height - 1 - y))
    }

    /// Bilinear resampling with half-pixel centers; edge samples clamp.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!("cannot resize to {width}x{height}")));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let taps = |dst: usize, scale: f64, extent: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(extent - 1);
            (lo, hi, (src - lo as f64) as f32)
        };
        let cols: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for &(x0, x1, fx) in &cols {
                let (a, b, c, d) = (
                    self.pixel(x0, y0),
                    self.pixel(x1, y0),
                    self.pixel(x0, y1),
                    self.pixel(x1, y1),
                );
                for ch in 0..CHANNELS {
                    let top = a[ch] + (b[ch] - a[ch]) * fx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                    data.push(top + (bottom - top) * fy);
                }
            }
        }
        Ok(Image { width, height, data })
    }

    /// Decodes PNG or binary PPM (`P6`), chosen by file content.
    pub fn load(path: &Path) -> Result<Image> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let err = |message: String| Error::Image {
            path: path.display().to_string(),
            message,
        };
        if bytes.starts_with(b"\x89PNG") {
            decode_png(&bytes).map_err(err)
        } else if bytes.starts_with(b"P6") {
            decode_ppm(&bytes).map_err(err)
        } else {
            Err(err("unsupported format (expected PNG or binary PPM)".into()))
        }
    }

    /// Writes 8-bit PNG, or PPM when the extension is `.ppm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let bytes = self.to_rgb8();
        let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        if is_ppm {
            write!(out, "P6\n{} {}\n255\n", self.width, self.height)
                .and_then(|_| out.write_all(&bytes))
                .map_err(|e| Error::io(path, e))?;
        } else {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            writer.write_image_data(&bytes).map_err(|e| Error::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => pixels.to_vec(),
        png::ColorType::Rgba => pixels.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => pixels.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(format!("unsupported color type {other:?}")),
    };
    Image::from_rgb8(w, h, &rgb).map_err(|e| e.to_string())
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    // header: magic, width, height, maxval, each separated by whitespace,
    // with `#` comments allowed between tokens
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field {s:?}"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PPM maxval {maxval}"));
    }
    let need = w * h * CHANNELS;
    let body = bytes.get(pos..pos + need).ok_or("truncated PPM pixel data")?;
    let scale = maxval as f32;
    Image::new(w, h, body.iter().map(|&b| b as f32 / scale).collect()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| [x as f32 / w as f32, y as f32 / h as f32, 0.25])
    }

    #[test]
    fn crop_is_exact_copy() {
        let img = ramp(10, 7);
        let c = img.crop(3, 2, 4, 5).unwrap();
        for y in 0..5 {
            for x in 0..4 {
                assert_eq!(c.pixel(x, y), img.pixel(x + 3, y + 2));
            }
        }
        assert!(img.crop(7, 0, 4, 1).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(5, 4);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().pixel(0, 0), img.pixel(4, 0));
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = Image::filled(13, 9, [0.2, 0.4, 0.6]);
        let r = img.resize_bilinear(5, 7).unwrap();
        assert!(r.data().chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn resize_golden_upsample() {
        // 2x1 -> 4x1 with half-pixel centers: sources at -0.25, 0.25, 0.75, 1.25
        let img = Image::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = img.resize_bilinear(4, 1).unwrap();
        let red: Vec<f32> = r.data().chunks(3).map(|p| p[0]).collect();
        assert_eq!(red, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_golden_downsample() {
        // 4x1 -> 2x1 samples at 0.5 and 2.5
        let img = Image::from_fn(4, 1, |x, _| [x as f32 * 0.25, 0.0, 0.0]);
        let r = img.resize_bilinear(2, 1).unwrap();
        assert_eq!(r.pixel(0, 0)[0], 0.125);
        assert_eq!(r.pixel(1, 0)[0], 0.625);
    }

    #[test]
    fn png_and_ppm_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(6, 4, |x, y| [x as f32 / 5.0, y as f32 / 3.0, 1.0]);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            let back = Image::load(&p).unwrap();
            assert_eq!(back.to_rgb8(), img.to_rgb8(), "{name}");
        }
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(Image::load(&junk), Err(Error::Image { .. })));
    }
}
