//! Grayscale grids and lossless PNG storage.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Real};

/// Single-channel intensity grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "image size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self::new(height, width, vec![v; height * width])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// Affine rescale onto [0, 1]; a flat image maps to all zeros.
    pub fn rescaled(&self) -> GrayImage {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let data = if span > 0.0 && span.is_finite() {
            self.data.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        GrayImage::new(self.height, self.width, data)
    }

    pub fn mean_abs_diff(&self, other: &GrayImage) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn to_feature_map<F: Real>(&self) -> FeatureMap<F> {
        FeatureMap::from_vec(
            1,
            self.height,
            self.width,
            self.data.iter().map(|v| F::lit(*v as f64)).collect(),
        )
    }

    pub fn from_channel<F: Real>(map: &FeatureMap<F>, channel: usize) -> Self {
        GrayImage::new(
            map.height,
            map.width,
            map.channel(channel).iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    /// Writes a 16-bit grayscale PNG; values are clipped to [0, 1].
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flat_map(|v| {
                let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
                q.to_be_bytes()
            })
            .collect();
        write_png(path, self.width, self.height, png::BitDepth::Sixteen, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let (w, h, depth, buf) = read_png(path)?;
        let data = match depth {
            png::BitDepth::Sixteen => buf
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
                .collect(),
            png::BitDepth::Eight => buf.iter().map(|v| *v as f32 / 255.0).collect(),
            other => return Err(Error::Format(format!("unsupported PNG depth {other:?}"))),
        };
        Ok(GrayImage::new(h, w, data))
    }
}

/// Interleaved 8-bit-per-sample colour image, used for fundus-like inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// `[r, g, b]` per pixel, intensities in [0, 1].
    pub data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn green(&self) -> GrayImage {
        GrayImage::new(self.height, self.width, self.data.iter().map(|p| p[1]).collect())
    }
}

pub(crate) fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub(crate) fn read_png(path: &Path) -> Result<(usize, usize, png::BitDepth, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!(
            "{}: expected grayscale PNG, found {:?}",
            path.display(),
            info.color_type
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.bit_depth, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..12).map(|i| (i as f32 * 5000.0).round() / 65535.0).collect();
        let img = GrayImage::new(3, 4, data);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = GrayImage::load_png(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rescale_handles_flat_images() {
        assert_eq!(GrayImage::filled(2, 2, 0.3).rescaled().data, vec![0.0; 4]);
        let r = GrayImage::new(1, 3, vec![2.0, 4.0, 3.0]).rescaled();
        assert_eq!(r.data, vec![0.0, 1.0, 0.5]);
    }
}
