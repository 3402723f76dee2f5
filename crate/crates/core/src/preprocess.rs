//! Contrast-limited adaptive histogram equalization and the D⁰ conversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheParams {
    /// Histogram clip limit, relative to the uniform bin height.
    pub clip_limit: f64,
    /// Tile grid (rows, cols).
    pub tiles: (usize, usize),
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tiles: (8, 8),
            bins: 256,
        }
    }
}

/// Input to [`preprocess_d0`].
#[derive(Clone, Debug)]
pub enum RawImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl From<GrayImage> for RawImage {
    fn from(g: GrayImage) -> Self {
        RawImage::Gray(g)
    }
}

impl From<RgbImage> for RawImage {
    fn from(c: RgbImage) -> Self {
        RawImage::Rgb(c)
    }
}

/// `rescale(CLAHE(1 - green))`. Grayscale inputs are treated as the green channel.
pub fn preprocess_d0(image: &RawImage) -> Result<GrayImage> {
    preprocess_d0_with(image, &ClaheParams::default())
}

pub fn preprocess_d0_with(image: &RawImage, params: &ClaheParams) -> Result<GrayImage> {
    let green = match image {
        RawImage::Gray(g) => g.clone(),
        RawImage::Rgb(c) => c.green(),
    };
    if !green.is_finite() {
        return Err(Error::NonFinite("preprocess input".into()));
    }
    let inverted = GrayImage::new(
        green.height,
        green.width,
        green.data.iter().map(|v| 1.0 - v.clamp(0.0, 1.0)).collect(),
    );
    Ok(clahe(&inverted, params)?.rescaled())
}

/// CLAHE on an image with intensities in [0, 1]; output in [0, 1].
///
/// Per-tile histograms are clipped at `clip_limit · area / bins` (at least one
/// count), the excess is spread evenly over all bins, and the resulting tile
/// mappings are blended bilinearly between tile centres.
pub fn clahe(img: &GrayImage, params: &ClaheParams) -> Result<GrayImage> {
    let (ty, tx) = params.tiles;
    if ty == 0 || tx == 0 || params.bins < 2 || !(params.clip_limit > 0.0) {
        return Err(Error::InvalidInput("CLAHE parameters".into()));
    }
    let (h, w) = (img.height, img.width);
    if h < ty || w < tx {
        return Err(Error::InvalidInput(format!(
            "CLAHE: {h}x{w} image smaller than the {ty}x{tx} tile grid"
        )));
    }
    let bins = params.bins;
    let quant = |v: f32| -> usize { ((v.clamp(0.0, 1.0) * (bins - 1) as f32).round() as usize).min(bins - 1) };
    let bounds = |n: usize, t: usize, i: usize| (i * n / t, (i + 1) * n / t);

    let mut luts = vec![vec![0f32; bins]; ty * tx];
    for r in 0..ty {
        let (y0, y1) = bounds(h, ty, r);
        for c in 0..tx {
            let (x0, x1) = bounds(w, tx, c);
            let mut hist = vec![0f64; bins];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[quant(img.get(y, x))] += 1.0;
                }
            }
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            let limit = (params.clip_limit * area / bins as f64).max(1.0);
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let share = excess / bins as f64;
            let lut = &mut luts[r * tx + c];
            let mut cdf = 0.0;
            for (b, count) in hist.iter().enumerate() {
                cdf += count + share;
                lut[b] = (cdf / area).clamp(0.0, 1.0) as f32;
            }
        }
    }

    // bilinear blend between the four nearest tile centres
    let centre = |n: usize, t: usize, i: usize| {
        let (a, b) = bounds(n, t, i);
        (a + b) as f64 / 2.0 - 0.5
    };
    let locate = |p: f64, n: usize, t: usize| -> (usize, usize, f64) {
        let first = centre(n, t, 0);
        let last = centre(n, t, t - 1);
        if t == 1 || p <= first {
            return (0, 0, 0.0);
        }
        if p >= last {
            return (t - 1, t - 1, 0.0);
        }
        let mut i = 0;
        while i + 1 < t && centre(n, t, i + 1) <= p {
            i += 1;
        }
        let (c0, c1) = (centre(n, t, i), centre(n, t, i + 1));
        (i, i + 1, (p - c0) / (c1 - c0))
    };
    let rows: Vec<_> = (0..h).map(|y| locate(y as f64, h, ty)).collect();
    let cols: Vec<_> = (0..w).map(|x| locate(x as f64, w, tx)).collect();
    let mut out = Vec::with_capacity(h * w);
    for (y, &(r0, r1, fy)) in rows.iter().enumerate() {
        for (x, &(c0, c1, fx)) in cols.iter().enumerate() {
            let b = quant(img.get(y, x));
            let v00 = luts[r0 * tx + c0][b] as f64;
            let v01 = luts[r0 * tx + c1][b] as f64;
            let v10 = luts[r1 * tx + c0][b] as f64;
            let v11 = luts[r1 * tx + c1][b] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out.push((top + (bot - top) * fy) as f32);
        }
    }
    Ok(GrayImage::new(h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_vessel_map, render, BranchParams, StyleFamily};

    #[test]
    fn flat_image_stays_flat() {
        let out = preprocess_d0(&GrayImage::filled(64, 64, 0.37).into()).unwrap();
        let (lo, hi) = out.min_max();
        assert_eq!(lo, hi);
    }

    #[test]
    fn reverses_dark_vessel_polarity() {
        let map = generate_vessel_map(4, 64, 64, &BranchParams::default()).unwrap();
        let fam = &StyleFamily::default_sources()[0];
        let raw = render(&map, fam, 4).unwrap().image;
        let before = crate::phantom::contrast_gap(&raw, &map, crate::phantom::Polarity::BrightVessels);
        let d0 = preprocess_d0(&raw.clone().into()).unwrap();
        let after = crate::phantom::contrast_gap(&d0, &map, crate::phantom::Polarity::BrightVessels);
        assert!(before < 0.0, "input vessels are dark ({before})");
        assert!(after > 0.0, "output vessels are bright ({after})");
    }

    #[test]
    fn uses_green_channel_of_colour_input() {
        let g = GrayImage::new(32, 32, (0..1024).map(|i| (i % 29) as f32 / 28.0).collect());
        let rgb = RgbImage {
            height: 32,
            width: 32,
            data: g.data.iter().map(|v| [0.9, *v, 0.1]).collect(),
        };
        assert_eq!(
            preprocess_d0(&rgb.into()).unwrap(),
            preprocess_d0(&g.into()).unwrap()
        );
    }

    #[test]
    fn rejects_non_finite_pixels() {
        let mut g = GrayImage::filled(32, 32, 0.5);
        g.data[3] = f32::NAN;
        assert!(matches!(preprocess_d0(&g.into()), Err(Error::NonFinite(_))));
    }
}
