//! Procedural vessel phantoms: a branching binary anatomy plus style renderings.
//!
//! A subject is one [`VesselMap`]. Each [`StyleFamily`] describes a family of
//! acquisition styles (contrast polarity, gamma, blur, noise, illumination
//! gradient, occluding blobs); rendering a map under a family produces a
//! [`StyleRendering`] whose ground truth is always the unchanged map.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::{indexed_rng, SeedRng};

/// Smallest accepted side length.
pub const MIN_SIZE: usize = 32;

/// Binary vessel anatomy of one subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VesselMap {
    pub subject_id: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major, values exactly 0 or 1.
    pub pixels: Vec<u8>,
}

impl VesselMap {
    pub fn new(subject_id: u64, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} map",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| *p > 1) {
            return Err(Error::InvalidInput("vessel map must be binary".into()));
        }
        Ok(Self {
            subject_id,
            height,
            width,
            pixels,
        })
    }

    pub fn vessel_count(&self) -> usize {
        self.pixels.iter().filter(|p| **p == 1).count()
    }

    pub fn density(&self) -> f64 {
        self.vessel_count() as f64 / self.pixels.len() as f64
    }

    /// The map cast to intensities (vessel = 1, background = 0).
    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(
            self.height,
            self.width,
            self.pixels.iter().map(|p| *p as f32).collect(),
        )
    }

    /// Binarizes an image at `threshold` (`>=` counts as vessel).
    pub fn from_threshold(subject_id: u64, img: &GrayImage, threshold: f32) -> Self {
        Self {
            subject_id,
            height: img.height,
            width: img.width,
            pixels: img.data.iter().map(|v| (*v >= threshold) as u8).collect(),
        }
    }

    /// Sizes of 8-connected vessel components, largest first.
    pub fn component_sizes(&self) -> Vec<usize> {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..h * w {
            if self.pixels[start] == 0 || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut size = 0;
            while let Some(i) = stack.pop() {
                size += 1;
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if self.pixels[j] == 1 && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            sizes.push(size);
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }
}

/// Parameters of the recursive branching generator. Lengths and widths are in pixels
/// for a 64-pixel image and scale linearly with the shorter image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchParams {
    pub trunks: usize,
    pub depth: usize,
    pub trunk_width: f64,
    pub width_decay: f64,
    pub trunk_length: f64,
    pub length_decay: f64,
    /// Child branch angle range, degrees from the parent heading.
    pub branch_angle: (f64, f64),
    /// Heading jitter per step, radians.
    pub wiggle: f64,
    pub min_width: f64,
    pub density_min: f64,
    pub density_max: f64,
    pub max_attempts: usize,
}

impl Default for BranchParams {
    fn default() -> Self {
        Self {
            trunks: 3,
            depth: 4,
            trunk_width: 3.2,
            width_decay: 0.75,
            trunk_length: 22.0,
            length_decay: 0.72,
            branch_angle: (20.0, 50.0),
            wiggle: 0.12,
            min_width: 1.0,
            density_min: 0.04,
            density_max: 0.35,
            max_attempts: 32,
        }
    }
}

impl BranchParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("branch params: {m}")));
        if self.trunks == 0 || self.trunks > 8 {
            return bad("trunks must be in 1..=8");
        }
        if self.depth > 8 {
            return bad("depth must be at most 8");
        }
        if !(self.min_width >= 1.0 && self.trunk_width >= self.min_width) {
            return bad("widths must be at least 1 pixel");
        }
        if !(self.width_decay > 0.0 && self.width_decay <= 1.0)
            || !(self.length_decay > 0.0 && self.length_decay <= 1.0)
        {
            return bad("decays must lie in (0, 1]");
        }
        if !(self.trunk_length > 0.0 && self.wiggle >= 0.0 && self.wiggle.is_finite()) {
            return bad("trunk length must be positive and wiggle finite");
        }
        if !(self.branch_angle.0 >= 0.0 && self.branch_angle.0 <= self.branch_angle.1 && self.branch_angle.1 <= 90.0)
        {
            return bad("branch angles must satisfy 0 <= lo <= hi <= 90");
        }
        if !(0.0 <= self.density_min && self.density_min < self.density_max && self.density_max <= 1.0) {
            return bad("density range must satisfy 0 <= min < max <= 1");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

/// Generates a branching vessel tree; a pure function of its arguments.
pub fn generate_vessel_map(
    seed: u64,
    height: usize,
    width: usize,
    params: &BranchParams,
) -> Result<VesselMap> {
    if height < MIN_SIZE || width < MIN_SIZE {
        return Err(Error::TooSmall {
            height,
            width,
            min: MIN_SIZE,
        });
    }
    params.validate()?;
    for attempt in 0..params.max_attempts {
        let mut rng = indexed_rng(seed, "vessel-tree", attempt as u64);
        let segments = grow_tree(&mut rng, height, width, params);
        let pixels = rasterize(&segments, height, width);
        let map = VesselMap {
            subject_id: seed,
            height,
            width,
            pixels,
        };
        let d = map.density();
        if d >= params.density_min && d <= params.density_max {
            return Ok(map);
        }
    }
    Err(Error::DensityUnreachable {
        min: params.density_min,
        max: params.density_max,
        attempts: params.max_attempts,
    })
}

fn grow_tree(rng: &mut SeedRng, h: usize, w: usize, p: &BranchParams) -> Vec<Segment> {
    let scale = h.min(w) as f64 / 64.0;
    // disc-like origin off to one side, trunks fanning out across the field
    let origin = (
        w as f64 * rng.random_range(0.15..0.35),
        h as f64 * rng.random_range(0.35..0.65),
    );
    let base = rng.random_range(-0.4..0.4);
    let spread = 2.0 * PI / 3.0;
    let mut segments = Vec::new();
    for t in 0..p.trunks {
        let frac = if p.trunks == 1 {
            0.0
        } else {
            t as f64 / (p.trunks - 1) as f64 - 0.5
        };
        let heading = base + frac * spread + rng.random_range(-0.2..0.2);
        grow_branch(
            rng,
            &mut segments,
            origin,
            heading,
            p.trunk_width * scale,
            p.trunk_length * scale,
            p.depth,
            p,
            scale,
        );
    }
    segments
}

#[allow(clippy::too_many_arguments)]
fn grow_branch(
    rng: &mut SeedRng,
    out: &mut Vec<Segment>,
    start: (f64, f64),
    mut heading: f64,
    width: f64,
    length: f64,
    depth: usize,
    p: &BranchParams,
    scale: f64,
) {
    let step = 2.0 * scale.max(0.5);
    let steps = (length / step).ceil().max(1.0) as usize;
    let jitter = Normal::new(0.0, p.wiggle.max(1e-12)).expect("finite");
    let mut pos = start;
    for _ in 0..steps {
        heading += jitter.sample(rng);
        let next = (pos.0 + step * heading.cos(), pos.1 + step * heading.sin());
        out.push(Segment {
            a: pos,
            b: next,
            radius: width / 2.0,
        });
        pos = next;
    }
    let child_width = width * p.width_decay;
    if depth == 0 || child_width < p.min_width * scale.min(1.0) {
        return;
    }
    let (lo, hi) = p.branch_angle;
    for sign in [-1.0, 1.0] {
        let angle = rng.random_range(lo..=hi).to_radians();
        grow_branch(
            rng,
            out,
            pos,
            heading + sign * angle,
            child_width.max(p.min_width),
            length * p.length_decay,
            depth - 1,
            p,
            scale,
        );
    }
}

/// Anti-aliased coverage `clamp(r + 1/2 - d, 0, 1)`, binarized at 0.5.
fn rasterize(segments: &[Segment], h: usize, w: usize) -> Vec<u8> {
    let mut cover = vec![0.0f64; h * w];
    for s in segments {
        let r = s.radius;
        let x0 = (s.a.0.min(s.b.0) - r - 1.0).floor().max(0.0) as usize;
        let y0 = (s.a.1.min(s.b.1) - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((s.a.0.max(s.b.0) + r + 1.0).ceil() as isize).min(w as isize - 1);
        let y1 = ((s.a.1.max(s.b.1) + r + 1.0).ceil() as isize).min(h as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - s.a.0) * dx + (py - s.a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (s.a.0 + t * dx - px, s.a.1 + t * dy - py);
                let d = (cx * cx + cy * cy).sqrt();
                let c = (r + 0.5 - d).clamp(0.0, 1.0);
                let slot = &mut cover[y * w + x];
                if c > *slot {
                    *slot = c;
                }
            }
        }
    }
    cover.into_iter().map(|c| (c >= 0.5) as u8).collect()
}

/// Closed interval `[lo, hi]` with finite bounds (`lo == hi` pins a value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    BrightVessels,
    DarkVessels,
}

/// Whether test-time inputs of a family are fundus-like (preprocessed) or fed raw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Fundus,
    Angiography,
}

/// Domain-shift category of a held-out family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShiftType {
    /// Pathology-like occlusions.
    I,
    /// Contrast / acquisition-site shift.
    II,
    /// Polarity / modality shift.
    III,
}

impl std::fmt::Display for ShiftType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShiftType::I => "I",
            ShiftType::II => "II",
            ShiftType::III => "III",
        })
    }
}

/// A family of acquisition styles.
///
/// Intensities are composed in a bright-vessel frame (`background + contrast ·
/// blurred map`), then occluded, gamma-corrected, corrupted with noise and
/// finally inverted for [`Polarity::DarkVessels`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleFamily {
    pub name: String,
    pub polarity: Polarity,
    pub modality: Modality,
    pub shift: Option<ShiftType>,
    pub gamma: Interval,
    pub noise_sigma: Interval,
    pub blur_sigma: Interval,
    pub gradient: Interval,
    pub background: Interval,
    pub contrast: Interval,
    /// Number of occluding blobs.
    pub lesions: Interval,
}

impl StyleFamily {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("gamma", self.gamma),
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
            ("gradient", self.gradient),
            ("background", self.background),
            ("contrast", self.contrast),
            ("lesions", self.lesions),
        ];
        for (name, r) in ranges {
            if !r.is_valid() {
                return Err(Error::InvalidInput(format!(
                    "style {}: {name} range [{}, {}] is not a finite interval",
                    self.name, r.lo, r.hi
                )));
            }
        }
        if self.gamma.lo <= 0.0
            || self.noise_sigma.lo < 0.0
            || self.blur_sigma.lo < 0.0
            || self.lesions.lo < 0.0
            || self.contrast.lo <= 0.0
        {
            return Err(Error::InvalidInput(format!(
                "style {}: gamma and contrast must be positive; noise, blur and lesions non-negative",
                self.name
            )));
        }
        Ok(())
    }

    /// No blur, no noise, gamma 1, black background: the map itself.
    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            polarity: Polarity::BrightVessels,
            modality: Modality::Angiography,
            shift: None,
            gamma: Interval::fixed(1.0),
            noise_sigma: Interval::fixed(0.0),
            blur_sigma: Interval::fixed(0.0),
            gradient: Interval::fixed(0.0),
            background: Interval::fixed(0.0),
            contrast: Interval::fixed(1.0),
            lesions: Interval::fixed(0.0),
        }
    }

    /// [`StyleFamily::identity`] with dark vessels on a white background.
    pub fn inverted_identity() -> Self {
        Self {
            name: "identity-inverted".into(),
            polarity: Polarity::DarkVessels,
            ..Self::identity()
        }
    }

    /// The three fundus-like source families.
    pub fn default_sources() -> Vec<StyleFamily> {
        let fundus = |name: &str, bg, contrast, blur, noise, grad, gamma| StyleFamily {
            name: name.into(),
            polarity: Polarity::DarkVessels,
            modality: Modality::Fundus,
            shift: None,
            gamma,
            noise_sigma: noise,
            blur_sigma: blur,
            gradient: grad,
            background: bg,
            contrast,
            lesions: Interval::fixed(0.0),
        };
        vec![
            fundus(
                "fundus-a",
                Interval::new(0.30, 0.42),
                Interval::new(0.30, 0.45),
                Interval::new(0.4, 0.8),
                Interval::new(0.01, 0.03),
                Interval::new(0.05, 0.15),
                Interval::new(0.9, 1.1),
            ),
            fundus(
                "fundus-b",
                Interval::new(0.38, 0.50),
                Interval::new(0.25, 0.40),
                Interval::new(0.6, 1.0),
                Interval::new(0.02, 0.04),
                Interval::new(0.10, 0.20),
                Interval::new(1.0, 1.25),
            ),
            fundus(
                "fundus-c",
                Interval::new(0.25, 0.35),
                Interval::new(0.22, 0.35),
                Interval::new(0.5, 0.9),
                Interval::new(0.015, 0.035),
                Interval::new(0.0, 0.10),
                Interval::new(0.8, 1.0),
            ),
        ]
    }

    /// Held-out families, one per shift type.
    pub fn default_targets() -> Vec<StyleFamily> {
        vec![
            StyleFamily {
                name: "lesion-fundus".into(),
                polarity: Polarity::DarkVessels,
                modality: Modality::Fundus,
                shift: Some(ShiftType::I),
                gamma: Interval::new(0.9, 1.1),
                noise_sigma: Interval::new(0.02, 0.04),
                blur_sigma: Interval::new(0.5, 0.9),
                gradient: Interval::new(0.05, 0.15),
                background: Interval::new(0.30, 0.42),
                contrast: Interval::new(0.25, 0.40),
                lesions: Interval::new(6.0, 12.0),
            },
            StyleFamily {
                name: "site-fundus".into(),
                polarity: Polarity::DarkVessels,
                modality: Modality::Fundus,
                shift: Some(ShiftType::II),
                gamma: Interval::new(1.8, 2.4),
                noise_sigma: Interval::new(0.04, 0.07),
                blur_sigma: Interval::new(1.2, 1.6),
                gradient: Interval::new(0.30, 0.50),
                background: Interval::new(0.15, 0.30),
                contrast: Interval::new(0.14, 0.22),
                lesions: Interval::fixed(0.0),
            },
            StyleFamily {
                name: "angio".into(),
                polarity: Polarity::BrightVessels,
                modality: Modality::Angiography,
                shift: Some(ShiftType::III),
                gamma: Interval::new(0.4, 0.6),
                noise_sigma: Interval::new(0.15, 0.22),
                blur_sigma: Interval::new(0.8, 1.2),
                gradient: Interval::new(0.0, 0.10),
                background: Interval::new(0.05, 0.20),
                contrast: Interval::new(0.4, 0.6),
                lesions: Interval::fixed(0.0),
            },
        ]
    }
}

/// One subject rendered in one style.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleRendering {
    pub image: GrayImage,
    pub style: String,
    pub subject_id: u64,
}

/// Rendering settings not tied to a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Minimum vessel/background mean-intensity gap (in the family's polarity).
    pub margin: f64,
    pub max_attempts: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            margin: 0.05,
            max_attempts: 64,
        }
    }
}

/// Signed vessel-minus-background mean gap, oriented so that detectable
/// vessels give a positive value for either polarity.
pub fn contrast_gap(img: &GrayImage, map: &VesselMap, polarity: Polarity) -> f64 {
    let (mut sv, mut nv, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (v, p) in img.data.iter().zip(&map.pixels) {
        if *p == 1 {
            sv += *v as f64;
            nv += 1;
        } else {
            sb += *v as f64;
            nb += 1;
        }
    }
    if nv == 0 || nb == 0 {
        return 0.0;
    }
    let gap = sv / nv as f64 - sb / nb as f64;
    match polarity {
        Polarity::BrightVessels => gap,
        Polarity::DarkVessels => -gap,
    }
}

/// Renders `map` under `family`; deterministic per seed.
pub fn render(map: &VesselMap, family: &StyleFamily, seed: u64) -> Result<StyleRendering> {
    render_with(map, family, seed, &RenderOptions::default())
}

pub fn render_with(
    map: &VesselMap,
    family: &StyleFamily,
    seed: u64,
    opts: &RenderOptions,
) -> Result<StyleRendering> {
    family.validate()?;
    if map.pixels.len() != map.height * map.width || map.pixels.iter().any(|p| *p > 1) {
        return Err(Error::InvalidInput("render: invalid vessel map".into()));
    }
    for attempt in 0..opts.max_attempts.max(1) {
        let mut rng = indexed_rng(seed, &format!("render/{}", family.name), attempt as u64);
        let image = compose(map, family, &mut rng);
        if map.vessel_count() == 0 || contrast_gap(&image, map, family.polarity) >= opts.margin {
            return Ok(StyleRendering {
                image,
                style: family.name.clone(),
                subject_id: map.subject_id,
            });
        }
    }
    Err(Error::ContrastUnreachable {
        margin: opts.margin,
        attempts: opts.max_attempts,
    })
}

fn compose(map: &VesselMap, fam: &StyleFamily, rng: &mut SeedRng) -> GrayImage {
    let (h, w) = (map.height, map.width);
    let scale = h.min(w) as f64 / 64.0;
    let bg = fam.background.sample(rng);
    let contrast = fam.contrast.sample(rng);
    let blur = fam.blur_sigma.sample(rng) * scale;
    let grad = fam.gradient.sample(rng);
    let gamma = fam.gamma.sample(rng);
    let sigma = fam.noise_sigma.sample(rng);
    let lesions = fam.lesions.sample(rng).round() as usize;
    let theta: f64 = rng.random_range(0.0..2.0 * PI);

    let soft: Vec<f64> = map.pixels.iter().map(|p| *p as f64).collect();
    let soft = gaussian_blur(&soft, h, w, blur);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64 - 0.5, (i % w) as f64 / w as f64 - 0.5);
            bg + contrast * soft[i] + grad * (x * ct + y * st)
        })
        .collect();

    for _ in 0..lesions {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let radius = rng.random_range(2.0..5.0) * scale;
        let level: f64 = if rng.random_bool(0.5) {
            rng.random_range(0.7..1.0)
        } else {
            rng.random_range(0.0..0.15)
        };
        let strength = rng.random_range(0.6..0.9);
        for (i, v) in img.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            let wgt = strength * (-d2 / (2.0 * radius * radius)).exp();
            *v = (1.0 - wgt) * *v + wgt * level;
        }
    }

    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let data = img
        .into_iter()
        .map(|v| {
            let mut v = v.clamp(0.0, 1.0);
            if gamma != 1.0 {
                v = v.powf(gamma);
            }
            if sigma > 0.0 {
                v += noise.sample(rng);
            }
            let v = v.clamp(0.0, 1.0);
            let v = match fam.polarity {
                Polarity::BrightVessels => v,
                Polarity::DarkVessels => 1.0 - v,
            };
            v as f32
        })
        .collect();
    GrayImage::new(h, w, data)
}

/// Separable Gaussian blur with mirrored borders; `sigma <= 0` is the identity.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + mirror(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[mirror(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One (subject, style) item of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub map: VesselMap,
    pub rendering: StyleRendering,
    pub split: Split,
}

/// Geometry and composition of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub branch: BranchParams,
    pub render: RenderOptions,
    pub sources: Vec<StyleFamily>,
    pub targets: Vec<StyleFamily>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_train: 20,
            n_test: 12,
            height: 64,
            width: 64,
            branch: BranchParams::default(),
            render: RenderOptions::default(),
            sources: StyleFamily::default_sources(),
            targets: StyleFamily::default_targets(),
        }
    }
}

/// Train items carry source styles only; test items target styles only.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub sources: Vec<StyleFamily>,
    pub targets: Vec<StyleFamily>,
}

impl DatasetSplit {
    pub fn family(&self, name: &str) -> Option<&StyleFamily> {
        self.sources.iter().chain(&self.targets).find(|f| f.name == name)
    }

    /// Test subjects' maps, one per subject, ordered by id.
    pub fn test_subjects(&self) -> Vec<&VesselMap> {
        let mut seen = BTreeSet::new();
        let mut out: Vec<&VesselMap> = self
            .test
            .iter()
            .filter(|s| seen.insert(s.map.subject_id))
            .map(|s| &s.map)
            .collect();
        out.sort_by_key(|m| m.subject_id);
        out
    }
}

/// Builds a train/test split: each train subject is rendered once in a source
/// family, each test subject once in every target family.
pub fn build_split(spec: &SplitSpec, seed: u64) -> Result<DatasetSplit> {
    if spec.sources.is_empty() {
        return Err(Error::Empty("source family set"));
    }
    if spec.targets.is_empty() {
        return Err(Error::Empty("target family set"));
    }
    let src: BTreeSet<&str> = spec.sources.iter().map(|f| f.name.as_str()).collect();
    let tgt: BTreeSet<&str> = spec.targets.iter().map(|f| f.name.as_str()).collect();
    if src.len() != spec.sources.len() || tgt.len() != spec.targets.len() {
        return Err(Error::InvalidInput("duplicate style family names".into()));
    }
    if let Some(shared) = src.intersection(&tgt).next() {
        return Err(Error::InvalidInput(format!(
            "style family {shared} is both source and target"
        )));
    }
    for f in spec.sources.iter().chain(&spec.targets) {
        f.validate()?;
    }

    let mut assign_rng = indexed_rng(seed, "source-assignment", 0);
    let mut assignment: Vec<usize> = (0..spec.n_train).map(|i| i % spec.sources.len()).collect();
    assignment.shuffle(&mut assign_rng);

    let map_for = |id: u64| {
        generate_vessel_map(
            crate::rng::sub_seed(seed, &format!("subject/{id}")),
            spec.height,
            spec.width,
            &spec.branch,
        )
        .map(|m| VesselMap { subject_id: id, ..m })
    };
    let render_seed = |id: u64| crate::rng::sub_seed(seed, &format!("render/{id}"));

    let mut train = Vec::with_capacity(spec.n_train);
    for (i, fam_idx) in assignment.iter().enumerate() {
        let id = i as u64;
        let map = map_for(id)?;
        let rendering = render_with(&map, &spec.sources[*fam_idx], render_seed(id), &spec.render)?;
        train.push(Sample {
            map,
            rendering,
            split: Split::Train,
        });
    }
    let mut test = Vec::with_capacity(spec.n_test * spec.targets.len());
    for j in 0..spec.n_test {
        let id = (spec.n_train + j) as u64;
        let map = map_for(id)?;
        for fam in &spec.targets {
            let rendering = render_with(&map, fam, render_seed(id), &spec.render)?;
            test.push(Sample {
                map: map.clone(),
                rendering,
                split: Split::Test,
            });
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        sources: spec.sources.clone(),
        targets: spec.targets.clone(),
    })
}
