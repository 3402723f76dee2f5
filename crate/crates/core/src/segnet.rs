//! The segmentation network `g` and the synthesis network `f = f_d ∘ f_e`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{FeatureMap, Module, Param, Real, ResUNet, UNetCache, UNetLayout};

/// Per-block widths of the segmentation network.
pub const SEGNET_CHANNELS: [usize; 6] = [8, 32, 32, 64, 64, 16];

/// Six residual blocks: three encoder levels (8, 32, 32), a 64-wide
/// bottleneck block at the deepest level, and two decoder levels (64, 16).
pub fn segnet_layout() -> UNetLayout {
    UNetLayout {
        in_channels: 1,
        encoder: SEGNET_CHANNELS[..3].to_vec(),
        bottleneck: vec![SEGNET_CHANNELS[3]],
        decoder: SEGNET_CHANNELS[4..].to_vec(),
        out_channels: 2,
    }
}

fn check_input<F: Real>(x: &FeatureMap<F>, what: &str) -> Result<()> {
    if x.channels != 1 {
        return Err(Error::ShapeMismatch(format!("{what}: expected one input channel")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    Ok(())
}

/// Segmentation network with a pooled bottleneck feature tap.
#[derive(Clone, Debug)]
pub struct SegNet<F> {
    pub unet: ResUNet<F>,
}

/// Output of [`SegNet::forward`].
pub struct SegOutput<F> {
    /// `2 × H × W` class logits (channel 1 = vessel).
    pub logits: FeatureMap<F>,
    /// Pooled, pre-activation bottleneck feature.
    pub z: Vec<F>,
}

impl<F: Real> SegNet<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::with_layout(segnet_layout(), rng)
    }

    pub fn with_layout<R: Rng + ?Sized>(layout: UNetLayout, rng: &mut R) -> Self {
        Self {
            unet: ResUNet::new("seg", layout, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.unet.layout.tap_channels()
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> Result<(SegOutput<F>, UNetCache<F>)> {
        check_input(x, "segmentation")?;
        let (out, cache) = self.unet.forward(x);
        Ok((
            SegOutput {
                logits: out.output,
                z: out.tap,
            },
            cache,
        ))
    }

    pub fn forward_image(&self, img: &GrayImage) -> Result<(SegOutput<F>, UNetCache<F>)> {
        self.forward(&img.to_feature_map())
    }

    /// Inference-only forward pass.
    pub fn predict(&self, img: &GrayImage) -> Result<SegOutput<F>> {
        Ok(self.forward_image(img)?.0)
    }

    pub fn backward(
        &mut self,
        d_logits: &FeatureMap<F>,
        d_z: Option<&[F]>,
        cache: &UNetCache<F>,
    ) -> FeatureMap<F> {
        self.unet.backward(d_logits, d_z, cache)
    }
}

impl<F: Real> Module<F> for SegNet<F> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        self.unet.visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.unet.visit_params_mut(f)
    }
}

/// Channel plans of the synthesis encoder and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisLayout {
    pub encoder: Vec<usize>,
    pub bottleneck: Vec<usize>,
    pub decoder: Vec<usize>,
}

impl Default for SynthesisLayout {
    fn default() -> Self {
        Self {
            encoder: vec![8, 16],
            bottleneck: vec![16],
            decoder: vec![8],
        }
    }
}

impl SynthesisLayout {
    fn unet(&self, out_channels: usize) -> UNetLayout {
        UNetLayout {
            in_channels: 1,
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            out_channels,
        }
    }
}

/// `f_e` maps an image to a same-sized one-channel latent image; `f_d`
/// segments that latent image.
#[derive(Clone, Debug)]
pub struct SynthesisNet<F> {
    pub encoder: ResUNet<F>,
    pub decoder: ResUNet<F>,
}

pub struct SynthOutput<F> {
    pub latent: FeatureMap<F>,
    pub logits: FeatureMap<F>,
}

pub struct SynthCache<F> {
    enc: UNetCache<F>,
    dec: UNetCache<F>,
}

impl<F: Real> SynthesisNet<F> {
    pub fn new<R: Rng + ?Sized>(layout: &SynthesisLayout, rng: &mut R) -> Self {
        Self {
            encoder: ResUNet::new("synth.enc", layout.unet(1), rng),
            decoder: ResUNet::new("synth.dec", layout.unet(2), rng),
        }
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> Result<(SynthOutput<F>, SynthCache<F>)> {
        check_input(x, "synthesis")?;
        let (e, enc) = self.encoder.forward(x);
        let (d, dec) = self.decoder.forward(&e.output);
        Ok((
            SynthOutput {
                latent: e.output,
                logits: d.output,
            },
            SynthCache { enc, dec },
        ))
    }

    /// Latent image for `img`, without retaining caches.
    pub fn latent(&self, img: &GrayImage) -> Result<GrayImage> {
        let x = img.to_feature_map::<F>();
        check_input(&x, "synthesis")?;
        let e = self.encoder.infer(&x);
        Ok(GrayImage::from_channel(&e.output, 0))
    }

    pub fn backward(&mut self, d_logits: &FeatureMap<F>, cache: &SynthCache<F>) -> FeatureMap<F> {
        let d_latent = self.decoder.backward(d_logits, None, &cache.dec);
        self.encoder.backward(&d_latent, None, &cache.enc)
    }
}

impl<F: Real> Module<F> for SynthesisNet<F> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.encoder.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
}
