use rand::Rng;

use super::layers::{Conv2d, ConvCache, Module, Param, ResBlock, ResCache};
use super::{FeatureMap, Real};

/// Channel layout of a residual U-Net.
///
/// `encoder[i]` runs at resolution `H / 2^i`; the `bottleneck` blocks run at
/// the deepest encoder resolution; `decoder[j]` upsamples and concatenates the
/// encoder skip at resolution `H / 2^(L-2-j)` where `L = encoder.len()`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UNetLayout {
    pub in_channels: usize,
    pub encoder: Vec<usize>,
    pub bottleneck: Vec<usize>,
    pub decoder: Vec<usize>,
    pub out_channels: usize,
}

impl UNetLayout {
    pub fn downsample_factor(&self) -> usize {
        1 << (self.encoder.len() - 1)
    }

    /// Channel count of the deepest feature map (the feature tap).
    pub fn tap_channels(&self) -> usize {
        *self
            .bottleneck
            .last()
            .or(self.encoder.last())
            .expect("non-empty encoder")
    }

    /// Flattened per-block widths, encoder first.
    pub fn channel_plan(&self) -> Vec<usize> {
        self.encoder
            .iter()
            .chain(&self.bottleneck)
            .chain(&self.decoder)
            .copied()
            .collect()
    }

    fn validate(&self) {
        assert!(!self.encoder.is_empty(), "encoder needs at least one level");
        assert_eq!(
            self.decoder.len(),
            self.encoder.len() - 1,
            "decoder must mirror every downsampling step"
        );
    }
}

/// Residual U-Net with a pooled feature tap at the deepest level.
#[derive(Clone, Debug)]
pub struct ResUNet<F> {
    pub layout: UNetLayout,
    pub encoder: Vec<ResBlock<F>>,
    pub bottleneck: Vec<ResBlock<F>>,
    pub decoder: Vec<ResBlock<F>>,
    pub head: Conv2d<F>,
}

/// Everything the backward pass needs from one forward pass.
pub struct UNetCache<F> {
    enc: Vec<ResCache<F>>,
    enc_shapes: Vec<(usize, usize)>,
    bott: Vec<ResCache<F>>,
    dec: Vec<ResCache<F>>,
    head: ConvCache<F>,
    tap_hw: (usize, usize),
    pad: Padding,
}

/// Output of a forward pass.
pub struct UNetOutput<F> {
    pub output: FeatureMap<F>,
    /// Channel-wise global average of the deepest block's residual sum,
    /// taken before its output activation.
    pub tap: Vec<F>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Padding {
    orig_h: usize,
    orig_w: usize,
    bottom: usize,
    right: usize,
}

impl<F: Real> ResUNet<F> {
    pub fn new<R: Rng + ?Sized>(name: &str, layout: UNetLayout, rng: &mut R) -> Self {
        layout.validate();
        let mut cin = layout.in_channels;
        let mut encoder = Vec::new();
        for (i, &c) in layout.encoder.iter().enumerate() {
            encoder.push(ResBlock::new(&format!("{name}.enc{i}"), cin, c, rng));
            cin = c;
        }
        let mut bottleneck = Vec::new();
        for (i, &c) in layout.bottleneck.iter().enumerate() {
            bottleneck.push(ResBlock::new(&format!("{name}.mid{i}"), cin, c, rng));
            cin = c;
        }
        let levels = layout.encoder.len();
        let mut decoder = Vec::new();
        for (j, &c) in layout.decoder.iter().enumerate() {
            let skip = layout.encoder[levels - 2 - j];
            decoder.push(ResBlock::new(&format!("{name}.dec{j}"), cin + skip, c, rng));
            cin = c;
        }
        let head = Conv2d::new(&format!("{name}.head"), cin, layout.out_channels, 1, rng);
        Self {
            layout,
            encoder,
            bottleneck,
            decoder,
            head,
        }
    }

    pub fn forward(&self, input: &FeatureMap<F>) -> (UNetOutput<F>, UNetCache<F>) {
        assert_eq!(input.channels, self.layout.in_channels, "unet input channels");
        let factor = self.layout.downsample_factor();
        let pad = Padding {
            orig_h: input.height,
            orig_w: input.width,
            bottom: (factor - input.height % factor) % factor,
            right: (factor - input.width % factor) % factor,
        };
        let padded;
        let x0 = if pad.bottom == 0 && pad.right == 0 {
            input
        } else {
            padded = reflect_pad(input, pad.bottom, pad.right);
            &padded
        };

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut enc = Vec::with_capacity(self.encoder.len());
        let mut enc_shapes = Vec::with_capacity(self.encoder.len());
        let mut h: FeatureMap<F> = x0.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2();
            }
            enc_shapes.push((h.height, h.width));
            let (out, cache) = block.forward(&h);
            enc.push(cache);
            skips.push(out.clone());
            h = out;
        }
        let mut bott = Vec::with_capacity(self.bottleneck.len());
        for block in &self.bottleneck {
            let (out, cache) = block.forward(&h);
            bott.push(cache);
            h = out;
        }
        // signed features: pooled before the tap block's output activation
        let tap_block = match bott.last() {
            Some(c) => self.bottleneck[self.bottleneck.len() - 1].pre_activation(c),
            None => self.encoder[self.encoder.len() - 1].pre_activation(&enc[enc.len() - 1]),
        };
        let tap = tap_block.global_avg_pool();
        let tap_hw = (h.height, h.width);
        let levels = self.encoder.len();
        let mut dec = Vec::with_capacity(self.decoder.len());
        for (j, block) in self.decoder.iter().enumerate() {
            let up = h.upsample2();
            let cat = FeatureMap::concat(&up, &skips[levels - 2 - j]);
            let (out, cache) = block.forward(&cat);
            dec.push(cache);
            h = out;
        }
        let (mut output, head) = self.head.forward(&h);
        if pad.bottom != 0 || pad.right != 0 {
            output = crop(&output, pad.orig_h, pad.orig_w);
        }
        (
            UNetOutput { output, tap },
            UNetCache {
                enc,
                enc_shapes,
                bott,
                dec,
                head,
                tap_hw,
                pad,
            },
        )
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(
        &mut self,
        d_output: &FeatureMap<F>,
        d_tap: Option<&[F]>,
        cache: &UNetCache<F>,
    ) -> FeatureMap<F> {
        let pad = cache.pad;
        let d_out_padded;
        let d_out = if pad.bottom == 0 && pad.right == 0 {
            d_output
        } else {
            d_out_padded = uncrop(d_output, pad.orig_h + pad.bottom, pad.orig_w + pad.right);
            &d_out_padded
        };
        let mut d = self.head.backward(d_out, &cache.head);
        let levels = self.encoder.len();
        let mut d_skips: Vec<Option<FeatureMap<F>>> = vec![None; levels];
        for j in (0..self.decoder.len()).rev() {
            let dcat = self.decoder[j].backward(&d, &cache.dec[j]);
            let up_channels = dcat.channels - self.layout.encoder[levels - 2 - j];
            let (dup, dskip) = dcat.split(up_channels);
            d_skips[levels - 2 - j] = Some(dskip);
            d = dup.upsample2_backward();
        }
        let mut d_pre = d_tap.map(|dt| {
            let (h, w) = cache.tap_hw;
            FeatureMap::global_avg_pool_backward(dt, h, w)
        });
        for j in (0..self.bottleneck.len()).rev() {
            d = self.bottleneck[j].backward_with_pre(&d, d_pre.take().as_ref(), &cache.bott[j]);
        }
        for i in (0..levels).rev() {
            if let Some(ds) = d_skips[i].take() {
                d.add_assign(&ds);
            }
            d = self.encoder[i].backward_with_pre(&d, d_pre.take().as_ref(), &cache.enc[i]);
            if i > 0 {
                let (h, w) = cache.enc_shapes[i - 1];
                d = d.avg_pool2_backward(h, w);
            }
        }
        if pad.bottom == 0 && pad.right == 0 {
            d
        } else {
            reflect_pad_backward(&d, pad.orig_h, pad.orig_w)
        }
    }

    /// Forward pass without retaining caches.
    pub fn infer(&self, input: &FeatureMap<F>) -> UNetOutput<F> {
        self.forward(input).0
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResBlock<F>> {
        self.encoder
            .iter()
            .chain(&self.bottleneck)
            .chain(&self.decoder)
    }
}

impl<F: Real> Module<F> for ResUNet<F> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        for b in self.encoder.iter().chain(&self.bottleneck).chain(&self.decoder) {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for b in self
            .encoder
            .iter_mut()
            .chain(self.bottleneck.iter_mut())
            .chain(self.decoder.iter_mut())
        {
            b.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        // mirror without repeating the edge sample
        let over = i - (n - 1);
        (n - 1).saturating_sub(over % n.max(1))
    }
}

fn reflect_pad<F: Real>(x: &FeatureMap<F>, bottom: usize, right: usize) -> FeatureMap<F> {
    let (h, w) = (x.height + bottom, x.width + right);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            let sy = reflect_index(y, x.height);
            for xx in 0..w {
                dst[y * w + xx] = src[sy * x.width + reflect_index(xx, x.width)];
            }
        }
    }
    out
}

fn reflect_pad_backward<F: Real>(d: &FeatureMap<F>, h: usize, w: usize) -> FeatureMap<F> {
    let mut out = FeatureMap::zeros(d.channels, h, w);
    for c in 0..d.channels {
        let src = d.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..d.height {
            let sy = reflect_index(y, h);
            for xx in 0..d.width {
                dst[sy * w + reflect_index(xx, w)] += src[y * d.width + xx];
            }
        }
    }
    out
}

fn crop<F: Real>(x: &FeatureMap<F>, h: usize, w: usize) -> FeatureMap<F> {
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[y * x.width..y * x.width + w]);
        }
    }
    out
}

fn uncrop<F: Real>(d: &FeatureMap<F>, h: usize, w: usize) -> FeatureMap<F> {
    let mut out = FeatureMap::zeros(d.channels, h, w);
    for c in 0..d.channels {
        let src = d.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..d.height {
            dst[y * w..y * w + d.width].copy_from_slice(&src[y * d.width..(y + 1) * d.width]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_layout() -> UNetLayout {
        UNetLayout {
            in_channels: 1,
            encoder: vec![4, 4],
            bottleneck: vec![8],
            decoder: vec![4],
            out_channels: 2,
        }
    }

    #[test]
    fn shapes_follow_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: ResUNet<f64> = ResUNet::new("t", tiny_layout(), &mut rng);
        let x = FeatureMap::zeros(1, 8, 6);
        let out = net.infer(&x);
        assert_eq!((out.output.channels, out.output.height, out.output.width), (2, 8, 6));
        assert_eq!(out.tap.len(), 8);
    }

    #[test]
    fn odd_sizes_are_reflect_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: ResUNet<f64> = ResUNet::new("t", tiny_layout(), &mut rng);
        let x = FeatureMap::from_vec(1, 5, 7, (0..35).map(|i| i as f64 / 35.0).collect());
        let out = net.infer(&x);
        assert_eq!((out.output.height, out.output.width), (5, 7));
        assert!(out.output.is_finite());
    }

    #[test]
    fn reflect_pad_adjoint() {
        let x = FeatureMap::from_vec(1, 3, 3, (0..9).map(|i| i as f64 + 1.0).collect());
        let p = reflect_pad(&x, 1, 1);
        assert_eq!(p.channel(0)[..4], [1.0, 2.0, 3.0, 2.0]);
        let g = FeatureMap::from_vec(1, 4, 4, (0..16).map(|i| (i as f64).cos()).collect());
        let lhs: f64 = p.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = reflect_pad_backward(&g, 3, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
