use super::Real;

/// A single-sample activation volume stored channel-major (`C × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![F::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stacks channels of `a` followed by channels of `b`.
    pub fn concat(a: &Self, b: &Self) -> Self {
        assert!(a.height == b.height && a.width == b.width, "concat spatial mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Self::from_vec(a.channels + b.channels, a.height, a.width, data)
    }

    /// Inverse of [`FeatureMap::concat`]: splits after `first` channels.
    pub fn split(&self, first: usize) -> (Self, Self) {
        let cut = first * self.plane();
        (
            Self::from_vec(first, self.height, self.width, self.data[..cut].to_vec()),
            Self::from_vec(
                self.channels - first,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }

    /// 2×2 average pooling.
    pub fn avg_pool2(&self) -> Self {
        let (h2, w2) = (self.height / 2, self.width / 2);
        let mut out = Self::zeros(self.channels, h2, w2);
        let quarter = F::lit(0.25);
        for c in 0..self.channels {
            let src = self.channel(c);
            let w = self.width;
            let dst = out.channel_mut(c);
            for y in 0..h2 {
                for x in 0..w2 {
                    let i = 2 * y * w + 2 * x;
                    dst[y * w2 + x] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        out
    }

    /// Adjoint of [`FeatureMap::avg_pool2`].
    pub fn avg_pool2_backward(&self, height: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.channels, height, width);
        let quarter = F::lit(0.25);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..self.height {
                for x in 0..self.width {
                    let g = src[y * self.width + x] * quarter;
                    let i = 2 * y * width + 2 * x;
                    dst[i] = g;
                    dst[i + 1] = g;
                    dst[i + width] = g;
                    dst[i + width + 1] = g;
                }
            }
        }
        out
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&self) -> Self {
        let (h2, w2) = (self.height * 2, self.width * 2);
        let mut out = Self::zeros(self.channels, h2, w2);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..h2 {
                let row = &src[(y / 2) * self.width..(y / 2 + 1) * self.width];
                for x in 0..w2 {
                    dst[y * w2 + x] = row[x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`FeatureMap::upsample2`].
    pub fn upsample2_backward(&self) -> Self {
        let (h2, w2) = (self.height / 2, self.width / 2);
        let mut out = Self::zeros(self.channels, h2, w2);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..self.height {
                for x in 0..self.width {
                    dst[(y / 2) * w2 + x / 2] += src[y * self.width + x];
                }
            }
        }
        out
    }

    /// Channel-wise spatial mean.
    pub fn global_avg_pool(&self) -> Vec<F> {
        let n = F::lit(self.plane() as f64);
        (0..self.channels)
            .map(|c| self.channel(c).iter().copied().sum::<F>() / n)
            .collect()
    }

    /// Adjoint of [`FeatureMap::global_avg_pool`].
    pub fn global_avg_pool_backward(grad: &[F], height: usize, width: usize) -> Self {
        let n = F::lit((height * width) as f64);
        let mut out = Self::zeros(grad.len(), height, width);
        for (c, g) in grad.iter().enumerate() {
            let v = *g / n;
            out.channel_mut(c).iter_mut().for_each(|d| *d = v);
        }
        out
    }
}

/// Unfolds a 3×3, stride-1, zero-padded neighbourhood into a `(9·C) × (H·W)` matrix.
pub(crate) fn im2col3<F: Real>(x: &FeatureMap<F>, cols: &mut Vec<F>) {
    let (h, w) = (x.height, x.width);
    let p = h * w;
    cols.clear();
    cols.resize(x.channels * 9 * p, F::zero());
    for c in 0..x.channels {
        let src = x.channel(c);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * p;
                let dst = &mut cols[row..row + p];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let (x0, x1) = (dx.max(0) as usize, (w as isize + dx.min(0)) as usize);
                    // output x ranges over [x0 - dx, x1 - dx)
                    let out0 = (x0 as isize - dx) as usize;
                    let len = x1 - x0;
                    drow[out0..out0 + len].copy_from_slice(&srow[x0..x1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im3<F: Real>(cols: &[F], channels: usize, h: usize, w: usize) -> FeatureMap<F> {
    let p = h * w;
    let mut out = FeatureMap::zeros(channels, h, w);
    for c in 0..channels {
        let dst = out.channel_mut(c);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * p;
                let src = &cols[row..row + p];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let (x0, x1) = (dx.max(0) as usize, (w as isize + dx.min(0)) as usize);
                    let out0 = (x0 as isize - dx) as usize;
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &src[y * w..(y + 1) * w];
                    for (d, s) in drow[x0..x1].iter_mut().zip(&srow[out0..out0 + (x1 - x0)]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3(x: &FeatureMap<f64>, k: &[f64], c_out: usize) -> FeatureMap<f64> {
        let (h, w) = (x.height as isize, x.width as isize);
        let mut out = FeatureMap::zeros(c_out, x.height, x.width);
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for c in 0..x.channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                    continue;
                                }
                                let kv = k[o * x.channels * 9 + c * 9 + (ky * 3 + kx) as usize];
                                acc += kv * x.channel(c)[(sy * w + sx) as usize];
                            }
                        }
                    }
                    out.channel_mut(o)[(y * w + xx) as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let x = FeatureMap::from_vec(2, 3, 5, (0..30).map(|i| (i as f64 * 0.37).sin()).collect());
        let k: Vec<f64> = (0..3 * 18).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = Vec::new();
        im2col3(&x, &mut cols);
        let mut out = vec![0.0; 3 * 15];
        f64::gemm(3, 18, 15, 1.0, &k, 18, 1, &cols, 15, 1, 0.0, &mut out, 15, 1);
        let expect = naive_conv3(&x, &k, 3);
        for (a, b) in out.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = FeatureMap::from_vec(2, 4, 3, (0..24).map(|i| (i as f64).sqrt()).collect());
        let mut cols = Vec::new();
        im2col3(&x, &mut cols);
        let g: Vec<f64> = (0..cols.len()).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = col2im3(&g, 2, 4, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pooling_and_upsampling_adjoints() {
        let x = FeatureMap::from_vec(1, 4, 4, (0..16).map(|i| i as f64).collect());
        let pooled = x.avg_pool2();
        assert_eq!(pooled.data, vec![2.5, 4.5, 10.5, 12.5]);
        let g = FeatureMap::from_vec(1, 2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let lhs: f64 = pooled.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(&g.avg_pool2_backward(4, 4).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let up = g.upsample2();
        let lhs: f64 = up.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = g
            .data
            .iter()
            .zip(&x.upsample2_backward().data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
