use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{col2im3, im2col3};
use super::{FeatureMap, Real};

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<F>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "param shape/value mismatch");
        Self {
            name: name.into(),
            shape,
            grad: vec![F::zero(); n],
            value,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters.
pub trait Module<F: Real> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}

/// Same-padded convolution with a 3×3 or 1×1 kernel, stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

pub struct ConvCache<F> {
    cols: Vec<F>,
    height: usize,
    width: usize,
}

impl<F: Real> Conv2d<F> {
    /// He-normal initialization.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1×1 and 3×3 kernels");
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w: Vec<F> = (0..out_channels * fan_in)
            .map(|_| F::lit(normal.sample(rng)))
            .collect();
        Self {
            weight: Param::new(format!("{name}.weight"), vec![out_channels, in_channels, kernel, kernel], w),
            bias: Param::filled(format!("{name}.bias"), vec![out_channels], F::zero()),
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, ConvCache<F>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let p = x.plane();
        let cols = if self.kernel == 3 {
            let mut c = Vec::new();
            im2col3(x, &mut c);
            c
        } else {
            x.data.clone()
        };
        let mut out = FeatureMap::zeros(self.out_channels, x.height, x.width);
        for (o, b) in self.bias.value.iter().enumerate() {
            out.channel_mut(o).iter_mut().for_each(|v| *v = *b);
        }
        let k = self.fan_in();
        F::gemm(
            self.out_channels,
            k,
            p,
            F::one(),
            &self.weight.value,
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            F::one(),
            &mut out.data,
            p as isize,
            1,
        );
        (
            out,
            ConvCache {
                cols,
                height: x.height,
                width: x.width,
            },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &FeatureMap<F>, cache: &ConvCache<F>) -> FeatureMap<F> {
        let p = cache.height * cache.width;
        let k = self.fan_in();
        for o in 0..self.out_channels {
            self.bias.grad[o] += dy.channel(o).iter().copied().sum::<F>();
        }
        // dW += dY · colsᵀ
        F::gemm(
            self.out_channels,
            p,
            k,
            F::one(),
            &dy.data,
            p as isize,
            1,
            &cache.cols,
            1,
            p as isize,
            F::one(),
            &mut self.weight.grad,
            k as isize,
            1,
        );
        // dcols = Wᵀ · dY
        let mut dcols = vec![F::zero(); k * p];
        F::gemm(
            k,
            self.out_channels,
            p,
            F::one(),
            &self.weight.value,
            1,
            k as isize,
            &dy.data,
            p as isize,
            1,
            F::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        if self.kernel == 3 {
            col2im3(&dcols, self.in_channels, cache.height, cache.width)
        } else {
            FeatureMap::from_vec(self.in_channels, cache.height, cache.width, dcols)
        }
    }
}

impl<F: Real> Module<F> for Conv2d<F> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Group normalization over per-sample channel groups; identical in train and eval.
#[derive(Clone, Debug)]
pub struct GroupNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub groups: usize,
    pub eps: f64,
}

pub struct NormCache<F> {
    xhat: FeatureMap<F>,
    inv_std: Vec<F>,
}

impl<F: Real> GroupNorm<F> {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "channels must divide into groups");
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], F::one()),
            beta: Param::filled(format!("{name}.beta"), vec![channels], F::zero()),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, NormCache<F>) {
        let per = x.channels / self.groups * x.plane();
        let n = F::lit(per as f64);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let seg = &mut xhat.data[g * per..(g + 1) * per];
            let mean = seg.iter().copied().sum::<F>() / n;
            let var = seg.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / n;
            let is = F::one() / (var + F::lit(self.eps)).sqrt();
            seg.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut y = xhat.clone();
        for c in 0..x.channels {
            let (gm, bt) = (self.gamma.value[c], self.beta.value[c]);
            y.channel_mut(c).iter_mut().for_each(|v| *v = *v * gm + bt);
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, dy: &FeatureMap<F>, cache: &NormCache<F>) -> FeatureMap<F> {
        let channels = dy.channels;
        let p = dy.plane();
        let mut dxhat = dy.clone();
        for c in 0..channels {
            let (dyc, xc) = (dy.channel(c), cache.xhat.channel(c));
            self.beta.grad[c] += dyc.iter().copied().sum::<F>();
            self.gamma.grad[c] += dyc.iter().zip(xc).map(|(a, b)| *a * *b).sum::<F>();
            let gm = self.gamma.value[c];
            dxhat.channel_mut(c).iter_mut().for_each(|v| *v *= gm);
        }
        let per = channels / self.groups * p;
        let n = F::lit(per as f64);
        let mut dx = dxhat;
        for g in 0..self.groups {
            let xh = &cache.xhat.data[g * per..(g + 1) * per];
            let seg = &mut dx.data[g * per..(g + 1) * per];
            let sum_d = seg.iter().copied().sum::<F>();
            let sum_dx = seg.iter().zip(xh).map(|(a, b)| *a * *b).sum::<F>();
            let is = cache.inv_std[g];
            for (d, xv) in seg.iter_mut().zip(xh) {
                *d = is / n * (n * *d - sum_d - *xv * sum_dx);
            }
        }
        dx
    }
}

impl<F: Real> Module<F> for GroupNorm<F> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// SiLU activation `x·σ(x)`; smooth, so finite differences see no kinks.
pub fn silu<F: Real>(x: &FeatureMap<F>) -> FeatureMap<F> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = *v * sigmoid(*v));
    y
}

pub fn silu_backward<F: Real>(x: &FeatureMap<F>, dy: &FeatureMap<F>) -> FeatureMap<F> {
    let mut dx = dy.clone();
    for (d, xv) in dx.data.iter_mut().zip(&x.data) {
        let s = sigmoid(*xv);
        *d *= s * (F::one() + *xv * (F::one() - s));
    }
    dx
}

/// `silu(norm(conv(silu(norm(conv(x))))) + skip(x))`, with a 1×1 projection on
/// the skip path when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResBlock<F> {
    pub conv1: Conv2d<F>,
    pub norm1: GroupNorm<F>,
    pub conv2: Conv2d<F>,
    pub norm2: GroupNorm<F>,
    pub skip: Option<Conv2d<F>>,
}

pub struct ResCache<F> {
    c1: ConvCache<F>,
    n1: NormCache<F>,
    a1: FeatureMap<F>,
    c2: ConvCache<F>,
    n2: NormCache<F>,
    skip: Option<ConvCache<F>>,
    pre: FeatureMap<F>,
}

/// Groups used by every block's normalization layers.
pub const NORM_GROUPS: usize = 4;

impl<F: Real> ResBlock<F> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let groups = if cout.is_multiple_of(NORM_GROUPS) { NORM_GROUPS } else { 1 };
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, rng),
            norm1: GroupNorm::new(&format!("{name}.norm1"), cout, groups),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), cout, groups),
            skip: (cin != cout).then(|| Conv2d::new(&format!("{name}.skip"), cin, cout, 1, rng)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, ResCache<F>) {
        let (h, c1) = self.conv1.forward(x);
        let (h, n1) = self.norm1.forward(&h);
        let a1 = h;
        let h = silu(&a1);
        let (h, c2) = self.conv2.forward(&h);
        let (mut pre, n2) = self.norm2.forward(&h);
        let skip = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(x);
                pre.add_assign(&s);
                Some(cache)
            }
            None => {
                pre.add_assign(x);
                None
            }
        };
        let out = silu(&pre);
        (
            out,
            ResCache {
                c1,
                n1,
                a1,
                c2,
                n2,
                skip,
                pre,
            },
        )
    }

    pub fn backward(&mut self, dy: &FeatureMap<F>, cache: &ResCache<F>) -> FeatureMap<F> {
        self.backward_with_pre(dy, None, cache)
    }

    /// The residual sum before the output activation.
    pub fn pre_activation<'a>(&self, cache: &'a ResCache<F>) -> &'a FeatureMap<F> {
        &cache.pre
    }

    /// As [`backward`](Self::backward), with an extra gradient arriving
    /// directly at the pre-activation sum.
    pub fn backward_with_pre(
        &mut self,
        dy: &FeatureMap<F>,
        d_pre: Option<&FeatureMap<F>>,
        cache: &ResCache<F>,
    ) -> FeatureMap<F> {
        let mut dpre = silu_backward(&cache.pre, dy);
        if let Some(extra) = d_pre {
            dpre.add_assign(extra);
        }
        let mut dx = match (&mut self.skip, &cache.skip) {
            (Some(conv), Some(c)) => conv.backward(&dpre, c),
            _ => dpre.clone(),
        };
        let d = self.norm2.backward(&dpre, &cache.n2);
        let d = self.conv2.backward(&d, &cache.c2);
        let d = silu_backward(&cache.a1, &d);
        let d = self.norm1.backward(&d, &cache.n1);
        let d = self.conv1.backward(&d, &cache.c1);
        dx.add_assign(&d);
        dx
    }
}

impl<F: Real> Module<F> for ResBlock<F> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<F>)) {
        self.conv1.visit_params(f);
        self.norm1.visit_params(f);
        self.conv2.visit_params(f);
        self.norm2.visit_params(f);
        if let Some(s) = &self.skip {
            s.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.conv1.visit_params_mut(f);
        self.norm1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_params_mut(f);
        }
    }
}
