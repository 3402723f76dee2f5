//! Dirichlet mixup over the {D⁰, D², D³} facet of the pseudo-modality simplex.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::phantom::VesselMap;
use crate::pseudomod::BankEntry;

/// Tolerance on `Σλ = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Concentration vector of a 3-component Dirichlet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct DirichletParams([f64; 3]);

impl DirichletParams {
    pub fn new(alpha: [f64; 3]) -> Result<Self> {
        if alpha.iter().all(|a| a.is_finite() && *a > 0.0) {
            Ok(Self(alpha))
        } else {
            Err(Error::InvalidInput(format!(
                "Dirichlet concentrations must be finite and positive, got {alpha:?}"
            )))
        }
    }

    /// `α = [1, 1, 1]`: uniform over the simplex.
    pub fn uniform() -> Self {
        Self([1.0; 3])
    }

    pub fn alpha(&self) -> [f64; 3] {
        self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn mean(&self) -> [f64; 3] {
        let t = self.total();
        self.0.map(|a| a / t)
    }

    /// Marginal variances `α_i(α₀ − α_i) / (α₀²(α₀ + 1))`.
    pub fn variance(&self) -> [f64; 3] {
        let t = self.total();
        self.0.map(|a| a * (t - a) / (t * t * (t + 1.0)))
    }
}

impl Default for DirichletParams {
    fn default() -> Self {
        Self::uniform()
    }
}

impl TryFrom<[f64; 3]> for DirichletParams {
    type Error = Error;
    fn try_from(a: [f64; 3]) -> Result<Self> {
        Self::new(a)
    }
}

impl From<DirichletParams> for [f64; 3] {
    fn from(p: DirichletParams) -> Self {
        p.0
    }
}

/// A point on the probability simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupCoefficients([f64; 3]);

impl MixupCoefficients {
    pub fn new(lambda: [f64; 3]) -> Result<Self> {
        let sum: f64 = lambda.iter().sum();
        if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::OffSimplex(format!("{lambda:?} (sum {sum})")));
        }
        Ok(Self(lambda))
    }

    /// Simplex vertex `e_k`.
    pub fn vertex(k: usize) -> Self {
        let mut l = [0.0; 3];
        l[k] = 1.0;
        Self(l)
    }

    pub fn centroid() -> Self {
        Self([1.0 / 3.0; 3])
    }

    pub fn values(&self) -> [f64; 3] {
        self.0
    }
}

/// Standard Dirichlet density `Γ(α₀)/∏Γ(α_i) · ∏ λ_i^(α_i − 1)`, `α₀ = Σα_i`.
pub fn dirichlet_pdf(lambda: &[f64; 3], alpha: &DirichletParams) -> Result<f64> {
    let l = MixupCoefficients::new(*lambda)?;
    let a = alpha.alpha();
    let log_norm = ln_gamma(alpha.total()) - a.iter().map(|ai| ln_gamma(*ai)).sum::<f64>();
    let mut density = log_norm.exp();
    for (li, ai) in l.0.iter().zip(a) {
        // 0^0 = 1 on faces where α_i = 1
        if ai != 1.0 {
            density *= li.powf(ai - 1.0);
        }
    }
    Ok(density)
}

/// Draws `λ ~ Dir(α)` by normalizing independent `Gamma(α_i, 1)` variates.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: &DirichletParams, rng: &mut R) -> MixupCoefficients {
    let gammas = alpha
        .alpha()
        .map(|a| Gamma::new(a, 1.0).expect("validated concentration"));
    loop {
        let draws = [
            gammas[0].sample(rng),
            gammas[1].sample(rng),
            gammas[2].sample(rng),
        ];
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            let mut l = draws.map(|d| d / sum);
            // push the rounding residue onto the largest component
            let resid = 1.0 - l.iter().sum::<f64>();
            let k = (0..3).max_by(|&i, &j| l[i].total_cmp(&l[j])).unwrap_or(0);
            l[k] = (l[k] + resid).max(0.0);
            return MixupCoefficients(l);
        }
    }
}

/// One meta-test image drawn from the mixup facet.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupSample {
    pub image: GrayImage,
    pub lambda: MixupCoefficients,
    pub subject_id: u64,
    pub sample_index: usize,
    /// Ground truth: the subject's unchanged vessel map.
    pub label: VesselMap,
}

/// `s = λ₁x⁰ + λ₂x² + λ₃x³`, held inside the pixelwise input range.
pub fn mix(entry: &BankEntry, lambda: &MixupCoefficients) -> Result<MixupSample> {
    mix_indexed(entry, lambda, 0)
}

fn mix_indexed(entry: &BankEntry, lambda: &MixupCoefficients, index: usize) -> Result<MixupSample> {
    let [x0, x2, x3] = entry.mixup_sources();
    if !x0.same_shape(x2) || !x0.same_shape(x3) {
        return Err(Error::ShapeMismatch(format!(
            "subject {}: pseudo-modalities differ in shape",
            entry.subject_id
        )));
    }
    let [l1, l2, l3] = lambda.values();
    let data = x0
        .data
        .iter()
        .zip(&x2.data)
        .zip(&x3.data)
        .map(|((a, b), c)| {
            let (a, b, c) = (*a as f64, *b as f64, *c as f64);
            let s = l1 * a + l2 * b + l3 * c;
            let lo = a.min(b).min(c);
            let hi = a.max(b).max(c);
            s.clamp(lo, hi) as f32
        })
        .collect();
    Ok(MixupSample {
        image: GrayImage::new(x0.height, x0.width, data),
        lambda: *lambda,
        subject_id: entry.subject_id,
        sample_index: index,
        label: entry.label.clone(),
    })
}

/// `m` independent mixup samples per subject, subject-major order.
pub fn draw_meta_test_batch<R: Rng + ?Sized>(
    entries: &[&BankEntry],
    m: usize,
    alpha: &DirichletParams,
    rng: &mut R,
) -> Result<Vec<MixupSample>> {
    if entries.is_empty() {
        return Err(Error::Empty("bank"));
    }
    if m == 0 {
        return Err(Error::InvalidInput("samples per subject must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(entries.len() * m);
    for e in entries {
        for k in 0..m {
            let lambda = sample_lambda(alpha, rng);
            out.push(mix_indexed(e, &lambda, k)?);
        }
    }
    Ok(out)
}

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n − F|`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at significance `level` for `n` samples.
pub fn ks_critical(n: usize, level: f64) -> f64 {
    (-(level / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;

    #[test]
    fn uniform_density_is_two() {
        let a = DirichletParams::uniform();
        for l in [[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]] {
            assert!((dirichlet_pdf(&l, &a).unwrap() - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn boundary_density_values() {
        let a = DirichletParams::new([2.0, 1.0, 1.0]).unwrap();
        assert!((dirichlet_pdf(&[1.0, 0.0, 0.0], &a).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(dirichlet_pdf(&[0.0, 0.5, 0.5], &a).unwrap(), 0.0);
    }

    #[test]
    fn off_simplex_is_rejected() {
        let a = DirichletParams::uniform();
        assert!(matches!(
            dirichlet_pdf(&[0.5, 0.5, 0.1], &a),
            Err(Error::OffSimplex(_))
        ));
        assert!(DirichletParams::new([1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn samples_lie_on_the_simplex() {
        let mut rng = component_rng(1, "t");
        let a = DirichletParams::new([0.3, 2.0, 7.5]).unwrap();
        for _ in 0..10_000 {
            let l = sample_lambda(&a, &mut rng).values();
            assert!(l.iter().all(|v| *v >= 0.0));
            assert!((l.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        }
    }

    #[test]
    fn concentrated_draws_match_closed_form_variance() {
        let mut rng = component_rng(2, "var");
        let a = DirichletParams::new([5.0, 5.0, 5.0]).unwrap();
        let n = 50_000;
        let draws: Vec<[f64; 3]> = (0..n).map(|_| sample_lambda(&a, &mut rng).values()).collect();
        for k in 0..3 {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expect = a.variance()[k];
            assert!((var / expect - 1.0).abs() < 0.2, "var {var} vs {expect}");
        }
    }
}
