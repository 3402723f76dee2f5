//! Objectives: segmentation (CE + soft Dice), anchor similarity, and the
//! normalized cross-correlation clustering loss.
//!
//! Every loss returns its value together with the analytic gradient w.r.t. its
//! inputs; accumulations are carried out in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Real};
use crate::phantom::VesselMap;

/// Smoothing term of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SegLoss<F> {
    pub ce: f64,
    pub dice: f64,
    /// d(ce + dice)/d(logits).
    pub grad: FeatureMap<F>,
}

impl<F> SegLoss<F> {
    pub fn total(&self) -> f64 {
        self.ce + self.dice
    }
}

/// Per-pixel softmax probability of the vessel class (channel 1).
pub fn vessel_probability<F: Real>(logits: &FeatureMap<F>) -> Vec<f64> {
    let (l0, l1) = (logits.channel(0), logits.channel(1));
    l0.iter()
        .zip(l1)
        .map(|(a, b)| sigmoid(b.as_f64() - a.as_f64()))
        .collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `L_CE + L_Dice` for two-class logits against a binary map.
///
/// Cross-entropy is averaged over pixels; the Dice term is
/// `1 − (2Σp·y + ε)/(Σp + Σy + ε)` on the vessel-class probability.
pub fn seg_loss<F: Real>(logits: &FeatureMap<F>, y: &VesselMap) -> Result<SegLoss<F>> {
    if logits.channels != 2 || logits.height != y.height || logits.width != y.width {
        return Err(Error::ShapeMismatch(format!(
            "logits {}x{}x{} vs label {}x{}",
            logits.channels, logits.height, logits.width, y.height, y.width
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("segmentation logits".into()));
    }
    let n = y.pixels.len() as f64;
    let (l0, l1) = (logits.channel(0), logits.channel(1));
    let mut ce = 0.0;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let ysum = y.vessel_count() as f64;
    let mut p1 = Vec::with_capacity(y.pixels.len());
    for ((a, b), t) in l0.iter().zip(l1).zip(&y.pixels) {
        let d = b.as_f64() - a.as_f64();
        // log-sum-exp form of -log softmax
        let nll = if *t == 1 { softplus(-d) } else { softplus(d) };
        ce += nll;
        let p = sigmoid(d);
        inter += p * *t as f64;
        psum += p;
        p1.push(p);
    }
    ce /= n;
    let num = 2.0 * inter + DICE_EPS;
    let den = psum + ysum + DICE_EPS;
    let dice = 1.0 - num / den;

    let mut grad = FeatureMap::zeros(2, logits.height, logits.width);
    let p = logits.plane();
    for (i, (&pv, t)) in p1.iter().zip(&y.pixels).enumerate() {
        let t = *t as f64;
        let dce_dd = (pv - t) / n; // d/d(l1 - l0)
        let ddice_dp = -(2.0 * t * den - num) / (den * den);
        let dd = dce_dd + ddice_dp * pv * (1.0 - pv);
        grad.data[p + i] = F::lit(dd);
        grad.data[i] = F::lit(-dd);
    }
    Ok(SegLoss { ce, dice, grad })
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_dims(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

/// Result of [`sim_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimLoss {
    pub value: f64,
    /// Gradient per sample vector.
    pub grad_samples: Vec<Vec<f64>>,
    /// Gradient w.r.t. the anchor (unused when the anchor is detached).
    pub grad_anchor: Vec<f64>,
}

/// `Σ_m ‖z_m − z_a‖₁`.
pub fn sim_loss(anchor: &[f64], samples: &[Vec<f64>]) -> Result<SimLoss> {
    let d = anchor.len();
    let mut value = 0.0;
    let mut grad_samples = Vec::with_capacity(samples.len());
    let mut grad_anchor = vec![0.0; d];
    for s in samples {
        check_dims(d, s)?;
        let mut g = Vec::with_capacity(d);
        for (k, (zs, za)) in s.iter().zip(anchor).enumerate() {
            let diff = zs - za;
            value += diff.abs();
            let sgn = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            g.push(sgn);
            grad_anchor[k] -= sgn;
        }
        grad_samples.push(g);
    }
    Ok(SimLoss {
        value,
        grad_samples,
        grad_anchor,
    })
}

/// Latent vectors with subject identity, as fed to the NCC matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub vectors: Vec<Vec<f64>>,
    pub subject_ids: Vec<u64>,
    pub anchor_flags: Vec<bool>,
    /// Mixup sample index (ignored for anchors).
    pub sample_indices: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(
        vectors: Vec<Vec<f64>>,
        subject_ids: Vec<u64>,
        anchor_flags: Vec<bool>,
        sample_indices: Vec<usize>,
    ) -> Result<Self> {
        let n = vectors.len();
        if subject_ids.len() != n || anchor_flags.len() != n || sample_indices.len() != n {
            return Err(Error::ShapeMismatch("feature batch columns differ in length".into()));
        }
        if let Some(first) = vectors.first() {
            for v in &vectors {
                check_dims(first.len(), v)?;
            }
        }
        Ok(Self {
            vectors,
            subject_ids,
            anchor_flags,
            sample_indices,
        })
    }

    /// Batch of plain vectors, each its own subject unless ids are given.
    pub fn from_vectors(vectors: Vec<Vec<f64>>, subject_ids: Vec<u64>) -> Result<Self> {
        let n = vectors.len();
        Self::new(vectors, subject_ids, vec![false; n], (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Row order: by subject, anchor first, then sample index; ties by batch position.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| {
            (
                self.subject_ids[i],
                !self.anchor_flags[i],
                self.sample_indices[i],
                i,
            )
        });
        order
    }
}

/// Cosine-similarity matrix of a batch and its same-subject target.
#[derive(Clone, Debug, PartialEq)]
pub struct NccMatrix {
    pub n: usize,
    /// Row-major `n × n`.
    pub c: Vec<f64>,
    /// Row-major `n × n`, entries 0 or 1.
    pub target: Vec<f64>,
    /// `order[r]` is the batch index of row `r`.
    pub order: Vec<usize>,
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl NccMatrix {
    #[inline]
    pub fn at(&self, p: usize, q: usize) -> f64 {
        self.c[p * self.n + q]
    }

    #[inline]
    pub fn target_at(&self, p: usize, q: usize) -> f64 {
        self.target[p * self.n + q]
    }
}

/// `C[p,q] = z_p·z_q / (‖z_p‖‖z_q‖)` over the canonically ordered batch.
pub fn ncc_matrix(batch: &FeatureBatch) -> Result<NccMatrix> {
    let order = batch.canonical_order();
    let n = batch.len();
    let mut units = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for &i in &order {
        let v = &batch.vectors[i];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm { index: i });
        }
        units.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
        norms.push(norm);
    }
    let mut c = vec![0.0; n * n];
    let mut target = vec![0.0; n * n];
    for p in 0..n {
        c[p * n + p] = 1.0;
        target[p * n + p] = 1.0;
        for q in p + 1..n {
            let v = units[p]
                .iter()
                .zip(&units[q])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .clamp(-1.0, 1.0);
            c[p * n + q] = v;
            c[q * n + p] = v;
            let same = (batch.subject_ids[order[p]] == batch.subject_ids[order[q]]) as u8 as f64;
            target[p * n + q] = same;
            target[q * n + p] = same;
        }
    }
    Ok(NccMatrix {
        n,
        c,
        target,
        order,
        units,
        norms,
    })
}

/// `‖C* − C‖_F²`.
pub fn ncc_loss(m: &NccMatrix) -> f64 {
    m.c.iter()
        .zip(&m.target)
        .map(|(c, t)| (t - c) * (t - c))
        .sum()
}

/// Gradient of [`ncc_loss`] w.r.t. the original (batch-ordered) vectors.
pub fn ncc_loss_grad(m: &NccMatrix) -> Vec<Vec<f64>> {
    let n = m.n;
    let dim = m.units.first().map_or(0, Vec::len);
    let mut out = vec![Vec::new(); n];
    for p in 0..n {
        // dL/du_p = 2 Σ_q G_pq u_q with G = −2(C* − C); diagonal is constant
        let mut du = vec![0.0; dim];
        for q in 0..n {
            if q == p {
                continue;
            }
            let g = -4.0 * (m.target_at(p, q) - m.at(p, q));
            for (d, u) in du.iter_mut().zip(&m.units[q]) {
                *d += g * u;
            }
        }
        // project onto the tangent of the sphere and undo the normalization
        let u = &m.units[p];
        let dot: f64 = du.iter().zip(u).map(|(a, b)| a * b).sum();
        let grad: Vec<f64> = du
            .iter()
            .zip(u)
            .map(|(d, uu)| (d - dot * uu) / m.norms[p])
            .collect();
        out[m.order[p]] = grad;
    }
    out
}

/// Weights of the meta-test objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub sim: f64,
    pub ncc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 100.0,
            sim: 100.0,
            ncc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.seg, self.sim, self.ncc]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("loss weights {self:?}")))
        }
    }
}

/// Unweighted meta-test loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub seg: f64,
    pub sim: f64,
    pub ncc: f64,
}

/// `ω₁L_seg + ω₂L_sim + ω₃L_ncc`.
pub fn meta_test_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_seg", c.seg), ("L_sim", c.sim), ("L_ncc", c.ncc)] {
        if !v.is_finite() {
            return Err(Error::Divergence {
                component: name.into(),
                context: "meta-test loss".into(),
            });
        }
    }
    Ok(w.seg * c.seg + w.sim * c.sim + w.ncc * c.ncc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pixels: Vec<u8>, h: usize, w: usize) -> VesselMap {
        VesselMap::new(0, h, w, pixels).unwrap()
    }

    #[test]
    fn confident_correct_logits_give_small_loss() {
        let y = map(vec![1, 0, 0, 1, 1, 0, 1, 0, 0], 3, 3);
        let mut logits = FeatureMap::<f64>::zeros(2, 3, 3);
        for (i, t) in y.pixels.iter().enumerate() {
            logits.data[i] = if *t == 0 { 10.0 } else { -10.0 };
            logits.data[9 + i] = -logits.data[i];
        }
        let l = seg_loss(&logits, &y).unwrap();
        assert!(l.total() < 0.05, "{}", l.total());
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let y = map(vec![1, 0, 1, 0], 2, 2);
        let l = seg_loss(&FeatureMap::<f64>::zeros(2, 2, 2), &y).unwrap();
        assert!((l.ce - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&l.dice));
    }

    #[test]
    fn seg_loss_rejects_bad_inputs() {
        let y = map(vec![1, 0, 1, 0], 2, 2);
        assert!(seg_loss(&FeatureMap::<f64>::zeros(2, 3, 2), &y).is_err());
        let mut l = FeatureMap::<f64>::zeros(2, 2, 2);
        l.data[0] = f64::NAN;
        assert!(matches!(seg_loss(&l, &y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sim_loss_hand_values() {
        let l = sim_loss(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, -2.0]]).unwrap();
        assert_eq!(l.value, 3.0);
        assert_eq!(sim_loss(&[1.0, 2.0], &[vec![1.0, 2.0]]).unwrap().value, 0.0);
        assert!(matches!(
            sim_loss(&[1.0, 2.0], &[vec![1.0]]),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn ncc_small_cases() {
        let one = FeatureBatch::from_vectors(vec![vec![0.3, -1.0]], vec![4]).unwrap();
        let m = ncc_matrix(&one).unwrap();
        assert_eq!((m.c.clone(), m.target.clone()), (vec![1.0], vec![1.0]));

        let anti = FeatureBatch::from_vectors(vec![vec![1.0, 2.0], vec![-1.0, -2.0]], vec![0, 1]).unwrap();
        assert!((ncc_matrix(&anti).unwrap().at(0, 1) + 1.0).abs() < 1e-15);
        let orth = FeatureBatch::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 3.0]], vec![0, 0]).unwrap();
        let m = ncc_matrix(&orth).unwrap();
        assert_eq!(m.at(0, 1), 0.0);
        // C = I, C* = all ones
        assert_eq!(ncc_loss(&m), 2.0);

        let zero = FeatureBatch::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![0, 1]).unwrap();
        assert!(matches!(ncc_matrix(&zero), Err(Error::ZeroNorm { index: 1 })));
    }

    #[test]
    fn canonical_order_puts_anchor_first() {
        let b = FeatureBatch::new(
            vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
            vec![7, 3, 3, 3],
            vec![false, false, true, false],
            vec![0, 1, 0, 0],
        )
        .unwrap();
        assert_eq!(b.canonical_order(), vec![2, 3, 1, 0]);
    }

    #[test]
    fn meta_test_loss_weights() {
        let c = LossComponents {
            seg: 0.5,
            sim: 0.01,
            ncc: 2.0,
        };
        assert!((meta_test_loss(&c, &LossWeights::default()).unwrap() - 53.0).abs() < 1e-12);
        let only_seg = LossWeights {
            seg: 1.0,
            sim: 0.0,
            ncc: 0.0,
        };
        assert_eq!(meta_test_loss(&c, &only_seg).unwrap(), 0.5);
        assert_eq!(
            meta_test_loss(&LossComponents::default(), &LossWeights::default()).unwrap(),
            0.0
        );
        let bad = LossComponents {
            sim: f64::INFINITY,
            ..c
        };
        assert!(meta_test_loss(&bad, &only_seg).unwrap_err().is_divergence());
    }
}
