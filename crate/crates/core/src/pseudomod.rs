//! Anatomy-consistent pseudo-modalities.
//!
//! D⁰ is the CLAHE-equalized, intensity-reversed source image. D¹–D³ are the
//! latent images of three synthesis networks trained with different seeds:
//! trained only to make their latent image segmentable, each network settles
//! on its own intensity style while the vessel layout is shared.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses::seg_loss;
use crate::nn::{Adam, FeatureMap, Module};
use crate::phantom::{Sample, VesselMap};
use crate::preprocess::{preprocess_d0, RawImage};
use crate::rng::{component_rng, indexed_rng};
use crate::segnet::{SynthesisLayout, SynthesisNet};

/// Number of pseudo-modalities per subject (D⁰…D³).
pub const MODALITIES: usize = 4;

/// The four pseudo-modality images of one subject with their shared label.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub subject_id: u64,
    /// `x[k]` is the image in pseudo-modality Dᵏ, intensities in [0, 1].
    pub x: [GrayImage; MODALITIES],
    pub label: VesselMap,
    /// Style family of the source rendering.
    pub source_style: String,
}

impl BankEntry {
    /// The meta-train image (D¹).
    pub fn meta_train_input(&self) -> &GrayImage {
        &self.x[1]
    }

    /// The three images spanning the mixup facet: D⁰, D², D³.
    pub fn mixup_sources(&self) -> [&GrayImage; 3] {
        [&self.x[0], &self.x[2], &self.x[3]]
    }

    pub fn validate(&self) -> Result<()> {
        for (k, img) in self.x.iter().enumerate() {
            if img.height != self.label.height || img.width != self.label.width {
                return Err(Error::ShapeMismatch(format!(
                    "subject {}: D{k} is {}x{}, label is {}x{}",
                    self.subject_id, img.height, img.width, self.label.height, self.label.width
                )));
            }
            if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "subject {}: D{k} intensities outside [0, 1]",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }

    /// Mean absolute difference between each pair of D¹, D², D³.
    pub fn style_spread(&self) -> [f64; 3] {
        [
            self.x[1].mean_abs_diff(&self.x[2]),
            self.x[1].mean_abs_diff(&self.x[3]),
            self.x[2].mean_abs_diff(&self.x[3]),
        ]
    }
}

/// All bank entries of a training set, ordered as the dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoModalityBank {
    pub entries: Vec<BankEntry>,
}

impl PseudoModalityBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.entries.iter().try_for_each(BankEntry::validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub layout: SynthesisLayout,
    /// Seeds of the three networks producing D¹, D², D³.
    pub seeds: [u64; 3],
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 2e-3,
            layout: SynthesisLayout::default(),
            seeds: [1, 2, 3],
        }
    }
}

/// Per-epoch mean training loss of one synthesis run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthesisReport {
    /// Mean `L_seg` of the untrained network over the dataset.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl SynthesisReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Trains one synthesis network on the raw source renderings with `L_CE + L_Dice`.
///
/// Initialization and batch order both derive from `seed`.
pub fn train_synthesis(
    dataset: &[Sample],
    seed: u64,
    cfg: &SynthesisConfig,
) -> Result<(SynthesisNet<f32>, SynthesisReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("synthesis training set"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("synthesis batch size and learning rate must be positive".into()));
    }
    let mut net = SynthesisNet::new(&cfg.layout, &mut component_rng(seed, "synthesis-init"));
    let inputs: Vec<FeatureMap<f32>> = dataset
        .iter()
        .map(|s| s.rendering.image.to_feature_map())
        .collect();

    let mut initial = 0.0;
    for (x, s) in inputs.iter().zip(dataset) {
        let (out, _) = net.forward(x)?;
        initial += seg_loss(&out.logits, &s.map)?.total();
    }
    let mut report = SynthesisReport {
        initial_loss: initial / dataset.len() as f64,
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };

    let mut opt = Adam::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut indexed_rng(seed, "synthesis-shuffle", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            net.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let (out, cache) = net.forward(&inputs[i])?;
                let loss = seg_loss(&out.logits, &dataset[i].map)?;
                if !loss.total().is_finite() {
                    return Err(Error::Divergence {
                        component: "L_seg".into(),
                        context: format!("synthesis seed {seed}, epoch {epoch}"),
                    });
                }
                total += loss.total();
                let mut g = loss.grad;
                g.data.iter_mut().for_each(|v| *v *= scale);
                net.backward(&g, &cache);
            }
            opt.step(&mut net, cfg.learning_rate);
        }
        let mean = total / dataset.len() as f64;
        log::debug!("synthesis seed {seed} epoch {epoch}: L_seg {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok((net, report))
}

/// Converts a source rendering to D⁰.
pub fn d0_of(sample: &Sample) -> Result<GrayImage> {
    preprocess_d0(&RawImage::Gray(sample.rendering.image.clone()))
}

/// Pearson correlation of two same-shaped images; 0 if either is flat.
pub fn correlation(a: &GrayImage, b: &GrayImage) -> f64 {
    let n = a.data.len() as f64;
    let ma = a.data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let mb = b.data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (x, y) = (*x as f64 - ma, *y as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Rescaled latent images of one network over `dataset`, inverted as a whole
/// when their mean correlation with D⁰ is negative: a network's latent sign
/// is arbitrary, while banked styles share D⁰'s vessel polarity.
fn aligned_latents(net: &SynthesisNet<f32>, dataset: &[Sample], d0: &[GrayImage]) -> Result<Vec<GrayImage>> {
    let mut latents = Vec::with_capacity(dataset.len());
    let mut corr = 0.0;
    for (s, x0) in dataset.iter().zip(d0) {
        let latent = net.latent(&s.rendering.image)?;
        if !latent.same_shape(x0) {
            return Err(Error::ShapeMismatch(format!(
                "subject {}: latent {}x{} vs image {}x{}",
                s.map.subject_id, latent.height, latent.width, x0.height, x0.width
            )));
        }
        if !latent.is_finite() {
            return Err(Error::NonFinite(format!("latent image of subject {}", s.map.subject_id)));
        }
        let latent = latent.rescaled();
        corr += correlation(&latent, x0);
        latents.push(latent);
    }
    if corr < 0.0 {
        for l in &mut latents {
            l.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        }
    }
    Ok(latents)
}

/// Assembles the bank: D⁰ by preprocessing, D¹–D³ as rescaled,
/// polarity-aligned latent images.
pub fn build_bank(nets: &[SynthesisNet<f32>; 3], dataset: &[Sample]) -> Result<PseudoModalityBank> {
    let d0: Vec<GrayImage> = dataset.iter().map(d0_of).collect::<Result<_>>()?;
    let mut per_net = nets
        .iter()
        .map(|net| aligned_latents(net, dataset, &d0).map(Vec::into_iter))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (s, x0) in dataset.iter().zip(d0) {
        let [x1, x2, x3] = [0, 1, 2].map(|k| per_net[k].next().expect("one latent per sample"));
        let entry = BankEntry {
            subject_id: s.map.subject_id,
            x: [x0, x1, x2, x3],
            label: s.map.clone(),
            source_style: s.rendering.style.clone(),
        };
        entry.validate()?;
        entries.push(entry);
    }
    Ok(PseudoModalityBank { entries })
}

/// Trains the three synthesis networks (seeds from `cfg`) and builds the bank.
pub fn synthesize_bank(
    dataset: &[Sample],
    cfg: &SynthesisConfig,
) -> Result<(PseudoModalityBank, [SynthesisNet<f32>; 3], [SynthesisReport; 3])> {
    let mut nets = Vec::with_capacity(3);
    let mut reports = Vec::with_capacity(3);
    for &seed in &cfg.seeds {
        let (net, report) = train_synthesis(dataset, seed, cfg)?;
        log::info!(
            "synthesis net seed {seed}: L_seg {:.4} -> {:.4}",
            report.initial_loss,
            report.final_loss()
        );
        nets.push(net);
        reports.push(report);
    }
    let nets: [SynthesisNet<f32>; 3] = nets.try_into().map_err(|_| Error::Empty("nets"))?;
    let reports: [SynthesisReport; 3] = reports.try_into().map_err(|_| Error::Empty("reports"))?;
    let bank = build_bank(&nets, dataset)?;
    Ok((bank, nets, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_split, SplitSpec};

    fn tiny_split() -> Vec<Sample> {
        let spec = SplitSpec {
            n_train: 3,
            n_test: 0,
            height: 32,
            width: 32,
            ..SplitSpec::default()
        };
        build_split(&spec, 5).unwrap().train
    }

    #[test]
    fn zero_epochs_returns_initialized_net() {
        let data = tiny_split();
        let cfg = SynthesisConfig {
            epochs: 0,
            ..SynthesisConfig::default()
        };
        let (net, report) = train_synthesis(&data, 4, &cfg).unwrap();
        let fresh: SynthesisNet<f32> = SynthesisNet::new(&cfg.layout, &mut component_rng(4, "synthesis-init"));
        let mut a = Vec::new();
        net.visit_params(&mut |p| a.extend_from_slice(&p.value));
        let mut b = Vec::new();
        fresh.visit_params(&mut |p| b.extend_from_slice(&p.value));
        assert_eq!(a, b);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train_synthesis(&[], 1, &SynthesisConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn bank_entries_share_labels_and_shapes() {
        let data = tiny_split();
        let cfg = SynthesisConfig {
            epochs: 1,
            seeds: [1, 2, 3],
            ..SynthesisConfig::default()
        };
        let (bank, nets, _) = synthesize_bank(&data, &cfg).unwrap();
        assert_eq!(bank.len(), data.len());
        for (e, s) in bank.entries.iter().zip(&data) {
            assert_eq!(e.label, s.map);
            e.validate().unwrap();
        }
        assert_eq!(build_bank(&nets, &data).unwrap(), bank);
    }
}
