//! Episodic meta-training of the segmentation network.
//!
//! Each episode (one batch of subjects) runs two first-order stages:
//!
//! 1. **meta-train** on the D¹ images with `L_seg`; the pooled features of
//!    this pass are kept as per-subject anchors; one Adam step at `η_train`.
//! 2. **meta-test** on `M` Dirichlet-mixup samples per subject, forwarded
//!    through the *updated* parameters, with
//!    `L_test = ω₁L_seg + ω₂L_sim + ω₃L_ncc`; one step of a second Adam
//!    state at `η_test`.
//!
//! With `episodic = false` every batch is a plain supervised step on D⁰,
//! optionally with `L_ncc` over the batch features (each subject its own
//! cluster).

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses::{
    meta_test_loss, ncc_loss, ncc_loss_grad, ncc_matrix, seg_loss, sim_loss, FeatureBatch,
    LossComponents, LossWeights,
};
use crate::mixup::{draw_meta_test_batch, DirichletParams};
use crate::nn::{Adam, FeatureMap, Module, UNetCache};
use crate::phantom::VesselMap;
use crate::pseudomod::{BankEntry, PseudoModalityBank};
use crate::rng::indexed_rng;
use crate::segnet::SegNet;

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_train: f64,
    pub lr_test: f64,
    /// Multiplicative learning-rate decay ...
    pub lr_decay: f64,
    /// ... applied every this many epochs.
    pub decay_every: usize,
    pub weights: LossWeights,
    pub alpha: DirichletParams,
    /// Mixup samples per subject per episode (`M`).
    pub samples_per_subject: usize,
    pub seed: u64,
    /// Meta-train/meta-test episodes; `false` trains plainly on D⁰.
    pub episodic: bool,
    /// Treat anchors as constants in `L_sim` / `L_ncc`.
    pub detach_anchor: bool,
    /// Reserved for a MAML-style lookahead variant; must stay `false`.
    pub lookahead: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 30,
            lr_train: 1e-3,
            lr_test: 5e-3,
            lr_decay: 0.5,
            decay_every: 3,
            weights: LossWeights::default(),
            alpha: DirichletParams::uniform(),
            samples_per_subject: 3,
            seed: 0,
            episodic: true,
            detach_anchor: true,
            lookahead: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_train > 0.0 && self.lr_test > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::Config("lr_decay must lie in (0, 1] and decay_every be positive".into()));
        }
        if self.samples_per_subject == 0 {
            return Err(Error::Config("samples_per_subject must be at least 1".into()));
        }
        if self.lookahead {
            return Err(Error::Config("lookahead updates are not supported".into()));
        }
        self.weights.validate()
    }

    /// `base · decay^⌊epoch / decay_every⌋` (epochs counted from 0).
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Loss terms of one optimizer step (meta-train + meta-test for episodes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr_train: f64,
    pub lr_test: f64,
    /// `L_seg` of the meta-train stage (D¹), or of the plain step.
    pub meta_train_seg: f64,
    pub seg: f64,
    pub sim: f64,
    pub ncc: f64,
    pub test: f64,
    /// Parameter version right after the meta-train update.
    pub version_after_meta_train: u64,
    /// Parameter version the meta-test forward pass ran with.
    pub version_at_meta_test: u64,
}

/// Per-epoch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_train: f64,
    pub lr_test: f64,
    pub meta_train_seg: f64,
    pub seg: f64,
    pub sim: f64,
    pub ncc: f64,
    pub test: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Network plus optimizer state; everything needed to resume a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: SegNet<f32>,
    pub opt_train: Adam,
    pub opt_test: Adam,
    pub next_epoch: usize,
    pub step: u64,
    /// Incremented on every parameter update.
    pub version: u64,
}

impl TrainState {
    pub fn new(net: SegNet<f32>) -> Self {
        Self {
            net,
            opt_train: Adam::default(),
            opt_test: Adam::default(),
            next_epoch: 0,
            step: 0,
            version: 0,
        }
    }
}

struct Forward {
    logits: FeatureMap<f32>,
    z: Vec<f64>,
    cache: UNetCache<f32>,
}

fn forward(net: &SegNet<f32>, img: &GrayImage) -> Result<Forward> {
    let (out, cache) = net.forward_image(img)?;
    Ok(Forward {
        logits: out.logits,
        z: out.z.iter().map(|v| *v as f64).collect(),
        cache,
    })
}

fn diverged(component: &str, epoch: usize, step: u64) -> Error {
    Error::Divergence {
        component: component.into(),
        context: format!("epoch {epoch}, step {step}"),
    }
}

fn finite_or(v: f64, component: &str, epoch: usize, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(diverged(component, epoch, step))
    }
}

fn scaled(mut g: FeatureMap<f32>, s: f64) -> FeatureMap<f32> {
    let s = s as f32;
    g.data.iter_mut().for_each(|v| *v *= s);
    g
}

fn to_f32(v: &[f64], s: f64) -> Vec<f32> {
    v.iter().map(|x| (x * s) as f32).collect()
}

/// One supervised step on `(image, label)` pairs with `ω₁L_seg + ω₃L_ncc`;
/// returns `(L_seg, L_ncc)`.
fn plain_step(
    state: &mut TrainState,
    batch: &[(&GrayImage, &VesselMap)],
    weights: &LossWeights,
    lr: f64,
    epoch: usize,
) -> Result<(f64, f64)> {
    let net = &mut state.net;
    net.zero_grad();
    let mut passes = Vec::with_capacity(batch.len());
    for (img, _) in batch {
        passes.push(forward(net, img)?);
    }
    let n = batch.len() as f64;
    let mut seg = 0.0;
    let mut seg_grads = Vec::with_capacity(batch.len());
    for (p, (_, y)) in passes.iter().zip(batch) {
        let l = seg_loss(&p.logits, y)?;
        seg += l.total() / n;
        seg_grads.push(l.grad);
    }
    finite_or(seg, "L_seg", epoch, state.step)?;
    let (ncc, z_grads) = if weights.ncc > 0.0 {
        let fb = FeatureBatch::from_vectors(
            passes.iter().map(|p| p.z.clone()).collect(),
            batch.iter().map(|(_, y)| y.subject_id).collect(),
        )?;
        let m = ncc_matrix(&fb)?;
        (ncc_loss(&m), Some(ncc_loss_grad(&m)))
    } else {
        (0.0, None)
    };
    finite_or(ncc, "L_ncc", epoch, state.step)?;
    for (i, (p, g)) in passes.iter().zip(seg_grads).enumerate() {
        let dz = z_grads.as_ref().map(|zg| to_f32(&zg[i], weights.ncc));
        net.backward(&scaled(g, weights.seg / n), dz.as_deref(), &p.cache);
    }
    state.opt_train.step(net, lr);
    state.version += 1;
    Ok((seg, ncc))
}

/// One meta-train/meta-test episode over `batch`.
pub fn run_episode<R: rand::Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[&BankEntry],
    cfg: &EpisodeConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Empty("episode batch"));
    }
    let lr_train = cfg.lr_at(cfg.lr_train, epoch);
    let lr_test = cfg.lr_at(cfg.lr_test, epoch);
    let step = state.step;

    if !cfg.episodic {
        let pairs: Vec<(&GrayImage, &VesselMap)> = batch.iter().map(|e| (&e.x[0], &e.label)).collect();
        let (seg, ncc) = plain_step(state, &pairs, &cfg.weights, lr_train, epoch)?;
        let comps = LossComponents { seg, sim: 0.0, ncc };
        let test = meta_test_loss(&comps, &cfg.weights)?;
        state.step += 1;
        return Ok(StepRecord {
            epoch,
            step,
            lr_train,
            lr_test,
            meta_train_seg: seg,
            seg,
            sim: 0.0,
            ncc,
            test,
            version_after_meta_train: state.version,
            version_at_meta_test: state.version,
        });
    }

    // meta-train on D¹; anchors are the features of this pass
    let pairs: Vec<(&GrayImage, &VesselMap)> = batch
        .iter()
        .map(|e| (e.meta_train_input(), &e.label))
        .collect();
    let mut anchors = Vec::with_capacity(batch.len());
    {
        let net = &mut state.net;
        net.zero_grad();
        let n = batch.len() as f64;
        let mut seg = 0.0;
        for (img, y) in &pairs {
            let p = forward(net, img)?;
            let l = seg_loss(&p.logits, y)?;
            seg += l.total() / n;
            net.backward(&scaled(l.grad, 1.0 / n), None, &p.cache);
            anchors.push(p.z);
        }
        finite_or(seg, "meta-train L_seg", epoch, step)?;
        state.opt_train.step(net, lr_train);
        state.version += 1;
        anchors.push(vec![seg]); // stash, popped below
    }
    let meta_train_seg = anchors.pop().expect("stashed")[0];
    let version_after_meta_train = state.version;

    // meta-test on mixup samples through the updated parameters
    let samples = draw_meta_test_batch(batch, cfg.samples_per_subject, &cfg.alpha, rng)?;
    let version_at_meta_test = state.version;
    let net = &mut state.net;
    net.zero_grad();
    let mut passes = Vec::with_capacity(samples.len());
    for s in &samples {
        passes.push(forward(net, &s.image)?);
    }
    let live_anchors = if cfg.detach_anchor {
        None
    } else {
        Some(
            batch
                .iter()
                .map(|e| forward(net, e.meta_train_input()))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let anchor_z: Vec<&Vec<f64>> = match &live_anchors {
        Some(live) => live.iter().map(|p| &p.z).collect(),
        None => anchors.iter().collect(),
    };

    let ns = samples.len() as f64;
    let m = cfg.samples_per_subject;
    let mut seg = 0.0;
    let mut seg_grads = Vec::with_capacity(samples.len());
    for (p, s) in passes.iter().zip(&samples) {
        let l = seg_loss(&p.logits, &s.label)?;
        seg += l.total() / ns;
        seg_grads.push(l.grad);
    }
    let mut sim = 0.0;
    let mut dz_samples = vec![vec![0.0; anchor_z[0].len()]; samples.len()];
    let mut dz_anchors = vec![vec![0.0; anchor_z[0].len()]; batch.len()];
    for (i, za) in anchor_z.iter().enumerate() {
        let zs: Vec<Vec<f64>> = passes[i * m..(i + 1) * m].iter().map(|p| p.z.clone()).collect();
        let l = sim_loss(za, &zs)?;
        sim += l.value;
        for (k, g) in l.grad_samples.into_iter().enumerate() {
            for (d, gv) in dz_samples[i * m + k].iter_mut().zip(g) {
                *d += cfg.weights.sim * gv;
            }
        }
        for (d, gv) in dz_anchors[i].iter_mut().zip(l.grad_anchor) {
            *d += cfg.weights.sim * gv;
        }
    }

    // NCC rows: every anchor followed by its subject's samples
    let mut vectors = Vec::with_capacity(batch.len() + samples.len());
    let mut ids = Vec::with_capacity(vectors.capacity());
    let mut flags = Vec::with_capacity(vectors.capacity());
    let mut idx = Vec::with_capacity(vectors.capacity());
    for (e, za) in batch.iter().zip(&anchor_z) {
        vectors.push((*za).clone());
        ids.push(e.subject_id);
        flags.push(true);
        idx.push(0);
    }
    for (p, s) in passes.iter().zip(&samples) {
        vectors.push(p.z.clone());
        ids.push(s.subject_id);
        flags.push(false);
        idx.push(s.sample_index);
    }
    let fb = FeatureBatch::new(vectors, ids, flags, idx)?;
    let nccm = ncc_matrix(&fb)?;
    let ncc = ncc_loss(&nccm);
    let comps = LossComponents { seg, sim, ncc };
    finite_or(seg, "L_seg", epoch, step)?;
    finite_or(sim, "L_sim", epoch, step)?;
    finite_or(ncc, "L_ncc", epoch, step)?;
    let test = meta_test_loss(&comps, &cfg.weights)?;
    if cfg.weights.ncc > 0.0 {
        let g = ncc_loss_grad(&nccm);
        for (i, gi) in g.into_iter().enumerate() {
            let target = if i < batch.len() {
                &mut dz_anchors[i]
            } else {
                &mut dz_samples[i - batch.len()]
            };
            for (d, gv) in target.iter_mut().zip(gi) {
                *d += cfg.weights.ncc * gv;
            }
        }
    }

    for ((p, g), dz) in passes.iter().zip(seg_grads).zip(&dz_samples) {
        let dz = to_f32(dz, 1.0);
        net.backward(&scaled(g, cfg.weights.seg / ns), Some(&dz), &p.cache);
    }
    if let Some(live) = &live_anchors {
        for (p, dz) in live.iter().zip(&dz_anchors) {
            let zero = FeatureMap::zeros(2, p.logits.height, p.logits.width);
            net.backward(&zero, Some(&to_f32(dz, 1.0)), &p.cache);
        }
    }
    state.opt_test.step(net, lr_test);
    state.version += 1;
    state.step += 1;

    Ok(StepRecord {
        epoch,
        step,
        lr_train,
        lr_test,
        meta_train_seg,
        seg,
        sim,
        ncc,
        test,
        version_after_meta_train,
        version_at_meta_test,
    })
}

/// Runs one epoch: shuffled subject batches, then per-epoch means.
pub fn run_epoch(
    state: &mut TrainState,
    bank: &PseudoModalityBank,
    cfg: &EpisodeConfig,
    steps: &mut Vec<StepRecord>,
) -> Result<EpochRecord> {
    let epoch = state.next_epoch;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..bank.len()).collect();
    order.shuffle(&mut indexed_rng(cfg.seed, "episode-shuffle", epoch as u64));
    let mut mix_rng = indexed_rng(cfg.seed, "episode-mixup", epoch as u64);
    let first = steps.len();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&BankEntry> = chunk.iter().map(|&i| &bank.entries[i]).collect();
        let rec = run_episode(state, &batch, cfg, epoch, &mut mix_rng)?;
        log::debug!(
            "epoch {epoch} step {}: L_seg(train) {:.4} L_seg {:.4} L_sim {:.4} L_ncc {:.4} L_test {:.4}",
            rec.step,
            rec.meta_train_seg,
            rec.seg,
            rec.sim,
            rec.ncc,
            rec.test
        );
        steps.push(rec);
    }
    let these = &steps[first..];
    let k = these.len() as f64;
    let mean = |f: fn(&StepRecord) -> f64| these.iter().map(f).sum::<f64>() / k;
    state.next_epoch += 1;
    Ok(EpochRecord {
        epoch,
        lr_train: cfg.lr_at(cfg.lr_train, epoch),
        lr_test: cfg.lr_at(cfg.lr_test, epoch),
        meta_train_seg: mean(|r| r.meta_train_seg),
        seg: mean(|r| r.seg),
        sim: mean(|r| r.sim),
        ncc: mean(|r| r.ncc),
        test: mean(|r| r.test),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Continues `state` until `cfg.epochs`, calling `on_epoch` with the epoch's
/// record and step records after each epoch (checkpointing hook).
pub fn train_from(
    state: &mut TrainState,
    bank: &PseudoModalityBank,
    cfg: &EpisodeConfig,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochRecord, &[StepRecord]) -> Result<()>,
) -> Result<EpisodeReport> {
    cfg.validate()?;
    if bank.is_empty() {
        return Err(Error::Empty("bank"));
    }
    let mut report = EpisodeReport::default();
    while state.next_epoch < cfg.epochs {
        let first = report.steps.len();
        let rec = run_epoch(state, bank, cfg, &mut report.steps)?;
        log::info!(
            "epoch {:>2}: lr {:.2e}/{:.2e} L_seg(train) {:.4} L_seg {:.4} L_sim {:.3} L_ncc {:.3} L_test {:.3} ({:.1}s)",
            rec.epoch,
            rec.lr_train,
            rec.lr_test,
            rec.meta_train_seg,
            rec.seg,
            rec.sim,
            rec.ncc,
            rec.test,
            rec.wall_seconds
        );
        on_epoch(state, &rec, &report.steps[first..])?;
        report.epochs.push(rec);
    }
    Ok(report)
}

/// Trains `net` from scratch for `cfg.epochs` epochs.
pub fn train(
    net: SegNet<f32>,
    bank: &PseudoModalityBank,
    cfg: &EpisodeConfig,
) -> Result<(SegNet<f32>, EpisodeReport)> {
    let mut state = TrainState::new(net);
    let report = train_from(&mut state, bank, cfg, &mut |_, _, _| Ok(()))?;
    Ok((state.net, report))
}

/// Plain supervised training on D⁰ with `L_seg` only: the configuration with
/// episodes, `L_sim` and `L_ncc` all switched off.
pub fn train_baseline(
    net: SegNet<f32>,
    bank: &PseudoModalityBank,
    cfg: &EpisodeConfig,
) -> Result<(SegNet<f32>, EpisodeReport)> {
    train(net, bank, &baseline_config(cfg))
}

/// `cfg` with episodes and both clustering losses disabled.
pub fn baseline_config(cfg: &EpisodeConfig) -> EpisodeConfig {
    EpisodeConfig {
        episodic: false,
        weights: LossWeights {
            sim: 0.0,
            ncc: 0.0,
            ..cfg.weights
        },
        ..cfg.clone()
    }
}

/// Settings of [`fit_supervised`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 10,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_every: 3,
            seed: 0,
        }
    }
}

impl FitConfig {
    /// Measurement probe: trained to convergence rather than on the
    /// segmentation schedule, whose step decay stalls learning by epoch ~15.
    pub fn probe(seed: u64) -> Self {
        Self {
            epochs: 60,
            decay_every: 20,
            seed,
            ..Self::default()
        }
    }
}

/// Supervised `L_seg` training on arbitrary `(image, label)` pairs (probe and
/// oracle models). Returns per-epoch mean losses.
pub fn fit_supervised(
    net: &mut SegNet<f32>,
    data: &[(GrayImage, VesselMap)],
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || cfg.decay_every == 0 {
        return Err(Error::Config("fit: batch size, lr and decay period must be positive".into()));
    }
    let mut state = TrainState::new(net.clone());
    let weights = LossWeights {
        seg: 1.0,
        sim: 0.0,
        ncc: 0.0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut indexed_rng(cfg.seed, "fit-shuffle", epoch as u64));
        let lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&GrayImage, &VesselMap)> = chunk.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            let (seg, _) = plain_step(&mut state, &batch, &weights, lr, epoch)?;
            total += seg * chunk.len() as f64;
        }
        losses.push(total / data.len() as f64);
    }
    *net = state.net;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let cfg = EpisodeConfig::default();
        assert_eq!(cfg.lr_at(1e-3, 0), 1e-3);
        assert_eq!(cfg.lr_at(1e-3, 2), 1e-3);
        assert_eq!(cfg.lr_at(1e-3, 3), 5e-4);
        assert_eq!(cfg.lr_at(1e-3, 7), 2.5e-4);
        assert_eq!(cfg.lr_at(5e-3, 29), 5e-3 * 0.5f64.powi(9));
    }

    #[test]
    fn config_validation() {
        assert!(EpisodeConfig::default().validate().is_ok());
        for bad in [
            EpisodeConfig { batch_size: 0, ..Default::default() },
            EpisodeConfig { lr_test: 0.0, ..Default::default() },
            EpisodeConfig { samples_per_subject: 0, ..Default::default() },
            EpisodeConfig { lookahead: true, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn baseline_config_disables_everything_but_segmentation() {
        let b = baseline_config(&EpisodeConfig::default());
        assert!(!b.episodic);
        assert_eq!((b.weights.seg, b.weights.sim, b.weights.ncc), (100.0, 0.0, 0.0));
    }
}
