//! Segmentation metrics, held-out evaluation and the ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::losses::{vessel_probability, LossWeights};
use crate::meta_trainer::{fit_supervised, train, EpisodeConfig, EpisodeReport, FitConfig};
use crate::phantom::{render_with, DatasetSplit, Modality, RenderOptions, Sample, ShiftType, StyleFamily, VesselMap};
use crate::preprocess::{preprocess_d0, RawImage};
use crate::pseudomod::{PseudoModalityBank, MODALITIES};
use crate::rng::{component_rng, sub_seed};
use crate::segnet::SegNet;

/// Default binarization threshold on the vessel probability.
pub const THRESHOLD: f64 = 0.5;

/// `2|P∩Y| / (|P| + |Y|)`; 1 when both masks are empty.
pub fn dice(pred: &VesselMap, y: &VesselMap) -> Result<f64> {
    if pred.height != y.height || pred.width != y.width {
        return Err(Error::ShapeMismatch(format!(
            "dice: {}x{} vs {}x{}",
            pred.height, pred.width, y.height, y.width
        )));
    }
    let (mut inter, mut np, mut ny) = (0usize, 0usize, 0usize);
    for (p, t) in pred.pixels.iter().zip(&y.pixels) {
        if *p > 1 || *t > 1 {
            return Err(Error::InvalidInput("dice: masks must be binary".into()));
        }
        inter += (*p & *t) as usize;
        np += *p as usize;
        ny += *t as usize;
    }
    if np + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ny) as f64)
}

/// `prob > threshold`, as a mask for `subject_id`.
pub fn binarize(subject_id: u64, height: usize, width: usize, prob: &[f64], threshold: f64) -> VesselMap {
    VesselMap {
        subject_id,
        height,
        width,
        pixels: prob.iter().map(|p| (*p > threshold) as u8).collect(),
    }
}

/// Network input for a rendering of `family`: fundus-like styles go through
/// the D⁰ preprocessing, angiography-like styles are fed raw.
pub fn network_input(image: &GrayImage, family: &StyleFamily) -> Result<GrayImage> {
    match family.modality {
        Modality::Fundus => preprocess_d0(&RawImage::Gray(image.clone())),
        Modality::Angiography => Ok(image.clone()),
    }
}

/// Vessel probability map of `net` on `input`.
pub fn predict_probability(net: &SegNet<f32>, input: &GrayImage) -> Result<Vec<f64>> {
    Ok(vessel_probability(&net.predict(input)?.logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub subject_id: u64,
    pub domain: String,
    pub shift: Option<ShiftType>,
    pub dice: f64,
    pub threshold: f64,
}

/// Dice of `net` on every sample; ordered by `(subject_id, domain)`.
pub fn evaluate_samples(
    net: &SegNet<f32>,
    samples: &[Sample],
    families: &[StyleFamily],
    threshold: f64,
) -> Result<Vec<MetricRecord>> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let fam = families
            .iter()
            .find(|f| f.name == s.rendering.style)
            .ok_or_else(|| Error::InvalidInput(format!("unknown style family {}", s.rendering.style)))?;
        let prob = predict_probability(net, &network_input(&s.rendering.image, fam)?)?;
        let pred = binarize(s.map.subject_id, s.map.height, s.map.width, &prob, threshold);
        out.push(MetricRecord {
            subject_id: s.map.subject_id,
            domain: fam.name.clone(),
            shift: fam.shift,
            dice: dice(&pred, &s.map)?,
            threshold,
        });
    }
    out.sort_by(|a, b| (a.subject_id, &a.domain).cmp(&(b.subject_id, &b.domain)));
    Ok(out)
}

/// One record per (test subject, target family).
pub fn evaluate(net: &SegNet<f32>, data: &DatasetSplit, threshold: f64) -> Result<Vec<MetricRecord>> {
    evaluate_samples(net, &data.test, &data.targets, threshold)
}

/// Mean Dice per domain (sorted by name) and the uniform mean over records.
pub fn summarize(records: &[MetricRecord]) -> (Vec<(String, Option<ShiftType>, f64)>, f64) {
    let mut by: BTreeMap<&str, (Option<ShiftType>, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = by.entry(&r.domain).or_insert((r.shift, 0.0, 0));
        e.1 += r.dice;
        e.2 += 1;
    }
    let per = by
        .into_iter()
        .map(|(d, (s, sum, n))| (d.to_string(), s, sum / n as f64))
        .collect();
    let overall = records.iter().map(|r| r.dice).sum::<f64>() / records.len().max(1) as f64;
    (per, overall)
}

pub fn write_metrics_csv(path: &std::path::Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["subject_id", "domain", "shift", "dice", "threshold"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in records {
        w.write_record([
            r.subject_id.to_string(),
            r.domain.clone(),
            r.shift.map(|s| s.to_string()).unwrap_or_default(),
            format!("{:.6}", r.dice),
            format!("{}", r.threshold),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fresh segmentation network for a training seed.
pub fn init_segnet(seed: u64) -> SegNet<f32> {
    SegNet::new(&mut component_rng(seed, "segnet-init"))
}

/// Upper-bound model: trained on the training subjects re-rendered in the
/// target `family`.
pub fn train_oracle(
    data: &DatasetSplit,
    family: &StyleFamily,
    opts: &RenderOptions,
    fit: &FitConfig,
) -> Result<SegNet<f32>> {
    let mut pairs = Vec::with_capacity(data.train.len());
    for s in &data.train {
        let seed = sub_seed(fit.seed, &format!("oracle/{}/{}", family.name, s.map.subject_id));
        let r = render_with(&s.map, family, seed, opts)?;
        pairs.push((network_input(&r.image, family)?, s.map.clone()));
    }
    let mut net = init_segnet(fit.seed);
    fit_supervised(&mut net, &pairs, fit)?;
    Ok(net)
}

/// Mean Dice of a segmenter fitted on D⁰ alone, evaluated on each of
/// D⁰…D³ of the same bank. High scores on D¹–D³ mean the synthesized
/// styles kept the anatomy.
pub fn anatomy_probe(bank: &PseudoModalityBank, fit: &FitConfig) -> Result<[f64; MODALITIES]> {
    if bank.is_empty() {
        return Err(Error::Empty("bank"));
    }
    let pairs: Vec<_> = bank.entries.iter().map(|e| (e.x[0].clone(), e.label.clone())).collect();
    let mut probe = init_segnet(fit.seed);
    fit_supervised(&mut probe, &pairs, fit)?;
    let mut out = [0.0; MODALITIES];
    for (k, slot) in out.iter_mut().enumerate() {
        for e in &bank.entries {
            let prob = predict_probability(&probe, &e.x[k])?;
            let pred = binarize(e.subject_id, e.label.height, e.label.width, &prob, THRESHOLD);
            *slot += dice(&pred, &e.label)?;
        }
        *slot /= bank.len() as f64;
    }
    Ok(out)
}

/// Component switches of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub episodic: bool,
    pub sim: bool,
    pub ncc: bool,
}

impl AblationCell {
    /// The six valid rows, bare baseline first and full model last.
    pub const ROWS: [AblationCell; 6] = [
        AblationCell::new(false, false, false),
        AblationCell::new(false, false, true),
        AblationCell::new(true, false, false),
        AblationCell::new(true, true, false),
        AblationCell::new(true, false, true),
        AblationCell::new(true, true, true),
    ];

    pub const fn new(episodic: bool, sim: bool, ncc: bool) -> Self {
        Self { episodic, sim, ncc }
    }

    pub fn is_full(&self) -> bool {
        self.episodic && self.sim && self.ncc
    }

    pub fn is_baseline(&self) -> bool {
        !self.episodic && !self.sim && !self.ncc
    }

    /// `L_sim` needs the meta-train anchors.
    pub fn validate(&self) -> Result<()> {
        if self.sim && !self.episodic {
            return Err(Error::InvalidFlags("L_sim is only defined with episodic training".into()));
        }
        Ok(())
    }

    /// `base` with this row's switches; disabled losses get weight 0.
    pub fn apply(&self, base: &EpisodeConfig) -> Result<EpisodeConfig> {
        self.validate()?;
        Ok(EpisodeConfig {
            episodic: self.episodic,
            weights: LossWeights {
                seg: base.weights.seg,
                sim: if self.sim { base.weights.sim } else { 0.0 },
                ncc: if self.ncc { base.weights.ncc } else { 0.0 },
            },
            ..base.clone()
        })
    }

    pub fn label(&self) -> String {
        let m = |b: bool| if b { "✓" } else { "-" };
        format!("{}/{}/{}", m(self.episodic), m(self.sim), m(self.ncc))
    }
}

/// Results of one cell for one training seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub mean: f64,
    pub report: EpisodeReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seeds: Vec<SeedResult>,
    /// Mean Dice per shift type over all seeds.
    pub per_shift: BTreeMap<ShiftType, f64>,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates one cell over `seeds`.
pub fn run_cell(
    cell: AblationCell,
    bank: &PseudoModalityBank,
    data: &DatasetSplit,
    base: &EpisodeConfig,
    seeds: &[u64],
) -> Result<AblationRow> {
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = EpisodeConfig {
            seed,
            ..cell.apply(base)?
        };
        let (net, report) = train(init_segnet(seed), bank, &cfg)?;
        let records = evaluate(&net, data, THRESHOLD)?;
        let (_, mean) = summarize(&records);
        log::info!("ablation {} seed {seed}: mean Dice {mean:.4}", cell.label());
        results.push(SeedResult {
            seed,
            records,
            mean,
            report,
        });
    }
    let all: Vec<&MetricRecord> = results.iter().flat_map(|r| &r.records).collect();
    let mut shift_sums: BTreeMap<ShiftType, (f64, usize)> = BTreeMap::new();
    for r in &all {
        if let Some(s) = r.shift {
            let e = shift_sums.entry(s).or_default();
            e.0 += r.dice;
            e.1 += 1;
        }
    }
    let overall = all.iter().map(|r| r.dice).sum::<f64>() / all.len().max(1) as f64;
    Ok(AblationRow {
        cell,
        seeds: results,
        per_shift: shift_sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        overall,
    })
}

/// The six-row ablation grid, every row trained from the same seeds.
pub fn run_ablation(
    bank: &PseudoModalityBank,
    data: &DatasetSplit,
    base: &EpisodeConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Empty("ablation seeds"));
    }
    let rows = AblationCell::ROWS
        .iter()
        .map(|c| run_cell(*c, bank, data, base, seeds))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

impl AblationTable {
    pub fn full(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell.is_full())
    }

    pub fn baseline(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell.is_baseline())
    }

    /// Plain-text table: switches, Dice (%) per shift type, average.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<9} {:<6} {:<6} | {:>7} {:>7} {:>7} | {:>7}",
            "Episodic", "L_sim", "L_ncc", "Type I", "Type II", "Type III", "Avg."
        );
        let _ = writeln!(s, "{}", "-".repeat(66));
        for r in &self.rows {
            let m = |b: bool| if b { "✓" } else { "" };
            let pct = |t: ShiftType| {
                r.per_shift
                    .get(&t)
                    .map(|v| format!("{:.2}", 100.0 * v))
                    .unwrap_or_else(|| "n/a".into())
            };
            let _ = writeln!(
                s,
                "{:<9} {:<6} {:<6} | {:>7} {:>7} {:>7} | {:>7.2}",
                m(r.cell.episodic),
                m(r.cell.sim),
                m(r.cell.ncc),
                pct(ShiftType::I),
                pct(ShiftType::II),
                pct(ShiftType::III),
                100.0 * r.overall
            );
        }
        s
    }

    /// One CSV line per (row, seed) plus a pooled line with seed `all`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(fmt)?;
        w.write_record(["episodic", "sim", "ncc", "seed", "type_i", "type_ii", "type_iii", "mean"])
            .map_err(fmt)?;
        for r in &self.rows {
            let flags = [r.cell.episodic, r.cell.sim, r.cell.ncc].map(|b| (b as u8).to_string());
            for sr in &r.seeds {
                let shifts = shift_means(&sr.records);
                let mut rec = flags.to_vec();
                rec.push(sr.seed.to_string());
                for t in [ShiftType::I, ShiftType::II, ShiftType::III] {
                    rec.push(shifts.get(&t).map(|v| format!("{v:.6}")).unwrap_or_default());
                }
                rec.push(format!("{:.6}", sr.mean));
                w.write_record(&rec).map_err(fmt)?;
            }
            let mut rec = flags.to_vec();
            rec.push("all".into());
            for t in [ShiftType::I, ShiftType::II, ShiftType::III] {
                rec.push(r.per_shift.get(&t).map(|v| format!("{v:.6}")).unwrap_or_default());
            }
            rec.push(format!("{:.6}", r.overall));
            w.write_record(&rec).map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn shift_means(records: &[MetricRecord]) -> BTreeMap<ShiftType, f64> {
    let mut sums: BTreeMap<ShiftType, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(s) = r.shift {
            let e = sums.entry(s).or_default();
            e.0 += r.dice;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8], w: usize) -> VesselMap {
        VesselMap {
            subject_id: 0,
            height: bits.len() / w,
            width: w,
            pixels: bits.to_vec(),
        }
    }

    #[test]
    fn dice_edge_cases() {
        let a = mask(&[1, 1, 0, 0], 2);
        let b = mask(&[0, 0, 1, 1], 2);
        let empty = mask(&[0; 4], 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
        assert!(dice(&a, &mask(&[0; 6], 3)).is_err());
    }

    #[test]
    fn half_overlap_of_hundred_pixel_masks() {
        let mut p = vec![0u8; 400];
        let mut y = vec![0u8; 400];
        p[..100].fill(1);
        y[50..150].fill(1);
        assert_eq!(dice(&mask(&p, 20), &mask(&y, 20)).unwrap(), 0.5);
    }

    #[test]
    fn ablation_rows_and_flag_validation() {
        assert_eq!(AblationCell::ROWS.len(), 6);
        assert!(AblationCell::ROWS.iter().all(|c| c.validate().is_ok()));
        assert!(matches!(
            AblationCell::new(false, true, false).validate(),
            Err(Error::InvalidFlags(_))
        ));
        let cfg = AblationCell::new(true, false, true).apply(&EpisodeConfig::default()).unwrap();
        assert!(cfg.episodic);
        assert_eq!((cfg.weights.sim, cfg.weights.ncc), (0.0, 1.0));
    }
}
