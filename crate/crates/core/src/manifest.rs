//! On-disk datasets, pseudo-modality banks and run manifests.
//!
//! A dataset directory holds `spec.toml` (the generating [`SplitSpec`]),
//! `manifest.tsv` and lossless 16-bit PNGs. A bank directory holds
//! `bank.tsv` and the D⁰–D³ images. Both TSV files start with a version line.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::phantom::{DatasetSplit, Sample, Split, SplitSpec, StyleRendering, VesselMap};
use crate::pseudomod::{BankEntry, PseudoModalityBank, MODALITIES};

const DATASET_HEADER: &str = "#pseudomodal-dataset\tv1";
const BANK_HEADER: &str = "#pseudomodal-bank\tv1";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_table(path: &Path, header: &str, columns: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Format(format!("{}: missing or unsupported version line", path.display())));
    }
    if lines.next().map(|l| l.split('\t').collect::<Vec<_>>()) != Some(columns.to_vec()) {
        return Err(Error::Format(format!("{}: unexpected column header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let row: Vec<String> = l.split('\t').map(str::to_string).collect();
            if row.len() == columns.len() {
                Ok(row)
            } else {
                Err(Error::Format(format!("{}: malformed row {l:?}", path.display())))
            }
        })
        .collect()
}

fn parse_id(s: &str) -> Result<u64> {
    s.parse().map_err(|_| Error::Format(format!("bad subject id {s:?}")))
}

fn load_label(path: &Path, subject_id: u64) -> Result<VesselMap> {
    let img = GrayImage::load_png(path)?;
    VesselMap::new(
        subject_id,
        img.height,
        img.width,
        img.data.iter().map(|v| (*v >= 0.5) as u8).collect(),
    )
}

const DATASET_COLUMNS: [&str; 5] = ["split", "subject_id", "style", "image", "label"];

/// Writes `data` under `dir` (created if missing).
pub fn save_dataset(data: &DatasetSplit, spec: &SplitSpec, dir: &Path) -> Result<()> {
    for sub in ["train", "test", "labels"] {
        create_dir(&dir.join(sub))?;
    }
    let spec_text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    let spec_path = dir.join("spec.toml");
    std::fs::write(&spec_path, spec_text).map_err(|e| Error::io(&spec_path, e))?;
    let mut tsv = format!("{DATASET_HEADER}\n{}\n", DATASET_COLUMNS.join("\t"));
    for s in data.train.iter().chain(&data.test) {
        let id = s.map.subject_id;
        let image = format!("{}/{id:04}_{}.png", s.split, s.rendering.style);
        let label = format!("labels/{id:04}.png");
        s.rendering.image.save_png(&dir.join(&image))?;
        let label_path = dir.join(&label);
        if !label_path.exists() {
            s.map.to_image().save_png(&label_path)?;
        }
        tsv.push_str(&format!("{}\t{id}\t{}\t{image}\t{label}\n", s.split, s.rendering.style));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, SplitSpec)> {
    let spec_path = dir.join("spec.toml");
    let spec_text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: SplitSpec = toml::from_str(&spec_text).map_err(|e| Error::Config(e.to_string()))?;
    let rows = read_table(&dir.join("manifest.tsv"), DATASET_HEADER, &DATASET_COLUMNS)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in rows {
        let id = parse_id(&r[1])?;
        let split = match r[0].as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::Format(format!("unknown split {other:?}"))),
        };
        let sample = Sample {
            map: load_label(&dir.join(&r[4]), id)?,
            rendering: StyleRendering {
                image: GrayImage::load_png(&dir.join(&r[3]))?,
                style: r[2].clone(),
                subject_id: id,
            },
            split,
        };
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    let data = DatasetSplit {
        train,
        test,
        sources: spec.sources.clone(),
        targets: spec.targets.clone(),
    };
    Ok((data, spec))
}

const BANK_COLUMNS: [&str; 7] = ["subject_id", "source_style", "label", "d0", "d1", "d2", "d3"];

pub fn save_bank(bank: &PseudoModalityBank, dir: &Path) -> Result<()> {
    create_dir(&dir.join("images"))?;
    let mut tsv = format!("{BANK_HEADER}\n{}\n", BANK_COLUMNS.join("\t"));
    for e in &bank.entries {
        let id = e.subject_id;
        let label = format!("images/{id:04}_label.png");
        e.label.to_image().save_png(&dir.join(&label))?;
        tsv.push_str(&format!("{id}\t{}\t{label}", e.source_style));
        for (k, img) in e.x.iter().enumerate() {
            let name = format!("images/{id:04}_d{k}.png");
            img.save_png(&dir.join(&name))?;
            tsv.push('\t');
            tsv.push_str(&name);
        }
        tsv.push('\n');
    }
    let path = dir.join("bank.tsv");
    std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))
}

pub fn load_bank(dir: &Path) -> Result<PseudoModalityBank> {
    let rows = read_table(&dir.join("bank.tsv"), BANK_HEADER, &BANK_COLUMNS)?;
    let mut entries = Vec::with_capacity(rows.len());
    for r in rows {
        let id = parse_id(&r[0])?;
        let x: Vec<GrayImage> = r[3..3 + MODALITIES]
            .iter()
            .map(|p| GrayImage::load_png(&dir.join(p)))
            .collect::<Result<_>>()?;
        let entry = BankEntry {
            subject_id: id,
            x: x.try_into().expect("four modality columns"),
            label: load_label(&dir.join(&r[2]), id)?,
            source_style: r[1].clone(),
        };
        entry.validate()?;
        entries.push(entry);
    }
    Ok(PseudoModalityBank { entries })
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Seconds since the Unix epoch; omitted in deterministic mode.
    pub started: Option<u64>,
    pub finished: Option<u64>,
    pub exit_status: Option<String>,
    /// Fully resolved configuration (TOML).
    pub config: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, deterministic: bool, config: String) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            deterministic,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: (!deterministic).then(unix_now),
            finished: None,
            exit_status: None,
            config,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let path = dir.join("manifest.toml");
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn finish(&mut self, status: &str) {
        self.finished = (!self.deterministic).then(unix_now);
        self.exit_status = Some(status.into());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::build_split;

    #[test]
    fn dataset_roundtrip() {
        let spec = SplitSpec {
            n_train: 2,
            n_test: 1,
            height: 32,
            width: 32,
            ..SplitSpec::default()
        };
        let data = build_split(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, &spec, dir.path()).unwrap();
        let (back, spec_back) = load_dataset(dir.path()).unwrap();
        assert_eq!(spec_back, spec);
        assert_eq!(back.train.len(), 2);
        assert_eq!(back.test.len(), spec.targets.len());
        for (a, b) in data.train.iter().chain(&data.test).zip(back.train.iter().chain(&back.test)) {
            assert_eq!(a.map, b.map);
            assert_eq!(a.rendering.style, b.rendering.style);
            assert!(a.rendering.image.mean_abs_diff(&b.rendering.image) < 1e-5);
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bank.tsv"), "#pseudomodal-bank\tv9\n").unwrap();
        assert!(matches!(load_bank(dir.path()), Err(Error::Format(_))));
    }
}
