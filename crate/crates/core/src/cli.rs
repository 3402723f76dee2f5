//! Command-line front end. The `pseudomodal` binary is a thin wrapper around [`main_with_args`].
//!
//! Every command reads and writes below `--out`:
//!
//! | command        | reads                      | writes            |
//! |----------------|----------------------------|-------------------|
//! | `gen-data`     |                            | `data/`           |
//! | `train-pseudo` | `data/`                    | `bank/`           |
//! | `meta-train`   | `bank/`                    | `meta-train/`     |
//! | `eval`         | `data/`, a checkpoint      | `eval/`           |
//! | `ablation`     | `data/`, `bank/`           | `ablation/`       |
//! | `dump-mixup`   | `bank/`                    | `mixup/`          |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::checkpoint::{
    load_segnet, restore_train_state, segnet_checkpoint, synthesis_checkpoint, train_state_checkpoint, Checkpoint,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{evaluate, init_segnet, predict_probability, network_input, summarize, train_oracle, run_ablation, write_metrics_csv};
use crate::manifest::{load_bank, load_dataset, save_bank, save_dataset, RunManifest};
use crate::meta_trainer::{train_from, EpochRecord, StepRecord, TrainState};
use crate::mixup::{mix, sample_lambda};
use crate::phantom::build_split;
use crate::pseudomod::synthesize_bank;
use crate::rng::indexed_rng;

/// Environment variable controlling log verbosity (`error` … `trace`).
pub const LOG_ENV: &str = "PSEUDOMODAL_LOG";

/// Process exit status for a divergence abort (non-finite loss).
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pseudomodal", version, about = "Vessel segmentation across unseen image styles")]
pub struct Cli {
    /// TOML configuration file; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every component seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root shared by all commands.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Keep logs free of wall-clock values so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantom subjects rendered in source and target styles.
    GenData,
    /// Train the three synthesis networks and build the pseudo-modality bank.
    TrainPseudo,
    /// Episodic meta-training of the segmentation network.
    MetaTrain {
        /// Continue from the latest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Dice of a trained network on the held-out styles.
    Eval {
        /// Defaults to `<out>/meta-train/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the six component combinations.
    Ablation,
    /// Mixup λ records and sample images for each configured α.
    DumpMixup,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainPseudo => "train-pseudo",
            Command::MetaTrain { .. } => "meta-train",
            Command::Eval { .. } => "eval",
            Command::Ablation => "ablation",
            Command::DumpMixup => "dump-mixup",
        }
    }
}

/// Parses `args` (including the program name), runs the command and maps
/// errors to exit codes: 0 ok, 1 failure, 2 usage, [`EXIT_DIVERGED`] divergence.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}: {e}", cli.command.name());
            ExitCode::from(if e.is_divergence() { EXIT_DIVERGED } else { 1 })
        }
    }
}

/// Resolved configuration: file (or defaults), then `--seed`.
pub fn load_config(cli: &Cli) -> Result<Config> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
        deterministic: cli.deterministic,
    };
    let name = cli.command.name();
    let dir = ctx.out.join(name);
    let mut manifest = RunManifest::new(name, ctx.cfg.seed, ctx.deterministic, ctx.cfg.to_toml()?);
    manifest.save(&dir)?;
    let result = match &cli.command {
        Command::GenData => ctx.gen_data(&mut manifest),
        Command::TrainPseudo => ctx.train_pseudo(&mut manifest),
        Command::MetaTrain { resume } => ctx.meta_train(*resume, &mut manifest),
        Command::Eval { checkpoint } => ctx.eval(checkpoint.as_deref(), &mut manifest),
        Command::Ablation => ctx.ablation(&mut manifest),
        Command::DumpMixup => ctx.dump_mixup(&mut manifest),
    };
    manifest.finish(match &result {
        Ok(()) => "ok",
        Err(e) if e.is_divergence() => "diverged",
        Err(_) => "failed",
    });
    manifest.save(&dir)?;
    result
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    deterministic: bool,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn epoch_csv_header(deterministic: bool) -> String {
    let mut h = "epoch,lr_train,lr_test,meta_train_seg,seg,sim,ncc,test".to_string();
    if !deterministic {
        h.push_str(",wall_seconds");
    }
    h.push('\n');
    h
}

fn epoch_csv_line(r: &EpochRecord, deterministic: bool) -> String {
    let mut l = format!(
        "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
        r.epoch, r.lr_train, r.lr_test, r.meta_train_seg, r.seg, r.sim, r.ncc, r.test
    );
    if !deterministic {
        l.push_str(&format!(",{:.3}", r.wall_seconds));
    }
    l.push('\n');
    l
}

pub(crate) fn step_csv(steps: &[StepRecord]) -> String {
    let mut s = "epoch,step,lr_train,lr_test,meta_train_seg,seg,sim,ncc,test,version_after_meta_train,version_at_meta_test\n"
        .to_string();
    for r in steps {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}\n",
            r.epoch,
            r.step,
            r.lr_train,
            r.lr_test,
            r.meta_train_seg,
            r.seg,
            r.sim,
            r.ncc,
            r.test,
            r.version_after_meta_train,
            r.version_at_meta_test
        ));
    }
    s
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
    fn bank_dir(&self) -> PathBuf {
        self.out.join("bank")
    }

    fn gen_data(&self, m: &mut RunManifest) -> Result<()> {
        let dir = self.data_dir();
        let data = build_split(&self.cfg.data, self.cfg.data_seed)?;
        save_dataset(&data, &self.cfg.data, &dir)?;
        log::info!("gen-data: {} train and {} test items in {}", data.train.len(), data.test.len(), dir.display());
        m.outputs.push(dir);
        Ok(())
    }

    fn train_pseudo(&self, m: &mut RunManifest) -> Result<()> {
        let (data, _) = load_dataset(&self.data_dir())?;
        m.inputs.push(self.data_dir());
        let (bank, nets, reports) = synthesize_bank(&data.train, &self.cfg.synthesis)?;
        let dir = self.bank_dir();
        save_bank(&bank, &dir)?;
        let config = self.cfg.to_toml()?;
        let mut log = String::from("net,seed,epoch,loss\n");
        for (k, ((net, report), seed)) in nets.iter().zip(&reports).zip(self.cfg.synthesis.seeds).enumerate() {
            synthesis_checkpoint(net, &config, seed).save(&dir.join(format!("synth_{k}.ckpt")))?;
            log.push_str(&format!("{k},{seed},init,{:e}\n", report.initial_loss));
            for (e, l) in report.epoch_losses.iter().enumerate() {
                log.push_str(&format!("{k},{seed},{e},{l:e}\n"));
            }
        }
        write(&dir.join("synthesis_log.csv"), &log)?;
        log::info!("train-pseudo: bank of {} subjects in {}", bank.len(), dir.display());
        m.outputs.push(dir);
        Ok(())
    }

    fn meta_train(&self, resume: bool, m: &mut RunManifest) -> Result<()> {
        let bank = load_bank(&self.bank_dir())?;
        m.inputs.push(self.bank_dir());
        let dir = self.out.join("meta-train");
        let ck_dir = dir.join("checkpoints");
        mkdir(&ck_dir)?;
        let config = self.cfg.to_toml()?;
        let cfg = &self.cfg.train;
        let fresh = init_segnet(cfg.seed);
        let latest = dir.join("latest.ckpt");
        let mut state = if resume && latest.exists() {
            let ck = Checkpoint::load(&latest)?;
            log::info!("resuming at epoch {}", ck.counter("next_epoch")?);
            restore_train_state(&ck, fresh)?
        } else {
            write(&dir.join("epochs.csv"), &epoch_csv_header(self.deterministic))?;
            write(&dir.join("steps.csv"), &step_csv(&[]))?;
            TrainState::new(fresh)
        };
        let epochs_path = dir.join("epochs.csv");
        let steps_path = dir.join("steps.csv");
        let deterministic = self.deterministic;
        let mut on_epoch = |st: &TrainState, rec: &EpochRecord, steps: &[StepRecord]| -> Result<()> {
            let ck = train_state_checkpoint(st, &config);
            ck.save(&ck_dir.join(format!("epoch_{:03}.ckpt", rec.epoch)))?;
            ck.save(&latest)?;
            append(&epochs_path, &epoch_csv_line(rec, deterministic))?;
            let rows = step_csv(steps);
            append(&steps_path, rows.split_once('\n').map_or("", |x| x.1))
        };
        train_from(&mut state, &bank, cfg, &mut on_epoch)?;
        segnet_checkpoint(&state.net, &config).save(&dir.join("model.ckpt"))?;
        m.outputs.push(dir);
        Ok(())
    }

    fn eval(&self, checkpoint: Option<&Path>, m: &mut RunManifest) -> Result<()> {
        let (data, spec) = load_dataset(&self.data_dir())?;
        let ck_path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.out.join("meta-train").join("model.ckpt"));
        let net = load_segnet(&Checkpoint::load(&ck_path)?, init_segnet(0))?;
        m.inputs.extend([self.data_dir(), ck_path]);
        let dir = self.out.join("eval");
        mkdir(&dir)?;
        let ev = &self.cfg.eval;
        let records = evaluate(&net, &data, ev.threshold)?;
        write_metrics_csv(&dir.join("metrics.csv"), &records)?;
        let (per, overall) = summarize(&records);
        let mut text = String::from("domain\tshift\tdice\n");
        for (d, s, v) in &per {
            text.push_str(&format!("{d}\t{}\t{v:.4}\n", s.map(|s| s.to_string()).unwrap_or_default()));
        }
        text.push_str(&format!("all\t\t{overall:.4}\n"));
        if ev.oracle {
            text.push_str("\noracle\n");
            let mut oracle_records = Vec::new();
            for fam in &data.targets {
                let oracle = train_oracle(&data, fam, &spec.render, &ev.oracle_fit)?;
                let test: Vec<_> = data.test.iter().filter(|s| s.rendering.style == fam.name).cloned().collect();
                let recs = crate::eval::evaluate_samples(&oracle, &test, &data.targets, ev.threshold)?;
                let (_, mean) = summarize(&recs);
                text.push_str(&format!("{}\t{mean:.4}\n", fam.name));
                oracle_records.extend(recs);
            }
            write_metrics_csv(&dir.join("oracle_metrics.csv"), &oracle_records)?;
        }
        if ev.dump_predictions {
            let pred_dir = dir.join("predictions");
            mkdir(&pred_dir)?;
            for s in &data.test {
                let fam = data
                    .family(&s.rendering.style)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown family {}", s.rendering.style)))?;
                let prob = predict_probability(&net, &network_input(&s.rendering.image, fam)?)?;
                let img = crate::image::GrayImage::new(s.map.height, s.map.width, prob.iter().map(|p| *p as f32).collect());
                img.save_png(&pred_dir.join(format!("{:04}_{}.png", s.map.subject_id, fam.name)))?;
            }
        }
        write(&dir.join("summary.tsv"), &text)?;
        log::info!("eval: mean Dice {overall:.4} over {} records", records.len());
        m.outputs.push(dir);
        Ok(())
    }

    fn ablation(&self, m: &mut RunManifest) -> Result<()> {
        let (data, _) = load_dataset(&self.data_dir())?;
        let bank = load_bank(&self.bank_dir())?;
        m.inputs.extend([self.data_dir(), self.bank_dir()]);
        let dir = self.out.join("ablation");
        mkdir(&dir)?;
        let table = run_ablation(&bank, &data, &self.cfg.train, &self.cfg.ablation.seeds)?;
        write(&dir.join("table.txt"), &table.render())?;
        table.write_csv(&dir.join("ablation.csv"))?;
        println!("{}", table.render());
        m.outputs.push(dir);
        Ok(())
    }

    fn dump_mixup(&self, m: &mut RunManifest) -> Result<()> {
        let bank = load_bank(&self.bank_dir())?;
        m.inputs.push(self.bank_dir());
        let dc = &self.cfg.dump_mixup;
        let entry = bank
            .entries
            .get(dc.subject_index)
            .ok_or_else(|| Error::InvalidInput(format!("bank has no entry {}", dc.subject_index)))?;
        let dir = self.out.join("mixup");
        for (k, alpha) in dc.alphas.iter().enumerate() {
            let sub = dir.join(format!("alpha_{k}"));
            mkdir(&sub)?;
            let a = alpha.alpha();
            let mut rng = indexed_rng(dc.seed, "dump-mixup", k as u64);
            let mut csv = format!("# alpha = [{}, {}, {}]\nindex,lambda1,lambda2,lambda3\n", a[0], a[1], a[2]);
            for i in 0..dc.samples {
                let lambda = sample_lambda(alpha, &mut rng);
                let l = lambda.values();
                csv.push_str(&format!("{i},{:e},{:e},{:e}\n", l[0], l[1], l[2]));
                if i < dc.grid {
                    mix(entry, &lambda)?.image.save_png(&sub.join(format!("sample_{i:03}.png")))?;
                }
            }
            write(&sub.join("lambda.csv"), &csv)?;
        }
        m.outputs.push(dir);
        Ok(())
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
