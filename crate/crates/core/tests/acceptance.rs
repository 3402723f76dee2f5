//! The eight acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line with its measurements before asserting.
//!
//! Tests are serialized through a lock so each runtime budget is measured
//! without competing for the CPU.

mod common;

use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use pseudomodal::config::Config;
use pseudomodal::eval::{anatomy_probe, run_ablation, AblationRow};
use pseudomodal::losses::{ncc_loss, ncc_loss_grad, ncc_matrix, seg_loss, sim_loss, FeatureBatch, LossWeights};
use pseudomodal::meta_trainer::{train, EpisodeConfig, FitConfig};
use pseudomodal::mixup::{dirichlet_pdf, mix, sample_lambda, DirichletParams, MixupCoefficients};
use pseudomodal::nn::FeatureMap;
use pseudomodal::phantom::{build_split, DatasetSplit, VesselMap};
use pseudomodal::pseudomod::{synthesize_bank, PseudoModalityBank};
use pseudomodal::rng::{component_rng, indexed_rng, SeedRng};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u8, pass: bool, detail: &str) {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

/// Default benchmark: data and bank from the default configuration.
fn default_benchmark() -> &'static (Config, DatasetSplit, PseudoModalityBank, f64) {
    static CELL: OnceLock<(Config, DatasetSplit, PseudoModalityBank, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = Config::default();
        let t = Instant::now();
        let data = build_split(&cfg.data, cfg.data_seed).unwrap();
        let (bank, _, _) = synthesize_bank(&data.train, &cfg.synthesis).unwrap();
        (cfg, data, bank, t.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_1_dirichlet_sampler() {
    let _g = serial();
    let t = Instant::now();
    let alpha = DirichletParams::uniform();
    let mut rng = component_rng(101, "acceptance-dirichlet");
    let n = 100_000;
    let mut sums = [0.0; 3];
    let mut first = Vec::with_capacity(n);
    for _ in 0..n {
        let l = sample_lambda(&alpha, &mut rng).values();
        for k in 0..3 {
            sums[k] += l[k];
        }
        first.push(l[0]);
    }
    let means = sums.map(|s| s / n as f64);
    let means_ok = means.iter().all(|m| (m - 1.0 / 3.0).abs() <= 0.005);

    // Beta(1, 2) marginal: F(x) = 1 − (1 − x)²
    first.sort_by(|a, b| a.total_cmp(b));
    let mut d = 0.0f64;
    for (i, x) in first.iter().enumerate() {
        let f = 1.0 - (1.0 - x) * (1.0 - x);
        d = d.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
    }
    // asymptotic Kolmogorov quantile at significance 0.01
    let critical = 1.627_61 / (n as f64).sqrt();
    let ks_ok = d < critical;

    let mut density_ok = true;
    let mut worst = 0.0f64;
    let mut prng = component_rng(102, "acceptance-interior");
    for _ in 0..1000 {
        let (a, b): (f64, f64) = (prng.random_range(0.01..0.98), prng.random_range(0.01..0.98));
        if a + b >= 0.99 {
            continue;
        }
        let p = dirichlet_pdf(&[a, b, 1.0 - a - b], &alpha).unwrap();
        worst = worst.max((p - 2.0).abs());
        density_ok &= (p - 2.0).abs() <= 1e-9;
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = means_ok && ks_ok && density_ok && secs < 5.0;
    report(
        1,
        pass,
        &format!(
            "means {means:.4?}, KS D={d:.5} (crit {critical:.5}), max |pdf−2| {worst:.1e}, {secs:.2}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_mixup_exactness() {
    let _g = serial();
    let bank = common::toy_bank(8, 32, 21);
    let mut vertex_ok = true;
    for e in &bank.entries {
        for (k, x) in e.mixup_sources().into_iter().enumerate() {
            let s = mix(e, &MixupCoefficients::vertex(k)).unwrap();
            let clipped: Vec<f32> = x.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            vertex_ok &= s.image.data.iter().zip(&clipped).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    let mut rng = component_rng(22, "acceptance-mixup");
    let alpha = DirichletParams::uniform();
    let (mut convex_ok, mut label_ok) = (true, true);
    for _ in 0..1000 {
        let e = &bank.entries[rng.random_range(0..bank.len())];
        let lambda = sample_lambda(&alpha, &mut rng);
        let s = mix(e, &lambda).unwrap();
        let [a, b, c] = e.mixup_sources();
        for i in 0..s.image.data.len() {
            let v = [a.data[i], b.data[i], c.data[i]];
            let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            convex_ok &= lo <= s.image.data[i] && s.image.data[i] <= hi;
        }
        label_ok &= s.label == e.label && s.subject_id == e.subject_id;
    }
    let pass = vertex_ok && convex_ok && label_ok;
    report(
        2,
        pass,
        &format!("vertices bit-exact {vertex_ok}, convex on 1000 draws {convex_ok}, labels kept {label_ok}"),
    );
    assert!(pass);
}

fn normal(rng: &mut SeedRng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn criterion_3_ncc_algebra() {
    let _g = serial();
    let (mut sym, mut diag, mut bounded, mut zero_iff, mut scale) = (true, true, true, true, true);
    for seed in 0..50 {
        let mut rng = indexed_rng(31, "acceptance-ncc", seed);
        let n = rng.random_range(2..=10);
        let d = rng.random_range(2..=16);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        let ids: Vec<u64> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let m = ncc_matrix(&FeatureBatch::from_vectors(vs.clone(), ids.clone()).unwrap()).unwrap();
        for p in 0..n {
            diag &= (m.at(p, p) - 1.0).abs() <= 1e-6;
            for q in 0..n {
                sym &= (m.at(p, q) - m.at(q, p)).abs() <= 1e-6;
                bounded &= (-1.0..=1.0).contains(&m.at(p, q));
            }
        }
        let loss = ncc_loss(&m);
        // random batches are never perfectly clustered
        zero_iff &= loss > 0.0;
        // perfectly clustered: one direction per subject, orthogonal across subjects
        let clustered: Vec<Vec<f64>> = ids
            .iter()
            .map(|&s| {
                let mut v = vec![0.0; 4];
                v[s as usize] = rng.random_range(0.5..2.0);
                v
            })
            .collect();
        let mc = ncc_matrix(&FeatureBatch::from_vectors(clustered, ids.clone()).unwrap()).unwrap();
        zero_iff &= ncc_loss(&mc) == 0.0 && mc.c == mc.target;
        let c = rng.random_range(1e-3..1e3);
        let scaled: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
        let ms = ncc_matrix(&FeatureBatch::from_vectors(scaled, ids).unwrap()).unwrap();
        scale &= (ncc_loss(&ms) - loss).abs() <= 1e-9 * loss.max(1.0);
    }
    // same subject, orthogonal: two unit off-diagonal residuals
    let two = ncc_loss(
        &ncc_matrix(&FeatureBatch::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 0]).unwrap()).unwrap(),
    );
    let pass = sym && diag && bounded && zero_iff && scale && two == 2.0;
    report(
        3,
        pass,
        &format!(
            "symmetric {sym}, unit diagonal {diag}, bounded {bounded}, zero iff C=C* {zero_iff}, scale-invariant {scale}, 2x2 case = {two}"
        ),
    );
    assert!(pass);
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn agrees(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-7
}

#[test]
fn criterion_4_gradient_checks() {
    let _g = serial();
    let t = Instant::now();
    let (mut seg_ok, mut sim_ok, mut ncc_ok) = (true, true, true);
    for seed in 0..50 {
        let mut rng = indexed_rng(41, "acceptance-grad", seed);
        let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let mut px: Vec<u8> = (0..h * w).map(|_| rng.random_bool(0.4) as u8).collect();
        px[0] = 1;
        let y = VesselMap::new(0, h, w, px).unwrap();
        let logits = FeatureMap::<f64>::from_vec(2, h, w, (0..2 * h * w).map(|_| 2.0 * normal(&mut rng)).collect());
        let g = seg_loss(&logits, &y).unwrap().grad;
        for i in 0..logits.data.len() {
            let mut f = |v: f64| {
                let mut l = logits.clone();
                l.data[i] = v;
                seg_loss(&l, &y).unwrap().total()
            };
            seg_ok &= agrees(g.data[i], central(&mut f, logits.data[i]));
        }

        let d = rng.random_range(2..=8);
        let m = rng.random_range(1..=4);
        let anchor: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let samples: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        let s = sim_loss(&anchor, &samples).unwrap();
        for k in 0..m {
            for j in 0..d {
                let mut f = |v: f64| {
                    let mut ss = samples.clone();
                    ss[k][j] = v;
                    sim_loss(&anchor, &ss).unwrap().value
                };
                sim_ok &= agrees(s.grad_samples[k][j], central(&mut f, samples[k][j]));
            }
        }

        let n = rng.random_range(2..=8);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        let ids: Vec<u64> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let grad = ncc_loss_grad(&ncc_matrix(&FeatureBatch::from_vectors(vs.clone(), ids.clone()).unwrap()).unwrap());
        for p in 0..n {
            for j in 0..d {
                let mut f = |v: f64| {
                    let mut vv = vs.clone();
                    vv[p][j] = v;
                    ncc_loss(&ncc_matrix(&FeatureBatch::from_vectors(vv, ids.clone()).unwrap()).unwrap())
                };
                ncc_ok &= agrees(grad[p][j], central(&mut f, vs[p][j]));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = seg_ok && sim_ok && ncc_ok && secs < 60.0;
    report(4, pass, &format!("L_seg {seg_ok}, L_sim {sim_ok}, L_ncc {ncc_ok} over 50 seeds each, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_5_schedule_and_loss_composition() {
    let _g = serial();
    let bank = common::toy_bank(6, 32, 51);
    let cfg = EpisodeConfig {
        epochs: 7,
        batch_size: 3,
        samples_per_subject: 2,
        weights: LossWeights {
            seg: 100.0,
            sim: 0.0,
            ncc: 0.0,
        },
        seed: 52,
        ..EpisodeConfig::default()
    };
    let (_, rep) = train(pseudomodal::eval::init_segnet(53), &bank, &cfg).unwrap();
    let mut lr_ok = rep.epochs.len() == cfg.epochs;
    for e in &rep.epochs {
        let decay = 0.5f64.powi((e.epoch / 3) as i32);
        lr_ok &= e.lr_train == cfg.lr_train * decay && e.lr_test == cfg.lr_test * decay;
    }
    for s in &rep.steps {
        lr_ok &= s.lr_train == cfg.lr_train * 0.5f64.powi((s.epoch / 3) as i32);
    }
    let composition_ok = rep.steps.iter().all(|s| s.test == 100.0 * s.seg);
    let pass = lr_ok && composition_ok;
    report(
        5,
        pass,
        &format!(
            "lr = η·0.5^⌊epoch/3⌋ at all {} epochs {lr_ok}; L_test = 100·L_seg at all {} steps {composition_ok}",
            rep.epochs.len(),
            rep.steps.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_pseudo_modality_properties() {
    let _g = serial();
    let t = Instant::now();
    let (cfg, _, bank, _) = default_benchmark();
    let mut spread = [0.0; 3];
    for e in &bank.entries {
        for (s, v) in spread.iter_mut().zip(e.style_spread()) {
            *s += v / bank.len() as f64;
        }
    }
    let diverse = spread.iter().all(|s| *s > 0.01);
    let probe = anatomy_probe(bank, &FitConfig::probe(cfg.seed)).unwrap();
    let consistent = probe[1..].iter().all(|d| *d >= 0.5);
    let secs = t.elapsed().as_secs_f64();
    let pass = diverse && consistent && secs < 600.0;
    report(
        6,
        pass,
        &format!(
            "pairwise style MAD {spread:.3?}; probe Dice D0..D3 {probe:.3?}; {secs:.0}s including bank synthesis"
        ),
    );
    assert!(pass);
}

fn seed_mean(row: &AblationRow, k: usize) -> f64 {
    row.seeds[k].mean
}

#[test]
fn criterion_7_ablation_trend() {
    let _g = serial();
    let t = Instant::now();
    let (cfg, data, bank, bank_secs) = default_benchmark();
    let table = run_ablation(bank, data, &cfg.train, &cfg.ablation.seeds).unwrap();
    println!("{}", table.render());
    let full = table.full().unwrap();
    let base = table.baseline().unwrap();
    let others: Vec<&AblationRow> = table.rows.iter().filter(|r| !r.cell.is_full() && !r.cell.is_baseline()).collect();
    let n_seeds = cfg.ablation.seeds.len();
    let mut holds = 0;
    for k in 0..n_seeds {
        let f = seed_mean(full, k);
        let ok = f >= seed_mean(base, k) + 0.02 && others.iter().all(|r| f >= seed_mean(r, k));
        println!(
            "  seed {}: full {f:.4}, baseline {:.4}, best other {:.4} -> {}",
            k,
            seed_mean(base, k),
            others.iter().map(|r| seed_mean(r, k)).fold(f64::MIN, f64::max),
            if ok { "holds" } else { "fails" }
        );
        holds += ok as usize;
    }
    let secs = t.elapsed().as_secs_f64() + bank_secs;
    let pass = holds >= 2 && n_seeds == 3 && secs < 1800.0;
    report(
        7,
        pass,
        &format!(
            "trend holds in {holds}/{n_seeds} seeds; means full {:.4}, baseline {:.4}; {secs:.0}s",
            full.overall, base.overall
        ),
    );
    assert!(pass);
}

const TINY: &str = r#"
seed = 77

[data]
n_train = 4
n_test = 2
height = 32
width = 32

[synthesis]
epochs = 2

[train]
epochs = 2
batch_size = 2
samples_per_subject = 2

[eval]
oracle = true
dump_predictions = true

[eval.oracle_fit]
epochs = 1

[ablation]
n_seeds = 1

[dump_mixup]
samples = 50
grid = 2
"#;

fn run_all(out: &Path, config: &Path) {
    for cmd in ["gen-data", "train-pseudo", "meta-train", "eval", "ablation", "dump-mixup"] {
        let o = Command::new(env!("CARGO_BIN_EXE_pseudomodal"))
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .arg("--deterministic")
            .arg(cmd)
            .env("PSEUDOMODAL_LOG", "warn")
            .output()
            .unwrap();
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn snapshot(root: &Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");
    run_all(&out, &config);
    let first = snapshot(&out);
    run_all(&out, &config);
    let second = snapshot(&out);
    let differing: Vec<_> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let has_ckpt = first.keys().any(|k| k.extension().is_some_and(|e| e == "ckpt"));
    let pass = differing.is_empty() && first.len() == second.len() && has_ckpt;
    report(
        8,
        pass,
        &format!("{} files over six commands, differing: {differing:?}", first.len()),
    );
    assert!(pass);
}
