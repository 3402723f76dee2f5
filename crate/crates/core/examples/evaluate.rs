//! Baseline, full model and per-family oracles on the held-out styles.
//!
//! ```text
//! cargo run --release --example evaluate -- [epochs]
//! ```

use pseudomodal::config::Config;
use pseudomodal::eval::{evaluate, evaluate_samples, init_segnet, summarize, train_oracle, THRESHOLD};
use pseudomodal::meta_trainer::{train, train_baseline, EpisodeConfig, FitConfig};
use pseudomodal::phantom::build_split;
use pseudomodal::pseudomod::synthesize_bank;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let cfg = Config::default();
    let data = build_split(&cfg.data, cfg.data_seed)?;
    let (bank, _, _) = synthesize_bank(&data.train, &cfg.synthesis)?;
    let train_cfg = EpisodeConfig { epochs, ..cfg.train.clone() };

    let (baseline, _) = train_baseline(init_segnet(train_cfg.seed), &bank, &train_cfg)?;
    let (full, _) = train(init_segnet(train_cfg.seed), &bank, &train_cfg)?;
    for (name, net) in [("baseline", &baseline), ("full", &full)] {
        let (per, overall) = summarize(&evaluate(net, &data, THRESHOLD)?);
        print!("{name:<9} overall {overall:.4} |");
        for (domain, shift, dice) in per {
            print!(" {domain} ({}) {dice:.4}", shift.map_or(String::new(), |s| s.to_string()));
        }
        println!();
    }

    let fit = FitConfig { epochs, ..cfg.eval.oracle_fit.clone() };
    for family in &data.targets {
        let oracle = train_oracle(&data, family, &cfg.data.render, &fit)?;
        let test: Vec<_> = data.test.iter().filter(|s| s.rendering.style == family.name).cloned().collect();
        let (_, mean) = summarize(&evaluate_samples(&oracle, &test, &data.targets, THRESHOLD)?);
        println!("oracle    {:<14} {mean:.4}", family.name);
    }
    Ok(())
}
