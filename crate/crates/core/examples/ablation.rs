//! The six-row component grid (episodic, L_sim, L_ncc) on the default
//! benchmark. The full run (30 epochs, 3 seeds) takes about 25 minutes on
//! one core. Pass fewer epochs or seeds for a quick look.
//!
//! ```text
//! cargo run --release --example ablation -- [epochs] [n_seeds]
//! ```

use pseudomodal::config::Config;
use pseudomodal::eval::run_ablation;
use pseudomodal::meta_trainer::EpisodeConfig;
use pseudomodal::phantom::build_split;
use pseudomodal::pseudomod::synthesize_bank;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let n_seeds: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let mut cfg = Config::default();
    cfg.ablation.n_seeds = n_seeds;
    let cfg = cfg.resolve();
    let data = build_split(&cfg.data, cfg.data_seed)?;
    let (bank, _, _) = synthesize_bank(&data.train, &cfg.synthesis)?;
    let train_cfg = EpisodeConfig { epochs, ..cfg.train.clone() };
    let table = run_ablation(&bank, &data, &train_cfg, &cfg.ablation.seeds)?;
    println!("{}", table.render());
    Ok(())
}
