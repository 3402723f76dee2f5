//! Episodic training on a freshly synthesized bank, with per-epoch logging
//! and a checkpoint of the final network.
//!
//! ```text
//! cargo run --release --example meta_train -- [epochs] [out.ckpt]
//! ```

use pseudomodal::checkpoint::segnet_checkpoint;
use pseudomodal::config::Config;
use pseudomodal::eval::init_segnet;
use pseudomodal::meta_trainer::{train_from, EpisodeConfig, TrainState};
use pseudomodal::phantom::build_split;
use pseudomodal::pseudomod::synthesize_bank;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let out = args.next().unwrap_or_else(|| "map.ckpt".into());
    let cfg = Config::default();
    let data = build_split(&cfg.data, cfg.data_seed)?;
    let (bank, _, _) = synthesize_bank(&data.train, &cfg.synthesis)?;
    let train_cfg = EpisodeConfig { epochs, ..cfg.train.clone() };
    let mut state = TrainState::new(init_segnet(train_cfg.seed));
    println!("epoch  lr_train  L_seg(D1)  L_seg    L_sim     L_ncc     L_test");
    train_from(&mut state, &bank, &train_cfg, &mut |_, r, _| {
        println!(
            "{:>5}  {:.2e}  {:>9.4}  {:.4}  {:>8.2}  {:>8.2}  {:>9.2}",
            r.epoch, r.lr_train, r.meta_train_seg, r.seg, r.sim, r.ncc, r.test
        );
        Ok(())
    })?;
    segnet_checkpoint(&state.net, &cfg.to_toml()?).save(out.as_ref())?;
    println!("saved {out} after {} parameter updates", state.version);
    Ok(())
}
