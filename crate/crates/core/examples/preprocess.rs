//! The D⁰ pipeline: green channel, inversion, CLAHE, rescale. Fundus-like
//! renderings come out with bright vessels on a flattened background.
//!
//! ```text
//! cargo run --release --example preprocess -- [out_dir]
//! ```

use std::path::PathBuf;

use pseudomodal::phantom::{contrast_gap, generate_vessel_map, render, BranchParams, Polarity, StyleFamily};
use pseudomodal::preprocess::{preprocess_d0, RawImage};

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "preprocess".into()));
    std::fs::create_dir_all(&out)?;
    let map = generate_vessel_map(3, 64, 64, &BranchParams::default())?;
    for family in StyleFamily::default_sources() {
        let raw = render(&map, &family, 5)?;
        let d0 = preprocess_d0(&RawImage::Gray(raw.image.clone()))?;
        println!(
            "{:<10} raw gap {:.3} (dark vessels) -> D0 gap {:.3} (bright vessels)",
            family.name,
            contrast_gap(&raw.image, &map, Polarity::DarkVessels),
            contrast_gap(&d0, &map, Polarity::BrightVessels)
        );
        raw.image.save_png(&out.join(format!("{}_raw.png", family.name)))?;
        d0.save_png(&out.join(format!("{}_d0.png", family.name)))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
