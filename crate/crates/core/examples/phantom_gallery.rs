//! Generates one vessel tree and renders it in every source and target
//! style family.
//!
//! ```text
//! cargo run --release --example phantom_gallery -- [out_dir]
//! ```

use std::path::PathBuf;

use pseudomodal::phantom::{contrast_gap, generate_vessel_map, render, BranchParams, StyleFamily};

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "gallery".into()));
    std::fs::create_dir_all(&out)?;
    let map = generate_vessel_map(7, 64, 64, &BranchParams::default())?;
    println!(
        "subject 7: {} vessel pixels (density {:.3}), {} connected component(s)",
        map.vessel_count(),
        map.density(),
        map.component_sizes().len()
    );
    map.to_image().save_png(&out.join("label.png"))?;
    let families = StyleFamily::default_sources().into_iter().chain(StyleFamily::default_targets());
    for family in families {
        let r = render(&map, &family, 11)?;
        let gap = contrast_gap(&r.image, &map, family.polarity);
        let shift = family.shift.map_or("source".to_string(), |s| format!("type {s}"));
        println!("{:<14} {shift:<8} vessel/background gap {gap:.3}", family.name);
        r.image.save_png(&out.join(format!("{}.png", family.name)))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
