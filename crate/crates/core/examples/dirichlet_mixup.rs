//! Dirichlet coefficients on the simplex and the mixup samples they produce.
//!
//! ```text
//! cargo run --release --example dirichlet_mixup -- [out_dir]
//! ```

use std::path::PathBuf;

use pseudomodal::image::GrayImage;
use pseudomodal::mixup::{dirichlet_pdf, mix, sample_lambda, DirichletParams, MixupCoefficients};
use pseudomodal::phantom::{generate_vessel_map, BranchParams};
use pseudomodal::pseudomod::BankEntry;
use pseudomodal::rng::component_rng;

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "mixup".into()));
    std::fs::create_dir_all(&out)?;
    for alpha in [[1.0, 1.0, 1.0], [5.0, 5.0, 5.0], [1.5, 5.0, 1.5]] {
        let a = DirichletParams::new(alpha)?;
        let mut rng = component_rng(1, "example-mixup");
        let n = 20_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            for (m, l) in mean.iter_mut().zip(sample_lambda(&a, &mut rng).values()) {
                *m += l / n as f64;
            }
        }
        let centre = dirichlet_pdf(&MixupCoefficients::centroid().values(), &a)?;
        println!(
            "alpha {alpha:?}: empirical mean {mean:.3?} (expected {:.3?}), density at centroid {centre:.3}",
            a.mean()
        );
    }

    // a subject whose three mixup sources are simple intensity ramps of one map
    let label = generate_vessel_map(2, 64, 64, &BranchParams::default())?;
    let base = label.to_image();
    let styled = |lo: f32, hi: f32| GrayImage::new(64, 64, base.data.iter().map(|v| lo + (hi - lo) * v).collect());
    let entry = BankEntry {
        subject_id: 2,
        x: [styled(0.3, 0.9), styled(0.5, 0.6), styled(0.0, 0.7), styled(0.8, 1.0)],
        label,
        source_style: "ramp".into(),
    };
    let mut rng = component_rng(2, "example-mixup-images");
    for i in 0..4 {
        let lambda = sample_lambda(&DirichletParams::uniform(), &mut rng);
        let s = mix(&entry, &lambda)?;
        println!("sample {i}: lambda {:.3?}", lambda.values());
        s.image.save_png(&out.join(format!("sample_{i}.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
