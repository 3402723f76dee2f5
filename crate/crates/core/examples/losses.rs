//! The meta-test loss terms on hand-made inputs.
//!
//! ```text
//! cargo run --release --example losses
//! ```

use pseudomodal::losses::{
    meta_test_loss, ncc_loss, ncc_matrix, seg_loss, sim_loss, FeatureBatch, LossComponents, LossWeights,
};
use pseudomodal::nn::FeatureMap;
use pseudomodal::phantom::VesselMap;

fn main() -> anyhow::Result<()> {
    let y = VesselMap::new(0, 2, 2, vec![1, 0, 0, 1])?;
    for margin in [0.0, 2.0, 10.0] {
        // channel 1 is the vessel class
        let s: Vec<f32> = y.pixels.iter().map(|p| if *p == 1 { margin } else { -margin }).collect();
        let mut data: Vec<f32> = s.iter().map(|v| -v).collect();
        data.extend(&s);
        let l = seg_loss(&FeatureMap::from_vec(2, 2, 2, data), &y)?;
        println!("L_seg at logit margin {margin:>4}: CE {:.4} + Dice {:.4}", l.ce, l.dice);
    }

    let sim = sim_loss(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, -2.0]])?;
    println!("L_sim of samples [1,0], [0,-2] around anchor [0,0]: {}", sim.value);

    // two subjects with two views each: clustered, then collapsed
    let ids = vec![0, 0, 1, 1];
    let clustered = vec![vec![1.0, 0.1], vec![0.9, 0.0], vec![0.0, 1.0], vec![0.1, 1.2]];
    let collapsed = vec![vec![1.0, 1.0]; 4];
    for (name, vs) in [("clustered", clustered), ("collapsed", collapsed)] {
        let m = ncc_matrix(&FeatureBatch::from_vectors(vs, ids.clone())?)?;
        println!("L_ncc {name}: {:.4}", ncc_loss(&m));
    }

    let parts = LossComponents {
        seg: 0.5,
        sim: 0.01,
        ncc: 2.0,
    };
    println!("L_test with default weights: {}", meta_test_loss(&parts, &LossWeights::default())?);
    Ok(())
}
