//! Shared fixtures for integration tests.
#![allow(dead_code)]

use pseudomodal::checkpoint::{module_tensors, Tensor};
use pseudomodal::image::GrayImage;
use pseudomodal::phantom::{generate_vessel_map, render, BranchParams, StyleFamily};
use pseudomodal::pseudomod::{BankEntry, PseudoModalityBank};
use pseudomodal::segnet::SegNet;

/// A bank of `n` `size×size` subjects whose four modalities are renderings
/// under distinct families (no synthesis networks involved).
pub fn toy_bank(n: usize, size: usize, seed: u64) -> PseudoModalityBank {
    let mut families = StyleFamily::default_sources();
    families.push(StyleFamily::identity());
    let entries = (0..n as u64)
        .map(|id| {
            let label = generate_vessel_map(seed * 1000 + id, size, size, &BranchParams::default()).unwrap();
            let label = pseudomodal::phantom::VesselMap { subject_id: id, ..label };
            let x: [GrayImage; 4] = std::array::from_fn(|k| {
                let r = render(&label, &families[k], seed * 1000 + id * 4 + k as u64).unwrap();
                let img = r.image;
                if k < 3 {
                    // sources are dark-vessel: flip into the bright-vessel frame
                    GrayImage::new(img.height, img.width, img.data.iter().map(|v| 1.0 - v).collect())
                } else {
                    img
                }
            });
            BankEntry {
                subject_id: id,
                x,
                label,
                source_style: families[0].name.clone(),
            }
        })
        .collect();
    PseudoModalityBank { entries }
}

pub fn params(net: &SegNet<f32>) -> Vec<Tensor> {
    module_tensors(net, "net")
}
