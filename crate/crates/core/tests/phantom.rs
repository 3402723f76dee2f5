//! Generator and renderer invariants over many seeds.

use pseudomodal::phantom::{
    build_split, contrast_gap, generate_vessel_map, render, BranchParams, RenderOptions, SplitSpec, StyleFamily,
    VesselMap,
};

/// Independent flood fill: number of 4-connected components and the largest one.
fn components4(m: &VesselMap) -> (usize, usize) {
    let (h, w) = (m.height, m.width);
    let mut label = vec![0usize; h * w];
    let (mut count, mut largest) = (0, 0);
    for s in 0..h * w {
        if m.pixels[s] == 0 || label[s] != 0 {
            continue;
        }
        count += 1;
        let mut queue = std::collections::VecDeque::from([s]);
        label[s] = count;
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if m.pixels[j] == 1 && label[j] == 0 {
                    label[j] = count;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        largest = largest.max(size);
    }
    (count, largest)
}

#[test]
fn maps_are_binary_dense_enough_and_connected_on_1000_seeds() {
    let p = BranchParams::default();
    for seed in 0..1000 {
        let m = generate_vessel_map(seed, 64, 64, &p).unwrap();
        assert!(m.pixels.iter().all(|v| *v <= 1), "seed {seed}");
        let ones = m.pixels.iter().filter(|v| **v == 1).count();
        let density = ones as f64 / (64.0 * 64.0);
        assert!((p.density_min..=p.density_max).contains(&density), "seed {seed}: density {density}");
        let (count, largest) = components4(&m);
        assert!(count >= 1, "seed {seed}");
        // a trunk is a tube, not a speckle
        assert!(largest >= 64, "seed {seed}: largest component {largest}");
    }
}

#[test]
fn thresholding_the_identity_rendering_recovers_the_map() {
    for seed in 0..50 {
        let m = generate_vessel_map(seed, 48, 40, &BranchParams::default()).unwrap();
        let img = render(&m, &StyleFamily::identity(), seed).unwrap().image;
        let back = VesselMap::from_threshold(m.subject_id, &img, 0.5);
        assert_eq!(back, m);
        let inv = render(&m, &StyleFamily::inverted_identity(), seed).unwrap().image;
        for (a, b) in img.data.iter().zip(&inv.data) {
            assert_eq!(*b, 1.0 - a);
        }
    }
}

#[test]
fn every_default_family_keeps_the_configured_margin() {
    let margin = RenderOptions::default().margin;
    let families: Vec<_> = StyleFamily::default_sources()
        .into_iter()
        .chain(StyleFamily::default_targets())
        .collect();
    for seed in 0..40 {
        let m = generate_vessel_map(seed, 64, 64, &BranchParams::default()).unwrap();
        for f in &families {
            let r = render(&m, f, seed * 7 + 1).unwrap();
            assert!(r.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let gap = contrast_gap(&r.image, &m, f.polarity);
            assert!(gap >= margin, "{} seed {seed}: gap {gap} < {margin}", f.name);
            assert_eq!(r.image, render(&m, f, seed * 7 + 1).unwrap().image);
        }
    }
}

#[test]
fn splits_keep_subjects_and_styles_apart() {
    let spec = SplitSpec::default();
    let data = build_split(&spec, 4).unwrap();
    let train_ids: std::collections::BTreeSet<_> = data.train.iter().map(|s| s.map.subject_id).collect();
    let test_ids: std::collections::BTreeSet<_> = data.test.iter().map(|s| s.map.subject_id).collect();
    assert_eq!(train_ids.len(), spec.n_train);
    assert_eq!(test_ids.len(), spec.n_test);
    assert!(train_ids.is_disjoint(&test_ids));
    let sources: Vec<_> = spec.sources.iter().map(|f| f.name.as_str()).collect();
    let targets: Vec<_> = spec.targets.iter().map(|f| f.name.as_str()).collect();
    assert!(data.train.iter().all(|s| sources.contains(&s.rendering.style.as_str())));
    assert!(data.test.iter().all(|s| targets.contains(&s.rendering.style.as_str())));
    assert_eq!(data.test.len(), spec.n_test * spec.targets.len());
    assert_eq!(build_split(&spec, 4).unwrap(), data);
}
