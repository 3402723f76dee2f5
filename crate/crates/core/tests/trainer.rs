//! Episodic trainer: schedule, switchboard, ordering, determinism, resume.

mod common;

use common::{params, toy_bank};
use pseudomodal::checkpoint::{restore_train_state, train_state_checkpoint, Checkpoint};
use pseudomodal::eval::init_segnet;
use pseudomodal::losses::LossWeights;
use pseudomodal::meta_trainer::{
    baseline_config, train, train_baseline, train_from, EpisodeConfig, StepRecord, TrainState,
};

fn small_cfg(epochs: usize) -> EpisodeConfig {
    EpisodeConfig {
        epochs,
        batch_size: 3,
        samples_per_subject: 2,
        seed: 5,
        ..EpisodeConfig::default()
    }
}

#[test]
fn zero_epochs_leave_the_network_untouched() {
    let bank = toy_bank(4, 32, 1);
    let net = init_segnet(3);
    let before = params(&net);
    for cfg in [small_cfg(0), baseline_config(&small_cfg(0))] {
        let (after, report) = train(net.clone(), &bank, &cfg).unwrap();
        assert_eq!(params(&after), before);
        assert!(report.epochs.is_empty() && report.steps.is_empty());
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let bank = toy_bank(4, 32, 2);
    let cfg = small_cfg(2);
    let (a, ra) = train(init_segnet(4), &bank, &cfg).unwrap();
    let (b, rb) = train(init_segnet(4), &bank, &cfg).unwrap();
    assert_eq!(ra.steps, rb.steps);
    assert_eq!(params(&a), params(&b));
    let (_, rc) = train(init_segnet(4), &bank, &EpisodeConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(ra.steps, rc.steps);
}

#[test]
fn plain_config_matches_the_baseline_trainer() {
    let bank = toy_bank(4, 32, 3);
    let cfg = EpisodeConfig {
        episodic: false,
        weights: LossWeights {
            seg: 100.0,
            sim: 0.0,
            ncc: 0.0,
        },
        ..small_cfg(3)
    };
    let (a, ra) = train(init_segnet(8), &bank, &cfg).unwrap();
    let (b, rb) = train_baseline(init_segnet(8), &bank, &small_cfg(3)).unwrap();
    let seg = |r: &[StepRecord]| r.iter().map(|s| s.seg).collect::<Vec<_>>();
    assert_eq!(seg(&ra.steps), seg(&rb.steps));
    assert_eq!(params(&a), params(&b));
}

#[test]
fn learning_rates_follow_the_step_schedule() {
    let bank = toy_bank(3, 32, 4);
    let cfg = baseline_config(&small_cfg(8));
    let (_, report) = train(init_segnet(1), &bank, &cfg).unwrap();
    for rec in &report.epochs {
        // halve once per completed block of three epochs
        let mut train_lr = cfg.lr_train;
        let mut test_lr = cfg.lr_test;
        for _ in 0..rec.epoch / 3 {
            train_lr /= 2.0;
            test_lr /= 2.0;
        }
        assert_eq!(rec.lr_train, train_lr, "epoch {}", rec.epoch);
        assert_eq!(rec.lr_test, test_lr, "epoch {}", rec.epoch);
    }
    assert_eq!(report.epochs[7].lr_train, 2.5e-4);
}

#[test]
fn meta_test_runs_on_the_updated_parameters() {
    let bank = toy_bank(5, 32, 5);
    let (_, report) = train(init_segnet(2), &bank, &small_cfg(2)).unwrap();
    let mut last_version = 0;
    for s in &report.steps {
        assert_eq!(s.version_after_meta_train, last_version + 1);
        assert_eq!(s.version_at_meta_test, s.version_after_meta_train);
        last_version = s.version_at_meta_test + 1;
    }
    assert_eq!(report.steps.len(), 2 * 2);
}

#[test]
fn without_clustering_losses_the_meta_test_loss_is_weighted_segmentation() {
    let bank = toy_bank(4, 32, 6);
    let cfg = EpisodeConfig {
        weights: LossWeights {
            seg: 100.0,
            sim: 0.0,
            ncc: 0.0,
        },
        ..small_cfg(2)
    };
    let (_, report) = train(init_segnet(3), &bank, &cfg).unwrap();
    for s in &report.steps {
        assert_eq!(s.test, 100.0 * s.seg);
    }
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_run() {
    let bank = toy_bank(4, 32, 7);
    let cfg = small_cfg(3);
    let mut saved = None;
    let mut full = TrainState::new(init_segnet(9));
    let report = train_from(&mut full, &bank, &cfg, &mut |state, rec, _| {
        if rec.epoch == 0 {
            saved = Some(train_state_checkpoint(state, "toy").to_bytes());
        }
        Ok(())
    })
    .unwrap();
    let ckpt = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let mut resumed = restore_train_state(&ckpt, init_segnet(0)).unwrap();
    assert_eq!(resumed.next_epoch, 1);
    let tail = train_from(&mut resumed, &bank, &cfg, &mut |_, _, _| Ok(())).unwrap();
    let timeless = |r: &[pseudomodal::meta_trainer::EpochRecord]| {
        r.iter()
            .map(|e| pseudomodal::meta_trainer::EpochRecord { wall_seconds: 0.0, ..e.clone() })
            .collect::<Vec<_>>()
    };
    assert_eq!(timeless(&tail.epochs), timeless(&report.epochs[1..]));
    assert_eq!(tail.steps, report.steps[report.steps.len() - tail.steps.len()..]);
    assert_eq!(params(&resumed.net), params(&full.net));
}

#[test]
fn meta_test_loss_falls_on_a_toy_bank() {
    let bank = toy_bank(10, 32, 8);
    let cfg = EpisodeConfig {
        seed: 9,
        ..EpisodeConfig::default()
    };
    let (_, report) = train(init_segnet(10), &bank, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 30);
    let (first, last) = (report.epochs[0].test, report.epochs[29].test);
    assert!(last < first, "L_test {first} -> {last}");
}

#[test]
fn lookahead_is_rejected() {
    let bank = toy_bank(2, 32, 9);
    let cfg = EpisodeConfig {
        lookahead: true,
        ..small_cfg(1)
    };
    assert!(train(init_segnet(0), &bank, &cfg).is_err());
}
