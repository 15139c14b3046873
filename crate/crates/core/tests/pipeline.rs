//! Cross-module checks on small worlds: persistence, poisoning isolation and
//! one short end-to-end run.

use std::collections::BTreeSet;

use fpl_core::attack_cip::CipConfig;
use fpl_core::baselines::{apply_baseline, AttackSettings, BaselineMode};
use fpl_core::catalog::{
    generate_catalog, generate_interactions, read_dataset, write_dataset, CatalogConfig, ItemId,
    Provenance, Setting, Split,
};
use fpl_core::fusion::FusionConfig;
use fpl_core::harness::{run_experiment, ExperimentConfig, Report};
use fpl_core::numkit::SeededRng;
use fpl_core::victim::VictimModel;
use fpl_core::Proxy;

fn small_world() -> CatalogConfig {
    CatalogConfig {
        item_count: 60,
        user_count: 150,
        ..CatalogConfig::default()
    }
}

#[test]
fn generated_dataset_survives_persistence() {
    let cfg = small_world();
    let cat = generate_catalog(&cfg).unwrap();
    let d = generate_interactions(&cfg, &cat, Setting::FewShot, &[ItemId(7)].into()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.json");
    write_dataset(&d, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), d);
}

#[test]
fn poisoning_leaves_benign_splits_untouched() {
    let cfg = small_world();
    let cat = generate_catalog(&cfg).unwrap();
    let targets = cat.least_popular(0, 2);
    let d = generate_interactions(
        &cfg,
        &cat,
        Setting::ZeroShot,
        &targets.iter().copied().collect(),
    )
    .unwrap();
    let proxy =
        Proxy::from_seed(FusionConfig::default(), &cat.lexicon(), cfg.patch_dim, 1).unwrap();
    let settings = AttackSettings {
        cip: CipConfig {
            rounds: 4,
            ..CipConfig::default()
        },
        anchor_count: 5,
        sessions_per_user: 2,
        history_len: 6,
    };
    let out = apply_baseline(
        BaselineMode::FullCip,
        &d,
        &targets,
        0.05,
        &proxy,
        &settings,
        &SeededRng::new(3),
    )
    .unwrap();

    let held_out = |ds: &fpl_core::catalog::Dataset| -> Vec<_> {
        ds.interactions
            .iter()
            .filter(|i| i.split != Split::Train && i.provenance == Provenance::Benign)
            .copied()
            .collect()
    };
    assert_eq!(held_out(&d), held_out(&out.dataset));
    assert!(out
        .dataset
        .interactions
        .iter()
        .filter(|i| i.provenance == Provenance::Malicious)
        .all(|i| i.split == Split::Train));
    let compromised: BTreeSet<_> = out.compromised.iter().collect();
    assert_eq!(compromised.len(), out.compromised.len());
    for t in &targets {
        let poisoned = &out.overrides[t];
        assert!(poisoned.patch_delta.max_abs() <= settings.cip.epsilon + 1e-12);
        assert_eq!(out.dataset.items[t.index()].text, poisoned.text);
    }
}

#[test]
fn short_run_reports_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        item_count: 60,
        user_count: 150,
        epochs: 3,
        batch_size: 64,
        rounds: 3,
        seeds: vec![4],
        checkpoint: Some(dir.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let run = run_experiment(&cfg).unwrap();
    let seed = &run.seeds[0];
    assert_eq!(seed.targets.len(), 1);
    assert!(seed.compromised_users > 0);
    // Clean metrics cover every user; poisoned ones skip compromised users.
    assert_eq!(seed.clean.evaluated_users, 150);
    assert_eq!(seed.poisoned.evaluated_users, 150 - seed.compromised_users);
    for k in [5, 10, 20] {
        assert!((0.0..=1.0).contains(&seed.poisoned.er[&k]));
    }

    let ckpt = dir.path().join("victim-seed4.ckpt");
    let cat = generate_catalog(&cfg.catalog(4)).unwrap();
    let template = VictimModel::init(
        &FusionConfig::default(),
        &cat.lexicon(),
        cfg.patch_dim,
        cfg.head_scale,
        &SeededRng::new(0),
    )
    .unwrap();
    let restored = template.read_checkpoint(&ckpt).unwrap();
    assert!(restored.is_finite());
    assert_ne!(restored.squared_norm(), template.squared_norm());

    let report = Report::single(run);
    assert_eq!(
        Report::from_json(&report.to_json()).unwrap().to_json(),
        report.to_json()
    );
}
