//! End-to-end behavior of the toy experiment: the domain gap exists, the
//! adapted model closes a material part of it, and runs are reproducible.
//! Runs at reduced size; the acceptance suite enforces the full-size gates.

use pinadapt::e2e::{run_toy_e2e, ToyE2eParams};

fn small_params(seed: u64) -> ToyE2eParams {
    let mut p = ToyE2eParams::default_for_seed(seed);
    p.n_train = 24;
    p.n_val = 12;
    p.source.iterations = 250;
    p.adapt.iterations = 200;
    p
}

#[test]
fn adapted_model_beats_source_only_on_shifted_val() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_toy_e2e(dir.path(), &small_params(1)).unwrap();
    println!(
        "seed 1: clean {:.4} shifted {:.4} adapted {:.4} (delta {:+.4}) adapted-clean {:.4}",
        report.source_clean_miou,
        report.source_shifted_miou,
        report.adapted_shifted_miou,
        report.delta,
        report.adapted_clean_miou,
    );
    // domain gap exists
    assert!(
        report.source_shifted_miou < report.source_clean_miou - 0.05,
        "no material domain gap: clean {:.4} vs shifted {:.4}",
        report.source_clean_miou,
        report.source_shifted_miou
    );
    // adaptation closes a material part of it
    assert!(
        report.delta >= 0.05,
        "adaptation gain too small: {:+.4}",
        report.delta
    );
    // artifacts land on disk
    assert!(dir.path().join("bank/manifest.json").exists());
    assert!(dir.path().join("checkpoint-adapted/meta.json").exists());
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn runs_are_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let params = ToyE2eParams {
        n_train: 12,
        n_val: 6,
        ..small_params(7)
    };
    let ra = run_toy_e2e(a.path(), &params).unwrap();
    let rb = run_toy_e2e(b.path(), &params).unwrap();
    assert_eq!(ra, rb);
}
