use std::path::PathBuf;

use tmifpe::attack::{robust_accuracy, AttackConfig};
use tmifpe::data::{load_mnist, synth_blobs};
use tmifpe::losses::{LossFamily, LossKind};
use tmifpe::nn::{accuracy, predict, train, PgdTraining, TrainConfig, DESK_ARCH};

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch: 16, learning_rate: 0.1, ..Default::default() }
}

#[test]
fn separable_blobs_reach_high_accuracy() {
    let tr = synth_blobs(0, 2, 100, 2, 4.0).unwrap();
    let te = synth_blobs(1, 2, 100, 2, 4.0).unwrap();
    let (_, report) = train(&tr, Some(&te), &[2, 16, 2], &quick(10)).unwrap();
    assert!(report.test_accuracy.unwrap() >= 0.99);
}

#[test]
fn widely_separated_blobs_are_fit_by_a_linear_model() {
    let tr = synth_blobs(0, 3, 50, 4, 4.5).unwrap();
    let te = synth_blobs(1, 3, 50, 4, 4.5).unwrap();
    let (m, _) = train(&tr, None, &[4, 3], &quick(30)).unwrap();
    assert_eq!(accuracy(&m, &te).unwrap(), 1.0);
}

#[test]
fn zero_separation_is_near_chance() {
    let tr = synth_blobs(0, 2, 200, 4, 0.0).unwrap();
    let te = synth_blobs(1, 2, 500, 4, 0.0).unwrap();
    let (m, _) = train(&tr, None, &[4, 8, 2], &quick(5)).unwrap();
    let acc = accuracy(&m, &te).unwrap();
    assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
}

/// Predictions of a fixed-seed model on held-out blobs. Regenerate with
/// `UPDATE_GOLDEN=1 cargo test --test training golden`.
#[test]
fn golden_predictions() {
    let tr = synth_blobs(7, 4, 60, 6, 2.5).unwrap();
    let te = synth_blobs(8, 4, 10, 6, 2.5).unwrap();
    let (m, _) = train(&tr, None, &[6, 16, 4], &quick(6)).unwrap();
    let preds: Vec<usize> = te.images.iter().map(|x| predict(&m, x).unwrap()).collect();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/blob_predictions.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string(&preds).unwrap()).unwrap();
    }
    let stored: Vec<usize> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(preds, stored);
}

#[test]
fn adversarial_training_beats_standard_training_under_attack() {
    let dir = std::env::var_os("MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/root/data/mnist"));
    let (Ok(tr), Ok(te)) = (load_mnist(&dir, true, Some(10_000)), load_mnist(&dir, false, Some(500))) else {
        eprintln!("MNIST not found at {}; skipping", dir.display());
        return;
    };
    let standard = TrainConfig { epochs: 10, ..Default::default() };
    let adversarial = TrainConfig {
        adversarial: Some(PgdTraining { eps: 0.1, steps: 5, step_size: 0.05 }),
        ..standard.clone()
    };
    let (m_std, _) = train(&tr, None, &DESK_ARCH, &standard).unwrap();
    let (m_adv, _) = train(&tr, None, &DESK_ARCH, &adversarial).unwrap();
    assert!(accuracy(&m_adv, &te).unwrap() >= 0.90);
    let attack = AttackConfig { eps: 0.1, iterations: 20, loss: LossKind::untargeted(LossFamily::Ce), ..Default::default() };
    let r_std = robust_accuracy(&m_std, &te, &attack).unwrap().aggregate.robust_accuracy;
    let r_adv = robust_accuracy(&m_adv, &te, &attack).unwrap().aggregate.robust_accuracy;
    assert!(r_adv > r_std, "adversarial {r_adv} vs standard {r_std}");
}
