use std::fs;
use std::path::Path;

use panoscrub::geometry::EquirectGrid;
use panoscrub::inpaint::{make_dataset, SilhouettePool, TrainConfig, Trainer, TrainingSample};
use panoscrub::sequence::Sequence;
use panoscrub::synth::{suite, SuiteConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenes(count: usize) -> Vec<Sequence> {
    let config = SuiteConfig {
        count,
        grid: EquirectGrid::new(128, 64).unwrap(),
        ..SuiteConfig::standard(11)
    };
    suite(&config).unwrap().into_iter().map(|r| r.sequence).collect()
}

fn samples(config: &TrainConfig, scenes_n: usize) -> Vec<TrainingSample> {
    let seqs = scenes(scenes_n);
    let pool = SilhouettePool::from_sequences(&seqs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    make_dataset(&seqs, config.num_samples, config.tile, &pool, config.epsilon, &mut rng).unwrap()
}

fn small() -> TrainConfig {
    TrainConfig {
        tile: 16,
        batch: 2,
        num_samples: 4,
        epochs: 1,
        lr: 1e-4,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn one_step_moves_the_generator() {
    let config = small();
    let data = samples(&config, 1);
    let mut trainer = Trainer::new(config).unwrap();
    let before = trainer.model.g.clone();
    let stats = trainer.step(&[&data[0], &data[1]]).unwrap();
    assert!(stats.critic_loss.is_finite() && stats.discounted_l1 > 0.0);
    assert_ne!(before, trainer.model.g);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn seeded_runs_write_identical_checkpoints_at_step_100() {
    let config = TrainConfig {
        epochs: 50,
        ..small()
    };
    let data = samples(&config, 1);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let mut trainer = Trainer::new(config.clone()).unwrap();
        trainer.fit(&data, Some(dir.path())).unwrap();
        assert_eq!(trainer.step_count(), 100);
    }
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    assert_eq!(a.len(), 13);
    assert_eq!(a, b);
}

#[test]
fn resumed_training_continues_bit_identically() {
    let config = TrainConfig { epochs: 2, ..small() };
    let data = samples(&config, 1);
    let mut straight = Trainer::new(config.clone()).unwrap();
    straight.fit(&data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(config.clone()).unwrap();
    first.epoch(&data, None).unwrap();
    first.save(dir.path()).unwrap();
    let mut resumed = Trainer::resume(dir.path()).unwrap();
    resumed.epoch(&data, None).unwrap();
    assert_eq!(resumed.step_count(), straight.step_count());
    assert_eq!(resumed.model, straight.model);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { tile: 24, ..TrainConfig::default() },
        TrainConfig { critic_ratio: 0, ..TrainConfig::default() },
        TrainConfig { gamma: 1.0, ..TrainConfig::default() },
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(Trainer::new(bad), Err(panoscrub::Error::Config(_))));
    }
    let parsed: Result<TrainConfig, _> = serde_json::from_str(r#"{"lr": 0.001, "typo": 1}"#);
    assert!(parsed.is_err());
}
