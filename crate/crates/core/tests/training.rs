use awmoe::config::RunConfig;
use awmoe::iwr::{train_classifier, WeatherClassifier};
use awmoe::moe::{train_stage1, MoEModel, StageConfig};
use awmoe::nn::{param_hash, Rng};
use awmoe::udma::build_gt_database;
use awmoe::weathersim::{generate_dataset, Frame, Split};

fn train_split(per_class: usize, seed: u64) -> Vec<Frame> {
    let mut cfg = RunConfig::default();
    cfg.dataset.per_class = per_class;
    let dc = cfg.dataset_config().unwrap();
    let (manifest, frames) = generate_dataset(&dc, seed).unwrap();
    frames
        .into_iter()
        .zip(&manifest.entries)
        .filter(|(_, e)| e.split == Split::Train)
        .map(|(f, _)| f)
        .collect()
}

fn stage1_config() -> StageConfig {
    let mut cfg = RunConfig::default().stage1.to_config();
    cfg.epochs = 3;
    cfg
}

#[test]
fn stage1_learns_only_shared_and_designated() {
    let frames = train_split(28, 5);
    let grid = awmoe::weathersim::SceneConfig::default().grid;
    let db = build_gt_database(&frames);
    let designated = 3;
    let rng = Rng::new(17);
    let init = MoEModel::new(designated, &mut rng.clone()).unwrap();

    let (model, log) = train_stage1(&frames, &db, designated, &grid, &stage1_config(), &mut rng.clone()).unwrap();
    assert_eq!(log.epoch_loss.len(), 3);
    assert!(log.epoch_loss.iter().all(|l| l.is_finite()));
    assert!(log.epoch_loss.last() < log.epoch_loss.first(), "{:?}", log.epoch_loss);

    assert_ne!(param_hash(&model.shared), param_hash(&init.shared));
    for (w, (after, before)) in model.experts.iter().zip(&init.experts).enumerate() {
        assert_eq!(param_hash(after) == param_hash(before), w != designated, "expert {w}");
    }

    let (again, _) = train_stage1(&frames, &db, designated, &grid, &stage1_config(), &mut rng.clone()).unwrap();
    assert_eq!(again.to_checkpoint().hash(), model.to_checkpoint().hash());
}

#[test]
fn classifier_loss_falls_and_is_reproducible() {
    let frames = train_split(28, 6);
    let cfg = RunConfig::default().classifier.to_config();
    let (a, log) = train_classifier(&frames, &cfg, &mut Rng::new(8)).unwrap();
    assert_eq!(log.epoch_loss.len(), cfg.epochs);
    assert!(log.epoch_loss.last() <= log.epoch_loss.first(), "{:?}", log.epoch_loss);
    let (b, _) = train_classifier(&frames, &cfg, &mut Rng::new(8)).unwrap();
    let hash = |m: &WeatherClassifier| param_hash(m);
    assert_eq!(hash(&a), hash(&b));
}
