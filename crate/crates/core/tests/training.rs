use tracklet_fusion::backbone::BackboneConfig;
use tracklet_fusion::data::{generate, SyntheticConfig};
use tracklet_fusion::model::{Model, ModelConfig};
use tracklet_fusion::semantic_fusion::Variant;
use tracklet_fusion::training::{train, LogRecord, TrainConfig, TrainHooks};

#[derive(Default)]
struct Losses(Vec<LogRecord>);

impl TrainHooks for Losses {
    fn on_step(&mut self, record: &LogRecord) {
        self.0.push(record.clone());
    }
}

fn dataset(ids: usize) -> tracklet_fusion::data::Dataset {
    let cfg = SyntheticConfig {
        num_identities: ids,
        ..SyntheticConfig::default()
    };
    generate(&cfg, 11).unwrap()
}

fn small_train() -> TrainConfig {
    TrainConfig {
        frames_per_tracklet: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn two_hundred_steps_halve_the_loss() {
    let data = dataset(16);
    let cfg = TrainConfig {
        warmup_epochs: 20,
        steps_per_epoch: 10,
        epochs: 0,
        ids_per_batch: 8,
        warmup_lr: 0.03,
        ..small_train()
    };
    let mut model = Model::init(ModelConfig::new(BackboneConfig::default()), 3).unwrap();
    let mut log = Losses::default();
    let (warm, _) = train(&data, &mut model, Variant::FULL, &cfg, 3, &mut log).unwrap();
    assert_eq!(warm.step, 200);
    let first = warm.epoch_losses[0];
    let last = *warm.epoch_losses.last().unwrap();
    println!("epoch-0 loss {first:.4}, final epoch loss {last:.4}");
    assert!(last <= 0.5 * first, "{first} → {last}");
}

#[test]
fn first_ten_steps_are_deterministic() {
    let data = dataset(8);
    let cfg = TrainConfig {
        warmup_epochs: 1,
        epochs: 1,
        steps_per_epoch: 5,
        ..small_train()
    };
    let run = || {
        let mut model = Model::init(ModelConfig::new(BackboneConfig::default()), 5).unwrap();
        let mut log = Losses::default();
        train(&data, &mut model, Variant::FULL, &cfg, 5, &mut log).unwrap();
        (log.0.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn zero_epochs_leave_the_initialisation() {
    let data = dataset(4);
    let cfg = TrainConfig {
        warmup_epochs: 0,
        epochs: 0,
        ..small_train()
    };
    let init = Model::init(ModelConfig::new(BackboneConfig::default()), 1).unwrap();
    let mut model = init.clone();
    train(&data, &mut model, Variant::FULL, &cfg, 1, &mut Losses::default()).unwrap();
    assert_eq!(model, init);
}

#[test]
fn empty_dataset_is_an_error() {
    let mut model = Model::init(ModelConfig::new(BackboneConfig::default()), 1).unwrap();
    let empty = tracklet_fusion::data::Dataset::default();
    assert!(train(&empty, &mut model, Variant::FULL, &small_train(), 1, &mut Losses::default()).is_err());
}
