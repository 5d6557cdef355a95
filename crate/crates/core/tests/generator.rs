use synthid_core::embedding::{OracleConfig, OracleEmbedder};
use synthid_core::generator::toy::{toy_dataset, ToyDatasetConfig, ToyWorld, ToyWorldConfig};
use synthid_core::generator::{
    decode_model, encode_model, train, GeneratorConfig, GeneratorModel, MaskConfig, PerceptualBank, PerceptualConfig,
    TrainConfig, TrainingPair,
};
use synthid_core::rng::stream;

fn setup() -> (OracleEmbedder, Vec<TrainingPair>, PerceptualBank) {
    let oracle = OracleEmbedder::new(OracleConfig { dim_in: 256, channels: 1, dim_out: 64, gain: 2.65, seed: 2 }).unwrap();
    let world = ToyWorld::new(ToyWorldConfig::default(), &oracle).unwrap();
    let cfg = ToyDatasetConfig { identities: 6, per_identity: 3, ..ToyDatasetConfig::default() };
    let pairs = toy_dataset(&world, &oracle, &cfg)
        .unwrap()
        .into_iter()
        .map(|s| TrainingPair { f_im: s.feature, im_gt: s.image })
        .collect();
    let bank = PerceptualBank::new(world.image_shape(), &PerceptualConfig::default()).unwrap();
    (oracle, pairs, bank)
}

fn model() -> GeneratorModel {
    GeneratorModel::new(GeneratorConfig::toy(), MaskConfig::default(), &mut stream(1, "init", 0)).unwrap()
}

#[test]
fn training_is_deterministic() {
    let (oracle, pairs, bank) = setup();
    let tc = TrainConfig { steps: 15, lr: 5e-3, batch: 4, seed: 3, ..TrainConfig::default() };
    let (mut a, mut b) = (model(), model());
    let ta = train(&mut a, &oracle, &bank, &pairs, &tc).unwrap();
    let tb = train(&mut b, &oracle, &bank, &pairs, &tc).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(encode_model(&a, &[]).unwrap(), encode_model(&b, &[]).unwrap());
}

#[test]
fn worker_count_does_not_change_results() {
    let (oracle, pairs, bank) = setup();
    let tc = TrainConfig { steps: 5, lr: 5e-3, batch: 6, seed: 3, ..TrainConfig::default() };
    let (mut a, mut b) = (model(), model());
    train(&mut a, &oracle, &bank, &pairs, &tc).unwrap();
    train(&mut b, &oracle, &bank, &pairs, &TrainConfig { workers: 3, ..tc }).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        assert!(x.max_abs_diff(y) < 1e-9);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (oracle, pairs, bank) = setup();
    let tc = TrainConfig { steps: 5, lr: 0.0, batch: 4, seed: 3, ..TrainConfig::default() };
    let before = model();
    let mut m = model();
    let trace = train(&mut m, &oracle, &bank, &pairs, &tc).unwrap();
    assert_eq!(trace.len(), 5);
    assert_eq!(encode_model(&m, &[]).unwrap(), encode_model(&before, &[]).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m = model();
    let bytes = encode_model(&m, &[]).unwrap();
    let (back, extra) = decode_model(&bytes, std::path::Path::new("mem")).unwrap();
    assert!(extra.is_empty());
    assert_eq!(encode_model(&back, &[]).unwrap(), bytes);
}

#[test]
fn default_training_lowers_smoothed_loss_over_every_500_steps() {
    let oracle = OracleEmbedder::new(OracleConfig { dim_in: 256, channels: 1, dim_out: 64, gain: 2.65, seed: 31 }).unwrap();
    let world = ToyWorld::new(ToyWorldConfig::default(), &oracle).unwrap();
    let pairs: Vec<TrainingPair> = toy_dataset(&world, &oracle, &ToyDatasetConfig::default())
        .unwrap()
        .into_iter()
        .map(|s| TrainingPair { f_im: s.feature, im_gt: s.image })
        .collect();
    let bank = PerceptualBank::new(world.image_shape(), &PerceptualConfig::default()).unwrap();
    let mut m = model();
    let trace = train(&mut m, &oracle, &bank, &pairs, &TrainConfig::default()).unwrap();
    let mut ema = Vec::with_capacity(trace.len());
    let mut acc = trace[0].terms.total;
    for r in &trace {
        acc = 0.99 * acc + 0.01 * r.terms.total;
        ema.push(acc);
    }
    for t in 0..ema.len() - 500 {
        assert!(ema[t + 500] < ema[t], "step {t}: {} -> {}", ema[t], ema[t + 500]);
    }
}
