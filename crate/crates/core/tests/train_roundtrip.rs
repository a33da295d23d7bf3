//! Short training runs through the public API, followed by a checkpoint
//! round trip.

use hcnaf::experiments::toy;
use hcnaf::flow::CondAFConfig;
use hcnaf::hypernet::{HyperNet, HyperNetConfig};
use hcnaf::model::{ConditionalModel, Dataset, Model};
use hcnaf::training::{train, TrainConfig};

fn two_conditions() -> Dataset {
    let a = toy::gen_conditional_gaussian([-1.0, 1.0], 0.5, 300, 1).unwrap();
    let b = toy::gen_conditional_gaussian([1.5, -0.5], 0.5, 300, 2).unwrap();
    Dataset::concat(&[a, b]).unwrap()
}

fn short_run() -> TrainConfig {
    TrainConfig {
        max_iters: 150,
        val_every: 50,
        ..TrainConfig::default()
    }
}

fn toy_model(seed: u64) -> Model {
    let flow = CondAFConfig::new(2, 1, 4).unwrap();
    Model::Hcnaf(HyperNet::new(HyperNetConfig::new(2, vec![16], 16, 16), flow, seed).unwrap())
}

#[test]
fn training_lowers_nll_and_survives_checkpoint() {
    let data = two_conditions();
    let mut model = toy_model(3);
    let report = train(&mut model, &data, &short_run()).unwrap();
    assert!(report.best_val_nll < report.initial_val_nll - 0.1, "{report:?}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hcnaf");
    model.save(&path, &[("note".into(), "roundtrip".into())]).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, model);
    let before = model.log_prob_batch(&data.x, &data.c).unwrap();
    let after = loaded.log_prob_batch(&data.x, &data.c).unwrap();
    assert_eq!(before, after);
    assert_eq!(model.sample(&[-1.0, 1.0], 20, 5).unwrap(), loaded.sample(&[-1.0, 1.0], 20, 5).unwrap());
}

#[test]
fn training_is_deterministic() {
    let data = two_conditions();
    let run = || {
        let mut m = toy_model(8);
        let r = train(&mut m, &data, &short_run()).unwrap();
        (m, r.best_val_nll)
    };
    let (a, na) = run();
    let (b, nb) = run();
    assert_eq!(na.to_bits(), nb.to_bits());
    assert_eq!(a, b);
}
