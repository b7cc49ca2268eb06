mod common;

use i2i_core::backbone::{BackboneParams, TaskHead};
use i2i_core::forward::{Model, Modules};
use i2i_core::optim::AdamConfig;
use i2i_core::rng::Seed;
use i2i_core::train::{fit_supervised, BackboneSlot, PhaseHyper, TrainModules};

// Teacher-forced exact match must agree with greedy decoding, before and
// during training, including scores strictly between 0 and 100.
#[test]
fn teacher_forced_score_equals_greedy_decoding() {
    let config = common::tiny_config();
    let datasets = common::tiny_datasets(&config, 160, 60);
    let mut seen_partial = false;
    for ds in datasets.iter().take(3) {
        let mut backbone = BackboneParams::init(&config, Seed(3)).unwrap();
        let mut head = TaskHead::init(&config, Seed(4));
        for round in 0..4 {
            let model = Model::new(&backbone, &head, Modules::None);
            let forced = model.evaluate(&ds.val, 25).unwrap();
            let greedy = model.evaluate_by_decoding(&ds.val, 25).unwrap();
            assert_eq!(
                forced.to_bits(),
                greedy.to_bits(),
                "{} round {round}",
                ds.task_id
            );
            seen_partial |= forced > 0.0 && forced < 100.0;
            let hyper = PhaseHyper {
                epochs: 2,
                patience: 0,
                adam: AdamConfig {
                    lr: 1e-2,
                    ..AdamConfig::default()
                },
                ..PhaseHyper::default()
            };
            fit_supervised(
                BackboneSlot::Trainable(&mut backbone),
                &mut head,
                TrainModules::None,
                &ds.train,
                &ds.val,
                &hyper,
                Seed(7 + round),
            )
            .unwrap();
        }
    }
    assert!(seen_partial, "no partially correct model was compared");
}
