mod common;

use i2i_core::adapter::AdapterParams;
use i2i_core::backbone::TaskHead;
use i2i_core::baselines::{
    closest_task_init, cosine, select_closest, PriorTask, TaskSimilarityMatrix,
};
use i2i_core::params::bit_identical;
use i2i_core::rng::Seed;

#[test]
fn table_six_selections() {
    let m = TaskSimilarityMatrix::from_csv(common::TABLE6).unwrap();
    let expected = [
        ("VQAv2", "VizWiz", 0.9877),
        ("Visual7W", "VQA-Abs", 0.9771),
        ("VQA-Abs", "Visual7W", 0.9771),
        ("VizWiz", "VQAv2", 0.9877),
        ("DAQUAR", "Visual7W", 0.9820),
    ];
    for (row, (task, pick, sim)) in expected.iter().enumerate() {
        assert_eq!(m.labels[row], *task);
        let others: Vec<usize> = (0..5).filter(|&j| j != row).collect();
        let chosen = m.select(row, &others).unwrap();
        assert_eq!(m.labels[chosen], *pick, "{task}");
        assert_eq!(m.values[row][chosen], Some(*sim));
    }
    assert_eq!(m.to_csv(), common::TABLE6);
    // Only already-learned tasks are candidates.
    assert_eq!(m.labels[m.select(4, &[0, 2, 3]).unwrap()], "VQAv2");
    assert!(m.select(1, &[1]).is_err());
}

#[test]
fn cosine_exact_values() {
    for v in [vec![0.3, -1.7, 2.2], vec![1e-3, 5.0], vec![7.0]] {
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
    }
    assert_eq!(cosine(&[1.0, 0.0, 0.0], &[0.0, 2.5, 0.0]).unwrap(), 0.0);
    assert_eq!(cosine(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
    assert_eq!(cosine(&[2.0, 0.0], &[-3.0, 0.0]).unwrap(), -1.0);
    assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    assert_eq!(select_closest(&[0.5, 0.9, 0.9]).unwrap(), 1);
    assert!(select_closest(&[]).is_err());
}

#[test]
fn closest_copies_then_trains() {
    let lab = common::tiny_lab();
    let cfg = &lab.backbone.config;
    let ds = &lab.datasets[0];
    let adapters = [
        AdapterParams::init(cfg, 4, Seed(1)).unwrap(),
        AdapterParams::init(cfg, 4, Seed(2)).unwrap(),
    ];
    let heads = [TaskHead::init(cfg, Seed(3)), TaskHead::init(cfg, Seed(4))];
    let query = i2i_core::forward::encode_pooled(&lab.backbone, &lab.psi0, &ds.train, 64).unwrap();
    let orth: Vec<f64> = query
        .iter()
        .enumerate()
        .map(|(i, _)| if i == 0 { 1.0 } else { 0.0 })
        .collect();
    let reps = [orth, query.clone()];
    let priors: Vec<PriorTask> = (0..2)
        .map(|i| PriorTask {
            adapter: &adapters[i],
            head: &heads[i],
            representation: &reps[i],
        })
        .collect();
    let out = closest_task_init(lab.context(), &ds.train, &ds.val, &priors, Seed(9)).unwrap();
    assert_eq!(out.source, 1);
    assert_eq!(out.similarities[1], 1.0);
    assert_eq!(out.query_representation, query);
    assert!(!bit_identical(&out.adapter, &adapters[1]));
    assert!(closest_task_init(lab.context(), &ds.train, &ds.val, &[], Seed(9)).is_err());
}
