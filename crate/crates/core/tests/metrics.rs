mod common;

use common::{synthetic_record, TABLE2_ROWS, TABLE2_TASKS, TABLE2_VANILLA};
use i2i_core::metrics::{knowledge_transfer, metric_table, MetricTable};

#[test]
fn published_transfers_follow_from_published_scores() {
    for (algo, variant, scores, published) in TABLE2_ROWS {
        for i in 0..5 {
            let t = knowledge_transfer(scores[i], TABLE2_VANILLA[i]).unwrap();
            assert!(
                (t - published[i]).abs() <= 0.05,
                "{algo} {variant:?} task {i}: {t} vs {}",
                published[i]
            );
        }
    }
    assert_eq!(
        format!("{:.2}", knowledge_transfer(61.52, 61.42).unwrap()),
        "0.16"
    );
}

#[test]
fn table_from_synthetic_records() {
    let vanilla = synthetic_record("vanilla", None, &TABLE2_TASKS, &TABLE2_VANILLA);
    let candidates: Vec<_> = TABLE2_ROWS
        .iter()
        .map(|(a, v, s, _)| synthetic_record(a, *v, &TABLE2_TASKS, s))
        .collect();
    let table = metric_table(&vanilla, &candidates).unwrap();
    assert_eq!(table.rows.len(), 5);
    for (algo, variant, _, published) in TABLE2_ROWS {
        let label = match variant {
            Some(v) => format!("{algo}_{v}"),
            None => algo.to_string(),
        };
        let row = table.rows.iter().find(|r| r.method == label).unwrap();
        for (i, id) in TABLE2_TASKS.iter().enumerate() {
            let col = table.task_ids.iter().position(|t| t == id).unwrap();
            assert!(
                (row.cells[col].transfer - published[i]).abs() <= 0.05,
                "{label} {id}"
            );
        }
    }
    let csv = table.to_csv();
    let back = MetricTable::from_csv(&csv).unwrap();
    assert_eq!(back.to_csv(), csv);

    let same = metric_table(&vanilla, std::slice::from_ref(&vanilla)).unwrap();
    assert!(same.rows[0].cells.iter().all(|c| c.transfer == 0.0));
    assert_eq!(same.rows[0].overall, 0.0);
}

#[test]
fn orders_average_and_mismatches_fail() {
    let ids = ["a", "b", "c"];
    let vanilla = synthetic_record("vanilla", None, &ids, &[50.0, 40.0, 20.0]);
    let o1 = synthetic_record("adapterfusion", None, &ids, &[50.0, 44.0, 22.0]);
    let o2 = synthetic_record("adapterfusion", None, &["c", "a", "b"], &[30.0, 55.0, 40.0]);
    let t = metric_table(&vanilla, &[o1, o2]).unwrap();
    let r = &t.rows[0];
    assert_eq!(r.orders, 2);
    // a is first in order one, so only order two counts: +10%.
    assert!((r.cells[0].transfer - 10.0).abs() < 1e-12);
    // b: +10% and 0%.
    assert!((r.cells[1].transfer - 5.0).abs() < 1e-12);
    // c: first in order two, so +10% from order one only.
    assert!((r.cells[2].transfer - 10.0).abs() < 1e-12);
    // Per-order overall: (10 + 10)/2 and (10 + 0)/2.
    assert!((r.overall - 7.5).abs() < 1e-12);

    let short = synthetic_record("i2i", Some("FF"), &["a", "b"], &[1.0, 2.0]);
    assert!(metric_table(&vanilla, &[short]).is_err());
    let zero = synthetic_record("vanilla", None, &ids, &[0.0, 40.0, 20.0]);
    let cand = synthetic_record("i2i", Some("FF"), &ids, &[1.0, 2.0, 3.0]);
    assert!(metric_table(&zero, &[cand]).is_err());
}
