use proptest::prelude::*;

use super::*;

#[test]
fn micro_examples() {
    let labels = [0, 1];
    assert_eq!(micro_f1(&[0, 1, 1], &[0, 1, 1], &labels).unwrap(), 1.0);
    assert_eq!(micro_f1(&[0, 1], &[1, 0], &labels).unwrap(), 0.0);
    assert!((micro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], &labels).unwrap() - 0.75).abs() < 1e-15);
    assert!(micro_f1(&[0], &[0, 1], &labels).is_err());
    assert!(micro_f1(&[0], &[2], &labels).is_err());
}

#[test]
fn macro_examples() {
    let labels = [0, 1];
    assert_eq!(macro_f1(&[0, 0, 1, 1], &[0, 0, 1, 1], &labels).unwrap(), 1.0);
    let m = macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0], &labels).unwrap();
    assert!((m - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(macro_f1(&[4, 4], &[4, 4], &[4]).unwrap(), 1.0);
    // A class never in gold nor predicted is skipped; predicted-only counts as 0.
    assert_eq!(macro_f1(&[0, 0], &[0, 0], &[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(macro_f1(&[0, 0], &[0, 2], &[0, 1, 2]).unwrap(), (2.0 / 3.0) / 2.0);
}

fn matrix(rows: &[&[f64]]) -> MetricMatrix {
    let mut m = MetricMatrix::default();
    for r in rows {
        m.push_row(r.to_vec(), r.to_vec(), r[0], r[0]).unwrap();
    }
    m
}

#[test]
fn forgetting_examples() {
    let flat = matrix(&[&[0.5], &[0.5, 0.5], &[0.5, 0.5, 0.5]]);
    assert_eq!(forgetting(&flat).unwrap().mean, 0.0);
    let drop = matrix(&[&[1.0], &[0.6, 0.8]]);
    let f = forgetting(&drop).unwrap();
    assert!((f.per_task[0] - 0.4).abs() < 1e-15);
    let rising = matrix(&[&[0.2], &[0.4, 0.5], &[0.6, 0.7, 0.8]]);
    assert!(forgetting(&rising).unwrap().per_task.iter().all(|v| *v == 0.0));
    let single = matrix(&[&[0.9]]);
    let f = forgetting(&single).unwrap();
    assert!(f.per_task.is_empty() && f.mean == 0.0);
    let mut broken = rising.clone();
    broken.micro[2].pop();
    assert!(forgetting(&broken).is_err());
}

#[test]
fn matrix_rows_are_checked() {
    let mut m = MetricMatrix::default();
    assert!(m.push_row(vec![0.1, 0.2], vec![0.1, 0.2], 0.1, 0.1).is_err());
    assert!(m.push_row(vec![1.5], vec![0.1], 0.1, 0.1).is_err());
    m.push_row(vec![0.25], vec![0.5], 0.25, 0.5).unwrap();
    assert_eq!(
        m.to_csv(),
        "after_task,eval_task,micro_f1,macro_f1\n1,1,0.25,0.5\n1,cumulative,0.25,0.5\n"
    );
}

#[test]
fn aggregate_examples() {
    let a = matrix(&[&[0.4], &[0.4, 0.4]]);
    let b = matrix(&[&[0.6], &[0.6, 0.6]]);
    let agg = aggregate_runs(&[a.clone(), b.clone()]).unwrap();
    assert!((agg.micro[1][0].mean - 0.5).abs() < 1e-15);
    assert!((agg.micro[1][0].std - 0.1).abs() < 1e-15);
    let same = aggregate_runs(&[a.clone(), a.clone(), a.clone()]).unwrap();
    assert!(same.cumulative_micro.iter().all(|c| c.std == 0.0));
    let swapped = aggregate_runs(&[b, a.clone()]).unwrap();
    assert_eq!(swapped, agg);
    assert!(aggregate_runs(std::slice::from_ref(&a)).is_err());
    assert!(aggregate_runs(&[a, matrix(&[&[0.1]])]).is_err());
}

#[test]
fn cell_rendering() {
    assert_eq!(
        Cell {
            mean: 0.512,
            std: 0.006
        }
        .render(),
        "51.2±0.6"
    );
    assert_eq!(Cell::of(&[0.3, 0.3]).render(), "30.0±0.0");
}

proptest! {
    #[test]
    fn micro_is_accuracy_and_both_bounded(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60)
    ) {
        let labels: Vec<usize> = (0..5).collect();
        let (gold, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let acc = gold.iter().zip(&pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64;
        let mi = micro_f1(&gold, &pred, &labels).unwrap();
        let ma = macro_f1(&gold, &pred, &labels).unwrap();
        prop_assert!((mi - acc).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&mi) && (0.0..=1.0).contains(&ma));
    }
}
