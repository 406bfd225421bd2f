use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DynamicGraph, Timestamp};

/// Chronological train/validation/test partition of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    /// Test events whose question never occurs in `train`.
    pub inductive_test: Vec<usize>,
    pub ratios: [f64; 3],
    /// Timestamp of the first validation and first test event, if any.
    pub val_start_time: Option<Timestamp>,
    pub test_start_time: Option<Timestamp>,
}

pub fn plan_split(g: &DynamicGraph, ratios: [f64; 3]) -> Result<SplitPlan> {
    if ratios.iter().any(|&r| r.is_nan() || r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n = g.len();
    if n < 3 {
        return Err(Error::Contract(format!("need at least 3 events to split, have {n}")));
    }
    // Guard against 0.8·10 landing on 7.999…
    let cut = |fraction: f64| ((fraction * n as f64) + 1e-9).floor() as usize;
    let train_end = cut(ratios[0]).min(n);
    let val_end = cut(ratios[0] + ratios[1]).clamp(train_end, n);

    let seen: HashSet<usize> = g.events()[..train_end].iter().map(|e| e.question.0).collect();
    let inductive_test = (val_end..n).filter(|&i| !seen.contains(&g.event(i).question.0)).collect();
    let time_at = |i: usize| (i < n).then(|| g.event(i).timestamp);
    Ok(SplitPlan {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..n,
        inductive_test,
        ratios,
        val_start_time: time_at(train_end),
        test_start_time: time_at(val_end),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ten_events_split_eight_one_one() {
        let rows: Vec<_> = (0..10).map(|i| (0, i % 3, i as i64, true, 0)).collect();
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let p = plan_split(&g, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((p.train, p.val, p.test), (0..8, 8..9, 9..10));
    }

    #[test]
    fn test_only_question_is_inductive() {
        let mut rows: Vec<_> = (0..9).map(|i| (0, 0, i as i64, true, 0)).collect();
        rows.push((0, 1, 9, false, 0));
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let p = plan_split(&g, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(p.inductive_test, vec![9]);
    }

    #[test]
    fn inductive_set_matches_set_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<_> = (0..1000)
            .map(|i| {
                // Later events draw from a wider question pool.
                let pool = 20 + i / 10;
                (rng.random_range(0..30), rng.random_range(0..pool), i as i64, rng.random_bool(0.6), 0)
            })
            .collect();
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        let p = plan_split(&g, [0.8, 0.1, 0.1]).unwrap();
        let train_qs: Vec<usize> = p.train.clone().map(|i| g.event(i).question.0).collect();
        let expected: Vec<usize> = p.test.clone().filter(|&i| !train_qs.contains(&g.event(i).question.0)).collect();
        assert!(!expected.is_empty());
        assert_eq!(p.inductive_test, expected);
        assert_eq!(p.train.end, p.val.start);
        assert_eq!(p.val.end, p.test.start);
        assert_eq!(p.test.end, g.len());
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = DynamicGraph::from_tuples(&[(0, 0, 1, true, 0), (0, 0, 2, true, 0)]).unwrap();
        assert!(plan_split(&g, [0.8, 0.1, 0.1]).is_err());
        let rows: Vec<_> = (0..5).map(|i| (0, 0, i as i64, true, 0)).collect();
        let g = DynamicGraph::from_tuples(&rows).unwrap();
        assert!(plan_split(&g, [0.8, 0.3, 0.1]).is_err());
        assert!(plan_split(&g, [1.0, 0.0, 0.0]).is_err());
    }
}
