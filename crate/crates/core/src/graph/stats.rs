//! Descriptive statistics: per-student answer intervals and repeated
//! attempts on the same question.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DynamicGraph, StudentId};

pub const DAY: i64 = 86_400;

/// `<1 min, <1 h, <1 day, <1 week, ≥1 week`.
pub const DEFAULT_BUCKET_EDGES: [i64; 4] = [60, 3_600, DAY, 7 * DAY];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalHistogram {
    /// Ascending upper bounds (exclusive); bucket `i` counts `Δt < edges[i]`
    /// not counted earlier, the final bucket counts everything else.
    pub edges: Vec<i64>,
    pub counts: Vec<u64>,
    pub total: u64,
    /// Share of intervals `≤ 1 day` and `> 1 day`.
    pub fraction_within_day: f64,
    pub fraction_beyond_day: f64,
}

/// Histogram of gaps between consecutive events of each student.
pub fn interval_stats(g: &DynamicGraph, bucket_edges: &[i64]) -> IntervalHistogram {
    debug_assert!(bucket_edges.windows(2).all(|w| w[0] < w[1]), "edges must ascend");
    let mut counts = vec![0u64; bucket_edges.len() + 1];
    let (mut within, mut total) = (0u64, 0u64);
    for s in 0..g.num_students() {
        for pair in g.student_events(StudentId(s)).windows(2) {
            let dt = g.event(pair[1]).timestamp - g.event(pair[0]).timestamp;
            let bucket = bucket_edges.iter().position(|&e| dt < e).unwrap_or(bucket_edges.len());
            counts[bucket] += 1;
            total += 1;
            if dt <= DAY {
                within += 1;
            }
        }
    }
    let frac = |x: u64| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    IntervalHistogram {
        edges: bucket_edges.to_vec(),
        counts,
        total,
        fraction_within_day: frac(within),
        fraction_beyond_day: frac(total - within),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatStats {
    pub pairs_total: usize,
    pub pairs_sampled: usize,
    /// Attempts per sampled (student, question) pair → number of pairs.
    pub repeats_histogram: BTreeMap<usize, usize>,
    pub max_repeats: usize,
    pub mean_repeats: f64,
    /// Failed attempts before the first correct one → number of pairs.
    pub attempts_before_success_histogram: BTreeMap<usize, usize>,
    pub mean_attempts_before_success: Option<f64>,
    /// Sampled pairs never answered correctly (excluded above).
    pub never_correct: usize,
}

/// Per-pair attempt counts over up to `sample_size` distinct
/// (student, question) pairs drawn uniformly without replacement.
pub fn repeat_stats(g: &DynamicGraph, sample_size: usize, seed: u64) -> RepeatStats {
    // Pair key → responses in time order.
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut pairs: HashMap<(usize, usize), Vec<bool>> = HashMap::new();
    for e in g.events() {
        let key = (e.student.0, e.question.0);
        pairs
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(e.correct);
    }
    let total = order.len();
    let take = sample_size.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = if take == total {
        (0..total).collect()
    } else {
        sample(&mut rng, total, take).into_vec()
    };
    chosen.sort_unstable();

    let mut repeats_histogram = BTreeMap::new();
    let mut before_histogram = BTreeMap::new();
    let (mut max_repeats, mut sum_repeats, mut sum_before, mut solved, mut never) = (0, 0usize, 0usize, 0usize, 0);
    for idx in chosen {
        let responses = &pairs[&order[idx]];
        let n = responses.len();
        *repeats_histogram.entry(n).or_insert(0) += 1;
        max_repeats = max_repeats.max(n);
        sum_repeats += n;
        match responses.iter().position(|&r| r) {
            Some(k) => {
                *before_histogram.entry(k).or_insert(0) += 1;
                sum_before += k;
                solved += 1;
            }
            None => never += 1,
        }
    }
    RepeatStats {
        pairs_total: total,
        pairs_sampled: take,
        repeats_histogram,
        max_repeats,
        mean_repeats: if take == 0 { 0.0 } else { sum_repeats as f64 / take as f64 },
        attempts_before_success_histogram: before_histogram,
        mean_attempts_before_success: (solved > 0).then(|| sum_before as f64 / solved as f64),
        never_correct: never,
    }
}
